import math
import struct

import numpy as np
import pytest

from boundaryseg.autodiff import NonFiniteError, ParameterStore, Tape, Tensor
from boundaryseg.data import FormatError, SynthConfig, generate, stack
from boundaryseg.losses import LossWeights, total_loss
from boundaryseg.network import NetworkSpec, forward, init_parameters
from boundaryseg.train import (AdamState, TrainConfig, TrainingAborted, ablation_config, adam_step,
                               decode_checkpoint, encode_checkpoint, load_checkpoint, lr_schedule,
                               save_checkpoint, train)

TINY = NetworkSpec(levels=3, base_channels=4, shape_channels=2)


@pytest.fixture(scope="module")
def tiny_data():
    return generate(SynthConfig(size=16, seed=5, radius_range=(0.15, 0.3)), 6)


def _cfg(**kw):
    base = dict(epochs=4, batch_size=4, seed=0, shuffle_seed=3)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_endpoints(self):
        cfg = TrainConfig(epochs=300)
        assert lr_schedule(0, cfg) == 1e-3
        assert lr_schedule(300, cfg) == 0.0

    def test_midpoint(self):
        assert lr_schedule(150, TrainConfig(epochs=300)) == pytest.approx(5.3589e-4, abs=1e-8)

    def test_closed_form_and_monotone(self):
        cfg = TrainConfig(epochs=37, alpha0=2e-3)
        values = [lr_schedule(e, cfg) for e in range(38)]
        for e, v in enumerate(values):
            assert abs(v - 2e-3 * (1 - e / 37) ** 0.9) <= 1e-15
        assert all(b < a for a, b in zip(values, values[1:]))

    @pytest.mark.parametrize("e", [-1, 301])
    def test_out_of_range(self, e):
        with pytest.raises(ValueError):
            lr_schedule(e, TrainConfig(epochs=300))

    @pytest.mark.parametrize("kw", [{"alpha0": 0}, {"epochs": 0}, {"batch_size": 0}, {"objective": "bce"}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestAdam:
    def _store(self, value=0.5):
        store = ParameterStore()
        store.add("w", np.array([value]))
        return store

    def test_zero_gradient_leaves_fresh_parameters(self):
        store = self._store()
        state = AdamState.zeros_like(store)
        store["w"].grad = np.zeros(1)
        adam_step(store, state, 1e-3)
        assert store["w"].data[0] == 0.5
        assert state.m["w"][0] == 0 and state.v["w"][0] == 0

    def test_zero_gradient_decays_moments(self):
        store = self._store()
        state = AdamState.zeros_like(store)
        state.m["w"][...] = 0.2
        state.v["w"][...] = 0.3
        store["w"].grad = np.zeros(1)
        adam_step(store, state, 1e-3)
        assert state.m["w"][0] == pytest.approx(0.18, abs=1e-15)
        assert state.v["w"][0] == pytest.approx(0.3 * 0.999, abs=1e-15)

    def test_first_step_moves_by_lr(self):
        store = self._store()
        state = AdamState.zeros_like(store)
        store["w"].grad = np.ones(1)
        adam_step(store, state, 1e-3)
        # bias-corrected: m_hat = v_hat = 1, so delta = -lr / (1 + eps)
        assert store["w"].data[0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-15)
        assert state.step == 1

    def test_nan_gradient_names_parameter(self):
        store = self._store()
        store.add("other", np.zeros(2))
        state = AdamState.zeros_like(store)
        store["w"].grad = np.zeros(1)
        store["other"].grad = np.array([0.0, np.nan])
        with pytest.raises(NonFiniteError, match="'other'"):
            adam_step(store, state, 1e-3)
        assert store["w"].data[0] == 0.5 and state.step == 0


class TestCheckpoint:
    def _trained(self, tiny_data):
        res = train(tiny_data, _cfg(epochs=2), TINY)
        return res.params, res.state

    def test_round_trip(self, tmp_path, tiny_data):
        params, state = self._trained(tiny_data)
        save_checkpoint(tmp_path / "m.ckpt", params, state, 2)
        p2, s2, epoch = load_checkpoint(tmp_path / "m.ckpt", TINY)
        assert epoch == 2 and p2.equals(params) and s2.equals(state)
        assert encode_checkpoint(p2, s2, 2) == (tmp_path / "m.ckpt").read_bytes()

    def test_layout(self, tiny_data):
        params, state = self._trained(tiny_data)
        buf = encode_checkpoint(params, state, 7)
        magic, version, epoch, count = struct.unpack_from("<4sIII", buf)
        assert (magic, version, epoch) == (b"BCKP", 1, 7)
        names = [n for n, _ in decode_checkpoint(buf)[1]]
        assert count == len(names) == 3 * len(params) + 1
        assert f"{params.names()[0]}.m" in names and f"{params.names()[0]}.v" in names

    def test_bad_magic(self, tmp_path, tiny_data):
        buf = bytearray(encode_checkpoint(*self._trained(tiny_data), 1))
        buf[:4] = b"XCKP"
        (tmp_path / "bad.ckpt").write_bytes(bytes(buf))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_bad_version(self):
        store = ParameterStore()
        store.add("w", np.zeros(1))
        buf = bytearray(encode_checkpoint(store, AdamState.zeros_like(store), 0))
        buf[4:8] = struct.pack("<I", 9)
        with pytest.raises(FormatError, match="version"):
            decode_checkpoint(bytes(buf))

    def test_truncation_names_tensor(self):
        store = ParameterStore()
        store.add("alpha", np.arange(3.0))
        store.add("beta", np.arange(4.0).reshape(2, 2))
        buf = encode_checkpoint(store, AdamState.zeros_like(store), 0)
        # header 16, then "alpha": 2 + 5 + 1 + 4 + 24 bytes, then "beta": 2 + 4 + 1 + 8 + 32
        beta_payload = 16 + 36 + 2 + 4 + 1 + 8
        with pytest.raises(FormatError, match="payload of tensor 'beta'"):
            decode_checkpoint(buf[:beta_payload + 10])
        with pytest.raises(FormatError, match="dims of tensor 'beta'"):
            decode_checkpoint(buf[:beta_payload - 3])

    def test_spec_mismatch(self, tmp_path, tiny_data):
        save_checkpoint(tmp_path / "m.ckpt", *self._trained(tiny_data), 2)
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "m.ckpt", NetworkSpec(levels=3, base_channels=8, shape_channels=2))


class TestTrain:
    def test_deterministic(self, tiny_data):
        a = train(tiny_data, _cfg(), TINY)
        b = train(tiny_data, _cfg(), TINY)
        assert a.params.equals(b.params) and a.state.equals(b.state)
        assert [r.total for r in a.log] == [r.total for r in b.log]

    def test_ten_adam_steps_bit_identical(self, tiny_data):
        runs = [train(tiny_data[:4], _cfg(epochs=10, batch_size=4), TINY) for _ in range(2)]
        assert runs[0].state.step == 10
        assert runs[0].params.equals(runs[1].params)

    def test_shuffle_seed_independent_of_init(self, tiny_data):
        a = train(tiny_data, _cfg(epochs=1, batch_size=2, shuffle_seed=1), TINY)
        b = train(tiny_data, _cfg(epochs=1, batch_size=2, shuffle_seed=2), TINY)
        assert not a.params.equals(b.params)
        assert init_parameters(TINY, 0).equals(init_parameters(TINY, 0))

    def test_resume_is_bit_exact(self, tmp_path, tiny_data):
        cfg = _cfg(epochs=6, batch_size=4)
        full = train(tiny_data, cfg, TINY)
        first = train(tiny_data, cfg, TINY, stop_epoch=3)
        save_checkpoint(tmp_path / "half.ckpt", first.params, first.state, 3)
        params, state, epoch = load_checkpoint(tmp_path / "half.ckpt", TINY)
        rest = train(tiny_data, cfg, TINY, params=params, state=state, start_epoch=epoch)
        assert rest.params.equals(full.params) and rest.state.equals(full.state)

    def test_ablation_matches_plain_dice(self, tiny_data):
        cfg = _cfg(epochs=3)
        ablated = train(tiny_data, ablation_config(cfg), TINY)
        plain = train(tiny_data, TrainConfig(**{**cfg.__dict__, "objective": "dice"}), TINY)
        assert [r.dice_main for r in ablated.log] == [r.dice_main for r in plain.log]
        assert ablated.params.equals(plain.params)
        assert ablation_config(cfg).weights.is_no_edge_ablation

    def test_single_step_descent(self):
        spec = NetworkSpec()
        sample = generate(SynthConfig(seed=0), 1)
        images, masks = stack(sample)

        def loss(params):
            return total_loss(forward(Tensor(images), spec, params), masks, LossWeights()).total.item()

        before = loss(init_parameters(spec, 0))
        res = train(sample, TrainConfig(epochs=1), spec)
        assert loss(res.params) < before

    def test_eval_rows_and_checkpoints(self, tmp_path, tiny_data):
        ckpt = tmp_path / "run.ckpt"
        res = train(tiny_data, _cfg(epochs=4, eval_every=2, checkpoint_path=str(ckpt)), TINY,
                    eval_set=tiny_data[:2])
        assert [r.dice is not None for r in res.log] == [False, True, False, True]
        assert 0 <= res.log[-1].dice <= 1
        params, _, epoch = load_checkpoint(ckpt, TINY)
        assert epoch == 4 and params.equals(res.params)

    def test_non_finite_keeps_last_good_checkpoint(self, tmp_path, tiny_data):
        ckpt = tmp_path / "run.ckpt"

        def poison(row):
            if row.epoch == 1:
                params["stem.w"].data[0, 0, 0, 0] = math.nan

        params = init_parameters(TINY, 0)
        with pytest.raises(TrainingAborted, match="epoch 2"):
            train(tiny_data, _cfg(epochs=4, eval_every=2, checkpoint_path=str(ckpt)), TINY,
                  params=params, on_epoch=poison)
        kept, _, epoch = load_checkpoint(ckpt, TINY)
        assert epoch == 2 and np.isfinite(kept["stem.w"].data).all()

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train([], _cfg(), TINY)


def test_backward_after_nan_loss_raises():
    spec = TINY
    params = init_parameters(spec, 0)
    params["head.seg.b"].data[0] = math.nan
    x = Tensor(np.zeros((1, 1, 16, 16)))
    with Tape() as tape:
        loss = total_loss(forward(x, spec, params), np.zeros((1, 1, 16, 16))).total
    with pytest.raises(NonFiniteError):
        tape.backward(loss)
