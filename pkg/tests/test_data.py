import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boundaryseg.data import (MAGIC, FormatError, Sample, SynthConfig, decode_sample, encode_sample, generate,
                              generate_one, load_dataset, load_sample, save_dataset, save_sample)
from boundaryseg.losses import extract_edge_target

# 2x2 sample written out by hand: image [[0, .25], [.5, 1]], mask [[0, 1], [1, 0]]
FIXTURE_2X2 = bytes.fromhex(
    "42534547" "01000000" "02000000" "02000000"
    "00000000" "0000803e" "0000003f" "0000803f"
    "00010100"
)


@pytest.fixture(scope="module")
def samples():
    return generate(SynthConfig(seed=3), 12)


class TestGenerate:
    def test_deterministic(self):
        a = generate(SynthConfig(seed=7), 4)
        b = generate(SynthConfig(seed=7), 4)
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()

    def test_seed_changes_data(self):
        assert not np.array_equal(generate_one(SynthConfig(seed=1), 0).mask, generate_one(SynthConfig(seed=2), 0).mask)

    def test_ranges_and_edges(self, samples):
        for s in samples:
            assert s.image.shape == s.mask.shape == (1, 64, 64)
            assert s.image.min() >= 0 and s.image.max() <= 1
            assert set(np.unique(s.mask)) <= {0.0, 1.0}
            assert extract_edge_target(s.mask[None]).s_true.any()

    def test_noiseless_separable(self):
        for s in generate(SynthConfig(noise_sigma=0.0, contrast=1.0, seed=4), 10):
            fg = s.image[s.mask == 1]
            bg = s.image[s.mask == 0]
            assert fg.min() >= bg.max()

    def test_foreground_fraction(self):
        fractions = [generate_one(SynthConfig(), i).mask.mean() for i in range(1000)]
        assert 0.02 <= np.mean(fractions) <= 0.25

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            generate(SynthConfig(), 0)

    @pytest.mark.parametrize("kw", [{"size": 2}, {"noise_sigma": -0.1}, {"blob_count_range": (0, 2)}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            SynthConfig(**kw)


class TestSampleFormat:
    def test_hand_written_fixture(self):
        s = decode_sample(FIXTURE_2X2)
        assert s.image[0].tolist() == [[0.0, 0.25], [0.5, 1.0]]
        assert s.mask[0].tolist() == [[0.0, 1.0], [1.0, 0.0]]
        assert encode_sample(s) == FIXTURE_2X2

    def test_round_trip_bit_exact(self, tmp_path, samples):
        for k, s in enumerate(samples[:4]):
            save_sample(tmp_path / f"{k}.bseg", s)
            back = load_sample(tmp_path / f"{k}.bseg")
            assert back.image.tobytes() == s.image.tobytes()
            assert back.mask.tobytes() == s.mask.tobytes()

    def test_dataset_round_trip(self, tmp_path, samples):
        names = save_dataset(tmp_path / "ds", samples[:3])
        assert (tmp_path / "ds" / "manifest.txt").read_text().split() == names
        back = load_dataset(tmp_path / "ds")
        assert all(np.array_equal(a.image, b.image) for a, b in zip(back, samples[:3]))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)

    @pytest.mark.parametrize("buf,match", [
        (b"XSEG" + FIXTURE_2X2[4:], "magic"),
        (FIXTURE_2X2[:4] + b"\x02\x00\x00\x00" + FIXTURE_2X2[8:], "version"),
        (FIXTURE_2X2[:8] + b"\x00\x00\x01\x00" + FIXTURE_2X2[12:], "dimensions"),
        (FIXTURE_2X2[:10], "truncated header"),
        (FIXTURE_2X2[:-1], "truncated payload"),
        (FIXTURE_2X2 + b"\x00", "trailing"),
        (FIXTURE_2X2[:-1] + b"\x07", "binary"),
    ])
    def test_malformed(self, tmp_path, buf, match):
        path = tmp_path / "bad.bseg"
        path.write_bytes(buf)
        with pytest.raises(FormatError, match=match):
            load_sample(path)

    def test_rejects_unrepresentable_image(self):
        with pytest.raises(ValueError):
            encode_sample(Sample(np.full((1, 2, 2), 0.1), np.zeros((1, 2, 2))))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1))
    def test_random_round_trip(self, h, w, seed):
        rng = np.random.default_rng(seed)
        img = rng.random((1, h, w)).astype(np.float32).astype(np.float64)
        mask = (rng.random((1, h, w)) < 0.5).astype(np.float64)
        back = decode_sample(encode_sample(Sample(img, mask)))
        assert np.array_equal(back.image, img) and np.array_equal(back.mask, mask)

    def test_magic_constant(self):
        assert MAGIC == b"BSEG"
