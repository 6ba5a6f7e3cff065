"""
Training the two-stream network
===============================

A reduced network (3 levels, 32x32 images) trained for a few epochs with
the full boundary-aware objective. Loss components are logged separately:
main Dice, edge-head Dice and the class-balanced edge cross entropy.
"""

import tempfile
from pathlib import Path

from boundaryseg import NetworkSpec, TrainConfig, train
from boundaryseg.data import SynthConfig, generate
from boundaryseg.train import load_checkpoint

spec = NetworkSpec(levels=3, base_channels=8, shape_channels=4)
train_set = generate(SynthConfig(size=32, seed=1), 16)
held_out = generate(SynthConfig(size=32, seed=2), 8)

with tempfile.TemporaryDirectory() as tmp:
    cfg = TrainConfig(epochs=12, batch_size=8, eval_every=4, checkpoint_path=str(Path(tmp) / "model.ckpt"))
    result = train(train_set, cfg, spec, eval_set=held_out)
    for row in result.log:
        line = f"epoch {row.epoch:2d} lr {row.lr:.2e} total {row.total:8.3f} dice_main {row.dice_main:.3f}"
        if row.dice is not None:
            line += f" | held-out Dice {row.dice:.3f} HD {row.hausdorff:.2f}"
        print(line)

    params, state, epoch = load_checkpoint(cfg.checkpoint_path, spec)
    print("checkpoint epoch", epoch, "adam steps", state.step, "identical:", params.equals(result.params))
