"""
Edge supervision on and off
===========================

The "no edge loss" configuration sets lambda2 = lambda3 = 0, leaving only
the main-stream Dice term. Both runs share data, init and batch order.
"""

from boundaryseg import NetworkSpec, TrainConfig, train
from boundaryseg.data import SynthConfig, generate
from boundaryseg.train import ablation_config, evaluate_model

spec = NetworkSpec(levels=3, base_channels=8, shape_channels=4)
train_set = generate(SynthConfig(size=32, seed=10, boundary_jitter=0.4), 16)
held_out = generate(SynthConfig(size=32, seed=11, boundary_jitter=0.4), 16)

full = TrainConfig(epochs=10, batch_size=8, seed=0)
for name, cfg in (("full objective", full), ("no edge loss", ablation_config(full))):
    params = train(train_set, cfg, spec).params
    summary = evaluate_model(held_out, spec, params)
    print(f"{name}:")
    print("  " + summary.table().replace("\n", "\n  "))
