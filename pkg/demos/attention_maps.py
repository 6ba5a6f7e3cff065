"""
Inspecting the attention gates
==============================

Each gate produces a single-channel map in (0, 1) at its level's
resolution. We resize the maps to the label size and correlate them with
the inner boundary of the true mask.
"""

import numpy as np

import boundaryseg.autodiff as ad
from boundaryseg import NetworkSpec, TrainConfig, predict, train
from boundaryseg.data import SynthConfig, generate, stack
from boundaryseg.losses import extract_edge_target

spec = NetworkSpec(levels=3, base_channels=8, shape_channels=4)
samples = generate(SynthConfig(size=32, seed=3), 8)
result = train(samples, TrainConfig(epochs=10, batch_size=8), spec)

images, masks = stack(samples)
_, _, alphas = predict(images, spec, result.params)
edges = extract_edge_target(masks, per_image=True).s_true

for g, alpha in enumerate(alphas, 1):
    full = ad.resize_bilinear(ad.Tensor(alpha), 32, 32).data
    corr = [np.corrcoef(full[i].ravel(), edges[i].ravel())[0, 1] for i in range(len(samples))]
    print(f"gate {g}: map {alpha.shape[2]}x{alpha.shape[3]}, range [{alpha.min():.2f}, {alpha.max():.2f}], "
          f"mean edge correlation {np.mean(corr):+.3f}")
