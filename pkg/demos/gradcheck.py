"""
Checking reverse-mode gradients
===============================

Every op in the library records a backward closure on the active tape.
Here we differentiate a small conv -> norm -> sigmoid chain by hand and
compare it with central differences, then run the full op suite.
"""

import numpy as np

import boundaryseg.autodiff as ad
from boundaryseg.autodiff import Tape, Tensor
from boundaryseg.gradcheck import check_gradients, run_suite

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
k = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
gamma = Tensor(np.ones(3), requires_grad=True)
beta = Tensor(np.zeros(3), requires_grad=True)


def chain(x, k, gamma, beta):
    h = ad.conv2d(x, k, padding=1, dilation=1)
    return ad.mean_all(ad.sigmoid(ad.instance_norm(h, gamma, beta)))


# one backward pass fills .grad on every leaf that asked for it
with Tape() as tape:
    loss = chain(x, k, gamma, beta)
tape.backward(loss)
print("loss", loss.item(), "| dL/dk norm", np.linalg.norm(k.grad))

# same chain against finite differences
print("chain max rel error: %.2e" % check_gradients(chain, [x, k, gamma, beta]))

# the suite the CLI's `gradcheck` command runs
for result in run_suite(trials=2):
    print(f"{result.name:32s} {result.max_rel_error:.2e}")
