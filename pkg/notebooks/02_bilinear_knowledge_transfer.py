"""
Bilinear feature sampling and knowledge transfer
================================================

Visual features are read off a convolutional feature map at an X x Y grid
inside each box with the tent kernel ``k(t) = max(0, 1 - |t|)``. Because
the sampler is differentiable in the sampling positions, a loss on the
sampled features sends gradients all the way back to the box coordinates.
"""

# %%
import numpy as np

from vtranse.features import (
    BoundingBox,
    FeatureMap,
    bilinear_backward,
    bilinear_sample,
    grid_positions,
    visual_feature,
)
from vtranse.numerics import finite_diff_grad, relative_error

rng = np.random.default_rng(1)

# %% [markdown]
# A 6x5 map with two channels, and a box in image coordinates with stride 4.

# %%
fmap = FeatureMap(rng.normal(size=(6, 5, 2)), stride=4.0)
box = BoundingBox(3.3, 2.1, 10.2, 9.7)
grid = grid_positions(box, 2, 2, fmap.stride)
print("grid centres on the map:\n", grid.round(3))
print("sampled block shape:", bilinear_sample(fmap, grid).shape)

# %% [markdown]
# The sampler reproduces a constant map exactly and returns the map value
# at integer positions.

# %%
flat = FeatureMap(np.full((6, 5, 2), 0.7), 1.0)
print("constant map:", bilinear_sample(flat, grid).ravel())
print("integer grid:", bilinear_sample(fmap, np.array([[[2.0, 3.0]]]))[0, 0],
      "vs", fmap.values[2, 3])

# %% [markdown]
# Gradient into the box: pick a random linear read-out of the sampled
# block and compare the analytic box gradient with finite differences.

# %%
g = rng.normal(size=(2, 2, 2))
_, _, dbox = bilinear_backward(fmap, grid, g)


def readout(b):
    return float(np.sum(g * visual_feature(fmap, BoundingBox(*b), 2, 2)[0].reshape(2, 2, 2)))


numeric = finite_diff_grad(readout, box.as_array())
print("analytic dbox:", dbox.round(5))
print("numeric  dbox:", numeric.round(5))
print("relative error:", relative_error(dbox, numeric))
