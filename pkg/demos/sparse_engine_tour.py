"""A walk through the sparse voxel engine on a cloud small enough to print.

Run with ``python3 demos/sparse_engine_tour.py``.
"""

import numpy as np

from pcenhance import autograd as ag
from pcenhance import sparse as sp
from pcenhance.sparse import SparseTensor, build_kernel_map

rng = np.random.default_rng(0)

# An L-shaped cloud of five voxels with one feature channel each. Sparse
# tensors keep their rows in Morton (z-order) so every later step is reproducible.
coords = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [2, 1, 0], [2, 2, 0]])
x = SparseTensor.from_coords(coords, np.arange(1.0, 6.0)[:, None])
print("rows in Morton order:\n", x.coords)

# A kernel map lists (input row, output row, tap) triples: which input voxel
# feeds which output voxel through which of the 27 offsets of a 3x3x3 kernel.
km = build_kernel_map(x, x.coords, 3)
print(f"\n{len(km)} neighbour pairs; the first few (in, out, tap):\n", km.triples()[:6])

# With all weights 1, a convolution counts each voxel's occupied neighbourhood
# weighted by the features, and a centre-only kernel is the identity.
ones = np.ones((27, 1, 1))
print("\nneighbourhood sums:", sp.spconv(x, ones).feats.data[:, 0])
centre = np.zeros((27, 1, 1))
centre[13] = 1.0
print("centre tap only:   ", sp.spconv(x, centre).feats.data[:, 0])

# The generalized convolution writes onto arbitrary output coordinates,
# here the same shape shifted by one voxel, which is how features of the
# previous frame are carried onto the current frame's geometry.
shifted = coords + np.array([0, 1, 0])
shifted = shifted[np.argsort(sp.morton_keys(shifted))]
print("\nonto shifted coordinates:", sp.gsconv(x, shifted, ones).feats.data[:, 0])

# Pooling averages each 2x2x2 block into its parent; a transposed convolution
# with a 2x2x2 kernel grows every parent back into eight candidate children.
pooled = sp.pool(x)
print("\npooled (stride 2):", pooled.coords.tolist(), pooled.feats.data[:, 0])
children = sp.tsconv_upsample(pooled, np.ones((8, 1, 1)))
print(f"upsampled back to stride 1: {len(children)} candidates")

# Gradients flow through all of it. The loss below is the sum of a ReLU'd
# convolution; its gradient w.r.t. the centre weight is the sum of the
# features of the voxels whose outputs stayed positive.
w = ag.Parameter(rng.uniform(-0.5, 1.0, size=(27, 1, 1)))
out = sp.relu(sp.spconv(x, w))
loss = ag.sum_all(out.feats)
loss.backward()
alive = out.feats.data[:, 0] > 0
print(f"\nloss {float(loss.data):.3f}; {alive.sum()} of {len(x)} outputs positive")
print(f"d loss / d centre weight = {w.grad[13, 0, 0]:.3f}, "
      f"features of the positive voxels sum to {x.feats.data[alive, 0].sum():.3f}")
