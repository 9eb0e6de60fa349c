# %% [markdown]
# # The autodiff engine
#
# Everything in `decoseg` runs on a small tape: ops executed inside a
# `Graph` context append a node, and `Graph.backward` walks the tape in
# reverse. This notebook pokes at the pieces the networks are built from.

# %%
import numpy as np

from decoseg import ops
from decoseg.engine import Graph, Tensor
from decoseg.gradcheck import check_gradients, run_case, standard_suite

rng = np.random.default_rng(0)

# %% [markdown]
# ## A first backward pass
#
# `y = sum(relu(W x + b))` for a 3 x 4 matrix.

# %%
x = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
W = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
b = Tensor(np.zeros(3), requires_grad=True)

with Graph() as g:
    y = ops.sum_all(ops.relu(ops.fully_connected(x, W, b)))
    g.backward(y)

print("y =", y.item())
print("dy/db =", b.grad)   # how many rows had a positive pre-activation, per unit

# %% [markdown]
# ## Max-pooling remembers where the maximum was
#
# The switch map holds flat indices into the pooled plane. Unpooling
# puts values back at exactly those positions and zeros elsewhere.

# %%
img = rng.random((1, 1, 4, 4)).round(2)
pooled, switches = ops.maxpool2d(img, 2)
restored = ops.unpool2d(pooled, switches, 4, 4)
print(img[0, 0])
print(switches.indices[0, 0])
print(restored.data[0, 0])

# %% [markdown]
# ## Transposed convolution is the adjoint of convolution
#
# For any `x` and `y`: `<conv(x), y> == <x, deconv(y)>` when both use the
# same weight and no bias.

# %%
w = rng.standard_normal((5, 3, 3, 3))
x = rng.standard_normal((1, 3, 7, 7))
y = rng.standard_normal((1, 5, 7, 7))
lhs = np.vdot(ops.conv2d(x, w, np.zeros(5), pad=1).data, y)
rhs = np.vdot(x, ops.deconv2d(y, w, np.zeros(3), pad=1).data)
print(lhs, rhs, abs(lhs - rhs))

# %% [markdown]
# ## Finite differences
#
# `check_gradients` compares the tape against central differences of a
# random projection of the output.

# %%
errs = check_gradients(lambda x, w, b: ops.deconv2d(x, w, b, stride=2),
                       {"x": rng.standard_normal((2, 3, 4, 4)),
                        "w": rng.standard_normal((3, 2, 3, 3)),
                        "b": rng.standard_normal(2)}, rng)
print(errs)

# %% [markdown]
# The same suite `decoseg gradcheck` runs, one seed per case:

# %%
for case in standard_suite():
    print(f"{case.name:<24} {run_case(case, seed=0):.1e}")
