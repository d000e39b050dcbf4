"""
The differentiation tape
========================

Every loss and layer is a sequence of ops recorded on a ``Graph``. A single
reverse sweep fills in the gradients, and ``check_gradients`` compares them
with central differences.
"""

import numpy as np

from mtreg.autodiff import OPS, Graph, check_gradients, grad_check

g = Graph(np.float64)
x = g.variable(np.array([[1.0, -2.0, 3.0]]))
y = g.forward_op("leaky_relu", [x], slope=0.2)
loss = g.forward_op("reduce_mean", [g.forward_op("square", [y])])
g.backward(loss)
print("loss", g.value(loss), "grad", g.grad(x))

# a trilinear warp, differentiated with respect to the displacement field
rng = np.random.default_rng(0)
src = rng.random((1, 6, 6, 6))
field = rng.uniform(-0.4, 0.4, size=(3, 6, 6, 6)) + 0.3


def build(graph, ids):
    warped = graph.forward_op("warp_trilinear", ids)
    return graph.forward_op("reduce_mean", [graph.forward_op("square", [warped])])


print("warp field gradient rel. error:", check_gradients(build, [src, field], wrt=[1]))

# the whole op set
for kind in sorted(OPS):
    print(f"{kind:>22}: {grad_check(kind):.1e}")
