import numpy as np
import pytest

from mtreg.autodiff import (OPS, ContractError, Graph, ShapeError, backward_graph, check_gradients,
                            forward_op, grad_check)


def test_leaky_relu_values():
    g = Graph(np.float64)
    x = g.constant(np.array([-1.0, 2.0]))
    out = forward_op(g, "leaky_relu", [x], {"slope": 0.2})
    np.testing.assert_allclose(g.value(out), [-0.2, 2.0])


def test_dropout_identity_mask():
    g = Graph(np.float64)
    x = np.random.default_rng(0).normal(size=(2, 3, 3, 3))
    out = g.forward_op("dropout", [g.constant(x)], mask=np.ones(x.shape), p=1.0)
    assert np.array_equal(g.value(out), x)


def test_conv_stride_two_shape():
    g = Graph()
    x = g.constant(np.zeros((2, 8, 8, 8)))
    w = g.constant(np.zeros((4, 2, 3, 3, 3)))
    b = g.constant(np.zeros(4))
    assert g.value(g.forward_op("conv3d", [x, w, b], stride=2)).shape == (4, 4, 4, 4)
    x7 = g.constant(np.zeros((2, 7, 5, 3)))
    assert g.value(g.forward_op("conv3d", [x7, w, b], stride=2)).shape == (4, 4, 3, 2)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 4, 5, 3))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    g = Graph(np.float64)
    out = g.value(g.forward_op("conv3d", [g.constant(x), g.constant(w), g.constant(b)], stride=1))
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    ref = np.zeros((3, 4, 5, 3))
    for o in range(3):
        for z in range(4):
            for y in range(5):
                for xx in range(3):
                    ref[o, z, y, xx] = b[o] + np.sum(w[o] * xp[:, z:z + 3, y:y + 3, xx:xx + 3])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_shape_error_names_op():
    g = Graph()
    a = g.constant(np.zeros((2, 3)))
    b = g.constant(np.zeros((4, 5)))
    with pytest.raises(ShapeError, match="add"):
        g.forward_op("add", [a, b])
    x = g.constant(np.zeros((2, 4, 4, 4)))
    w = g.constant(np.zeros((4, 3, 3, 3, 3)))
    with pytest.raises(ShapeError, match="conv3d"):
        g.forward_op("conv3d", [x, w, g.constant(np.zeros(4))])


def test_mean_gradient_is_uniform():
    g = Graph(np.float64)
    x = g.variable(np.arange(12.0).reshape(3, 4))
    loss = g.forward_op("reduce_mean", [x])
    backward_graph(g, loss)
    np.testing.assert_allclose(g.grad(x), np.full((3, 4), 1 / 12))


def test_square_chain_rule():
    g = Graph(np.float64)
    x = g.variable(np.array([3.0]))
    loss = g.forward_op("reduce_mean", [g.forward_op("square", [x])])
    g.backward(loss)
    assert g.grad(x).tolist() == [6.0]


def test_non_scalar_loss_rejected():
    g = Graph()
    x = g.variable(np.zeros(3))
    with pytest.raises(ContractError):
        g.backward(x)


def test_fan_out_accumulates():
    x0 = np.random.default_rng(2).normal(size=(2, 3))
    g1 = Graph(np.float64)
    x1 = g1.variable(x0)
    g1.backward(g1.forward_op("reduce_mean", [g1.forward_op("add", [x1, x1])]))
    g2 = Graph(np.float64)
    x2 = g2.variable(x0)
    g2.backward(g2.forward_op("reduce_mean", [g2.forward_op("scale", [x2], factor=2.0)]))
    np.testing.assert_array_equal(g1.grad(x1), g2.grad(x2))


def test_nodes_are_topological():
    g = Graph()
    a = g.variable(np.ones(3))
    b = g.forward_op("exp", [a])
    c = g.forward_op("add", [a, b])
    for i, node in enumerate(g.nodes):
        assert all(j < i for j in node.inputs)
    g.backward(g.forward_op("reduce_mean", [c]))
    for n in (a, b, c):
        assert g.grad(n).shape == g.value(n).shape


def test_constant_gets_no_gradient():
    g = Graph()
    a = g.variable(np.ones(3))
    k = g.constant(np.ones(3))
    g.backward(g.forward_op("reduce_mean", [g.forward_op("add", [a, k])]))
    assert g.grad(k) is None


def test_deterministic_replay():
    rng = np.random.default_rng(5)
    x, w, b = rng.normal(size=(2, 6, 6, 6)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)

    def run():
        g = Graph(np.float32)
        ids = [g.variable(x), g.variable(w), g.variable(b)]
        out = g.forward_op("conv3d", ids, stride=2)
        g.backward(g.forward_op("reduce_mean", [g.forward_op("square", [out])]))
        return g.value(out), [g.grad(i) for i in ids]

    (o1, g1), (o2, g2) = run(), run()
    assert o1.tobytes() == o2.tobytes()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(g1, g2))


@pytest.mark.parametrize("kind", sorted(OPS))
def test_grad_check_every_op(kind):
    assert grad_check(kind, seed=11) <= 1e-5


def test_leaky_relu_grad_exact():
    assert grad_check("leaky_relu", seed=3) <= 1e-7


def test_conv_weight_grad_on_6cubed():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 6, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3, 3)) * 0.3
    b = rng.normal(size=3)
    c = rng.normal(size=(3, 6, 6, 6))

    def build(g, ids):
        out = g.forward_op("conv3d", ids, stride=1)
        return g.forward_op("reduce_mean", [g.forward_op("square", [g.forward_op("add", [out, g.constant(c)])])])

    assert check_gradients(build, [x, w, b], wrt=[1], max_samples=200) <= 1e-5


def test_warp_grad_away_from_integers():
    assert grad_check("warp_trilinear", shapes=[(1, 6, 5, 7)], seed=8) <= 1e-5


def test_upsample_shape_and_constant():
    g = Graph(np.float64)
    out = g.value(g.forward_op("upsample_trilinear_2x", [g.constant(np.full((2, 3, 4, 5), 1.5))]))
    assert out.shape == (2, 6, 8, 10)
    np.testing.assert_allclose(out, 1.5)


def test_pad_crop_roundtrip():
    x = np.random.default_rng(0).normal(size=(1, 3, 4, 5))
    g = Graph(np.float64)
    p = g.forward_op("pad_edge", [g.constant(x)], width=2)
    c = g.forward_op("crop", [p], start=(2, 2, 2), size=(3, 4, 5))
    assert np.array_equal(g.value(c), x)
    assert np.array_equal(g.value(p), np.pad(x, ((0, 0), (2, 2), (2, 2), (2, 2)), mode="edge"))
