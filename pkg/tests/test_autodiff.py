import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from taylortd import autodiff as ad
from taylortd.rng import make_rng

from conftest import check_node_gradients, rel_err


def test_forward_examples():
    m = ad.matmul(ad.const([[1.0, 2.0], [3.0, 4.0]]), ad.const([[1.0], [1.0]]))
    assert_array_equal(ad.evaluate(m), [[3.0], [7.0]])
    assert ad.evaluate(ad.sum(ad.relu(ad.const([-1.0, 2.0, -3.0])))) == 2.0
    assert ad.evaluate(ad.tanh(ad.const(0.0))) == 0.0


def test_evaluate_is_idempotent():
    x = ad.tanh(ad.param([0.3, -1.2]))
    assert ad.evaluate(x) is ad.evaluate(x)


def test_scalar_derivatives():
    x = ad.param(3.0)
    assert ad.grad(x * x, [x])[0] == 6.0
    x = ad.param(2.0)
    (g,) = ad.grad(x * x * x, [x], create_graph=True)
    assert_allclose(ad.grad(g, [x])[0], 12.0, rtol=0, atol=1e-12)


def test_stopgrad_examples():
    x = ad.param(5.0)
    assert ad.grad(ad.stopgrad(x) * x, [x])[0] == 5.0
    assert ad.grad(ad.stopgrad(x * x), [x])[0] == 0.0


def test_stopgrad_boundary_is_exactly_zero():
    rng = make_rng(0)
    for _ in range(20):
        x = ad.param(rng.standard_normal(4))
        y = ad.sum(ad.tanh(ad.stopgrad(ad.square(x)) * 3.0))
        g = ad.grad(y, [x])[0]
        assert_array_equal(g, np.zeros(4))
        assert not np.signbit(g).any()


def test_stopgrad_product_matches_explicit_product():
    # gradient of sg(delta) * Q(theta) equals delta * dQ/dtheta
    rng = make_rng(1)
    theta = ad.param(rng.standard_normal(5))
    x = rng.standard_normal(5)
    q = ad.tanh(ad.sum(theta * x))
    delta = 0.7 - q
    g = ad.grad(ad.stopgrad(delta) * q, [theta])[0]
    dq = (1.0 - q.value ** 2) * x
    assert_allclose(g, delta.value * dq, rtol=1e-14)


def test_cosine_similarity_examples():
    v = ad.const([0.3, -2.0, 1.5])
    assert_allclose(ad.cosine_similarity(v, v).value, 1.0, rtol=1e-15)
    assert ad.cosine_similarity(ad.const([1.0, 0.0]), ad.const([0.0, 1.0])).value == 0.0
    assert_allclose(ad.cosine_similarity(ad.const([1.0, 2.0, 3.0]), ad.const([2.0, 4.0, 6.0])).value, 1.0,
                    rtol=1e-15)


def test_cosine_similarity_zero_vector_is_finite():
    u = ad.param(np.zeros(3))
    s = ad.cosine_similarity(u, ad.const([1.0, 2.0, 3.0]))
    assert s.value == 0.0
    assert np.all(np.isfinite(ad.grad(s, [u])[0]))


def test_cosine_similarity_range():
    rng = make_rng(2)
    for _ in range(200):
        u = rng.standard_normal((3, 6)) * rng.lognormal(size=(3, 1))
        v = u * rng.choice([-1.0, 1.0], size=(3, 1)) if rng.random() < 0.3 else rng.standard_normal((3, 6))
        s = ad.cosine_similarity(ad.const(u), ad.const(v)).value
        assert np.all(s <= 1.0 + 1e-12) and np.all(s >= -1.0 - 1e-12)


def test_finite_difference_examples():
    g = ad.finite_difference_gradient(lambda x: float(np.sum(x * x)), np.array([1.0, 2.0]), 1e-5)
    assert_allclose(g, [2.0, 4.0], rtol=0, atol=1e-8)
    assert_array_equal(ad.finite_difference_gradient(lambda x: 3.0, np.ones(4)), np.zeros(4))
    with pytest.raises(FloatingPointError):
        ad.finite_difference_gradient(lambda x: float("nan"), np.ones(2))


def _pos(rng, shape):
    return np.abs(rng.standard_normal(shape)) + 0.5


# name -> (function of nodes, input generator)
PRIMITIVES = {
    "add": (lambda a, b: a + b, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    "add_broadcast": (lambda a, b: a + b, lambda r: [r.standard_normal((3, 4)), r.standard_normal(4)]),
    "sub": (lambda a, b: a - b, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 1))]),
    "mul": (lambda a, b: a * b, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    "div": (lambda a, b: a / b, lambda r: [r.standard_normal((3, 4)), _pos(r, (3, 4))]),
    "neg": (lambda a: -a, lambda r: [r.standard_normal(5)]),
    "matmul": (ad.matmul, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
    "transpose": (ad.transpose, lambda r: [r.standard_normal((3, 4))]),
    "reshape": (lambda a: ad.reshape(a, (2, 6)), lambda r: [r.standard_normal((3, 4))]),
    "sum_all": (lambda a: ad.sum(a), lambda r: [r.standard_normal((3, 4))]),
    "sum_axis": (lambda a: ad.sum(a, axis=0), lambda r: [r.standard_normal((3, 4))]),
    "mean": (lambda a: ad.mean(a, axis=-1), lambda r: [r.standard_normal((3, 4))]),
    "relu": (ad.relu, lambda r: [r.standard_normal((3, 4))]),
    "tanh": (ad.tanh, lambda r: [r.standard_normal((3, 4))]),
    "sigmoid": (ad.sigmoid, lambda r: [r.standard_normal((3, 4))]),
    "softplus": (ad.softplus, lambda r: [r.standard_normal((3, 4))]),
    "exp": (ad.exp, lambda r: [r.standard_normal((3, 4))]),
    "log": (ad.log, lambda r: [_pos(r, (3, 4))]),
    "sin": (ad.sin, lambda r: [r.standard_normal((3, 4))]),
    "cos": (ad.cos, lambda r: [r.standard_normal((3, 4))]),
    "square": (ad.square, lambda r: [r.standard_normal((3, 4))]),
    "sqrt": (ad.sqrt, lambda r: [_pos(r, (3, 4))]),
    "maximum": (ad.maximum, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    "clip": (lambda a: ad.clip(a, -0.5, 0.5), lambda r: [r.standard_normal((3, 4))]),
    "concat": (lambda a, b: ad.concat([a, b], axis=-1), lambda r: [r.standard_normal((3, 2)), r.standard_normal((3, 3))]),
    "slice": (lambda a: a[:, 1:3], lambda r: [r.standard_normal((3, 4))]),
    "broadcast_to": (lambda a: ad.broadcast_to(a, (3, 4)), lambda r: [r.standard_normal(4)]),
    "dot": (ad.dot, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    "norm": (ad.norm, lambda r: [r.standard_normal((3, 4))]),
    "cosine_similarity": (ad.cosine_similarity, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    fn, gen = PRIMITIVES[name]
    for seed in range(20):
        rng = make_rng((seed, 7))
        assert check_node_gradients(fn, gen(rng), rng) < 1e-5, (name, seed)


@pytest.mark.parametrize("name", ["tanh", "sin", "mul", "div", "sqrt", "norm", "cosine_similarity", "matmul"])
def test_second_order_gradients_match_finite_differences(name):
    # differentiate the taped backward pass once more
    fn, gen = PRIMITIVES[name]
    for seed in range(20):
        rng = make_rng((seed, 8))
        values = gen(rng)
        R = rng.standard_normal(fn(*[ad.const(v) for v in values]).shape)

        def first_grad(*nodes):
            g = ad.grad(ad.sum(fn(*nodes) * R), nodes, create_graph=True)
            return ad.concat([ad.reshape(gi, (-1,)) for gi in g], axis=-1)

        assert check_node_gradients(first_grad, values, rng) < 1e-5, (name, seed)


def test_nested_sin_second_derivative():
    rng = make_rng(3)
    for x0 in rng.uniform(-4.0, 4.0, 20):
        x = ad.param(x0)
        (g,) = ad.grad(ad.sin(x), [x], create_graph=True)
        (h,) = ad.grad(g, [x])
        assert abs(h + np.sin(x0)) < 1e-10


def test_mlp_gradient_matches_finite_differences():
    for seed in range(5):
        rng = make_rng((seed, 9))
        params = ad.init_mlp([3, 5, 4, 1], rng, hidden="tanh")
        X = rng.standard_normal((6, 3))
        leaves = params.nodes()

        def loss(*nodes):
            p = ad.MlpParams(list(nodes[0::2]), list(nodes[1::2]), params.activations)
            return ad.mlp_forward(p, X)

        values = [n.value.copy() for n in leaves]
        assert check_node_gradients(loss, values, rng) < 1e-6


def test_shape_error_names_primitive():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(ad.const(np.ones((2, 3))), ad.const(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.const(np.ones((2, 3))) + ad.const(np.ones((4,)))


def test_non_scalar_root_rejected():
    x = ad.param(np.ones(3))
    with pytest.raises(ad.ShapeError):
        ad.grad(x * 2.0, [x])


def test_unreached_target_gets_zero():
    x, y = ad.param(1.0), ad.param(np.ones(2))
    assert_array_equal(ad.grad(x * x, [y])[0], np.zeros(2))


def test_non_finite_values_rejected_in_checked_mode():
    with pytest.raises(FloatingPointError):
        ad.const([1.0, np.inf])


def test_generation_increases_along_edges():
    x = ad.param(1.0)
    y = ad.tanh(x * 2.0)
    assert y.generation > y.parents[0].generation > x.generation


def test_values_are_immutable():
    x = ad.param(np.ones(3))
    with pytest.raises(ValueError):
        x.value[0] = 2.0
