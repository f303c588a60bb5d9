import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rawflow import numerics as nx
from rawflow.errors import CapabilityError, DimensionError, NumericError


def fd_check(fn, params, h=1e-5):
    """Max relative error between tape gradients and central differences over every coordinate."""
    grads = nx.grad(fn, params)
    worst = 0.0
    for name in params:
        numeric = nx.finite_difference(lambda p: float(nx._data(fn(p))), params, name, h=h)
        idx = list(numeric)
        worst = max(worst, nx.relative_error([grads[name][i] for i in idx], [numeric[i] for i in idx]))
    return worst


# matmul ------------------------------------------------------------------------------


def test_matmul_identity():
    out = nx.matmul(np.eye(2), np.eye(2))
    np.testing.assert_array_equal(out.data, np.eye(2))


def test_matmul_hand_example():
    out = nx.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_inner_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_transpose_identity(rng):
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 5))
    lhs = nx.transpose(nx.matmul(a, b)).data
    rhs = nx.matmul(nx.transpose(b), nx.transpose(a)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


# softmax -----------------------------------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax_lastdim(np.zeros(2)).data, [0.5, 0.5])
    big = nx.softmax_lastdim(np.array([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(nx.softmax_lastdim(np.log([1.0, 2.0, 3.0])).data, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        nx.softmax_lastdim(np.array([0.0, np.nan]))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_are_distributions(xs):
    p = nx.softmax_lastdim(np.array(xs)).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-6


# grad basics -------------------------------------------------------------------------------


def test_grad_of_sum_is_ones(rng):
    p = rng.standard_normal((3, 4, 2))
    g = nx.grad(lambda q: nx.tsum(q["p"]), {"p": p})["p"]
    np.testing.assert_array_equal(g, np.ones_like(p))


def test_grad_of_sum_squares():
    g = nx.grad(lambda q: nx.tsum(nx.mul(q["p"], q["p"])), {"p": np.array([1.0, 2.0])})["p"]
    np.testing.assert_allclose(g, [2.0, 4.0])


def test_unsupported_primitive_raises_capability_error():
    with pytest.raises(CapabilityError):
        nx.grad(lambda q: nx.tsum(nx.floor(q["p"])), {"p": np.array([0.5, 1.5])})


def test_untouched_parameter_gets_zero_gradient():
    g = nx.grad(lambda q: nx.tsum(q["a"]), {"a": np.ones(2), "b": np.ones(3)})
    np.testing.assert_array_equal(g["b"], np.zeros(3))


def test_gradient_target_must_be_scalar():
    with pytest.raises(DimensionError):
        nx.grad(lambda q: q["a"], {"a": np.ones(2)})


def test_tape_visits_each_node_once():
    calls = []
    with nx.Tape() as tape:
        x = tape.watch(nx.Tensor(np.array([1.0, 2.0])))
        y = nx.mul(x, x)
        z = nx.add(y, y)
        out = nx.tsum(z)
    for node in tape.nodes:
        orig = node.vjp

        def counted(g, orig=orig, name=node.name):
            calls.append(name)
            return orig(g)

        node.vjp = counted
    g = tape.gradient(out, [x])[0]
    np.testing.assert_allclose(g, [4.0, 8.0])
    assert calls == ["sum", "add", "mul"]


def test_tensors_are_read_only():
    t = nx.Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


# finite-difference oracle per primitive ------------------------------------------------------

U = lambda rng, *shape: rng.uniform(-1.0, 1.0, size=shape)  # noqa: E731

PRIMITIVES = {
    "add": (lambda p: nx.tsum(nx.mul(nx.add(p["a"], p["b"]), p["w"])), ("a", (3, 4)), ("b", (4,))),
    "sub": (lambda p: nx.tsum(nx.mul(nx.sub(p["a"], p["b"]), p["w"])), ("a", (3, 4)), ("b", (3, 1))),
    "mul": (lambda p: nx.tsum(nx.mul(nx.mul(p["a"], p["b"]), p["w"])), ("a", (3, 4)), ("b", (3, 4))),
    "reciprocal": (lambda p: nx.tsum(nx.mul(nx.reciprocal(nx.add(p["a"], 2.5)), p["w"])), ("a", (3, 4))),
    "exp": (lambda p: nx.tsum(nx.mul(nx.exp(p["a"]), p["w"])), ("a", (3, 4))),
    "log": (lambda p: nx.tsum(nx.mul(nx.log(nx.add(p["a"], 2.0)), p["w"])), ("a", (3, 4))),
    "square": (lambda p: nx.tsum(nx.mul(nx.square(p["a"]), p["w"])), ("a", (3, 4))),
    "silu": (lambda p: nx.tsum(nx.mul(nx.silu(p["a"]), p["w"])), ("a", (3, 4))),
    "gelu": (lambda p: nx.tsum(nx.mul(nx.gelu(p["a"]), p["w"])), ("a", (3, 4))),
    "mean": (lambda p: nx.tsum(nx.mul(nx.mean(p["a"], axis=0), p["w"][0])), ("a", (3, 4))),
    "reshape": (lambda p: nx.tsum(nx.mul(nx.reshape(p["a"], (4, 3)), p["w"].reshape(4, 3))), ("a", (3, 4))),
    "transpose": (lambda p: nx.tsum(nx.mul(nx.transpose(p["a"]), p["w"].T)), ("a", (3, 4))),
    "getitem": (lambda p: nx.tsum(nx.mul(p["a"][1:, ::2], p["w"][1:, ::2])), ("a", (3, 4))),
    "fancy_getitem": (lambda p: nx.tsum(nx.mul(p["a"][np.array([0, 2, 2])], p["w"][np.array([0, 2, 2])])), ("a", (3, 4))),
    "gather_rows": (lambda p: nx.tsum(nx.mul(nx.gather_rows(p["a"], np.array([2, 0, 0]), axis=0), p["w"][:3])), ("a", (3, 4))),
    "concat": (lambda p: nx.tsum(nx.mul(nx.concat([p["a"], p["b"]], axis=0), p["v"])), ("a", (3, 4)), ("b", (2, 4))),
    "split": (lambda p: nx.tsum(nx.mul(nx.split(p["a"], [1, 3], axis=-1)[1], p["w"][:, 1:])), ("a", (3, 4))),
    "matmul": (lambda p: nx.tsum(nx.mul(nx.matmul(p["a"], p["b"]), p["w"][:, :2])), ("a", (3, 4)), ("b", (4, 2))),
    "batched_matmul": (lambda p: nx.tsum(nx.mul(nx.matmul(p["x"], p["b"]), p["u"])), ("x", (2, 3, 4)), ("b", (4, 2))),
    "softmax": (lambda p: nx.tsum(nx.mul(nx.softmax_lastdim(p["a"]), p["w"])), ("a", (3, 4))),
    "layernorm": (lambda p: nx.tsum(nx.mul(nx.layernorm(p["a"]), p["w"])), ("a", (3, 4))),
    "conv1d": (lambda p: nx.tsum(nx.mul(nx.conv1d(p["x"], p["k"], p["c"]), p["u"])),
               ("x", (2, 3, 4)), ("k", (3, 4, 2)), ("c", (2,))),
    "rope": (lambda p: nx.tsum(nx.mul(nx.rope(p["a"], nx.rope_angles(np.arange(3), 4)), p["w"])), ("a", (3, 4))),
    "where": (lambda p: nx.tsum(nx.mul(nx.where(np.array([[True], [False], [True]]), p["a"], p["b"]), p["w"])),
              ("a", (3, 4)), ("b", (4,))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    fn, *shapes = PRIMITIVES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    params = {k: U(rng, *s) for k, s in shapes}
    consts = {"w": U(rng, 3, 4), "v": U(rng, 5, 4), "u": U(rng, 2, 3, 2)}

    def f(p):
        return fn({**consts, **p})

    assert fd_check(f, params) < 1e-4


def test_three_layer_mlp_gradcheck(rng):
    params = {
        "w1": U(rng, 5, 8), "b1": U(rng, 8),
        "w2": U(rng, 8, 8), "b2": U(rng, 8),
        "w3": U(rng, 8, 3), "b3": U(rng, 3),
    }
    x, y = U(rng, 6, 5), U(rng, 6, 3)

    def f(p):
        h = nx.gelu(nx.add(nx.matmul(x, p["w1"]), p["b1"]))
        h = nx.silu(nx.add(nx.matmul(h, p["w2"]), p["b2"]))
        out = nx.add(nx.matmul(h, p["w3"]), p["b3"])
        return nx.mean(nx.square(nx.sub(out, y)))

    assert fd_check(f, params, h=1e-5) < 1e-4


def test_layernorm_eps_and_output():
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    out = nx.layernorm(x).data
    mu, var = x.mean(), x.var()
    np.testing.assert_allclose(out, (x - mu) / np.sqrt(var + 1e-6), atol=1e-12)


def test_conv1d_same_padding_oracle(rng):
    x = rng.standard_normal((5, 2))
    w = rng.standard_normal((3, 2, 4))
    out = nx.conv1d(x, w).data
    xp = np.pad(x, ((1, 1), (0, 0)))
    ref = np.stack([sum(xp[i + k] @ w[k] for k in range(3)) for i in range(5)])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_broadcast_gradient_sums_back():
    g = nx.grad(lambda p: nx.tsum(nx.add(np.ones((4, 3)), p["b"])), {"b": np.zeros(3)})["b"]
    np.testing.assert_array_equal(g, [4.0, 4.0, 4.0])
