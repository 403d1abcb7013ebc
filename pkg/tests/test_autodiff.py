import zlib

import numpy as np
import pytest

from daedalus import autodiff
from daedalus.autodiff import OPS, ShapeError, TapeBuilder, check_gradient


def scalar_tape(build, shape):
    tb = TapeBuilder()
    x = tb.input("x", shape)
    return tb.build(y=build(tb, x))


def test_sigmoid_at_zero():
    tape = scalar_tape(lambda tb, x: tb.sigmoid(x), (1,))
    assert tape.eval({"x": np.zeros(1)})["y"][0] == 0.5


def test_exp_at_zero():
    tape = scalar_tape(lambda tb, x: tb.exp(x), (1,))
    assert tape.eval({"x": np.zeros(1)})["y"][0] == 1.0


def test_identity_center_kernel_conv():
    rng = np.random.default_rng(0)
    img = rng.random((1, 8, 8, 1))
    k = np.zeros((3, 3, 1, 1))
    k[1, 1, 0, 0] = 1.0
    tb = TapeBuilder()
    x = tb.input("x", img.shape)
    w = tb.input("w", k.shape)
    out = tb.build(y=tb.conv2d(x, w, stride=1, pad=0)).eval({"x": img, "w": k})["y"]
    np.testing.assert_array_equal(out, img[:, 1:-1, 1:-1])


def test_square_gradient():
    tape = scalar_tape(lambda tb, x: tb.sum(tb.square(x)), (1,))
    assert tape.eval({"x": np.array([3.0])}).gradient("y", "x")[0] == 6.0


def test_sum_sigmoid_gradient():
    tape = scalar_tape(lambda tb, x: tb.sum(tb.sigmoid(x)), (2, 3))
    np.testing.assert_array_equal(tape.eval({"x": np.zeros((2, 3))}).gradient("y", "x"), 0.25)


def test_gradient_needs_scalar_output():
    tape = scalar_tape(lambda tb, x: tb.sigmoid(x), (3,))
    with pytest.raises(ValueError, match="not scalar"):
        tape.eval({"x": np.zeros(3)}).gradient("y", "x")


def test_shape_mismatch_names_node():
    tape = scalar_tape(lambda tb, x: tb.sum(x), (3,))
    with pytest.raises(ShapeError, match="x"):
        tape.eval({"x": np.zeros(4)})


def test_check_gradient_linear_exact():
    tape = scalar_tape(lambda tb, x: tb.sum(x * 2.0), (5,))
    assert check_gradient(tape, {"x": np.arange(5.0)}, "x", "y", samples=5) < 1e-8


def test_check_gradient_sigmoid_chain():
    tape = scalar_tape(lambda tb, x: tb.sum(tb.sigmoid(tb.tanh(tb.sigmoid(x) * 3.0))), (20,))
    x = np.random.default_rng(1).normal(size=20)
    assert check_gradient(tape, {"x": x}, "x", "y", epsilon=1e-4, samples=20) < 1e-3


def test_corrupted_adjoint_detected(monkeypatch):
    rule = OPS["sigmoid"]
    broken = autodiff.OpRule(rule.forward, lambda g, v, out, aux, a, need: [2.0 * g],
                             rule.shape)
    monkeypatch.setitem(OPS, "sigmoid", broken)
    tape = scalar_tape(lambda tb, x: tb.sum(tb.sigmoid(x)), (10,))
    x = np.random.default_rng(2).normal(size=10)
    assert check_gradient(tape, {"x": x}, "x", "y", samples=10) > 1e-1


def test_check_gradient_argument_validation():
    tape = scalar_tape(lambda tb, x: tb.sum(x), (2,))
    with pytest.raises(ValueError):
        check_gradient(tape, {"x": np.zeros(2)}, "x", "y", epsilon=0.0)
    with pytest.raises(ValueError):
        check_gradient(tape, {"x": np.zeros(2)}, "x", "y", samples=0)


# every primitive kind against central differences on random inputs
def _unary(fn, positive=False):
    def build(tb, x):
        return tb.sum(fn(tb, x) * np.linspace(0.5, 1.5, 12).reshape(3, 4))
    return build, positive


PRIMITIVE_CASES = {
    "add": _unary(lambda tb, x: x + tb.sigmoid(x)),
    "sub": _unary(lambda tb, x: x - tb.tanh(x)),
    "mul": _unary(lambda tb, x: x * x),
    "div": _unary(lambda tb, x: 1.0 / x, positive=True),
    "exp": _unary(lambda tb, x: tb.exp(x)),
    "log": _unary(lambda tb, x: tb.log(x), positive=True),
    "sigmoid": _unary(lambda tb, x: tb.sigmoid(x)),
    "tanh": _unary(lambda tb, x: tb.tanh(x)),
    "relu": _unary(lambda tb, x: tb.relu(x)),
    "leaky_relu": _unary(lambda tb, x: tb.leaky_relu(x, 0.1)),
    "square": _unary(lambda tb, x: tb.square(x)),
    "sqrt": _unary(lambda tb, x: tb.sqrt(x), positive=True),
    "softmax": _unary(lambda tb, x: tb.softmax(x, axis=-1)),
    "mean": _unary(lambda tb, x: tb.mean(tb.square(x), axis=1, keepdims=True) * x),
    "max": _unary(lambda tb, x: tb.max(x, axis=1, keepdims=True) * x),
    "minimum": _unary(lambda tb, x: tb.minimum(x, tb.square(x))),
    "reshape": _unary(lambda tb, x: tb.reshape(tb.reshape(tb.square(x), (12,)), (3, 4))),
    "concat": _unary(lambda tb, x: tb.concat([tb.slice(x, (slice(None), slice(0, 2))),
                                              tb.square(tb.slice(x, (slice(None), slice(2, 4))))], axis=1)),
    "clip": _unary(lambda tb, x: tb.clip(x, -0.5, 0.5)),
}


@pytest.mark.parametrize("kind", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(kind):
    build, positive = PRIMITIVE_CASES[kind]
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    x = rng.uniform(0.2, 2.0, (3, 4)) if positive else rng.normal(size=(3, 4))
    # keep relu/clip/minimum inputs away from kinks so central differences are valid
    if kind in ("relu", "leaky_relu"):
        x = np.where(np.abs(x) < 0.05, 0.3, x)
    if kind == "clip":
        x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, 0.2, x)
    if kind == "minimum":
        x = np.where(np.abs(x - x * x) < 0.05, 3.0, x)
    tape = scalar_tape(build, (3, 4))
    assert check_gradient(tape, {"x": x}, "x", "y", epsilon=1e-4, samples=12) < 1e-3


def test_conv_gradients():
    rng = np.random.default_rng(3)
    tb = TapeBuilder()
    x = tb.input("x", (2, 8, 8, 3))
    w = tb.input("w", (3, 3, 3, 4))
    y = tb.sum(tb.square(tb.conv2d(x, w, stride=2, pad=1)))
    tape = tb.build(y=y)
    inputs = {"x": rng.normal(size=(2, 8, 8, 3)), "w": rng.normal(size=(3, 3, 3, 4))}
    assert check_gradient(tape, inputs, "x", "y", samples=40) < 1e-3
    assert check_gradient(tape, inputs, "w", "y", samples=40) < 1e-3


def test_gather_gradient():
    rng = np.random.default_rng(4)
    tb = TapeBuilder()
    src = tb.input("src", (5, 2))
    idx = tb.input("idx", (3, 2), dtype=np.int64)
    wts = tb.input("wts", (3, 2))
    y = tb.sum(tb.square(tb.gather(src, idx, wts)))
    tape = tb.build(y=y)
    inputs = {"src": rng.normal(size=(5, 2)), "idx": np.array([[0, 1], [1, 4], [0, 0]]),
              "wts": rng.random((3, 2))}
    assert check_gradient(tape, inputs, "src", "y", samples=10) < 1e-3


def test_max_tie_routes_to_first():
    tape = scalar_tape(lambda tb, x: tb.max(x), (4,))
    g = tape.eval({"x": np.array([1.0, 3.0, 3.0, 2.0])}).gradient("y", "x")
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0, 0.0])


def test_softmax_is_stable_for_large_logits():
    tape = scalar_tape(lambda tb, x: tb.softmax(x), (3,))
    out = tape.eval({"x": np.array([1000.0, 1000.0, -1000.0])})["y"]
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0])


def test_eval_is_deterministic():
    rng = np.random.default_rng(5)
    tape = scalar_tape(lambda tb, x: tb.sum(tb.softmax(tb.tanh(x) * 4.0)), (6, 5))
    x = rng.normal(size=(6, 5))
    a = tape.eval({"x": x})
    b = tape.eval({"x": x})
    assert a["y"].tobytes() == b["y"].tobytes()
    assert a.gradient("y", "x").tobytes() == b.gradient("y", "x").tobytes()


def test_gradient_linearity():
    rng = np.random.default_rng(6)
    x = rng.normal(size=7)
    tb = TapeBuilder()
    xv = tb.input("x", (7,))
    f = tb.sum(tb.sigmoid(xv) * 2.0)
    g = tb.sum(tb.square(tb.tanh(xv)))
    tape = tb.build(f=f, g=g, h=f + g)
    fwd = tape.eval({"x": x})
    np.testing.assert_allclose(fwd.gradient("h", "x"), fwd.gradient("f", "x") + fwd.gradient("g", "x"),
                               rtol=1e-13, atol=1e-15)


def test_vjp_matches_gradient_of_weighted_sum():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 3))
    c = rng.normal(size=(4, 3))
    tb = TapeBuilder()
    xv = tb.input("x", (4, 3))
    y = tb.tanh(xv) * xv
    tape = tb.build(y=y, s=tb.sum(y * c))
    fwd = tape.eval({"x": x})
    np.testing.assert_allclose(fwd.vjp({"y": c}, "x"), fwd.gradient("s", "x"), rtol=1e-13)


def test_every_registered_kind_has_both_rules():
    for kind, rule in OPS.items():
        assert callable(rule.forward) and callable(rule.backward), kind
