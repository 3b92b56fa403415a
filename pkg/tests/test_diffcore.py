import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewkp import diffcore as dc
from fewkp.diffcore import Tensor


def naive_conv(x, w, stride):
    # direct loop over output pixels, zero padding on the top/left by (k-1)//2
    n, h, wd, c = x.shape
    kh, kw, _, co = w.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    ho, wo = -(-h // stride), -(-wd // stride)
    out = np.zeros((n, ho, wo, co))
    for oy in range(ho):
        for ox in range(wo):
            for i in range(kh):
                for j in range(kw):
                    y, xx = oy * stride + i - ph, ox * stride + j - pw
                    if 0 <= y < h and 0 <= xx < wd:
                        out[:, oy, ox] += x[:, y, xx] @ w[i, j]
    return out


def test_sum_of_squares_grad():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    dc.backward(dc.sum_(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_sigmoid_grad_at_zero():
    x = Tensor(np.array(0.0), requires_grad=True)
    dc.backward(dc.sigmoid(x))
    assert x.grad == pytest.approx(0.25, abs=1e-15)


def test_grad_check_exp_and_abs():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=6))
    assert dc.grad_check(lambda t: dc.sum_(dc.exp(t)), x) <= 1e-6
    y = Tensor(rng.uniform(0.2, 1.0, size=6) * rng.choice([-1, 1], size=6))
    assert dc.grad_check(lambda t: dc.sum_(dc.abs_(t)), y) <= 1e-5


def test_grad_check_constant_is_zero():
    x = Tensor(np.ones(4))
    assert dc.grad_check(lambda t: Tensor(np.array(3.0)) + 0.0 * dc.sum_(t), x) == 0.0


def test_grad_check_reports_nonfinite():
    with pytest.raises(dc.NonFiniteError):
        dc.grad_check(lambda t: dc.sum_(dc.log(t)), Tensor(np.array([-1.0, 1.0])))


@pytest.mark.parametrize("k,stride,cin,cout", [(1, 1, 3, 5), (3, 1, 6, 2), (3, 1, 2, 6), (3, 2, 3, 4), (3, 2, 4, 2)])
def test_conv2d_matches_naive_loop(k, stride, cin, cout):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.normal(size=(2, 7, 6, cin))
    w = rng.normal(size=(k, k, cin, cout))
    b = rng.normal(size=cout)
    out = dc.conv2d(x, w, stride, bias=b).data
    np.testing.assert_allclose(out, naive_conv(x, w, stride) + b, atol=1e-12)


@pytest.mark.parametrize("k,stride,cin,cout", [(1, 1, 3, 2), (3, 1, 4, 2), (3, 1, 2, 3), (3, 2, 2, 3)])
def test_conv2d_grad(k, stride, cin, cout):
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 5, 6, cin)))
    w = Tensor(rng.normal(size=(k, k, cin, cout)))
    b = Tensor(rng.normal(size=cout))
    proj = rng.normal(size=dc.conv2d(x, w, stride).shape)
    assert dc.grad_check(lambda xs: dc.sum_(dc.conv2d(xs[0], xs[1], stride, xs[2]) * proj), [x, w, b]) <= 1e-5


def test_two_layer_conv_net_grad():
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(1, 8, 8, 3))
    w1 = Tensor(rng.normal(size=(3, 3, 3, 4)) * 0.3)
    w2 = Tensor(rng.normal(size=(3, 3, 4, 2)) * 0.3)

    def f(ws):
        h = dc.sigmoid(dc.conv2d(x, ws[0], 2))
        return dc.mean(dc.square(dc.conv2d(dc.upsample(h), ws[1])))

    assert dc.grad_check(f, [w1, w2]) <= 1e-5


OP_CASES = {
    "add": (lambda a, b: dc.add(a, b), 2),
    "sub": (lambda a, b: dc.sub(a, b), 2),
    "mul": (lambda a, b: dc.mul(a, b), 2),
    "div": (lambda a, b: dc.div(a, dc.add(dc.square(b), 1.0)), 2),
    "matmul": (lambda a, b: dc.matmul(a, dc.transpose(b)), 2),
    "relu": (lambda a: dc.relu(a), 1),
    "sigmoid": (lambda a: dc.sigmoid(a), 1),
    "softplus": (lambda a: dc.softplus(a), 1),
    "exp": (lambda a: dc.exp(a), 1),
    "log": (lambda a: dc.log(dc.square(a) + 0.5), 1),
    "sqrt": (lambda a: dc.sqrt(dc.square(a) + 0.5), 1),
    "abs": (lambda a: dc.abs_(a), 1),
    "clip": (lambda a: dc.clip(a, -0.5, 0.5), 1),
    "max_reduce": (lambda a: dc.max_reduce(a, axis=1), 1),
    "softmax": (lambda a: dc.softmax(a, axis=-1), 1),
    "mean": (lambda a: dc.mean(a, axis=0), 1),
    "slice": (lambda a: a[1:, ::2], 1),
    "concat": (lambda a, b: dc.concat([a, b], axis=1), 2),
    "reshape": (lambda a: dc.reshape(a, (-1,)), 1),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_every_op_passes_grad_check(name):
    fn, arity = OP_CASES[name]
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        xs = [Tensor(rng.normal(size=(3, 4))) for _ in range(arity)]
        if name in ("abs", "relu"):
            for t in xs:  # keep away from the kink
                t.data += np.sign(t.data) * 0.1
        if name == "clip":
            for t in xs:
                t.data[np.abs(np.abs(t.data) - 0.5) < 0.05] += 0.1
        proj = rng.normal(size=fn(*xs).shape)
        worst = max(worst, dc.grad_check(lambda ts: dc.sum_(fn(*ts) * proj), xs))
    assert worst <= 1e-5


def test_max_reduce_ties_route_to_lowest_index():
    x = Tensor(np.array([[1.0, 3.0, 3.0, 0.0]]), requires_grad=True)
    dc.backward(dc.sum_(dc.max_reduce(x, axis=1)))
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0, 0.0]])


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=5)

    def grad(fn):
        x = Tensor(x0.copy(), requires_grad=True)
        dc.backward(fn(x))
        return x.grad

    f = lambda x: dc.sum_(dc.sigmoid(x) * x)  # noqa: E731
    g = lambda x: dc.sum_(dc.square(x))  # noqa: E731
    combo = grad(lambda x: f(x) * a + g(x) * b)
    np.testing.assert_allclose(combo, a * grad(f) + b * grad(g), atol=1e-12)


def test_determinism_bitwise():
    rng = np.random.default_rng(3)
    x0, w0 = rng.normal(size=(1, 6, 6, 2)), rng.normal(size=(3, 3, 2, 3))

    def run():
        w = Tensor(w0.copy(), requires_grad=True)
        y = dc.mean(dc.square(dc.conv2d(x0, w, 2)))
        dc.backward(y)
        return y.data.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with dc.no_grad():
        y = dc.sum_(x * 2.0)
    assert not y.requires_grad and y.node is None


def test_shape_errors():
    with pytest.raises(dc.ShapeError):
        dc.add(np.ones((2, 3)), np.ones((4,)))
    with pytest.raises(dc.ShapeError):
        dc.conv2d(np.ones((1, 4, 4, 2)), np.ones((3, 3, 3, 1)))
    with pytest.raises(dc.ShapeError):
        dc.backward(Tensor(np.ones(2), requires_grad=True))


def test_nonfinite_forward_raises():
    with pytest.raises(dc.NonFiniteError):
        dc.log(np.array([0.0]))


def test_forward_by_name():
    out = dc.forward("add", [np.ones(2), np.ones(2)])
    np.testing.assert_array_equal(out.data, [2.0, 2.0])
    with pytest.raises(ValueError):
        dc.forward("nope", [])


def test_archive_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(2, 3)), "b/c": np.array(1.5), "d": rng.normal(size=(4, 1, 2))}
    p = tmp_path / "x.fkp"
    dc.save_archive(p, arrays, {"iteration": 7})
    got, meta = dc.load_archive(p)
    assert meta == {"iteration": 7} and list(got) == list(arrays)
    for k in arrays:
        assert got[k].shape == np.shape(arrays[k]) and got[k].tobytes() == np.asarray(arrays[k], dtype="<f8").tobytes()


def test_archive_corruption(tmp_path):
    p = tmp_path / "x.fkp"
    dc.save_archive(p, {"a": np.ones(5)}, {})
    raw = p.read_bytes()
    p.write_bytes(raw[:-10])
    with pytest.raises(dc.ArchiveError, match="truncated"):
        dc.load_archive(p)
    p.write_bytes(b"BADMAGIC" + raw[8:])
    with pytest.raises(dc.ArchiveError, match="magic"):
        dc.load_archive(p)
    p.write_bytes(raw + b"\x00")
    with pytest.raises(dc.ArchiveError, match="trailing"):
        dc.load_archive(p)
