import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xmodal import tensor as T
from xmodal.errors import DomainError, GraphError, ShapeError
from xmodal.tensor import Tensor


def _loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def _loop_conv(x, w, stride):
    c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for y in range(ho):
            for xx in range(wo):
                s = 0.0
                for ch in range(ci):
                    for i in range(kh):
                        for j in range(kw):
                            s += x[ch, y * stride + i, xx * stride + j] * w[o, ch, i, j]
                out[o, y, xx] = s
    return out


# -- elementwise ------------------------------------------------------------

def test_relu_exp_leaky():
    assert T.relu(Tensor([-1, 0, 2])).data.tolist() == [0, 0, 2]
    assert T.exp(Tensor([0])).data.tolist() == [1]
    assert np.allclose(T.leaky_relu(Tensor([-2]), slope=0.1).data, [-0.2])


def test_log_domain_error():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        T.sqrt(Tensor([-1.0]))


def test_binary_and_broadcast():
    assert T.add(Tensor([1, 2]), Tensor([3, 4])).data.tolist() == [4, 6]
    out = T.mul(Tensor([[1, 2], [3, 4]]), Tensor([10]))
    assert out.data.tolist() == [[10, 20], [30, 40]]
    with pytest.raises(DomainError):
        T.div(Tensor([1]), Tensor([0]))
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2,))))


def test_broadcast_backward_sums_expanded_axes():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones((1, 4)), requires_grad=True)
    T.backward((a * b).sum(), leaves=[a, b])
    assert b.grad.shape == (1, 4)
    assert np.all(b.grad == 3)


# -- matmul / reduce / concat / conv ------------------------------------------

def test_matmul_examples():
    m = Tensor([[1, 2], [3, 4]])
    assert T.matmul(Tensor(np.eye(2)), m).data.tolist() == [[1, 2], [3, 4]]
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_matches_loop_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))
    assert np.max(np.abs(T.matmul(Tensor(a), Tensor(b)).data - _loop_matmul(a, b))) <= 1e-12


def test_reduce_examples():
    out, arg = T.reduce(Tensor([1, 5, 3]), 0, "max", return_arg=True)
    assert out.item() == 5 and int(arg) == 1
    assert T.reduce(Tensor([2, 4]), 0, "mean").item() == 3
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, (4, 3))
    loop = [sum(x[i, j] for i in range(4)) for j in range(3)]
    assert np.max(np.abs(T.reduce(Tensor(x), 0, "sum").data - loop)) <= 1e-12
    with pytest.raises(ShapeError):
        T.reduce(Tensor(x), 2, "sum")


def test_max_tie_routes_to_first():
    x = Tensor([3.0, 1.0, 3.0], requires_grad=True)
    T.backward(T.reduce(x, 0, "max"))
    assert x.grad.tolist() == [1.0, 0.0, 0.0]


def test_concat():
    assert T.concat(Tensor([1]), Tensor([2]), 0).data.tolist() == [1, 2]
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.zeros((2, 3)), requires_grad=True)
    out = T.concat(a, b, 1)
    assert out.shape == (2, 6)
    weights = np.arange(12.0).reshape(2, 6)
    T.backward((out * weights).sum())
    assert np.array_equal(a.grad, weights[:, :3])
    assert np.array_equal(b.grad, weights[:, 3:])
    with pytest.raises(ShapeError):
        T.concat(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))), 1)


def test_conv2d_examples():
    x = np.arange(9.0).reshape(1, 3, 3)
    out = T.conv2d(Tensor(x), Tensor(np.full((1, 1, 1, 1), 2.0)), stride=1)
    assert np.array_equal(out.data, 2 * x)
    out = T.conv2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), Tensor(np.ones((1, 1, 2, 2))))
    assert out.data.tolist() == [[[10.0]]]
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv2d_matches_loop_oracle(stride):
    rng = np.random.default_rng(stride)
    x = rng.uniform(-1, 1, (3, 8, 7))
    w = rng.uniform(-1, 1, (4, 3, 3, 2))
    got = T.conv2d(Tensor(x), Tensor(w), stride=stride).data
    assert np.max(np.abs(got - _loop_conv(x, w, stride))) <= 1e-12


def test_conv2d_batched_equals_single():
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, (2, 3, 6, 6))
    w = rng.uniform(-1, 1, (2, 3, 3, 3))
    batched = T.conv2d(Tensor(x), Tensor(w), stride=2).data
    for i in range(2):
        assert np.array_equal(batched[i], T.conv2d(Tensor(x[i]), Tensor(w), stride=2).data)


@settings(max_examples=25, deadline=None)
@given(
    m=st.integers(1, 8), k=st.integers(1, 8), n=st.integers(1, 8), seed=st.integers(0, 2**31)
)
def test_matmul_random_shapes(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (m, k)), rng.uniform(-1, 1, (k, n))
    assert np.max(np.abs(T.matmul(Tensor(a), Tensor(b)).data - _loop_matmul(a, b))) <= 1e-12


# -- backward / gradients ---------------------------------------------------------

def test_backward_examples():
    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(w.sum())
    assert w.grad.tolist() == [1, 1, 1]
    w = Tensor([1.0, 2.0], requires_grad=True)
    T.backward((w * w).sum())
    assert w.grad.tolist() == [2, 4]


def test_backward_errors_and_unreached_leaves():
    with pytest.raises(GraphError):
        T.backward(Tensor([1.0]))
    a = Tensor([1.0], requires_grad=True)
    b = Tensor([2.0, 3.0], requires_grad=True)
    T.backward(a * 2.0, leaves=[a, b])
    assert b.grad.tolist() == [0.0, 0.0]


def test_graph_ids_are_topological():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = T.leaky_relu(a @ a) + a
    g = T.Graph.trace(b.sum())
    assert g.is_acyclic()
    assert [n[0] for n in g.nodes] == sorted(n[0] for n in g.nodes)


def test_grad_check_trivial_cases():
    rng = np.random.default_rng(0)
    quad = lambda p: (p["w"] * p["w"]).sum()
    assert T.grad_check(quad, {"w": rng.uniform(-1, 1, 5)}) <= 1e-9
    const = lambda p: Tensor([3.0])
    assert T.grad_check(const, {"w": rng.uniform(-1, 1, 5)}) == 0.0


def _mlp_loss(p):
    h = T.leaky_relu(p["x"] @ p["w1"] + p["b1"])
    h = h @ p["w2"]
    return (T.exp(h * 0.5).sum(axis=1)).mean() + T.log(T.sqrt((h * h).sum() + 1.0)).sum()


def test_composite_mlp_gradient():
    rng = np.random.default_rng(3)
    params = {
        "x": rng.uniform(-1, 1, (4, 3)),
        "w1": rng.uniform(-1, 1, (3, 5)),
        "b1": rng.uniform(-1, 1, (1, 5)),
        "w2": rng.uniform(-1, 1, (5, 2)),
    }
    assert T.grad_check(_mlp_loss, params, eps=1e-5) <= 1e-6


OPS = {
    "relu": lambda p: T.relu(p["a"]),
    "leaky_relu": lambda p: T.leaky_relu(p["a"]),
    "exp": lambda p: T.exp(p["a"]),
    "log": lambda p: T.log(p["a"] * p["a"] + 0.5),
    "neg": lambda p: T.neg(p["a"]),
    "sqrt": lambda p: T.sqrt(p["a"] * p["a"] + 0.5),
    "add": lambda p: p["a"] + p["b"],
    "sub": lambda p: p["a"] - p["b"],
    "mul": lambda p: p["a"] * p["b"],
    "div": lambda p: p["a"] / (p["b"] * p["b"] + 0.5),
    "matmul": lambda p: p["a"] @ T.transpose(p["b"]),
    "sum": lambda p: T.reduce(p["a"], 1, "sum"),
    "mean": lambda p: T.reduce(p["a"], 0, "mean"),
    "max": lambda p: T.reduce(p["a"], 1, "max"),
    "concat": lambda p: T.concat(p["a"], p["b"], 0),
    "reshape": lambda p: T.reshape(p["a"], (-1,)) * np.arange(12.0),
    "gather": lambda p: T.gather_rows(p["a"], np.array([[0, 2], [2, 1]])),
    "conv2d": lambda p: T.conv2d(T.reshape(p["a"], (1, 3, 4)), T.reshape(p["b"], (2, 1, 2, 3))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_gradient(name):
    rng = np.random.default_rng(sorted(OPS).index(name))
    params = {"a": rng.uniform(-1, 1, (3, 4)), "b": rng.uniform(-1, 1, (3, 4))}
    probe = rng.uniform(-1, 1, OPS[name]({k: Tensor(v) for k, v in params.items()}).shape)
    f = lambda p: (OPS[name](p) * probe).sum()
    assert T.grad_check(f, params, eps=1e-5) <= 1e-6


def test_forward_is_bit_reproducible():
    rng = np.random.default_rng(9)
    params = {k: rng.uniform(-1, 1, s) for k, s in [("x", (4, 3)), ("w1", (3, 5)), ("b1", (1, 5)), ("w2", (5, 2))]}
    first = _mlp_loss({k: Tensor(v) for k, v in params.items()}).item()
    second = _mlp_loss({k: Tensor(v) for k, v in params.items()}).item()
    assert first == second
