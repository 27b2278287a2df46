import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from priorlane.autodiff import SGD, Adam, Tensor, check_gradients, concat, matmul, max_over
from priorlane.autodiff import functional as F
from priorlane.autodiff.checkpoint import load_checkpoint, parse_checkpoint, save_checkpoint
from priorlane.errors import FormatError, NumericError, ShapeError, UsageError


def rand(rng, *shape):
    return Tensor(rng.uniform(-2, 2, size=shape), requires_grad=True)


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), b).data, b.data)


def test_matmul_basis_selection():
    assert matmul(Tensor([[1.0, 0.0]]), Tensor([[5.0], [7.0]])).data.tolist() == [[5.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradcheck():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    rep = check_gradients(lambda: matmul(a, b), [a, b])
    assert max(rep.values()) < 1e-6


# -- softmax ------------------------------------------------------------------

def test_softmax_symmetric():
    np.testing.assert_allclose(F.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_hand_value():
    e = np.e
    np.testing.assert_allclose(F.softmax(Tensor([1.0, 0.0])).data, [e / (e + 1), 1 / (e + 1)], rtol=1e-12)
    np.testing.assert_allclose(F.softmax(Tensor([1.0, 0.0])).data, [0.73106, 0.26894], atol=1e-5)


def test_softmax_no_overflow():
    y = F.softmax(Tensor([3.0, 1003.0])).data
    assert np.all(np.isfinite(y))
    assert y[0] < 1e-100
    assert abs(y[1] - 1.0) < 1e-12


def test_softmax_rejects_nonfinite():
    with pytest.raises(NumericError):
        F.softmax(Tensor([0.0, np.inf]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = F.softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((y >= 0) & (y <= 1))
    np.testing.assert_allclose(F.softmax(Tensor(x + c), axis=1).data, y, atol=1e-9)


# -- conv2d -------------------------------------------------------------------

def test_conv_scalar_kernel():
    x = Tensor(np.arange(12.0).reshape(1, 3, 4))
    y = F.conv2d(x, Tensor([[[[2.0]]]]))
    np.testing.assert_array_equal(y.data, 2 * x.data)


def test_conv_ones_kernel_center():
    y = F.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert y.data[0, 1, 1] == 9.0
    assert y.data[0, 0, 0] == 4.0


def test_conv_is_cross_correlation():
    x = np.zeros((1, 3, 3))
    x[0, 1, 1] = 1.0
    k = np.arange(9.0).reshape(1, 1, 3, 3)
    y = F.conv2d(Tensor(x), Tensor(k), padding=1).data[0]
    # an impulse reproduces the kernel flipped under cross-correlation
    np.testing.assert_array_equal(y, k[0, 0, ::-1, ::-1])


def test_conv_output_extent_and_errors():
    x = Tensor(np.zeros((2, 9, 9)))
    assert F.conv2d(x, Tensor(np.zeros((4, 2, 3, 3))), stride=2, padding=1).shape == (4, 5, 5)
    with pytest.raises(ShapeError):
        F.conv2d(Tensor(np.zeros((2, 8, 8))), Tensor(np.zeros((4, 2, 3, 3))), stride=2, padding=1)
    with pytest.raises(ShapeError):
        F.conv2d(x, Tensor(np.zeros((4, 2, 2, 2))))


def test_conv_gradcheck():
    rng = np.random.default_rng(1)
    x, k = rand(rng, 2, 5, 5), rand(rng, 3, 2, 3, 3)
    b = rand(rng, 3)
    rep = check_gradients(lambda: F.conv2d(x, k, b, padding=1), [x, k, b])
    assert max(rep.values()) < 1e-6
    rep = check_gradients(lambda: F.conv2d(x, k, stride=2, padding=(1, 1)), [x, k])
    assert max(rep.values()) < 1e-6


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 6, 7))
    k = rng.normal(size=(4, 3, 3, 3))
    y = F.conv2d(Tensor(x), Tensor(k), stride=1, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 6, 7))
    for n in range(2):
        for o in range(4):
            for i in range(6):
                for j in range(7):
                    ref[n, o, i, j] = (xp[n, :, i:i + 3, j:j + 3] * k[o]).sum()
    np.testing.assert_allclose(y, ref, atol=1e-12)


# -- grid_sample --------------------------------------------------------------

def identity_grid(h, w):
    xs, ys = np.meshgrid(np.linspace(-1, 1, w), np.linspace(-1, 1, h))
    return np.stack([xs, ys], axis=-1)


def test_grid_sample_identity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 5, 7))
    y = F.grid_sample(Tensor(x), Tensor(identity_grid(5, 7)))
    np.testing.assert_allclose(y.data, x, atol=1e-12)


def test_grid_sample_center_of_2x2():
    y = F.grid_sample(Tensor([[[0.0, 1.0], [2.0, 3.0]]]), Tensor([[[0.0, 0.0]]]))
    assert y.data.shape == (1, 1, 1)
    assert y.data[0, 0, 0] == pytest.approx(1.5, abs=1e-15)


def test_grid_sample_out_of_range_reads_zero():
    y = F.grid_sample(Tensor(np.ones((1, 2, 2))), Tensor([[[5.0, 5.0], [-1.0, -1.0]]]))
    np.testing.assert_allclose(y.data[0, 0], [0.0, 1.0])


def test_grid_sample_gradcheck_input_and_grid():
    rng = np.random.default_rng(4)
    x = rand(rng, 2, 4, 5)
    g = Tensor(rng.uniform(-1.2, 1.2, size=(3, 6, 2)), requires_grad=True)
    rep = check_gradients(lambda: F.grid_sample(x, g), [x, g], names=["input", "grid"])
    assert rep["grid"] < 1e-5
    assert rep["input"] < 1e-6


# -- backward -----------------------------------------------------------------

def test_backward_sum_and_square():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))
    x.grad = None
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    loss.backward()
    np.testing.assert_array_equal(x.grad, 4 * x.data)


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(UsageError):
        (x * 2).backward()


def test_backward_populates_intermediates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    h = x * 3
    (h * h).sum().backward()
    np.testing.assert_allclose(h.grad, 2 * h.data)


def test_composite_linear_softmax_ce_gradcheck():
    rng = np.random.default_rng(5)
    x, w, b = rand(rng, 6, 4), rand(rng, 4, 3), rand(rng, 3)
    target = rng.integers(0, 3, size=6)

    def f():
        p = F.softmax(F.linear(x, w, b), axis=1)
        return -(p.log() * Tensor(np.eye(3)[target])).sum() / 6

    rep = check_gradients(f, [x, w, b])
    assert max(rep.values()) < 1e-5


# -- the remaining op set -------------------------------------------------------

OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "mul": (lambda a, b: a * b, [(3, 4), (3, 1)]),
    "div": (lambda a, b: a / (b * b + 1.0), [(2, 3), (2, 3)]),
    "gelu": (lambda a: F.gelu(a), [(4, 5)]),
    "tanh": (lambda a: a.tanh(), [(4,)]),
    "layer_norm": (lambda a, g, b: F.layer_norm(a, g, b), [(3, 6), (6,), (6,)]),
    "linear": (lambda a, w, b: F.linear(a, w, b), [(2, 3, 4), (4, 5), (5,)]),
    "max_over": (lambda a: max_over(a, 1), [(3, 4, 2)]),
    "reshape_transpose": (lambda a: a.reshape(4, 3).transpose(1, 0) * 1.5, [(2, 6)]),
    "concat": (lambda a, b: concat([a, b], axis=1), [(2, 3), (2, 2)]),
    "getitem": (lambda a: a[1:, ::2], [(3, 4)]),
    "fancy_index": (lambda a: a[:, np.array([2, 0, 2])], [(3, 4)]),
    "upsample": (lambda a: F.upsample_bilinear(a, 5, 7), [(2, 3, 4)]),
    "log_softmax": (lambda a: F.log_softmax(a, axis=0), [(4, 3)]),
    "batched_matmul": (lambda a, b: a @ b, [(2, 3, 4), (4, 2)]),
    "mean": (lambda a: a.mean(axis=(0, 2)), [(2, 3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradcheck(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    ts = [rand(rng, *s) for s in shapes]
    rep = check_gradients(lambda: fn(*ts), ts)
    assert max(rep.values()) < 1e-4, rep


def test_cross_entropy_k_class_and_two_class_gradcheck():
    rng = np.random.default_rng(6)
    for k in (2, 5):
        z = rand(rng, 3, k, 4, 4)
        t = rng.integers(0, k, size=(3, 4, 4))
        w = rng.uniform(0.2, 2.0, size=k)
        rep = check_gradients(lambda: F.cross_entropy(z, t, class_weights=w), [z])
        assert max(rep.values()) < 1e-5


def test_cross_entropy_uniform_logits_is_log_k():
    z = Tensor(np.zeros((2, 4, 3, 3)))
    t = np.zeros((2, 3, 3), dtype=int)
    assert F.cross_entropy(z, t).item() == pytest.approx(np.log(4), abs=1e-12)


def test_bce_gradcheck():
    rng = np.random.default_rng(7)
    z = rand(rng, 5)
    t = rng.integers(0, 2, size=5)
    assert max(check_gradients(lambda: F.binary_cross_entropy_with_logits(z, t), [z]).values()) < 1e-6
    p = Tensor(rng.uniform(0.1, 0.9, size=5), requires_grad=True)
    assert max(check_gradients(lambda: F.binary_cross_entropy(p, t), [p]).values()) < 1e-6


def test_max_over_ties_go_to_lowest_index():
    x = Tensor([[1.0, 3.0, 3.0]], requires_grad=True)
    max_over(x, 1).sum().backward()
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


# -- optimizers ---------------------------------------------------------------

def test_sgd_single_step():
    p = Tensor([0.0], requires_grad=True)
    p.grad = np.array([1.0])
    opt = SGD([p], lr=0.1)
    opt.step()
    assert p.data[0] == pytest.approx(-0.1)
    assert opt.state.step == 1


def test_optimizer_requires_grad():
    p = Tensor([0.0], requires_grad=True)
    with pytest.raises(UsageError):
        Adam([p]).step()


def _run_adam(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    x = Tensor(rng.normal(size=(5, 3)))
    opt = Adam([w], lr=0.05)
    for _ in range(10):
        opt.zero_grad()
        (matmul(x, w).tanh() ** 2).sum().backward()
        opt.step()
    return w.data


def test_optimizer_deterministic():
    assert _run_adam(3).tobytes() == _run_adam(3).tobytes()


def test_sgd_convex_quadratic_monotone():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(4, 4))
    q = a @ a.T + np.eye(4)
    x = Tensor(rng.normal(size=4), requires_grad=True)
    opt = SGD([x], lr=0.01)
    losses = []
    for _ in range(50):
        opt.zero_grad()
        loss = 0.5 * (x * matmul(Tensor(q), x.reshape(4, 1)).reshape(4)).sum()
        losses.append(loss.item())
        loss.backward()
        opt.step()
    assert all(b < a for a, b in zip(losses, losses[1:]))


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    params = {"a.weight": np.arange(6.0).reshape(2, 3), "b": np.array([1.5]), "émoji": np.zeros((1, 2, 3))}
    path = tmp_path / "m.plck"
    save_checkpoint(path, params)
    back = load_checkpoint(path)
    assert list(back) == list(params)
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()
    raw = path.read_bytes()
    assert raw[:4] == b"PLCK"
    with pytest.raises(FormatError):
        parse_checkpoint(raw[:-5])
    with pytest.raises(FormatError):
        parse_checkpoint(b"XXXX" + raw[4:])
