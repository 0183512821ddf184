import numpy as np
import pytest

from bmoe import tensor as T
from bmoe.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from bmoe.gradcheck import (
    NonFiniteLossError,
    check_gradients,
    finite_difference_gradient,
    max_relative_error,
)
from bmoe.optim import SgdState, sgd_step


def leaf(arr, dtype=np.float64):
    return T.Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------- matmul


def matmul_reference(a, b):
    # independent elementwise-sum routine, no numpy matmul
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_matmul_identity():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(a, T.Tensor(np.eye(2)))
    assert np.array_equal(out.data, a.data)


def test_matmul_against_reference():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0], [6.0]])
    out = T.matmul(T.Tensor(a), T.Tensor(b))
    assert np.array_equal(out.data, np.array([[17.0], [39.0]]))
    assert np.array_equal(out.data, matmul_reference(a, b))
    rng = np.random.default_rng(0)
    for _ in range(5):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        got = T.matmul(T.Tensor(a), T.Tensor(b)).data
        np.testing.assert_allclose(got, matmul_reference(a, b), rtol=1e-12)


def test_matmul_zero():
    z = T.Tensor(np.zeros((2, 3)))
    b = T.Tensor(np.random.default_rng(1).normal(size=(3, 5)))
    assert np.array_equal(T.matmul(z, b).data, np.zeros((2, 5)))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(T.ShapeError) as e:
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(e.value) and "(4, 2)" in str(e.value)


# ---------------------------------------------------------------- softmax


def test_softmax_symmetry():
    out = T.softmax(T.Tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_softmax_analytic():
    out = T.softmax(T.Tensor([np.log(2.0), 0.0]))
    np.testing.assert_allclose(out.data, [2.0 / 3.0, 1.0 / 3.0], rtol=1e-12)


def test_softmax_large_inputs_no_overflow():
    out = T.softmax(T.Tensor([1000.0, 1000.0]))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_softmax_rows_properties():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 6))
    out = T.softmax(T.Tensor(x), axis=-1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(4), atol=1e-6)
    shifted = T.softmax(T.Tensor(x + 3.7), axis=-1).data
    np.testing.assert_allclose(out, shifted, atol=1e-12)


def test_softmax_empty_axis():
    with pytest.raises(T.ShapeError):
        T.softmax(T.Tensor(np.zeros((3, 0))), axis=-1)


# ---------------------------------------------------------------- backward


def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0, 3.0])
    loss = T.sum_(T.mul(x, x))
    T.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_constant_loss():
    x = leaf([1.0, 2.0])
    loss = T.Tensor(5.0)
    T.backward(loss)
    assert x.grad is None  # zero gradient contribution


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(T.ContractError):
        T.backward(T.mul(x, x))


def test_backward_accumulates_across_calls():
    x = leaf([1.0, 2.0])
    with T.tape():
        loss = T.sum_(T.mul(x, x))
        T.backward(loss)
        T.backward(loss)
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_backward_matmul_vs_finite_difference():
    rng = np.random.default_rng(3)
    a = leaf(rng.normal(size=(3, 4)))
    b = leaf(rng.normal(size=(4, 2)))
    err = check_gradients(lambda: T.sum_(T.matmul(a, b)), [a, b], eps=1e-5)
    assert err < 1e-6


def test_grad_flows_through_shared_tensor():
    x = leaf([1.0, 3.0])
    y = T.mul(x, x)
    loss = T.sum_(T.add(y, y))
    T.backward(loss)
    np.testing.assert_allclose(x.grad, [4.0, 12.0])


def test_no_grad_disables_recording():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        loss = T.sum_(T.mul(x, x))
    assert not loss.requires_grad
    T.backward(loss)
    assert x.grad is None


# -------------------------------------------------- finite differences


def test_fd_of_sum_of_squares():
    x = leaf([1.0, 2.0])

    def f():
        return float((x.data ** 2).sum())

    (g,) = finite_difference_gradient(f, [x], eps=1e-5)
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)


def test_fd_of_constant():
    x = leaf([1.0, 2.0])
    (g,) = finite_difference_gradient(lambda: 7.0, [x], eps=1e-5)
    np.testing.assert_allclose(g, [0.0, 0.0], atol=1e-12)


def test_fd_nonfinite_raises():
    x = leaf([0.0])

    def f():
        return float(np.log(x.data[0]))

    with pytest.raises(NonFiniteLossError):
        finite_difference_gradient(f, [x], eps=1e-5)


def test_fd_rejects_bad_eps():
    x = leaf([1.0])
    with pytest.raises(ValueError):
        finite_difference_gradient(lambda: 0.0, [x], eps=0.0)


# ---------------------------------------------------- per-op gradient oracle

UNARY_OPS = [
    ("exp", T.exp, (2, 3)),
    ("log1p_shift", lambda t: T.log(T.add(T.mul(t, t), 1.5)), (2, 3)),
    ("tanh", T.tanh, (2, 3)),
    ("sigmoid", T.sigmoid, (2, 3)),
    ("neg", T.neg, (2, 3)),
    ("pow3", lambda t: T.pow_(t, 3.0), (2, 3)),
    ("reshape", lambda t: T.reshape(t, (3, 2)), (2, 3)),
    ("transpose", lambda t: T.transpose(t, (1, 0)), (2, 3)),
    ("slice", lambda t: T.slice_(t, (slice(0, 2), slice(1, 3))), (3, 4)),
    ("sum_axis", lambda t: T.sum_(t, axis=1), (3, 4)),
    ("sum_keepdims", lambda t: T.sum_(t, axis=0, keepdims=True), (3, 4)),
    ("mean_axis", lambda t: T.mean(t, axis=-1), (3, 4)),
    ("mean_all", lambda t: T.mean(t), (3, 4)),
    ("sorted_sum", lambda t: T.sorted_sum(t, axis=0), (4, 3)),
    ("softmax", lambda t: T.softmax(t, axis=-1), (3, 4)),
    ("log_softmax", lambda t: T.log_softmax(t, axis=-1), (3, 4)),
    ("softmax_batched", lambda t: T.softmax(t, axis=-1), (2, 3, 4)),
]


@pytest.mark.parametrize("name,op,shape", UNARY_OPS)
def test_unary_op_gradient_oracle(name, op, shape):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = leaf(rng.normal(size=shape))
        probe = T.Tensor(rng.normal(size=op(x).shape))
        err = check_gradients(lambda: T.sum_(T.mul(op(x), probe)), [x], eps=1e-5)
        worst = max(worst, err)
    assert worst < 1e-4, f"{name}: rel err {worst}"


BINARY_OPS = [
    ("add", T.add, (2, 3), (2, 3)),
    ("add_broadcast", T.add, (2, 3), (3,)),
    ("sub", T.sub, (2, 3), (2, 3)),
    ("mul", T.mul, (2, 3), (2, 3)),
    ("mul_broadcast", T.mul, (2, 4, 3), (3,)),
    ("div", lambda a, b: T.div(a, T.add(T.mul(b, b), 0.5)), (2, 3), (2, 3)),
    ("matmul", T.matmul, (3, 4), (4, 2)),
    ("matmul_batched", T.matmul, (2, 3, 4), (4, 2)),
    ("matmul_bcast_rhs", T.matmul, (3, 4), (2, 4, 5)),
]


@pytest.mark.parametrize("name,op,sa,sb", BINARY_OPS)
def test_binary_op_gradient_oracle(name, op, sa, sb):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        a = leaf(rng.normal(size=sa))
        b = leaf(rng.normal(size=sb))
        probe = T.Tensor(rng.normal(size=op(a, b).shape))
        err = check_gradients(lambda: T.sum_(T.mul(op(a, b), probe)), [a, b], eps=1e-5)
        worst = max(worst, err)
    assert worst < 1e-4, f"{name}: rel err {worst}"


@pytest.mark.parametrize("seed", range(20))
def test_structured_op_gradient_oracle(seed):
    rng = np.random.default_rng(200 + seed)
    x = leaf(rng.normal(size=(2, 5, 4, 3)))
    w = leaf(rng.normal(size=(3, 3, 3, 2)))
    b = leaf(rng.normal(size=(2,)))
    probe = T.Tensor(rng.normal(size=(2, 5, 4, 2)))
    err = check_gradients(lambda: T.sum_(T.mul(T.conv2d(x, w, b), probe)), [x, w, b], eps=1e-5)
    assert err < 1e-4

    xt = leaf(rng.normal(size=(2, 6, 5)))
    k = leaf(rng.normal(size=(3, 5)))
    probe = T.Tensor(rng.normal(size=(2, 6, 5)))
    err = check_gradients(
        lambda: T.sum_(T.mul(T.depthwise_time_conv(xt, k), probe)), [xt, k], eps=1e-5
    )
    assert err < 1e-4


def test_concat_stack_gradients():
    rng = np.random.default_rng(5)
    a = leaf(rng.normal(size=(2, 3)))
    b = leaf(rng.normal(size=(2, 3)))
    probe = T.Tensor(rng.normal(size=(4, 3)))
    err = check_gradients(
        lambda: T.sum_(T.mul(T.concat([a, b], axis=0), probe)), [a, b], eps=1e-5
    )
    assert err < 1e-6
    probe2 = T.Tensor(rng.normal(size=(2, 2, 3)))
    err = check_gradients(
        lambda: T.sum_(T.mul(T.stack([a, b], axis=0), probe2)), [a, b], eps=1e-5
    )
    assert err < 1e-6


def test_sorted_sum_is_permutation_invariant_bitwise():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(5, 7))
    base = T.sorted_sum(T.Tensor(x), axis=0).data
    for seed in range(10):
        perm = np.random.default_rng(seed).permutation(5)
        permuted = T.sorted_sum(T.Tensor(x[perm]), axis=0).data
        assert np.array_equal(base, permuted)


def test_debug_checks_flag_catches_nonfinite():
    T.set_debug_checks(True)
    try:
        with pytest.raises(FloatingPointError):
            T.log(T.Tensor([-1.0]))
    finally:
        T.set_debug_checks(False)


# --------------------------------------------------------------------- sgd


def test_sgd_plain_step():
    p = leaf([1.0])
    p.grad = np.array([1.0])
    st = SgdState([p], learning_rate=0.1)
    sgd_step(st, epoch=0)
    np.testing.assert_allclose(p.data, [0.9])


def test_sgd_schedule_matches_stated_decays():
    p = leaf([1.0])
    st = SgdState([p], learning_rate=0.00125, epoch_milestones=[30, 60], decay_factor=10.0)
    assert st.lr_at(0) == 0.00125
    assert st.lr_at(29) == 0.00125
    np.testing.assert_allclose(st.lr_at(30), 0.000125)
    np.testing.assert_allclose(st.lr_at(60), 0.0000125)
    lrs = [st.lr_at(e) for e in range(100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_sgd_weight_decay_only():
    p = leaf([1.0])
    p.grad = np.array([0.0])
    st = SgdState([p], learning_rate=1.0, weight_decay=1e-4)
    sgd_step(st, epoch=0)
    np.testing.assert_allclose(p.data, [0.9999])


def test_sgd_momentum_accumulates():
    p = leaf([0.0])
    st = SgdState([p], learning_rate=1.0, momentum=0.9)
    p.grad = np.array([1.0])
    sgd_step(st, epoch=0)
    np.testing.assert_allclose(p.data, [-1.0])
    p.grad = np.array([1.0])
    sgd_step(st, epoch=0)  # v = 0.9*1 + 1 = 1.9
    np.testing.assert_allclose(p.data, [-2.9])


def test_sgd_missing_grad_is_contract_error():
    p = leaf([1.0])
    st = SgdState([p], learning_rate=0.1)
    with pytest.raises(T.ContractError):
        sgd_step(st, epoch=0)


def test_zero_grads():
    p = leaf([1.0])
    p.grad = np.array([1.0])
    T.zero_grads([p])
    assert p.grad is None


# -------------------------------------------------------------- checkpoint


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    named = {
        "enc.w": rng.normal(size=(4, 3)).astype(np.float32),
        "enc.b": rng.normal(size=(3,)).astype(np.float32),
        "head.w": rng.normal(size=(3, 2, 5)).astype(np.float32),
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, named)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(named)
    for k in named:
        assert named[k].dtype == loaded[k].dtype
        assert np.array_equal(named[k], loaded[k])
        assert named[k].tobytes() == loaded[k].tobytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, {"w": np.ones((4, 4), dtype=np.float32)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError) as e:
        load_checkpoint(path)
    assert "expected" in str(e.value)


# ------------------------------------------------------------- determinism


def test_float32_pipeline_stays_float32():
    x = T.Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    w = T.Tensor(np.ones((3, 4), dtype=np.float32), requires_grad=True)
    out = T.tanh(T.matmul(x, w))
    assert out.data.dtype == np.float32
    T.backward(T.sum_(out))
    assert x.grad.dtype == np.float32


def test_max_relative_error_handles_unprobed():
    a = [np.array([1.0, 2.0])]
    n = [np.array([1.0, np.nan])]
    assert max_relative_error(a, n) == 0.0
