import numpy as np
import pytest

from gradcheck import max_rel_error, numeric_grad
from mvsep.autodiff import (
    Adam,
    AdamState,
    RunningStats,
    Tensor,
    adam_step,
    backward,
    batchnorm1d,
    concat,
    conv1d,
    deconv1d,
    glu,
    no_grad,
    softmax,
)
from mvsep.autodiff import tensor as T
from mvsep.errors import ContractError, DimensionError, NonFiniteError, StateError

SEEDS = range(20)


def check_grad(build, arrays, tol=1e-4):
    """Compare backward() against central differences for ``sum(R * build(...))``."""
    rng = np.random.default_rng(1234)
    out_shape = build(*[Tensor(a) for a in arrays]).shape
    proj = rng.standard_normal(out_shape)

    def scalar(*arrs):
        with no_grad():
            return float((build(*[Tensor(a) for a in arrs]).data * proj).sum())

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = (build(*leaves) * proj).sum()
    analytic = backward(loss, leaves)
    numeric = numeric_grad(scalar, [a.copy() for a in arrays])
    err = max_rel_error(analytic, numeric)
    assert err < tol, err
    return err


# ----------------------------------------------------------------------
# conv1d
def test_conv1d_identity_kernel():
    out = conv1d(Tensor([[1, 2, 3, 4]]), Tensor([[[1.0]]]), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, [[1, 2, 3, 4]])


def test_conv1d_hand_example():
    out = conv1d(Tensor([[1, 2, 3]]), Tensor([[[1.0, 1.0]]]), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, [[3, 5]])


@pytest.mark.parametrize("n,k,stride,pad", [(9, 3, 1, 0), (10, 5, 2, 2), (7, 4, 3, 1)])
def test_conv1d_output_length(n, k, stride, pad):
    out = conv1d(Tensor(np.ones((2, n))), Tensor(np.ones((3, 2, k))), None, stride, pad)
    assert out.shape == (3, (n + 2 * pad - k) // stride + 1)


def test_conv1d_channel_mismatch():
    with pytest.raises(DimensionError):
        conv1d(Tensor(np.ones((2, 5))), Tensor(np.ones((1, 3, 2))))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv1d_gradient(seed):
    rng = np.random.default_rng(seed)
    stride, pad = 1 + seed % 2, seed % 3
    x = rng.standard_normal((2, 3, 9))
    w = rng.standard_normal((4, 3, 3))
    b = rng.standard_normal(4)
    check_grad(lambda x, w, b: conv1d(x, w, b, stride, pad), [x, w, b])


# ----------------------------------------------------------------------
# deconv1d
@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 4), (2, 2, 5), (3, 0, 3)])
def test_deconv_is_adjoint_of_conv(seed, stride, pad, k):
    rng = np.random.default_rng(seed)
    n_out = 6
    n = (n_out - 1) * stride - 2 * pad + k
    w = rng.standard_normal((3, 2, k))
    x = rng.standard_normal((2, n))
    y = rng.standard_normal((3, n_out))
    cx = conv1d(Tensor(x), Tensor(w), None, stride, pad).data
    assert cx.shape == y.shape
    dy = deconv1d(Tensor(y), Tensor(w), None, stride, pad).data
    assert dy.shape == x.shape
    assert abs((cx * y).sum() - (x * dy).sum()) < 1e-10


def test_deconv_hand_example():
    out = deconv1d(Tensor([[1.0, 1.0]]), Tensor([[[1.0, 1.0]]]), Tensor([0.0]), stride=2)
    np.testing.assert_array_equal(out.data, [[1, 1, 1, 1]])


@pytest.mark.parametrize("seed", SEEDS)
def test_deconv1d_gradient(seed):
    rng = np.random.default_rng(seed)
    stride, pad = 1 + seed % 2, seed % 2
    x = rng.standard_normal((2, 3, 5))
    w = rng.standard_normal((3, 2, 4))
    b = rng.standard_normal(2)
    check_grad(lambda x, w, b: deconv1d(x, w, b, stride, pad), [x, w, b])


# ----------------------------------------------------------------------
# batch norm
def test_batchnorm_constant_channel_gives_zero():
    out = batchnorm1d(
        Tensor(np.full((3, 6), 2.5)), Tensor(np.ones(3)), Tensor(np.zeros(3)), RunningStats(), True
    )
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_batchnorm_hand_example():
    out = batchnorm1d(Tensor([[0.0, 2.0]]), Tensor([1.0]), Tensor([0.0]), RunningStats(), True)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)


def test_batchnorm_running_stats_momentum():
    stats = RunningStats()
    batchnorm1d(Tensor([[0.0, 2.0]]), Tensor([1.0]), Tensor([0.0]), stats, True)
    # initial (0, 1); batch mean 1, unbiased var 2
    np.testing.assert_allclose(stats.mean, [0.1])
    np.testing.assert_allclose(stats.var, [0.9 * 1 + 0.1 * 2])


def test_batchnorm_eval_requires_stats():
    with pytest.raises(StateError):
        batchnorm1d(Tensor(np.ones((1, 3))), Tensor([1.0]), Tensor([0.0]), RunningStats(), False)


def test_batchnorm_eval_is_deterministic():
    stats = RunningStats(mean=np.array([1.0]), var=np.array([4.0]))
    x = Tensor([[1.0, 3.0, 5.0]])
    a = batchnorm1d(x, Tensor([2.0]), Tensor([0.5]), stats, False).data
    b = batchnorm1d(x, Tensor([2.0]), Tensor([0.5]), stats, False).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, 2 * (np.array([[0, 2, 4]]) / np.sqrt(4 + 1e-5)) + 0.5)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradient(seed, training):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 2, 5))
    gamma = rng.standard_normal(2)
    beta = rng.standard_normal(2)
    stats = RunningStats(mean=rng.standard_normal(2), var=rng.uniform(0.5, 2, 2))

    def build(x, g, b):
        return batchnorm1d(x, g, b, RunningStats(stats.mean, stats.var), training)

    check_grad(build, [x, gamma, beta])


# ----------------------------------------------------------------------
# GLU, softmax
def test_glu_zero_gate_halves():
    a = np.array([1.0, -2.0, 4.0])
    np.testing.assert_allclose(glu(Tensor(a), Tensor(np.zeros(3))).data, 0.5 * a)


def test_glu_saturated_gate():
    assert abs(glu(Tensor([2.0]), Tensor([50.0])).data[0] - 2.0) < 1e-12


def test_glu_shape_mismatch():
    with pytest.raises(DimensionError):
        glu(Tensor(np.ones(3)), Tensor(np.ones(4)))


@pytest.mark.parametrize("seed", SEEDS)
def test_glu_gradient(seed):
    rng = np.random.default_rng(seed)
    check_grad(glu, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))])


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor(np.zeros(4))).data, 0.25)
    np.testing.assert_allclose(softmax(Tensor([np.log(2), 0.0])).data, [2 / 3, 1 / 3])


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_sums_to_one_and_shift_invariant(seed):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(6) * 10
    p = softmax(Tensor(u)).data
    assert abs(p.sum() - 1) < 1e-12 and np.all(p >= 0)
    np.testing.assert_allclose(softmax(Tensor(u + 123.4)).data, p, rtol=1e-12, atol=1e-15)


def test_softmax_extreme_logits_finite():
    p = softmax(Tensor([1000.0, -1000.0, 0.0])).data
    assert np.all(np.isfinite(p))


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_gradient(seed):
    rng = np.random.default_rng(seed)
    check_grad(lambda u: softmax(u), [rng.standard_normal((2, 5))])


# ----------------------------------------------------------------------
# elementwise and structural ops
@pytest.mark.parametrize("seed", range(5))
def test_elementwise_gradients(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 2.0, (3, 4))
    b = rng.uniform(0.5, 2.0, (1, 4))

    def build(a, b):
        y = (a * b + a / b - b) ** 2
        y = T.log(T.exp(-y) + 1.0) + T.sigmoid(a - b)
        y = T.clip(y, -10, 10)
        return concat([y, T.broadcast_to(b, (2, 4))], axis=0)[1:, ::2].mean(axis=1)

    check_grad(build, [a, b])


# ----------------------------------------------------------------------
# backward contract
def test_backward_quadratic():
    p = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    (g,) = backward((p * p).sum(), [p])
    np.testing.assert_allclose(g, [2.0, -4.0, 6.0])


def test_backward_unreachable_param_is_zero():
    p = Tensor([1.0, 2.0], requires_grad=True)
    q = Tensor([3.0], requires_grad=True)
    gp, gq = backward((q * 2.0).sum(), [p, q])
    np.testing.assert_array_equal(gp, 0.0)
    np.testing.assert_array_equal(gq, [2.0])


def test_backward_rejects_non_scalar():
    p = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(p * 2.0)


def test_backward_twice_rejected():
    p = Tensor([1.0, 2.0], requires_grad=True)
    loss = (p * p).sum()
    backward(loss)
    with pytest.raises(StateError):
        backward(loss)


def test_no_grad_records_nothing():
    p = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = p * 3.0
    assert not y.requires_grad


@pytest.mark.parametrize("seed", SEEDS)
def test_composed_network_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 8))
    w = rng.standard_normal((4, 3, 3)) * 0.5
    gamma = rng.uniform(0.5, 1.5, 4)
    beta = rng.standard_normal(4)

    # a conv bias directly before batch norm has an identically zero gradient
    def build(x, w, gamma, beta):
        h = conv1d(x, w, None, stride=1, padding=1)
        h = batchnorm1d(h, gamma, beta, RunningStats(), True)
        return glu(h[:, :2], h[:, 2:])

    check_grad(build, [x, w, gamma, beta])


def test_forward_outputs_finite():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 2, 16)) * 100)
    h = conv1d(x, Tensor(rng.standard_normal((4, 2, 5))), None, 2, 2)
    h = batchnorm1d(h, Tensor(np.ones(4)), Tensor(np.zeros(4)), RunningStats(), True)
    h = glu(h[:, :2], h[:, 2:] * 1e3)
    h = deconv1d(h, Tensor(rng.standard_normal((2, 3, 4))), None, 2, 1)
    assert np.all(np.isfinite(h.data))


# ----------------------------------------------------------------------
# Adam
def test_adam_first_step_moves_by_lr():
    p = np.array([0.5])
    adam_step([p], [np.array([1.0])], AdamState())
    assert abs(p[0] - (0.5 - 1e-3)) < 1e-10


def test_adam_zero_gradient_no_move():
    p = np.array([0.5, -1.0])
    adam_step([p], [np.zeros(2)], AdamState())
    np.testing.assert_array_equal(p, [0.5, -1.0])


def test_adam_sign_symmetry():
    p, q = np.array([1.0]), np.array([1.0])
    opt = Adam([p, q], lr=0.01)
    for g in [0.3, 1.2, -0.5]:
        opt.step([np.array([g]), np.array([-g])])
    assert abs((p[0] - 1.0) + (q[0] - 1.0)) < 1e-15


def test_adam_rejects_non_finite():
    p = np.array([1.0])
    state = AdamState()
    with pytest.raises(NonFiniteError):
        adam_step([p], [np.array([np.nan])], state)
    assert p[0] == 1.0 and state.step == 0


def test_adam_step_counter_increases():
    p = np.array([1.0])
    state = AdamState()
    for i in range(3):
        adam_step([p], [np.array([0.1])], state)
        assert state.step == i + 1
