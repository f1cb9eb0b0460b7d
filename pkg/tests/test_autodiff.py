import numpy as np
import pytest

from kinediff import autodiff as ad
from kinediff.autodiff import GraphError, Tensor, backward
from kinediff.gradcheck import finite_diff_check

RNG = np.random.default_rng(42)
W42 = RNG.standard_normal((4, 2))


def test_sum_gradient_is_ones():
    x = Tensor(np.array([1.0, -2.0, 0.5], np.float32), requires_grad=True)
    g = backward(x.sum(), [x])[x]
    assert np.array_equal(g, np.ones(3, np.float32))


def test_square_gradient():
    x = Tensor(np.array([2.0], np.float32), requires_grad=True)
    g = backward((x * x).sum(), [x])[x]
    assert np.allclose(g, [4.0])


def test_conv1d_mean_matches_finite_differences():
    x = RNG.standard_normal((2, 3, 16))
    w = RNG.standard_normal((4, 3, 5))
    r = finite_diff_check(
        lambda t: ad.conv1d(t, Tensor(w.copy()), stride=1, pad=2).mean(), x
    )
    assert r.max_rel_error < 1e-4
    r = finite_diff_check(
        lambda t: ad.conv1d(Tensor(x.copy()), t, stride=1, pad=2).mean(), w
    )
    assert r.max_rel_error < 1e-4


@pytest.mark.parametrize(
    "name,builder,shape",
    [
        ("mul_add", lambda t: (t * t * 2.0 + t).sum(), (3, 4)),
        ("matmul", lambda t: (t @ Tensor(W42.copy()) ** 2.0).sum(), (3, 4)),
        ("gelu", lambda t: ad.gelu(t).sum(), (6,)),
        ("power", lambda t: ((t * t + 1.0) ** -0.5).sum(), (5,)),
        ("exp_log", lambda t: ad.log(ad.exp(t) + 2.0).sum(), (4,)),
        ("reduce_max", lambda t: ad.reduce_max(t, axis=1).sum(), (3, 5)),
        ("gather", lambda t: ad.gather(t, np.array([1, 1, 0]), axis=0).sum(), (3, 4)),
        ("slice", lambda t: (t[1:, 1:] * t[:-1, :-1]).sum(), (3, 4)),
        ("reshape_concat", lambda t: ad.concat([t.reshape(12), t.reshape(12)], axis=0).sum(), (3, 4)),
        ("transpose", lambda t: (ad.transpose(t, (1, 0)) ** 2.0).sum(), (3, 4)),
        ("rownorm", lambda t: ad.rownorm(t).sum(), (4, 3)),
        ("abs", lambda t: ad.absolute(t).sum(), (7,)),
        ("upsample", lambda t: (ad.upsample2(t) ** 2.0).sum(), (2, 3, 4)),
        ("groupnorm", lambda t: (ad.groupnorm(t, Tensor(np.ones(4, np.float32), requires_grad=True), Tensor(np.zeros(4, np.float32), requires_grad=True), 2) ** 2.0).sum(), (2, 4, 5)),
    ],
)
def test_primitive_gradients_match_finite_differences(name, builder, shape):
    x = RNG.standard_normal(shape)
    r = finite_diff_check(builder, x)
    assert r.max_rel_error < 1e-4, f"{name}: {r.max_rel_error}"


def test_fanout_adjoints_sum():
    x = Tensor(RNG.standard_normal((3,)).astype(np.float32), requires_grad=True)
    y = (x * 2.0).sum() + (x * 3.0).sum() + (x * x).sum()
    g = backward(y, [x])[x]
    assert np.allclose(g, 5.0 + 2.0 * x.data, atol=1e-6)


def test_backward_bitwise_deterministic():
    x = Tensor(RNG.standard_normal((4, 4)).astype(np.float32), requires_grad=True)
    w = Tensor(RNG.standard_normal((4, 4)).astype(np.float32), requires_grad=True)

    def loss():
        return (ad.gelu(x @ w) ** 2.0).mean()

    g1 = backward(loss(), [x, w])
    g2 = backward(loss(), [x, w])
    assert np.array_equal(g1[x], g2[x])
    assert np.array_equal(g1[w], g2[w])


def test_unreachable_leaf_gets_zero_gradient():
    a = Tensor(np.ones(3, np.float32), requires_grad=True)
    b = Tensor(np.ones(3, np.float32), requires_grad=True)
    grads = backward((a * 2.0).sum(), [a, b])
    assert np.array_equal(grads[b], np.zeros(3, np.float32))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with pytest.raises(GraphError):
        backward(x * 2.0, [x])


def test_backward_rejects_non_finite_output():
    x = Tensor(np.array(np.inf, np.float32), requires_grad=True)
    with pytest.raises(GraphError):
        backward(x * 1.0, [x])


def test_nan_in_gradient_is_flagged():
    x = Tensor(np.array([0.0], np.float32), requires_grad=True)
    y = ad.log(x).sum() * 0.0  # forward is -inf * 0 = nan path in grads
    with pytest.raises(GraphError):
        backward(y, [x])


def test_no_grad_suppresses_recording():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with ad.no_grad():
        y = (x * 2.0).sum()
    assert y._parents == ()


def test_float64_graphs_stay_float64():
    x = Tensor(np.ones((2, 2), np.float64), requires_grad=True)
    y = ad.gelu(x @ x).sum()
    assert y.dtype == np.float64
