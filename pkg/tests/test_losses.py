import math

import numpy as np
import pytest

from vctc.autodiff import Tensor, backward, log_softmax
from vctc.ctc import ctc_log_likelihood
from vctc.losses import kl_warmup_factor, loss_ci, loss_ctc, loss_markov
from vctc.numerics import Rng
from vctc.variational import DiagGaussian, kl_diag_gauss


def gauss(mu, log_var):
    return DiagGaussian(mu=np.asarray(mu, dtype=np.float64), log_var=np.asarray(log_var, dtype=np.float64))


def uniform_log_probs(T, K):
    return np.full((T, K), -math.log(K))


def test_loss_ctc_is_plain_likelihood():
    lp = uniform_log_probs(2, 2)
    out = loss_ctc(lp, [0])
    assert out.prediction.item() == pytest.approx(math.log(3 / 4), abs=1e-12)
    assert out.regularization.item() == 0.0
    # with no regularizer the total must be the prediction bit for bit
    assert out.total.item() == out.prediction.item()


def test_loss_ci_combination_known_value():
    # prediction ln(3/4); two frames each contributing KL = 1/2 (unit shift)
    lp = uniform_log_probs(2, 2)
    qs = [gauss([0.0], [0.0]), gauss([0.0], [0.0])]
    ps = [gauss([1.0], [0.0]), gauss([1.0], [0.0])]
    out = loss_ci(lp, [0], qs, ps, kl_weight=0.25)
    assert out.prediction.item() == pytest.approx(math.log(3 / 4), abs=1e-12)
    assert out.regularization.item() == pytest.approx(1.0, abs=1e-12)
    assert out.total.item() == pytest.approx(math.log(3 / 4) - 0.25, abs=1e-12)


def test_loss_ci_zero_weight_total_equals_prediction_bitwise():
    lp = uniform_log_probs(3, 3)
    qs = [gauss([0.3], [0.1])] * 3
    ps = [gauss([-0.4], [0.5])] * 3
    out = loss_ci(lp, [0, 1], qs, ps, kl_weight=0.0)
    assert out.regularization.item() > 0.0
    assert out.total.item() == out.prediction.item()


def test_loss_ci_identical_q_p_total_equals_prediction_bitwise():
    lp = uniform_log_probs(2, 2)
    mu = np.array([0.37, -0.21])
    lv = np.array([0.11, 0.42])
    qs = [DiagGaussian(mu=mu.copy(), log_var=lv.copy()) for _ in range(2)]
    ps = [DiagGaussian(mu=mu.copy(), log_var=lv.copy()) for _ in range(2)]
    out = loss_ci(lp, [0], qs, ps, kl_weight=1.0)
    assert out.regularization.item() == 0.0
    assert out.total.item() == out.prediction.item()


def test_loss_ci_frame_count_mismatch_rejected():
    lp = uniform_log_probs(3, 2)
    qs = [gauss([0.0], [0.0])] * 2
    with pytest.raises(ValueError, match="every frame"):
        loss_ci(lp, [0], qs, qs)


def test_loss_markov_constant_chain_equals_loss_ci():
    """With every chain entry a fixed distribution the Monte Carlo machinery
    is bypassed and the two objectives agree exactly."""
    rng = np.random.default_rng(8)
    logits = rng.standard_normal((3, 3))
    lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    qs = [gauss(rng.standard_normal(2), rng.uniform(-1, 1, 2)) for _ in range(3)]
    ps = [gauss(rng.standard_normal(2), rng.uniform(-1, 1, 2)) for _ in range(3)]
    ci = loss_ci(lp, [0, 1], qs, ps, kl_weight=0.7)
    mk = loss_markov(lp, [0, 1], qs, ps, Rng(0), kl_weight=0.7)
    assert mk.total.item() == ci.total.item()
    assert mk.regularization.item() == ci.regularization.item()


def test_loss_markov_callable_entries_use_previous_sample():
    lp = uniform_log_probs(2, 2)
    qs = [gauss([0.0], [0.0]), gauss([0.0], [0.0])]

    seen = []

    def make_prior(z):
        seen.append(np.array(z.data))
        return gauss([0.0], [0.0])

    chain = [gauss([0.0], [0.0]), make_prior]
    loss_markov(lp, [0], qs, chain, Rng(3))
    assert len(seen) == 1
    np.testing.assert_array_equal(seen[0], Rng(3).standard_normal((1,)))  # z = 0 + 1*eps


def test_loss_markov_first_entry_callable_rejected():
    lp = uniform_log_probs(2, 2)
    qs = [gauss([0.0], [0.0])] * 2
    with pytest.raises(ValueError, match="unconditional"):
        loss_markov(lp, [0], qs, [lambda z: qs[0], qs[1]], Rng(0))


def test_single_frame_regularization():
    lp = np.log(np.array([[0.5, 0.5]]))
    out = loss_ci(lp, [0], [gauss([0.0], [0.0])], [gauss([1.0], [0.0])])
    assert out.regularization.item() == pytest.approx(0.5, abs=1e-12)
    assert out.total.item() == pytest.approx(math.log(0.5) - 0.5, abs=1e-12)


def test_gradients_flow_through_both_terms():
    logits = Tensor(np.zeros((2, 2)), requires_grad=True)
    mu = Tensor(np.array([0.4]), requires_grad=True)
    q = DiagGaussian(mu=mu, log_var=np.array([0.0]))
    p = gauss([0.0], [0.0])
    out = loss_ci(log_softmax(logits, axis=-1), [0], [q, q], [p, p], kl_weight=1.0)
    backward(out.total)
    assert logits.grad is not None and np.any(logits.grad != 0.0)
    # d total / d mu = -kl_weight * d(2 * mu^2/2)/dmu = -2 mu
    assert mu.grad[0] == pytest.approx(-2 * 0.4, abs=1e-12)


def test_breakdown_floats_order():
    lp = uniform_log_probs(2, 2)
    out = loss_ctc(lp, [0])
    total, prediction, regularization = out.floats()
    assert total == out.total.item()
    assert prediction == out.prediction.item()
    assert regularization == 0.0


def test_prediction_term_matches_plain_likelihood():
    rng = np.random.default_rng(44)
    logits = rng.standard_normal((4, 3))
    lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    qs = [gauss([0.0], [0.0])] * 4
    out = loss_ci(lp, [0, 1], qs, qs)
    assert out.prediction.item() == ctc_log_likelihood(lp, [0, 1])


def test_kl_warmup_factor():
    assert kl_warmup_factor(0, 0) == 1.0
    assert kl_warmup_factor(123, 0) == 1.0
    assert kl_warmup_factor(0, 4) == 0.25
    assert kl_warmup_factor(3, 4) == 1.0
    assert kl_warmup_factor(99, 4) == 1.0
