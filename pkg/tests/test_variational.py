import math

import numpy as np
import pytest

from vctc.autodiff import Tensor, backward
from vctc.numerics import Rng
from vctc.variational import (
    LOG_VAR_LIMIT,
    DiagGaussian,
    chain_kl,
    expected_kl_markov,
    kl_diag_gauss,
    reparameterize,
    reparameterize_from_eps,
)

from conftest import central_diff, rel_err


def gauss(mu, log_var):
    return DiagGaussian(mu=np.asarray(mu, dtype=np.float64), log_var=np.asarray(log_var, dtype=np.float64))


# --- construction -------------------------------------------------------------


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        gauss([0.0, 0.0], [0.0])


def test_nonfinite_log_var_rejected():
    with pytest.raises(ValueError):
        gauss([0.0], [np.inf])


def test_log_density_standard_normal_at_origin():
    q = gauss([0.0], [0.0])
    assert q.log_density(np.array([0.0])) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)


def test_log_density_factorizes_over_dimensions():
    q = gauss([0.5, -1.0], [0.3, -0.2])
    x = np.array([0.1, 0.2])
    parts = [
        gauss([0.5], [0.3]).log_density(np.array([0.1])),
        gauss([-1.0], [-0.2]).log_density(np.array([0.2])),
    ]
    assert q.log_density(x) == pytest.approx(sum(parts), abs=1e-12)


# --- reparameterization ---------------------------------------------------------


def test_reparameterize_known_eps():
    # z = 1 + exp(0.5*ln 4) * 1.5 = 1 + 2*1.5 = 4
    q = gauss([1.0], [math.log(4.0)])
    z = reparameterize_from_eps(q, np.array([1.5]))
    assert z.data[0] == pytest.approx(4.0, abs=1e-15)


def test_reparameterize_tiny_variance_collapses_to_mean():
    q = gauss([0.7, -0.3], [-40.0, -40.0])  # clipped to -LOG_VAR_LIMIT
    z = reparameterize_from_eps(q, np.array([3.0, -3.0]))
    np.testing.assert_allclose(z.data, q.mu.data, atol=3 * math.exp(-LOG_VAR_LIMIT / 2))


def test_reparameterize_sample_moments():
    q = gauss([2.0], [math.log(0.25)])
    rng = Rng(31)
    draws = np.array([reparameterize(q, rng).data[0] for _ in range(20_000)])
    assert draws.mean() == pytest.approx(2.0, abs=0.02)
    assert draws.std() == pytest.approx(0.5, abs=0.02)


def test_reparameterize_eps_shape_checked():
    with pytest.raises(ValueError):
        reparameterize_from_eps(gauss([0.0], [0.0]), np.zeros(2))


def test_reparameterize_grads_flow_to_both_parameters():
    mu = Tensor(np.array([0.3]), requires_grad=True)
    lv = Tensor(np.array([-0.4]), requires_grad=True)
    q = DiagGaussian(mu=mu, log_var=lv)
    eps = np.array([0.9])
    backward(reparameterize_from_eps(q, eps)[0])
    assert mu.grad[0] == pytest.approx(1.0, abs=1e-12)
    # dz/dlv = 0.5 * exp(lv/2) * eps
    assert lv.grad[0] == pytest.approx(0.5 * math.exp(-0.2) * 0.9, abs=1e-12)


# --- closed-form KL --------------------------------------------------------------


def test_kl_identical_parameters_is_exactly_zero():
    q = gauss([0.3, -1.2], [0.1, 0.5])
    p = gauss([0.3, -1.2], [0.1, 0.5])
    assert kl_diag_gauss(q, p).item() == 0.0  # bitwise, not approx


def test_kl_known_values():
    # mean shift by 1 at unit variance costs 1/2
    assert kl_diag_gauss(gauss([0.0], [0.0]), gauss([1.0], [0.0])).item() == pytest.approx(0.5, abs=1e-12)
    # KL(N(0,1) || N(0,e)) = -1/2 (ln(1/e) - 1/e + 1) = 1/(2e)
    got = kl_diag_gauss(gauss([0.0], [0.0]), gauss([0.0], [1.0])).item()
    assert got == pytest.approx(1.0 / (2.0 * math.e), abs=1e-12)


def test_kl_additive_over_dimensions():
    q = gauss([0.1, 0.9], [0.2, -0.3])
    p = gauss([-0.5, 0.4], [0.0, 0.6])
    parts = [
        kl_diag_gauss(gauss([0.1], [0.2]), gauss([-0.5], [0.0])).item(),
        kl_diag_gauss(gauss([0.9], [-0.3]), gauss([0.4], [0.6])).item(),
    ]
    assert kl_diag_gauss(q, p).item() == pytest.approx(sum(parts), abs=1e-12)


def test_kl_nonnegative_random(np_rng):
    for _ in range(50):
        q = gauss(np_rng.standard_normal(3), np_rng.uniform(-2, 2, 3))
        p = gauss(np_rng.standard_normal(3), np_rng.uniform(-2, 2, 3))
        assert kl_diag_gauss(q, p).item() >= 0.0


def test_kl_matches_monte_carlo():
    q = gauss([0.4, -0.2], [0.1, -0.5])
    p = gauss([-0.3, 0.6], [0.4, 0.0])
    n = 200_000
    z = np.random.default_rng(3).standard_normal((n, 2)) * q.std_array() + q.mu.data
    # E_q[log q(z) - log p(z)] estimated pointwise
    diffs = np.array([q.log_density(zi) - p.log_density(zi) for zi in z[:20_000]])
    want = kl_diag_gauss(q, p).item()
    assert diffs.mean() == pytest.approx(want, abs=4 * diffs.std() / math.sqrt(len(diffs)))


def test_kl_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        kl_diag_gauss(gauss([0.0], [0.0]), gauss([0.0, 0.0], [0.0, 0.0]))


def test_kl_grads_match_finite_differences(np_rng):
    mu_q = np_rng.standard_normal(3)
    lv_q = np_rng.uniform(-1, 1, 3)
    mu_p = np_rng.standard_normal(3)
    lv_p = np_rng.uniform(-1, 1, 3)

    tensors = {
        "mu_q": Tensor(mu_q.copy(), requires_grad=True),
        "lv_q": Tensor(lv_q.copy(), requires_grad=True),
        "mu_p": Tensor(mu_p.copy(), requires_grad=True),
        "lv_p": Tensor(lv_p.copy(), requires_grad=True),
    }
    q = DiagGaussian(mu=tensors["mu_q"], log_var=tensors["lv_q"])
    p = DiagGaussian(mu=tensors["mu_p"], log_var=tensors["lv_p"])
    backward(kl_diag_gauss(q, p))

    def value(arrays):
        return kl_diag_gauss(gauss(arrays["mu_q"], arrays["lv_q"]),
                             gauss(arrays["mu_p"], arrays["lv_p"])).item()

    base = {"mu_q": mu_q, "lv_q": lv_q, "mu_p": mu_p, "lv_p": lv_p}
    for name in base:
        def f(arr, name=name):
            arrays = dict(base)
            arrays[name] = arr
            return value(arrays)

        assert rel_err(tensors[name].grad, central_diff(f, base[name])) < 1e-6, name


# --- expected KL under a sampled condition ---------------------------------------


def test_expected_kl_constant_builder_reduces_exactly():
    q_prev = gauss([0.0, 0.0], [0.0, 0.0])
    q_t = gauss([0.5, -0.5], [0.2, -0.2])
    p_t = gauss([0.1, 0.1], [0.0, 0.0])
    got = expected_kl_markov(q_prev, lambda z: p_t, q_t, Rng(0), n_samples=1)
    assert got.item() == kl_diag_gauss(q_t, p_t).item()  # exact, not approx


def test_expected_kl_tracking_prior_matches_analytic():
    """Prior N(z, 1) with q_t == q_prev == N(0, 1): each sampled KL is z^2/2,
    so the expectation is E[z^2]/2 = 1/2."""
    q = gauss([0.0], [0.0])
    make_prior = lambda z: DiagGaussian(mu=z, log_var=np.array([0.0]))
    rng = Rng(5)
    estimates = [expected_kl_markov(q, make_prior, q, rng, n_samples=1).item() for _ in range(4000)]
    est = np.array(estimates)
    se = est.std() / math.sqrt(len(est))
    assert est.mean() == pytest.approx(0.5, abs=3.5 * se)


def test_expected_kl_invalid_sample_count():
    q = gauss([0.0], [0.0])
    with pytest.raises(ValueError):
        expected_kl_markov(q, lambda z: q, q, Rng(0), n_samples=0)


def test_expected_kl_grad_flows_into_prior_builder_params(np_rng):
    """The reparameterized sample keeps the chain differentiable end to end."""
    w = Tensor(np.array([0.8]), requires_grad=True)
    mu_prev = Tensor(np.array([0.4]), requires_grad=True)
    q_prev = DiagGaussian(mu=mu_prev, log_var=np.array([-0.7]))
    q_t = gauss([0.2], [0.1])

    def make_prior(z):
        return DiagGaussian(mu=z * w, log_var=np.array([0.0]))

    backward(expected_kl_markov(q_prev, make_prior, q_t, Rng(42), n_samples=1))
    eps = Rng(42).standard_normal((1,))  # same stream the estimator consumed

    def value(w_val, mu_val):
        z = mu_val + math.exp(-0.35) * eps[0]
        return kl_diag_gauss(q_t, gauss([z * w_val], [0.0])).item()

    fd_w = (value(0.8 + 1e-6, 0.4) - value(0.8 - 1e-6, 0.4)) / 2e-6
    fd_mu = (value(0.8, 0.4 + 1e-6) - value(0.8, 0.4 - 1e-6)) / 2e-6
    assert w.grad[0] == pytest.approx(fd_w, rel=1e-5)
    assert mu_prev.grad[0] == pytest.approx(fd_mu, rel=1e-5)


# --- chains -----------------------------------------------------------------------


def test_chain_kl_all_constant_priors_sums_closed_forms():
    qs = [gauss([0.1], [0.0]), gauss([0.2], [0.0]), gauss([0.3], [0.0])]
    ps = [gauss([0.0], [0.0]), gauss([0.0], [0.0]), gauss([0.0], [0.0])]
    want = sum(kl_diag_gauss(q, p).item() for q, p in zip(qs, ps))
    assert chain_kl(qs, ps, Rng(0)).item() == pytest.approx(want, abs=1e-15)


def test_chain_kl_first_entry_must_be_unconditional():
    qs = [gauss([0.0], [0.0]), gauss([0.0], [0.0])]
    with pytest.raises(ValueError, match="unconditional"):
        chain_kl(qs, [lambda z: qs[0], qs[1]], Rng(0))


def test_chain_kl_length_mismatch_rejected():
    qs = [gauss([0.0], [0.0])]
    with pytest.raises(ValueError):
        chain_kl(qs, [], Rng(0))
    with pytest.raises(ValueError):
        chain_kl([], [], Rng(0))
