"""Independent cross-checks for the core numerics.

These routines deliberately avoid the code paths they verify: the alignment
likelihood is checked against literal path enumeration, and the closed-form
Gaussian divergence against Gauss-Hermite quadrature and Monte Carlo
estimates.  They back both the ``oracle-check`` CLI subcommand and the test
suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss

from ..ctc import brute_force_log_likelihood, ctc_log_likelihood
from ..numerics import Rng
from ..variational import DiagGaussian, kl_diag_gauss


def random_ctc_instance(rng: Rng, max_t: int = 6, max_symbols: int = 3, max_target: int = 3):
    """A random normalized frame table and target; may be feasible or not."""
    T = int(rng.integers(1, max_t + 1))
    n_symbols = int(rng.integers(1, max_symbols + 1))
    K = n_symbols + 1
    logits = 3.0 * rng.standard_normal((T, K))
    shifted = logits - logits.max(axis=1, keepdims=True)
    lp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    U = int(rng.integers(0, max_target + 1))
    y = [int(t) for t in rng.integers(0, n_symbols, size=U)]
    return lp, y


def gauss_hermite_kl_1d(mu_q: float, log_var_q: float, mu_p: float, log_var_p: float, nodes: int = 64) -> float:
    """KL between scalar Gaussians by quadrature of q * ln(q/p).

    Substituting ``x = mu_q + sqrt(2) * sigma_q * u`` turns the integral into
    a weighted sum over the physicists' Hermite nodes.
    """
    u, w = hermgauss(nodes)
    sigma_q = math.exp(0.5 * log_var_q)
    x = mu_q + math.sqrt(2.0) * sigma_q * u

    def log_pdf(x, mu, log_var):
        return -0.5 * (log_var + (x - mu) ** 2 * np.exp(-log_var) + math.log(2 * math.pi))

    integrand = log_pdf(x, mu_q, log_var_q) - log_pdf(x, mu_p, log_var_p)
    return float(np.sum(w * integrand) / math.sqrt(math.pi))


def monte_carlo_kl(
    mu_q: np.ndarray, log_var_q: np.ndarray, mu_p: np.ndarray, log_var_p: np.ndarray, n: int, rng: Rng
) -> tuple[float, float]:
    """(estimate, standard error) of KL by sampling ``ln q - ln p`` under q."""
    mu_q, log_var_q = np.atleast_1d(mu_q), np.atleast_1d(log_var_q)
    mu_p, log_var_p = np.atleast_1d(mu_p), np.atleast_1d(log_var_p)
    eps = rng.standard_normal((n, mu_q.shape[0]))
    x = mu_q + np.exp(0.5 * log_var_q) * eps

    def log_pdf(x, mu, lv):
        return -0.5 * np.sum(lv + (x - mu) ** 2 * np.exp(-lv) + math.log(2 * math.pi), axis=1)

    diffs = log_pdf(x, mu_q, log_var_q) - log_pdf(x, mu_p, log_var_p)
    return float(diffs.mean()), float(diffs.std(ddof=1) / math.sqrt(n))


def closed_form_kl(mu_q, log_var_q, mu_p, log_var_p) -> float:
    """The library's closed-form divergence, evaluated on plain floats/arrays."""
    q = DiagGaussian(np.atleast_1d(np.asarray(mu_q, dtype=np.float64)), np.atleast_1d(np.asarray(log_var_q, dtype=np.float64)))
    p = DiagGaussian(np.atleast_1d(np.asarray(mu_p, dtype=np.float64)), np.atleast_1d(np.asarray(log_var_p, dtype=np.float64)))
    return kl_diag_gauss(q, p).item()


@dataclass
class OracleOutcome:
    name: str
    n_cases: int
    worst: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: worst deviation {self.worst:.3e} over {self.n_cases} cases (tol {self.tolerance:.1e})"


def run_ctc_oracle_suite(n_instances: int = 200, seed: int = 0) -> OracleOutcome:
    """Lattice likelihood vs. literal enumeration on random small instances."""
    rng = Rng(seed).derive("ctc_oracle")
    worst = 0.0
    for _ in range(n_instances):
        lp, y = random_ctc_instance(rng)
        got = ctc_log_likelihood(lp, y)
        want = brute_force_log_likelihood(lp, y)
        if got == want:  # covers the matched -inf (infeasible) case
            continue
        worst = max(worst, abs(got - want))
    return OracleOutcome(name="lattice likelihood vs enumeration", n_cases=n_instances, worst=worst, tolerance=1e-9)


def run_kl_oracle_suite(n_instances: int = 200, seed: int = 0) -> OracleOutcome:
    """Closed-form divergence vs. 64-node quadrature on random scalar Gaussians."""
    rng = Rng(seed).derive("kl_oracle")
    worst = 0.0
    for _ in range(n_instances):
        mu_q, mu_p = rng.uniform(-3.0, 3.0, 2)
        lv_q, lv_p = rng.uniform(-2.0, 2.0, 2)
        closed = closed_form_kl(mu_q, lv_q, mu_p, lv_p)
        quad = gauss_hermite_kl_1d(float(mu_q), float(lv_q), float(mu_p), float(lv_p))
        worst = max(worst, abs(closed - quad))
    return OracleOutcome(name="closed-form KL vs quadrature", n_cases=n_instances, worst=worst, tolerance=1e-6)
