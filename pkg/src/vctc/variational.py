"""Diagonal-Gaussian latent machinery.

Per-frame latent states are diagonal Gaussians parameterized by mean and
log-variance tensors.  Sampling goes through the reparameterization trick so
gradients flow into both parameters; divergences between two diagonal
Gaussians have a closed form, evaluated here in a way that is *exactly* zero
when the two distributions carry identical parameter arrays (differences are
taken before any transcendental function is applied).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .autodiff import Tensor, as_tensor, clamp, exp_, mul, neg, sub, sum_
from .numerics import Rng

#: log-variances are clipped to this symmetric range before exponentiation
LOG_VAR_LIMIT = 12.0


@dataclass
class DiagGaussian:
    """Mean / log-variance pair of matching shape (typically ``(d_z,)``)."""

    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mu = as_tensor(self.mu)
        self.log_var = as_tensor(self.log_var)
        if self.mu.shape != self.log_var.shape:
            raise ValueError(f"mu shape {self.mu.shape} != log_var shape {self.log_var.shape}")
        if not np.all(np.isfinite(self.log_var.data)):
            raise ValueError("log_var must be finite")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape

    def std_array(self) -> np.ndarray:
        return np.exp(0.5 * np.clip(self.log_var.data, -LOG_VAR_LIMIT, LOG_VAR_LIMIT))

    def log_density(self, x: np.ndarray) -> float:
        """Plain-numpy log-density of a point; used by sampling-based checks."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.mu.shape:
            raise ValueError(f"point shape {x.shape} != distribution shape {self.mu.shape}")
        lv = self.log_var.data
        quad = (x - self.mu.data) ** 2 * np.exp(-lv)
        return float(-0.5 * np.sum(lv + quad + math.log(2.0 * math.pi)))


def reparameterize_from_eps(q: DiagGaussian, eps: np.ndarray) -> Tensor:
    """``z = mu + exp(log_var / 2) * eps`` with the log-variance clipped first."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != q.shape:
        raise ValueError(f"eps shape {eps.shape} != distribution shape {q.shape}")
    std = exp_(mul(as_tensor(0.5), clamp(q.log_var, -LOG_VAR_LIMIT, LOG_VAR_LIMIT)))
    return q.mu + mul(std, as_tensor(eps))


def reparameterize(q: DiagGaussian, rng: Rng) -> Tensor:
    """Draw one reparameterized sample; deterministic under the rng state."""
    return reparameterize_from_eps(q, rng.standard_normal(q.shape))


def kl_diag_gauss(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """Closed-form KL(q || p) between diagonal Gaussians, as a scalar tensor.

    Computed from the parameter differences,

        KL = -1/2 * sum( dlv - exp(dlv) - (mu_q - mu_p)^2 * exp(-lv_p) + 1 )

    with ``dlv = lv_q - lv_p``, so identical parameter arrays give exactly
    0.0 summand-by-summand.
    """
    if q.shape != p.shape:
        raise ValueError(f"KL between mismatched shapes {q.shape} and {p.shape}")
    dlv = sub(q.log_var, p.log_var)
    dmu = sub(q.mu, p.mu)
    quad = mul(mul(dmu, dmu), exp_(neg(p.log_var)))
    inner = dlv - exp_(dlv) - quad + as_tensor(np.ones(q.shape) if q.shape else 1.0)
    return mul(as_tensor(-0.5), sum_(inner))


PriorBuilder = Callable[[Tensor], DiagGaussian]


def expected_kl_markov(
    q_prev: DiagGaussian,
    make_prior: PriorBuilder,
    q_t: DiagGaussian,
    rng: Rng,
    n_samples: int = 1,
) -> Tensor:
    """Monte Carlo ``E_{z ~ q_prev}[ KL(q_t || make_prior(z)) ]``.

    With ``n_samples = 1`` the estimate is the single sampled KL (no
    division), so a prior builder that ignores ``z`` reduces exactly to
    ``kl_diag_gauss(q_t, make_prior(.))``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    total: Tensor | None = None
    for _ in range(n_samples):
        z = reparameterize(q_prev, rng)
        term = kl_diag_gauss(q_t, make_prior(z))
        total = term if total is None else total + term
    assert total is not None
    return total if n_samples == 1 else total / float(n_samples)


#: A per-frame prior: either a fixed distribution or a builder fed the
#: previous frame's latent sample.
PriorLike = Union[DiagGaussian, PriorBuilder]


def chain_kl(
    q_seq: Sequence[DiagGaussian],
    prior_chain: Sequence[PriorLike],
    rng: Rng,
    n_samples: int = 1,
) -> Tensor:
    """Sum of per-frame divergences against a (possibly state-dependent) prior chain.

    The first entry must be an unconditional distribution (there is no
    previous latent to condition on).  Later entries that are plain
    distributions contribute a closed-form KL; callables contribute the
    Monte Carlo expectation over the previous frame's posterior.
    """
    if len(q_seq) != len(prior_chain):
        raise ValueError(f"got {len(q_seq)} posteriors but {len(prior_chain)} priors")
    if not q_seq:
        raise ValueError("empty latent sequence")
    first = prior_chain[0]
    if not isinstance(first, DiagGaussian):
        raise ValueError("the first prior in a chain must be unconditional (a DiagGaussian)")
    total = kl_diag_gauss(q_seq[0], first)
    for t in range(1, len(q_seq)):
        prior = prior_chain[t]
        if isinstance(prior, DiagGaussian):
            total = total + kl_diag_gauss(q_seq[t], prior)
        else:
            total = total + expected_kl_markov(q_seq[t - 1], prior, q_seq[t], rng, n_samples)
    return total
