"""Training objectives: plain alignment likelihood and its two latent-regularized forms.

All three losses share the same shape: a prediction term (the log path-sum
likelihood of the target under the frame posteriors) minus ``kl_weight``
times a regularization term.  They differ only in the regularizer:

* ``loss_ctc``       — no regularizer (baselines);
* ``loss_ci``        — per-frame closed-form KL against frame-wise priors;
* ``loss_markov``    — per-frame KL against a prior chain whose entry at
  frame ``t`` may depend on the previous frame's latent sample, handled by
  a Monte Carlo expectation.

Values are *maximization* objectives (higher is better); the trainer negates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, mul, sub
from .ctc import LabelSequence, ctc_loss_node
from .numerics import Rng
from .variational import DiagGaussian, PriorLike, chain_kl, kl_diag_gauss


@dataclass
class LossBreakdown:
    """Scalar components of one sequence loss; ``total = prediction - kl_weight * regularization``."""

    prediction: Tensor
    regularization: Tensor
    total: Tensor
    kl_weight: float

    def floats(self) -> tuple[float, float, float]:
        return self.total.item(), self.prediction.item(), self.regularization.item()


def _combine(prediction: Tensor, regularization: Tensor, kl_weight: float) -> LossBreakdown:
    total = sub(prediction, mul(as_tensor(float(kl_weight)), regularization))
    return LossBreakdown(prediction=prediction, regularization=regularization, total=total, kl_weight=float(kl_weight))


def loss_ctc(log_probs: Tensor | np.ndarray, targets: LabelSequence, blank: int | None = None) -> LossBreakdown:
    """Plain log path-sum likelihood; regularization fixed at zero."""
    prediction = ctc_loss_node(as_tensor(log_probs), targets, blank)
    return _combine(prediction, as_tensor(0.0), kl_weight=0.0)


def _check_frame_count(n_frames: int, q_seq: Sequence[DiagGaussian], p_seq: Sequence) -> None:
    if len(q_seq) != n_frames or len(p_seq) != n_frames:
        raise ValueError(
            f"latent sequences must cover every frame: T={n_frames}, "
            f"|q|={len(q_seq)}, |priors|={len(p_seq)}"
        )


def loss_ci(
    log_probs: Tensor | np.ndarray,
    targets: LabelSequence,
    q_seq: Sequence[DiagGaussian],
    p_seq: Sequence[DiagGaussian],
    kl_weight: float = 1.0,
    blank: int | None = None,
) -> LossBreakdown:
    """Likelihood minus per-frame KL against frame-wise (conditionally independent) priors."""
    lp = as_tensor(log_probs)
    _check_frame_count(lp.shape[0], q_seq, p_seq)
    prediction = ctc_loss_node(lp, targets, blank)
    regularization = kl_diag_gauss(q_seq[0], p_seq[0])
    for t in range(1, len(q_seq)):
        regularization = regularization + kl_diag_gauss(q_seq[t], p_seq[t])
    return _combine(prediction, regularization, kl_weight)


def loss_markov(
    log_probs: Tensor | np.ndarray,
    targets: LabelSequence,
    q_seq: Sequence[DiagGaussian],
    prior_chain: Sequence[PriorLike],
    rng: Rng,
    kl_weight: float = 1.0,
    n_samples: int = 1,
    blank: int | None = None,
) -> LossBreakdown:
    """Likelihood minus KL against a first-order prior chain.

    Entry ``t`` of ``prior_chain`` is either a fixed distribution (closed
    form KL, zero Monte Carlo variance) or a callable receiving the sampled
    latent of frame ``t - 1``.  The first entry is necessarily unconditional.
    """
    lp = as_tensor(log_probs)
    _check_frame_count(lp.shape[0], q_seq, prior_chain)
    prediction = ctc_loss_node(lp, targets, blank)
    regularization = chain_kl(q_seq, prior_chain, rng, n_samples)
    return _combine(prediction, regularization, kl_weight)


def kl_warmup_factor(step: int, warmup_steps: int) -> float:
    """Optional linear ramp for the regularizer weight; identity when disabled (0 steps)."""
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, (step + 1) / float(warmup_steps))
