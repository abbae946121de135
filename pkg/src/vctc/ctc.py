"""Lattice computations for blank-separated monotone sequence alignment.

A label sequence ``y`` is scored against per-frame log-probabilities by
summing, over every frame-level path that collapses to ``y`` (merge adjacent
repeats, then drop blanks), the product of the per-frame probabilities.  The
sum is computed exactly by the usual forward/backward dynamic program over
the blank-interleaved extended label sequence; a brute-force path enumerator
is provided as an independent cross-check.

Conventions: frame tables have shape (T, K) with K = n_symbols + 1 and the
blank as the **last** column; rows are log-normalized.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .numerics import NEG_INF, log_add, log_sum_exp

#: Frame-level table of log-probabilities, shape (T, K), rows normalized.
FrameLogProbs = np.ndarray

#: Token ids in ``[0, n_symbols)``; never contains the blank id.
LabelSequence = Sequence[int]

_MAX_ENUM_PATHS = 10**7


class InfeasibleTargetError(ValueError):
    """Gradient requested for a target with zero total path mass."""


@dataclass(frozen=True)
class Vocab:
    """Closed symbol set; the blank class is implicit and indexed last."""

    symbols: tuple[str, ...]

    def __post_init__(self):
        if not self.symbols:
            raise ValueError("vocabulary must contain at least one symbol")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")

    @property
    def n_symbols(self) -> int:
        return len(self.symbols)

    @property
    def blank_index(self) -> int:
        return len(self.symbols)

    @property
    def n_classes(self) -> int:
        return len(self.symbols) + 1

    def index(self, symbol: str) -> int:
        return self.symbols.index(symbol)

    def to_symbols(self, tokens: LabelSequence) -> list[str]:
        return [self.symbols[t] for t in tokens]

    @classmethod
    def default(cls, n_symbols: int) -> "Vocab":
        """Generic symbol names: single letters, then ``t<i>``."""
        letters = "abcdefghijklmnopqrstuvwxyz"
        names = tuple(letters[i] if i < len(letters) else f"t{i}" for i in range(n_symbols))
        return cls(names)


def _resolve_blank(n_classes: int, blank: int | None) -> int:
    if blank is None:
        return n_classes - 1
    if not 0 <= blank < n_classes:
        raise ValueError(f"blank index {blank} out of range for {n_classes} classes")
    return blank


def validate_frame_log_probs(log_probs: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Check shape and per-row normalization of a frame table; returns it as float64."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise ValueError(f"frame table must be 2-D (T, K), got shape {lp.shape}")
    T, K = lp.shape
    if T < 1 or K < 2:
        raise ValueError(f"frame table needs T >= 1 and K >= 2, got {lp.shape}")
    if np.isnan(lp).any():
        raise ValueError("frame table contains NaN")
    row_max = np.max(lp, axis=1, keepdims=True)
    safe = np.where(np.isfinite(row_max), row_max, 0.0)
    with np.errstate(divide="ignore"):
        row_lse = np.log(np.sum(np.exp(lp - safe), axis=1)) + safe[:, 0]
    if not np.all(np.abs(row_lse) <= tol):
        worst = float(np.max(np.abs(row_lse)))
        raise ValueError(f"frame rows are not log-normalized (worst |log-mass| = {worst:.3e})")
    return lp


def validate_targets(targets: LabelSequence, n_classes: int, blank: int) -> list[int]:
    out = [int(t) for t in targets]
    for t in out:
        if t == blank:
            raise ValueError("targets must not contain the blank id")
        if not 0 <= t < n_classes:
            raise ValueError(f"target id {t} out of range for {n_classes} classes")
    return out


def collapse(path: Sequence[int], blank: int) -> list[int]:
    """Merge adjacent repeats, then remove blanks."""
    out: list[int] = []
    prev: int | None = None
    for a in path:
        a = int(a)
        if a != prev and a != blank:
            out.append(a)
        prev = a
    return out


def extended_labels(targets: Sequence[int], blank: int) -> np.ndarray:
    """Blank-interleaved state sequence ``[b, y1, b, y2, ..., b]`` (length 2*|y|+1)."""
    ext = np.full(2 * len(targets) + 1, blank, dtype=np.int64)
    ext[1::2] = targets
    return ext


@dataclass
class CtcLattice:
    """Forward/backward state of one alignment problem.

    ``log_alpha[t, s]`` is the mass of prefixes ending in extended state
    ``s`` at frame ``t``; ``log_beta[t, s]`` the mass of completions from
    state ``s`` starting at frame ``t``.  Both include frame ``t``'s own
    emission, so ``alpha + beta - emission`` marginalizes to ``log_total``
    at every frame.
    """

    extended: np.ndarray
    blank: int
    log_alpha: np.ndarray
    log_total: float
    log_beta: np.ndarray | None = None

    @property
    def n_states(self) -> int:
        return len(self.extended)


def _skip_mask(ext: np.ndarray, blank: int) -> np.ndarray:
    """States reachable by the two-step transition (distinct non-blank labels)."""
    allow = np.zeros(len(ext), dtype=bool)
    if len(ext) > 2:
        allow[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return allow


def build_lattice(
    log_probs: np.ndarray,
    targets: LabelSequence,
    blank: int | None = None,
    *,
    with_beta: bool = False,
    validate: bool = True,
) -> CtcLattice:
    lp = validate_frame_log_probs(log_probs) if validate else np.asarray(log_probs, dtype=np.float64)
    T, K = lp.shape
    blank = _resolve_blank(K, blank)
    y = validate_targets(targets, K, blank)
    ext = extended_labels(y, blank)
    S = len(ext)
    skip = _skip_mask(ext, blank)

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        if S > 2:
            acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + lp[t, ext]

    total = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])

    beta = None
    if with_beta:
        beta = np.full((T, S), NEG_INF)
        beta[T - 1, S - 1] = lp[T - 1, ext[S - 1]]
        if S > 1:
            beta[T - 1, S - 2] = lp[T - 1, ext[S - 2]]
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1]
            acc = nxt.copy()
            acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
            if S > 2:
                # moving s -> s+2 is legal iff state s+2 admits the skip
                acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
            beta[t] = acc + lp[t, ext]

    return CtcLattice(extended=ext, blank=blank, log_alpha=alpha, log_total=float(total), log_beta=beta)


def ctc_log_likelihood(log_probs: np.ndarray, targets: LabelSequence, blank: int | None = None) -> float:
    """Log total mass of all frame paths collapsing to ``targets``.

    Returns ``-inf`` for infeasible targets (e.g. adjacent repeats that do
    not fit in the frame budget); that is a value, not an error.
    """
    return build_lattice(log_probs, targets, blank).log_total


def occupancy(lattice: CtcLattice, log_probs: np.ndarray) -> np.ndarray:
    """Posterior per-frame class occupancy gamma, shape (T, K); rows sum to 1."""
    if lattice.log_beta is None:
        raise ValueError("occupancy needs a lattice built with with_beta=True")
    if lattice.log_total == NEG_INF:
        raise InfeasibleTargetError("occupancy undefined: target has zero path mass")
    lp = np.asarray(log_probs, dtype=np.float64)
    T, K = lp.shape
    # alpha and beta both include frame t's emission; remove one copy.
    log_state = lattice.log_alpha + lattice.log_beta - lp[:, lattice.extended] - lattice.log_total
    gamma = np.zeros((T, K))
    state_mass = np.exp(log_state)
    for s, k in enumerate(lattice.extended):
        gamma[:, k] += state_mass[:, s]
    return gamma


def ctc_grad(log_probs: np.ndarray, targets: LabelSequence, blank: int | None = None) -> np.ndarray:
    """Gradient of the log-likelihood w.r.t. unnormalized frame logits.

    With the softmax composed in, the gradient is ``gamma(t, k) -
    softmax(t, k)``; for a normalized input table the softmax term is just
    ``exp(log_probs)``.  Raises :class:`InfeasibleTargetError` when the
    likelihood is ``-inf`` (the gradient does not exist there).
    """
    lattice = build_lattice(log_probs, targets, blank, with_beta=True)
    if lattice.log_total == NEG_INF:
        raise InfeasibleTargetError("gradient undefined: target has zero path mass")
    lp = np.asarray(log_probs, dtype=np.float64)
    return occupancy(lattice, lp) - np.exp(lp)


def ctc_loss_node(log_probs: Tensor, targets: LabelSequence, blank: int | None = None) -> Tensor:
    """Differentiable scalar log-likelihood node on a (T, K) log-prob tensor.

    The backward rule multiplies the upstream gradient by the occupancy
    table (the exact gradient w.r.t. normalized log-probs); composed with a
    ``log_softmax`` parent this reproduces ``gamma - softmax`` on logits.
    """
    needs_grad = log_probs.requires_grad
    lattice = build_lattice(log_probs.data, targets, blank, with_beta=needs_grad)
    if lattice.log_total == NEG_INF:

        def grad_fn(_g):
            raise InfeasibleTargetError("backward through a zero-mass alignment")

    else:
        gamma = occupancy(lattice, log_probs.data) if needs_grad else None

        def grad_fn(g):
            return g * gamma

    return Tensor(np.asarray(lattice.log_total), _parents=(log_probs,), _grad_fns=(grad_fn,))


def _path_grid(K: int, T: int) -> np.ndarray:
    return np.indices((K,) * T).reshape(T, -1).T


def _match_mass(lp: np.ndarray, paths: np.ndarray, y: list[int], blank: int) -> float:
    """Log-mass of the rows of ``paths`` whose collapse equals ``y`` (vectorized)."""
    T = lp.shape[0]
    prev = np.concatenate([np.full((paths.shape[0], 1), -1, dtype=paths.dtype), paths[:, :-1]], axis=1)
    keep = (paths != prev) & (paths != blank)
    cand = keep.sum(axis=1) == len(y)
    if not cand.any():
        return NEG_INF
    rows = paths[cand]
    if y:
        kept = rows[keep[cand]].reshape(-1, len(y))
        match = np.all(kept == np.asarray(y), axis=1)
        rows = rows[match]
        if rows.shape[0] == 0:
            return NEG_INF
    scores = lp[np.arange(T), rows].sum(axis=1)
    return log_sum_exp(scores)


def brute_force_log_likelihood(
    log_probs: np.ndarray, targets: LabelSequence, blank: int | None = None
) -> float:
    """Literal enumeration of every frame path; independent check of the lattice.

    Refuses instances beyond ``K ** T > 1e7`` paths.
    """
    lp = validate_frame_log_probs(log_probs)
    T, K = lp.shape
    blank = _resolve_blank(K, blank)
    y = validate_targets(targets, K, blank)
    n_paths = K**T
    if n_paths > _MAX_ENUM_PATHS:
        raise ValueError(f"enumeration of {n_paths} paths refused (cap {_MAX_ENUM_PATHS})")
    if n_paths <= 262_144:
        return _match_mass(lp, _path_grid(K, T), y, blank)
    total = NEG_INF
    chunk: list[tuple[int, ...]] = []
    for path in itertools.product(range(K), repeat=T):
        chunk.append(path)
        if len(chunk) == 65_536:
            total = log_add(total, _match_mass(lp, np.asarray(chunk), y, blank))
            chunk.clear()
    if chunk:
        total = log_add(total, _match_mass(lp, np.asarray(chunk), y, blank))
    return total
