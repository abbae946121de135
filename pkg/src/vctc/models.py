"""Model variants mapping a feature sequence to frame posteriors.

Five architectures share one head convention: per-frame class
log-probabilities over ``n_symbols + 1`` classes with the blank last.

* ``linear_ctc``  — affine projection of the features; no latent state.
* ``nonreg_ctc``  — identical structure to ``ci`` (same parameter count,
  latents sampled the same way) but meant to be trained without the KL
  regularizer, as an ablation baseline.
* ``ci``          — per-frame latent with posterior and prior each inferred
  from the current feature vector alone.
* ``md``          — like ``ci`` but the prior at frame ``t`` is produced
  from the current features *and* the prior's own parameters at ``t - 1``
  (a learned first-order chain with a trainable initial state).
* ``ma``          — like ``ci`` but the prior parameter sequences are
  produced by two bidirectional recurrent stacks over the whole feature
  sequence.

Latent-bearing variants draw ``z`` by reparameterization during training and
use the posterior mean (``mean_pass=True``) for evaluation and decoding.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autodiff import (
    BiGruLayer,
    GruCellParams,
    LinearLayer,
    ParamStore,
    Tensor,
    bigru_forward,
    concat,
    log_softmax,
)
from .ctc import Vocab
from .losses import LossBreakdown, loss_ci, loss_ctc, loss_markov
from .numerics import Rng
from .variational import DiagGaussian, reparameterize


class Variant(str, Enum):
    LINEAR_CTC = "linear_ctc"
    NONREG_CTC = "nonreg_ctc"
    CI = "ci"
    MD = "md"
    MA = "ma"

    @property
    def loss_kind(self) -> str:
        """The objective this variant is trained with."""
        return {
            Variant.LINEAR_CTC: "ctc",
            Variant.NONREG_CTC: "ctc",
            Variant.CI: "ci",
            Variant.MD: "markov",
            Variant.MA: "markov",
        }[self]

    @property
    def has_latent(self) -> bool:
        return self is not Variant.LINEAR_CTC


@dataclass(frozen=True)
class ModelConfig:
    d_in: int
    vocab: Vocab
    variant: Variant
    d_z: int = 32
    d_hidden: int = 64

    def __post_init__(self):
        if self.d_in < 1 or self.d_z < 1 or self.d_hidden < 1:
            raise ValueError("model dimensions must be positive")
        if self.variant is Variant.MA and self.d_z % 2 != 0:
            raise ValueError("the recurrent-prior variant needs an even d_z (two directions concatenated)")

    @property
    def n_classes(self) -> int:
        return self.vocab.n_classes

    def to_dict(self) -> dict:
        return {
            "d_in": self.d_in,
            "d_z": self.d_z,
            "d_hidden": self.d_hidden,
            "variant": self.variant.value,
            "vocab": list(self.vocab.symbols),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            d_in=int(d["d_in"]),
            d_z=int(d["d_z"]),
            d_hidden=int(d["d_hidden"]),
            variant=Variant(d["variant"]),
            vocab=Vocab(tuple(d["vocab"])),
        )


@dataclass
class ForwardOutput:
    """One sequence's forward pass; latent fields stay ``None`` for baselines."""

    frame_log_probs: Tensor
    q_seq: list[DiagGaussian] | None = None
    prior_seq: list[DiagGaussian] | None = None
    z_seq: Tensor | None = None


def init_params(cfg: ModelConfig, rng: Rng) -> ParamStore:
    """Fresh parameters: uniform +-1/sqrt(fan_in) weights, zero biases."""
    store = ParamStore()
    K = cfg.n_classes
    if cfg.variant is Variant.LINEAR_CTC:
        store.add_linear("head", LinearLayer.init(rng.derive("head"), K, cfg.d_in))
        return store

    store.add_linear("q_mu", LinearLayer.init(rng.derive("q_mu"), cfg.d_z, cfg.d_in))
    store.add_linear("q_logvar", LinearLayer.init(rng.derive("q_logvar"), cfg.d_z, cfg.d_in))
    if cfg.variant in (Variant.CI, Variant.NONREG_CTC):
        store.add_linear("p_mu", LinearLayer.init(rng.derive("p_mu"), cfg.d_z, cfg.d_in))
        store.add_linear("p_logvar", LinearLayer.init(rng.derive("p_logvar"), cfg.d_z, cfg.d_in))
    elif cfg.variant is Variant.MD:
        chain_in = cfg.d_in + 2 * cfg.d_z
        store.add_linear("p_mu", LinearLayer.init(rng.derive("p_mu"), cfg.d_z, chain_in))
        store.add_linear("p_logvar", LinearLayer.init(rng.derive("p_logvar"), cfg.d_z, chain_in))
        store.add("p_init/mu", Tensor(np.zeros(cfg.d_z), requires_grad=True))
        store.add("p_init/logvar", Tensor(np.zeros(cfg.d_z), requires_grad=True))
    elif cfg.variant is Variant.MA:
        hidden = cfg.d_z // 2
        store.add_bigru("p_mu_gru", BiGruLayer.init(rng.derive("p_mu_gru"), hidden, cfg.d_in))
        store.add_bigru("p_logvar_gru", BiGruLayer.init(rng.derive("p_logvar_gru"), hidden, cfg.d_in))
    store.add_linear("z_proj", LinearLayer.init(rng.derive("z_proj"), cfg.d_hidden, cfg.d_z))
    store.add_linear("head", LinearLayer.init(rng.derive("head"), K, cfg.d_hidden + cfg.d_in))
    return store


def _linear(params: ParamStore, name: str) -> LinearLayer:
    return LinearLayer(params[f"{name}/weight"], params[f"{name}/bias"])


def _bigru(params: ParamStore, name: str) -> BiGruLayer:
    def cell(direction: str) -> GruCellParams:
        return GruCellParams(
            w_x=params[f"{name}/{direction}/w_x"],
            w_h_rz=params[f"{name}/{direction}/w_h_rz"],
            w_h_n=params[f"{name}/{direction}/w_h_n"],
            bias=params[f"{name}/{direction}/bias"],
        )

    return BiGruLayer(cell("fw"), cell("bw"))


def _check_input(cfg: ModelConfig, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cfg.d_in:
        raise ValueError(f"expected input of shape (T, {cfg.d_in}), got {X.shape}")
    if X.shape[0] < 1:
        raise ValueError("empty input sequence")
    return X


def _rows(mu: Tensor, log_var: Tensor) -> list[DiagGaussian]:
    return [DiagGaussian(mu[t], log_var[t]) for t in range(mu.shape[0])]


def _latent_head(cfg: ModelConfig, params: ParamStore, Xt: Tensor, z: Tensor) -> Tensor:
    h = _linear(params, "z_proj")(z)
    logits = _linear(params, "head")(concat([h, Xt], axis=1))
    return log_softmax(logits, axis=-1)


def _sample_or_mean(q_all: DiagGaussian, rng: Rng | None, mean_pass: bool) -> Tensor:
    if mean_pass:
        return q_all.mu
    if rng is None:
        raise ValueError("rng is required when sampling latents (mean_pass=False)")
    return reparameterize(q_all, rng)


def forward_linear_ctc(cfg: ModelConfig, params: ParamStore, X: np.ndarray) -> ForwardOutput:
    Xt = Tensor(_check_input(cfg, X))
    return ForwardOutput(frame_log_probs=log_softmax(_linear(params, "head")(Xt), axis=-1))


def forward_ci(
    cfg: ModelConfig,
    params: ParamStore,
    X: np.ndarray,
    rng: Rng | None = None,
    mean_pass: bool = False,
    with_priors: bool = True,
) -> ForwardOutput:
    Xt = Tensor(_check_input(cfg, X))
    mu_q = _linear(params, "q_mu")(Xt)
    lv_q = _linear(params, "q_logvar")(Xt)
    z = _sample_or_mean(DiagGaussian(mu_q, lv_q), rng, mean_pass)
    flp = _latent_head(cfg, params, Xt, z)
    if not with_priors:
        return ForwardOutput(frame_log_probs=flp, z_seq=z)
    mu_p = _linear(params, "p_mu")(Xt)
    lv_p = _linear(params, "p_logvar")(Xt)
    return ForwardOutput(
        frame_log_probs=flp,
        q_seq=_rows(mu_q, lv_q),
        prior_seq=_rows(mu_p, lv_p),
        z_seq=z,
    )


def forward_nonreg_ctc(
    cfg: ModelConfig,
    params: ParamStore,
    X: np.ndarray,
    rng: Rng | None = None,
    mean_pass: bool = False,
) -> ForwardOutput:
    """Structurally the ``ci`` pass, but no prior machinery is exposed (none is trained)."""
    return forward_ci(cfg, params, X, rng, mean_pass, with_priors=False)


def forward_md(
    cfg: ModelConfig,
    params: ParamStore,
    X: np.ndarray,
    rng: Rng | None = None,
    mean_pass: bool = False,
) -> ForwardOutput:
    Xt = Tensor(_check_input(cfg, X))
    mu_q = _linear(params, "q_mu")(Xt)
    lv_q = _linear(params, "q_logvar")(Xt)
    z = _sample_or_mean(DiagGaussian(mu_q, lv_q), rng, mean_pass)
    flp = _latent_head(cfg, params, Xt, z)

    p_mu = _linear(params, "p_mu")
    p_lv = _linear(params, "p_logvar")
    prev_mu, prev_lv = params["p_init/mu"], params["p_init/logvar"]
    prior_seq: list[DiagGaussian] = []
    for t in range(Xt.shape[0]):
        inp = concat([Xt[t], prev_mu, prev_lv], axis=0)
        mu_t = p_mu(inp)
        lv_t = p_lv(inp)
        prior_seq.append(DiagGaussian(mu_t, lv_t))
        prev_mu, prev_lv = mu_t, lv_t
    return ForwardOutput(frame_log_probs=flp, q_seq=_rows(mu_q, lv_q), prior_seq=prior_seq, z_seq=z)


def forward_ma(
    cfg: ModelConfig,
    params: ParamStore,
    X: np.ndarray,
    rng: Rng | None = None,
    mean_pass: bool = False,
) -> ForwardOutput:
    Xt = Tensor(_check_input(cfg, X))
    mu_q = _linear(params, "q_mu")(Xt)
    lv_q = _linear(params, "q_logvar")(Xt)
    z = _sample_or_mean(DiagGaussian(mu_q, lv_q), rng, mean_pass)
    flp = _latent_head(cfg, params, Xt, z)
    mu_p = bigru_forward(_bigru(params, "p_mu_gru"), Xt)
    lv_p = bigru_forward(_bigru(params, "p_logvar_gru"), Xt)
    return ForwardOutput(frame_log_probs=flp, q_seq=_rows(mu_q, lv_q), prior_seq=_rows(mu_p, lv_p), z_seq=z)


def forward(
    cfg: ModelConfig,
    params: ParamStore,
    X: np.ndarray,
    rng: Rng | None = None,
    mean_pass: bool = False,
) -> ForwardOutput:
    if cfg.variant is Variant.LINEAR_CTC:
        return forward_linear_ctc(cfg, params, X)
    if cfg.variant is Variant.NONREG_CTC:
        return forward_nonreg_ctc(cfg, params, X, rng, mean_pass)
    if cfg.variant is Variant.CI:
        return forward_ci(cfg, params, X, rng, mean_pass)
    if cfg.variant is Variant.MD:
        return forward_md(cfg, params, X, rng, mean_pass)
    if cfg.variant is Variant.MA:
        return forward_ma(cfg, params, X, rng, mean_pass)
    raise ValueError(f"unknown variant {cfg.variant!r}")


def sequence_loss(
    cfg: ModelConfig,
    params: ParamStore,
    X: np.ndarray,
    targets,
    rng: Rng | None = None,
    kl_weight: float = 1.0,
    n_samples: int = 1,
    mean_pass: bool = False,
) -> LossBreakdown:
    """Forward one sequence and apply the variant's own objective."""
    out = forward(cfg, params, X, rng, mean_pass)
    blank = cfg.vocab.blank_index
    kind = cfg.variant.loss_kind
    if kind == "ctc":
        return loss_ctc(out.frame_log_probs, targets, blank)
    if kind == "ci":
        return loss_ci(out.frame_log_probs, targets, out.q_seq, out.prior_seq, kl_weight, blank)
    # The built-in chain priors are deterministic functions of X, so the
    # chain KL is closed-form here; the rng only matters for user-supplied
    # latent-dependent prior builders.
    return loss_markov(
        out.frame_log_probs,
        targets,
        out.q_seq,
        out.prior_seq,
        rng if rng is not None else Rng(0),
        kl_weight,
        n_samples,
        blank,
    )


def frame_log_probs_given_z(cfg: ModelConfig, params: ParamStore, X: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Plain-numpy head evaluation for an externally supplied latent sequence.

    Used by sampling-based likelihood checks, which need the conditional
    ``p(labels | X, z)`` many times without building graphs.
    """
    if not cfg.variant.has_latent:
        raise ValueError("the linear baseline has no latent pathway")
    X = _check_input(cfg, X)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (X.shape[0], cfg.d_z):
        raise ValueError(f"expected z of shape {(X.shape[0], cfg.d_z)}, got {z.shape}")
    w_z, b_z = params["z_proj/weight"].data, params["z_proj/bias"].data
    w_h, b_h = params["head/weight"].data, params["head/bias"].data
    h = z @ w_z.T + b_z
    logits = np.concatenate([h, X], axis=1) @ w_h.T + b_h
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
