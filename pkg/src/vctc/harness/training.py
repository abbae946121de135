"""Training loop: Adam ascent on the per-variant objective with deterministic replay.

Every source of randomness is keyed by ``(seed, purpose, step, ...)`` through
the counter-based generator, so a run is a pure function of its config and
data — interrupting at any checkpoint and resuming reproduces the unbroken
run bit for bit (the metrics wall-clock column is the one observational
exception; inject a fake ``clock`` to pin it).

Metrics are appended to a CSV (one row per evaluation step); checkpoints are
single-file containers holding parameters, Adam state, and the training
cursor.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from ..autodiff import ParamStore, backward, load_checkpoint, save_checkpoint
from ..models import ModelConfig, Variant, forward, init_params, sequence_loss
from ..numerics import Rng
from ..decoding import best_path_decode, edit_distance
from ..losses import kl_warmup_factor
from .data import ConfigError, Dataset, save_dataset


class TrainingDivergedError(RuntimeError):
    """The batch loss became NaN or infinite; a diagnostic dump was written."""


METRICS_HEADER = "step,loss_total,loss_prediction,loss_regularization,dev_ter,test_ter,wall_clock"


@dataclass
class MetricsRecord:
    step: int
    loss_total: float
    loss_prediction: float
    loss_regularization: float
    dev_ter: float
    test_ter: float
    wall_clock: float

    def to_csv_row(self) -> str:
        return (
            f"{self.step},{self.loss_total:.17g},{self.loss_prediction:.17g},"
            f"{self.loss_regularization:.17g},{self.dev_ter:.17g},{self.test_ter:.17g},"
            f"{self.wall_clock:.6f}"
        )


@dataclass(frozen=True)
class TrainConfig:
    variant: Variant
    steps: int
    seed: int = 0
    loss: str | None = None  # defaults to the variant's own objective
    batch_size: int = 16
    lr_start: float = 1e-3
    lr_end: float = 5e-6
    schedule: str = "geometric"  # or "linear"
    kl_weight: float = 1.0
    kl_warmup_steps: int = 0
    mc_samples: int = 1
    d_z: int = 32
    d_hidden: int = 64
    eval_every: int = 50
    checkpoint_path: str = "model.ckpt"
    metrics_path: str = "metrics.csv"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ConfigError("learning rates must be positive")
        if self.schedule not in ("geometric", "linear"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.loss is not None and self.loss != self.variant.loss_kind:
            raise ConfigError(
                f"loss {self.loss!r} does not match variant {self.variant.value!r} "
                f"(expects {self.variant.loss_kind!r})"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


@dataclass
class TrainData:
    train: Dataset
    dev: Dataset
    test: Dataset

    def __post_init__(self):
        vocabs = {ds.vocab.symbols for ds in (self.train, self.dev, self.test)}
        d_ins = {ds.d_in for ds in (self.train, self.dev, self.test)}
        if len(vocabs) != 1 or len(d_ins) != 1:
            raise ConfigError("train/dev/test splits disagree on vocabulary or feature dimension")
        if len(self.train) == 0:
            raise ConfigError("empty training split")


@dataclass
class TrainResult:
    model_cfg: ModelConfig
    params: ParamStore
    metrics: list[MetricsRecord]
    checkpoint_path: Path
    metrics_path: Path


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    """Decay from ``lr_start`` to ``lr_end``; the endpoints are hit exactly."""
    if step <= 0 or cfg.steps == 1:
        return cfg.lr_start
    if step >= cfg.steps - 1:
        return cfg.lr_end
    frac = step / (cfg.steps - 1)
    if cfg.schedule == "linear":
        return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: ParamStore) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def adam_step(
    params: ParamStore,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Textbook bias-corrected update; gradients must already be populated."""
    state.t += 1
    b1t = 1.0 - beta1**state.t
    b2t = 1.0 - beta2**state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / b1t) / (np.sqrt(v / b2t) + eps)


def mean_pass_error_rate(model_cfg: ModelConfig, params: ParamStore, dataset: Dataset) -> float:
    """Corpus token error rate under best-path decoding of the posterior-mean pass."""
    errors = 0
    ref_tokens = 0
    for X, y in dataset.items:
        out = forward(model_cfg, params, X, mean_pass=True)
        hyp = best_path_decode(out.frame_log_probs.data, blank=model_cfg.vocab.blank_index).tokens
        errors += edit_distance(hyp, y).total
        ref_tokens += len(y)
    return errors / max(ref_tokens, 1)


def _dump_diverged_batch(cfg: TrainConfig, step: int, batch, loss_value: float) -> Path:
    dump_path = Path(cfg.metrics_path).with_suffix(".diverged.bin")
    ds = Dataset(vocab=batch["vocab"], d_in=batch["d_in"], items=batch["items"])
    save_dataset(dump_path, ds, meta={"step": step, "loss": repr(loss_value), "indices": batch["indices"]})
    return dump_path


def _model_config(cfg: TrainConfig, data: TrainData) -> ModelConfig:
    return ModelConfig(
        d_in=data.train.d_in,
        vocab=data.train.vocab,
        variant=cfg.variant,
        d_z=cfg.d_z,
        d_hidden=cfg.d_hidden,
    )


def save_train_checkpoint(
    path, model_cfg: ModelConfig, cfg: TrainConfig, params: ParamStore, adam: AdamState, next_step: int
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, p in params.items():
        arrays[f"param/{name}"] = p.data
    for name in params.names():
        arrays[f"adam_m/{name}"] = adam.m[name]
        arrays[f"adam_v/{name}"] = adam.v[name]
    header = {
        "kind": "train_state",
        "model_config": model_cfg.to_dict(),
        "train_config": cfg.to_dict(),
        "next_step": next_step,
        "adam_t": adam.t,
    }
    save_checkpoint(path, arrays, header)


def load_train_checkpoint(path) -> tuple[ModelConfig, dict, ParamStore, AdamState, int]:
    arrays, header = load_checkpoint(path)
    if header.get("kind") != "train_state":
        raise ValueError(f"not a training checkpoint: kind={header.get('kind')!r}")
    model_cfg = ModelConfig.from_dict(header["model_config"])
    params = init_params(model_cfg, Rng(0))  # values are overwritten below
    params.load_arrays({name[len("param/") :]: arr for name, arr in arrays.items() if name.startswith("param/")})
    adam = AdamState(
        m={name[len("adam_m/") :]: arr.copy() for name, arr in arrays.items() if name.startswith("adam_m/")},
        v={name[len("adam_v/") :]: arr.copy() for name, arr in arrays.items() if name.startswith("adam_v/")},
        t=int(header["adam_t"]),
    )
    return model_cfg, header["train_config"], params, adam, int(header["next_step"])


def train(
    cfg: TrainConfig,
    data: TrainData,
    resume_from=None,
    run_steps: int | None = None,
    clock=time.perf_counter,
    on_record=None,
) -> TrainResult:
    """Run (or continue) one training job.

    ``run_steps`` bounds how many optimization steps this invocation
    performs — used to exercise interrupt/resume; the schedule and batch
    draws depend only on the global step, never on segment boundaries.
    The objective is maximized by descending on its negation.
    """
    model_cfg = _model_config(cfg, data)
    base_rng = Rng(cfg.seed)
    if resume_from is not None:
        ckpt_model_cfg, ckpt_train_cfg, params, adam, start_step = load_train_checkpoint(resume_from)
        if ckpt_model_cfg.to_dict() != model_cfg.to_dict():
            raise ConfigError("checkpoint model configuration does not match this run")
        if ckpt_train_cfg != cfg.to_dict():
            raise ConfigError("checkpoint training configuration does not match this run")
        metrics_mode = "a"
    else:
        params = init_params(model_cfg, base_rng.derive("init"))
        adam = AdamState.fresh(params)
        start_step = 0
        metrics_mode = "w"

    metrics_path = Path(cfg.metrics_path)
    checkpoint_path = Path(cfg.checkpoint_path)
    metrics_path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint_path.parent.mkdir(parents=True, exist_ok=True)

    n_train = len(data.train)
    end_step = cfg.steps if run_steps is None else min(cfg.steps, start_step + run_steps)
    records: list[MetricsRecord] = []
    t0 = clock()

    with open(metrics_path, metrics_mode) as metrics_file:
        if metrics_mode == "w":
            metrics_file.write(METRICS_HEADER + "\n")
        for step in range(start_step, end_step):
            lr = learning_rate_at(cfg, step)
            kl_w = cfg.kl_weight * kl_warmup_factor(step, cfg.kl_warmup_steps)
            order = base_rng.derive("batch", step).permutation(n_train)
            indices = [int(i) for i in order[: min(cfg.batch_size, n_train)]]

            params.zero_grad()
            batch_total = None
            sum_pred = 0.0
            sum_reg = 0.0
            for slot, idx in enumerate(indices):
                X, y = data.train.items[idx]
                item_rng = base_rng.derive("model", step, slot)
                lb = sequence_loss(
                    model_cfg, params, X, y, item_rng, kl_weight=kl_w, n_samples=cfg.mc_samples
                )
                batch_total = lb.total if batch_total is None else batch_total + lb.total
                sum_pred += lb.prediction.item()
                sum_reg += lb.regularization.item()
            batch_mean = batch_total / float(len(indices))
            loss_value = batch_mean.item()
            if not np.isfinite(loss_value):
                dump = _dump_diverged_batch(
                    cfg,
                    step,
                    {
                        "vocab": data.train.vocab,
                        "d_in": data.train.d_in,
                        "items": [data.train.items[i] for i in indices],
                        "indices": indices,
                    },
                    loss_value,
                )
                raise TrainingDivergedError(
                    f"non-finite loss {loss_value!r} at step {step}; offending batch dumped to {dump}"
                )
            backward(-batch_mean)  # ascend the objective
            adam_step(params, adam, lr)

            if step % cfg.eval_every == 0 or step == cfg.steps - 1:
                record = MetricsRecord(
                    step=step,
                    loss_total=loss_value,
                    loss_prediction=sum_pred / len(indices),
                    loss_regularization=sum_reg / len(indices),
                    dev_ter=mean_pass_error_rate(model_cfg, params, data.dev),
                    test_ter=mean_pass_error_rate(model_cfg, params, data.test),
                    wall_clock=clock() - t0,
                )
                records.append(record)
                metrics_file.write(record.to_csv_row() + "\n")
                metrics_file.flush()
                if on_record is not None:
                    on_record(record)
            save_train_checkpoint(checkpoint_path, model_cfg, cfg, params, adam, next_step=step + 1)

    return TrainResult(
        model_cfg=model_cfg,
        params=params,
        metrics=records,
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
    )
