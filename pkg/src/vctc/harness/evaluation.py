"""Corpus scoring: decode every utterance, tally edit operations, bucket by length."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..decoding import BeamConfig, DecodeResult, NGramLm, beam_search_decode, best_path_decode, edit_distance
from ..models import ModelConfig, ParamStore, forward
from .data import ConfigError, Dataset


@dataclass
class BucketStats:
    """Error tallies for references whose length falls in [lo, hi]."""

    lo: int
    hi: int
    n_utterances: int = 0
    n_ref_tokens: int = 0
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0

    @property
    def error_rate(self) -> float:
        return (self.substitutions + self.insertions + self.deletions) / max(self.n_ref_tokens, 1)


@dataclass
class EvalReport:
    n_utterances: int
    n_ref_tokens: int
    substitutions: int
    insertions: int
    deletions: int
    buckets: list[BucketStats] = field(default_factory=list)
    hypotheses: list[DecodeResult] = field(default_factory=list)

    @property
    def error_rate(self) -> float:
        return (self.substitutions + self.insertions + self.deletions) / max(self.n_ref_tokens, 1)

    def summary_lines(self) -> list[str]:
        lines = [
            f"utterances          {self.n_utterances}",
            f"reference tokens    {self.n_ref_tokens}",
            f"token error rate    {self.error_rate:.4f}"
            f"  (S={self.substitutions} I={self.insertions} D={self.deletions})",
        ]
        for b in self.buckets:
            lines.append(
                f"  len {b.lo:>2}-{b.hi:<2}  utts={b.n_utterances:<4} TER={b.error_rate:.4f}"
            )
        return lines


def _make_buckets(lengths: list[int], n_buckets: int) -> list[BucketStats]:
    lo, hi = min(lengths), max(lengths)
    span = max(hi - lo + 1, 1)
    width = max(1, -(-span // n_buckets))  # ceil
    buckets = []
    start = lo
    while start <= hi:
        buckets.append(BucketStats(lo=start, hi=min(start + width - 1, hi)))
        start += width
    return buckets


def evaluate_posteriors(
    pairs: list[tuple[np.ndarray, list[int]]],
    method: str = "best_path",
    beam_config: BeamConfig | None = None,
    lm: NGramLm | None = None,
    vocab=None,
    blank: int | None = None,
    n_buckets: int = 3,
) -> EvalReport:
    """Score (frame-log-prob table, reference) pairs.

    ``method`` is ``best_path`` or ``beam``; shallow fusion applies only to
    the beam decoder.
    """
    if not pairs:
        raise ValueError("nothing to evaluate")
    if method not in ("best_path", "beam"):
        raise ValueError(f"unknown decoding method {method!r}")
    lengths = [len(ref) for _, ref in pairs]
    buckets = _make_buckets(lengths, n_buckets)
    report = EvalReport(n_utterances=len(pairs), n_ref_tokens=sum(lengths), substitutions=0, insertions=0, deletions=0, buckets=buckets)
    for lp, ref in pairs:
        if method == "beam":
            hyp = beam_search_decode(lp, beam_config or BeamConfig(), lm=lm, vocab=vocab, blank=blank)
        else:
            hyp = best_path_decode(lp, blank=blank)
        counts = edit_distance(hyp.tokens, ref)
        report.hypotheses.append(hyp)
        report.substitutions += counts.substitutions
        report.insertions += counts.insertions
        report.deletions += counts.deletions
        for b in buckets:
            if b.lo <= len(ref) <= b.hi:
                b.n_utterances += 1
                b.n_ref_tokens += len(ref)
                b.substitutions += counts.substitutions
                b.insertions += counts.insertions
                b.deletions += counts.deletions
                break
    return report


def evaluate_model(
    model_cfg: ModelConfig,
    params: ParamStore,
    dataset: Dataset,
    method: str = "best_path",
    beam_config: BeamConfig | None = None,
    lm: NGramLm | None = None,
    n_buckets: int = 3,
) -> EvalReport:
    """Posterior-mean pass over a dataset, then decode and score."""
    if len(dataset) == 0:
        raise ValueError("nothing to evaluate")
    if dataset.vocab.symbols != model_cfg.vocab.symbols:
        raise ConfigError(
            f"dataset vocabulary {dataset.vocab.symbols} does not match the model's {model_cfg.vocab.symbols}"
        )
    if dataset.d_in != model_cfg.d_in:
        raise ConfigError(f"dataset d_in={dataset.d_in} does not match the model's {model_cfg.d_in}")
    pairs = []
    for X, y in dataset.items:
        out = forward(model_cfg, params, X, mean_pass=True)
        pairs.append((out.frame_log_probs.data, y))
    return evaluate_posteriors(
        pairs,
        method=method,
        beam_config=beam_config,
        lm=lm,
        vocab=model_cfg.vocab,
        blank=model_cfg.vocab.blank_index,
        n_buckets=n_buckets,
    )


def report_csv_lines(report: EvalReport) -> list[str]:
    lines = ["bucket_lo,bucket_hi,n_utterances,n_ref_tokens,substitutions,insertions,deletions,error_rate"]
    lines.append(
        f"all,all,{report.n_utterances},{report.n_ref_tokens},"
        f"{report.substitutions},{report.insertions},{report.deletions},{report.error_rate:.6f}"
    )
    for b in report.buckets:
        lines.append(
            f"{b.lo},{b.hi},{b.n_utterances},{b.n_ref_tokens},"
            f"{b.substitutions},{b.insertions},{b.deletions},{b.error_rate:.6f}"
        )
    return lines
