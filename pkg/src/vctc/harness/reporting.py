"""Generalization-gap reports from training metrics files.

Reads one or more metrics CSVs, extracts the dev/test error trajectories,
and summarizes the dev-to-test gap per run plus the relative gap reduction
of every run against the first (reference) run.  The CLI's report path
writes the summary as delimited text and renders the trajectories as PNG
figures next to it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # file rendering only; no display expected
import matplotlib.pyplot as plt

from .training import METRICS_HEADER


@dataclass
class RunCurve:
    label: str
    steps: list[int] = field(default_factory=list)
    dev_ter: list[float] = field(default_factory=list)
    test_ter: list[float] = field(default_factory=list)

    @property
    def gaps(self) -> list[float]:
        return [t - d for d, t in zip(self.dev_ter, self.test_ter)]

    @property
    def final_gap(self) -> float:
        return self.gaps[-1]


def load_metrics(path, label: str | None = None) -> RunCurve:
    """Parse one metrics CSV into a trajectory; malformed files raise ValueError."""
    path = Path(path)
    curve = RunCurve(label=label or path.stem)
    expected = METRICS_HEADER.split(",")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != expected:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        for row in reader:
            try:
                curve.steps.append(int(row["step"]))
                curve.dev_ter.append(float(row["dev_ter"]))
                curve.test_ter.append(float(row["test_ter"]))
            except (TypeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}: malformed metrics row {row!r}") from exc
    if not curve.steps:
        raise ValueError(f"{path}: no metrics rows")
    if any(b <= a for a, b in zip(curve.steps, curve.steps[1:])):
        raise ValueError(f"{path}: steps are not strictly increasing")
    return curve


@dataclass
class GapSummary:
    runs: list[dict]
    reference: str

    def csv_lines(self) -> list[str]:
        lines = ["label,final_dev_ter,final_test_ter,final_gap,gap_reduction_vs_reference_pct"]
        for r in self.runs:
            reduction = "" if r["gap_reduction_pct"] is None else f"{r['gap_reduction_pct']:.4f}"
            lines.append(
                f"{r['label']},{r['final_dev_ter']:.6f},{r['final_test_ter']:.6f},"
                f"{r['final_gap']:.6f},{reduction}"
            )
        return lines


def convergence_report(curves: list[RunCurve]) -> GapSummary:
    """Final gaps per run and reductions relative to the first run.

    Reduction is ``(gap_ref - gap) / gap_ref`` in percent; undefined (None)
    for the reference itself or when the reference gap is zero.
    """
    if not curves:
        raise ValueError("no runs to report on")
    ref = curves[0]
    ref_gap = ref.final_gap
    runs = []
    for i, c in enumerate(curves):
        if i == 0 or ref_gap == 0:
            reduction = None
        else:
            reduction = 100.0 * (ref_gap - c.final_gap) / ref_gap
        runs.append(
            {
                "label": c.label,
                "final_dev_ter": c.dev_ter[-1],
                "final_test_ter": c.test_ter[-1],
                "final_gap": c.final_gap,
                "gap_reduction_pct": reduction,
            }
        )
    return GapSummary(runs=runs, reference=ref.label)


def render_convergence_figures(curves: list[RunCurve], out_dir, prefix: str = "report") -> list[Path]:
    """Write two PNGs: dev/test error trajectories and the gap trajectories."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for c in curves:
        (line,) = ax.plot(c.steps, c.dev_ter, label=f"{c.label} dev")
        ax.plot(c.steps, c.test_ter, linestyle="--", color=line.get_color(), label=f"{c.label} test")
    ax.set_xlabel("step")
    ax.set_ylabel("token error rate")
    ax.set_title("dev (solid) vs test (dashed) error")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p = out_dir / f"{prefix}_error_curves.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for c in curves:
        ax.plot(c.steps, c.gaps, label=c.label)
    ax.axhline(0.0, color="gray", linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("test - dev error rate")
    ax.set_title("generalization gap trajectories")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p = out_dir / f"{prefix}_gap_trajectories.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)
    return paths
