"""Command-line entry point.

Subcommands: ``generate`` (synthetic datasets, optional LM), ``train``,
``evaluate``, ``decode``, ``oracle-check`` (self-verification of the core
numerics), and ``report`` (gap summary CSV plus rendered figures).

Any subcommand accepts ``--config FILE`` with simple ``key = value`` lines
(``#`` comments allowed); explicit flags override file values.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..ctc import Vocab
from ..decoding import BeamConfig, NGramLm
from ..models import ModelConfig, Variant
from .data import ConfigError, SyntheticTaskSpec, generate_dataset, load_dataset, save_dataset
from .evaluation import evaluate_model, report_csv_lines
from .oracles import run_ctc_oracle_suite, run_kl_oracle_suite
from .reporting import convergence_report, load_metrics, render_convergence_figures
from .training import TrainConfig, TrainData, load_train_checkpoint, train


def parse_config_file(path) -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments are skipped."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    """Fill defaults from --config; values given on the command line win."""
    if not getattr(args, "config", None):
        return args
    file_values = parse_config_file(args.config)
    defaults = {
        action.dest: action.default for action in parser._actions if action.dest != argparse.SUPPRESS
    }
    for key, raw in file_values.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        if getattr(args, key) != defaults[key]:
            continue  # explicit flag takes precedence
        default = defaults[key]
        if isinstance(default, bool):
            value = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int) and not isinstance(default, bool):
            value = int(raw)
        elif isinstance(default, float):
            value = float(raw)
        else:
            value = raw
        setattr(args, key, value)
    return args


def _add_config_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key = value file; flags override its entries")


def cmd_generate(args) -> int:
    spec = SyntheticTaskSpec(
        vocab_size=args.vocab_size,
        d_in=args.d_in,
        min_duration=args.min_duration,
        max_duration=args.max_duration,
        min_target_len=args.min_target_len,
        max_target_len=args.max_target_len,
        noise_std=args.noise_std,
        silence_min=args.silence_min,
        silence_max=args.silence_max,
        max_frames=args.max_frames,
        seed=args.seed,
        embedding_seed=args.embedding_seed,
    )
    dataset = generate_dataset(spec, args.n)
    save_dataset(args.out, dataset, meta={"task_spec": spec.to_dict()})
    print(f"wrote {len(dataset)} samples to {args.out}")
    if args.lm_out:
        lm = NGramLm.train(dataset.transcripts(), order=args.lm_order)
        lm.save(args.lm_out)
        print(f"wrote order-{args.lm_order} LM to {args.lm_out}")
    return 0


def cmd_train(args) -> int:
    train_ds, _ = load_dataset(args.train_data)
    dev_ds, _ = load_dataset(args.dev_data)
    test_ds, _ = load_dataset(args.test_data)
    cfg = TrainConfig(
        variant=Variant(args.variant),
        steps=args.steps,
        seed=args.seed,
        batch_size=args.batch_size,
        lr_start=args.lr_start,
        lr_end=args.lr_end,
        schedule=args.schedule,
        kl_weight=args.kl_weight,
        kl_warmup_steps=args.kl_warmup_steps,
        mc_samples=args.mc_samples,
        d_z=args.d_z,
        d_hidden=args.d_hidden,
        eval_every=args.eval_every,
        checkpoint_path=args.checkpoint,
        metrics_path=args.metrics,
    )
    data = TrainData(train=train_ds, dev=dev_ds, test=test_ds)

    def echo(record):
        print(
            f"step {record.step:>5}  loss {record.loss_total:+.4f}  "
            f"dev TER {record.dev_ter:.4f}  test TER {record.test_ter:.4f}"
        )

    result = train(cfg, data, resume_from=args.resume, run_steps=args.run_steps, on_record=echo)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    return 0


def _load_model(checkpoint_path):
    model_cfg, _train_cfg, params, _adam, _next_step = load_train_checkpoint(checkpoint_path)
    return model_cfg, params


def _beam_config(args) -> BeamConfig:
    return BeamConfig(
        beam_width=args.beam_width,
        lm_weight=args.lm_weight,
        insertion_bonus=args.insertion_bonus,
    )


def cmd_evaluate(args) -> int:
    model_cfg, params = _load_model(args.checkpoint)
    dataset, _ = load_dataset(args.data)
    lm = NGramLm.load(args.lm) if args.lm else None
    report = evaluate_model(
        model_cfg,
        params,
        dataset,
        method=args.method,
        beam_config=_beam_config(args),
        lm=lm,
        n_buckets=args.buckets,
    )
    for line in report.summary_lines():
        print(line)
    if args.out:
        Path(args.out).write_text("\n".join(report_csv_lines(report)) + "\n")
        print(f"wrote {args.out}")
    return 0


def cmd_decode(args) -> int:
    model_cfg, params = _load_model(args.checkpoint)
    dataset, _ = load_dataset(args.data)
    lm = NGramLm.load(args.lm) if args.lm else None
    report = evaluate_model(
        model_cfg,
        params,
        dataset,
        method=args.method,
        beam_config=_beam_config(args),
        lm=lm,
    )
    lines = ["index,score,hypothesis,reference"]
    for i, (hyp, (_, ref)) in enumerate(zip(report.hypotheses, dataset.items)):
        hyp_text = " ".join(model_cfg.vocab.to_symbols(hyp.tokens))
        ref_text = " ".join(model_cfg.vocab.to_symbols(ref))
        lines.append(f"{i},{hyp.score:.6f},{hyp_text},{ref_text}")
        if not args.quiet:
            print(f"[{i:>4}] {hyp.score:+10.4f}  {hyp_text or '(empty)'}")
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
        print(f"wrote {args.out}")
    return 0


def cmd_oracle_check(args) -> int:
    outcomes = [
        run_ctc_oracle_suite(n_instances=args.n, seed=args.seed),
        run_kl_oracle_suite(n_instances=args.n, seed=args.seed),
    ]
    ok = True
    for outcome in outcomes:
        print(outcome.line())
        ok &= outcome.passed
    return 0 if ok else 1


def cmd_report(args) -> int:
    labels = args.labels.split(",") if args.labels else [None] * len(args.metrics)
    if len(labels) != len(args.metrics):
        raise ConfigError(f"{len(args.metrics)} metrics files but {len(labels)} labels")
    curves = [load_metrics(path, label) for path, label in zip(args.metrics, labels)]
    summary = convergence_report(curves)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_path = out_dir / "gap_summary.csv"
    summary_path.write_text("\n".join(summary.csv_lines()) + "\n")
    figures = render_convergence_figures(curves, out_dir)
    print(f"wrote {summary_path}")
    for p in figures:
        print(f"wrote {p}")
    for line in summary.csv_lines():
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vctc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset (and optionally an LM)")
    _add_config_flag(g)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--vocab-size", type=int, default=3)
    g.add_argument("--d-in", type=int, default=8)
    g.add_argument("--min-duration", type=int, default=2)
    g.add_argument("--max-duration", type=int, default=4)
    g.add_argument("--min-target-len", type=int, default=2)
    g.add_argument("--max-target-len", type=int, default=5)
    g.add_argument("--noise-std", type=float, default=0.2)
    g.add_argument("--silence-min", type=int, default=0)
    g.add_argument("--silence-max", type=int, default=1)
    g.add_argument("--max-frames", type=int, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--embedding-seed", type=int, default=0)
    g.add_argument("--lm-out", default=None)
    g.add_argument("--lm-order", type=int, default=4)
    g.set_defaults(func=cmd_generate, parser=g)

    t = sub.add_parser("train", help="train one model variant")
    _add_config_flag(t)
    t.add_argument("--train-data", required=True)
    t.add_argument("--dev-data", required=True)
    t.add_argument("--test-data", required=True)
    t.add_argument("--variant", choices=[v.value for v in Variant], required=True)
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr-start", type=float, default=1e-3)
    t.add_argument("--lr-end", type=float, default=5e-6)
    t.add_argument("--schedule", choices=["geometric", "linear"], default="geometric")
    t.add_argument("--kl-weight", type=float, default=1.0)
    t.add_argument("--kl-warmup-steps", type=int, default=0)
    t.add_argument("--mc-samples", type=int, default=1)
    t.add_argument("--d-z", type=int, default=32)
    t.add_argument("--d-hidden", type=int, default=64)
    t.add_argument("--eval-every", type=int, default=50)
    t.add_argument("--checkpoint", default="model.ckpt")
    t.add_argument("--metrics", default="metrics.csv")
    t.add_argument("--resume", default=None, help="continue from this checkpoint")
    t.add_argument("--run-steps", type=int, default=None, help="stop after this many steps (resumable)")
    t.set_defaults(func=cmd_train, parser=t)

    e = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    _add_config_flag(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--method", choices=["best_path", "beam"], default="best_path")
    e.add_argument("--beam-width", type=int, default=30)
    e.add_argument("--lm", default=None)
    e.add_argument("--lm-weight", type=float, default=0.5)
    e.add_argument("--insertion-bonus", type=float, default=0.0)
    e.add_argument("--buckets", type=int, default=3)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_evaluate, parser=e)

    d = sub.add_parser("decode", help="print/write hypotheses for a dataset")
    _add_config_flag(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--method", choices=["best_path", "beam"], default="best_path")
    d.add_argument("--beam-width", type=int, default=30)
    d.add_argument("--lm", default=None)
    d.add_argument("--lm-weight", type=float, default=0.5)
    d.add_argument("--insertion-bonus", type=float, default=0.0)
    d.add_argument("--out", default=None)
    d.add_argument("--quiet", action="store_true")
    d.set_defaults(func=cmd_decode, parser=d)

    o = sub.add_parser("oracle-check", help="verify core numerics against independent oracles")
    _add_config_flag(o)
    o.add_argument("--n", type=int, default=200)
    o.add_argument("--seed", type=int, default=0)
    o.set_defaults(func=cmd_oracle_check, parser=o)

    r = sub.add_parser("report", help="gap summary and figures from metrics files")
    _add_config_flag(r)
    r.add_argument("metrics", nargs="+")
    r.add_argument("--labels", default=None, help="comma-separated run labels")
    r.add_argument("--out-dir", default="reports")
    r.set_defaults(func=cmd_report, parser=r)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = apply_config_file(args, args.parser)
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
