"""Command-line entry point: ``tracetime <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 internal error.
Every command writes machine-readable JSON (to ``--out`` or stdout); the
human summary printed alongside is rendered from that same JSON.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from tracetime.delta_engine import DeltaSeries, Strategy, compute_deltas, quantile_shift_report, write_deltas_csv
from tracetime.detector import (
    DEFAULT_N_TRAIN,
    DEFAULT_Q,
    DEFAULT_REPEATS,
    DEFAULT_THETA,
    DEFAULT_WINDOW,
    DetectorModel,
    detect,
    eval_offline,
    eval_online,
    train,
)
from tracetime.errors import TracetimeError
from tracetime.synthgen import default_plans, generate_dataset, load_config
from tracetime.trace_model import Label, filter_batches, ingest_batch, load_manifest

logger = logging.getLogger("tracetime")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default=Strategy.FUNCTION.value)
    p.add_argument("--q", type=int, default=DEFAULT_Q, help="number of quantiles (default: %(default)s)")
    p.add_argument("--theta", type=float, default=DEFAULT_THETA, help="p-value threshold (default: %(default)s)")
    p.add_argument("--policy", choices=["skip", "alert"], default="skip", help="missing-pair policy")


def _emit(doc, out: str | None, summary: str) -> None:
    text = json.dumps(doc, indent=1) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)
    print(summary, file=sys.stdout if out else sys.stderr)


def _fmt(x) -> str:
    return "undefined" if x is None else f"{x:.4f}"


def _metrics_table(m: dict) -> str:
    return "\n".join(
        [
            f"  TP {m['tp']:>7}  FP {m['fp']:>7}  FN {m['fn']:>7}  TN {m['tn']:>7}",
            f"  TPR {_fmt(m['tpr'])}  TNR {_fmt(m['tnr'])}  Prec {_fmt(m['precision'])}  "
            f"Acc {_fmt(m['accuracy'])}  F1 {_fmt(m['f1'])}",
        ]
    )


def _scenario_batches(args) -> list:
    batches = load_manifest(args.manifest)
    if getattr(args, "scenario", None):
        batches = filter_batches(batches, scenario=args.scenario)
        if not batches:
            raise TracetimeError(f"no batches for scenario {args.scenario!r}")
    return batches


def cmd_deltas(args) -> int:
    batch = ingest_batch(args.input)
    if batch.usable:
        series = compute_deltas(batch, args.strategy)
    else:
        logger.warning("batch %s is unusable; writing empty output", batch.batch_id)
        series = DeltaSeries(Strategy(args.strategy), {}, batch.batch_id)
    summary = f"{batch.batch_id}: {len(series.deltas)} pairs, {series.total()} deltas"
    if args.format == "csv":
        write_deltas_csv(series, args.out or sys.stdout)
        print(summary, file=sys.stderr)
        return EXIT_OK
    doc = {"batch_id": batch.batch_id, "strategy": args.strategy, "deltas": {str(p): v.tolist() for p, v in series.deltas.items()}}
    _emit(doc, args.out, summary)
    return EXIT_OK


def cmd_train(args) -> int:
    normal = filter_batches(_scenario_batches(args), label=Label.NORMAL)
    if len(normal) > args.n_train:
        rng = np.random.default_rng(args.seed)
        idx = sorted(rng.choice(len(normal), size=args.n_train, replace=False).tolist())
        normal = [normal[i] for i in idx]
    model = train(normal, args.strategy, args.q, args.theta, args.policy)
    out = args.out or "model.json"
    model.save(out)
    print(f"trained {len(model.pair_models)} pair models on {len(normal)} batches -> {out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    model = DetectorModel.load(args.model)
    batches = [ingest_batch(p) for p in args.input] if args.input else _scenario_batches(args)
    reports = [detect(model, b).to_json() for b in batches]
    lines = [f"  {r['batch_id']}: {r['verdict']} (min p = {r['min_pvalue']})" for r in reports]
    n_anom = sum(r["verdict"] == "anomalous" for r in reports)
    _emit({"reports": reports}, args.out, f"{n_anom}/{len(reports)} batches anomalous\n" + "\n".join(lines))
    return EXIT_OK


def cmd_eval_offline(args) -> int:
    batches = _scenario_batches(args)
    result = eval_offline(
        batches, args.strategy, args.q, args.theta, args.n_train, args.repeats, args.seed, args.policy
    )
    doc = {"scenario": args.scenario, "strategy": args.strategy, "q": args.q, "n_train": args.n_train, "seed": args.seed}
    doc.update(result.to_json())
    summary = f"offline {args.scenario or 'all'} / {args.strategy}: median F1 {_fmt(doc['median_f1'])}\n"
    _emit(doc, args.out, summary + _metrics_table(doc["aggregate"]))
    return EXIT_OK


def cmd_eval_online(args) -> int:
    batches = _scenario_batches(args)
    result = eval_online(batches, args.strategy, args.q, args.theta, args.window, args.policy)
    if args.trace:
        result.write_trace_csv(args.trace)
    doc = {"strategy": args.strategy, "q": args.q, "theta": args.theta}
    doc.update(result.to_json())
    _emit(doc, args.out, f"online w={args.window} / {args.strategy}\n" + _metrics_table(doc["metrics"]))
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.config:
        plans, cfg_seed = load_config(args.config)
    else:
        plans, cfg_seed = default_plans(), None
    seed = args.seed if args.seed is not None else (cfg_seed or 0)
    manifest = generate_dataset(plans, args.out, seed=seed)
    counts = {}
    for e in manifest.entries:
        key = (e.scenario, Label(e.label).value)
        counts[key] = counts.get(key, 0) + 1
    lines = [f"  {s:<16} {lab:<8} {n:>5}" for (s, lab), n in counts.items()]
    print(f"wrote {len(manifest.entries)} batches to {args.out}\n" + "\n".join(lines))
    return EXIT_OK


def cmd_shift_report(args) -> int:
    batches = [b for b in _scenario_batches(args) if b.usable]
    normal = [compute_deltas(b, args.strategy) for b in batches if b.label is Label.NORMAL]
    rootkit = [compute_deltas(b, args.strategy) for b in batches if b.label is Label.ROOTKIT]
    report = quantile_shift_report(normal, rootkit, args.q)
    doc = {
        "scenario": args.scenario,
        "strategy": args.strategy,
        "q": args.q,
        "pairs": {
            str(p): {"median_shift": np.median(arr, axis=0).tolist(), "shifts": arr.tolist()}
            for p, arr in report.items()
        },
    }
    lines = [f"  {p:<60} median shift {min(v['median_shift']):>10.1f} .. {max(v['median_shift']):>10.1f} ns" for p, v in doc["pairs"].items()]
    _emit(doc, args.out, "per-quantile shifts (rootkit - normal mean)\n" + "\n".join(lines))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracetime", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("deltas", help="compute delta times of one batch")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default=Strategy.FUNCTION.value)
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_deltas)

    p = sub.add_parser("train", help="fit a detector on normal batches")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scenario")
    p.add_argument("--n-train", type=int, default=DEFAULT_N_TRAIN)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    _add_model_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="classify batches with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", nargs="+")
    p.add_argument("--manifest")
    p.add_argument("--scenario")
    p.add_argument("--out")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval-offline", help="repeated random-split evaluation of one scenario")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scenario")
    p.add_argument("--n-train", type=int, default=DEFAULT_N_TRAIN)
    p.add_argument("--repeats", type=int, default=DEFAULT_REPEATS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    _add_model_args(p)
    p.set_defaults(func=cmd_eval_offline)

    p = sub.add_parser("eval-online", help="sliding-window evaluation over chronological batches")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scenario")
    p.add_argument("--window", "--w", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; the protocol is deterministic")
    p.add_argument("--trace", help="CSV file for the per-step p-value trace")
    p.add_argument("--out")
    _add_model_args(p)
    p.set_defaults(func=cmd_eval_online)

    p = sub.add_parser("synth", help="generate a synthetic dataset and manifest")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("shift-report", help="per-quantile delta shifts of rootkit vs normal batches")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scenario")
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default=Strategy.FUNCTION.value)
    p.add_argument("--q", type=int, default=DEFAULT_Q)
    p.add_argument("--out")
    p.set_defaults(func=cmd_shift_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (TracetimeError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception:  # noqa: BLE001
        logger.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
