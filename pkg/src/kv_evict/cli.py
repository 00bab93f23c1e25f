"""``kv-evict`` command line.

Exit codes: 0 success, 1 a theorem check failed, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from .attention import ModelConfig
from .caote import CaoteMode
from .engine import Aggregate, EvictionConfig
from .experiments import (
    ALL_MODES,
    ALL_POLICIES,
    Experiment,
    RunSpec,
    cmd_deviation,
    cmd_needle,
    cmd_sweep,
    cmd_theorems,
    monotonicity_report,
)
from .scoring import Policy

DEVIATION_COLUMNS = ["policy", "caote_mode", "layer", "mean_nmse", "seed"]
SWEEP_COLUMNS = ["policy", "caote_mode", "budget", "block_size", "mean_nmse"]
NEEDLE_COLUMNS = ["policy", "caote_mode", "survival_rate", "mean_attention_mass"]
THEOREM_COLUMNS = ["name", "trials", "max_error", "tolerance", "passed"]


class UsageError(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _enum_list(enum):
    def parse(text: str):
        try:
            return tuple(enum(x.strip()) for x in text.split(",") if x.strip())
        except ValueError:
            choices = ",".join(e.value for e in enum)
            raise argparse.ArgumentTypeError(f"choose from {choices}, got {text!r}")

    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kv-evict", description="KV-cache eviction experiments on a seeded toy transformer"
    )
    parser.add_argument("experiment", choices=[e.value for e in Experiment])
    parser.add_argument("--policy", type=_enum_list(Policy), default=None,
                        help="comma-separated subset of h2o,tova,snapkv,sink")
    parser.add_argument("--caote", type=_enum_list(CaoteMode), default=None,
                        help="comma-separated subset of off,full,fast")
    parser.add_argument("--budget", type=_int_list, default=(64,))
    parser.add_argument("--block", type=_int_list, default=(16,))
    parser.add_argument("--seq-len", type=int, default=256)
    parser.add_argument("--generate", type=int, default=16)
    parser.add_argument("--layers", type=int, default=2)
    parser.add_argument("--heads", type=int, default=4)
    parser.add_argument("--d-model", type=int, default=64)
    parser.add_argument("--vocab", type=int, default=256)
    parser.add_argument("--seeds", type=_int_list, default=tuple(range(20)))
    parser.add_argument("--weights", type=Path, default=None)
    parser.add_argument("--aggregate", choices=[a.value for a in Aggregate],
                        default=Aggregate.PER_HEAD.value)
    parser.add_argument("--protect-recent", type=int, default=0)
    parser.add_argument("--sink-count", type=int, default=4)
    parser.add_argument("--window", type=int, default=8, help="SnapKV observation window")
    parser.add_argument("--pool-kernel", type=int, default=3, help="SnapKV max-pool kernel")
    parser.add_argument("--no-scale", action="store_true", help="disable 1/sqrt(d_head) logit scaling")
    parser.add_argument("--depths", type=_int_list, default=None,
                        help="needle positions (default: 10/30/50/70/90%% of seq-len)")
    parser.add_argument("--out", type=Path, default=None)
    parser.add_argument("--format", choices=["csv", "json"], default="csv")
    parser.add_argument("--trials", type=int, default=1000)
    parser.add_argument("--sabotage", action="store_true",
                        help="inject a sign error into the closed-form score (must FAIL)")
    parser.add_argument("--trace-dir", type=Path, default=None,
                        help="write per-run layer,step,nmse CSVs and decision JSONL here")
    return parser


def spec_from_args(args: argparse.Namespace) -> RunSpec:
    experiment = Experiment(args.experiment)
    if experiment is not Experiment.SWEEP and (len(args.budget) > 1 or len(args.block) > 1):
        raise UsageError("lists of budgets/blocks are only accepted by 'sweep'")
    try:
        cfg = EvictionConfig(
            budget=args.budget[0],
            block_size=args.block[0],
            aggregate=Aggregate(args.aggregate),
            sink_count=args.sink_count,
            window=args.window,
            pool_kernel=args.pool_kernel,
            protect_recent=args.protect_recent,
            scale=not args.no_scale,
        )
        cfg.new_state()
        model = ModelConfig(
            n_layers=args.layers, n_heads=args.heads, d_model=args.d_model, vocab=args.vocab
        )
        return RunSpec(
            experiment=experiment,
            model=model,
            weights=args.weights,
            cfg=cfg,
            policies=args.policy or ALL_POLICIES,
            modes=args.caote or ALL_MODES,
            seq_len=args.seq_len,
            n_generate=args.generate,
            seeds=args.seeds,
            budgets=args.budget,
            block_sizes=args.block,
            depths=args.depths,
            trials=args.trials,
            sabotage=args.sabotage,
            trace_dir=args.trace_dir,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def render(rows: list[dict], columns: list[str], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(rows, indent=2) + "\n"
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    try:
        out.write_text(text)
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc.strerror}") from exc


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        spec = spec_from_args(args)
        if spec.weights is not None and not spec.weights.is_file():
            raise UsageError(f"weights file not found: {spec.weights}")
        if spec.experiment is Experiment.THEOREMS:
            results = cmd_theorems(spec)
            for r in results:
                print(r.line())
            if args.out is not None:
                rows = [
                    {"name": r.name, "trials": r.trials, "max_error": r.max_error,
                     "tolerance": r.tolerance, "passed": r.passed}
                    for r in results
                ]
                _emit(render(rows, THEOREM_COLUMNS, args.format), args.out)
            return 0 if all(r.passed for r in results) else 1
        if spec.experiment is Experiment.DEVIATION:
            rows = cmd_deviation(spec)
            columns = DEVIATION_COLUMNS
        elif spec.experiment is Experiment.SWEEP:
            rows = cmd_sweep(spec)
            columns = SWEEP_COLUMNS
            for line in monotonicity_report(rows):
                logging.info(line)
        else:
            report = cmd_needle(spec)
            if args.format == "json":
                _emit(json.dumps(report, indent=2) + "\n", args.out)
                return 0
            rows = report["summary"]
            columns = NEEDLE_COLUMNS
        _emit(render(rows, columns, args.format), args.out)
        return 0
    except UsageError as exc:
        print(f"kv-evict: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"kv-evict: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
