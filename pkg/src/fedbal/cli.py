"""Command-line runner: single runs, seed sweeps, comparison tables and
deadline-efficiency profiles.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fedbal import server
from fedbal.core import ConfigError, ExperimentConfig, config_to_dict, load_config
from fedbal.data import load_traces
from fedbal.sim import ExperimentResult, RoundRecord, run_experiment, time_to_accuracy

log = logging.getLogger("fedbal")

ROUNDS_COLUMNS = (
    "round",
    "wallclock_s",
    "deadline_s",
    "loss_threshold",
    "ltr",
    "ddlr",
    "n_completed",
    "n_timed_out",
    "U_R",
    "test_accuracy",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- run


def _fmt(x: float) -> str:
    # repr round-trips exactly, which keeps byte-level diffs meaningful
    return repr(float(x))


def rounds_csv(records: Sequence[RoundRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ROUNDS_COLUMNS)
    for r in records:
        writer.writerow(
            [
                r.round_index,
                _fmt(r.wallclock),
                _fmt(r.deadline),
                _fmt(r.loss_threshold),
                _fmt(r.ltr),
                _fmt(r.ddlr),
                len(r.completed),
                len(r.timed_out),
                _fmt(r.utility),
                _fmt(r.test_accuracy),
            ]
        )
    return buf.getvalue()


def read_rounds_csv(path: str | Path) -> list[dict[str, float]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: float(v) for k, v in row.items()} for row in rows]


def summarize(result: ExperimentResult) -> dict:
    cfg = result.config
    records = result.records
    tta = {}
    for target in cfg.targets:
        tta[repr(float(target))] = time_to_accuracy(records, target)
    return {
        "label": cfg.label,
        "method": cfg.method,
        "deadline_policy": cfg.deadline_policy,
        "seed": cfg.seed,
        "rounds_executed": len(records),
        "wallclock_s": records[-1].wallclock if records else 0.0,
        "final_accuracy": records[-1].test_accuracy if records else None,
        "time_to_accuracy": tta,
        "config": config_to_dict(cfg),
    }


def write_run(result: ExperimentResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "rounds.csv").write_text(rounds_csv(result.records), encoding="utf-8")
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summarize(result), fh, indent=2, sort_keys=True)
        fh.write("\n")
    w = result.final_weights
    payload = {
        "layout": {
            "input_dim": w.layout.input_dim,
            "hidden_dim": w.layout.hidden_dim,
            "num_classes": w.layout.num_classes,
        },
        "values": w.values.tolist(),
    }
    with open(out_dir / "final_weights.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def cmd_run(config_path: str, out_dir: str, seed_override: int | None = None, seeds: Sequence[int] = ()) -> int:
    cfg = load_config(config_path)
    if seed_override is not None:
        cfg = cfg.replace(seed=seed_override)
    out = Path(out_dir)
    if not seeds:
        write_run(run_experiment(cfg), out)
        return 0
    for s in seeds:
        write_run(run_experiment(cfg.replace(seed=s)), out / f"seed_{s}")
    return 0


# ---------------------------------------------------------------- compare


@dataclass(frozen=True)
class RunOutput:
    path: Path
    label: str
    method: str
    seed: int
    final_accuracy: float
    wallclock: np.ndarray
    accuracy: np.ndarray

    def time_to(self, target: float) -> float | None:
        hit = np.flatnonzero(self.accuracy >= target)
        return float(self.wallclock[hit[0]]) if hit.size else None

    @property
    def total_wallclock(self) -> float:
        return float(self.wallclock[-1]) if self.wallclock.size else 0.0


def load_runs(runs_dir: str | Path) -> list[RunOutput]:
    """Every directory under ``runs_dir`` holding ``summary.json`` and ``rounds.csv``."""
    runs = []
    for summary_path in sorted(Path(runs_dir).rglob("summary.json")):
        d = summary_path.parent
        if not (d / "rounds.csv").exists():
            continue
        summary = json.loads(summary_path.read_text(encoding="utf-8"))
        rows = read_rounds_csv(d / "rounds.csv")
        runs.append(
            RunOutput(
                d,
                summary["label"],
                summary["method"],
                int(summary["seed"]),
                float(summary["final_accuracy"]) if summary["final_accuracy"] is not None else math.nan,
                np.array([r["wallclock_s"] for r in rows]),
                np.array([r["test_accuracy"] for r in rows]),
            )
        )
    return runs


def pick_baseline(groups: dict[str, list[RunOutput]]) -> str:
    """FedAvg group with the best mean final accuracy, else the best group overall."""
    fedavg = [k for k, g in groups.items() if g[0].method == "fedavg"]
    pool = fedavg or list(groups)
    return max(sorted(pool), key=lambda k: np.mean([r.final_accuracy for r in groups[k]]))


def speedup(base: RunOutput, run: RunOutput, target: float) -> float:
    """Baseline time-to-target over the run's; a run that never gets there
    scores the baseline time over its whole elapsed wall clock."""
    t_base = base.time_to(target)
    if t_base is None:
        return math.nan
    t_run = run.time_to(target)
    if t_run is None:
        return t_base / run.total_wallclock if run.total_wallclock > 0 else 0.0
    return t_base / t_run


def _mean_std(xs: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(xs, dtype=np.float64)
    if a.size == 0:
        return math.nan, math.nan
    return float(np.mean(a)), float(np.std(a, ddof=1)) if a.size > 1 else 0.0


def compare_table(runs: Sequence[RunOutput], target: float | None = None, baseline: str | None = None) -> list[dict]:
    """Per-label speedup and final accuracy, mean and sample std across seeds.

    Runs pair with the baseline run of the same seed. Without an explicit
    ``target`` each pair uses that seed's baseline final accuracy.
    """
    groups: dict[str, list[RunOutput]] = {}
    for r in runs:
        groups.setdefault(r.label, []).append(r)
    if len(runs) < 2:
        raise UsageError("compare needs at least two run outputs")
    base_label = baseline or pick_baseline(groups)
    if base_label not in groups:
        raise UsageError(f"baseline {base_label!r} not among runs")
    base_by_seed = {r.seed: r for r in groups[base_label]}
    rows = []
    for label in sorted(groups, key=lambda k: (k != base_label, k)):
        speedups, finals = [], []
        for r in sorted(groups[label], key=lambda r: r.seed):
            finals.append(r.final_accuracy)
            base = base_by_seed.get(r.seed)
            if base is None:
                continue
            speedups.append(speedup(base, r, base.final_accuracy if target is None else target))
        s_mean, s_std = _mean_std(speedups)
        a_mean, a_std = _mean_std(finals)
        rows.append(
            {
                "label": label,
                "baseline": label == base_label,
                "seeds": len(groups[label]),
                "speedup_mean": s_mean,
                "speedup_std": s_std,
                "final_acc_mean": a_mean,
                "final_acc_std": a_std,
            }
        )
    return rows


COMPARE_COLUMNS = ("label", "baseline", "seeds", "speedup_mean", "speedup_std", "final_acc_mean", "final_acc_std")


def format_compare(rows: Sequence[dict]) -> tuple[str, str]:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COMPARE_COLUMNS)
    for row in rows:
        writer.writerow(
            [
                row["label"],
                int(row["baseline"]),
                row["seeds"],
                f"{row['speedup_mean']:.4f}",
                f"{row['speedup_std']:.4f}",
                f"{row['final_acc_mean']:.4f}",
                f"{row['final_acc_std']:.4f}",
            ]
        )
    table = [("method", "seeds", "speedup", "final accuracy")]
    for row in rows:
        name = row["label"] + (" (baseline)" if row["baseline"] else "")
        table.append(
            (
                name,
                str(row["seeds"]),
                f"{row['speedup_mean']:.2f} ± {row['speedup_std']:.2f}",
                f"{row['final_acc_mean']:.4f} ± {row['final_acc_std']:.4f}",
            )
        )
    widths = [max(len(r[i]) for r in table) for i in range(4)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table]
    return buf.getvalue(), "\n".join(lines) + "\n"


def cmd_compare(runs_dir: str, target: float | None = None, baseline: str | None = None, out: str | None = None) -> int:
    rows = compare_table(load_runs(runs_dir), target, baseline)
    csv_text, text = format_compare(rows)
    if out:
        Path(out).write_text(csv_text, encoding="utf-8")
    else:
        sys.stdout.write(csv_text + "\n")
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- ddl-profile


def trace_completion_times(trace_path: str, epochs: int, batch_size: int, ot_len: Sequence[int] | None = None) -> np.ndarray:
    """Expected completion time per trace client: mean download + mean upload
    + estimated training time. ``ot_len`` defaults to one batch per client."""
    records = sorted(load_traces(trace_path).records, key=lambda r: r.id)
    if ot_len is None:
        ot_len = [batch_size] * len(records)
    elif len(ot_len) == 1:
        ot_len = list(ot_len) * len(records)
    if len(ot_len) != len(records):
        raise UsageError(f"--ot-len has {len(ot_len)} entries for {len(records)} clients")
    return np.array(
        [
            float(np.mean(r.download_s))
            + float(np.mean(r.upload_s))
            + server.train_time_estimate(float(np.mean(r.batch_latency_s)), n, batch_size, epochs)
            for r, n in zip(records, ot_len)
        ]
    )


def ddl_profile_csv(completion_times: Sequence[float]) -> str:
    ts, ratios = server.ddl_e_curve(completion_times)
    peak = server.peak_deadline(completion_times)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("t", "ddl_e", "is_peak"))
    for t, e in zip(ts.tolist(), ratios.tolist()):
        writer.writerow((t, f"{e:.6f}", int(t == peak)))
    return buf.getvalue()


def cmd_ddl_profile(trace_path: str, epochs: int, batch_size: int, ot_len: Sequence[int] | None = None, out: str | None = None) -> int:
    text = ddl_profile_csv(trace_completion_times(trace_path, epochs, batch_size, ot_len))
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- entry point


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from exc
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedbal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log each round")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one experiment (or a seed sweep)")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--seeds", type=_int_list, default=(), help="comma-separated seeds; one subdirectory each")

    cmp_ = sub.add_parser("compare", help="speedup and accuracy table over finished runs")
    cmp_.add_argument("--runs", required=True, help="directory searched recursively for run outputs")
    cmp_.add_argument("--target", type=float, help="target accuracy (default: baseline final accuracy)")
    cmp_.add_argument("--baseline", help="label of the baseline group")
    cmp_.add_argument("--out", help="write the CSV here instead of stdout")

    prof = sub.add_parser("ddl-profile", help="deadline-efficiency curve for a trace")
    prof.add_argument("--trace", required=True)
    prof.add_argument("--epochs", type=_positive_int, required=True)
    prof.add_argument("--batch", type=_positive_int, required=True)
    prof.add_argument("--ot-len", type=_int_list, help="samples to train per client (one value or one per client)")
    prof.add_argument("--out", help="write the CSV here instead of stdout")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed, args.seeds)
        if args.command == "compare":
            return cmd_compare(args.runs, args.target, args.baseline, args.out)
        return cmd_ddl_profile(args.trace, args.epochs, args.batch, args.ot_len, args.out)
    except UsageError as exc:
        print(f"fedbal: error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, OSError, ValueError, ArithmeticError) as exc:
        print(f"fedbal: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
