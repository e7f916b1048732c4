"""``aha`` command line: train, eval, sweep, analyze.

Exit codes: 0 success, 2 configuration / usage error, 3 runtime error,
4 training aborted on a non-finite value.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .analysis import (GateTrace, SweepRow, gap_table, mu_f, mu_f_scored, per_head_usage, per_token_usage,
                       read_trace, sorted_usage_curve, token_trace_export, top_share, traces_from_gates,
                       usage_report, window_sweep_report, write_matrix_csv, write_trace)
from .autodiff import Tensor
from .config import ConfigError, ExperimentConfig, load_config
from .model import FORCE_MODES, init_params, load_checkpoint, save_checkpoint
from .tasks import TASKS, MixConfig, TaskSample, mixed_stream, stack, task_samples
from .training import (StepRecord, TrainingAborted, evaluate, pretrain, train, write_step_records)

logger = logging.getLogger("aha")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_NONFINITE = 0, 2, 3, 4
METRICS_VERSION = 1
TRACE_SUFFIX = ".ahat"


class UsageError(Exception):
    """Bad command-line input that is not a config-file problem."""


# -- shared run machinery ----------------------------------------------------

def _copy_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=True, dtype=v.data.dtype) for k, v in params.items()}


class BaseCache:
    """Pretrained bases keyed by everything pretraining depends on (not window, not lambda).

    Held in memory and, when ``directory`` is given, on disk so separate
    invocations can share them.
    """

    def __init__(self, directory=None):
        self.directory = None if directory is None else Path(directory)
        self._mem: dict[str, tuple[dict[str, Tensor], list[StepRecord]]] = {}

    @staticmethod
    def key(exp: ExperimentConfig, seed: int) -> str:
        d = exp.to_dict()
        train = {k: v for k, v in d["train"].items() if k not in ("steps", "freeze_base")}
        payload = {"model": d["model"], "train": train, "mix": d["mix"], "seed": seed,
                   "dtype": np.dtype(ad.get_dtype()).name}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def get(self, exp: ExperimentConfig, seed: int) -> tuple[dict[str, Tensor], list[StepRecord]]:
        key = self.key(exp, seed)
        if key not in self._mem:
            path = None if self.directory is None else self.directory / f"base_{key}.npz"
            if path is not None and path.exists():
                params, _, meta = load_checkpoint(path)
                records = [StepRecord(**r) for r in meta["extra"]["records"]]
            else:
                mcfg, tcfg = exp.model_config(seed), exp.train_config(seed)
                params = init_params(mcfg)
                records = pretrain(params, mcfg, mixed_stream(seed, exp.mix), tcfg)
                if path is not None:
                    path.parent.mkdir(parents=True, exist_ok=True)
                    save_checkpoint(path, params, mcfg, {"records": [r.__dict__ for r in records]})
            self._mem[key] = (params, records)
        params, records = self._mem[key]
        return _copy_params(params), list(records)


@dataclass
class RunResult:
    seed: int
    window: int
    lam: float
    mu_f: float
    mu_f_scored: float | None
    accuracy: float
    loss: float
    per_task: dict = field(default_factory=dict)


def _task_metrics(params, mcfg, samples: list[TaskSample], force_gates: str) -> dict:
    out = {}
    for task in sorted({s.meta.get("task", "") for s in samples}):
        subset = [s for s in samples if s.meta.get("task", "") == task]
        res = evaluate(params, mcfg, subset, force_gates)
        out[task or "unlabelled"] = {"samples": len(subset), "loss": res.loss, "accuracy": res.accuracy,
                                     "num_scored": res.num_scored, "mu_f": res.mu_f}
    return out


def evaluation_record(params, mcfg, samples: list[TaskSample], force_gates: str = "auto", **fields_) -> tuple[dict, list[GateTrace]]:
    """Metrics JSON (fixed, versioned schema) plus the gate traces it was computed from."""
    res = evaluate(params, mcfg, samples, force_gates)
    tokens, mask = stack(samples)
    traces = traces_from_gates(res.gates, [s.meta.get("task", "") for s in samples], tokens, mask,
                               start_id=0)
    for t, s in zip(traces, samples):
        t.sample_id = s.meta.get("sample_id", t.sample_id)
    report = usage_report(traces)
    record = {"version": METRICS_VERSION, **fields_, "force_gates": force_gates, "window": mcfg.window,
              "samples": len(samples), "loss": res.loss, "accuracy": res.accuracy, "num_scored": res.num_scored,
              "mu_f": res.mu_f, "mu_f_scored": report.mu_f_scored,
              "per_task": _task_metrics(params, mcfg, samples, force_gates), "usage": report.to_json()}
    return record, traces


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def run_experiment(exp: ExperimentConfig, seed: int, out_dir, cache: BaseCache | None = None,
                   log_every: int = 0) -> RunResult:
    """Train one seed and write every artifact of a run into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    point = exp.with_point(seeds=(seed,), out=str(out_dir))
    (out_dir / "config.json").write_text(point.to_json())
    mcfg, tcfg = exp.model_config(seed), exp.train_config(seed)
    stream = mixed_stream(seed, exp.mix)
    try:
        if tcfg.pretrain_steps and cache is not None:
            params, pre_records = cache.get(exp, seed)
            for _ in itertools.islice(stream, tcfg.pretrain_steps * tcfg.batch_size):
                pass
            params, records = train(params, mcfg, stream, tcfg, log_every=log_every, pretrained=pre_records)
        else:
            params, records = train(init_params(mcfg), mcfg, stream, tcfg, log_every=log_every)
    except TrainingAborted as exc:
        write_step_records(out_dir / "metrics.csv", exc.records)
        raise
    write_step_records(out_dir / "metrics.csv", records)
    save_checkpoint(out_dir / "checkpoint.npz", params, mcfg, {"experiment": point.to_dict()})

    samples = task_samples("mixed", exp.eval.seed, exp.eval.samples, exp.mix)
    record, traces = evaluation_record(params, mcfg, samples, seed=seed, lam=exp.lam)
    _write_json(out_dir / "usage.json", record)
    trace_dir = out_dir / "traces"
    trace_dir.mkdir(exist_ok=True)
    for i, t in enumerate(traces[:exp.eval.traces]):
        write_trace(trace_dir / f"trace_{i:05d}{TRACE_SUFFIX}", t)
    return RunResult(seed, mcfg.window, exp.lam, record["mu_f"], record["mu_f_scored"], record["accuracy"],
                     record["loss"], record["per_task"])


# -- commands ----------------------------------------------------------------

def cmd_train(args) -> int:
    exp = load_config(args.config)
    out = args.out or exp.out
    if out is None:
        raise UsageError("no output directory: pass --out or set 'out' in the config")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(exp.with_point(out=str(out)).to_json())
    for seed in exp.seeds:
        run_dir = out if len(exp.seeds) == 1 else out / f"seed_{seed}"
        res = run_experiment(exp, seed, run_dir, log_every=args.log_every)
        print(f"seed {seed}: mu_f={res.mu_f:.4f} accuracy={res.accuracy:.4f} loss={res.loss:.4f} -> {run_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        params, mcfg, meta = load_checkpoint(args.ckpt)
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint {args.ckpt}: {exc}") from None
    exp_dict = meta.get("extra", {}).get("experiment")
    mix = MixConfig()
    if exp_dict:
        m = exp_dict["mix"]
        mix = MixConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in m.items()})
    if args.length is not None:
        lo, hi = mix.needle_distance
        try:
            mix = dataclasses.replace(mix, length=args.length, needle_distance=(min(lo, args.length - 5),
                                                                               min(hi, args.length - 5)))
        except ValueError as exc:
            raise UsageError(f"--length {args.length}: {exc}") from None
    if args.window is not None and args.window != mcfg.window:
        logger.warning("window %d differs from the training window %d; results are not comparable "
                       "to the trained configuration", args.window, mcfg.window)
        mcfg = dataclasses.replace(mcfg, window=args.window)
    samples = task_samples(args.task, args.seed, args.samples, mix, args.key_distance)
    record, traces = evaluation_record(params, mcfg, samples, args.force_gates, task=args.task,
                                       checkpoint=str(args.ckpt), trained_window=meta["model"]["window"])
    text = json.dumps(record, indent=2, sort_keys=True, allow_nan=False) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.traces:
        d = Path(args.traces)
        d.mkdir(parents=True, exist_ok=True)
        for i, t in enumerate(traces):
            write_trace(d / f"trace_{i:05d}{TRACE_SUFFIX}", t)
    return EXIT_OK


_AXES = {"w": "window", "window": "window", "lam": "lam", "lambda": "lam", "λ": "lam"}


def parse_axis(spec: str) -> tuple[str, list]:
    name, sep, values = spec.partition("=")
    if not sep or name.strip() not in _AXES:
        raise UsageError(f"--axis must look like w=4,8,16 or lam=0,0.01; got {spec!r}")
    axis = _AXES[name.strip()]
    try:
        parsed = [int(v) if axis == "window" else float(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--axis {spec!r}: values must be {'integers' if axis == 'window' else 'numbers'}") from None
    if not parsed:
        raise UsageError("--axis needs at least one value")
    if len(set(parsed)) != len(parsed):
        raise UsageError(f"--axis {spec!r} repeats a value")
    bad = [v for v in parsed if (v < 1 if axis == "window" else (v < 0 or not math.isfinite(v)))]
    if bad:
        raise UsageError(f"--axis {spec!r}: invalid value(s) {bad}")
    return axis, parsed


SUMMARY_COLUMNS = ("axis", "value", "seed", "mu_f", "mu_f_scored", "accuracy", "loss")


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def axis_table(axis: str, rows: list[tuple]) -> tuple[str, bool]:
    """Seed-averaged table over the axis; returns CSV text and whether usage is monotone.

    For the window axis "monotone" means strictly decreasing; for lambda it
    means non-increasing.
    """
    by_value: dict = {}
    for value, res in rows:
        by_value.setdefault(value, []).append(res)
    means = [SweepRow(v, float(np.mean([r.mu_f for r in rs])), float(np.mean([r.accuracy for r in rs])),
                      float(np.mean([r.loss for r in rs])), len(rs)) for v, rs in sorted(by_value.items())]
    if axis == "window" and len(means) >= 2:
        table = window_sweep_report(means)
        return table.to_csv(), table.strictly_decreasing
    buf = ["lam,mu_f,accuracy,loss,seeds,flag"]
    ok, prev = True, None
    for r in means:
        flag = "inversion" if prev is not None and r.mu_f > prev else ""
        ok &= not flag
        prev = r.mu_f
        buf.append(f"{r.window!r},{r.mu_f!r},{r.accuracy!r},{r.loss!r},{r.seeds},{flag}")
    return "\n".join(buf) + "\n", ok


def cmd_sweep(args) -> int:
    exp = load_config(args.config)
    axis, values = parse_axis(args.axis)
    if args.seeds is not None and args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    seeds = list(range(args.seeds)) if args.seeds is not None else list(exp.seeds)
    out = Path(args.out or exp.out or "")
    if not (args.out or exp.out):
        raise UsageError("no output directory: pass --out or set 'out' in the config")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(exp.with_point(seeds=tuple(seeds), out=str(out)).to_json())
    cache = BaseCache(args.base_cache or out / "_bases")
    rows: list[tuple] = []
    summary = out / "summary.csv"
    with open(summary, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for value in values:
            try:
                point = exp.with_point(**{axis: value})
            except ValueError as exc:
                raise ConfigError(f"sweep point {axis}={value}: {exc}") from None
            for seed in seeds:
                run_dir = out / f"{'w' if axis == 'window' else 'lam'}={value}" / f"seed_{seed}"
                res = run_experiment(point, seed, run_dir, cache, log_every=args.log_every)
                rows.append((value, res))
                writer.writerow([axis, value, seed, _fmt(res.mu_f), _fmt(res.mu_f_scored), _fmt(res.accuracy),
                                 _fmt(res.loss)])
                fh.flush()
                print(f"{axis}={value} seed {seed}: mu_f={res.mu_f:.4f} accuracy={res.accuracy:.4f}")
    table, monotone = axis_table(axis, rows)
    (out / "sweep.csv").write_text(table)
    sys.stdout.write(table)
    verdict = "strictly decreasing" if axis == "window" else "non-increasing"
    print(f"mu_f {verdict} in {axis}: {'yes' if monotone else 'no'}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    src = Path(args.traces)
    if not src.is_dir():
        raise UsageError(f"{src} is not a directory")
    files = sorted(src.rglob(f"*{TRACE_SUFFIX}"))
    traces, skipped = [], []
    for path in files:
        try:
            traces.append(read_trace(path))
        except (ValueError, KeyError, OSError) as exc:
            logger.warning("skipping %s: %s", path, exc)
            skipped.append(str(path))
    if not traces:
        raise UsageError(f"no traces found in {src}" + (f" ({len(skipped)} corrupt)" if skipped else ""))
    shapes = {(t.num_layers, t.num_heads) for t in traces}
    if len(shapes) != 1:
        raise UsageError(f"traces in {src} mix model shapes {sorted(shapes)}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = per_head_usage(traces)
    write_matrix_csv(out / "heatmap.csv", grid)
    curve = sorted_usage_curve(grid)
    with open(out / "sorted_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "layer", "head", "usage"])
        for rank, (layer, head, u) in enumerate(curve):
            w.writerow([rank, layer, head, repr(u)])
    with open(out / "gaps.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "head", "mean_gap", "trigger_count", "num_tokens"])
        for layer, row in enumerate(gap_table(traces)):
            for head, g in enumerate(row):
                w.writerow([layer, head, "inf" if math.isinf(g.mean_gap) else repr(g.mean_gap),
                            g.trigger_count, g.num_tokens])
    records = []
    for t in traces:
        if t.tokens is None:
            continue
        rec = token_trace_export(per_token_usage(t), t.tokens)
        records.append({"task": t.task, "sample_id": t.sample_id, **rec})
    _write_json(out / "token_traces.json", {"version": METRICS_VERSION, "traces": records})
    summary = {"version": METRICS_VERSION, "num_traces": len(traces), "skipped": len(skipped),
               "skipped_files": skipped, "mu_f": mu_f(traces), "mu_f_scored": mu_f_scored(traces),
               "top10_share": top_share(curve, 0.1)}
    _write_json(out / "summary.json", summary)
    print(f"{len(traces)} traces analysed, {len(skipped)} skipped; mu_f={summary['mu_f']:.4f} -> {out}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aha", description="All-or-here attention experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run per seed in the config")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one task")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--task", choices=TASKS + ("mixed",), default="mixed")
    e.add_argument("--force-gates", choices=FORCE_MODES, default="auto")
    e.add_argument("--samples", type=int, default=256)
    e.add_argument("--seed", type=int, default=1_000_000)
    e.add_argument("--length", type=int)
    e.add_argument("--key-distance", type=int)
    e.add_argument("--window", type=int, help="override the attention window (warns on mismatch)")
    e.add_argument("--out", help="write metrics JSON here instead of stdout")
    e.add_argument("--traces", help="directory to write gate traces into")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train across a window or lambda axis")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, help="w=4,8,16,32 or lam=0,0.01,0.1")
    s.add_argument("--seeds", type=int, help="use seeds 0..N-1 (default: the config's seeds)")
    s.add_argument("--out")
    s.add_argument("--base-cache", help="directory for pretrained bases shared across sweeps")
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", help="usage reports from a directory of gate traces")
    a.add_argument("--traces", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ad.get_dtype()
    except ValueError as exc:
        print(f"aha: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"aha: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"aha: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"aha: training aborted at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (ValueError, OSError, RuntimeError, IndexError) as exc:
        print(f"aha: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
