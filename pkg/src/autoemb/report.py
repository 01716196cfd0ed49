"""Run directories, cross-run comparison tables and figure data files."""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .config import ExperimentConfig
from .controller import FEATURE_LAYOUT, min_feature_size
from .data import Stream, load_cache, parse_csv, save_cache, synth_stream, write_csv
from .errors import ComparisonError, ConfigError
from .streaming import MetricLog, PredictionLog, bucket_metrics, learning_curve, run, write_run

logger = logging.getLogger(__name__)

MODE_ORDER = ("fse", "sam", "darts_weights", "autoemb")
MODE_NAMES = {"fse": "FSE", "sam": "SAM", "darts_weights": "DARTS", "autoemb": "AutoEmb"}


def load_stream(config: ExperimentConfig) -> Stream:
    if config.dataset is not None:
        path = Path(config.dataset)
        if not path.exists():
            raise ConfigError(f"dataset: no such file {path}")
        return load_cache(path) if path.suffix == ".bin" else parse_csv(path)
    s = config.synth
    return synth_stream(s.users, s.items, s.interactions, s.exponent, s.seed)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def stage_summary(preds: PredictionLog) -> dict:
    out = {}
    for stage in ("offline", "online"):
        m = preds.stage == stage
        out[stage] = {
            "examples": int(m.sum()),
            "mean_loss": float(preds.loss[m].mean()) if m.any() else None,
            "accuracy": float(preds.correct[m].mean()) if m.any() else None,
        }
    return out


def cmd_run(config: ExperimentConfig, stream: Stream | None = None) -> Path:
    """Run every seed of ``config``; each seed gets ``<output_dir>/seed_<s>/``."""
    stream = load_stream(config) if stream is None else stream
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", config.to_dict())
    fp = stream.fingerprint()
    for seed in config.seeds:
        seed_cfg = config.replace(seeds=[seed], output_dir=str(out / f"seed_{seed}"))
        d = Path(seed_cfg.output_dir)
        res = run(stream, seed_cfg, seed)
        write_run(res, d)
        checkpoint.save(res.model, d / "checkpoint.bin")
        _write_json(d / "config.json", seed_cfg.to_dict())
        _write_json(d / "summary.json", {
            "mode": config.mode,
            "task": config.task,
            "seed": seed,
            "second_order": config.second_order,
            "stream_fingerprint": fp,
            "stream_length": len(stream),
            "batches": len(res.log),
            "code_version": __version__,
            "feature_layout": {
                "slots": list(FEATURE_LAYOUT),
                "size": config.feature_size,
                "reserved": config.feature_size - min_feature_size(len(config.dims)),
            },
            "stages": stage_summary(res.predictions),
        })
        logger.info("seed %s: online loss %.5f", seed, stage_summary(res.predictions)["online"]["mean_loss"])
    return out


def _seed_dirs(path) -> list:
    path = Path(path)
    if (path / "summary.json").exists():
        return [path]
    found = sorted(p.parent for p in path.glob("seed_*/summary.json"))
    if not found:
        raise ComparisonError(f"{path}: no completed run found")
    return found


def _std(x) -> float:
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def cmd_compare(run_dirs, stage: str = "online") -> list:
    """Per-mode mean +/- std (across seeds) of the stage loss and accuracy.

    Only ``summary.json`` files are read.  Rows follow FSE, SAM, DARTS, AutoEmb.
    """
    summaries = [json.loads((d / "summary.json").read_text()) for p in run_dirs for d in _seed_dirs(p)]
    if len({s["stream_fingerprint"] for s in summaries}) > 1:
        raise ComparisonError("runs were produced on different streams (fingerprint mismatch)")
    rows = []
    for mode in MODE_ORDER:
        group = [s for s in summaries if s["mode"] == mode]
        if not group:
            continue
        loss = [s["stages"][stage]["mean_loss"] for s in group]
        acc = [s["stages"][stage]["accuracy"] for s in group]
        rows.append({
            "method": MODE_NAMES[mode], "mode": mode, "runs": len(group),
            "loss_mean": float(np.mean(loss)), "loss_std": _std(loss),
            "accuracy_mean": float(np.mean(acc)), "accuracy_std": _std(acc),
        })
    return rows


def format_table(rows: list, task: str = "regression") -> str:
    metric = "MSE" if task == "regression" else "CE"
    lines = [f"{'method':<8} {'runs':>4}  {metric + ' loss':>20}  {'accuracy':>20}"]
    for r in rows:
        lines.append(f"{r['method']:<8} {r['runs']:>4}  {r['loss_mean']:.4f} ± {r['loss_std']:.4f}"
                     f"      {r['accuracy_mean']:.4f} ± {r['accuracy_std']:.4f}")
    return "\n".join(lines)


def _num(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def cmd_figures(run_dir, stage: str | None = None) -> list:
    """Write popularity buckets, weight distribution and learning curve CSVs.

    Returns the list of written files.  A top-level run directory is expanded
    into its seed directories.
    """
    written = []
    for d in _seed_dirs(run_dir):
        cfg = json.loads((d / "config.json").read_text())
        edges = cfg["popularity_edges"]
        preds = PredictionLog.from_csv(d / "predictions.csv")
        log = MetricLog.from_csv(d / "metrics.csv")
        n = log.n_spaces
        fig = d / "figures"
        fig.mkdir(exist_ok=True)
        ub = bucket_metrics(preds, edges, "user", stage)
        ib = bucket_metrics(preds, edges, "item", stage)

        with open(fig / "popularity_buckets.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lower", "upper", "user_count", "user_mean_loss", "user_accuracy",
                        "item_count", "item_mean_loss", "item_accuracy"])
            for k in range(len(edges)):
                w.writerow([edges[k], _num(ub.upper[k]) if np.isfinite(ub.upper[k]) else "inf",
                            int(ub.count[k]), _num(ub.mean_loss[k]), _num(ub.accuracy[k]),
                            int(ib.count[k]), _num(ib.mean_loss[k]), _num(ib.accuracy[k])])

        with open(fig / "weight_distribution.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lower", "upper", "user_count", *(f"alpha_{k}" for k in range(1, n + 1)),
                        "item_count", *(f"beta_{k}" for k in range(1, n + 1))])
            for k in range(len(edges)):
                w.writerow([edges[k], _num(ub.upper[k]) if np.isfinite(ub.upper[k]) else "inf",
                            int(ub.count[k]), *map(_num, ub.mean_weights[k]),
                            int(ib.count[k]), *map(_num, ib.mean_weights[k])])

        with open(fig / "learning_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["examples_seen", "batch_loss", "batch_accuracy", "cumulative_loss", "cumulative_accuracy",
                        "stage"])
            for row in learning_curve(log, cfg["batch_size"], len(preds)):
                w.writerow([row[0], *map(_num, row[1:5]), row[5]])
        written += [fig / "popularity_buckets.csv", fig / "weight_distribution.csv", fig / "learning_curve.csv"]
    return written


def cmd_synth(users: int, items: int, interactions: int, exponent: float, seed: int, path) -> Path:
    """Write a synthetic stream as CSV, or as a binary cache when ``path`` ends in ``.bin``."""
    stream = synth_stream(users, items, interactions, exponent, seed)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".bin":
        save_cache(stream, path)
    else:
        write_csv(stream, path)
    return path
