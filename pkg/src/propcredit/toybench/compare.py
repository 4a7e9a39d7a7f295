"""Multi-variant, multi-seed comparisons: epochs-to-threshold, clip traces, coverage."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..svg import line_plot
from .train import RunResult, finetune

METRIC_FIELDS = ("epoch", "variant", "seed", "reward_mean", "clip_frac", "clip_frac_first_step", "coverage")


def smoothed(x, window: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if window <= 1:
        return x
    c = np.cumsum(np.insert(x, 0, 0.0))
    out = np.empty_like(x)
    for i in range(len(x)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def epochs_to_threshold(rewards, threshold: float, window: int = 5) -> float:
    """First epoch whose trailing-mean reward reaches ``threshold`` (inf if never)."""
    hit = np.flatnonzero(smoothed(rewards, window) >= threshold)
    return float(hit[0]) if len(hit) else math.inf


def plateau(rewards, tail: float = 0.1) -> float:
    r = np.asarray(rewards)
    n = max(1, int(round(len(r) * tail)))
    return float(np.mean(r[-n:]))


@dataclass
class Comparison:
    labels: list
    runs: dict  # label -> list[RunResult]
    thresholds: dict  # sampler family -> threshold
    window: int = 5
    summary: dict = field(default_factory=dict)

    def rows(self):
        for label in self.labels:
            for run in self.runs[label]:
                for m in run.metrics:
                    yield {
                        "epoch": m.epoch,
                        "variant": label,
                        "seed": run.seed,
                        "reward_mean": m.reward_mean,
                        "clip_frac": m.clip_frac,
                        "clip_frac_first_step": m.clip_frac_first_step,
                        "coverage": m.coverage,
                    }


def _labels(variants):
    labels, seen = [], {}
    for v in variants:
        n = seen.get(v.method, 0)
        seen[v.method] = n + 1
        labels.append(v.method if n == 0 else f"{v.method}#{n}")
    return labels


def _run_one(args):
    v, dataset, base, epochs, seed = args
    return finetune(v, dataset, base, epochs, seed)


def run_comparison(variants, seeds, dataset, bases: dict, epochs: int = 200, thresholds=None,
                   window: int = 5, threads: int = 1) -> Comparison:
    """Fine-tune every variant from its family's base policy under every seed.

    ``bases`` maps ``"diffusion"``/``"flow"`` to base parameters.  Without explicit
    ``thresholds`` each sampler family uses the midpoint between its mean initial
    reward and the best median plateau among its variants.
    """
    variants = list(variants)
    labels = _labels(variants)
    jobs = [(v, dataset, bases[v.sampler], epochs, s) for v in variants for s in seeds]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    runs = {}
    it = iter(results)
    for label in labels:
        runs[label] = [next(it) for _ in seeds]
    fam = {label: v.sampler for label, v in zip(labels, variants)}
    if thresholds is None:
        thresholds = {}
        for family in sorted(set(fam.values())):
            members = [l for l in labels if fam[l] == family]
            start = np.mean([r.metrics[0].reward_mean for l in members for r in runs[l]])
            top = max(np.median([plateau(r.rewards()) for r in runs[l]]) for l in members)
            thresholds[family] = float(0.5 * (start + top))
    elif not isinstance(thresholds, dict):
        thresholds = {family: float(thresholds) for family in set(fam.values())}
    comp = Comparison(labels=labels, runs=runs, thresholds=thresholds, window=window)
    comp.summary = summarize(comp, fam)
    return comp


def _coverage_at(run: RunResult, epoch: float) -> float:
    idx = len(run.metrics) - 1 if math.isinf(epoch) else int(epoch)
    return run.metrics[idx].coverage


def summarize(comp: Comparison, fam: dict) -> dict:
    table = {}
    for label in comp.labels:
        thr = comp.thresholds[fam[label]]
        per_seed = []
        for run in comp.runs[label]:
            e = epochs_to_threshold(run.rewards(), thr, comp.window)
            per_seed.append({
                "seed": run.seed,
                "epochs_to_threshold": None if math.isinf(e) else int(e),
                "coverage_at_threshold": _coverage_at(run, e),
                "mean_clip_frac": float(np.mean([m.clip_frac for m in run.metrics])),
                "max_first_step_clip_frac": float(max(m.clip_frac_first_step for m in run.metrics)),
                "plateau": plateau(run.rewards()),
                "max_taylor_gap": float(max(m.max_taylor_gap for m in run.metrics)),
            })
        eps = [math.inf if r["epochs_to_threshold"] is None else r["epochs_to_threshold"] for r in per_seed]
        med = float(np.median(eps))
        table[label] = {
            "sampler": fam[label],
            "threshold": thr,
            "median_epochs_to_threshold": None if math.isinf(med) else med,
            "median_coverage_at_threshold": float(np.median([r["coverage_at_threshold"] for r in per_seed])),
            "mean_clip_frac": float(np.mean([r["mean_clip_frac"] for r in per_seed])),
            "seeds": per_seed,
        }
    return {"thresholds": comp.thresholds, "window": comp.window, "variants": table}


def median_epochs(summary: dict, label: str) -> float:
    v = summary["variants"][label]["median_epochs_to_threshold"]
    return math.inf if v is None else v


def write_outputs(comp: Comparison, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in comp.rows():
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
    with open(out / "summary.json", "w") as f:
        json.dump(comp.summary, f, indent=2, sort_keys=True)
        f.write("\n")
    for key, fname, title in (
        ("reward_mean", "reward.svg", "mean reward"),
        ("clip_frac", "clip_fraction.svg", "clip fraction"),
    ):
        series = {}
        for label in comp.labels:
            traces = np.array([[getattr(m, key) for m in r.metrics] for r in comp.runs[label]])
            series[label] = (np.arange(traces.shape[1]), traces.mean(axis=0))
        line_plot(out / fname, series, title=title, xlabel="epoch", ylabel=title)
