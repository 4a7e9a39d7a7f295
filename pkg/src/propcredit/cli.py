"""Command-line entry point: versioned JSON configs in, CSV/JSON/SVG artifacts out.

Every command writes ``run_manifest.json`` next to its outputs.  Passing that
manifest back as ``--config`` reruns the command with the identical resolved
configuration, which reproduces the outputs byte for byte.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .flow import PRESETS, build_flow_grid, flow_sigma, native_flow_weights, proportional_flow_weights, uniform_flow_weights
from .mlp import PolicyParams, load_checkpoint, save_checkpoint
from .sampler import DDIMKernel, Guidance, sample
from .schedules import (
    SolverError,
    build_train_schedule,
    credit_coefficients,
    make_ddim_schedule,
    min_feasible_weight,
    native_weights,
    reengineer,
)
from .svg import line_plot
from .toybench.compare import METRIC_FIELDS, run_comparison, write_outputs
from .toybench.data import mode_coverage, reward, ring_dataset
from .toybench.pretrain import deterministic_samples, pretrain
from .toybench.train import VariantConfig, finetune

log = logging.getLogger("propcredit")

CONFIG_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


_SCHEDULE = {"T_train": 1000, "beta_start": 8.5e-4, "beta_end": 1.2e-2, "kind": "scaled-linear", "K": 50,
             "eta": 1.0, "w_star": None}
_DATASET = {"n_modes": 8, "radius": 3.0, "std": 0.2}
_PRETRAIN = {"steps": 4000, "batch": 512, "lr": 2e-3, "p_uncond": 0.2}
_VARIANT = {f.name: f.default for f in fields(VariantConfig)}

DEFAULTS = {
    "audit-schedule": {"schedule": _SCHEDULE},
    "audit-flow": {"flow": {"preset": None, "N": 16, "shift": 3.0, "eta": 0.3, "sigma_kind": "constant"}},
    "pretrain": {"dataset": _DATASET, "sampler": "diffusion", "pretrain": _PRETRAIN, "eval_samples": 1024},
    "finetune": {"dataset": _DATASET, "pretrain": _PRETRAIN, "base_checkpoint": None, "variant": _VARIANT,
                 "epochs": 200},
    "compare": {"dataset": _DATASET, "pretrain": _PRETRAIN,
                "base_checkpoints": {"diffusion": None, "flow": None},
                "variants": [{"method": "ddpo-baseline"}, {"method": "pcpo-full"}],
                "seeds": [0, 1, 2, 3, 4], "epochs": 200, "thresholds": None, "window": 5, "threads": 1},
    "irg": {"dataset": _DATASET, "pretrain": _PRETRAIN, "reference_checkpoint": None,
            "variant": {**_VARIANT, "method": "pcpo-full"}, "epochs": 100,
            "models": [{"checkpoint": None, "reward": "mode"}, {"checkpoint": None, "reward": "halfplane"}],
            "lambdas": [[1.0, 0.0], [0.75, 0.25], [0.5, 0.5], [0.25, 0.75], [0.0, 1.0]],
            "n_samples": 512, "rewards": ["mode", "halfplane"]},
}
_MODEL_KEYS = {"checkpoint", "reward"}


def default_config(command: str) -> dict:
    return {"version": CONFIG_VERSION, "command": command, "seed": 0, **copy.deepcopy(DEFAULTS[command])}


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {where}{key!r}")
        if isinstance(base[key], dict) and base[key] and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def resolve_config(command: str, raw: dict) -> dict:
    if "manifest_version" in raw:
        if raw.get("command") != command:
            raise ConfigError(f"manifest is for {raw.get('command')!r}, not {command!r}")
        raw = raw["config"]
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {raw.get('version')!r}")
    if raw.get("command", command) != command:
        raise ConfigError(f"config is for {raw['command']!r}, not {command!r}")
    cfg = _merge(default_config(command), raw, "")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    if command == "compare":
        cfg["variants"] = [_merge(_VARIANT, v, "variants[].") for v in cfg["variants"]]
        if not cfg["variants"] or not cfg["seeds"]:
            raise ConfigError("compare needs at least one variant and one seed")
    if command == "irg":
        for m in cfg["models"]:
            extra = set(m) - _MODEL_KEYS
            if extra:
                raise ConfigError(f"unknown key models[].{sorted(extra)[0]!r}")
        cfg["models"] = [{"checkpoint": None, "reward": "mode", **m} for m in cfg["models"]]
        n = len(cfg["models"])
        lams = [[float(l)] * 1 if np.isscalar(l) else [float(x) for x in l] for l in cfg["lambdas"]]
        if any(len(l) != n for l in lams):
            raise ConfigError(f"each lambda entry needs {n} weights")
        cfg["lambdas"] = lams
    return cfg


# -- helpers -----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _dataset(cfg):
    d = cfg["dataset"]
    return ring_dataset(int(d["n_modes"]), float(d["radius"]), float(d["std"]))


def _schedule(s):
    base = build_train_schedule(int(s["T_train"]), float(s["beta_start"]), float(s["beta_end"]), s["kind"])
    return make_ddim_schedule(base, int(s["K"]), float(s["eta"]))


def _pretrained(cfg, ds, sampler: str, path, seed: int) -> PolicyParams:
    if path:
        return load_checkpoint(path)
    p = cfg["pretrain"]
    target = "flow" if sampler == "flow" else build_train_schedule()
    return pretrain(ds, target, int(p["steps"]), int(p["batch"]), float(p["lr"]), float(p["p_uncond"]), seed)


def _variant(d: dict) -> VariantConfig:
    try:
        return VariantConfig(**d)
    except TypeError as e:
        raise ConfigError(str(e)) from e


# -- commands ----------------------------------------------------------------

def cmd_audit_schedule(cfg, out: Path) -> None:
    s = cfg["schedule"]
    sched = _schedule(s)
    prof = native_weights(sched)
    sched_t, tilde, loss_weight = reengineer(sched, s["w_star"])
    C_t = credit_coefficients(sched_t)
    w_t = C_t / sched_t.sigma
    rows = [(k, int(sched.steps[k]), sched.alpha_bar_t[k], sched.sigma[k], prof.C[k], prof.w[k],
             sched_t.sigma[k], w_t[k]) for k in range(sched.K)]
    _write_csv(out / "schedule_audit.csv", ("step_index", "t", "alpha_bar", "sigma", "C", "w", "sigma_tilde",
                                            "w_tilde"), rows)
    _write_json(out / "schedule_summary.json", {
        "K": sched.K,
        "w_star": float(tilde.w_star),
        "min_feasible_w": min_feasible_weight(sched),
        "mean_w": float(np.mean(prof.w)),
        "loss_weight": float(loss_weight),
        "sum_w": float(np.sum(prof.w)),
        "sum_w_tilde": float(np.sum(w_t)),
        "sum_loss_w": float(loss_weight * sched.K),
        "max_abs_w_tilde_error": float(np.max(np.abs(w_t - tilde.w_star))),
    })
    line_plot(out / "schedule_weights.svg",
              {"native w": (sched.steps, prof.w), "constant w": (sched.steps, w_t),
               "sigma": (sched.steps, sched.sigma), "sigma tilde": (sched.steps, sched_t.sigma)},
              title="per-step credit weights", xlabel="training step t", ylabel="value", logy=True)


def cmd_audit_flow(cfg, out: Path) -> None:
    f = dict(cfg["flow"])
    if f["preset"] is not None:
        if f["preset"] not in PRESETS:
            raise ConfigError(f"unknown preset {f['preset']!r}; expected one of {sorted(PRESETS)}")
        p = PRESETS[f["preset"]]
        f.update(N=p["N"], eta=p["eta"], sigma_kind=p["kind"])
    grid = build_flow_grid(int(f["N"]), float(f["shift"]))
    sig = flow_sigma(grid, f["sigma_kind"], float(f["eta"]))
    nat = native_flow_weights(grid, sig)
    prop = proportional_flow_weights(grid, sig)
    uni = uniform_flow_weights(grid, sig)
    rows = [(i, grid.t[i], grid.dt[i], sig.sigma[i], nat.w[i], prop.w[i], uni.w[i]) for i in range(grid.N)]
    _write_csv(out / "flow_audit.csv", ("i", "t", "dt", "sigma", "w_native", "w_prop", "w_uniform"), rows)
    _write_json(out / "flow_summary.json", {
        "N": grid.N, "shift": grid.shift, "eta": sig.eta, "sigma_kind": sig.kind,
        "t_one_approximation": sig.t_one_approx,
        "zeta": prop.zeta,
        "sum_w_native": float(nat.w.sum()), "sum_w_prop": float(prop.w.sum()), "sum_w_uniform": float(uni.w.sum()),
    })
    x = grid.t_steps
    line_plot(out / "flow_weights.svg", {"native": (x, nat.w), "proportional": (x, prop.w), "uniform": (x, uni.w)},
              title="flow timestep weights", xlabel="t", ylabel="weight")


def cmd_pretrain(cfg, out: Path) -> None:
    ds = _dataset(cfg)
    if cfg["sampler"] not in ("diffusion", "flow"):
        raise ConfigError("sampler must be 'diffusion' or 'flow'")
    params = _pretrained(cfg, ds, cfg["sampler"], None, cfg["seed"])
    save_checkpoint(params, out / "checkpoint.json")
    x0 = deterministic_samples(params, ds, cfg["sampler"], int(cfg["eval_samples"]), cfg["seed"])
    conds = np.arange(len(x0)) % ds.n_conditions
    _write_json(out / "pretrain_summary.json", {
        "coverage": mode_coverage(x0, ds),
        "mode_reward_mean": float(np.mean(reward(x0, conds, ds, "mode"))),
    })


def cmd_finetune(cfg, out: Path) -> None:
    ds = _dataset(cfg)
    v = _variant(cfg["variant"])
    base = _pretrained(cfg, ds, v.sampler, cfg["base_checkpoint"], cfg["seed"])
    run = finetune(v, ds, base, int(cfg["epochs"]), cfg["seed"])
    save_checkpoint(run.params, out / "checkpoint.json")
    rows = [(m.epoch, v.method, cfg["seed"], m.reward_mean, m.clip_frac, m.clip_frac_first_step, m.coverage)
            for m in run.metrics]
    _write_csv(out / "metrics.csv", METRIC_FIELDS, rows)
    _write_json(out / "summary.json", {
        "final_reward": run.metrics[-1].reward_mean if run.metrics else None,
        "mean_clip_frac": float(np.mean([m.clip_frac for m in run.metrics])) if run.metrics else None,
        "max_taylor_gap": float(max((m.max_taylor_gap for m in run.metrics), default=0.0)),
    })
    epochs = np.arange(len(run.metrics))
    line_plot(out / "reward.svg", {v.method: (epochs, run.rewards())}, title="mean reward", xlabel="epoch",
              ylabel="reward")


def cmd_compare(cfg, out: Path) -> None:
    ds = _dataset(cfg)
    variants = [_variant(d) for d in cfg["variants"]]
    bases = {}
    for sampler in sorted({v.sampler for v in variants}):
        bases[sampler] = _pretrained(cfg, ds, sampler, cfg["base_checkpoints"][sampler], cfg["seed"])
    comp = run_comparison(variants, [int(s) for s in cfg["seeds"]], ds, bases, int(cfg["epochs"]),
                          cfg["thresholds"], int(cfg["window"]), int(cfg["threads"]))
    write_outputs(comp, out)


def irg_sweep(cfg, ds, reference, models, v: VariantConfig):
    """Sample the reference-plus-mixture policy for every lambda vector with shared noise."""
    kernel = DDIMKernel(make_ddim_schedule(build_train_schedule(v.T_train, v.beta_start, v.beta_end, v.beta_kind),
                                           v.K, v.eta))
    n = int(cfg["n_samples"])
    conds = np.arange(n) % ds.n_conditions
    results = []
    for lam in cfg["lambdas"]:
        spec = Guidance(reference, mix=list(zip(models, lam)), cfg_scale=v.cfg_scale)
        x0 = sample(kernel, spec, conds, cfg["seed"], (0x1A6,)).x0
        results.append((lam, x0))
    return conds, results


def cmd_irg(cfg, out: Path) -> None:
    ds = _dataset(cfg)
    v = _variant(cfg["variant"])
    if v.sampler != "diffusion":
        raise ConfigError("irg runs on the diffusion sampler")
    reference = _pretrained(cfg, ds, "diffusion", cfg["reference_checkpoint"], cfg["seed"])
    models = []
    for i, m in enumerate(cfg["models"]):
        if m["checkpoint"]:
            models.append(load_checkpoint(m["checkpoint"]))
            continue
        run = finetune(VariantConfig(**{**cfg["variant"], "reward": m["reward"]}), ds, reference,
                       int(cfg["epochs"]), cfg["seed"])
        save_checkpoint(run.params, out / f"model_{i}.json")
        models.append(run.params)
    conds, results = irg_sweep(cfg, ds, reference, models, v)
    sweep = []
    for i, (lam, x0) in enumerate(results):
        _write_csv(out / f"samples_{i}.csv", ("x", "y", "condition"),
                   [(x0[j, 0], x0[j, 1], int(conds[j])) for j in range(len(x0))])
        sweep.append({"index": i, "lambda": lam,
                      "reward_means": {r: float(np.mean(reward(x0, conds, ds, r))) for r in cfg["rewards"]}})
    _write_json(out / "irg_summary.json", {"sweep": sweep})
    xs = np.arange(len(sweep))
    line_plot(out / "irg_tradeoff.svg",
              {r: (xs, [s["reward_means"][r] for s in sweep]) for r in cfg["rewards"]},
              title="reward means across the guidance sweep", xlabel="sweep index", ylabel="mean reward")


COMMANDS = {
    "audit-schedule": cmd_audit_schedule,
    "audit-flow": cmd_audit_flow,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "compare": cmd_compare,
    "irg": cmd_irg,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="propcredit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config or a previous run_manifest.json")
        s.add_argument("--out", default=None, help=f"output directory (default runs/{name})")
        s.add_argument("--seed", type=int, default=None, help="override the global seed")
        s.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def run(command: str, cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    COMMANDS[command](cfg, out)
    _write_json(out / "run_manifest.json", {
        "manifest_version": 1,
        "command": command,
        "seed": cfg["seed"],
        "code_version": __version__,
        "config": cfg,
    })


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        raw = {"version": CONFIG_VERSION}
        if args.config:
            with open(args.config) as f:
                raw = json.load(f)
        cfg = resolve_config(args.command, raw)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.print_config:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return EXIT_OK
        run(args.command, cfg, Path(args.out or f"runs/{args.command}"))
    except (SolverError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, TypeError, KeyError, OSError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
