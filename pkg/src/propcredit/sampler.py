"""Rollout generation for DDIM and flow-SDE samplers, with CFG and IRG mixing.

Rollouts are batched: ``states[:, k]`` is the state entering step ``k`` (step 0 is
the noisiest) and ``states[:, K]`` is the final sample.  Each trajectory draws its
initial state and all step noises from its own Philox stream keyed by
``(seed, *stream_prefix, index)``, so results do not depend on batch layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .flow import FlowGrid, FlowSigma, poly_factor
from .mlp import PolicyParams, predict
from .schedules import DiffusionSchedule


class SamplingError(FloatingPointError):
    pass


def trajectory_rng(seed: int, *stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class Guidance:
    """Classifier-free guidance applied per model, then implicit reward guidance.

    ``mix`` holds ``(policy, lam)`` pairs; the mixed prediction is
    ``(1 - sum lam) * ref + sum lam_i * model_i``.
    """

    reference: PolicyParams
    mix: list = field(default_factory=list)
    cfg_scale: float = 1.0

    def __post_init__(self):
        if self.cfg_scale < 0.0:
            raise ValueError("cfg_scale must be >= 0")


def cfg_prediction(params: PolicyParams, x, t, c, beta: float, dtype=None):
    null = params.arch.null_condition
    if beta == 1.0:
        return predict(params, x, t, c, dtype)
    uncond = predict(params, x, t, null, dtype)
    if beta == 0.0:
        return uncond
    cond = predict(params, x, t, c, dtype)
    return (1.0 - beta) * uncond + beta * cond


def guided_prediction(spec: Guidance, x, t, c, dtype=None):
    ref = cfg_prediction(spec.reference, x, t, c, spec.cfg_scale, dtype)
    if not spec.mix:
        return ref
    lam_total = sum(lam for _, lam in spec.mix)
    out = (1.0 - lam_total) * ref
    for params, lam in spec.mix:
        out = out + lam * cfg_prediction(params, x, t, c, spec.cfg_scale, dtype)
    return out.astype(ref.dtype, copy=False)


def plain(params: PolicyParams, cfg_scale: float = 1.0) -> Guidance:
    return Guidance(reference=params, cfg_scale=cfg_scale)


class DDIMKernel:
    """DDIM transition in sampling order (step 0 = highest selected training index)."""

    kind = "ddim"

    def __init__(self, schedule: DiffusionSchedule):
        order = slice(None, None, -1)
        self.schedule = schedule
        self.K = schedule.K
        self.net_t = schedule.steps[order] / schedule.base.T_train
        self.ab_t = schedule.alpha_bar_t[order].copy()
        self.ab_prev = schedule.alpha_bar_prev[order].copy()
        self.sigma = schedule.sigma[order].copy()
        self.sqrt_alpha = np.sqrt(self.ab_t / self.ab_prev)
        self.sqrt_1m_ab = np.sqrt(1.0 - self.ab_t)
        self.dir_coef = np.sqrt(np.maximum(1.0 - self.ab_prev - self.sigma**2, 0.0))

    def mean(self, k, x, pred):
        dt = x.dtype.type
        return (x - dt(self.sqrt_1m_ab[k]) * pred) / dt(self.sqrt_alpha[k]) + dt(self.dir_coef[k]) * pred

    def std(self, k):
        return self.sigma[k]

    def mean_slope(self, k):
        """d(mean)/d(pred), a negative scalar (minus the credit coefficient)."""
        return self.dir_coef[k] - self.sqrt_1m_ab[k] / self.sqrt_alpha[k]


class FlowKernel:
    """Euler-Maruyama step of the flow SDE from ``t[k]`` down to ``t[k+1]``."""

    kind = "flow"

    def __init__(self, grid: FlowGrid, sigma: FlowSigma, ode: bool = False):
        self.grid = grid
        self.flow_sigma = sigma
        self.K = grid.N
        self.net_t = grid.t_steps.copy()
        self.t = grid.t_steps.copy()
        self.dt = grid.dt.copy()
        self.sigma = sigma.sigma.copy()
        self.ode = ode

    def mean(self, k, z, u):
        f = z.dtype.type
        t, dt = f(self.t[k]), f(self.dt[k])
        if self.ode:
            return z - u * dt
        z0_hat = z - u * t
        # sigma^2 * score, with score = -(z - (1-t) z0_hat) / sigma^2
        scaled_score = -(z - (f(1.0) - t) * z0_hat)
        return z - u * dt + f(0.5) * scaled_score * dt

    def std(self, k):
        return 0.0 if self.ode else self.sigma[k] * math.sqrt(self.dt[k])

    def mean_slope(self, k):
        return -self.dt[k] * float(poly_factor(self.t[k]))


def gaussian_logpdf(x, mean, std):
    """Isotropic Gaussian log-density over the last axis, in the dtype of ``x``."""
    f = np.asarray(x).dtype.type
    std = f(std)
    d = np.shape(x)[-1]
    z = (x - mean) / std
    return -f(0.5) * np.sum(z * z, axis=-1) - f(d) * np.log(std) - f(0.5 * d * math.log(2.0 * math.pi))


@dataclass
class Trajectory:
    states: np.ndarray
    noises: np.ndarray
    preds: np.ndarray
    logprobs: np.ndarray | None
    cond: int
    stream: tuple
    reward: float | None = None

    @property
    def x0(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class Rollout:
    kind: str
    states: np.ndarray
    noises: np.ndarray
    preds: np.ndarray
    conds: np.ndarray
    streams: np.ndarray
    net_t: np.ndarray
    dtype: str = "float64"
    logprobs: np.ndarray | None = None
    rewards: np.ndarray | None = None

    @property
    def B(self) -> int:
        return self.states.shape[0]

    @property
    def K(self) -> int:
        return self.noises.shape[1]

    @property
    def x0(self) -> np.ndarray:
        return self.states[:, -1]

    def trajectory(self, j: int) -> Trajectory:
        return Trajectory(
            states=self.states[j],
            noises=self.noises[j],
            preds=self.preds[j],
            logprobs=None if self.logprobs is None else self.logprobs[j],
            cond=int(self.conds[j]),
            stream=tuple(int(s) for s in self.streams[j]),
            reward=None if self.rewards is None else float(self.rewards[j]),
        )

    def dump_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for j in range(self.B):
                for k in range(self.K):
                    rec = {
                        "trajectory": j,
                        "step": k,
                        "t": float(self.net_t[k]),
                        "cond": int(self.conds[j]),
                        "state": self.states[j, k].tolist(),
                        "noise": self.noises[j, k].tolist(),
                        "pred": self.preds[j, k].tolist(),
                        "next_state": self.states[j, k + 1].tolist(),
                    }
                    if self.logprobs is not None:
                        rec["logprob"] = float(self.logprobs[j, k])
                    f.write(json.dumps(rec) + "\n")


def draw_noise(seed: int, stream_prefix, n: int, K: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Initial states ``(n, d)`` and step noises ``(n, K, d)`` from per-trajectory streams."""
    x_init = np.empty((n, d))
    noises = np.empty((n, K, d))
    for j in range(n):
        draws = trajectory_rng(seed, *stream_prefix, j).standard_normal((K + 1, d))
        x_init[j] = draws[0]
        noises[j] = draws[1:]
    return x_init, noises


def sample(kernel, spec: Guidance, conds, seed: int, stream_prefix=(), dtype=np.float64,
           store_logprob: bool = False) -> Rollout:
    conds = np.asarray(conds, dtype=np.int64)
    n = len(conds)
    d = spec.reference.arch.data_dim
    K = kernel.K
    f = np.dtype(dtype).type
    x_init, noises = draw_noise(seed, stream_prefix, n, K, d)
    states = np.empty((n, K + 1, d))
    preds = np.empty((n, K, d))
    logprobs = np.empty((n, K)) if store_logprob else None
    x = x_init.astype(f)
    states[:, 0] = x
    for k in range(K):
        pred = guided_prediction(spec, x, kernel.net_t[k], conds, dtype=f).astype(f, copy=False)
        mean = kernel.mean(k, x, pred)
        std = kernel.std(k)
        x_next = mean + f(std) * noises[:, k].astype(f)
        if not np.all(np.isfinite(x_next)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(x_next), axis=1))[0])
            raise SamplingError(f"non-finite state at step {k} in trajectory {bad}")
        if store_logprob:
            logprobs[:, k] = gaussian_logpdf(x_next, mean, std)
        preds[:, k] = pred
        states[:, k + 1] = x_next
        x = x_next
    streams = np.array([(seed, *stream_prefix, j) for j in range(n)], dtype=np.int64)
    return Rollout(
        kind=kernel.kind,
        states=states,
        noises=noises,
        preds=preds,
        conds=conds,
        streams=streams,
        net_t=np.asarray(kernel.net_t, dtype=np.float64),
        dtype=np.dtype(dtype).name,
        logprobs=logprobs,
    )


def ddim_reverse_sample(spec: Guidance, schedule: DiffusionSchedule, conds, seed: int,
                        stream_prefix=(), dtype=np.float64, store_logprob=False) -> Rollout:
    if schedule.rl and np.any(schedule.sigma <= 0.0):
        raise SamplingError("RL sampling needs sigma > 0 at every step")
    return sample(DDIMKernel(schedule), spec, conds, seed, stream_prefix, dtype, store_logprob)


def flow_sde_sample(spec: Guidance, grid: FlowGrid, sigma: FlowSigma, conds, seed: int,
                    stream_prefix=(), dtype=np.float64, store_logprob=False, ode=False) -> Rollout:
    kernel = FlowKernel(grid, sigma, ode=ode)
    return sample(kernel, spec, conds, seed, stream_prefix, dtype, store_logprob and not ode)


def replay_step(kernel, rollout: Rollout, k: int) -> np.ndarray:
    """Re-apply step ``k`` to all trajectories from stored state, prediction and noise."""
    f = np.dtype(rollout.dtype).type
    x = rollout.states[:, k].astype(f)
    mean = kernel.mean(k, x, rollout.preds[:, k].astype(f))
    return mean + f(kernel.std(k)) * rollout.noises[:, k].astype(f)


def store_baseline_logprob(rollout: Rollout, kernel, dtype=np.float64) -> Rollout:
    """Fill ``rollout.logprobs`` with per-step log-densities under the recorded old policy."""
    f = np.dtype(dtype).type
    lp = np.empty((rollout.B, rollout.K))
    for k in range(rollout.K):
        x = rollout.states[:, k].astype(f)
        mean = kernel.mean(k, x, rollout.preds[:, k].astype(f))
        lp[:, k] = gaussian_logpdf(rollout.states[:, k + 1].astype(f), mean, kernel.std(k))
    rollout.logprobs = lp
    return rollout
