"""RL fine-tuning loop and the method variants of the ablation ladder."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .. import objective as obj
from ..flow import build_flow_grid, flow_sigma, flow_weights, native_flow_weights
from ..mlp import OptimizerState, PolicyParams, adam_step, backward, forward, save_checkpoint
from ..sampler import DDIMKernel, FlowKernel, gaussian_logpdf, plain, sample, trajectory_rng
from ..schedules import build_train_schedule, make_ddim_schedule, native_weights, reengineer
from .data import ToyDataset, mode_coverage, reward, sample_spread

log = logging.getLogger(__name__)

DIFFUSION_METHODS = ("ddpo-baseline", "log-rho", "eps-matching", "pcpo-full", "timestep-subsample")
FLOW_METHODS = ("flow-vanilla", "flow-proportional", "flow-uniform")
METHODS = DIFFUSION_METHODS + FLOW_METHODS
FLOW_WEIGHT_MODE = {
    "flow-vanilla": "native",
    "flow-proportional": "proportional",
    "flow-uniform": "uniform-heuristic",
}


class TrainingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class VariantConfig:
    method: str = "pcpo-full"
    xi: float = 0.1
    lr: float = 3e-4
    group_size: int = 16
    n_groups: int = 8
    inner_epochs: int = 2
    minibatches: int = 2
    subsample_fraction: float = 0.5
    rollout_precision: str = "float32"
    logprob_precision: str = "float32"
    cfg_scale: float = 1.0
    reward: str = "mode"
    reward_tau: float = 0.1
    # diffusion sampler
    T_train: int = 1000
    beta_start: float = 8.5e-4
    beta_end: float = 1.2e-2
    beta_kind: str = "scaled-linear"
    K: int = 20
    eta: float = 1.0
    w_star: float | None = None
    # flow sampler
    flow_N: int = 16
    flow_shift: float = 3.0
    flow_eta: float = 0.3
    flow_sigma_kind: str = "constant"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not 0.0 < self.xi < 1.0:
            raise ValueError("xi must lie in (0, 1)")
        if self.group_size < 1 or self.n_groups < 1 or self.minibatches < 1:
            raise ValueError("group_size, n_groups and minibatches must be positive")
        if self.inner_epochs < 0:
            raise ValueError("inner_epochs must be >= 0")
        if self.sampler == "diffusion" and self.K < 2:
            raise ValueError("RL needs at least two sampler steps")

    @property
    def sampler(self) -> str:
        return "flow" if self.method in FLOW_METHODS else "diffusion"

    @property
    def batch(self) -> int:
        return self.group_size * self.n_groups

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Setup:
    """Sampler kernel plus the per-step weights the loss uses (in sampling order)."""

    kernel: object
    loss_w: np.ndarray
    ratio_w: np.ndarray
    profile: object = None


def build_setup(v: VariantConfig) -> Setup:
    if v.sampler == "flow":
        grid = build_flow_grid(v.flow_N, v.flow_shift)
        sig = flow_sigma(grid, v.flow_sigma_kind, v.flow_eta)
        native = native_flow_weights(grid, sig).w
        loss_w = flow_weights(grid, sig, FLOW_WEIGHT_MODE[v.method]).w
        return Setup(FlowKernel(grid, sig), loss_w=loss_w, ratio_w=native)
    base = build_train_schedule(v.T_train, v.beta_start, v.beta_end, v.beta_kind)
    sched = make_ddim_schedule(base, v.K, v.eta)
    if v.method == "pcpo-full":
        sched_t, profile, loss_weight = reengineer(sched, v.w_star)
        if np.max(np.abs(profile.w - profile.w_star)) > 1e-9:
            raise TrainingError("re-engineered weights are not constant")
        kernel = DDIMKernel(sched_t)
        return Setup(kernel, loss_w=np.full(sched.K, loss_weight), ratio_w=profile.w[::-1].copy(),
                     profile=profile)
    profile = native_weights(sched)
    w = profile.w[::-1].copy()
    return Setup(DDIMKernel(sched), loss_w=w, ratio_w=w, profile=profile)


@dataclass
class EpochMetrics:
    epoch: int
    reward_mean: float
    clip_frac: float
    clip_frac_first_step: float
    coverage: float
    spread: float
    max_taylor_gap: float
    steps_touched: list = field(default_factory=list)


def conditions_for(v: VariantConfig, dataset: ToyDataset) -> tuple[np.ndarray, np.ndarray]:
    groups = np.repeat(np.arange(v.n_groups), v.group_size)
    return groups % dataset.n_conditions, groups


def _predict_guided(params, x, t, c, beta):
    """Guided prediction plus the caches and weights needed to backpropagate it."""
    if beta == 1.0:
        out, cache = forward(params, x, t, c)
        return out, [(cache, 1.0)]
    null = np.full_like(np.asarray(c), params.arch.null_condition)
    u, cu = forward(params, x, t, null)
    if beta == 0.0:
        return u, [(cu, 1.0)]
    k, ck = forward(params, x, t, c)
    return (1.0 - beta) * u + beta * k, [(cu, 1.0 - beta), (ck, beta)]


def _step_subset(v: VariantConfig, K: int, rng) -> np.ndarray:
    if v.method != "timestep-subsample":
        return np.arange(K)
    n = math.ceil(K * v.subsample_fraction)
    return np.sort(rng.choice(K, size=n, replace=False))


def rl_epoch(v: VariantConfig, setup: Setup, dataset: ToyDataset, params: PolicyParams,
             opt: OptimizerState, epoch: int, seed: int, dump_dir=None):
    """Sample with the current policy as the old policy, then run the inner epochs."""
    old = params
    kernel = setup.kernel
    conds, groups = conditions_for(v, dataset)
    uses_logprob = v.method in ("ddpo-baseline", "log-rho", "timestep-subsample")
    roll = sample(kernel, plain(old, v.cfg_scale), conds, seed, (epoch,),
                  dtype=np.dtype(v.rollout_precision), store_logprob=False)
    if uses_logprob:
        lp_dtype = np.dtype(v.logprob_precision).type
        # sampling-time log-probs: old-policy mean in rollout precision, stored at logprob precision
        f = np.dtype(v.rollout_precision).type
        stored = np.empty((roll.B, roll.K))
        for k in range(roll.K):
            x = roll.states[:, k].astype(f)
            mean = kernel.mean(k, x, roll.preds[:, k].astype(f))
            stored[:, k] = gaussian_logpdf(roll.states[:, k + 1].astype(lp_dtype),
                                           mean.astype(lp_dtype), kernel.std(k))
        roll.logprobs = stored
    rewards = reward(roll.x0, conds, dataset, v.reward, **_reward_kw(v))
    roll.rewards = rewards
    adv = obj.normalize_advantages(rewards, groups)

    rng = trajectory_rng(seed, epoch, 0x5EED)
    clip_fracs, first_clip, gaps, touched = [], None, [0.0], []
    for ie in range(v.inner_epochs):
        perm = rng.permutation(roll.B)
        steps = _step_subset(v, roll.K, rng)
        touched.append(len(steps))
        for mb in np.array_split(perm, v.minibatches):
            grad, mask, gap = _minibatch_grad(v, setup, roll, adv, params, old, mb, steps)
            frac = float(mask.mean())
            clip_fracs.append(frac)
            if first_clip is None:
                first_clip = frac
            gaps.append(gap)
            if not np.all(np.isfinite(grad)):
                if dump_dir is not None:
                    save_checkpoint(params, f"{dump_dir}/diverged_epoch{epoch}.json")
                raise TrainingError(f"non-finite gradient at epoch {epoch}")
            params, opt = adam_step(params, grad, opt)
    metrics = EpochMetrics(
        epoch=epoch,
        reward_mean=float(np.mean(rewards)),
        clip_frac=float(np.mean(clip_fracs)) if clip_fracs else 0.0,
        clip_frac_first_step=0.0 if first_clip is None else first_clip,
        coverage=mode_coverage(roll.x0, dataset),
        spread=sample_spread(roll.x0, conds, dataset),
        max_taylor_gap=float(max(gaps)),
        steps_touched=touched,
    )
    return params, opt, metrics, roll


def _reward_kw(v):
    return {"tau": v.reward_tau} if v.reward == "mode" else {}


def _minibatch_grad(v, setup, roll, adv, params, old, mb, steps):
    kernel = setup.kernel
    n, s = len(mb), len(steps)
    d = roll.states.shape[-1]
    x = roll.states[mb][:, steps].reshape(n * s, d)
    t = np.tile(roll.net_t[steps], n)
    c = np.repeat(roll.conds[mb], s)
    A = adv[mb]
    noise = roll.noises[mb][:, steps]
    cur, caches = _predict_guided(params, x, t, c, v.cfg_scale)
    cur = cur.reshape(n, s, d)

    if v.method in ("ddpo-baseline", "log-rho", "timestep-subsample"):
        x_next = roll.states[mb][:, steps + 1]
        slope = np.array([kernel.mean_slope(k) for k in steps])
        std = np.array([kernel.std(k) for k in steps])
        mean = np.stack([kernel.mean(k, roll.states[mb][:, k], cur[:, i]) for i, k in enumerate(steps)], 1)
        logp = np.stack([gaussian_logpdf(x_next[:, i], mean[:, i], std[i]) for i in range(s)], 1)
        log_rho = logp - roll.logprobs[mb][:, steps]
        rho = np.exp(log_rho)
        x_arg = log_rho if v.method == "log-rho" else rho - 1.0
        active = obj.hinge_active(x_arg, A[:, None], v.xi)
        scale = -A[:, None] * active * (1.0 if v.method == "log-rho" else rho)
        dlogp = (slope / std**2)[None, :, None] * (x_next - mean)
        upstream = scale[..., None] * dlogp
        gap = float(np.max(obj.taylor_gap(rho))) if rho.size else 0.0
    else:
        old_pred = _predict_guided(old, x, t, c, v.cfg_scale)[0].reshape(n, s, d)
        rep = obj.eps_matching_loss(cur, old_pred, noise, setup.loss_w[steps][None, :], A, v.xi)
        active = ~rep.clip_mask
        upstream = rep.grad_wrt_eps_theta
        true_log_rho = obj.log_rho_diffusion(cur, old_pred, noise, setup.ratio_w[steps][None, :])
        gap = float(np.max(obj.taylor_gap(np.exp(true_log_rho))))

    flat_up = upstream.reshape(n * s, d) / n
    grad = np.zeros(params.n_params)
    for cache, weight in caches:
        grad += backward(params, cache, weight * flat_up)
    return grad, ~active, gap


@dataclass
class RunResult:
    variant: VariantConfig
    seed: int
    metrics: list
    params: PolicyParams

    def rewards(self) -> np.ndarray:
        return np.array([m.reward_mean for m in self.metrics])


def finetune(v: VariantConfig, dataset: ToyDataset, base: PolicyParams, epochs: int, seed: int,
             callback=None) -> RunResult:
    setup = build_setup(v)
    params = base.copy()
    opt = OptimizerState.zeros_like(params, lr=v.lr)
    metrics = []
    for epoch in range(epochs):
        params, opt, m, _ = rl_epoch(v, setup, dataset, params, opt, epoch, seed)
        metrics.append(m)
        if callback is not None:
            callback(m)
    return RunResult(v, seed, metrics, params)


def with_method(v: VariantConfig, method: str) -> VariantConfig:
    return replace(v, method=method)
