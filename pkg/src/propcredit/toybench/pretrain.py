"""Supervised pretraining of the base policy (epsilon or velocity regression)."""

from __future__ import annotations

import logging

import numpy as np

from ..flow import build_flow_grid, flow_sigma
from ..mlp import Architecture, OptimizerState, PolicyParams, adam_step, backward, forward, init_params
from ..sampler import DDIMKernel, FlowKernel, Guidance, sample, trajectory_rng
from ..schedules import TrainSchedule, build_train_schedule, make_ddim_schedule
from .data import ToyDataset

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


def pretrain(
    dataset: ToyDataset,
    target: str | TrainSchedule,
    steps: int = 4000,
    batch: int = 512,
    lr: float = 2e-3,
    p_uncond: float = 0.2,
    seed: int = 0,
    arch: Architecture | None = None,
):
    """Fit a base policy.  ``target`` is a TrainSchedule (epsilon prediction) or ``"flow"``."""
    if arch is None:
        arch = Architecture(data_dim=dataset.means.shape[1], n_conditions=dataset.n_conditions)
    params = init_params(arch, seed)
    state = OptimizerState.zeros_like(params, lr=lr)
    rng = trajectory_rng(seed, 0xDA7A)
    d = arch.data_dim
    for step in range(steps):
        cond = rng.integers(0, dataset.n_conditions, size=batch)
        drop = rng.random(batch) < p_uncond
        x0, _ = dataset.sample(batch, rng, cond)
        cond = np.where(drop, dataset.null_condition, cond)
        noise = rng.standard_normal((batch, d))
        if target == "flow":
            t = rng.random(batch)
            z = (1.0 - t)[:, None] * x0 + t[:, None] * noise
            y = noise - x0
            t_in = t
        else:
            idx = rng.integers(0, target.T_train, size=batch)
            ab = target.alpha_bar[idx][:, None]
            z = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
            y = noise
            t_in = idx / target.T_train
        # cosine decay keeps the final iterate stable
        state.lr = lr * 0.5 * (1.0 + np.cos(np.pi * step / steps))
        out, cache = forward(params, z, t_in, cond)
        resid = out - y
        loss = float(np.mean(np.sum(resid * resid, axis=1)))
        if not np.isfinite(loss):
            raise DivergenceError(f"pretraining loss diverged at step {step}")
        grad = backward(params, cache, 2.0 * resid / batch)
        params, state = adam_step(params, grad, state)
        if step % 1000 == 0:
            log.debug("pretrain step %d loss %.4f", step, loss)
    return params


def deterministic_samples(params: PolicyParams, dataset: ToyDataset, sampler: str, n: int = 1024,
                          seed: int = 0) -> np.ndarray:
    """sigma = 0 samples (DDIM eta = 0, or the flow ODE) spread evenly over conditions."""
    conds = np.arange(n) % dataset.n_conditions
    if sampler == "flow":
        g = build_flow_grid(16, 3.0)
        kernel = FlowKernel(g, flow_sigma(g, "constant", 1.0), ode=True)
    else:
        kernel = DDIMKernel(make_ddim_schedule(build_train_schedule(), 50, 0.0, rl=False))
    return sample(kernel, Guidance(params), conds, seed, (0xE7A1,)).x0
