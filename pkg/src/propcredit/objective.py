"""Surrogate losses, log-ratio decompositions and clipping metrics.

Everything here is vectorised numpy; per-step quantities carry the step axis
second to last (``(..., steps, dim)`` for vectors, ``(..., steps)`` for scalars).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ADV_EPS = 1e-8


def normalize_advantages(rewards, group_ids=None) -> np.ndarray:
    """Group-relative advantages ``(r - mean) / (std + 1e-8)`` (population std).

    Singleton groups get zero advantage.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ValueError("cannot normalize an empty reward group")
    if group_ids is None:
        group_ids = np.zeros(r.shape, dtype=np.int64)
    group_ids = np.asarray(group_ids)
    if group_ids.shape != r.shape:
        raise ValueError("group_ids must match rewards")
    out = np.zeros_like(r)
    for g in np.unique(group_ids):
        m = group_ids == g
        if m.sum() < 2:
            continue
        rg = r[m]
        out[m] = (rg - rg.mean()) / (rg.std() + ADV_EPS)
    return out


def ppo_clip_term(rho, A, xi):
    rho = np.asarray(rho, dtype=np.float64)
    return np.maximum(-rho * A, -np.clip(rho, 1.0 - xi, 1.0 + xi) * A)


def hinge_term(rho, A, xi):
    return np.maximum(0.0, xi * np.abs(A) - A * (np.asarray(rho, dtype=np.float64) - 1.0))


def log_hinge_term(log_rho, A, xi):
    return np.maximum(0.0, xi * np.abs(A) - A * np.asarray(log_rho, dtype=np.float64))


def hinge_active(x, A, xi):
    """True where ``max(0, xi|A| - A x)`` is strictly positive (gradient flows)."""
    return xi * np.abs(A) - A * np.asarray(x) > 0.0


def ppo_clip_grad_rho(rho, A, xi):
    """d/d(rho) of the clipped surrogate away from its kinks."""
    rho = np.asarray(rho, dtype=np.float64)
    A = np.broadcast_to(np.asarray(A, dtype=np.float64), rho.shape)
    unclipped = -rho * A
    clipped = -np.clip(rho, 1.0 - xi, 1.0 + xi) * A
    inside = (rho > 1.0 - xi) & (rho < 1.0 + xi)
    # the max picks the unclipped branch, or both branches coincide inside the band
    picks_unclipped = (unclipped > clipped) | inside
    return np.where(picks_unclipped, -A, 0.0)


def hinge_grad_rho(rho, A, xi):
    A = np.asarray(A, dtype=np.float64)
    return np.where(hinge_active(np.asarray(rho) - 1.0, A, xi), -A, 0.0)


def _check_dims(a, b, c):
    if not (np.shape(a) == np.shape(b) == np.shape(c)):
        raise ValueError(
            f"prediction/noise shapes differ: {np.shape(a)}, {np.shape(b)}, {np.shape(c)}"
        )


def matching_distance(pred_theta, pred_old, noise, w):
    """D = w (p_theta - p_old) . noise + 0.5 ||w (p_theta - p_old)||^2 over the last axis."""
    _check_dims(pred_theta, pred_old, noise)
    w = np.asarray(w, dtype=np.float64)[..., None]
    diff = w * (np.asarray(pred_theta) - np.asarray(pred_old))
    return np.sum(diff * noise, axis=-1) + 0.5 * np.sum(diff * diff, axis=-1)


def log_rho_diffusion(eps_theta, eps_old, noise_old, w):
    """Per-step log policy ratio of a DDIM step, from noise predictions."""
    return -matching_distance(eps_theta, eps_old, noise_old, w)


def log_rho_flow(u_theta, u_old, noise_old, w):
    """Per-step log policy ratio of an Euler-Maruyama flow step, from velocities."""
    return -matching_distance(u_theta, u_old, noise_old, w)


@dataclass
class StepRatioInputs:
    eps_theta: np.ndarray
    eps_old: np.ndarray
    noise_old: np.ndarray
    w: float
    clip_xi: float = 0.1

    def __post_init__(self):
        _check_dims(self.eps_theta, self.eps_old, self.noise_old)
        if not self.w > 0.0:
            raise ValueError("step weight must be positive")
        if not 0.0 < self.clip_xi < 1.0:
            raise ValueError("clip threshold must lie in (0, 1)")


@dataclass
class LossReport:
    loss: np.ndarray
    grad_wrt_eps_theta: np.ndarray
    clip_mask: np.ndarray
    active_fraction: np.ndarray


def eps_matching_loss(eps_theta, eps_old, noise_old, w, A, xi) -> LossReport:
    """Sum over steps of max(0, xi|A| + A D_t), with its gradient w.r.t. eps_theta.

    Shapes: predictions/noise ``(..., T, d)``, ``w`` broadcastable to ``(..., T)``,
    ``A`` broadcastable to the leading batch shape.
    """
    eps_theta = np.asarray(eps_theta, dtype=np.float64)
    eps_old = np.asarray(eps_old, dtype=np.float64)
    noise_old = np.asarray(noise_old, dtype=np.float64)
    _check_dims(eps_theta, eps_old, noise_old)
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), eps_theta.shape[:-1])
    A = np.asarray(A, dtype=np.float64)[..., None]
    D = matching_distance(eps_theta, eps_old, noise_old, w)
    terms = np.maximum(0.0, xi * np.abs(A) + A * D)
    active = xi * np.abs(A) + A * D > 0.0
    wv = w[..., None]
    grad = (A * active)[..., None] * (wv * noise_old + wv * wv * (eps_theta - eps_old))
    return LossReport(
        loss=terms.sum(axis=-1),
        grad_wrt_eps_theta=grad,
        clip_mask=~active,
        active_fraction=active.mean(axis=-1),
    )


def step_inputs_loss(steps: list[StepRatioInputs], A: float) -> LossReport:
    """Convenience wrapper over a list of per-step inputs sharing one threshold."""
    xis = {s.clip_xi for s in steps}
    if len(xis) != 1:
        raise ValueError("all steps must share one clip threshold")
    return eps_matching_loss(
        np.stack([s.eps_theta for s in steps]),
        np.stack([s.eps_old for s in steps]),
        np.stack([s.noise_old for s in steps]),
        np.array([s.w for s in steps]),
        A,
        xis.pop(),
    )


def clip_fraction(reports) -> float:
    """Share of (trajectory, step) hinge terms that are inactive."""
    masks = [np.asarray(r.clip_mask if isinstance(r, LossReport) else r, dtype=bool) for r in reports]
    if not masks:
        return 0.0
    return float(np.mean(np.concatenate([m.ravel() for m in masks])))


def taylor_gap(rho):
    """Relative error of log(rho) ~ rho - 1."""
    rho = np.asarray(rho, dtype=np.float64)
    x = rho - 1.0
    return np.abs(np.log(rho) - x) / np.maximum(np.abs(x), 1e-12)
