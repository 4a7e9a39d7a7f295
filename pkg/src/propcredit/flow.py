"""Flow-matching time grids, SDE noise levels and per-step credit weights.

Grid points run from t=1 (noise) down to t=0 (data).  Step i integrates from
``t[i]`` to ``t[i+1]`` with ``dt[i] = t[i] - t[i+1]`` and is evaluated at ``t[i]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class FlowError(ValueError):
    pass


@dataclass(frozen=True)
class FlowGrid:
    t: np.ndarray
    dt: np.ndarray
    shift: float

    @property
    def N(self) -> int:
        return len(self.dt)

    @property
    def t_steps(self) -> np.ndarray:
        """Evaluation time of each step (upper end of its interval)."""
        return self.t[:-1]


@dataclass(frozen=True)
class FlowSigma:
    kind: str
    eta: float
    sigma: np.ndarray
    t_eval: np.ndarray
    t_one_approx: float | None = None


@dataclass(frozen=True)
class FlowCredit:
    w: np.ndarray
    mode: str
    zeta: float | None = None


def shift_time(u, shift: float):
    u = np.asarray(u, dtype=np.float64)
    return shift * u / (1.0 + (shift - 1.0) * u)


def build_flow_grid(N: int = 16, shift: float = 3.0) -> FlowGrid:
    if N < 1:
        raise FlowError(f"N must be >= 1, got {N}")
    if not shift >= 1.0:
        raise FlowError(f"shift must be >= 1, got {shift}")
    u = np.linspace(1.0, 0.0, N + 1)
    t = shift_time(u, shift)
    t[0], t[-1] = 1.0, 0.0
    dt = t[:-1] - t[1:]
    if np.any(dt <= 0.0):
        raise FlowError("shifted grid is not strictly decreasing")
    return FlowGrid(t=t, dt=dt, shift=float(shift))


def flow_sigma(grid: FlowGrid, kind: str = "constant", eta: float = 0.3) -> FlowSigma:
    if not eta > 0.0:
        raise FlowError(f"eta must be positive, got {eta}")
    t_eval = grid.t_steps.copy()
    if kind == "constant":
        return FlowSigma(kind=kind, eta=float(eta), sigma=np.full(grid.N, float(eta)), t_eval=t_eval)
    if kind != "flowgrpo":
        raise FlowError(f"unknown sigma kind {kind!r}")
    approx = None
    ones = np.flatnonzero(t_eval >= 1.0)
    if len(ones):
        if grid.N == 1:
            raise FlowError("flowgrpo sigma at t=1 needs a second grid point to approximate from")
        # sigma diverges at t=1; borrow the next grid point's value
        approx = float(grid.t[1])
        t_eval[ones] = approx
    sigma = eta * np.sqrt(t_eval / (1.0 - t_eval))
    if np.any(~np.isfinite(sigma)) or np.any(sigma <= 0.0):
        raise FlowError("flowgrpo sigma is not finite and positive on this grid")
    return FlowSigma(kind=kind, eta=float(eta), sigma=sigma, t_eval=t_eval, t_one_approx=approx)


def poly_factor(t):
    t = np.asarray(t, dtype=np.float64)
    return 1.0 + (1.0 - t) * t / 2.0


def native_flow_weights(grid: FlowGrid, sigma: FlowSigma) -> FlowCredit:
    w = np.sqrt(grid.dt) / sigma.sigma * poly_factor(grid.t_steps)
    return FlowCredit(w=w, mode="native")


def proportional_flow_weights(grid: FlowGrid, sigma: FlowSigma) -> FlowCredit:
    zeta = float(np.sum(native_flow_weights(grid, sigma).w))
    return FlowCredit(w=zeta * grid.dt, mode="proportional", zeta=zeta)


def uniform_flow_weights(grid: FlowGrid, sigma: FlowSigma) -> FlowCredit:
    total = float(np.sum(native_flow_weights(grid, sigma).w))
    return FlowCredit(w=np.full(grid.N, total / grid.N), mode="uniform-heuristic")


def flow_weights(grid: FlowGrid, sigma: FlowSigma, mode: str) -> FlowCredit:
    fn = {
        "native": native_flow_weights,
        "proportional": proportional_flow_weights,
        "uniform-heuristic": uniform_flow_weights,
    }.get(mode)
    if fn is None:
        raise FlowError(f"unknown weight mode {mode!r}")
    return fn(grid, sigma)


PRESETS = {
    "dancegrpo": dict(N=16, eta=0.3, kind="constant"),
    "flowgrpo": dict(N=10, eta=0.7, kind="flowgrpo"),
}
