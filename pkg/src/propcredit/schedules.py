"""DDIM schedules, per-step credit coefficients and the constant-weight variance solver.

A selected DDIM step k sits at training index ``steps[k]``; its predecessor is the
previous selected index, or training index 0 for the lowest selected step (or the
``alpha_bar = 1`` boundary when the lowest selected step is index 0 itself).
All arrays are float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class ScheduleError(ValueError):
    """Invalid schedule parameters or a broken schedule invariant."""


class SolverError(ScheduleError):
    """No admissible variance exists for the requested constant weight."""

    def __init__(self, step: int, w_star: float, reason: str):
        self.step = step
        self.w_star = w_star
        super().__init__(f"step {step}: no admissible sigma for w*={w_star!r} ({reason})")


@dataclass(frozen=True)
class TrainSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T_train(self) -> int:
        return len(self.beta)


@dataclass(frozen=True)
class DiffusionSchedule:
    base: TrainSchedule
    steps: np.ndarray
    eta: float
    sigma: np.ndarray
    rl: bool = True
    alpha_bar_t: np.ndarray = field(init=False, repr=False)
    alpha_bar_prev: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        ab = self.base.alpha_bar
        steps = np.asarray(self.steps, dtype=np.int64)
        prev = np.empty(len(steps))
        prev[1:] = ab[steps[:-1]]
        prev[0] = 1.0 if steps[0] == 0 else ab[0]
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=np.float64))
        object.__setattr__(self, "alpha_bar_t", ab[steps])
        object.__setattr__(self, "alpha_bar_prev", prev)
        _check_diffusion_schedule(self)

    @property
    def K(self) -> int:
        return len(self.steps)

    @property
    def alpha_t(self) -> np.ndarray:
        """Step-to-step ratio alpha_bar_t / alpha_bar_prev over the selected subset."""
        return self.alpha_bar_t / self.alpha_bar_prev

    def with_sigma(self, sigma: np.ndarray) -> DiffusionSchedule:
        return replace(self, sigma=np.asarray(sigma, dtype=np.float64))


@dataclass(frozen=True)
class CreditProfile:
    w: np.ndarray
    C: np.ndarray
    w_star: float | None = None
    sigma_tilde: np.ndarray | None = None

    @property
    def reengineered(self) -> bool:
        return self.sigma_tilde is not None


def build_train_schedule(
    T_train: int = 1000,
    beta_start: float = 8.5e-4,
    beta_end: float = 1.2e-2,
    kind: str = "scaled-linear",
) -> TrainSchedule:
    if T_train < 2:
        raise ScheduleError(f"T_train must be >= 2, got {T_train}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T_train)
    elif kind == "scaled-linear":
        beta = np.linspace(beta_start**0.5, beta_end**0.5, T_train) ** 2
    else:
        raise ScheduleError(f"unknown beta schedule kind {kind!r}")
    return train_schedule_from_betas(beta)


def train_schedule_from_betas(beta) -> TrainSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or len(beta) < 1:
        raise ScheduleError("beta must be a non-empty vector")
    if np.any(~np.isfinite(beta)) or np.any(beta <= 0.0) or np.any(beta >= 1.0):
        raise ScheduleError("every beta must lie strictly inside (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if np.any(np.diff(alpha_bar) >= 0.0) or alpha_bar[-1] <= 0.0:
        raise ScheduleError("alpha_bar is not strictly decreasing inside (0, 1)")
    return TrainSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def select_steps(T_train: int, K: int) -> np.ndarray:
    """K evenly spaced indices ending at T_train - 1 (identity when K == T_train)."""
    if not 1 <= K <= T_train:
        raise ScheduleError(f"need 1 <= K <= T_train, got K={K}, T_train={T_train}")
    return (np.arange(1, K + 1, dtype=np.int64) * T_train) // K - 1


def ddim_sigma(alpha_bar_t, alpha_bar_prev, eta: float) -> np.ndarray:
    ab_t = np.asarray(alpha_bar_t, dtype=np.float64)
    ab_p = np.asarray(alpha_bar_prev, dtype=np.float64)
    return eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p)


def make_ddim_schedule(
    base: TrainSchedule, K: int = 50, eta: float = 1.0, rl: bool = True
) -> DiffusionSchedule:
    if eta < 0.0:
        raise ScheduleError(f"eta must be >= 0, got {eta}")
    if rl and eta == 0.0:
        raise ScheduleError("eta = 0 gives a zero-variance policy; density ratios are undefined")
    steps = select_steps(base.T_train, K)
    ab = base.alpha_bar
    prev = np.empty(K)
    prev[1:] = ab[steps[:-1]]
    prev[0] = 1.0 if steps[0] == 0 else ab[0]
    sigma = ddim_sigma(ab[steps], prev, eta)
    return DiffusionSchedule(base=base, steps=steps, eta=float(eta), sigma=sigma, rl=rl)


def default_schedule(K: int = 50, eta: float = 1.0) -> DiffusionSchedule:
    return make_ddim_schedule(build_train_schedule(), K=K, eta=eta)


def _check_diffusion_schedule(s: DiffusionSchedule) -> None:
    if s.steps.ndim != 1 or len(s.steps) == 0:
        raise ScheduleError("steps must be a non-empty vector")
    if np.any(np.diff(s.steps) <= 0) or s.steps[0] < 0 or s.steps[-1] >= s.base.T_train:
        raise ScheduleError("steps must be strictly increasing training indices")
    if s.sigma.shape != s.steps.shape:
        raise ScheduleError("sigma must have one entry per selected step")
    if np.any(~np.isfinite(s.sigma)) or np.any(s.sigma < 0.0):
        raise ScheduleError("sigma must be finite and non-negative")
    if s.rl and np.any(s.sigma <= 0.0):
        bad = int(np.flatnonzero(s.sigma <= 0.0)[0])
        raise ScheduleError(f"sigma[{bad}] = 0 in an RL schedule")
    if np.any(s.sigma**2 >= 1.0 - s.alpha_bar_prev) and s.rl:
        bad = int(np.flatnonzero(s.sigma**2 >= 1.0 - s.alpha_bar_prev)[0])
        raise ScheduleError(f"sigma[{bad}]^2 >= 1 - alpha_bar_prev")


def _ab(schedule: DiffusionSchedule):
    """(a, b) per step: a = sqrt(1-ab_t)/sqrt(alpha_t), b = 1 - ab_prev."""
    a = np.sqrt(1.0 - schedule.alpha_bar_t) / np.sqrt(schedule.alpha_t)
    b = 1.0 - schedule.alpha_bar_prev
    return a, b


def credit_coefficient(schedule: DiffusionSchedule, k: int) -> float:
    ab_t = schedule.alpha_bar_t[k]
    ab_p = schedule.alpha_bar_prev[k]
    sig = schedule.sigma[k]
    radicand = 1.0 - ab_p - sig * sig
    if radicand < 0.0:
        raise ScheduleError(f"step {k}: negative radicand 1 - alpha_bar_prev - sigma^2 = {radicand}")
    c = np.sqrt(1.0 - ab_t) / np.sqrt(ab_t / ab_p) - np.sqrt(radicand)
    if not c > 0.0:
        raise ScheduleError(f"step {k}: credit coefficient C = {c} is not positive")
    return float(c)


def credit_coefficients(schedule: DiffusionSchedule) -> np.ndarray:
    return np.array([credit_coefficient(schedule, k) for k in range(schedule.K)])


def native_weights(schedule: DiffusionSchedule) -> CreditProfile:
    C = credit_coefficients(schedule)
    return CreditProfile(w=C / schedule.sigma, C=C)


def target_weight(profile: CreditProfile) -> float:
    return float(np.mean(profile.w))


def admissible_sigma_roots(a: float, b: float, w_star: float) -> list[float]:
    """Positive roots of (1+w^2) s^2 - 2 a w s + (a^2 - b) with s^2 < b and a - w s > 0."""
    qa = 1.0 + w_star * w_star
    disc = b * qa - a * a  # (a w)^2 - qa (a^2 - b)
    if disc < 0.0:
        # a double root rounds either way; anything beyond rounding is infeasible
        if disc < -1e-13 * b * qa:
            return []
        disc = 0.0
    sq = np.sqrt(disc)
    big = (a * w_star + sq) / qa
    roots = [big]
    if big != 0.0:
        roots.append((a * a - b) / (qa * big))  # product of roots; avoids cancellation
    out = []
    for s in roots:
        # screen before polishing so a spurious root of the squared equation
        # cannot be pulled onto the genuine one
        if not (s > 0.0 and s * s < b and a - w_star * s > 0.0):
            continue
        s = _newton_polish(a, b, w_star, s)
        if s > 0.0 and s * s < b and a - w_star * s > 0.0:
            out.append(float(s))
    return sorted(set(out))


def _newton_polish(a, b, w_star, s, iters=3):
    # f(s) = a - sqrt(b - s^2) - w s; keep a step only if it shrinks |f|
    def f(x):
        return a - np.sqrt(b - x * x) - w_star * x

    if not (s > 0.0 and s * s < b):
        return s
    fs = f(s)
    for _ in range(iters):
        df = s / np.sqrt(b - s * s) - w_star
        if df == 0.0 or fs == 0.0:
            break
        s_new = s - fs / df
        if not (s_new > 0.0 and s_new * s_new < b):
            break
        f_new = f(s_new)
        if abs(f_new) >= abs(fs):
            break
        s, fs = s_new, f_new
    return s


def solve_constant_sigma(schedule: DiffusionSchedule, w_star: float, tol: float = 1e-9) -> CreditProfile:
    """Per-step variance that makes C(sigma)/sigma equal ``w_star`` at every step."""
    if not w_star > 0.0:
        raise ScheduleError(f"w_star must be positive, got {w_star}")
    a, b = _ab(schedule)
    sigma_tilde = np.empty(schedule.K)
    for k in range(schedule.K):
        roots = admissible_sigma_roots(float(a[k]), float(b[k]), w_star)
        if not roots:
            reason = "negative discriminant" if b[k] * (1 + w_star**2) < a[k] ** 2 else "roots inadmissible"
            raise SolverError(k, w_star, reason)
        sigma_tilde[k] = min(roots, key=lambda s: abs(s - schedule.sigma[k]))
    reeng = schedule.with_sigma(sigma_tilde)
    C = credit_coefficients(reeng)
    w = C / sigma_tilde
    err = np.abs(w - w_star)
    if np.any(err > tol):
        k = int(np.argmax(err))
        raise SolverError(k, w_star, f"post-condition |w - w*| = {err[k]:.3g} exceeds {tol}")
    return CreditProfile(w=w, C=C, w_star=float(w_star), sigma_tilde=sigma_tilde)


def min_feasible_weight(schedule: DiffusionSchedule) -> float:
    """Smallest constant weight every step can reach.

    C(s)/s over s in (0, sqrt(b)) bottoms out at sqrt(a^2/b - 1), so a constant
    weight below the largest of these per-step minima has no admissible sigma.
    With eta = 1 the DDIM sigma sits exactly at each step's minimum.
    """
    a, b = _ab(schedule)
    return float(np.max(np.sqrt(a * a / b - 1.0)))


def reengineer(schedule: DiffusionSchedule, w_star: float | None = None):
    """Constant-weight schedule plus the loss weight matched to the native mean.

    Without ``w_star`` the solver targets the mean native weight when every step
    can reach it, otherwise the smallest feasible constant.  Returns
    ``(schedule_with_sigma_tilde, profile, loss_weight)``.
    """
    loss_weight = target_weight(native_weights(schedule))
    if w_star is None:
        w_star = max(loss_weight, min_feasible_weight(schedule))
    profile = solve_constant_sigma(schedule, w_star)
    return schedule.with_sigma(profile.sigma_tilde), profile, loss_weight
