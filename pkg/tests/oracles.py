"""Independent reference computations used as test oracles.

These deliberately avoid the package's closed forms: transition densities are
built from the sampler means directly, and the sigma solver is checked by
bisection on C(sigma)/sigma.
"""

from __future__ import annotations

import math

import numpy as np


def log_normal(x, mean, std):
    d = x.shape[-1]
    return -0.5 * np.sum(((x - mean) / std) ** 2, axis=-1) - d * math.log(std) - 0.5 * d * math.log(2 * math.pi)


def ddim_mean(x, eps, ab_t, ab_prev, sigma):
    x0 = (x - math.sqrt(1 - ab_t) * eps) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev - sigma**2) * eps


def ddim_log_ratio(x, eps_theta, eps_old, noise, ab_t, ab_prev, sigma):
    """log p_theta(x_prev|x) - log p_old(x_prev|x) with x_prev drawn by the old policy."""
    mu_old = ddim_mean(x, eps_old, ab_t, ab_prev, sigma)
    x_prev = mu_old + sigma * noise
    mu_theta = ddim_mean(x, eps_theta, ab_t, ab_prev, sigma)
    return log_normal(x_prev, mu_theta, sigma) - log_normal(x_prev, mu_old, sigma)


def flow_mean(z, u, t, dt):
    z0 = z - u * t
    return z - u * dt - 0.5 * (z - (1 - t) * z0) * dt


def flow_log_ratio(z, u_theta, u_old, noise, t, dt, sigma):
    std = sigma * math.sqrt(dt)
    mu_old = flow_mean(z, u_old, t, dt)
    z_next = mu_old + std * noise
    return log_normal(z_next, flow_mean(z, u_theta, t, dt), std) - log_normal(z_next, mu_old, std)


def weight_of_sigma(a, b, s):
    return (a - math.sqrt(b - s * s)) / s


def bisect_sigma(a, b, w_star, s_ref, iters=200):
    """Root of C(s)/s = w* on the monotone branch containing ``s_ref``.

    C(s)/s is convex-like with a single minimum at s_min = sqrt(b) * sqrt(1 - b/a^2);
    the branch is picked by which side of s_min the reference sigma lies on.
    """
    s_min = math.sqrt(b) * math.sqrt(max(0.0, 1.0 - b / (a * a)))
    lo, hi = (1e-300, s_min) if s_ref <= s_min else (s_min, math.sqrt(b) * (1 - 1e-16))
    g = lambda s: weight_of_sigma(a, b, s) - w_star
    glo = g(lo) if lo > 1e-300 else math.inf
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        if (gm > 0) == (glo > 0):
            lo, glo = mid, gm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def central_diff(f, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g
