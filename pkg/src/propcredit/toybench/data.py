"""2-D Gaussian-mixture data, analytic rewards and the mode-coverage metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ToyDataset:
    means: np.ndarray
    std: float
    weights: np.ndarray
    cond_components: tuple  # condition id -> tuple of component ids
    seed: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if len(self.means) < 2:
            raise ValueError("need at least two mixture components")
        if w.shape != (len(self.means),) or abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
            raise ValueError("mixture weights must be non-negative and sum to 1")
        for comps in self.cond_components:
            if not comps or any(not 0 <= m < len(self.means) for m in comps):
                raise ValueError(f"bad component subset {comps!r}")

    @property
    def n_components(self) -> int:
        return len(self.means)

    @property
    def n_conditions(self) -> int:
        return len(self.cond_components)

    @property
    def null_condition(self) -> int:
        return self.n_conditions

    def target(self, c) -> np.ndarray:
        """Reward target m_c: the first component of each condition's subset."""
        c = np.asarray(c)
        firsts = np.array([comps[0] for comps in self.cond_components])
        return self.means[firsts[c]]

    def sample(self, n: int, rng: np.random.Generator, cond=None):
        """Draw ``n`` points; ``cond`` (None = null) restricts the components."""
        comp = np.empty(n, dtype=np.int64)
        if cond is None:
            comp[:] = rng.choice(self.n_components, size=n, p=self.weights)
        else:
            cond = np.broadcast_to(np.asarray(cond), (n,))
            for c in np.unique(cond):
                m = cond == c
                if c == self.null_condition:
                    comp[m] = rng.choice(self.n_components, size=m.sum(), p=self.weights)
                    continue
                subset = np.array(self.cond_components[c])
                p = self.weights[subset] / self.weights[subset].sum()
                comp[m] = rng.choice(subset, size=m.sum(), p=p)
        x = self.means[comp] + self.std * rng.standard_normal((n, self.means.shape[1]))
        return x, comp


def ring_dataset(n_modes: int = 8, radius: float = 3.0, std: float = 0.2, seed: int = 0) -> ToyDataset:
    ang = 2.0 * np.pi * np.arange(n_modes) / n_modes
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return ToyDataset(
        means=means,
        std=std,
        weights=np.full(n_modes, 1.0 / n_modes),
        cond_components=tuple((m,) for m in range(n_modes)),
        seed=seed,
    )


def mode_reward(x0, c, dataset: ToyDataset, tau: float = 0.1) -> np.ndarray:
    d2 = np.sum((np.atleast_2d(x0) - dataset.target(c)) ** 2, axis=-1)
    return np.exp(-d2 / tau)


def halfplane_reward(x0, c, dataset: ToyDataset, sharpness: float = 4.0) -> np.ndarray:
    """Sigmoid of the signed offset from m_c along the ring's tangent at m_c."""
    m = dataset.target(c)
    tangent = np.stack([-m[..., 1], m[..., 0]], axis=-1)
    tangent = tangent / np.linalg.norm(tangent, axis=-1, keepdims=True)
    s = np.sum((np.atleast_2d(x0) - m) * tangent, axis=-1)
    return 1.0 / (1.0 + np.exp(-sharpness * s))


REWARDS = {"mode": mode_reward, "halfplane": halfplane_reward}


def reward(x0, c, dataset: ToyDataset, kind: str = "mode", **kw) -> np.ndarray:
    return REWARDS[kind](x0, c, dataset, **kw)


def mode_coverage(samples, dataset: ToyDataset, share: float = 0.5, max_dist: float = 1.0) -> float:
    """Fraction of components holding at least ``share`` of their expected sample share.

    Samples are assigned to the nearest mean; those farther than ``max_dist`` from
    every mean are not assigned.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    d2 = np.sum((x[:, None, :] - dataset.means[None, :, :]) ** 2, axis=-1)
    nearest = np.argmin(d2, axis=1)
    close = d2[np.arange(len(x)), nearest] <= max_dist**2
    counts = np.bincount(nearest[close], minlength=dataset.n_components)
    frac = counts / max(len(x), 1)
    return float(np.mean(frac >= share * dataset.weights))


def sample_spread(samples, conds, dataset: ToyDataset) -> float:
    """Mean distance of samples to their condition's target mode."""
    x = np.atleast_2d(samples)
    return float(np.mean(np.linalg.norm(x - dataset.target(conds), axis=-1)))
