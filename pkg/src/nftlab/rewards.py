"""Synthetic rewards on clean points.

Every reward maps a batch of points (n, d) to n values in [0, 1] and depends on
nothing but the points and its fixed parameters.
"""

from __future__ import annotations

import numpy as np

from .mixture import GaussianMixture


def indicator_reward(x0, target: int, mixture: GaussianMixture):
    """1 where component ``target`` has the largest responsibility at ``x0``.

    Ties go to the lowest component index (``argmax`` semantics).
    """
    if not 0 <= target < mixture.n_components:
        raise ValueError(f"mixture has no component {target}")
    resp_logits = mixture._log_weights() + mixture.component_log_marginals(np.atleast_2d(x0), 0.0)
    return (np.argmax(resp_logits, axis=-1) == target).astype(np.float64)


def radial_reward(x0, center, tau):
    if tau <= 0:
        raise ValueError("tau must be positive")
    d2 = np.sum((np.atleast_2d(x0) - np.asarray(center, dtype=np.float64)) ** 2, axis=-1)
    return np.exp(-d2 / tau)


def halfspace_reward(x0, normal, offset):
    normal = np.asarray(normal, dtype=np.float64)
    if not np.any(normal):
        raise ValueError("normal must be nonzero")
    return (np.atleast_2d(x0) @ normal >= offset).astype(np.float64)


def weighted_sum(rewards, weights):
    """Convex combination of reward callables; weights must sum to one."""
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError("weights must be nonnegative and sum to 1")
    return lambda x0: sum(w * r(x0) for w, r in zip(weights, rewards))


REWARD_KEYS = {
    "indicator": {"target"},
    "radial": {"center", "tau"},
    "halfspace": {"normal", "offset"},
    "sum": {"parts", "weights"},
}


def build_reward(spec: dict, mixture: GaussianMixture = None):
    """Reward callable ``r(x0)`` from a config mapping with a ``kind`` key.

    Parameters are checked here, so a bad spec fails before any run starts.
    """
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in REWARD_KEYS:
        raise ValueError(f"unknown reward kind {kind!r}; choose from {sorted(REWARD_KEYS)}")
    if set(spec) != REWARD_KEYS[kind]:
        raise ValueError(f"{kind} reward takes keys {sorted(REWARD_KEYS[kind])}, got {sorted(spec)}")
    if kind == "indicator":
        target = int(spec["target"])
        if mixture is None or not 0 <= target < mixture.n_components:
            raise ValueError(f"indicator target {target} is not a component of the data mixture")
        return lambda x0: indicator_reward(x0, target, mixture)
    if kind == "radial":
        center, tau = np.asarray(spec["center"], dtype=np.float64), float(spec["tau"])
        if tau <= 0:
            raise ValueError("tau must be positive")
        return lambda x0: radial_reward(x0, center, tau)
    if kind == "halfspace":
        normal, offset = np.asarray(spec["normal"], dtype=np.float64), float(spec["offset"])
        if not np.any(normal):
            raise ValueError("normal must be nonzero")
        return lambda x0: halfspace_reward(x0, normal, offset)
    parts = [build_reward(p, mixture) for p in spec["parts"]]
    return weighted_sum(parts, spec["weights"])
