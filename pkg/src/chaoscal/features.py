"""Hand-designed moment summaries, parameter-space distances and contrastive pair selection."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .dynamics import Trajectory, validate_trajectory

APE_EPS = 1e-6


def _states(Z) -> np.ndarray:
    return Z.states if isinstance(Z, Trajectory) else np.asarray(Z, dtype=float)


def l96_moments(Z, K: int, J: int) -> np.ndarray:
    """``[<X>, <Ybar>, <X^2>, <X Ybar>, <Ybar^2>]`` time averages, length ``5K``.

    ``Ybar`` is the mean of the ``J`` fast variables attached to each slow index.
    Accepts extra leading batch axes: ``(..., T, K(J+1))``.
    """
    z = _states(Z)
    if z.shape[-1] != K * (J + 1):
        raise ValueError(f"trajectory has {z.shape[-1]} channels, expected K(J+1) = {K * (J + 1)}")
    X = z[..., :K]
    Ybar = z[..., K:].reshape(z.shape[:-1] + (K, J)).mean(axis=-1)
    blocks = [X, Ybar, X * X, X * Ybar, Ybar * Ybar]
    return np.concatenate([blk.mean(axis=-2) for blk in blocks], axis=-1)


def kse_moments(V) -> np.ndarray:
    """Per-channel time average."""
    return _states(V).mean(axis=-2)


def block_moment_variance(block_moments) -> np.ndarray:
    """Population variance (``ddof=0``) across per-block moment vectors."""
    m = np.asarray(block_moments, dtype=float)
    return m.var(axis=0)


def moment_variance(simulate: Callable[[int], np.ndarray], moments: Callable[[np.ndarray], np.ndarray],
                    block_len: int, n_blocks: int = 20) -> np.ndarray:
    """Estimate ``Var[m(Z)_j]`` for trajectories of length ``block_len``.

    ``simulate(n_rows)`` returns one long trajectory; it is cut into ``n_blocks``
    consecutive blocks, degenerate or non-finite blocks are dropped and the
    empirical variance of the remaining per-block moment vectors is returned.
    """
    if n_blocks < 2:
        raise ValueError("need at least two blocks to estimate a variance")
    long = _states(simulate(block_len * n_blocks))
    kept = []
    for b in range(n_blocks):
        blk = long[b * block_len : (b + 1) * block_len]
        if blk.shape[0] == block_len and validate_trajectory(blk).accepted:
            kept.append(moments(blk))
    if not kept:
        raise ValueError("every block of the variance simulation was rejected")
    return block_moment_variance(kept)


def crop(Z, length: int, rng: np.random.Generator):
    """Contiguous window of ``length`` rows at a uniformly drawn start index."""
    traj = Z if isinstance(Z, Trajectory) else None
    z = _states(Z)
    T = z.shape[-2]
    if length > T:
        raise ValueError(f"crop length {length} exceeds trajectory length {T}")
    start = int(rng.integers(T - length + 1))
    window = z[..., start : start + length, :]
    if traj is not None:
        return traj.with_states(window.copy(), crop_start=start)
    return window


def ape(a, b, eps: float = APE_EPS) -> float:
    """``APE(b; a) = sum_l |a_l - b_l| / (|a_l| + eps)``: error of ``b`` relative to ``a``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    return float(np.sum(np.abs(a - b) / (np.abs(a) + eps)))


def delta(a, b, eps: float = APE_EPS) -> float:
    """Symmetrised APE distance ``(APE(a; b) + APE(b; a)) / 2``."""
    return 0.5 * (ape(a, b, eps) + ape(b, a, eps))


def delta_matrix(params, eps: float = APE_EPS) -> np.ndarray:
    p = np.asarray(params, dtype=float)
    diff = np.abs(p[:, None, :] - p[None, :, :])
    denom = np.abs(p) + eps
    rel_i = (diff / denom[:, None, :]).sum(-1)
    return 0.5 * (rel_i + rel_i.T)


def nearest_neighbors(params, eps: float = APE_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest neighbour (excluding self) under ``delta``; ties go to the lowest index."""
    p = np.asarray(params, dtype=float)
    if p.shape[0] < 2:
        raise ValueError("need at least two samples to find neighbours")
    D = delta_matrix(p, eps)
    np.fill_diagonal(D, np.inf)
    idx = np.argmin(D, axis=1)
    return idx, D[np.arange(len(p)), idx]


@dataclass(frozen=True)
class PositivePairRule:
    threshold: float = 0.4
    perturb_prob: float = 0.5
    perturb_std: float = 0.04
    crop_len: int = 250

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be > 0")
        if not 0.0 <= self.perturb_prob <= 1.0:
            raise ValueError("perturb_prob must lie in [0, 1]")
        if self.perturb_std < 0:
            raise ValueError("perturb_std must be >= 0")

    @staticmethod
    def threshold_for(n: int) -> float:
        return 0.45 if n <= 500 else 0.4


class PositivePair(NamedTuple):
    crop: np.ndarray
    params: np.ndarray
    source: str  # "neighbor" or "augment"
    index: int


def select_positive(i: int, params, trajectories, rule: PositivePairRule, rng: np.random.Generator,
                    neighbors: tuple[np.ndarray, np.ndarray] | None = None, eps: float = APE_EPS) -> PositivePair:
    """Pick the positive partner of sample ``i``.

    The nearest neighbour in parameter space is used when its ``delta`` is within
    ``rule.threshold``; a random crop of it is returned.  Otherwise the positive
    trajectory is a fresh crop of sample ``i`` and the positive parameter is
    ``phi_i * (1 + xi)``, ``xi ~ N(0, perturb_std^2)`` per component, applied with
    probability ``perturb_prob`` (else ``phi_i`` itself).
    """
    params = np.asarray(params, dtype=float)
    n = params.shape[0]
    if n < 2:
        raise ValueError("positive selection needs a dataset of at least two samples")
    if neighbors is None:
        D = np.array([delta(params[i], params[j], eps) if j != i else np.inf for j in range(n)])
        j = int(np.argmin(D))
        dist = D[j]
    else:
        j, dist = int(neighbors[0][i]), float(neighbors[1][i])
    if dist <= rule.threshold:
        return PositivePair(crop(trajectories[j], rule.crop_len, rng), params[j].copy(), "neighbor", j)
    window = crop(trajectories[i], rule.crop_len, rng)
    phi = params[i].copy()
    if rng.random() < rule.perturb_prob:
        phi = phi + rng.normal(0.0, rule.perturb_std, size=phi.shape) * phi
    return PositivePair(window, phi, "augment", i)
