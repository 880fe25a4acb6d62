"""Point-estimate and ensemble metrics, the affine embedding probe and objective heatmaps."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .features import APE_EPS

log = logging.getLogger(__name__)

MOMENT_CLIP = 100.0


def abs_pct_errors(estimates, truths, eps: float = APE_EPS) -> np.ndarray:
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truths, dtype=float)
    if est.shape != tru.shape:
        raise ValueError(f"estimate/truth shapes differ: {est.shape} vs {tru.shape}")
    return 100.0 * np.abs(est - tru) / (np.abs(tru) + eps)


def mape_mdape(estimates, truths, eps: float = APE_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Per-component mean and median absolute percentage error (in percent)."""
    err = np.atleast_2d(abs_pct_errors(estimates, truths, eps))
    return err.mean(axis=0), np.median(err, axis=0)


def crps_empirical(particles, truth: float) -> float:
    """``-(1/2M^2) sum |x_m - x_m'| + (1/M) sum |x_m - truth|`` for a 1-D ensemble.

    The pairwise sum uses the sorted identity
    ``sum_{m,m'} |x_m - x_m'| = 2 sum_i (2i - M - 1) x_(i)``.
    """
    x = np.sort(np.asarray(particles, dtype=float).ravel())
    M = x.size
    if M < 1:
        raise ValueError("CRPS needs at least one particle")
    i = np.arange(1, M + 1)
    pair = 2.0 * np.sum((2 * i - M - 1) * x)
    return float(-pair / (2.0 * M * M) + np.mean(np.abs(x - truth)))


def crps_per_component(particles, truth) -> np.ndarray:
    p = np.atleast_2d(np.asarray(particles, dtype=float))
    t = np.asarray(truth, dtype=float)
    return np.array([crps_empirical(p[:, j], t[j]) for j in range(p.shape[1])])


@dataclass
class EvalReport:
    method: str
    names: list[str]
    mape: list[float]
    mdape: list[float]
    crps: list[float] | None
    count: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, stem) -> None:
        with open(f"{stem}.json", "w") as fh:
            fh.write(self.to_json())
        with open(f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "component", "mape", "mdape", "crps", "count"])
            for j, name in enumerate(self.names):
                crps = "" if self.crps is None else repr(float(self.crps[j]))
                w.writerow([self.method, name, repr(float(self.mape[j])), repr(float(self.mdape[j])), crps, self.count])


def evaluate(method: str, names, estimates, truths, ensembles=None, eps: float = APE_EPS) -> EvalReport:
    mape, mdape = mape_mdape(estimates, truths, eps)
    crps = None
    if ensembles is not None:
        crps = np.mean([crps_per_component(ens, t) for ens, t in zip(ensembles, np.asarray(truths))], axis=0).tolist()
    return EvalReport(method, list(names), mape.tolist(), mdape.tolist(), crps, int(np.atleast_2d(truths).shape[0]))


@dataclass
class AffineProbe:
    weights: np.ndarray  # (p + 1, k), last row is the intercept
    r2: np.ndarray
    rank_deficient: bool

    def predict(self, embeddings) -> np.ndarray:
        e = np.atleast_2d(np.asarray(embeddings, dtype=float))
        return np.hstack([e, np.ones((e.shape[0], 1))]) @ self.weights


def r_squared(pred, truth) -> np.ndarray:
    pred = np.atleast_2d(pred)
    truth = np.atleast_2d(truth)
    ss_res = np.sum((truth - pred) ** 2, axis=0)
    ss_tot = np.sum((truth - truth.mean(axis=0)) ** 2, axis=0)
    return 1.0 - ss_res / np.where(ss_tot > 0, ss_tot, np.finfo(float).tiny)


def affine_probe(embeddings, params, test_embeddings=None, test_params=None) -> AffineProbe:
    """Least-squares affine map embeddings -> parameters; R^2 on the test split if given."""
    E = np.atleast_2d(np.asarray(embeddings, dtype=float))
    P = np.atleast_2d(np.asarray(params, dtype=float))
    n, p = E.shape
    if n <= p + 1:
        raise ValueError(f"affine probe needs more than {p + 1} samples, got {n}")
    A = np.hstack([E, np.ones((n, 1))])
    W, _, rank, _ = np.linalg.lstsq(A, P, rcond=None)
    deficient = rank < A.shape[1]
    if deficient:
        log.warning("affine probe design is rank deficient (%d < %d); using pseudo-inverse", rank, A.shape[1])
        W = np.linalg.pinv(A) @ P
    probe = AffineProbe(W, np.zeros(P.shape[1]), bool(deficient))
    if test_embeddings is None:
        probe.r2 = r_squared(probe.predict(E), P)
    else:
        probe.r2 = r_squared(probe.predict(test_embeddings), np.atleast_2d(test_params))
    return probe


@dataclass
class Heatmap:
    pair: tuple[int, int]
    axis1: np.ndarray
    axis2: np.ndarray
    values: np.ndarray  # (len(axis1), len(axis2)), clipped
    clipped: np.ndarray
    argmin: tuple[int, int]
    truth_cell: tuple[int, int]

    def write_csv(self, path, names: Sequence[str] | None = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["p1", "p2", "value", "clipped"])
            for a, x in enumerate(self.axis1):
                for b, yv in enumerate(self.axis2):
                    w.writerow([repr(float(x)), repr(float(yv)), repr(float(self.values[a, b])),
                                str(bool(self.clipped[a, b])).lower()])


def heatmap_grid(objective: Callable[[np.ndarray], np.ndarray], truth, pair: tuple[int, int],
                 ranges: Sequence[tuple[float, float]], resolution: int = 21,
                 clip: float | None = None) -> Heatmap:
    """Evaluate ``objective`` on a grid over two components, the rest fixed at ``truth``.

    ``objective`` maps ``(N, k)`` parameters to ``N`` values.  Ties for the
    minimum go to the lowest linear index.
    """
    i, j = pair
    if i == j:
        raise ValueError("heatmap needs two distinct free components")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    truth = np.asarray(truth, dtype=float)
    a1 = np.linspace(*ranges[0], resolution)
    a2 = np.linspace(*ranges[1], resolution)
    grid = np.repeat(truth[None], resolution * resolution, axis=0)
    g1, g2 = np.meshgrid(a1, a2, indexing="ij")
    grid[:, i] = g1.ravel()
    grid[:, j] = g2.ravel()
    vals = np.asarray(objective(grid), dtype=float).reshape(resolution, resolution)
    flat = np.where(np.isnan(vals), np.inf, vals).ravel()
    amin = np.unravel_index(int(np.argmin(flat)), vals.shape)
    clipped = np.zeros_like(vals, dtype=bool)
    if clip is not None:
        clipped = vals > clip
        vals = np.minimum(vals, clip)
    tcell = (int(np.argmin(np.abs(a1 - truth[i]))), int(np.argmin(np.abs(a2 - truth[j]))))
    return Heatmap((i, j), a1, a2, vals, clipped, (int(amin[0]), int(amin[1])), tcell)
