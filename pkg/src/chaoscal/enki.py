"""Ensemble Kalman Inversion with pluggable forward models and priors."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

NORMAL = "normal"
LOGNORMAL = "lognormal"
LOG_FLOOR = 1e-3


class EnkiError(RuntimeError):
    pass


@dataclass(frozen=True)
class Prior:
    """Independent per-component prior; lognormal moments are given in log space."""

    names: tuple[str, ...]
    kinds: tuple[str, ...]
    means: tuple[float, ...]
    variances: tuple[float, ...]

    def __post_init__(self):
        k = len(self.names)
        if not (len(self.kinds) == len(self.means) == len(self.variances) == k):
            raise ValueError("prior fields must all have the same length")
        if any(kd not in (NORMAL, LOGNORMAL) for kd in self.kinds):
            raise ValueError(f"unknown prior kinds {self.kinds}")
        if any(v <= 0 for v in self.variances):
            raise ValueError("prior variances must be positive")

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def log_mask(self) -> np.ndarray:
        return np.array([kd == LOGNORMAL for kd in self.kinds])

    def to_physical(self, u: np.ndarray) -> np.ndarray:
        phi = np.array(u, dtype=float, copy=True)
        phi[..., self.log_mask] = np.exp(phi[..., self.log_mask])
        return phi

    def to_working(self, phi: np.ndarray) -> np.ndarray:
        u = np.array(phi, dtype=float, copy=True)
        u[..., self.log_mask] = np.log(u[..., self.log_mask])
        return u

    def to_dict(self) -> dict:
        return {"names": list(self.names), "kinds": list(self.kinds), "means": list(self.means),
                "variances": list(self.variances)}


def l96_fixed_prior() -> Prior:
    return Prior(("F", "h", "c", "b"), (NORMAL, NORMAL, LOGNORMAL, NORMAL),
                 (7.5, 2.5, float(np.log(11.5)), 12.5), (36.0, 2.25, 0.15, 36.0))


L96_EMPB_VARIANCES = (18.0, 1.125, 0.075, 18.0)


def kse_fixed_prior() -> Prior:
    return Prior(("lambda2", "lambda4", "lambdaNl"), (NORMAL,) * 3, (5.0,) * 3, (6.25,) * 3)


KSE_EMPB_VARIANCES = (6.25, 6.25, 6.25)


def empirical_bayes_prior(estimate, template: Prior, variances: Sequence[float]) -> tuple[Prior, list[str]]:
    """Centre ``template`` on a point estimate with new variances.

    Lognormal components take ``log(estimate)``; non-positive estimates are clamped
    to ``LOG_FLOOR`` and reported in the returned list of flagged component names.
    """
    est = np.asarray(estimate, dtype=float)
    if est.shape != (template.dim,):
        raise ValueError(f"estimate has shape {est.shape}, expected ({template.dim},)")
    means, flagged = [], []
    for name, kind, val in zip(template.names, template.kinds, est):
        if kind == LOGNORMAL:
            if val <= LOG_FLOOR:
                flagged.append(name)
                log.warning("empirical-Bayes mean for %s clamped from %g to %g", name, val, LOG_FLOOR)
                val = LOG_FLOOR
            val = np.log(val)
        means.append(float(val))
    return replace(template, means=tuple(means), variances=tuple(float(v) for v in variances)), flagged


@dataclass(frozen=True)
class EnkiConfig:
    M: int = 100
    N: int = 50
    alpha: float = 0.3

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("ensemble size M must be >= 2")
        if self.N < 0:
            raise ValueError("iteration count N must be >= 0")
        if self.alpha <= 0:
            raise ValueError("step size alpha must be > 0")


class ForwardModel(Protocol):
    """Maps physical parameters ``(M, k)`` to ``(outputs (M, D), ok (M,))``."""

    R: np.ndarray  # observation covariance diagonal, length D

    def __call__(self, phis: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class CallableForward:
    """Wrap a batched map ``phi -> output`` as a forward model."""

    fn: Callable[[np.ndarray], np.ndarray]
    R: np.ndarray

    def __call__(self, phis):
        out = np.asarray(self.fn(np.atleast_2d(phis)), dtype=float)
        ok = np.isfinite(out).all(axis=1)
        return out, ok


@dataclass
class Ensemble:
    particles: np.ndarray  # working coordinates, (M, k)
    prior: Prior
    iteration: int = 0

    @property
    def physical(self) -> np.ndarray:
        return self.prior.to_physical(self.particles)


def sample_prior(prior: Prior, M: int, rng: np.random.Generator) -> Ensemble:
    if M < 2:
        raise ValueError("ensemble size must be >= 2")
    mean = np.asarray(prior.means)
    std = np.sqrt(np.asarray(prior.variances))
    return Ensemble(mean + std * rng.standard_normal((M, prior.dim)), prior)


def particle_rngs(seed_seq: np.random.SeedSequence, iteration: int, M: int) -> list[np.random.Generator]:
    """Independent per-particle streams keyed by ``(iteration, particle)``."""
    return [np.random.default_rng(np.random.SeedSequence(seed_seq.entropy, spawn_key=(*seed_seq.spawn_key, iteration, m)))
            for m in range(M)]


def kalman_gain(C_ug: np.ndarray, C_gg: np.ndarray, noise_cov: np.ndarray) -> np.ndarray:
    """``C_ug (C_gg + noise_cov)^{-1}`` through a Cholesky solve, with jitter on failure."""
    S = C_gg + noise_cov
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(S) / S.shape[0]
        try:
            L = np.linalg.cholesky(S + jitter * np.eye(S.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise EnkiError("innovation covariance is singular beyond jitter tolerance") from exc
    # K S = C_ug  <=>  S K^T = C_ug^T
    Kt = np.linalg.solve(L.T, np.linalg.solve(L, C_ug.T))
    return Kt.T


@dataclass
class StepInfo:
    outputs: np.ndarray
    ok: np.ndarray
    gain: np.ndarray


def enki_step(ens: Ensemble, fm: ForwardModel, y: np.ndarray, cfg: EnkiConfig,
              seed_seq: np.random.SeedSequence, outputs=None) -> tuple[Ensemble, StepInfo]:
    """One prediction + analysis step with perturbed observations.

    Particles whose forward evaluation fails keep their value and are left out of
    the empirical covariances.
    """
    y = np.asarray(y, dtype=float)
    u = ens.particles
    M = u.shape[0]
    if outputs is None:
        G, ok = fm(ens.physical)
    else:
        G, ok = outputs
    G = np.asarray(G, dtype=float)
    if G.shape[1] != y.shape[0]:
        raise ValueError(f"forward output dim {G.shape[1]} != observation dim {y.shape[0]}")
    if ok.sum() < 2:
        raise EnkiError(f"only {int(ok.sum())} particles produced a valid forward evaluation")
    uo, Go = u[ok], G[ok]
    du = uo - uo.mean(axis=0)
    dg = Go - Go.mean(axis=0)
    n = uo.shape[0]
    C_ug = du.T @ dg / n
    C_gg = dg.T @ dg / n
    R = np.asarray(fm.R, dtype=float)
    noise_cov = np.diag(R / cfg.alpha)
    K = kalman_gain(C_ug, C_gg, noise_cov)

    new = u.copy()
    sd = np.sqrt(R / cfg.alpha)
    for m, rng in enumerate(particle_rngs(seed_seq, ens.iteration, M)):
        eta = sd * rng.standard_normal(y.shape[0])
        if ok[m]:
            new[m] = u[m] + K @ (y + eta - G[m])
    return Ensemble(new, ens.prior, ens.iteration + 1), StepInfo(G, ok, K)


@dataclass
class EnkiResult:
    ensemble: Ensemble
    history: list[np.ndarray] = field(default_factory=list)  # physical particles per iteration
    means: list[np.ndarray] = field(default_factory=list)
    spreads: list[float] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    n_failed: list[int] = field(default_factory=list)

    @property
    def mean(self) -> np.ndarray:
        return self.ensemble.physical.mean(axis=0)


def data_misfit(y: np.ndarray, g: np.ndarray, R: np.ndarray) -> float:
    """``0.5 * ||y - g||^2`` weighted by the inverse of the diagonal covariance ``R``."""
    r = np.asarray(y, dtype=float) - np.asarray(g, dtype=float)
    return float(0.5 * np.sum(r * r / np.asarray(R, dtype=float)))


def _spread(u: np.ndarray) -> float:
    return float(np.trace(np.atleast_2d(np.cov(u.T, bias=True))))


def run_enki(y, fm: ForwardModel, prior: Prior, cfg: EnkiConfig, seed: int | np.random.SeedSequence,
             record_history: bool = False, initial: Ensemble | None = None) -> EnkiResult:
    """Iterate :func:`enki_step` ``cfg.N`` times from a prior draw.

    Diagnostics per iteration (index 0 is the prior): physical ensemble mean,
    spread (trace of the working-coordinate covariance) and the misfit of the
    forward-mapped ensemble mean, which is evaluated alongside the particles.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_ss, step_ss = ss.spawn(2)
    ens = initial if initial is not None else sample_prior(prior, cfg.M, np.random.default_rng(init_ss))
    y = np.asarray(y, dtype=float)
    res = EnkiResult(ens)
    for it in range(cfg.N + 1):
        phys = ens.physical
        mean_phys = prior.to_physical(ens.particles.mean(axis=0))
        if it < cfg.N:
            G, ok = fm(np.vstack([phys, mean_phys]))
            g_mean, ok_mean = G[-1], ok[-1]
            G, ok = G[:-1], ok[:-1]
        else:
            G, ok = fm(mean_phys[None])
            g_mean, ok_mean = G[0], ok[0]
        res.means.append(phys.mean(axis=0))
        res.spreads.append(_spread(ens.particles))
        res.objective.append(data_misfit(y, g_mean, fm.R) if ok_mean else float("inf"))
        if record_history:
            res.history.append(phys.copy())
        if it == cfg.N:
            break
        res.n_failed.append(int((~ok).sum()))
        ens, _ = enki_step(ens, fm, y, cfg, step_ss, outputs=(G, ok))
    res.ensemble = ens
    return res


def write_ensemble_csv(path, history: Sequence[np.ndarray], names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "particle", *names])
        for it, parts in enumerate(history):
            for m, row in enumerate(parts):
                w.writerow([it, m, *(repr(float(x)) for x in row)])


# ------------------------------------------------------------------ objectives and forward models


def moment_objective(phi, y_moments, var_diag, simulate_moments: Callable[[np.ndarray], np.ndarray | None]) -> float:
    """``sum_j (y_j - m(H(phi))_j)^2 / (2 var_j)``; ``inf`` when the simulation is rejected."""
    var = np.asarray(var_diag, dtype=float)
    if np.any(var <= 0):
        raise ValueError("moment variances must be positive")
    m = simulate_moments(np.asarray(phi, dtype=float))
    if m is None or not np.all(np.isfinite(m)):
        return float("inf")
    return data_misfit(y_moments, m, var)


def emulator_objective(phi_embedding, z_embedding) -> float:
    """``||g(phi) - f(Z)||^2`` for unit vectors, hence in ``[0, 4]``."""
    a = np.asarray(phi_embedding, dtype=float)
    b = np.asarray(z_embedding, dtype=float)
    # 2 - 2cos on renormalised inputs: equal to the squared distance for unit
    # vectors, and immune to round-off pushing it outside [0, 4]
    cos = np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    val = 2.0 - 2.0 * np.clip(cos, -1.0, 1.0)
    return float(val) if a.ndim == 1 else val
