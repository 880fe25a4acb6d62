"""Simulators for the two-level Lorenz-96 system and the Kuramoto-Sivashinsky equation.

All integrators are vectorised over a leading batch axis so that many parameter
settings can be advanced together.  Members that diverge are reported through a
boolean ``valid`` mask rather than silently returned.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

L96_PARAM_NAMES = ("F", "h", "c", "b")
KSE_PARAM_NAMES = ("lambda2", "lambda4", "lambdaNl")

DEGENERATE_STD = 5e-5


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class L96Params:
    F: float
    h: float
    c: float
    b: float

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite L96 parameters: {vals}")
        if self.c <= 0:
            raise ValueError(f"timescale ratio c must be > 0, got {self.c}")

    def as_array(self) -> np.ndarray:
        return np.array([self.F, self.h, self.c, self.b], dtype=float)


@dataclass(frozen=True)
class KseParams:
    lambda2: float
    lambda4: float
    lambdaNl: float

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite KSE parameters: {vals}")
        if self.lambda4 <= 0:
            raise ValueError(f"lambda4 must be > 0 for a well-posed problem, got {self.lambda4}")

    def as_array(self) -> np.ndarray:
        return np.array([self.lambda2, self.lambda4, self.lambdaNl], dtype=float)


@dataclass
class Trajectory:
    """A ``T x d`` record of system states sampled every ``dt``."""

    states: np.ndarray
    dt: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2:
            raise ValueError(f"trajectory states must be 2-D, got shape {self.states.shape}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def T(self) -> int:
        return self.states.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[1]

    def with_states(self, states: np.ndarray, **meta) -> "Trajectory":
        return Trajectory(states, self.dt, {**self.meta, **meta})


@dataclass(frozen=True)
class NoiseModel:
    r: float
    gamma_diag: np.ndarray

    def __post_init__(self):
        if self.r < 0:
            raise ValueError("noise scale r must be >= 0")
        if np.any(np.asarray(self.gamma_diag) < 0):
            raise ValueError("gamma_diag entries must be >= 0")


class Validation(NamedTuple):
    accepted: bool
    reason: str


# --------------------------------------------------------------------------- L96


def _l96_param_arrays(params, batch_shape):
    if isinstance(params, L96Params):
        params = params.as_array()
    p = np.asarray(params, dtype=float)
    if p.shape[-1] != 4:
        raise ValueError(f"L96 parameters need 4 components, got shape {p.shape}")
    p = np.broadcast_to(p, tuple(batch_shape) + (4,))
    return [p[..., i : i + 1] for i in range(4)]


def l96_rhs(state, params, K: int, J: int) -> np.ndarray:
    """Time derivative of the two-level Lorenz-96 state ``[X, Y]``.

    ``state`` may carry leading batch axes; ``params`` is an ``L96Params`` or an
    array ``[F, h, c, b]`` broadcastable to the batch.  The fast variables are
    indexed as one cyclic vector of length ``K*J``.
    """
    z = np.asarray(state, dtype=float)
    if z.shape[-1] != K * (J + 1):
        raise ValueError(f"state dimension {z.shape[-1]} != K(J+1) = {K * (J + 1)}")
    F, h, c, b = _l96_param_arrays(params, z.shape[:-1])
    X = z[..., :K]
    Y = z[..., K:]
    Ybar = Y.reshape(z.shape[:-1] + (K, J)).mean(axis=-1)

    dX = -np.roll(X, 1, -1) * (np.roll(X, 2, -1) - np.roll(X, -1, -1)) - X + F - h * c * Ybar
    forcing = np.repeat(X, J, axis=-1) * (h / J)
    dY = c * (-b * np.roll(Y, -1, -1) * (np.roll(Y, -2, -1) - np.roll(Y, 1, -1)) - Y + forcing)
    return np.concatenate([dX, dY], axis=-1)


# --------------------------------------------------------------------------- KSE


@dataclass(frozen=True)
class KseGrid:
    """Periodic grid of ``d`` points on ``[0, 2L)`` with its Fourier wavenumbers."""

    d: int
    L: float

    def __post_init__(self):
        if self.d < 2 or self.d & (self.d - 1):
            raise ValueError(f"grid size must be a power of two, got {self.d}")

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.d) * (2.0 * self.L / self.d)

    @property
    def q(self) -> np.ndarray:
        # rfft wavenumbers for period 2L
        return np.pi * np.arange(self.d // 2 + 1) / self.L

    @property
    def q_max(self) -> float:
        return float(np.pi * (self.d // 2) / self.L)


def _kse_param_arrays(params, batch_shape):
    if isinstance(params, KseParams):
        params = params.as_array()
    p = np.asarray(params, dtype=float)
    if p.shape[-1] != 3:
        raise ValueError(f"KSE parameters need 3 components, got shape {p.shape}")
    p = np.broadcast_to(p, tuple(batch_shape) + (3,))
    return [p[..., i : i + 1] for i in range(3)]


def kse_rhs(state, params, grid: KseGrid) -> np.ndarray:
    """``dV/dt = -l2 V_xx - l4 V_xxxx - lnl V V_x`` by pseudo-spectral differentiation."""
    v = np.asarray(state, dtype=float)
    if v.shape[-1] != grid.d:
        raise ValueError(f"state length {v.shape[-1]} != grid size {grid.d}")
    if not np.all(np.isfinite(v)):
        raise IntegrationError("non-finite KSE state")
    l2, l4, lnl = _kse_param_arrays(params, v.shape[:-1])
    q = grid.q
    vh = np.fft.rfft(v, axis=-1)
    lin = np.fft.irfft((l2 * q**2 - l4 * q**4) * vh, n=grid.d, axis=-1)
    vx = np.fft.irfft(1j * q * vh, n=grid.d, axis=-1)
    return lin - lnl * v * vx


def kse_stable_substeps(params, grid: KseGrid, dt: float, safety: float = 0.8) -> int:
    """Substeps for plain RK4 from the linear stability bound ``|l2 q^2 - l4 q^4| h < 2.78``."""
    p = np.atleast_2d(params.as_array() if isinstance(params, KseParams) else params)
    q = grid.q
    rate = np.max(np.abs(p[:, 0:1] * q**2 - p[:, 1:2] * q**4))
    return max(1, math.ceil(dt * rate / (2.78 * safety)))


# --------------------------------------------------------------------------- integration


def rk4_step(rhs: Callable[[np.ndarray], np.ndarray], z: np.ndarray, h: float) -> np.ndarray:
    k1 = rhs(z)
    k2 = rhs(z + 0.5 * h * k1)
    k3 = rhs(z + 0.5 * h * k2)
    k4 = rhs(z + h * k3)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_rk4(rhs, z0, dt: float, steps: int, substeps: int = 1):
    """Classical RK4, recording every ``dt`` with ``substeps`` internal steps.

    Returns ``(states, valid)`` where ``states`` has shape ``(steps + 1,) + z0.shape``
    and ``valid`` flags the batch members (leading axes of ``z0``) that stayed finite.
    Members that diverge are NaN from the first non-finite record onward.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if substeps < 1:
        raise ValueError(f"substeps must be >= 1, got {substeps}")
    z = np.array(z0, dtype=float)
    if z.ndim == 0:
        raise ValueError("z0 must be a state vector (use shape (1,) for scalar ODEs)")
    out = np.empty((steps + 1,) + z.shape)
    out[0] = z
    h = dt / substeps
    with np.errstate(all="ignore"):
        for n in range(1, steps + 1):
            for _ in range(substeps):
                z = rk4_step(rhs, z, h)
            out[n] = z
    bad = ~np.isfinite(out).all(axis=-1)
    valid = ~bad.any(axis=0)
    if not valid.all():
        # poison everything after the first non-finite record of each member
        first = np.argmax(bad, axis=0)
        idx = np.arange(steps + 1).reshape((-1,) + (1,) * (z.ndim - 1))
        out[(idx >= first[None]) & ~valid[None]] = np.nan
    return out, valid


def integrate_ifrk4(linear: np.ndarray, nonlinear, vh0: np.ndarray, dt: float, steps: int, substeps: int):
    """Integrating-factor RK4 for ``dv/dt = L v + N(v)`` with diagonal ``L`` (Fourier space).

    The stiff linear part is propagated exactly, so the step is limited only by
    the nonlinear term.  Returns Fourier states ``(steps + 1,) + vh0.shape``.
    """
    h = dt / substeps
    e_half = np.exp(0.5 * h * linear)
    e_full = e_half * e_half
    vh = np.array(vh0, dtype=complex)
    out = np.empty((steps + 1,) + vh.shape, dtype=complex)
    out[0] = vh
    with np.errstate(all="ignore"):
        for n in range(1, steps + 1):
            for _ in range(substeps):
                k1 = nonlinear(vh)
                k2 = nonlinear(e_half * (vh + 0.5 * h * k1))
                k3 = nonlinear(e_half * vh + 0.5 * h * k2)
                k4 = nonlinear(e_full * vh + h * e_half * k3)
                vh = e_full * vh + (h / 6.0) * (e_full * k1 + 2.0 * e_half * (k2 + k3) + k4)
            out[n] = vh
    return out


def _retry_invalid(run, n_members: int, substeps: int, max_substeps: int):
    """Run ``run(rows, substeps)`` and rerun diverged rows with doubled substeps."""
    states, valid = run(np.arange(n_members), substeps)
    used = np.full(n_members, substeps)
    todo = np.flatnonzero(~valid)
    s = substeps
    while todo.size and s * 2 <= max_substeps:
        s *= 2
        sub_states, sub_valid = run(todo, s)
        states[:, todo] = sub_states
        valid[todo] = sub_valid
        used[todo] = s
        todo = todo[~sub_valid]
    return states, valid, used


def simulate_l96(params, K: int, J: int, dt: float, steps: int, z0, substeps: int = 10,
                 max_substeps: int = 320, burn_in: int = 0):
    """Simulate a batch of L96 systems.

    ``params`` has shape ``(B, 4)`` and ``z0`` shape ``(B, K(J+1))``.  Returns
    ``(states (B, steps+1, D), valid (B,), substeps_used (B,))``.  A member that
    diverges is retried from its initial condition with twice the substeps, up to
    ``max_substeps``.
    """
    p = np.atleast_2d(np.asarray(params, dtype=float))
    z0 = np.atleast_2d(np.asarray(z0, dtype=float))
    if z0.shape != (p.shape[0], K * (J + 1)):
        raise ValueError(f"z0 shape {z0.shape} incompatible with {p.shape[0]} members of dim {K * (J + 1)}")

    def run(rows, s):
        pr = p[rows]
        states, valid = integrate_rk4(lambda z: l96_rhs(z, pr, K, J), z0[rows], dt, steps + burn_in, s)
        return states[burn_in:], valid

    states, valid, used = _retry_invalid(run, p.shape[0], substeps, max_substeps)
    return np.moveaxis(states, 0, 1), valid, used


def simulate_kse(params, grid: KseGrid, dt: float, steps: int, v0, substeps: int | None = None,
                 method: str = "ifrk4", max_substeps: int = 1 << 12, burn_in: int = 0):
    """Simulate a batch of KSE fields; returns ``(states (B, steps+1, d), valid, substeps_used)``.

    ``method="rk4"`` uses plain RK4 on :func:`kse_rhs` with substeps from the linear
    stability bound; ``"ifrk4"`` treats the linear part exactly.
    """
    p = np.atleast_2d(np.asarray(params, dtype=float))
    v0 = np.atleast_2d(np.asarray(v0, dtype=float))
    q = grid.q

    if method == "rk4":
        s0 = substeps or kse_stable_substeps(p, grid, dt)

        def run(rows, s):
            pr = p[rows]

            def rhs(v):
                with np.errstate(all="ignore"):
                    l2, l4, lnl = _kse_param_arrays(pr, v.shape[:-1])
                    vh = np.fft.rfft(v, axis=-1)
                    lin = np.fft.irfft((l2 * q**2 - l4 * q**4) * vh, n=grid.d, axis=-1)
                    vx = np.fft.irfft(1j * q * vh, n=grid.d, axis=-1)
                    return lin - lnl * v * vx

            states, valid = integrate_rk4(rhs, v0[rows], dt, steps + burn_in, s)
            return states[burn_in:], valid

    elif method == "ifrk4":
        s0 = substeps or max(1, math.ceil(dt / 0.01))

        def run(rows, s):
            pr = p[rows]
            linear = pr[:, 0:1] * q**2 - pr[:, 1:2] * q**4
            lnl = pr[:, 2:3]

            def nonlinear(vh):
                v = np.fft.irfft(vh, n=grid.d, axis=-1)
                return -lnl * 0.5j * q * np.fft.rfft(v * v, axis=-1)

            spec = integrate_ifrk4(linear, nonlinear, np.fft.rfft(v0[rows], axis=-1), dt, steps + burn_in, s)
            states = np.fft.irfft(spec, n=grid.d, axis=-1)[burn_in:]
            valid = np.isfinite(states).all(axis=(0, 2))
            states[:, ~valid] = np.nan
            return states, valid

    else:
        raise ValueError(f"unknown KSE method {method!r}")

    states, valid, used = _retry_invalid(run, p.shape[0], s0, max(max_substeps, s0))
    return np.moveaxis(states, 0, 1), valid, used


# --------------------------------------------------------------------------- data helpers


def state_dim(system: str, K: int = 36, J: int = 10, d: int = 256) -> int:
    if system == "l96":
        return K * (J + 1)
    if system == "kse":
        return d
    raise ValueError(f"unknown system {system!r}")


def sample_initial_condition(system: str, rng: np.random.Generator, K: int = 36, J: int = 10,
                             d: int = 256) -> np.ndarray:
    """L96: i.i.d. standard normal per channel.  KSE: i.i.d. uniform on ``[-pi, pi]``."""
    n = state_dim(system, K, J, d)
    if system == "l96":
        return rng.standard_normal(n)
    return rng.uniform(-np.pi, np.pi, n)


def ic_from_observation(Z, rng: np.random.Generator) -> np.ndarray:
    """A uniformly drawn row of the observed trajectory."""
    states = Z.states if isinstance(Z, Trajectory) else np.asarray(Z)
    if states.shape[0] == 0:
        raise ValueError("cannot draw an initial condition from an empty trajectory")
    return states[rng.integers(states.shape[0])].copy()


def validate_trajectory(Z) -> Validation:
    states = Z.states if isinstance(Z, Trajectory) else np.asarray(Z, dtype=float)
    if states.size == 0:
        return Validation(False, "empty")
    if not np.all(np.isfinite(states)):
        return Validation(False, "nan")
    if states.std() < DEGENERATE_STD:
        return Validation(False, "degenerate")
    return Validation(True, "ok")


def add_observation_noise(Z: Trajectory, r: float, rng: np.random.Generator) -> Trajectory:
    """Add ``N(0, r * var_t(Z[:, j]))`` noise independently to every channel ``j``."""
    if r < 0:
        raise ValueError("noise scale r must be >= 0")
    if r == 0:
        return Z.with_states(Z.states.copy(), noise_r=0.0)
    model = NoiseModel(r, Z.states.var(axis=0))
    noise = rng.standard_normal(Z.states.shape) * np.sqrt(model.r * model.gamma_diag)
    return Z.with_states(Z.states + noise, noise_r=float(r))
