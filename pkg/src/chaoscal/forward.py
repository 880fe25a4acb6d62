"""Forward models for EnKI: simulator + moments, and the learned emulator."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import dynamics as dyn
from .features import kse_moments, l96_moments, moment_variance
from .nn import DTYPE, EmbedEmulateModel, unit_normalize


@dataclass
class SystemConfig:
    system: str = "l96"
    K: int = 8
    J: int = 4
    d: int = 256
    L: float = 32.0
    dt: float = 0.1
    substeps: int = 10
    max_substeps: int = 320
    kse_method: str = "ifrk4"

    @property
    def state_dim(self) -> int:
        return dyn.state_dim(self.system, self.K, self.J, self.d)

    @property
    def param_names(self) -> tuple[str, ...]:
        return dyn.L96_PARAM_NAMES if self.system == "l96" else dyn.KSE_PARAM_NAMES

    def simulate(self, params, z0, steps: int):
        """Batch simulation; returns ``(states (B, steps+1, D), valid (B,))``."""
        if self.system == "l96":
            states, valid, _ = dyn.simulate_l96(params, self.K, self.J, self.dt, steps, z0,
                                                substeps=self.substeps, max_substeps=self.max_substeps)
        else:
            states, valid, _ = dyn.simulate_kse(params, dyn.KseGrid(self.d, self.L), self.dt, steps, z0,
                                                method=self.kse_method)
        for b in np.flatnonzero(valid):
            valid[b] = dyn.validate_trajectory(states[b]).accepted
        return states, valid

    def initial_condition(self, rng) -> np.ndarray:
        return dyn.sample_initial_condition(self.system, rng, self.K, self.J, self.d)

    def moments(self, Z) -> np.ndarray:
        if self.system == "l96":
            return l96_moments(Z, self.K, self.J)
        return kse_moments(Z)


def moment_variance_at(sys: SystemConfig, params, T: int, seed, n_blocks: int = 20, z0=None) -> np.ndarray:
    """Block estimate of ``Var[m(Z)]`` for length-``T`` trajectories simulated at ``params``."""
    rng = np.random.default_rng(seed)
    if z0 is None:
        z0 = sys.initial_condition(rng)

    def simulate(n_rows):
        states, _ = sys.simulate(np.atleast_2d(params), np.atleast_2d(z0), n_rows - 1)
        return states[0]

    return moment_variance(simulate, sys.moments, T, n_blocks)


@dataclass
class MomentForward:
    """``phi -> m(H(phi))`` with initial conditions drawn from the observed trajectory."""

    sys: SystemConfig
    observation: np.ndarray  # (T, D)
    R: np.ndarray
    seed: int = 0
    calls: int = field(default=0, init=False)

    @property
    def y(self) -> np.ndarray:
        return self.sys.moments(self.observation)

    def __call__(self, phis):
        phis = np.atleast_2d(phis)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.calls,))
        self.calls += 1
        rngs = [np.random.default_rng(s) for s in ss.spawn(phis.shape[0])]
        z0 = np.stack([dyn.ic_from_observation(self.observation, r) for r in rngs])
        ok = np.ones(phis.shape[0], dtype=bool)
        if self.sys.system == "l96":
            ok &= phis[:, 2] > 0  # c must stay positive
        out = np.full((phis.shape[0], self.R.shape[0]), np.nan)
        rows = np.flatnonzero(ok)
        if rows.size:
            states, valid = self.sys.simulate(phis[rows], z0[rows], self.observation.shape[0] - 1)
            ok[rows] = valid
            out[rows[valid]] = self.sys.moments(states[valid])
        return out, ok


@dataclass
class EmulatorForward:
    """``phi -> g_hat(phi)`` in embedding space with identity observation covariance."""

    model: EmbedEmulateModel

    @property
    def R(self) -> np.ndarray:
        return np.ones(self.model.emulator.spec.embed_dim)

    def __call__(self, phis):
        with torch.no_grad():
            out = self.model.emulator(torch.as_tensor(np.atleast_2d(phis), dtype=DTYPE)).numpy()
        return out, np.isfinite(out).all(axis=1)


def crop_starts(T: int, crop_len: int, n: int, rng) -> np.ndarray:
    return rng.integers(0, T - crop_len + 1, size=n)


def encode_observation(model: EmbedEmulateModel, Z: np.ndarray, n_crops: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Average encoder outputs over random crops.

    Returns ``(embedding, estimate)``: the renormalised mean crop embedding and the
    mean regression-head output.
    """
    L = model.encoder.spec.crop_len
    starts = crop_starts(Z.shape[0], L, n_crops, rng)
    crops = np.stack([Z[s : s + L] for s in starts])
    with torch.no_grad():
        emb, reg = model.encoder(torch.as_tensor(crops, dtype=DTYPE))
        mean_emb = unit_normalize(emb.mean(dim=0))
    return mean_emb.numpy(), reg.mean(dim=0).numpy()
