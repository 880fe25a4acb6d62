"""Contrastive and supervised training losses, FIFO memory banks and temperature heating."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .features import APE_EPS
from .nn import DTYPE

UNIT_TOL = 1e-6


class MemoryBank:
    """Fixed-capacity FIFO queue of unit-norm embeddings used as negatives."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.dim = dim
        self._data = torch.empty(0, dim, dtype=DTYPE)

    def __len__(self) -> int:
        return self._data.shape[0]

    def push(self, embeddings: torch.Tensor) -> None:
        e = torch.as_tensor(embeddings, dtype=DTYPE).detach().reshape(-1, self.dim)
        if e.shape[0] and (e.norm(dim=1) - 1).abs().max() > UNIT_TOL:
            raise ValueError("memory bank only accepts unit-norm embeddings")
        data = torch.cat([self._data, e.clone()], dim=0)
        self._data = data[max(0, data.shape[0] - self.capacity):]

    def tensor(self) -> torch.Tensor:
        return self._data

    def clear(self) -> None:
        self._data = torch.empty(0, self.dim, dtype=DTYPE)


def bank_update(bank: MemoryBank, embeddings) -> MemoryBank:
    bank.push(embeddings)
    return bank


def _check_unit(*tensors) -> None:
    for t in tensors:
        if t is not None and t.numel() and (t.norm(dim=-1) - 1).abs().max() > UNIT_TOL:
            raise ValueError("contrastive losses expect unit-norm embeddings")


def _anchored_nce(anchors, positives, others, bank, tau: float) -> torch.Tensor:
    """Per-anchor ``-log softmax`` of the positive against in-batch ``others`` (j != i) and ``bank``."""
    pos = (anchors * positives).sum(-1, keepdim=True) / tau
    terms = [pos]
    n = anchors.shape[0]
    if others is not None and n > 1:
        sim = anchors @ others.T / tau
        off = ~torch.eye(n, dtype=torch.bool)
        terms.append(sim[off].reshape(n, n - 1))
    if bank is not None and bank.shape[0]:
        terms.append(anchors @ bank.T / tau)
    logits = torch.cat(terms, dim=1)
    return torch.logsumexp(logits, dim=1) - pos[:, 0]


def info_nce(anchors: torch.Tensor, positives: torch.Tensor, negatives: torch.Tensor | None = None,
             tau: float = 0.15, in_batch: bool = True) -> torch.Tensor:
    """Mean over anchors of ``-log exp(<a,a+>/tau) / (exp(<a,a+>/tau) + sum_n exp(<a,n>/tau))``.

    Negatives are the bank rows plus, when ``in_batch``, the other anchors of the
    batch.  The anchor's similarity with itself is never part of the denominator.
    """
    if positives is None:
        raise ValueError("a positive embedding is required for every anchor")
    if anchors.shape != positives.shape:
        raise ValueError(f"anchor/positive shapes differ: {tuple(anchors.shape)} vs {tuple(positives.shape)}")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    _check_unit(anchors, positives, negatives)
    per = _anchored_nce(anchors, positives, anchors if in_batch else None, negatives, tau)
    return per.mean()


info_nce_zz = info_nce
info_nce_pp = info_nce


def clip_loss(z_emb: torch.Tensor, p_emb: torch.Tensor, bank_z: torch.Tensor | None = None,
              bank_p: torch.Tensor | None = None, tau_prime: float = 0.15) -> torch.Tensor:
    """Symmetric cross-modal InfoNCE over aligned pairs ``(f(Z_i), g(phi_i))``.

    Trajectory anchors are contrasted against the other parameter embeddings of the
    batch and the parameter bank; parameter anchors against the other trajectory
    embeddings and the trajectory bank.  The two directions are summed per pair and
    averaged over the batch.
    """
    if z_emb.shape != p_emb.shape:
        raise ValueError(f"misaligned batches: {tuple(z_emb.shape)} vs {tuple(p_emb.shape)}")
    if tau_prime <= 0:
        raise ValueError("temperature must be positive")
    _check_unit(z_emb, p_emb, bank_z, bank_p)
    from_z = _anchored_nce(z_emb, p_emb, p_emb, bank_p, tau_prime)
    from_p = _anchored_nce(p_emb, z_emb, z_emb, bank_z, tau_prime)
    return (from_z + from_p).mean()


def mape_loss(pred: torch.Tensor, truth: torch.Tensor, eps: float = APE_EPS) -> torch.Tensor:
    """``(1/n) sum_i sum_j |phi_ij - pred_ij| / (|phi_ij| + eps)``."""
    if pred.shape != truth.shape:
        raise ValueError(f"prediction/truth shapes differ: {tuple(pred.shape)} vs {tuple(truth.shape)}")
    return ((truth - pred).abs() / (truth.abs() + eps)).sum(-1).mean()


@dataclass(frozen=True)
class LossWeights:
    zz: float = 1.0
    pp: float = 1.0
    zp: float = 1.0
    mape: float = 1.0

    def __post_init__(self):
        w = (self.zz, self.pp, self.zp, self.mape)
        if min(w) < 0 or max(w) <= 0:
            raise ValueError("loss weights must be non-negative with at least one positive")


def total_loss(components: dict, weights: LossWeights):
    """``w_zz l_zz + w_pp l_pp + w_zp l_zp + w_mape l_mape``; zero-weight terms may be omitted."""
    out = 0.0
    for key in ("zz", "pp", "zp", "mape"):
        w = getattr(weights, key)
        if w:
            out = out + w * components[key]
    return out


@dataclass(frozen=True)
class TemperatureSchedule:
    """``tau`` is held at ``tau0`` for ``hold_epochs`` then heated linearly to ``tau_max``.

    ``tau_prime`` is fixed unless ``tau_prime_max`` is set, in which case it ramps
    linearly between the ``tau_prime_ramp`` epochs.
    """

    tau0: float = 0.15
    tau_max: float = 0.5
    hold_epochs: int = 500
    total_epochs: int = 1000
    tau_prime: float = 0.15
    tau_prime_max: float | None = None
    tau_prime_ramp: tuple[int, int] | None = None

    def __post_init__(self):
        if self.tau0 <= 0 or self.tau_prime <= 0:
            raise ValueError("temperatures must be positive")
        if self.tau_max < self.tau0:
            raise ValueError("tau_max must be >= tau0")
        if not 0 <= self.hold_epochs <= self.total_epochs:
            raise ValueError("hold_epochs must lie in [0, total_epochs]")


def _ramp(epoch: float, start: float, end: float, lo: float, hi: float) -> float:
    if epoch <= start:
        return lo
    if epoch >= end:
        return hi
    return lo + (hi - lo) * (epoch - start) / (end - start)


def temperature_at(epoch: float, sched: TemperatureSchedule) -> tuple[float, float]:
    if not 0 <= epoch <= sched.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {sched.total_epochs}]")
    tau = _ramp(epoch, sched.hold_epochs, sched.total_epochs, sched.tau0, sched.tau_max)
    tau_p = sched.tau_prime
    if sched.tau_prime_max is not None:
        start, end = sched.tau_prime_ramp or (sched.hold_epochs, sched.total_epochs)
        tau_p = _ramp(epoch, start, end, sched.tau_prime, sched.tau_prime_max)
    return tau, tau_p
