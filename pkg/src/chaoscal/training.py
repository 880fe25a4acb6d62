"""Joint training of the trajectory encoder, regression head and parameter emulator."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import RunConfig
from .features import PositivePairRule, nearest_neighbors, select_positive
from .forward import encode_observation
from .losses import (LossWeights, MemoryBank, TemperatureSchedule, clip_loss, info_nce, mape_loss,
                     temperature_at, total_loss)
from .metrics import mape_mdape
from .nn import (DTYPE, AdamW, EmbedEmulateModel, EmulatorSpec, EncoderSpec, backward, lr_at,
                 module_arrays)

log = logging.getLogger(__name__)

TRAIN_STREAM = 1
VAL_STREAM = 2
SPLIT_STREAM = 3


class TrainingError(FloatingPointError):
    pass


def build_model(cfg: RunConfig, seed: int) -> EmbedEmulateModel:
    m = cfg.model
    k = len(cfg.system.param_names)
    torch.manual_seed(seed)
    enc = EncoderSpec(crop_len=m.crop_len, channels=cfg.system.state_dim, conv_widths=m.conv_widths,
                      conv_strides=m.conv_strides, kernel=m.kernel, hidden=m.hidden, embed_dim=m.embed_dim,
                      out_dim=k)
    emu = EmulatorSpec(param_dim=k, component_dim=m.component_dim, n_blocks=m.n_blocks, embed_dim=m.embed_dim)
    model = EmbedEmulateModel(enc, emu)
    lo = np.asarray(cfg.data.train_low)
    hi = np.asarray(cfg.data.train_high)
    model.emulator.set_param_scaling((lo + hi) / 2, (hi - lo) / 2)
    model.encoder.set_head_offset((lo + hi) / 2)
    return model


def split_validation(n: int, val_size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(SPLIT_STREAM,))).permutation(n)
    return np.sort(perm[val_size:]), np.sort(perm[:val_size])


def validation_mape(model: EmbedEmulateModel, params: np.ndarray, trajs: np.ndarray, n_crops: int, seed: int,
                    eps: float) -> float:
    """Mean over components of the MAPE (%) of crop-averaged regression estimates."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(VAL_STREAM,)))
    est = np.stack([encode_observation(model, z, n_crops, rng)[1] for z in trajs])
    return float(mape_mdape(est, params, eps)[0].mean())


@dataclass
class TrainResult:
    model: EmbedEmulateModel
    best_state: dict
    best_epoch: int
    best_val: float
    initial_val: float
    history: list[dict] = field(default_factory=list)
    optimizer: AdamW | None = None
    train_index: np.ndarray | None = None
    val_index: np.ndarray | None = None


def train(cfg: RunConfig, params: np.ndarray, trajs: np.ndarray, seed: int | None = None,
          progress=None) -> TrainResult:
    """Run the epoch loop on ``params (n, k)`` / ``trajs (n, T, D)``.

    A ``val_size`` split is held out for model selection; the state with the best
    validation MAPE is kept in ``best_state``.
    """
    seed = cfg.seed if seed is None else seed
    t = cfg.train
    n = params.shape[0]
    tr_idx, val_idx = split_validation(n, t.val_size, seed)
    P, Z = params[tr_idx], trajs[tr_idx]
    Pv, Zv = params[val_idx], trajs[val_idx]
    if P.shape[0] < 2:
        raise ValueError("training split needs at least two samples")
    batch = min(t.batch_size, P.shape[0])

    model = build_model(cfg, seed)
    model.encoder.set_input_stats(Z.mean(axis=(0, 1)), Z.std(axis=(0, 1)))
    named = list(model.named_parameters())
    steps_per_epoch = -(-P.shape[0] // batch)
    total_steps = steps_per_epoch * t.epochs
    opt = AdamW([p for _, p in named], lr=t.lr, weight_decay=t.weight_decay)
    weights = LossWeights(t.w_zz, t.w_pp, t.w_zp, t.w_mape)
    # the last epoch index reaches tau_max
    last = t.epochs - 1
    sched = TemperatureSchedule(t.tau0, t.tau_max, min(t.hold_epochs, last), last, t.tau_prime, t.tau_prime_max,
                                t.tau_prime_ramp)
    rule = PositivePairRule(t.threshold, t.perturb_prob, t.perturb_std, cfg.model.crop_len)
    neighbors = nearest_neighbors(P, t.eps)
    p_dim = cfg.model.embed_dim
    bank_z, bank_p = MemoryBank(t.bank_capacity, p_dim), MemoryBank(t.bank_capacity, p_dim)

    initial_val = validation_mape(model, Pv, Zv, t.val_crops, seed, t.eps)
    best_val, best_epoch, best_state = initial_val, -1, module_arrays(model)
    history = []
    step = 0
    L = cfg.model.crop_len
    for epoch in range(t.epochs):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(TRAIN_STREAM, epoch)))
        tau, tau_p = temperature_at(epoch, sched)
        order = rng.permutation(P.shape[0])
        sums = dict(zz=0.0, pp=0.0, zp=0.0, mape=0.0, total=0.0)
        n_neighbor = 0
        model.train()
        for b0 in range(0, len(order), batch):
            idx = order[b0 : b0 + batch]
            if len(idx) < 2:
                continue
            anchors, pos_crops, pos_params = [], [], []
            for i in idx:
                s = int(rng.integers(Z.shape[1] - L + 1))
                anchors.append(Z[i, s : s + L])
                pair = select_positive(int(i), P, Z, rule, rng, neighbors, t.eps)
                pos_crops.append(pair.crop)
                pos_params.append(pair.params)
                n_neighbor += pair.source == "neighbor"
            za = torch.as_tensor(np.stack(anchors), dtype=DTYPE)
            zp = torch.as_tensor(np.stack(pos_crops), dtype=DTYPE)
            phi = torch.as_tensor(P[idx], dtype=DTYPE)
            phi_t = torch.as_tensor(np.stack(pos_params), dtype=DTYPE)

            emb_z, reg = model.encoder(za)
            emb_zt, _ = model.encoder(zp)
            emb_p = model.emulator(phi)
            emb_pt = model.emulator(phi_t)
            comps = {
                "zz": info_nce(emb_z, emb_zt, bank_z.tensor(), tau),
                "pp": info_nce(emb_p, emb_pt, bank_p.tensor(), tau),
                "zp": clip_loss(emb_z, emb_p, bank_z.tensor(), bank_p.tensor(), tau_p),
                "mape": mape_loss(reg, phi, t.eps),
            }
            loss = total_loss(comps, weights)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}: "
                                    + ", ".join(f"{k}={float(v):.4g}" for k, v in comps.items()))
            lr = lr_at(step, t.lr, t.warmup_epochs * steps_per_epoch, total_steps)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad(set_to_none=True)
            backward(loss, named)
            opt.step()
            step += 1
            bank_z.push(emb_z.detach())
            bank_p.push(emb_p.detach())
            for k_, v in comps.items():
                sums[k_] += float(v.detach()) * len(idx)
            sums["total"] += float(loss.detach()) * len(idx)

        model.eval()
        val = validation_mape(model, Pv, Zv, t.val_crops, seed, t.eps)
        rec = {"epoch": epoch, "lr": lr, "tau": tau, "tau_prime": tau_p, "val_mape": val,
               "neighbor_frac": n_neighbor / P.shape[0]}
        rec.update({k_: v / P.shape[0] for k_, v in sums.items()})
        history.append(rec)
        if val < best_val:
            best_val, best_epoch, best_state = val, epoch, module_arrays(model)
        if progress is not None:
            progress(rec)
    return TrainResult(model, best_state, best_epoch, best_val, initial_val, history, opt, tr_idx, val_idx)
