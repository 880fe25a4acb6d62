"""Central finite-difference oracle for parameter gradients of the training losses."""
import numpy as np
import torch

from chaoscal import losses as L
from chaoscal.nn import DTYPE, EmbedEmulateModel, EmulatorSpec, EncoderSpec, unit_normalize

FD_STEP = 1e-4  # fourth-order stencil: truncation ~h^4, roundoff ~eps/h
REL_FLOOR = 1e-6  # gradients below this magnitude are compared absolutely


def desk_model(seed: int, crop_len: int = 32) -> EmbedEmulateModel:
    torch.manual_seed(seed)
    return EmbedEmulateModel(EncoderSpec(crop_len=crop_len, channels=40), EmulatorSpec())


def loss_fns(model, seed: int):
    g = torch.Generator().manual_seed(seed)
    B, T = 4, model.encoder.spec.crop_len
    za = torch.randn(B, T, 40, generator=g, dtype=DTYPE)
    zp = za + 0.1 * torch.randn(B, T, 40, generator=g, dtype=DTYPE)
    phi = torch.rand(B, 4, generator=g, dtype=DTYPE) * 10 + 1
    phi_t = phi * (1 + 0.04 * torch.randn(B, 4, generator=g, dtype=DTYPE))
    bank_z = unit_normalize(torch.randn(6, 32, generator=g, dtype=DTYPE))
    bank_p = unit_normalize(torch.randn(6, 32, generator=g, dtype=DTYPE))

    def parts():
        ez, reg = model.encoder(za)
        ezt, _ = model.encoder(zp)
        ep, ept = model.emulator(phi), model.emulator(phi_t)
        return {
            "zz": L.info_nce(ez, ezt, bank_z, 0.15),
            "pp": L.info_nce(ep, ept, bank_p, 0.15),
            "zp": L.clip_loss(ez, ep, bank_z, bank_p, 0.15),
            "mape": L.mape_loss(reg, phi),
        }

    fns = {k: (lambda k=k: parts()[k]) for k in ("zz", "pp", "zp", "mape")}
    fns["total"] = lambda: L.total_loss(parts(), L.LossWeights())
    return fns


def max_relative_error(model, fn, per_tensor: int = 3, seed: int = 0) -> float:
    """Compare autograd with central differences on ``per_tensor`` random entries of every tensor."""
    rng = np.random.default_rng(seed)
    model.zero_grad(set_to_none=True)
    fn().backward()
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            grad = p.grad.view(-1) if p.grad is not None else torch.zeros_like(flat)
            for i in rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False):
                old = flat[i].item()
                vals = []
                for k in (2, 1, -1, -2):
                    flat[i] = old + k * FD_STEP
                    vals.append(fn().item())
                flat[i] = old
                fd = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * FD_STEP)
                ad = grad[i].item()
                worst = max(worst, abs(ad - fd) / max(abs(ad), abs(fd), REL_FLOOR))
    return worst
