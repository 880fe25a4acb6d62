"""Trajectory encoder with regression head, parameter emulator, gradients and AdamW."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as Fn

DTYPE = torch.float64


class GradientError(FloatingPointError):
    pass


@dataclass
class EncoderSpec:
    crop_len: int
    channels: int
    conv_widths: tuple[int, ...] = (32, 64, 128)
    conv_strides: tuple[int, ...] = (1, 2, 2)
    kernel: int = 5
    hidden: int = 128
    embed_dim: int = 32
    out_dim: int = 4

    def __post_init__(self):
        self.conv_widths = tuple(self.conv_widths)
        self.conv_strides = tuple(self.conv_strides)
        if len(self.conv_widths) != len(self.conv_strides):
            raise ValueError("conv_widths and conv_strides must have equal length")
        if self.embed_dim < self.out_dim:
            raise ValueError("embedding dim must be >= regression output dim")


@dataclass
class EmulatorSpec:
    param_dim: int = 4
    component_dim: int = 16
    n_blocks: int = 3
    embed_dim: int = 32

    @property
    def width(self) -> int:
        return self.param_dim * self.component_dim


def unit_normalize(v: torch.Tensor) -> torch.Tensor:
    return v / v.norm(dim=-1, keepdim=True).clamp_min(1e-300)


def _he_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ResidualProjection(nn.Module):
    """``W0 x + W2 gelu(W1 gelu(W0 x))``: a projection with a residual branch."""

    def __init__(self, n_in: int, n_out: int, depth: int = 1):
        super().__init__()
        self.proj = nn.Linear(n_in, n_out)
        self.branch = nn.ModuleList(nn.Linear(n_out, n_out) for _ in range(depth))

    def forward(self, x):
        y = self.proj(x)
        r = y
        for lin in self.branch:
            r = lin(Fn.gelu(r))
        return y + r


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, x):
        return x + self.fc2(Fn.gelu(self.fc1(Fn.gelu(x))))


class Encoder(nn.Module):
    """1-D temporal convolutions (circular padding) -> mean pool -> hidden vector.

    The hidden vector feeds both a unit-norm embedding branch and an affine
    regression head.  Inputs are ``(batch, time, channels)`` crops.
    """

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.register_buffer("in_mean", torch.zeros(spec.channels, dtype=DTYPE))
        self.register_buffer("in_std", torch.ones(spec.channels, dtype=DTYPE))
        convs = []
        c_in = spec.channels
        for w, s in zip(spec.conv_widths, spec.conv_strides):
            convs.append(nn.Conv1d(c_in, w, spec.kernel, stride=s, padding=spec.kernel // 2,
                                   padding_mode="circular"))
            c_in = w
        self.convs = nn.ModuleList(convs)
        self.to_hidden = nn.Linear(c_in, spec.hidden)
        self.embed = ResidualProjection(spec.hidden, spec.embed_dim, depth=2)
        self.head = nn.Linear(spec.hidden, spec.out_dim)
        _he_init(self)
        self.to(DTYPE)

    def set_input_stats(self, mean, std) -> None:
        self.in_mean.copy_(torch.as_tensor(mean, dtype=DTYPE))
        self.in_std.copy_(torch.as_tensor(np.maximum(std, 1e-8), dtype=DTYPE))

    def set_head_offset(self, center) -> None:
        with torch.no_grad():
            self.head.bias.copy_(torch.as_tensor(center, dtype=DTYPE))

    def hidden(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 3 or z.shape[1] != self.spec.crop_len or z.shape[2] != self.spec.channels:
            raise ValueError(f"encoder expects (B, {self.spec.crop_len}, {self.spec.channels}), got {tuple(z.shape)}")
        x = ((z - self.in_mean) / self.in_std).transpose(1, 2)
        for conv in self.convs:
            x = Fn.gelu(conv(x))
        return self.to_hidden(x.mean(dim=-1))

    def forward(self, z: torch.Tensor):
        h = self.hidden(z)
        return unit_normalize(self.embed(h)), self.head(h)


class Emulator(nn.Module):
    """Parameter vector -> unit embedding, one residual in-projection per component."""

    def __init__(self, spec: EmulatorSpec):
        super().__init__()
        self.spec = spec
        self.register_buffer("p_center", torch.zeros(spec.param_dim, dtype=DTYPE))
        self.register_buffer("p_scale", torch.ones(spec.param_dim, dtype=DTYPE))
        self.inputs = nn.ModuleList(ResidualProjection(1, spec.component_dim) for _ in range(spec.param_dim))
        self.blocks = nn.ModuleList(ResidualBlock(spec.width) for _ in range(spec.n_blocks))
        self.out = ResidualProjection(spec.width, spec.embed_dim)
        _he_init(self)
        self.to(DTYPE)

    def set_param_scaling(self, center, scale) -> None:
        self.p_center.copy_(torch.as_tensor(center, dtype=DTYPE))
        self.p_scale.copy_(torch.as_tensor(scale, dtype=DTYPE))

    def forward(self, phi: torch.Tensor) -> torch.Tensor:
        if phi.shape[-1] != self.spec.param_dim:
            raise ValueError(f"emulator expects {self.spec.param_dim} parameters, got {phi.shape[-1]}")
        u = (phi - self.p_center) / self.p_scale
        x = torch.cat([proj(u[..., j : j + 1]) for j, proj in enumerate(self.inputs)], dim=-1)
        for blk in self.blocks:
            x = blk(x)
        return unit_normalize(self.out(x))


class EmbedEmulateModel(nn.Module):
    def __init__(self, enc_spec: EncoderSpec, emu_spec: EmulatorSpec):
        super().__init__()
        self.encoder = Encoder(enc_spec)
        self.emulator = Emulator(emu_spec)

    def specs(self) -> dict:
        return {"encoder": asdict(self.encoder.spec), "emulator": asdict(self.emulator.spec)}

    @classmethod
    def from_specs(cls, specs: dict) -> "EmbedEmulateModel":
        return cls(EncoderSpec(**specs["encoder"]), EmulatorSpec(**specs["emulator"]))


def backward(loss: torch.Tensor, named_params) -> None:
    """Populate ``.grad`` for every parameter and refuse NaN/Inf gradients."""
    loss.backward()
    for name, p in named_params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise GradientError(f"non-finite gradient in {name}")


def lr_at(step: int, base_lr: float, warmup: int, total: int, min_lr: float = 0.0) -> float:
    """Linear warm-up from 0 to ``base_lr`` over ``warmup`` steps, then cosine decay to ``min_lr``."""
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    if total <= warmup:
        return base_lr
    t = min(1.0, (step - warmup) / (total - warmup))
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t))


class AdamW(torch.optim.Optimizer):
    """Adam with decoupled weight decay; ``lr`` may be overridden per step."""

    def __init__(self, params, lr: float = 1e-2, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-5):
        if lr < 0 or eps < 0 or weight_decay < 0:
            raise ValueError("lr, eps and weight_decay must be non-negative")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            lr, wd, eps = group["lr"], group["weight_decay"], group["eps"]
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, v = state["exp_avg"], state["exp_avg_sq"]
                m.mul_(beta1).add_(p.grad, alpha=1 - beta1)
                v.mul_(beta2).addcmul_(p.grad, p.grad, value=1 - beta2)
                if wd:
                    p.mul_(1 - lr * wd)
                step_size = lr * math.sqrt(1 - beta2**t) / (1 - beta1**t)
                p.addcdiv_(m, v.sqrt().add_(eps), value=-step_size)


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    weight_decay: float = 1e-5
    warmup_steps: int = 40
    total_steps: int = 1000
    min_lr: float = 0.0
    betas: tuple[float, float] = field(default=(0.9, 0.999))


def optimizer_state_arrays(opt: AdamW, named_params) -> tuple[dict[str, np.ndarray], dict[str, int]]:
    tensors, steps = {}, {}
    for name, p in named_params:
        st = opt.state.get(p)
        if st:
            tensors[f"opt.m.{name}"] = st["exp_avg"].detach().numpy().copy()
            tensors[f"opt.v.{name}"] = st["exp_avg_sq"].detach().numpy().copy()
            steps[name] = int(st["step"])
    return tensors, steps


def load_optimizer_state(opt: AdamW, named_params, tensors: dict, steps: dict) -> None:
    for name, p in named_params:
        if name in steps:
            opt.state[p] = {
                "step": steps[name],
                "exp_avg": torch.as_tensor(tensors[f"opt.m.{name}"], dtype=DTYPE).clone(),
                "exp_avg_sq": torch.as_tensor(tensors[f"opt.v.{name}"], dtype=DTYPE).clone(),
            }


def module_arrays(module: nn.Module, prefix: str = "model.") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, tensors: dict, prefix: str = "model.") -> None:
    state = {k[len(prefix):]: torch.as_tensor(v, dtype=DTYPE) for k, v in tensors.items() if k.startswith(prefix)}
    module.load_state_dict(state)
