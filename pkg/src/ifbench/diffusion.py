"""DDPM machinery and the two conditional diffusion backbones.

Palette feeds the BF stack to the denoiser by channel concatenation;
SPADE-Diffusion injects it through spatially-adaptive normalisation in
every residual block. Both predict the added noise. Images live in
[-1, 1] inside this module and are mapped back to [0, 1] on output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .generators import SpadeNorm
from .training import TrainState, batch_tensors, seeded

CLIP_POLICIES = ("x0", "xt", "none")


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = self.betas
        if b.ndim != 1 or b.size < 1:
            raise ValueError("betas must be a non-empty vector")
        if not np.all((b > 0) & (b < 1)):
            raise ValueError("betas must lie strictly inside (0, 1)")

    @property
    def T(self) -> int:
        return int(self.betas.size)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def alpha_bars_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bars[:-1]])

    @property
    def posterior_variance(self) -> np.ndarray:
        return self.betas * (1.0 - self.alpha_bars_prev) / (1.0 - self.alpha_bars)

    @property
    def posterior_coef_x0(self) -> np.ndarray:
        return self.betas * np.sqrt(self.alpha_bars_prev) / (1.0 - self.alpha_bars)

    @property
    def posterior_coef_xt(self) -> np.ndarray:
        return (1.0 - self.alpha_bars_prev) * np.sqrt(self.alphas) / (1.0 - self.alpha_bars)

    # 1-based accessors
    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t - 1])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2,
                  shape: str = "linear") -> DiffusionSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if shape != "linear":
        raise ValueError(f"unsupported schedule shape {shape!r}")
    return DiffusionSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def scaled_beta_range(T: int) -> tuple[float, float]:
    """The 1000-step range (1e-4, 2e-2) rescaled so shorter chains still end near pure noise."""
    s = 1000.0 / T
    return min(1e-4 * s, 0.5), min(2e-2 * s, 0.999)


@dataclass
class NoisySample:
    x_t: object
    t: int
    eps: object = None


def forward_step(x_prev, t: int, schedule: DiffusionSchedule, eps) -> NoisySample:
    if t < 1:
        raise ValueError("t must be >= 1")
    b = schedule.beta(t)
    return NoisySample(math.sqrt(1.0 - b) * x_prev + math.sqrt(b) * eps, t, eps)


def forward_marginal(x0, t: int, schedule: DiffusionSchedule, eps) -> NoisySample:
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must be in [1, {schedule.T}]")
    ab = schedule.alpha_bar(t)
    return NoisySample(math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps, t, eps)


@dataclass(frozen=True)
class DenoiserSpec:
    family: str = "palette"
    depth: int = 4
    base_width: int = 64
    attn_levels: int = 2
    cond_channels: int = 3
    out_channels: int = 5
    separate_channels: bool = False
    spade_hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("palette", "spade_diffusion"):
            raise ValueError(f"unknown diffusion family {self.family!r}")
        if self.depth < 2:
            raise ValueError("denoiser depth must be >= 2")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int, spade: bool, cond_nc: int, hidden: int):
        super().__init__()
        self.spade = spade
        if spade:
            self.norm1 = SpadeNorm(cin, cond_nc, hidden, groups=_groups(cin))
            self.norm2 = SpadeNorm(cout, cond_nc, hidden, groups=_groups(cout))
        else:
            self.norm1 = nn.GroupNorm(_groups(cin), cin)
            self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def _norm(self, norm, x, cond):
        return norm(x, cond) if self.spade else norm(x)

    def forward(self, x, temb, cond):
        h = self.conv1(F.silu(self._norm(self.norm1, x, cond)))
        t = self.temb(F.silu(temb))[:, :, None, None]
        if self.spade:
            # normalisation would cancel part of a per-channel constant, so time enters after it
            h = self.conv2(F.silu(self.norm2(h, cond) + t))
        else:
            h = self.conv2(F.silu(self.norm2(h + t)))
        return h + self.skip(x)


class ConditionPyramid(nn.Module):
    """BF features at every denoiser scale, the input of the SPADE blocks.

    Raw BF pixels seen through a 3x3 window say little about where the
    fluorescent structures are; a few convolutions per scale give each
    modulation map a receptive field comparable to a cell.
    """

    def __init__(self, cond_nc: int, width: int, levels: int):
        super().__init__()
        self.stages = nn.ModuleList()
        for i in range(levels):
            first = (nn.Conv2d(cond_nc, width, 3, padding=1) if i == 0
                     else nn.Conv2d(width, width, 3, stride=2, padding=1))
            self.stages.append(nn.Sequential(first, nn.SiLU(), nn.Conv2d(width, width, 3, padding=1), nn.SiLU()))

    def forward(self, cond: torch.Tensor) -> list[torch.Tensor]:
        out, h = [], cond
        for stage in self.stages:
            h = stage(h)
            out.append(h)
        return out


class AttnBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        n, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(n, 3, c, h * w).unbind(1)
        att = torch.softmax(torch.einsum("ncq,nck->nqk", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("nqk,nck->ncq", att, v).reshape(n, c, h, w)
        return x + self.proj(out)


class AttentionUNet(nn.Module):
    """Time-conditioned UNet with self-attention at the coarsest ``attn_levels`` scales."""

    def __init__(self, spec: DenoiserSpec, out_channels: int | None = None):
        super().__init__()
        self.spec = spec
        spade = spec.family == "spade_diffusion"
        self.concat = not spade
        out_ch = out_channels or spec.out_channels
        in_ch = out_ch + (spec.cond_channels if self.concat else 0)
        w = [spec.base_width * min(2**i, 4) for i in range(spec.depth)]
        self.temb_dim = 4 * spec.base_width
        self.temb = nn.Sequential(
            nn.Linear(spec.base_width, self.temb_dim), nn.SiLU(), nn.Linear(self.temb_dim, self.temb_dim)
        )
        self.stem = nn.Conv2d(in_ch, w[0], 3, padding=1)
        self.cond_pyramid = ConditionPyramid(spec.cond_channels, spec.spade_hidden, spec.depth) if spade else None
        args = dict(temb=self.temb_dim, spade=spade, cond_nc=spec.spade_hidden, hidden=spec.spade_hidden)
        attn_from = spec.depth - spec.attn_levels
        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        for i in range(spec.depth):
            cin = w[i - 1] if i else w[0]
            self.down_blocks.append(ResBlock(cin, w[i], **args))
            self.down_attn.append(AttnBlock(w[i]) if i >= attn_from else nn.Identity())
            self.downsample.append(
                nn.Conv2d(w[i], w[i], 3, stride=2, padding=1) if i < spec.depth - 1 else nn.Identity()
            )
        self.mid1 = ResBlock(w[-1], w[-1], **args)
        self.mid_attn = AttnBlock(w[-1])
        self.mid2 = ResBlock(w[-1], w[-1], **args)
        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(spec.depth)):
            cin = (w[i + 1] if i < spec.depth - 1 else w[-1]) + w[i]
            self.upsample.append(nn.Upsample(scale_factor=2, mode="nearest") if i < spec.depth - 1 else nn.Identity())
            self.up_blocks.append(ResBlock(cin, w[i], **args))
            self.up_attn.append(AttnBlock(w[i]) if i >= attn_from else nn.Identity())
        self.out_norm = nn.GroupNorm(_groups(w[0]), w[0])
        self.out = nn.Conv2d(w[0], out_ch, 3, padding=1)

    def forward(self, x_t: torch.Tensor, cond: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        k = 2 ** (self.spec.depth - 1)
        if x_t.shape[-1] % k or x_t.shape[-2] % k:
            raise ValueError(f"spatial size not divisible by {k}")
        temb = self.temb(timestep_embedding(t, self.spec.base_width))
        h = self.stem(torch.cat([x_t, cond], dim=1) if self.concat else x_t)
        levels = self.cond_pyramid(cond) if self.cond_pyramid is not None else [cond] * self.spec.depth
        skips = []
        for i, (block, attn, down) in enumerate(zip(self.down_blocks, self.down_attn, self.downsample)):
            h = attn(block(h, temb, levels[i]))
            skips.append(h)
            h = down(h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb, levels[-1])), temb, levels[-1])
        for i, (block, attn, up, skip) in enumerate(zip(self.up_blocks, self.up_attn, self.upsample, reversed(skips))):
            h = attn(block(torch.cat([up(h), skip], dim=1), temb, levels[-1 - i]))
        return self.out(F.silu(self.out_norm(h)))


class PerChannelDenoiser(nn.Module):
    """One single-channel denoiser per IF channel, evaluated side by side."""

    def __init__(self, spec: DenoiserSpec):
        super().__init__()
        self.spec = spec
        self.nets = nn.ModuleList(AttentionUNet(spec, out_channels=1) for _ in range(spec.out_channels))

    def forward(self, x_t, cond, t):
        return torch.cat([net(x_t[:, c:c + 1], cond, t) for c, net in enumerate(self.nets)], dim=1)


def build_denoiser(spec: DenoiserSpec) -> nn.Module:
    with seeded(spec.seed):
        return PerChannelDenoiser(spec) if spec.separate_channels else AttentionUNet(spec)


def schedule_from_spec(spec: dict) -> DiffusionSchedule:
    T = int(spec.get("T", 1000))
    lo, hi = scaled_beta_range(T)
    return make_schedule(T, float(spec.get("beta_start") or lo), float(spec.get("beta_end") or hi))


def train_step_diffusion(state: TrainState, batch, schedule: DiffusionSchedule) -> tuple[TrainState, float]:
    bf, gt = batch_tensors(batch)
    x0 = gt * 2.0 - 1.0
    cond = bf * 2.0 - 1.0
    n = x0.shape[0]
    g = state.torch_rng
    t = torch.randint(1, schedule.T + 1, (n,), generator=g)
    eps = torch.randn(x0.shape, generator=g)
    ab = torch.as_tensor(schedule.alpha_bars, dtype=torch.float32)[t - 1].view(n, 1, 1, 1)
    x_t = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    state.model.train()
    eps_hat = state.model(x_t, cond, t)
    loss = F.mse_loss(eps_hat, eps)
    value = float(loss.detach())
    state.check_finite({"eps_mse": value})
    state.opt.zero_grad(set_to_none=True)
    loss.backward()
    state.opt.step()
    state.step += 1
    state.record({"eps_mse": value})
    return state, value


class SamplingError(RuntimeError):
    pass


def sample(model: nn.Module, bf, schedule: DiffusionSchedule, seed: int = 0,
           clip_policy: str = "x0") -> np.ndarray:
    """Ancestral sampling from pure noise; returns IF in unit range.

    ``clip_policy``: "x0" clamps the predicted clean image to [-1, 1] each
    step, "xt" clamps the running sample, "none" leaves both untouched.
    The reverse variance is the schedule's posterior variance.
    """
    if clip_policy not in CLIP_POLICIES:
        raise ValueError(f"unknown clip policy {clip_policy!r}")
    x = torch.as_tensor(np.asarray(bf, dtype=np.float32)) if not torch.is_tensor(bf) else bf.float()
    single = x.dim() == 3
    if single:
        x = x[None]
    if x.shape[1] != model.spec.cond_channels:
        raise ValueError(f"expected {model.spec.cond_channels} BF channels, got {x.shape[1]}")
    cond = x * 2.0 - 1.0
    n, _, h, w = cond.shape
    g = torch.Generator().manual_seed(int(seed))
    xt = torch.randn((n, model.spec.out_channels, h, w), generator=g)
    ab = schedule.alpha_bars
    c0, ct = schedule.posterior_coef_x0, schedule.posterior_coef_xt
    var = schedule.posterior_variance
    model.eval()
    with torch.no_grad():
        for t in range(schedule.T, 0, -1):
            tt = torch.full((n,), t, dtype=torch.long)
            eps_hat = model(xt, cond, tt)
            i = t - 1
            x0 = (xt - math.sqrt(1.0 - ab[i]) * eps_hat) / math.sqrt(ab[i])
            if clip_policy == "x0":
                x0 = x0.clamp(-1.0, 1.0)
            mean = c0[i] * x0 + ct[i] * xt
            if t > 1:
                xt = mean + math.sqrt(var[i]) * torch.randn(mean.shape, generator=g)
            else:
                xt = mean
            if clip_policy == "xt":
                xt = xt.clamp(-1.0, 1.0)
            if not torch.isfinite(xt).all():
                raise SamplingError(f"non-finite sample at step {t}")
    out = ((xt + 1.0) / 2.0).clamp(0.0, 1.0).numpy()
    return out[0] if single else out
