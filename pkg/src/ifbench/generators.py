"""Feed-forward BF -> IF backbones: MSE UNet, Pix2Pix and SPADE-GAN."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .training import TrainState, batch_tensors, seeded

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-5
LAMBDA_RECON = 100.0
PROB_CLAMP = 1e-7
SATURATION_LEVEL = 1e-6
SATURATION_STEPS = 50
GEN_FAMILIES = ("unet", "pix2pix", "spade_gan")


@dataclass(frozen=True)
class GeneratorSpec:
    family: str = "unet"
    depth: int = 5
    base_width: int = 64
    in_channels: int = 3
    out_channels: int = 5
    seed: int = 0
    spade_hidden: int = 32

    def __post_init__(self):
        if self.family not in GEN_FAMILIES:
            raise ValueError(f"unknown generator family {self.family!r}")
        if self.depth < 3:
            raise ValueError("depth must be >= 3")
        if self.base_width < 8:
            raise ValueError("base_width must be >= 8")


@dataclass(frozen=True)
class DiscriminatorSpec:
    widths: tuple[int, ...] = (64, 128, 256, 512)
    in_channels: int = 8
    seed: int = 0

    @property
    def receptive_field(self) -> int:
        # 4x4 kernels; stride 2 for all but the last hidden layer and the head
        strides = [2] * (len(self.widths) - 1) + [1, 1]
        r = 1
        for s in reversed(strides):
            r = r * s + (4 - s)
        return r


def instance_normalize(x: torch.Tensor, eps: float = VAR_FLOOR) -> torch.Tensor:
    """Zero mean, unit variance per sample and channel over the spatial dims."""
    mu = x.mean(dim=(-2, -1), keepdim=True)
    var = x.var(dim=(-2, -1), keepdim=True, unbiased=False)
    return (x - mu) / torch.sqrt(var + eps)


def modulate(x: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor, eps: float = VAR_FLOOR) -> torch.Tensor:
    return instance_normalize(x, eps) * scale + shift


class SpadeNorm(nn.Module):
    """Parameter-free normalisation followed by a condition-driven scale and shift.

    The scale map is ``1 + gamma(condition)`` so a freshly zeroed block is the
    identity modulation.
    """

    def __init__(self, norm_nc: int, cond_nc: int = 3, hidden: int = 32, groups: int | None = None):
        super().__init__()
        self.groups = groups  # None: instance normalisation; else parameter-free group norm
        self.shared = nn.Sequential(nn.Conv2d(cond_nc, hidden, 3, padding=1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, norm_nc, 3, padding=1)
        self.beta = nn.Conv2d(hidden, norm_nc, 3, padding=1)

    def maps(self, condition: torch.Tensor, size) -> tuple[torch.Tensor, torch.Tensor]:
        cond = resample_condition(condition, size)
        h = self.shared(cond)
        return 1.0 + self.gamma(h), self.beta(h)

    def forward(self, x: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        scale, shift = self.maps(condition, x.shape[-2:])
        if self.groups is None:
            return modulate(x, scale, shift)
        return F.group_norm(x, self.groups, eps=VAR_FLOOR) * scale + shift


def resample_condition(condition: torch.Tensor, size) -> torch.Tensor:
    size = tuple(int(s) for s in size)
    if tuple(condition.shape[-2:]) == size:
        return condition
    if condition.shape[-2] > size[0]:
        return F.adaptive_avg_pool2d(condition, size)
    return F.interpolate(condition, size=size, mode="bilinear", align_corners=False)


def spade_modulate(features, condition, block: SpadeNorm):
    """Apply one SPADE block to ``features`` [C,h,w] (or batched) given a BF stack."""
    x = torch.as_tensor(features)
    c = torch.as_tensor(condition, dtype=x.dtype)
    squeeze = x.dim() == 3
    if squeeze:
        x, c = x[None], c[None]
    out = block(x, c)
    return out[0] if squeeze else out


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1), nn.InstanceNorm2d(cout, affine=True), nn.LeakyReLU(0.2),
            nn.Conv2d(cout, cout, 3, padding=1), nn.InstanceNorm2d(cout, affine=True), nn.LeakyReLU(0.2),
        )

    def forward(self, x, condition=None):
        return self.net(x)


class SpadeBlock(nn.Module):
    def __init__(self, cin: int, cout: int, cond_nc: int, hidden: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = SpadeNorm(cout, cond_nc, hidden)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = SpadeNorm(cout, cond_nc, hidden)

    def forward(self, x, condition):
        x = F.leaky_relu(self.norm1(self.conv1(x), condition), 0.2)
        return F.leaky_relu(self.norm2(self.conv2(x), condition), 0.2)


class UNetGenerator(nn.Module):
    """Encoder-decoder with skip connections; SPADE decoder when ``spade`` is set."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        self.depth = spec.depth
        widths = [spec.base_width * 2 ** min(i, 3) for i in range(spec.depth + 1)]
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        cin = spec.in_channels
        for i in range(spec.depth):
            self.enc.append(ConvBlock(cin, widths[i]))
            self.down.append(nn.Conv2d(widths[i], widths[i], 4, stride=2, padding=1))
            cin = widths[i]
        self.bottleneck = ConvBlock(widths[spec.depth - 1], widths[spec.depth])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        spade = spec.family == "spade_gan"
        for i in reversed(range(spec.depth)):
            self.up.append(nn.ConvTranspose2d(widths[i + 1], widths[i], 4, stride=2, padding=1))
            if spade:
                self.dec.append(SpadeBlock(2 * widths[i], widths[i], spec.in_channels, spec.spade_hidden))
            else:
                self.dec.append(ConvBlock(2 * widths[i], widths[i]))
        self.head = nn.Conv2d(widths[0], spec.out_channels, 1)

    def check_size(self, h: int, w: int) -> None:
        k = 2**self.depth
        if h % k or w % k:
            raise ValueError(f"spatial size {h}x{w} not divisible by 2^depth = {k}")

    def encode(self, bf: torch.Tensor):
        self.check_size(*bf.shape[-2:])
        skips = []
        x = bf
        for enc, down in zip(self.enc, self.down):
            x = enc(x)
            skips.append(x)
            x = down(x)
        return self.bottleneck(x), skips

    def decode(self, features, condition: torch.Tensor) -> torch.Tensor:
        x, skips = features
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1), condition)
        return torch.sigmoid(self.head(x))

    def forward(self, bf: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(bf), bf)


class PatchDiscriminator(nn.Module):
    """Scores overlapping patches of (BF, IF) pairs; ``forward`` returns logits."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        layers = []
        cin = spec.in_channels
        n = len(spec.widths)
        for i, w in enumerate(spec.widths):
            stride = 2 if i < n - 1 else 1
            layers.append(nn.Conv2d(cin, w, 4, stride=stride, padding=1))
            if i > 0:
                layers.append(nn.InstanceNorm2d(w, affine=True))
            layers.append(nn.LeakyReLU(0.2))
            cin = w
        layers.append(nn.Conv2d(cin, 1, 4, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, bf: torch.Tensor, if_stack: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([bf, if_stack], dim=1))

    def scores(self, bf, if_stack) -> torch.Tensor:
        return torch.sigmoid(self(bf, if_stack))


def build_generator(spec: GeneratorSpec) -> UNetGenerator:
    with seeded(spec.seed):
        return UNetGenerator(spec)


def build_discriminator(spec: DiscriminatorSpec) -> PatchDiscriminator:
    with seeded(spec.seed + 7919):
        return PatchDiscriminator(spec)


def parameter_checksum(model: nn.Module) -> float:
    return float(sum(p.detach().double().abs().sum() for p in model.parameters()))


def discriminator_loss(p_real: torch.Tensor, p_fake: torch.Tensor, eps: float = PROB_CLAMP) -> torch.Tensor:
    """-log D(real) - log(1 - D(fake)), patch-averaged, from probabilities."""
    p_real = p_real.clamp(eps, 1 - eps)
    p_fake = p_fake.clamp(eps, 1 - eps)
    return -(torch.log(p_real).mean() + torch.log1p(-p_fake).mean())


def discriminator_loss_logits(l_real: torch.Tensor, l_fake: torch.Tensor) -> torch.Tensor:
    return -(F.logsigmoid(l_real).mean() + F.logsigmoid(-l_fake).mean())


def generator_adv_loss_logits(l_fake: torch.Tensor) -> torch.Tensor:
    # non-saturating form: maximise log D(G(bf))
    return -F.logsigmoid(l_fake).mean()


@dataclass
class GanLossTerms:
    adv_g: float
    adv_d: float
    recon: float
    lambda_recon: float = LAMBDA_RECON

    @property
    def total_g(self) -> float:
        return self.adv_g + self.lambda_recon * self.recon

    def as_dict(self) -> dict[str, float]:
        d = asdict(self)
        d["total_g"] = self.total_g
        return d


def supervised_step(state: TrainState, batch) -> tuple[TrainState, float]:
    bf, gt = batch_tensors(batch)
    state.model.train()
    pred = state.model(bf)
    loss = F.mse_loss(pred, gt)
    value = float(loss.detach())
    state.check_finite({"mse": value})
    state.opt.zero_grad(set_to_none=True)
    loss.backward()
    state.opt.step()
    state.step += 1
    state.record({"mse": value})
    return state, value


def gan_step(state: TrainState, batch) -> tuple[TrainState, GanLossTerms]:
    if state.disc is None or state.opt_d is None:
        raise ValueError("gan_step needs a discriminator")
    bf, gt = batch_tensors(batch)
    lam = float(state.spec.get("lambda_recon", LAMBDA_RECON))
    G, D = state.model, state.disc
    G.train()
    D.train()

    with torch.no_grad():
        fake = G(bf)
    adv_d = discriminator_loss_logits(D(bf, gt), D(bf, fake))
    state.opt_d.zero_grad(set_to_none=True)
    adv_d.backward()
    state.opt_d.step()

    fake = G(bf)
    adv_g = generator_adv_loss_logits(D(bf, fake))
    recon = F.l1_loss(fake, gt)
    total = adv_g + lam * recon
    state.opt.zero_grad(set_to_none=True)
    total.backward()
    state.opt.step()

    terms = GanLossTerms(float(adv_g.detach()), float(adv_d.detach()), float(recon.detach()), lam)
    state.check_finite(terms.as_dict())
    state.step += 1
    state.record(terms.as_dict())

    run = state.extra.get("saturated_run", 0)
    run = run + 1 if terms.adv_d < SATURATION_LEVEL else 0
    state.extra["saturated_run"] = run
    if run == SATURATION_STEPS:
        msg = f"discriminator saturated at step {state.step} (adv_d < {SATURATION_LEVEL} for {run} steps)"
        log.warning(msg)
        state.events.append(msg)
    return state, terms


def _as_batch(bf) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(np.asarray(bf, dtype=np.float32)) if not torch.is_tensor(bf) else bf.float()
    single = x.dim() == 3
    return (x[None] if single else x), single


def infer(model: UNetGenerator, bf) -> np.ndarray:
    """Deterministic BF [3,H,W] -> IF [5,H,W] in unit range."""
    x, single = _as_batch(bf)
    if x.dim() != 4 or x.shape[1] != model.spec.in_channels:
        raise ValueError(f"expected BF stack with {model.spec.in_channels} channels, got {tuple(x.shape)}")
    model.eval()
    with torch.no_grad():
        y = model(x).clamp(0.0, 1.0)
    y = y.numpy()
    return y[0] if single else y
