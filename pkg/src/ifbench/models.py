"""Family registry: build a TrainState for any backbone, train it, predict with it."""
from __future__ import annotations

import copy
import logging
from typing import Sequence

import numpy as np
import torch

from . import diffusion as dif
from . import generators as gen
from .training import (
    DIFFUSION_FAMILIES,
    FAMILIES,
    GAN_FAMILIES,
    MetricsLog,
    TrainState,
)

log = logging.getLogger(__name__)

# full-scale defaults; toy presets override sizes and step counts
DEFAULTS: dict[str, dict] = {
    "unet": dict(depth=5, base_width=64, lr=1e-4, betas=(0.9, 0.999)),
    "pix2pix": dict(depth=5, base_width=64, lr=2e-4, betas=(0.5, 0.999),
                    disc_widths=(64, 128, 256, 512), lambda_recon=100.0),
    "spade_gan": dict(depth=5, base_width=64, lr=2e-4, betas=(0.5, 0.999),
                      disc_widths=(64, 128, 256, 512), lambda_recon=100.0, spade_hidden=64),
    "palette": dict(depth=4, base_width=64, attn_levels=2, lr=1e-4, betas=(0.9, 0.999),
                    T=1000, beta_start=1e-4, beta_end=2e-2, clip_policy="x0", separate_channels=False,
                    ema_decay=0.999),
    "spade_diffusion": dict(depth=4, base_width=64, attn_levels=2, lr=1e-4, betas=(0.9, 0.999),
                            T=1000, beta_start=1e-4, beta_end=2e-2, clip_policy="x0",
                            separate_channels=False, spade_hidden=64, ema_decay=0.999),
}


def resolve_spec(family: str, spec: dict | None = None) -> dict:
    if family not in FAMILIES:
        raise ValueError(f"unknown model family {family!r}; choose from {', '.join(FAMILIES)}")
    out = dict(DEFAULTS[family])
    out.update(spec or {})
    out.setdefault("seed", 0)
    out["betas"] = list(out["betas"])
    if "disc_widths" in out:
        out["disc_widths"] = list(out["disc_widths"])
    return out


def generator_spec(family: str, spec: dict) -> gen.GeneratorSpec:
    return gen.GeneratorSpec(family=family, depth=int(spec["depth"]), base_width=int(spec["base_width"]),
                             seed=int(spec["seed"]), spade_hidden=int(spec.get("spade_hidden", 32)))


def denoiser_spec(family: str, spec: dict) -> dif.DenoiserSpec:
    return dif.DenoiserSpec(family=family, depth=int(spec["depth"]), base_width=int(spec["base_width"]),
                            attn_levels=int(spec.get("attn_levels", 2)), seed=int(spec["seed"]),
                            separate_channels=bool(spec.get("separate_channels", False)),
                            spade_hidden=int(spec.get("spade_hidden", 32)))


def new_state(family: str, spec: dict | None = None) -> TrainState:
    spec = resolve_spec(family, spec)
    seed = int(spec["seed"])
    if family in DIFFUSION_FAMILIES:
        model = dif.build_denoiser(denoiser_spec(family, spec))
    else:
        model = gen.build_generator(generator_spec(family, spec))
    opt = torch.optim.Adam(model.parameters(), lr=float(spec["lr"]), betas=tuple(spec["betas"]))
    disc = opt_d = None
    if family in GAN_FAMILIES:
        disc = gen.build_discriminator(gen.DiscriminatorSpec(widths=tuple(spec["disc_widths"]), seed=seed))
        opt_d = torch.optim.Adam(disc.parameters(), lr=float(spec["lr"]), betas=tuple(spec["betas"]))
    ema = None
    if family in DIFFUSION_FAMILIES:
        ema = copy.deepcopy(model).requires_grad_(False).eval()
    return TrainState(
        family=family, spec=spec, model=model, opt=opt, disc=disc, opt_d=opt_d, ema=ema,
        rng=np.random.default_rng(seed), torch_rng=torch.Generator().manual_seed(seed),
    )


def train_step(state: TrainState, batch) -> dict[str, float]:
    if state.family == "unet":
        _, loss = gen.supervised_step(state, batch)
        return {"mse": loss}
    if state.family in GAN_FAMILIES:
        _, terms = gen.gan_step(state, batch)
        return terms.as_dict()
    _, loss = dif.train_step_diffusion(state, batch, dif.schedule_from_spec(state.spec))
    state.update_ema(float(state.spec.get("ema_decay", 0.999)))
    return {"eps_mse": loss}


def predict(state: TrainState, bf, seed: int = 0) -> np.ndarray:
    """Unit-range IF prediction for one BF stack [3,H,W] (or a batch)."""
    if state.family in DIFFUSION_FAMILIES:
        return dif.sample(state.sampler, bf, dif.schedule_from_spec(state.spec), seed=seed,
                          clip_policy=state.spec.get("clip_policy", "x0"))
    return gen.infer(state.model, bf)


def site_seed(base: int, index: int) -> int:
    return int(base) * 100003 + index


def validation_rmse(state: TrainState, pairs: Sequence, seed: int = 0) -> float:
    errs = [np.mean((predict(state, p.bf, seed=site_seed(seed, i)) - p.if_gt) ** 2) for i, p in enumerate(pairs)]
    return float(np.sqrt(np.mean(errs)))


def fit(state: TrainState, train_pairs: Sequence, epochs: int = 1, batch_size: int = 1,
        steps_per_epoch: int | None = None, val_pairs: Sequence | None = None,
        metrics_log: MetricsLog | None = None) -> dict[str, list[float]]:
    """Run ``epochs`` passes; returns per-epoch training loss and validation RMSE series.

    Data order is drawn from ``state.rng`` so runs repeat exactly for a
    fixed seed. ``steps_per_epoch`` caps (or extends, by cycling) each pass.
    """
    main = {"unet": "mse", "pix2pix": "recon", "spade_gan": "recon"}.get(state.family, "eps_mse")
    series: dict[str, list[float]] = {"train_loss": [], "val_rmse": []}
    n = len(train_pairs)
    for _ in range(epochs):
        order = state.rng.permutation(n)
        if steps_per_epoch is not None:
            reps = -(-steps_per_epoch * batch_size // n)
            order = np.concatenate([order] + [state.rng.permutation(n) for _ in range(reps - 1)])
            order = order[: steps_per_epoch * batch_size]
        losses = []
        for b in range(0, len(order), batch_size):
            batch = [train_pairs[i] for i in order[b:b + batch_size]]
            terms = train_step(state, batch)
            losses.append(terms[main])
            if metrics_log is not None:
                metrics_log.write(state.step, state.epoch, terms)
        state.epoch += 1
        series["train_loss"].append(float(np.mean(losses)))
        if val_pairs:
            rmse = validation_rmse(state, val_pairs, seed=int(state.spec["seed"]))
            series["val_rmse"].append(rmse)
            if metrics_log is not None:
                metrics_log.write(state.step, state.epoch, {"val_rmse": rmse})
        log.info("%s epoch %d: loss %.5f", state.family, state.epoch, series["train_loss"][-1])
    state.extra.setdefault("series", {"train_loss": [], "val_rmse": []})
    for k in series:
        state.extra["series"][k] = state.extra["series"].get(k, []) + series[k]
    return series
