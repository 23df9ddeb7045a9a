"""Training state shared by every backbone, with its checkpoint format and metrics log."""
from __future__ import annotations

import base64
import csv
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .checkpoint import load_arrays, save_arrays

log = logging.getLogger(__name__)

FAMILIES = ("unet", "pix2pix", "spade_gan", "palette", "spade_diffusion")
GAN_FAMILIES = ("pix2pix", "spade_gan")
DIFFUSION_FAMILIES = ("palette", "spade_diffusion")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, snapshot: Path | None = None):
        super().__init__(msg if snapshot is None else f"{msg} (snapshot: {snapshot})")
        self.snapshot = snapshot


@contextmanager
def seeded(seed: int):
    """Run a block under a fixed torch seed without disturbing the global stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


@dataclass
class TrainState:
    family: str
    spec: dict  # constructor arguments for the networks
    model: torch.nn.Module
    opt: torch.optim.Optimizer
    disc: torch.nn.Module | None = None
    opt_d: torch.optim.Optimizer | None = None
    step: int = 0
    epoch: int = 0
    history: list[tuple[int, dict[str, float]]] = field(default_factory=list)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    torch_rng: torch.Generator = field(default_factory=torch.Generator)
    events: list[str] = field(default_factory=list)
    snapshot_dir: Path | None = None
    ema: torch.nn.Module | None = None  # weight average used for sampling (diffusion)
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def sampler(self) -> torch.nn.Module:
        return self.ema if self.ema is not None else self.model

    @torch.no_grad()
    def update_ema(self, decay: float) -> None:
        """Exponential moving average with the usual warm-up, (1 + n) / (10 + n) early on."""
        if self.ema is None:
            return
        d = min(decay, (1.0 + self.step) / (10.0 + self.step))
        for e, p in zip(self.ema.parameters(), self.model.parameters()):
            e.mul_(d).add_(p.detach(), alpha=1.0 - d)
        for e, b in zip(self.ema.buffers(), self.model.buffers()):
            e.copy_(b)

    def record(self, losses: dict[str, float]) -> None:
        self.history.append((self.step, dict(losses)))

    def check_finite(self, losses: dict[str, float]) -> None:
        bad = {k: v for k, v in losses.items() if not math.isfinite(v)}
        if not bad:
            return
        snap = None
        if self.snapshot_dir is not None:
            snap = Path(self.snapshot_dir) / f"diverged_step{self.step}.ckpt"
            save_state(self, snap)
        raise TrainingDiverged(f"non-finite loss at step {self.step}: {bad}", snap)


def _flatten(prefix: str, sd: dict, out: dict[str, np.ndarray]) -> None:
    for k, v in sd.items():
        out[f"{prefix}.{k}"] = v.detach().cpu().numpy()


def _opt_arrays(prefix: str, opt: torch.optim.Optimizer, out: dict) -> dict:
    sd = opt.state_dict()
    for pid, st in sd["state"].items():
        for k, v in st.items():
            out[f"{prefix}.{pid}.{k}"] = torch.as_tensor(v).detach().cpu().numpy()
    return sd["param_groups"]


def _restore_opt(prefix: str, opt: torch.optim.Optimizer, groups, arrays) -> None:
    state: dict[int, dict] = {}
    plen = len(prefix) + 1
    for name, arr in arrays.items():
        if not name.startswith(prefix + "."):
            continue
        pid, key = name[plen:].split(".", 1)
        state.setdefault(int(pid), {})[key] = torch.from_numpy(arr.copy())
    opt.load_state_dict({"state": state, "param_groups": groups})


def _b64(t: torch.Tensor) -> str:
    return base64.b64encode(t.numpy().tobytes()).decode()


def save_state(state: TrainState, path) -> int:
    arrays: dict[str, np.ndarray] = {}
    _flatten("model", state.model.state_dict(), arrays)
    meta = dict(
        family=state.family, spec=state.spec, step=state.step, epoch=state.epoch,
        history=[[s, h] for s, h in state.history], events=state.events,
        rng=state.rng.bit_generator.state, torch_rng=_b64(state.torch_rng.get_state()),
        extra=state.extra,
    )
    meta["opt"] = _opt_arrays("opt", state.opt, arrays)
    if state.ema is not None:
        _flatten("ema", state.ema.state_dict(), arrays)
    if state.disc is not None:
        _flatten("disc", state.disc.state_dict(), arrays)
        meta["opt_d"] = _opt_arrays("opt_d", state.opt_d, arrays)
    return save_arrays(path, arrays, meta)


def save_weights(model: torch.nn.Module, path, meta: dict | None = None) -> int:
    arrays: dict[str, np.ndarray] = {}
    _flatten("model", model.state_dict(), arrays)
    return save_arrays(path, arrays, meta)


def load_state(path) -> TrainState:
    from .models import new_state

    arrays, meta = load_arrays(path)
    state = new_state(meta["family"], meta["spec"])
    state.model.load_state_dict({k[6:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model.")})
    _restore_opt("opt", state.opt, meta["opt"], arrays)
    if state.ema is not None:
        state.ema.load_state_dict({k[4:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("ema.")})
    if state.disc is not None:
        state.disc.load_state_dict({k[5:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("disc.")})
        _restore_opt("opt_d", state.opt_d, meta["opt_d"], arrays)
    state.step, state.epoch = meta["step"], meta["epoch"]
    state.history = [(s, h) for s, h in meta["history"]]
    state.events = list(meta["events"])
    state.extra = dict(meta.get("extra", {}))
    state.rng = np.random.default_rng()
    state.rng.bit_generator.state = meta["rng"]
    raw = np.frombuffer(base64.b64decode(meta["torch_rng"]), dtype=np.uint8).copy()
    state.torch_rng.set_state(torch.from_numpy(raw))
    return state


def batch_tensors(batch: Sequence) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Stack SitePairs (unit range) into ``(bf, if_gt)`` float tensors."""
    bf = torch.from_numpy(np.stack([p.bf for p in batch]).astype(np.float32))
    if any(p.if_gt is None for p in batch):
        return bf, None
    gt = torch.from_numpy(np.stack([p.if_gt for p in batch]).astype(np.float32))
    return bf, gt


class MetricsLog:
    """Append-only ``step,epoch,term,value,wall_clock`` log."""

    header = ["step", "epoch", "term", "value", "wall_clock"]

    def __init__(self, path):
        self.path = Path(path)
        self.t0 = time.monotonic()
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.header)

    def write(self, step: int, epoch: int, terms: dict[str, float]) -> None:
        now = time.monotonic() - self.t0
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            for k, v in terms.items():
                w.writerow([step, epoch, k, repr(float(v)), f"{now:.3f}"])
