"""Compute-cost accounting for a finished run."""
from __future__ import annotations

import json
import os
import platform
import resource
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from ..models import predict, site_seed
from ..training import load_state

TIMINGS_FILE = "timings.json"
RESOURCES_FILE = "resources.json"
EXTRAPOLATE_EPOCHS = 10


@dataclass
class ResourceReport:
    family: str
    train_seconds: float
    epochs: int
    train_seconds_10_epochs: float
    peak_host_bytes: int
    peak_accelerator_bytes: int | None
    infer_seconds_per_site: float
    infer_sites: int
    generator_bytes: int
    discriminator_bytes: int
    state_bytes: int
    environment: dict = field(default_factory=dict)
    note: str = "timings depend on hardware and load; compare only within one environment"

    def __post_init__(self):
        for k in ("train_seconds", "train_seconds_10_epochs", "peak_host_bytes", "infer_seconds_per_site",
                  "generator_bytes", "discriminator_bytes", "state_bytes"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be nonnegative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ResourceReport":
        return cls(**json.loads(Path(path).read_text()))


def environment() -> dict:
    env = dict(
        python=sys.version.split()[0], platform=platform.platform(), machine=platform.machine(),
        cpu_count=os.cpu_count(), torch=torch.__version__, torch_threads=torch.get_num_threads(),
        device="cuda" if torch.cuda.is_available() else "cpu",
    )
    if env["device"] == "cuda":
        env["accelerator"] = torch.cuda.get_device_name(0)
    return env


def peak_host_bytes() -> int:
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return int(rss if sys.platform == "darwin" else rss * 1024)


def peak_accelerator_bytes() -> int | None:
    return int(torch.cuda.max_memory_allocated()) if torch.cuda.is_available() else None


def time_inference(state, pairs, n_sites: int = 10, seed: int = 0) -> tuple[float, int]:
    """Mean seconds per site over at least ``n_sites`` predictions (cycling the list)."""
    if not pairs:
        raise ValueError("no sites to time")
    n = max(n_sites, 1)
    total = 0.0
    for i in range(n):
        p = pairs[i % len(pairs)]
        t0 = time.monotonic()
        predict(state, p.bf, seed=site_seed(seed, i))
        total += time.monotonic() - t0
    return total / n, n


def _size(path: Path) -> int:
    return path.stat().st_size if path.exists() else 0


def record_resources(run_dir, pairs=None, n_sites: int = 10) -> ResourceReport:
    """Fill a ResourceReport for ``run_dir``.

    Per-site inference time comes from the run's own prediction stage when it
    covered at least ``n_sites`` sites; otherwise inference is timed afresh on
    ``pairs`` (default: the run's test split).
    """
    run_dir = Path(run_dir)
    ck = run_dir / "checkpoints"
    timings = json.loads((run_dir / TIMINGS_FILE).read_text())
    state = load_state(ck / "state.ckpt")
    stored = timings.get("infer_seconds", [])
    if pairs is None and len(stored) >= n_sites:
        per_site, n = sum(stored) / len(stored), len(stored)
    else:
        if pairs is None:
            from .run import load_split

            pairs = load_split(run_dir, "test")
        per_site, n = time_inference(state, pairs, n_sites, seed=int(state.spec.get("seed", 0)))
    epochs = int(timings["epochs"])
    train_s = float(timings["train_seconds"])
    report = ResourceReport(
        family=state.family, train_seconds=train_s, epochs=epochs,
        train_seconds_10_epochs=train_s / max(epochs, 1) * EXTRAPOLATE_EPOCHS,
        peak_host_bytes=peak_host_bytes(), peak_accelerator_bytes=peak_accelerator_bytes(),
        infer_seconds_per_site=per_site, infer_sites=n,
        generator_bytes=_size(ck / "generator.ckpt"), discriminator_bytes=_size(ck / "discriminator.ckpt"),
        state_bytes=_size(ck / "state.ckpt"), environment=environment(),
    )
    (run_dir / RESOURCES_FILE).write_text(report.to_json())
    return report


def resource_table(reports) -> list[dict]:
    rows = []
    for r in reports:
        rows.append({
            "model": r.family,
            "train_s_10_epochs": round(r.train_seconds_10_epochs, 3),
            "infer_s_per_site": round(r.infer_seconds_per_site, 5),
            "generator_MB": round(r.generator_bytes / 1e6, 3),
            "discriminator_MB": round(r.discriminator_bytes / 1e6, 3),
            "peak_host_MB": round(r.peak_host_bytes / 1e6, 1),
        })
    return rows

