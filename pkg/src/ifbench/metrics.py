"""Per-channel image quality metrics and the reports built from them."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from . import kernels
from .dataio import IF_CHANNELS, PlateManifest, PreprocessParams, is_informative, load_site

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
ALPHA = 0.05
METRICS = ("mse", "psnr", "ssim")


def _pair(pred, gt):
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(gt, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(pred, gt) -> float:
    a, b = _pair(pred, gt)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(m: float, max_val: float = 255.0) -> float:
    if m <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(max_val**2 / m)))


def psnr(pred, gt, max_val: float = 255.0) -> float:
    return psnr_from_mse(mse(pred, gt), max_val)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    if size % 2 != 1:
        raise ValueError("SSIM window size must be odd")
    x = np.arange(size) - size // 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def ssim(pred, gt, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
         k1: float = SSIM_K1, k2: float = SSIM_K2, data_range: float = 255.0) -> float:
    """Mean SSIM over all fully contained Gaussian windows."""
    a, b = _pair(pred, gt)
    if a.ndim != 2:
        raise ValueError("ssim expects a single 2-D channel")
    if window > min(a.shape):
        raise ValueError(f"window {window} larger than image {a.shape}")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    return float(kernels.ssim_mean(a, b, gaussian_window(window, sigma), c1, c2))


@dataclass(frozen=True)
class ChannelMetricRecord:
    site_id: str
    channel: int  # 1..5 = Mito, AGP, RNA, ER, DNA
    mse: float
    psnr: float
    ssim: float


def channel_records(site_id: str, pred: np.ndarray, gt: np.ndarray, max_val: float = 255.0,
                    window: int = SSIM_WINDOW) -> list[ChannelMetricRecord]:
    out = []
    for c in range(gt.shape[0]):
        m = mse(pred[c], gt[c])
        out.append(ChannelMetricRecord(site_id, c + 1, m, psnr_from_mse(m, max_val),
                                       ssim(pred[c], gt[c], window=window, data_range=max_val)))
    return out


@dataclass
class QualityReport:
    model: str
    records: list[ChannelMetricRecord]
    excluded: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)

    def values(self, metric: str, channel: int) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.records if r.channel == channel])

    @property
    def channels(self) -> list[int]:
        return sorted({r.channel for r in self.records})

    def summary(self) -> dict:
        out = {}
        for metric in METRICS:
            out[metric] = {}
            for c in self.channels:
                v = self.values(metric, c)
                out[metric][IF_CHANNELS[c - 1]] = dict(
                    n=int(v.size), mean=float(v.mean()), std=float(v.std()),
                    median=float(np.median(v)),
                )
        return out

    def pvalues(self, metric: str) -> dict[tuple[int, int], float]:
        """Two-sided Mann-Whitney U p-value for every channel pair."""
        out = {}
        for a, b in combinations(self.channels, 2):
            x, y = self.values(metric, a), self.values(metric, b)
            if np.all(x == x[0]) and np.all(y == y[0]) and x[0] == y[0]:
                p = 1.0
            else:
                p = float(stats.mannwhitneyu(x, y, alternative="two-sided").pvalue)
            out[(a, b)] = p
        return out

    def significantly_lower(self, metric: str, channel: int, other: int, alpha: float = ALPHA) -> bool:
        key = (min(channel, other), max(channel, other))
        p = self.pvalues(metric)[key]
        return p < alpha and np.median(self.values(metric, channel)) < np.median(self.values(metric, other))

    def to_dict(self) -> dict:
        return dict(
            model=self.model,
            n_sites=len({r.site_id for r in self.records}),
            excluded=sorted(self.excluded),
            missing=sorted(self.missing),
            summary=self.summary(),
            pvalues={m: {f"{a}-{b}": p for (a, b), p in self.pvalues(m).items()} for m in METRICS},
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def records_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["site_id", "channel", "mse", "psnr", "ssim"])
        for r in self.records:
            w.writerow([r.site_id, r.channel, repr(r.mse), repr(r.psnr), repr(r.ssim)])
        return buf.getvalue()

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "quality_report.json").write_text(self.to_json())
        (out_dir / "quality_records.csv").write_text(self.records_csv())


def prediction_path(pred_dir, plate: str, site_id: str) -> Path:
    return Path(pred_dir) / plate / f"{site_id}.npy"


def save_prediction(pred_dir, plate: str, site_id: str, stack: np.ndarray) -> Path:
    p = prediction_path(pred_dir, plate, site_id)
    p.parent.mkdir(parents=True, exist_ok=True)
    np.save(p, np.asarray(stack, dtype=np.float32))
    return p


def evaluate_pairs(model: str, items: Iterable[tuple[str, np.ndarray | None, np.ndarray]],
                   max_val: float = 255.0, max_missing: float = 0.10,
                   window: int = SSIM_WINDOW) -> QualityReport:
    """Score ``(site_id, pred, gt)`` triples; ``pred`` may be None when missing.

    Inputs are in the ``max_val`` range. Sites whose ground truth is black
    are excluded before scoring.
    """
    records, excluded, missing = [], [], []
    total = 0
    for site_id, pred, gt in items:
        total += 1
        if not np.any(gt > max_val / 255.0):
            excluded.append(site_id)
            continue
        if pred is None:
            missing.append(site_id)
            continue
        records.extend(channel_records(site_id, pred, gt, max_val, window))
    informative = total - len(excluded)
    if informative == 0:
        raise ValueError("no informative sites to evaluate")
    if missing:
        log.warning("%d prediction(s) missing: %s", len(missing), ", ".join(missing[:5]))
        if len(missing) > max_missing * informative:
            raise ValueError(f"{len(missing)} of {informative} predictions missing")
    return QualityReport(model, records, excluded, missing)


def evaluate_model(pred_dir, manifests: Sequence[PlateManifest] | PlateManifest,
                   params: PreprocessParams, model: str = "model",
                   window: int = SSIM_WINDOW) -> QualityReport:
    """Evaluate stored unit-range predictions against ground truth in byte range."""
    if isinstance(manifests, PlateManifest):
        manifests = [manifests]
    byte = PreprocessParams(
        params.clip_low_percentile, params.clip_high_percentile, params.target_size, "byte",
        params.clip_bf, params.clip_if,
    )

    def items():
        for m in manifests:
            for ref in m.sites:
                pair = load_site(m, ref, byte)
                key = f"{m.plate_barcode}/{ref.site_id}"
                if not is_informative(pair):
                    yield key, None, pair.if_gt
                    continue
                p = prediction_path(pred_dir, m.plate_barcode, ref.site_id)
                pred = np.load(p).astype(np.float64) * 255.0 if p.exists() else None
                yield key, pred, pair.if_gt

    return evaluate_pairs(model, items(), 255.0, window=window)
