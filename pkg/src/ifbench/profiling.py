"""Reduced morphological profiling: illumination correction, segmentation, features.

Feature columns follow ``Category_Detail_Channel_Compartment``, e.g.
``Granularity_14_Mito_Cells`` or ``Correlation_RWC_DNA_AGP_Cells``, so the
same parser handles native tables and tables produced by a full external
pipeline. One row per cell; nucleus and cytoplasm measurements of that
cell sit in the same row under their own compartment suffix.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations, permutations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.stats import rankdata
from skimage.filters import threshold_otsu
from skimage.measure import regionprops
from skimage.segmentation import watershed

from . import kernels
from .dataio import IF_CHANNELS

log = logging.getLogger(__name__)

COMPARTMENTS = ("Cells", "Cytoplasm", "Nuclei")
CATEGORIES = {
    "AreaShape": "area/shape",
    "Correlation": "colocalisation",
    "Granularity": "granularity",
    "Intensity": "intensity",
    "Neighbors": "neighbours",
    "RadialDistribution": "radial distribution",
    "Texture": "texture",
    "Number": "count",
    "Parent": "count",
    "Count": "count",
}
META_PREFIX = "Metadata_"
VAR_FLOOR = 1e-5


@dataclass(frozen=True)
class ProfilingConfig:
    granularity_levels: int = 16
    neighbour_radius_frac: float = 0.05
    rings: int = 4
    texture_levels: int = 8
    range_max: float = 1.0
    min_nucleus_area: int | None = None  # default scales 40 px at 512x512
    illumination_order: int = 1

    def nucleus_min_area(self, size: int) -> int:
        if self.min_nucleus_area is not None:
            return self.min_nucleus_area
        return max(4, int(round(40 * (size / 512) ** 2)))


# ---------------------------------------------------------------- illumination

def _poly_terms(y: np.ndarray, x: np.ndarray, order: int) -> np.ndarray:
    return np.stack([y**i * x**j for i in range(order + 1) for j in range(order + 1 - i)], axis=-1)


def correct_illumination(image: np.ndarray, order: int = 1, blocks: int = 8,
                         percentile: float = 25.0, min_r2: float = 0.5) -> np.ndarray:
    """Divide by a smooth background surface normalised to unit mean.

    The surface is a least-squares polynomial through the low ``percentile``
    of each tile in a ``blocks`` x ``blocks`` grid, so bright objects do not
    pull it up. It is applied only when it explains at least ``min_r2`` of the
    tile variance; otherwise the image has no coherent shading (object
    clutter alone) and is returned unchanged, as is a non-positive background.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    pts, vals = [], []
    for ry in np.array_split(np.arange(h), blocks):
        for rx in np.array_split(np.arange(w), blocks):
            if ry.size and rx.size:
                pts.append((ry.mean(), rx.mean()))
                vals.append(np.percentile(img[np.ix_(ry, rx)], percentile))
    pts, vals = np.array(pts), np.array(vals)
    sy, sx = max(h - 1, 1) / 2, max(w - 1, 1) / 2
    design = _poly_terms((pts[:, 0] - sy) / sy, (pts[:, 1] - sx) / sx, order)
    coef, *_ = np.linalg.lstsq(design, vals, rcond=None)
    ss = ((vals - vals.mean()) ** 2).sum()
    if ss <= VAR_FLOOR * vals.size or 1 - ((vals - design @ coef) ** 2).sum() / ss < min_r2:
        return img.copy()
    yy, xx = np.mgrid[:h, :w]
    bg = _poly_terms((yy - sy) / sy, (xx - sx) / sx, order) @ coef
    mean = bg.mean()
    if not mean > VAR_FLOOR:
        return img.copy()
    return img / np.maximum(bg / mean, VAR_FLOOR)


# ---------------------------------------------------------------- segmentation

@dataclass
class LabelMaps:
    nuclei: np.ndarray
    cells: np.ndarray
    cytoplasm: np.ndarray
    parent: dict[int, int] = field(default_factory=dict)  # nucleus id -> cell id

    @property
    def count(self) -> int:
        return int(self.nuclei.max()) if self.nuclei.size else 0

    def compartment(self, name: str) -> np.ndarray:
        return {"Cells": self.cells, "Cytoplasm": self.cytoplasm, "Nuclei": self.nuclei}[name]

    def check(self) -> None:
        ids = set(np.unique(self.nuclei)) - {0}
        if ids != set(np.unique(self.cells)) - {0}:
            raise AssertionError("nuclei and cells do not pair up")
        for i in ids:
            if self.parent.get(i) != i:
                raise AssertionError(f"nucleus {i} lacks its parent cell")
        nuc = self.nuclei > 0
        if np.any(self.cells[nuc] != self.nuclei[nuc]):
            raise AssertionError("nucleus pixels outside their cell")
        if np.any(self.cytoplasm != np.where(nuc, 0, self.cells)):
            raise AssertionError("cytoplasm != cell minus nucleus")


def _otsu_mask(img: np.ndarray) -> np.ndarray:
    if np.ptp(img) <= 0:
        return np.zeros(img.shape, bool)
    return img > threshold_otsu(img)


def _split_touching(mask: np.ndarray, min_area: int) -> np.ndarray:
    """Connected components, with watershed splitting of non-convex blobs."""
    lab, n = ndimage.label(mask)
    out = np.zeros_like(lab)
    nxt = 1
    for r in regionprops(lab):
        if r.area < min_area:
            continue
        sl = r.slice
        sub = lab[sl] == r.label
        pieces = None
        if r.solidity < 0.9:
            pad = np.pad(sub, 1)
            dist = ndimage.distance_transform_edt(pad)
            dist = ndimage.gaussian_filter(dist, 0.5)
            peaks = (dist == ndimage.maximum_filter(dist, size=3)) & (dist > 0.5 * dist.max())
            markers, k = ndimage.label(peaks)
            if k > 1:
                pieces = watershed(-dist, markers, mask=pad)[1:-1, 1:-1]
        if pieces is None:
            out[sl][sub] = nxt
            nxt += 1
            continue
        for p in range(1, pieces.max() + 1):
            part = pieces == p
            if part.sum() >= min_area:
                out[sl][part] = nxt
                nxt += 1
    return out


def _assign_cells(nuclei: np.ndarray, mask: np.ndarray, dna: np.ndarray) -> np.ndarray:
    """Give each mask pixel to its nearest nucleus (Euclidean).

    Nuclei are visited by descending area then integrated DNA and only a
    strictly closer nucleus takes a pixel over, so ties do not depend on
    raster order and the result commutes with rotations and flips. Pieces
    of a cell that do not touch its nucleus are dropped.
    """
    ids = np.arange(1, nuclei.max() + 1)
    area = ndimage.sum_labels(np.ones_like(dna), nuclei, ids)
    mass = ndimage.sum_labels(dna, nuclei, ids)
    best = np.full(nuclei.shape, np.inf)
    cells = np.zeros(nuclei.shape, np.int32)
    for i in sorted(ids, key=lambda i: (-area[i - 1], -round(mass[i - 1], 9))):
        d = ndimage.distance_transform_edt(nuclei != i)
        take = d < best
        best[take] = d[take]
        cells[take] = i
    cells[~(mask | (nuclei > 0))] = 0
    cells[nuclei > 0] = nuclei[nuclei > 0]
    out = np.zeros_like(cells)
    for i in ids:
        comp, _ = ndimage.label(cells == i)
        own = np.unique(comp[nuclei == i])
        out[np.isin(comp, own[own > 0])] = i
    return out


def segment_compartments(if_stack: np.ndarray, config: ProfilingConfig = ProfilingConfig()) -> LabelMaps:
    """Nuclei from the DNA channel, cells grown from nuclei over the cytoplasmic channels."""
    stack = np.asarray(if_stack, dtype=np.float64)
    if stack.ndim != 3 or stack.shape[0] != len(IF_CHANNELS):
        raise ValueError(f"expected a [5,H,W] IF stack, got {stack.shape}")
    h, w = stack.shape[1:]
    dna = correct_illumination(stack[IF_CHANNELS.index("DNA")], config.illumination_order)
    dna = ndimage.gaussian_filter(dna, 0.5)
    nuc_mask = ndimage.binary_fill_holes(_otsu_mask(dna))
    nuclei = _split_touching(nuc_mask, config.nucleus_min_area(h))
    if nuclei.max() == 0:
        z = np.zeros((h, w), np.int32)
        return LabelMaps(z, z.copy(), z.copy(), {})

    body = np.zeros((h, w))
    for name in ("AGP", "RNA", "Mito", "ER"):
        ch = stack[IF_CHANNELS.index(name)]
        body += ch / (ch.max() + VAR_FLOOR)
    body = ndimage.gaussian_filter(correct_illumination(body, config.illumination_order), 1.0)
    cell_mask = ndimage.binary_fill_holes(_otsu_mask(body) | (nuclei > 0))
    cells = _assign_cells(nuclei, cell_mask, dna)
    nuclei = nuclei.astype(np.int32)
    cytoplasm = np.where(nuclei > 0, 0, cells).astype(np.int32)
    parent = {int(i): int(i) for i in np.unique(nuclei) if i}
    return LabelMaps(nuclei, cells, cytoplasm, parent)


# ---------------------------------------------------------------- measurements

def _octagon_step(img: np.ndarray, i: int, op) -> np.ndarray:
    # alternate cross and square so i steps approximate a disk of radius i
    if i % 2:
        return op(img, footprint=ndimage.generate_binary_structure(2, 1), mode="nearest")
    return op(img, size=3, mode="nearest")


def opening_residuals(image: np.ndarray, levels: int = 16) -> np.ndarray:
    """Intensity removed at each opening scale; shape [levels, H, W], all >= 0."""
    img = np.asarray(image, dtype=np.float64)
    out = np.zeros((levels,) + img.shape)
    eroded = img
    prev = img
    for i in range(1, levels + 1):
        eroded = _octagon_step(eroded, i, ndimage.grey_erosion)
        opened = eroded
        for j in range(i, 0, -1):
            opened = _octagon_step(opened, j, ndimage.grey_dilation)
        opened = np.minimum(opened, prev)
        out[i - 1] = prev - opened
        prev = opened
    return out


def granularity_spectrum(image: np.ndarray, mask: np.ndarray, levels: int = 16,
                         residuals: np.ndarray | None = None) -> np.ndarray:
    """Fraction of the object's intensity removed by opening at scales 1..levels."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    mask = np.asarray(mask, bool)
    img = np.asarray(image, dtype=np.float64)
    total = img[mask].sum()
    if not mask.any() or total <= 0:
        return np.zeros(levels)
    if residuals is None:
        residuals = opening_residuals(img, levels)
    return residuals[:, mask].sum(axis=1) / total


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    da, db = a - a.mean(), b - b.mean()
    den = math.sqrt(float(da @ da) * float(db @ db))
    return float(da @ db / den) if den > 0 else float("nan")


def rank_weighted_colocalization(a: np.ndarray, b: np.ndarray, thr_frac: float = 0.15) -> float:
    """Share of ``a``'s intensity in pixels where ``b`` is bright, weighted by rank agreement."""
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    total = a.sum()
    if a.size == 0 or total <= 0:
        return float("nan")
    ra, rb = rankdata(a, method="dense"), rankdata(b, method="dense")
    rmax = max(ra.max(), rb.max())
    weight = (rmax - np.abs(ra - rb)) / rmax
    sel = b > thr_frac * b.max()
    return float((a[sel] * weight[sel]).sum() / total)


def colocalisation(a, b) -> dict[str, float]:
    return dict(correlation=pearson(a, b), rwc_ab=rank_weighted_colocalization(a, b),
                rwc_ba=rank_weighted_colocalization(b, a))


def texture_features(image: np.ndarray, mask: np.ndarray, levels: int = 8, range_max: float = 1.0) -> dict[str, float]:
    """Statistics of the grey-level co-occurrence matrix at a 1-px offset, pooled over 4 directions."""
    q = np.clip(np.floor(np.asarray(image, np.float64) / range_max * levels), 0, levels - 1).astype(np.int64)
    m = np.asarray(mask, np.uint8)
    g = np.zeros((levels, levels), np.float64)
    for dy, dx in ((0, 1), (1, 1), (1, 0), (1, -1)):
        c = kernels.glcm(q, m, dy, dx, levels)
        g += c + c.T
    s = g.sum()
    if s == 0:
        return dict(Contrast=float("nan"), Correlation=float("nan"), Entropy=float("nan"))
    p = g / s
    i, j = np.indices(p.shape)
    mu = (i * p).sum()
    var = ((i - mu) ** 2 * p).sum()
    corr = ((i - mu) * (j - mu) * p).sum() / var if var > 0 else 1.0
    nz = p[p > 0]
    return dict(Contrast=float(((i - j) ** 2 * p).sum()), Correlation=float(corr),
                Entropy=float(-(nz * np.log2(nz)).sum()))


def radial_fractions(image: np.ndarray, mask: np.ndarray, rings: int = 4) -> np.ndarray:
    img = np.asarray(image, np.float64)
    mask = np.asarray(mask, bool)
    total = img[mask].sum()
    if total <= 0:
        return np.zeros(rings)
    ys, xs = np.nonzero(mask)
    cy, cx = ys.mean(), xs.mean()
    d_center = np.hypot(ys - cy, xs - cx)
    d_edge = ndimage.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1][mask]
    rel = d_center / (d_center + d_edge)
    ring = np.minimum((rel * rings).astype(int), rings - 1)
    return np.bincount(ring, weights=img[mask], minlength=rings) / total


def _shape(mask: np.ndarray) -> dict[str, float]:
    if not mask.any():
        return dict(Area=0.0, Perimeter=0.0, Eccentricity=float("nan"), FormFactor=float("nan"))
    r = regionprops(mask.astype(np.uint8))[0]
    per = float(r.perimeter)
    ff = 4 * math.pi * r.area / per**2 if per > 0 else float("nan")
    return dict(Area=float(r.area), Perimeter=per, Eccentricity=float(r.eccentricity), FormFactor=ff)


def _intensity(img: np.ndarray, mask: np.ndarray) -> dict[str, float]:
    v = img[mask]
    if v.size == 0:
        nan = float("nan")
        return dict(MeanIntensity=nan, MedianIntensity=nan, StdIntensity=nan, MassDisplacement=nan,
                    IntegratedIntensity=0.0)
    ys, xs = np.nonzero(mask)
    tot = v.sum()
    if tot > 0:
        disp = math.hypot((ys * v).sum() / tot - ys.mean(), (xs * v).sum() / tot - xs.mean())
    else:
        disp = 0.0
    return dict(MeanIntensity=float(v.mean()), MedianIntensity=float(np.median(v)),
                StdIntensity=float(v.std()), MassDisplacement=disp, IntegratedIntensity=float(tot))


def _neighbours(labels: np.ndarray, radius: float) -> dict[int, tuple[int, float]]:
    ids = [int(i) for i in np.unique(labels) if i]
    cents = {i: np.array(ndimage.center_of_mass(labels == i)) for i in ids}
    r = max(1, int(round(radius)))
    fp = np.hypot(*np.mgrid[-r:r + 1, -r:r + 1]) <= r
    out = {}
    for i in ids:
        grown = ndimage.binary_dilation(labels == i, structure=fp)
        touched = set(np.unique(labels[grown])) - {0, i}
        dists = [float(np.linalg.norm(cents[i] - cents[j])) for j in ids if j != i]
        out[i] = (len(touched), min(dists) if dists else float("nan"))
    return out


def feature_names(config: ProfilingConfig = ProfilingConfig()) -> list[str]:
    names = []
    for comp in COMPARTMENTS:
        names += [f"AreaShape_{d}_{comp}" for d in ("Area", "Perimeter", "Eccentricity", "FormFactor")]
        for ch in IF_CHANNELS:
            names += [f"Intensity_{d}_{ch}_{comp}" for d in
                      ("MeanIntensity", "MedianIntensity", "StdIntensity", "MassDisplacement", "IntegratedIntensity")]
        names += [f"Correlation_Correlation_{a}_{b}_{comp}" for a, b in combinations(IF_CHANNELS, 2)]
        names += [f"Correlation_RWC_{a}_{b}_{comp}" for a, b in permutations(IF_CHANNELS, 2)]
        for ch in IF_CHANNELS:
            names += [f"Granularity_{i}_{ch}_{comp}" for i in range(1, config.granularity_levels + 1)]
        names += [f"Neighbors_NumberOfNeighbors_{comp}", f"Neighbors_ClosestDistance_{comp}"]
        for ch in IF_CHANNELS:
            names += [f"RadialDistribution_FracAtD{k}of{config.rings}_{ch}_{comp}" for k in range(1, config.rings + 1)]
        for ch in IF_CHANNELS:
            names += [f"Texture_{d}_{ch}_{comp}" for d in ("Contrast", "Correlation", "Entropy")]
        names += [f"Number_Object_Number_{comp}", f"Count_Objects_{comp}"]
        if comp != "Cells":
            names.append(f"Parent_Cells_{comp}")
    return names


META_COLUMNS = [f"{META_PREFIX}{k}" for k in ("Plate", "Well", "Site", "Compound", "MoA", "Source")] + ["ObjectNumber"]


@dataclass(frozen=True)
class FeatureTag:
    category: str
    channel: str  # one of IF_CHANNELS or "none"
    compartment: str
    detail: str
    channel2: str = ""


def parse_feature_name(name: str) -> FeatureTag:
    parts = name.split("_")
    comp = parts[-1] if parts[-1] in COMPARTMENTS else ""
    category = CATEGORIES.get(parts[0], "other")
    body = parts[1:-1] if comp else parts[1:]
    chans = [p for p in body if p in IF_CHANNELS]
    detail = "_".join(p for p in body if p not in IF_CHANNELS)
    return FeatureTag(category, chans[0] if chans else "none", comp, detail, chans[1] if len(chans) > 1 else "")


class FeatureTable:
    """Single-cell feature matrix with metadata columns and parsed feature tags."""

    def __init__(self, df: pd.DataFrame, malformed: int = 0):
        self.df = df.reset_index(drop=True)
        self.malformed = malformed
        self.meta_columns = [c for c in df.columns if c.startswith(META_PREFIX) or c == "ObjectNumber"]
        self.feature_columns = [c for c in df.columns if c not in self.meta_columns]
        self.tags = {c: parse_feature_name(c) for c in self.feature_columns}

    def __len__(self) -> int:
        return len(self.df)

    @classmethod
    def empty(cls, config: ProfilingConfig = ProfilingConfig()) -> "FeatureTable":
        return cls(pd.DataFrame(columns=META_COLUMNS + feature_names(config)))

    @classmethod
    def concat(cls, tables: Sequence["FeatureTable"]) -> "FeatureTable":
        tables = [t for t in tables if t is not None]
        if not tables:
            return cls.empty()
        nonempty = [t.df for t in tables if len(t)]
        df = pd.concat(nonempty, ignore_index=True) if nonempty else tables[0].df.iloc[:0]
        return cls(df, sum(t.malformed for t in tables))

    def features(self) -> np.ndarray:
        return self.df[self.feature_columns].to_numpy(dtype=np.float64)

    def columns_where(self, category: str | None = None, channel: str | None = None,
                      compartment: str | None = None) -> list[str]:
        return [c for c, t in self.tags.items()
                if (category is None or t.category == category)
                and (channel is None or t.channel == channel)
                and (compartment is None or t.compartment == compartment)]

    def aggregate(self, by: Sequence[str] = ("Metadata_Plate", "Metadata_Well"), how: str = "mean") -> pd.DataFrame:
        keys = [k for k in by if k in self.df.columns]
        grouped = self.df.groupby(keys, sort=True)[self.feature_columns]
        return grouped.median() if how == "median" else grouped.mean()

    def to_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.df.to_csv(path, index=False, float_format="%.10g")


def _object_features(stack, labels: LabelMaps, comp: str, residuals, config, nbrs, size) -> dict[int, dict]:
    lab = labels.compartment(comp)
    out = {}
    for oid in range(1, labels.count + 1):
        mask = lab == oid
        row: dict[str, float] = {}
        for k, v in _shape(mask).items():
            row[f"AreaShape_{k}_{comp}"] = v
        for ci, ch in enumerate(IF_CHANNELS):
            img = stack[ci]
            for k, v in _intensity(img, mask).items():
                row[f"Intensity_{k}_{ch}_{comp}"] = v
            spec = granularity_spectrum(img, mask, config.granularity_levels, residuals[ci])
            for i, v in enumerate(spec, start=1):
                row[f"Granularity_{i}_{ch}_{comp}"] = float(v)
            for k, v in enumerate(radial_fractions(img, mask, config.rings), start=1):
                row[f"RadialDistribution_FracAtD{k}of{config.rings}_{ch}_{comp}"] = float(v)
            for k, v in texture_features(img, mask, config.texture_levels, config.range_max).items():
                row[f"Texture_{k}_{ch}_{comp}"] = v
        vals = {ch: stack[ci][mask] for ci, ch in enumerate(IF_CHANNELS)}
        for a, b in combinations(IF_CHANNELS, 2):
            row[f"Correlation_Correlation_{a}_{b}_{comp}"] = pearson(vals[a], vals[b]) if mask.any() else float("nan")
        for a, b in permutations(IF_CHANNELS, 2):
            row[f"Correlation_RWC_{a}_{b}_{comp}"] = (
                rank_weighted_colocalization(vals[a], vals[b]) if mask.any() else float("nan"))
        n_nb, closest = nbrs.get(oid, (0, float("nan")))
        row[f"Neighbors_NumberOfNeighbors_{comp}"] = float(n_nb)
        row[f"Neighbors_ClosestDistance_{comp}"] = closest
        row[f"Number_Object_Number_{comp}"] = float(oid)
        row[f"Count_Objects_{comp}"] = float(labels.count)
        if comp != "Cells":
            row[f"Parent_Cells_{comp}"] = float(labels.parent.get(oid, 0))
        out[oid] = row
    return out


def extract_features(if_stack: np.ndarray, labels: LabelMaps, config: ProfilingConfig = ProfilingConfig(),
                     meta: dict | None = None) -> FeatureTable:
    stack = np.asarray(if_stack, dtype=np.float64)
    if stack.shape[1:] != labels.nuclei.shape:
        raise ValueError("labels do not match the image size")
    names = feature_names(config)
    if labels.count == 0:
        return FeatureTable(pd.DataFrame(columns=META_COLUMNS + names))
    residuals = [opening_residuals(stack[c], config.granularity_levels) for c in range(stack.shape[0])]
    radius = config.neighbour_radius_frac * stack.shape[-1]
    per_comp = {c: _object_features(stack, labels, c, residuals, config,
                                    _neighbours(labels.compartment(c), radius), stack.shape[-1])
                for c in COMPARTMENTS}
    meta = meta or {}
    rows = []
    for oid in range(1, labels.count + 1):
        row = {f"{META_PREFIX}{k}": meta.get(k, "") for k in ("Plate", "Well", "Site", "Compound", "MoA", "Source")}
        row["ObjectNumber"] = oid
        for c in COMPARTMENTS:
            row.update(per_comp[c][oid])
        rows.append(row)
    return FeatureTable(pd.DataFrame(rows, columns=META_COLUMNS + names))


def profile_site(if_stack: np.ndarray, meta: dict | None = None,
                 config: ProfilingConfig = ProfilingConfig()) -> tuple[LabelMaps, FeatureTable]:
    labels = segment_compartments(if_stack, config)
    return labels, extract_features(if_stack, labels, config, meta)


def ingest_external_features(path, max_malformed: float = 0.05) -> FeatureTable:
    """Read a delimited single-cell feature table, skipping malformed rows."""
    with open(path, newline="") as fh:
        sample = fh.read(4096)
        fh.seek(0)
        try:
            dialect = csv.Sniffer().sniff(sample, delimiters=",\t;")
        except csv.Error:
            dialect = csv.excel
        reader = csv.reader(fh, dialect)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path} has no header")
        meta_idx = [i for i, h in enumerate(header) if h.startswith(META_PREFIX) or h == "ObjectNumber"]
        rows, bad, total = [], 0, 0
        for rec in reader:
            if not rec:
                continue
            total += 1
            if len(rec) != len(header):
                bad += 1
                continue
            try:
                row = [rec[i] if i in meta_idx else float(rec[i]) for i in range(len(header))]
            except ValueError:
                bad += 1
                continue
            rows.append(row)
    if bad:
        log.warning("%s: skipped %d malformed row(s)", path, bad)
        if bad > max_malformed * total:
            raise ValueError(f"{path}: {bad} of {total} rows malformed")
    df = pd.DataFrame(rows, columns=header)
    return FeatureTable(df, malformed=bad)
