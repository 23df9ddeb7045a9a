"""Procedural Cell Painting plates for desk-scale experiments.

Every site is a random arrangement of elliptical cells. The five IF
channels are closed-form functions of that scene and the three BF planes
are defocused phase-like renderings of the same scene, so a network can
learn the BF -> IF map from a few dozen sites.
"""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tifffile
from scipy import ndimage

from .manifest import (
    MOA_GROUPS,
    PlateManifest,
    SiteRef,
    write_manifest,
)


@dataclass(frozen=True)
class GroupEffect:
    """How a MoA group perturbs the rendered cells."""

    group: str
    intensity_scale: float = 1.0
    texture_freq: float = 0.13  # cycles per raw pixel of the Mito texture
    nucleus_size: float = 1.0


DEFAULT_EFFECTS = (
    GroupEffect("Kinase Inhibitors", 1.0, 0.10, 1.25),
    GroupEffect("Epigenetic Modifiers", 0.8, 0.18, 1.0),
    GroupEffect("Growth Factor Receptor Inhibitors", 1.2, 0.13, 0.85),
    GroupEffect("Protease Inhibitors", 0.9, 0.08, 1.1),
    GroupEffect("Lipid Signaling Modifiers", 1.1, 0.20, 0.95),
    GroupEffect("Control", 1.0, 0.13, 1.0),
)


@dataclass(frozen=True)
class ToyPlateConfig:
    plate_barcode: str = "TOY00001"
    wells_per_group: int = 4
    sites_per_well: int = 2
    cells_per_site: tuple[int, int] = (5, 8)
    raw_size: int = 96
    nucleus_radius: float = 8.0  # raw pixels, before the group size factor
    effects: tuple[GroupEffect, ...] = DEFAULT_EFFECTS
    style: str = "A"  # BF rendering style, stands in for a cell line
    perturbation: str = "compound"
    cell_type: str = "synthetic"
    purpose: str = "train"
    noise: float = 0.01

    @property
    def n_wells(self) -> int:
        return self.wells_per_group * len(self.effects)


STYLES = {
    # polarity, edge blur, defocus spread, background
    "A": dict(polarity=1.0, blur=1.0, defocus=2.5, background=0.45, body=0.18),
    "B": dict(polarity=-1.0, blur=2.0, defocus=4.0, background=0.6, body=-0.10),
}


def well_name(index: int) -> str:
    row, col = divmod(index, 24)
    return f"{chr(ord('A') + row)}{col + 1:02d}"


def compound_name(group: str, k: int) -> str:
    if group == "Control":
        return "DMSO"
    initials = "".join(w[0] for w in group.split())
    return f"{initials}-{k + 1}"


@dataclass
class Scene:
    nuclei: np.ndarray  # int labels
    cells: np.ndarray  # int labels, nucleus pixels belong to their cell
    channels: dict[str, np.ndarray] = field(default_factory=dict)
    bf: list[np.ndarray] = field(default_factory=list)


def _ellipse(shape, cy, cx, ry, rx, theta):
    yy, xx = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v


def _place_centers(rng, n, size, min_dist, margin):
    for _ in range(200):
        pts = []
        for _ in range(4000):
            p = rng.uniform(margin, size - margin, size=2)
            if all(np.hypot(*(p - q)) >= min_dist for q in pts):
                pts.append(p)
                if len(pts) == n:
                    return np.array(pts)
        min_dist *= 0.97
    raise RuntimeError("could not place cells; lower cells_per_site or raise raw_size")


def render_site(cfg: ToyPlateConfig, effect: GroupEffect, rng: np.random.Generator) -> Scene:
    size = cfg.raw_size
    shape = (size, size)
    n = int(rng.integers(cfg.cells_per_site[0], cfg.cells_per_site[1] + 1))
    r_nuc = cfg.nucleus_radius * effect.nucleus_size
    r_cell = 1.9 * r_nuc
    centers = _place_centers(rng, n, size, min_dist=2.0 * r_nuc + 6.0, margin=r_nuc + 3.0)

    nuclei = np.zeros(shape, np.int32)
    body_d = np.full((n,) + shape, np.inf)
    for k, (cy, cx) in enumerate(centers):
        ratio = rng.uniform(0.8, 1.0)
        theta = rng.uniform(0, np.pi)
        scale = rng.uniform(0.9, 1.1)
        d_nuc = _ellipse(shape, cy, cx, r_nuc * scale * ratio, r_nuc * scale, theta)
        nuclei[d_nuc <= 1.0] = k + 1
        body_d[k] = _ellipse(shape, cy, cx, r_cell * rng.uniform(0.85, 1.1), r_cell, rng.uniform(0, np.pi))
    owner = np.argmin(body_d, axis=0)
    cells = np.where(np.min(body_d, axis=0) <= 1.0, owner + 1, 0).astype(np.int32)
    cells[nuclei > 0] = nuclei[nuclei > 0]
    # keep only the component of each cell that touches its nucleus
    for k in range(1, n + 1):
        lab, nlab = ndimage.label(cells == k)
        if nlab > 1:
            keep = np.unique(lab[nuclei == k])
            cells[(cells == k) & ~np.isin(lab, keep[keep > 0])] = 0

    nuc = nuclei > 0
    cyto = (cells > 0) & ~nuc
    body = cells > 0
    scale = effect.intensity_scale

    # DNA: nucleus masks with a soft dome
    dist_in = ndimage.distance_transform_edt(nuc)
    dna = np.where(nuc, 0.6 + 0.4 * np.clip(dist_in / 3.0, 0, 1), 0.0) * scale

    # AGP: rings along cell boundaries
    edge = np.zeros(shape, bool)
    for ax in (0, 1):
        diff = np.diff(cells, axis=ax) != 0
        sl = [slice(None)] * 2
        sl[ax] = slice(1, None)
        edge[tuple(sl)] |= diff
        sl[ax] = slice(None, -1)
        edge[tuple(sl)] |= diff
    edge &= body | ndimage.binary_dilation(body)
    agp = ndimage.gaussian_filter(edge.astype(float), 0.8) * 2.0
    agp = np.clip(agp, 0, 1) * scale

    # Mito/ER/RNA: textured cytoplasm fields
    yy, xx = np.mgrid[:size, :size].astype(float)
    f = effect.texture_freq
    ph = rng.uniform(0, 2 * np.pi, size=2)
    texture = 0.5 + 0.25 * (np.cos(2 * np.pi * f * xx + ph[0]) + np.cos(2 * np.pi * f * yy + ph[1]))
    mito = np.where(cyto, 0.3 + 0.7 * texture, 0.0) * scale
    d_nuc_out = ndimage.distance_transform_edt(~nuc)
    er = np.where(cyto, np.exp(-d_nuc_out / (0.6 * r_nuc)), 0.0) * scale
    spots = np.zeros(shape, bool)
    for k in range(1, n + 1):
        ys, xs = np.nonzero(nuclei == k)
        pick = rng.integers(0, len(ys), size=2)
        spots[ys[pick], xs[pick]] = True
    spots = ndimage.binary_dilation(spots, iterations=1) & nuc
    rna = np.where(cyto, 0.35, 0.0) + np.where(spots, 0.9, 0.0)
    rna = ndimage.gaussian_filter(rna, 0.7) * scale

    channels = {"Mito": mito, "AGP": agp, "RNA": rna, "ER": er, "DNA": dna}

    # BF: phase-like optical path from the same scene, seen at three focal planes
    st = STYLES[cfg.style]
    opl = 0.8 * body + 0.6 * nuc + 0.25 * (texture - 0.5) * cyto + 0.3 * spots + 0.2 * edge
    opl = ndimage.gaussian_filter(opl.astype(float), st["blur"])
    hp = opl - ndimage.gaussian_filter(opl, 3.0)
    defocus = ndimage.gaussian_filter(opl, st["defocus"]) - ndimage.gaussian_filter(opl, 2 * st["defocus"])
    bg = st["background"]
    pol = st["polarity"]
    bf0 = bg + pol * 0.35 * hp + st["body"] * ndimage.gaussian_filter(body.astype(float), 1.0)
    bf_hi = bg + pol * 0.5 * defocus + 0.15 * opl
    bf_lo = bg - pol * 0.5 * defocus + 0.15 * opl
    return Scene(nuclei=nuclei, cells=cells, channels=channels, bf=[bf0, bf_hi, bf_lo])


def _to_uint16(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 60000.0 + 1000.0).astype(np.uint16)


def _site_rng(seed: int, plate: str, well_index: int, site: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(plate.encode()), well_index, site])


def generate_toy_plate(config: ToyPlateConfig, seed: int, out_root) -> tuple[Path, PlateManifest]:
    """Write a toy plate under ``out_root/<barcode>`` and return its manifest.

    Side files: ``platemap.csv``, ``truth.csv`` (well, site, cell_count,
    group), ``masks/<well>_s<site>_{nuclei,cells}.tif`` label images and a
    ``manifest.csv`` in the standard manifest layout.
    """
    if config.wells_per_group <= 0 or not config.effects:
        raise ValueError("toy plate needs at least one well")
    if config.style not in STYLES:
        raise ValueError(f"unknown style {config.style!r}")
    plate_dir = Path(out_root) / config.plate_barcode
    (plate_dir / "masks").mkdir(parents=True, exist_ok=True)

    wells = []
    for g, eff in enumerate(config.effects):
        for k in range(config.wells_per_group):
            wells.append((eff, compound_name(eff.group, k % 2)))
    # interleave groups across the plate so wells are not sorted by group
    order = np.random.default_rng([seed, 17]).permutation(len(wells))
    wells = [wells[i] for i in order]

    sites, truth, platemap = [], [], []
    for wi, (eff, compound) in enumerate(wells):
        well = well_name(wi)
        platemap.append((well, compound, eff.group))
        for s in range(1, config.sites_per_well + 1):
            rng = _site_rng(seed, config.plate_barcode, wi, s)
            scene = render_site(config, eff, rng)
            paths = []
            planes = scene.bf + [scene.channels[c] for c in ("Mito", "AGP", "RNA", "ER", "DNA")]
            for ch, img in enumerate(planes, start=1):
                noisy = img + rng.normal(0.0, config.noise, img.shape) * (img > 0)
                p = plate_dir / f"{well}_s{s}_ch{ch}.tif"
                tifffile.imwrite(p, _to_uint16(noisy))
                paths.append(str(p))
            tifffile.imwrite(plate_dir / "masks" / f"{well}_s{s}_nuclei.tif", scene.nuclei.astype(np.uint16))
            tifffile.imwrite(plate_dir / "masks" / f"{well}_s{s}_cells.tif", scene.cells.astype(np.uint16))
            count = ndimage.label(scene.nuclei > 0)[1]
            truth.append((well, s, count, eff.group))
            sites.append(SiteRef(well, s, tuple(paths), compound, eff.group))

    with open(plate_dir / "platemap.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["well", "compound", "moa_group"])
        w.writerows(platemap)
    with open(plate_dir / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["well", "site", "cell_count", "group"])
        w.writerows(truth)

    sites.sort(key=lambda r: (r.well[0], int(r.well[1:]), r.site))
    manifest = PlateManifest(
        plate_barcode=config.plate_barcode,
        perturbation_kind=config.perturbation,
        cell_type=config.cell_type,
        purpose=config.purpose,
        sites=tuple(sites),
        declared_count=len(sites) * 8,
    )
    write_manifest([manifest], plate_dir / "manifest.csv")
    return plate_dir, manifest


def read_truth(plate_dir) -> dict[str, tuple[int, str]]:
    with open(Path(plate_dir) / "truth.csv", newline="") as fh:
        return {f"{r['well']}_s{r['site']}": (int(r["cell_count"]), r["group"]) for r in csv.DictReader(fh)}


def generate_toy_dataset(out_root, seed: int = 0, wells_per_group: int = 4, sites_per_well: int = 2,
                         style: str = "A", prefix: str = "TOY", test_wells_per_group: int = 1,
                         raw_size: int = 96) -> list[PlateManifest]:
    """Train/validate/test toy plates sharing one rendering style."""
    out = []
    for i, (purpose, wpg) in enumerate(
        (("train", wells_per_group), ("validate", test_wells_per_group), ("test", test_wells_per_group))
    ):
        cfg = ToyPlateConfig(
            plate_barcode=f"{prefix}{style}{i + 1:04d}", wells_per_group=wpg,
            sites_per_well=sites_per_well, style=style, purpose=purpose, raw_size=raw_size,
        )
        out.append(generate_toy_plate(cfg, seed + 101 * i, out_root)[1])
    return out
