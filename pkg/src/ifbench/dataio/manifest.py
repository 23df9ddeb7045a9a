"""Plate manifests and the site loader with its informativeness filter."""
from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import tifffile

from .preprocess import EPS_BLACK, PreprocessParams, preprocess_channel

log = logging.getLogger(__name__)

BF_CHANNELS = ("BF", "BFHigh", "BFLow")
IF_CHANNELS = ("Mito", "AGP", "RNA", "ER", "DNA")
ALL_CHANNELS = BF_CHANNELS + IF_CHANNELS

PERTURBATIONS = ("compound", "crispr")
CELL_TYPES = ("A549", "U2OS", "synthetic")
PURPOSES = ("train", "validate", "test", "generalisability_test")

MOA_GROUPS = (
    "Kinase Inhibitors",
    "Epigenetic Modifiers",
    "Growth Factor Receptor Inhibitors",
    "Protease Inhibitors",
    "Lipid Signaling Modifiers",
    "Control",
)

IMAGE_SUFFIXES = (".tif", ".tiff")
_FILE_RE = re.compile(r"^(?P<well>[A-Za-z]+\d+)_s(?P<site>\d+)_ch(?P<ch>[1-8])$")

MANIFEST_HEADER = [
    "plate", "well", "site", "purpose", "cell_type", "perturbation", "compound", "moa_group",
    *[f"ch{i}" for i in range(1, 9)],
]

# assay plates used by the reference benchmark on cpg0000
REFERENCE_PLATES = (
    ("BR00116991", "compound", "A549", 27648, "train"),
    ("BR00116992", "compound", "A549", 27640, "train"),
    ("BR00116995", "compound", "U2OS", 27648, "train"),
    ("BR00117024", "compound", "U2OS", 27648, "train"),
    ("BR00116993", "compound", "A549", 27352, "validate"),
    ("BR00117025", "compound", "U2OS", 27648, "validate"),
    ("BR00116994", "compound", "A549", 27576, "test"),
    ("BR00117026", "compound", "U2OS", 27648, "test"),
    ("BR00118041", "crispr", "A549", 27560, "generalisability_test"),
    ("BR00118045", "crispr", "U2OS", 27648, "generalisability_test"),
)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SiteRef:
    well: str
    site: int
    paths: tuple[str, ...]
    compound: str = ""
    moa_group: str = ""

    def __post_init__(self):
        if len(self.paths) != len(ALL_CHANNELS):
            raise ManifestError(
                f"site {self.well}_s{self.site} has {len(self.paths)} channel paths, expected 8"
            )

    @property
    def site_id(self) -> str:
        return f"{self.well}_s{self.site}"


@dataclass(frozen=True)
class PlateManifest:
    plate_barcode: str
    perturbation_kind: str
    cell_type: str
    purpose: str
    sites: tuple[SiteRef, ...]
    declared_count: int
    rejected: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.perturbation_kind not in PERTURBATIONS:
            raise ManifestError(f"unknown perturbation {self.perturbation_kind!r}")
        if self.cell_type not in CELL_TYPES:
            raise ManifestError(f"unknown cell type {self.cell_type!r}")
        if self.purpose not in PURPOSES:
            raise ManifestError(f"unknown purpose {self.purpose!r}")
        if self.declared_count != self.image_count:
            raise ManifestError(
                f"plate {self.plate_barcode}: declared {self.declared_count} images, "
                f"found {self.image_count}"
            )

    @property
    def image_count(self) -> int:
        return len(self.sites) * len(ALL_CHANNELS)

    def site(self, site_id: str) -> SiteRef:
        for ref in self.sites:
            if ref.site_id == site_id:
                return ref
        raise KeyError(site_id)


@dataclass
class SitePair:
    bf: np.ndarray  # [3, H, W]
    if_gt: np.ndarray | None  # [5, H, W]
    well_id: str
    compound_label: str
    moa_group: str
    plate: str = ""
    site: int = 0
    range_max: float = 1.0

    @property
    def site_id(self) -> str:
        return f"{self.well_id}_s{self.site}"

    @property
    def key(self) -> str:
        return f"{self.plate}/{self.site_id}"


def _well_sort_key(well: str):
    m = re.match(r"([A-Za-z]+)(\d+)", well)
    return (m.group(1), int(m.group(2))) if m else (well, 0)


def load_split_config(path) -> list[dict]:
    """Read a split table with columns plate, perturbation, cell_type, purpose[, n_images]."""
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def reference_split_config() -> list[dict]:
    return [
        dict(plate=p, perturbation=k, cell_type=c, n_images=str(n), purpose=u)
        for p, k, c, n, u in REFERENCE_PLATES
    ]


def _read_platemap(plate_dir: Path) -> dict[str, tuple[str, str]]:
    pm = plate_dir / "platemap.csv"
    if not pm.exists():
        return {}
    with open(pm, newline="") as fh:
        return {r["well"]: (r.get("compound", ""), r.get("moa_group", "")) for r in csv.DictReader(fh)}


def build_manifest(root, split_config: Sequence[Mapping[str, str]]) -> list[PlateManifest]:
    """Index ``<root>/<plate>/<well>_s<site>_ch<k>.tif`` files into plate manifests.

    Only plates listed in ``split_config`` are indexed. Sites missing any of
    the eight channels are dropped and recorded in ``PlateManifest.rejected``.
    """
    root = Path(root)
    plate_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not plate_dirs:
        raise ManifestError(f"no plates found under {root}")

    seen: set[str] = set()
    configs: dict[str, Mapping[str, str]] = {}
    for row in split_config:
        plate = row["plate"]
        if plate in seen:
            raise ManifestError(f"plate {plate} assigned to more than one purpose")
        seen.add(plate)
        configs[plate] = row

    manifests = []
    for plate_dir in plate_dirs:
        cfg = configs.get(plate_dir.name)
        if cfg is None:
            continue
        files: dict[tuple[str, int], dict[int, str]] = {}
        for f in plate_dir.iterdir():
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            m = _FILE_RE.match(f.stem)
            if not m:
                continue
            key = (m["well"], int(m["site"]))
            files.setdefault(key, {})[int(m["ch"])] = str(f)
        platemap = _read_platemap(plate_dir)
        sites, rejected = [], []
        for well, site in sorted(files, key=lambda k: (_well_sort_key(k[0]), k[1])):
            chans = files[(well, site)]
            missing = [ALL_CHANNELS[i - 1] for i in range(1, 9) if i not in chans]
            if missing:
                msg = f"{plate_dir.name}/{well}_s{site}: missing channel(s) {', '.join(missing)}"
                log.warning("rejecting site %s", msg)
                rejected.append(msg)
                continue
            compound, group = platemap.get(well, ("", ""))
            sites.append(SiteRef(well, site, tuple(chans[i] for i in range(1, 9)), compound, group))
        if not sites:
            raise ManifestError(f"plate {plate_dir.name} has no valid sites")
        n = len(sites) * len(ALL_CHANNELS)
        expected = cfg.get("n_images")
        if expected not in (None, "") and int(expected) != n:
            rejected.append(f"{plate_dir.name}: expected {expected} images, indexed {n}")
        manifests.append(
            PlateManifest(
                plate_barcode=plate_dir.name,
                perturbation_kind=cfg.get("perturbation", "compound"),
                cell_type=cfg.get("cell_type", "synthetic"),
                purpose=cfg["purpose"],
                sites=tuple(sites),
                declared_count=n,
                rejected=tuple(rejected),
            )
        )
    if not manifests:
        raise ManifestError(f"no plates found under {root} matching the split config")
    check_disjoint(manifests)
    return manifests


def check_disjoint(manifests: Iterable[PlateManifest]) -> None:
    """Raise if a plate or a site appears under more than one purpose."""
    owner: dict[str, str] = {}
    for m in manifests:
        for ref in m.sites:
            key = f"{m.plate_barcode}/{ref.site_id}"
            if key in owner and owner[key] != m.purpose:
                raise ManifestError(f"site {key} appears in {owner[key]} and {m.purpose}")
            owner[key] = m.purpose


def write_manifest(manifests: Iterable[PlateManifest], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for m in manifests:
            for ref in m.sites:
                w.writerow([m.plate_barcode, ref.well, ref.site, m.purpose, m.cell_type,
                            m.perturbation_kind, ref.compound, ref.moa_group, *ref.paths])


def read_manifest(path) -> list[PlateManifest]:
    rows: dict[str, list[dict]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ManifestError(f"unexpected manifest header in {path}")
        for r in reader:
            rows.setdefault(r["plate"], []).append(r)
    out = []
    for plate, rs in rows.items():
        sites = tuple(
            SiteRef(r["well"], int(r["site"]), tuple(r[f"ch{i}"] for i in range(1, 9)),
                    r["compound"], r["moa_group"])
            for r in rs
        )
        r0 = rs[0]
        out.append(PlateManifest(plate, r0["perturbation"], r0["cell_type"], r0["purpose"],
                                 sites, len(sites) * 8))
    check_disjoint(out)
    return out


def read_image(path) -> np.ndarray:
    return np.asarray(tifffile.imread(path))


def load_site(manifest: PlateManifest, ref: SiteRef, params: PreprocessParams,
              with_if: bool = True) -> SitePair:
    raws = []
    for name, path in zip(ALL_CHANNELS, ref.paths):
        if not with_if and name in IF_CHANNELS:
            break
        try:
            img = read_image(path)
        except Exception as exc:  # decoding errors come from several layers
            raise OSError(f"cannot read channel {name} of {ref.site_id}: {path}") from exc
        if img.ndim != 2:
            raise ValueError(f"channel {name} of {ref.site_id} is not a 2-D grayscale image")
        raws.append(img)
    shapes = {r.shape for r in raws}
    if len(shapes) != 1:
        raise ValueError(f"site {ref.site_id}: channel sizes differ {sorted(shapes)}")
    out = [
        preprocess_channel(r, params, clip=params.clip_bf if i < 3 else params.clip_if)
        for i, r in enumerate(raws)
    ]
    stack = np.stack(out).astype(np.float32)
    return SitePair(
        bf=stack[:3],
        if_gt=stack[3:] if with_if else None,
        well_id=ref.well,
        compound_label=ref.compound,
        moa_group=ref.moa_group,
        plate=manifest.plate_barcode,
        site=ref.site,
        range_max=params.range_max,
    )


def load_plate(manifest: PlateManifest, params: PreprocessParams) -> list[SitePair]:
    return [load_site(manifest, ref, params) for ref in manifest.sites]


def is_informative(pair: SitePair, eps: float = EPS_BLACK) -> bool:
    """False when every ground-truth IF channel is black (within ``eps`` in unit range)."""
    if pair.if_gt is None:
        raise ValueError("informativeness needs ground-truth IF channels")
    tol = eps * pair.range_max
    return bool(np.any(pair.if_gt > tol))
