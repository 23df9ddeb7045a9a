"""Biological-meaning analytics on feature tables."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.manifold import TSNE
from sklearn.metrics import f1_score
from sklearn.model_selection import StratifiedKFold
from sklearn.preprocessing import StandardScaler
from sklearn.svm import LinearSVC

from .dataio import MOA_GROUPS
from .metrics import mse, psnr_from_mse, ssim
from .profiling import COMPARTMENTS, FeatureTable, ProfilingConfig, pearson, segment_compartments

log = logging.getLogger(__name__)

CONTROL = "Control"
WELL_KEYS = ("Metadata_Plate", "Metadata_Well")
DEFAULT_PAIRS = (("BI-2536", "PLK1"), ("AMG900", "AURKB"), ("orantinib", "AURKB"))


# ---------------------------------------------------------------- correlation

@dataclass
class CorrelationMatrix:
    groups: list[tuple[str, ...]]  # (compartment, channel, category) or (compartment, category)
    methods: list[str]
    values: np.ndarray  # [len(groups), len(methods)], NaN where undefined
    grouping: str
    per_feature: dict[str, dict[str, float]] = field(default_factory=dict)

    def value(self, group: tuple[str, ...], method: str) -> float:
        return float(self.values[self.groups.index(tuple(group)), self.methods.index(method)])

    def to_dict(self) -> dict:
        return dict(
            grouping=self.grouping, methods=self.methods,
            groups=["/".join(g) for g in self.groups],
            values=[[None if not np.isfinite(v) else float(v) for v in row] for row in self.values],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def combine(cls, mats: Sequence["CorrelationMatrix"]) -> "CorrelationMatrix":
        groups = sorted({g for m in mats for g in m.groups})
        methods = [meth for m in mats for meth in m.methods]
        vals = np.full((len(groups), len(methods)), np.nan)
        col = 0
        per = {}
        for m in mats:
            for j, meth in enumerate(m.methods):
                for i, g in enumerate(m.groups):
                    vals[groups.index(g), col] = m.values[i, j]
                col += 1
            per.update(m.per_feature)
        return cls(groups, methods, vals, mats[0].grouping, per)


def _group_key(tag, grouping: str) -> tuple[str, ...]:
    if grouping == "channelwise":
        return (tag.compartment, tag.channel, tag.category)
    if grouping == "overall":
        return (tag.compartment, tag.category)
    raise ValueError(f"unknown grouping {grouping!r}")


def feature_correlation(real: FeatureTable, synth: FeatureTable, grouping: str = "channelwise",
                        method: str = "synthetic", level: str = "well") -> CorrelationMatrix:
    """Pearson r between real and synthetic profiles per feature, averaged within feature groups.

    ``level="well"`` correlates well-level means; ``level="cell"`` matches
    rows on plate/well/site/object number instead.
    """
    if level == "well":
        a = real.aggregate(WELL_KEYS, "mean")
        b = synth.aggregate(WELL_KEYS, "mean")
    elif level == "cell":
        keys = ["Metadata_Plate", "Metadata_Well", "Metadata_Site", "ObjectNumber"]
        a = real.df.set_index(keys)[real.feature_columns]
        b = synth.df.set_index(keys)[synth.feature_columns]
    else:
        raise ValueError(f"unknown level {level!r}")
    shared = a.index.intersection(b.index)
    if len(shared) < 3:
        raise ValueError(f"need >= 3 shared wells, found {len(shared)}")
    a, b = a.loc[shared], b.loc[shared]
    feats = [c for c in real.feature_columns if c in synth.tags]
    per, buckets = {}, {}
    for f in feats:
        x = a[f].to_numpy(np.float64)
        y = b[f].to_numpy(np.float64)
        ok = np.isfinite(x) & np.isfinite(y)
        r = pearson(x[ok], y[ok]) if ok.sum() >= 3 and np.ptp(x[ok]) > 0 and np.ptp(y[ok]) > 0 else float("nan")
        per[f] = r
        if np.isfinite(r):
            buckets.setdefault(_group_key(real.tags[f], grouping), []).append(r)
    # groups whose every feature is undefined still get a (NaN) row
    for f in feats:
        buckets.setdefault(_group_key(real.tags[f], grouping), [])
    groups = sorted(buckets)
    vals = np.array([[np.mean(buckets[g]) if buckets[g] else np.nan] for g in groups])
    return CorrelationMatrix(groups, [method], vals, grouping, {method: per})


# ---------------------------------------------------------------- MoA classification

class MoAGrouping:
    """Compound (or inhibitor class) name -> one of the six MoA groups."""

    def __init__(self, mapping: Mapping[str, str]):
        bad = {k: v for k, v in mapping.items() if v not in MOA_GROUPS}
        if bad:
            raise ValueError(f"unknown MoA groups: {bad}")
        self.mapping = dict(mapping)
        self.mapping.setdefault("DMSO", CONTROL)
        if self.mapping["DMSO"] != CONTROL:
            raise ValueError("DMSO must map to Control")

    @classmethod
    def inhibitor_classes(cls) -> "MoAGrouping":
        text = resources.files("ifbench").joinpath("data/moa_groups.csv").read_text()
        return cls({r["inhibitor_class"]: r["moa_group"] for r in csv.DictReader(text.splitlines())})

    @classmethod
    def from_csv(cls, path, key: str = "compound", value: str = "moa_group") -> "MoAGrouping":
        with open(path, newline="") as fh:
            return cls({r[key]: r[value] for r in csv.DictReader(fh)})

    def __call__(self, name: str) -> str:
        return self.mapping[name]

    def labels(self, ft: FeatureTable) -> np.ndarray:
        return np.array([self.mapping[c] for c in ft.df["Metadata_Compound"]])


@dataclass
class MoAResult:
    f1_six_class: float
    f1_binary_dmso: float
    fold_f1: list[float]
    fold_f1_binary: list[float]
    top5: list[tuple[str, float]]
    cell_type: str = ""
    source: str = "real"
    folds: int = 5

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _clean(X: np.ndarray, ref: np.ndarray) -> np.ndarray:
    med = np.nanmedian(np.where(np.isfinite(ref), ref, np.nan), axis=0)
    med = np.where(np.isfinite(med), med, 0.0)
    return np.where(np.isfinite(X), X, med)


def stratified_folds(y: np.ndarray, folds: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    classes, counts = np.unique(y, return_counts=True)
    if np.any(counts < folds):
        short = {str(c): int(n) for c, n in zip(classes, counts) if n < folds}
        raise ValueError(f"cannot stratify {folds} folds; too few samples for {short}")
    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    return list(skf.split(np.zeros(len(y)), y))


def _svm(seed: int) -> LinearSVC:
    return LinearSVC(C=1.0, class_weight="balanced", max_iter=20000, random_state=seed, dual="auto")


def moa_classify(ft: FeatureTable, grouping: MoAGrouping | None = None, folds: int = 5, seed: int = 0,
                 X: np.ndarray | None = None, y: np.ndarray | None = None,
                 source: str = "real", cell_type: str = "") -> MoAResult:
    """Five-fold linear SVM on standardised single-cell features.

    Labels come from ``grouping`` applied to ``Metadata_Compound`` or, when
    no grouping is given, from the ``Metadata_MoA`` column.
    """
    if X is None:
        X = ft.features()
        names = ft.feature_columns
    else:
        names = [f"f{i}" for i in range(X.shape[1])]
    if y is None:
        y = grouping.labels(ft) if grouping is not None else ft.df["Metadata_MoA"].to_numpy()
    y = np.asarray(y)
    if len(y) < folds * 6:
        raise ValueError(f"need at least {folds * 6} objects, got {len(y)}")
    splits = stratified_folds(y, folds, seed)
    yb = np.where(y == CONTROL, CONTROL, "Treated")
    f1s, f1b, importance = [], [], np.zeros(X.shape[1])
    for tr, te in splits:
        Xtr = _clean(X[tr], X[tr])
        Xte = _clean(X[te], X[tr])
        scaler = StandardScaler().fit(Xtr)
        Ztr, Zte = scaler.transform(Xtr), scaler.transform(Xte)
        clf = _svm(seed).fit(Ztr, y[tr])
        f1s.append(float(f1_score(y[te], clf.predict(Zte), average="macro")))
        importance += np.abs(clf.coef_).mean(axis=0)
        if len(np.unique(yb[tr])) == 2:
            clf_b = _svm(seed).fit(Ztr, yb[tr])
            f1b.append(float(f1_score(yb[te], clf_b.predict(Zte), average="macro")))
    importance /= len(splits)
    order = np.argsort(-importance, kind="stable")[:5]
    return MoAResult(
        f1_six_class=float(np.mean(f1s)),
        f1_binary_dmso=float(np.mean(f1b)) if f1b else float("nan"),
        fold_f1=f1s, fold_f1_binary=f1b,
        top5=[(names[i], float(importance[i])) for i in order],
        cell_type=cell_type, source=source, folds=folds,
    )


# ---------------------------------------------------------------- embeddings

def standardize(X: np.ndarray) -> np.ndarray:
    X = _clean(np.asarray(X, np.float64), np.asarray(X, np.float64))
    sd = X.std(axis=0)
    keep = sd > 0
    return (X[:, keep] - X[:, keep].mean(axis=0)) / sd[keep]


def tsne_embed(data, perplexity: float = 30.0, seed: int = 0, max_iter: int = 1000) -> np.ndarray:
    X = data.features() if isinstance(data, FeatureTable) else np.asarray(data, np.float64)
    if X.shape[0] < 3 * perplexity:
        raise ValueError(f"t-SNE needs >= {3 * perplexity:g} rows, got {X.shape[0]}")
    Z = standardize(X)
    if Z.shape[1] == 0 or np.all(np.ptp(Z, axis=0) == 0):
        raise ValueError("all rows identical; nothing to embed")
    tsne = TSNE(n_components=2, perplexity=perplexity, max_iter=max_iter, init="pca",
                random_state=seed, method="barnes_hut")
    return tsne.fit_transform(Z)


# ---------------------------------------------------------------- cross cell line

@dataclass
class CrossEvalMatrix:
    lines: list[str]
    metrics: dict[str, np.ndarray]  # name -> [train, test]
    pvalues: dict[str, float]
    gaps: list[tuple[str, str]] = field(default_factory=list)

    def cell(self, metric: str, train: str, test: str) -> float:
        return float(self.metrics[metric][self.lines.index(train), self.lines.index(test)])

    def to_dict(self) -> dict:
        return dict(
            lines=self.lines,
            metrics={k: [[None if not np.isfinite(v) else float(v) for v in row] for row in m]
                     for k, m in self.metrics.items()},
            pvalues=self.pvalues, gaps=[list(g) for g in self.gaps],
        )


def _count(stack_unit: np.ndarray, config: ProfilingConfig) -> int:
    return segment_compartments(stack_unit, config).count


def cross_cellline_eval(runs: Mapping[tuple[str, str], Sequence[tuple[str, np.ndarray, np.ndarray]]],
                        config: ProfilingConfig = ProfilingConfig(),
                        ssim_window: int = 11) -> CrossEvalMatrix:
    """Quality and cell-count agreement for every (train line, test line) pair.

    ``runs`` maps (train, test) to (site_id, prediction, ground truth)
    triples in unit range. Significance compares per-site values on the
    diagonal against off-diagonal ones with a two-sided rank test; for
    cell counts the per-site statistic is the absolute count error.
    """
    lines = sorted({k[0] for k in runs} | {k[1] for k in runs})
    n = len(lines)
    names = ("mse", "psnr", "ssim", "cell")
    mats = {k: np.full((n, n), np.nan) for k in names}
    per_site = {k: {"diag": [], "off": []} for k in ("mse", "psnr", "ssim", "cell")}
    gaps = []
    for i, tr in enumerate(lines):
        for j, te in enumerate(lines):
            items = runs.get((tr, te))
            if not items:
                gaps.append((tr, te))
                continue
            where = "diag" if i == j else "off"
            ms, ps, ss, real_c, syn_c = [], [], [], [], []
            for _, pred, gt in items:
                pb, gb = pred * 255.0, gt * 255.0
                m = mse(pb, gb)
                ms.append(m)
                ps.append(psnr_from_mse(m))
                ss.append(float(np.mean([ssim(pb[c], gb[c], window=ssim_window) for c in range(gt.shape[0])])))
                real_c.append(_count(gt, config))
                syn_c.append(_count(pred, config))
            mats["mse"][i, j] = np.mean(ms)
            mats["psnr"][i, j] = np.mean(ps)
            mats["ssim"][i, j] = np.mean(ss)
            mats["cell"][i, j] = pearson(np.array(real_c, float), np.array(syn_c, float))
            per_site["mse"][where] += ms
            per_site["psnr"][where] += ps
            per_site["ssim"][where] += ss
            per_site["cell"][where] += list(np.abs(np.array(real_c) - np.array(syn_c)).astype(float))
    pvals = {}
    for k, d in per_site.items():
        x, y = np.array(d["diag"]), np.array(d["off"])
        if x.size and y.size and not (np.ptp(np.concatenate([x, y])) == 0):
            pvals[k] = float(stats.mannwhitneyu(x, y, alternative="two-sided").pvalue)
        else:
            pvals[k] = 1.0
    return CrossEvalMatrix(lines, mats, pvals, gaps)


# ---------------------------------------------------------------- gene / compound matching

@dataclass
class MatchReport:
    compounds: list[str]
    genes: list[str]
    similarity: np.ndarray  # cosine similarity [compounds, genes]
    pairs: list[dict]
    embedding: np.ndarray | None = None
    embedding_labels: list[tuple[str, str]] = field(default_factory=list)  # (kind, name)

    def rank(self, compound: str, gene: str) -> int:
        row = self.similarity[self.compounds.index(compound)]
        order = np.argsort(-row, kind="stable")
        return int(np.nonzero(order == self.genes.index(gene))[0][0]) + 1

    def top_match(self, compound: str) -> str:
        return self.genes[int(np.argmax(self.similarity[self.compounds.index(compound)]))]

    def to_dict(self) -> dict:
        return dict(compounds=self.compounds, genes=self.genes,
                    similarity=self.similarity.tolist(), pairs=self.pairs)


def well_profiles(ft: FeatureTable, how: str = "median") -> pd.DataFrame:
    keys = ["Metadata_Plate", "Metadata_Well", "Metadata_Compound"]
    return ft.df.groupby(keys, sort=True)[ft.feature_columns].agg(how)


def gene_compound_match(ft_compound: FeatureTable, ft_crispr: FeatureTable,
                        pairs_of_interest: Sequence[tuple[str, str]] = DEFAULT_PAIRS,
                        perplexity: float = 30.0, seed: int = 0, embed: bool = True) -> MatchReport:
    """Cosine similarity between compound and CRISPR consensus profiles.

    Well medians are z-scored jointly, averaged per perturbation and compared
    by cosine similarity.
    """
    a = well_profiles(ft_compound)
    b = well_profiles(ft_crispr)
    feats = [c for c in a.columns if c in b.columns]
    X = np.vstack([a[feats].to_numpy(np.float64), b[feats].to_numpy(np.float64)])
    Z = standardize(X)
    comp_names = list(a.index.get_level_values("Metadata_Compound"))
    gene_names = list(b.index.get_level_values("Metadata_Compound"))
    compounds = sorted(set(comp_names))
    genes = sorted(set(gene_names))
    za, zb = Z[: len(a)], Z[len(a):]
    pa = np.array([za[np.array(comp_names) == c].mean(axis=0) for c in compounds])
    pb = np.array([zb[np.array(gene_names) == g].mean(axis=0) for g in genes])
    pa /= np.maximum(np.linalg.norm(pa, axis=1, keepdims=True), 1e-12)
    pb /= np.maximum(np.linalg.norm(pb, axis=1, keepdims=True), 1e-12)
    sim = pa @ pb.T
    report = MatchReport(compounds, genes, sim, [])
    for comp, gene in pairs_of_interest:
        if comp not in compounds or gene not in genes:
            report.pairs.append(dict(compound=comp, gene=gene, status="missing"))
            continue
        report.pairs.append(dict(compound=comp, gene=gene, status="ok",
                                 similarity=float(sim[compounds.index(comp), genes.index(gene)]),
                                 rank=report.rank(comp, gene)))
    if embed:
        n = Z.shape[0]
        perp = min(perplexity, (n - 1) / 3.0)
        if perp >= 2:
            report.embedding = tsne_embed(X, perplexity=perp, seed=seed)
            report.embedding_labels = [("compound", c) for c in comp_names] + [("crispr", g) for g in gene_names]
    return report
