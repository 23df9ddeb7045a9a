import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import silhouette_score

from ifbench.analysis import (
    CONTROL,
    MoAGrouping,
    cross_cellline_eval,
    feature_correlation,
    gene_compound_match,
    moa_classify,
    stratified_folds,
    tsne_embed,
)
from ifbench.dataio import MOA_GROUPS
from ifbench.profiling import FeatureTable

FEATURES = [
    "Intensity_MeanIntensity_DNA_Cells",
    "Intensity_MeanIntensity_Mito_Cells",
    "Texture_Contrast_DNA_Nuclei",
    "AreaShape_Area_Cells",
]


def table(values, compounds=None, moa=None, wells=None, plate="P1", source="real", names=FEATURES):
    values = np.asarray(values, float)
    n = len(values)
    wells = wells if wells is not None else [f"W{i:04d}" for i in range(n)]
    df = pd.DataFrame({
        "Metadata_Plate": plate,
        "Metadata_Well": wells,
        "Metadata_Site": 1,
        "Metadata_Compound": compounds if compounds is not None else "c",
        "Metadata_MoA": moa if moa is not None else CONTROL,
        "Metadata_Source": source,
        "ObjectNumber": np.arange(1, n + 1),
    })
    for j, name in enumerate(names):
        df[name] = values[:, j]
    return FeatureTable(df)


# ---- feature correlation


def test_self_correlation_is_one(rng):
    ft = table(rng.normal(size=(40, 4)))
    cm = feature_correlation(ft, ft, "channelwise")
    np.testing.assert_allclose(cm.values, 1.0, rtol=0, atol=1e-12)
    cm = feature_correlation(ft, ft, "overall")
    np.testing.assert_allclose(cm.values, 1.0, rtol=0, atol=1e-12)


@pytest.mark.parametrize("snr", [0.5, 1.0, 4.0])
def test_noise_attenuation(rng, snr):
    x = rng.normal(size=(4000, 4))
    y = x + rng.normal(scale=np.sqrt(1 / snr), size=x.shape)
    cm = feature_correlation(table(x), table(y, source="synthetic"), "overall")
    expected = 1 / np.sqrt(1 + 1 / snr)
    assert np.all(np.abs(cm.values - expected) <= 0.05)


def test_grouping_keys(rng):
    ft = table(rng.normal(size=(10, 4)))
    cw = feature_correlation(ft, ft, "channelwise")
    ov = feature_correlation(ft, ft, "overall")
    assert ("Cells", "DNA", "intensity") in cw.groups and ("Cells", "Mito", "intensity") in cw.groups
    assert ("Cells", "intensity") in ov.groups and len(ov.groups) < len(cw.groups)


def test_too_few_wells(rng):
    ft = table(rng.normal(size=(2, 4)))
    with pytest.raises(ValueError):
        feature_correlation(ft, ft)


def test_constant_feature_is_nan_and_excluded(rng):
    x = rng.normal(size=(20, 4))
    x[:, 0] = 3.0
    cm = feature_correlation(table(x), table(x))
    assert np.isnan(cm.per_feature["synthetic"]["Intensity_MeanIntensity_DNA_Cells"])
    assert np.isnan(cm.value(("Cells", "DNA", "intensity"), "synthetic"))
    assert cm.value(("Cells", "Mito", "intensity"), "synthetic") == pytest.approx(1.0)


# ---- MoA classification


def clusters(rng, per_class=30, dims=8, spread=10.0):
    centres = rng.normal(scale=spread, size=(len(MOA_GROUPS), dims))
    X = np.vstack([c + rng.normal(size=(per_class, dims)) for c in centres])
    y = np.repeat(np.array(MOA_GROUPS), per_class)
    return X, y


def test_separable_clusters(rng):
    X, y = clusters(rng)
    res = moa_classify(None, X=X, y=y)
    assert res.f1_six_class >= 0.95
    assert res.f1_binary_dmso >= 0.95
    assert len(res.fold_f1) == 5 and len(res.top5) == 5


def test_shuffled_labels_chance(rng):
    X = rng.normal(size=(3000, 10))
    y = rng.permutation(np.repeat(np.array(MOA_GROUPS), 500))
    res = moa_classify(None, X=X, y=y)
    assert abs(res.f1_six_class - 1 / 6) <= 0.05


def test_stratified_folds_cover_every_class(rng):
    _, y = clusters(rng, per_class=7)
    splits = stratified_folds(y, 5, seed=0)
    assert len(splits) == 5
    seen = np.concatenate([te for _, te in splits])
    assert sorted(seen) == list(range(len(y)))
    for tr, te in splits:
        assert set(y[te]) == set(MOA_GROUPS) and set(y[tr]) == set(MOA_GROUPS)
        assert not set(tr) & set(te)


def test_too_small_class():
    y = np.array(list(MOA_GROUPS) * 4 + ["Control"] * 6)
    with pytest.raises(ValueError):
        stratified_folds(y, 5, seed=0)


def test_affine_rescaling_invariant(rng):
    X, y = clusters(rng, spread=1.5)
    a = moa_classify(None, X=X, y=y)
    b = moa_classify(None, X=X * rng.uniform(0.1, 10, size=X.shape[1]) + 7.0, y=y)
    assert a.f1_six_class == pytest.approx(b.f1_six_class, abs=1e-6)


def test_classify_from_table_and_grouping(rng):
    X, y = clusters(rng, dims=4)
    ft = table(X, compounds=[f"cmp-{g}" for g in y], moa=y)
    res = moa_classify(ft)
    assert res.f1_six_class >= 0.95
    grouping = MoAGrouping({f"cmp-{g}": g for g in MOA_GROUPS})
    assert moa_classify(ft, grouping).f1_six_class == res.f1_six_class


def test_grouping_rejects_unknown_group():
    with pytest.raises(ValueError):
        MoAGrouping({"x": "Antibiotics"})
    with pytest.raises(ValueError):
        MoAGrouping({"DMSO": "Kinase Inhibitors"})


def test_packaged_inhibitor_classes():
    g = MoAGrouping.inhibitor_classes()
    assert g("DMSO") == CONTROL
    assert set(g.mapping.values()) == set(MOA_GROUPS)


def test_classify_needs_enough_objects(rng):
    X, y = clusters(rng, per_class=4)
    with pytest.raises(ValueError):
        moa_classify(None, X=X, y=y)


# ---- t-SNE


def two_clusters(rng, n=60):
    return np.vstack([rng.normal(size=(n, 6)), rng.normal(size=(n, 6)) + 8.0]), np.repeat([0, 1], n)


def test_tsne_separates_clusters(rng):
    X, lab = two_clusters(rng)
    xy = tsne_embed(X, perplexity=20, seed=0)
    assert xy.shape == (len(X), 2)
    assert silhouette_score(xy, lab) > 0.5


def test_tsne_deterministic(rng):
    X, _ = two_clusters(rng)
    np.testing.assert_array_equal(tsne_embed(X, 20, seed=4), tsne_embed(X, 20, seed=4))


def test_tsne_perplexity_too_large(rng):
    with pytest.raises(ValueError):
        tsne_embed(rng.normal(size=(10, 3)), perplexity=50)


def test_tsne_identical_rows():
    with pytest.raises(ValueError):
        tsne_embed(np.ones((40, 3)), perplexity=5)


# ---- cross cell line


def test_crosseval_identity_and_gap(toy_pairs):
    items = [(p.site_id, p.if_gt, p.if_gt) for p in toy_pairs[:4]]
    noisy = [(s, np.clip(g + 0.2 * np.random.default_rng(0).normal(size=g.shape), 0, 1), g) for s, _, g in items]
    m = cross_cellline_eval({("A", "A"): items, ("A", "B"): noisy, ("B", "B"): items})
    assert m.cell("ssim", "A", "A") == pytest.approx(1.0)
    assert m.cell("mse", "A", "A") == 0.0
    assert m.cell("ssim", "A", "B") < 1.0
    assert ("B", "A") in [tuple(g) for g in m.gaps]
    assert np.isnan(m.cell("mse", "B", "A"))


# ---- gene / compound matching


def perturbation_table(profiles: dict, rng, wells=3, noise=0.05, plate="P"):
    rows, comps, names = [], [], []
    for name, prof in profiles.items():
        for w in range(wells):
            rows.append(prof + noise * rng.normal(size=prof.size))
            comps.append(name)
            names.append(f"{name}-{w}")
    return table(np.array(rows), compounds=comps, wells=names, plate=plate)


def test_duplicate_profile_matches_itself(rng):
    base = {k: rng.normal(size=4) for k in ("BI-2536", "AMG900", "other")}
    ft = table(np.array(list(base.values())), compounds=list(base), wells=list(base))
    crispr = table(np.array(list(base.values())), compounds=["PLK1", "AURKB", "TP53"], wells=list(base), plate="Q")
    rep = gene_compound_match(ft, crispr, embed=False)
    assert rep.similarity[rep.compounds.index("BI-2536"), rep.genes.index("PLK1")] == pytest.approx(1.0)
    assert rep.rank("BI-2536", "PLK1") == 1


def test_matched_effect_ranks_first(rng):
    effects = {g: rng.normal(size=4) * 3 for g in ("PLK1", "AURKB", "TP53", "KRAS")}
    crispr = perturbation_table(effects, rng, plate="C")
    comp = perturbation_table({"BI-2536": effects["PLK1"], "AMG900": effects["AURKB"],
                               "other": effects["KRAS"] * -1}, rng)
    rep = gene_compound_match(comp, crispr, perplexity=5)
    assert rep.top_match("BI-2536") == "PLK1"
    assert rep.top_match("AMG900") == "AURKB"
    assert rep.embedding is not None and rep.embedding.shape == (len(comp) + len(crispr), 2)
    status = {(p["compound"], p["gene"]): p["status"] for p in rep.pairs}
    assert status[("orantinib", "AURKB")] == "missing"
    assert status[("BI-2536", "PLK1")] == "ok"


def test_orthogonal_profiles(rng):
    a = np.array([1.0, -1.0, 0.0, 0.0])
    b = np.array([0.0, 0.0, 1.0, -1.0])
    comp = table(np.array([a, -a]), compounds=["BI-2536", "x"], wells=["w1", "w2"])
    crispr = table(np.array([b, -b]), compounds=["PLK1", "y"], wells=["w1", "w2"], plate="Q")
    rep = gene_compound_match(comp, crispr, embed=False)
    assert rep.similarity[rep.compounds.index("BI-2536"), rep.genes.index("PLK1")] == pytest.approx(0.0, abs=1e-9)
