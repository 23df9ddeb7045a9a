import numpy as np
import pandas as pd
import pytest
from scipy import ndimage

from ifbench.dataio import read_truth
from ifbench.profiling import (
    FeatureTable,
    LabelMaps,
    ProfilingConfig,
    correct_illumination,
    extract_features,
    feature_names,
    granularity_spectrum,
    ingest_external_features,
    parse_feature_name,
    pearson,
    profile_site,
    segment_compartments,
    texture_features,
)


def dots(radius: int, size: int = 96, spacing: int = 24) -> np.ndarray:
    img = np.zeros((size, size))
    yy, xx = np.mgrid[:size, :size]
    for cy in range(spacing // 2, size, spacing):
        for cx in range(spacing // 2, size, spacing):
            img[np.hypot(yy - cy, xx - cx) <= radius] = 1.0
    return img


def blob_stack(centers, radius=6, size=64):
    yy, xx = np.mgrid[:size, :size]
    stack = np.zeros((5, size, size))
    for cy, cx in centers:
        d = np.hypot(yy - cy, xx - cx)
        stack[4] = np.maximum(stack[4], (d <= radius) * 0.9)
        stack[:4] = np.maximum(stack[:4], (d <= 2 * radius) * 0.4)
    return stack


# ---- illumination


def test_flat_image_unchanged():
    img = np.full((32, 32), 0.3)
    np.testing.assert_allclose(correct_illumination(img), img, rtol=1e-4)


def test_shading_removed():
    rng = np.random.default_rng(0)
    pattern = ndimage.gaussian_filter(rng.uniform(size=(96, 96)), 1.0)
    shading = np.linspace(0.3, 1.7, 96)[None, :]
    corrected = correct_illumination(pattern * shading)
    assert pearson(corrected, pattern) > 0.99


def test_zero_image():
    assert np.all(correct_illumination(np.zeros((16, 16))) == 0)


# ---- segmentation


def test_toy_counts_and_parents(toy_plate, toy_pairs):
    truth = read_truth(toy_plate[0])
    for p in toy_pairs:
        labels = segment_compartments(p.if_gt)
        assert labels.count == truth[p.site_id][0]
        labels.check()


def test_blank_stack():
    labels = segment_compartments(np.zeros((5, 32, 32)))
    assert labels.count == 0
    ft = extract_features(np.zeros((5, 32, 32)), labels)
    assert len(ft) == 0 and ft.feature_columns == feature_names()


def test_touching_nuclei_split():
    stack = blob_stack([(32, 25), (32, 37)], radius=7)
    assert ndimage.label(stack[4] > 0)[1] == 1
    assert segment_compartments(stack).count == 2


def test_bad_stack_shape():
    with pytest.raises(ValueError):
        segment_compartments(np.zeros((3, 16, 16)))


# ---- features


def test_uniform_square():
    stack = np.zeros((5, 32, 32))
    stack[:, 8:24, 8:24] = 100.0
    nuc = np.zeros((32, 32), np.int32)
    nuc[8:24, 8:24] = 1
    labels = LabelMaps(nuc, nuc.copy(), np.zeros_like(nuc), {1: 1})
    ft = extract_features(stack, labels, ProfilingConfig(range_max=255.0))
    row = ft.df.iloc[0]
    assert row["Intensity_MeanIntensity_DNA_Nuclei"] == 100.0
    assert row["AreaShape_Eccentricity_Nuclei"] == pytest.approx(0.0, abs=1e-6)
    assert row["Count_Objects_Nuclei"] == 1


def test_object_count_and_self_colocalisation(toy_pairs):
    labels, ft = profile_site(toy_pairs[0].if_gt, {"Plate": "P"})
    assert len(ft) == labels.count
    assert set(ft.df["Count_Objects_Cells"]) == {labels.count}
    mito = toy_pairs[0].if_gt[0][labels.nuclei == 1]
    assert pearson(mito, mito) == pytest.approx(1.0)


def test_mask_additivity(toy_pairs):
    _, ft = profile_site(toy_pairs[1].if_gt)
    for ch in ("Mito", "DNA"):
        cell = ft.df[f"Intensity_IntegratedIntensity_{ch}_Cells"]
        parts = ft.df[f"Intensity_IntegratedIntensity_{ch}_Nuclei"] + ft.df[f"Intensity_IntegratedIntensity_{ch}_Cytoplasm"]
        np.testing.assert_allclose(cell, parts, rtol=1e-12)


def test_rotation_invariance(toy_pairs):
    stack = toy_pairs[2].if_gt.astype(np.float64)
    _, a = profile_site(stack)
    _, b = profile_site(np.rot90(stack, axes=(1, 2)).copy())
    a = a.df.sort_values("AreaShape_Area_Cells").reset_index(drop=True)
    b = b.df.sort_values("AreaShape_Area_Cells").reset_index(drop=True)
    for col in ("AreaShape_Area_Nuclei", "AreaShape_Area_Cells", "Intensity_MeanIntensity_DNA_Nuclei"):
        np.testing.assert_allclose(a[col], b[col], rtol=1e-9)
    for col in ("Texture_Contrast_Mito_Cells", "Texture_Entropy_AGP_Cells"):
        np.testing.assert_allclose(a[col], b[col], rtol=0.05)


def test_texture_empty_mask():
    t = texture_features(np.ones((8, 8)), np.zeros((8, 8)))
    assert all(np.isnan(v) for v in t.values())


# ---- granularity


def test_small_dots_small_scales():
    img = dots(2)
    spec = granularity_spectrum(img, np.ones_like(img, bool))
    assert spec.shape == (16,) and int(np.argmax(spec)) <= 3


def test_constant_image_flat_spectrum():
    img = np.full((32, 32), 0.5)
    spec = granularity_spectrum(img, np.ones_like(img, bool))
    assert np.all(spec[1:] < 1e-12)


def test_empty_mask_zero_vector():
    assert np.all(granularity_spectrum(dots(2), np.zeros((96, 96), bool)) == 0)


def test_granularity_ordering():
    argmax = [int(np.argmax(granularity_spectrum(dots(r), np.ones((96, 96), bool)))) for r in (1, 2, 4, 6, 8)]
    assert argmax == sorted(argmax)
    assert argmax[1] < argmax[3]


# ---- naming and ingestion


def test_parse_feature_name():
    t = parse_feature_name("Granularity_14_Mito_Cells")
    assert (t.category, t.channel, t.compartment) == ("granularity", "Mito", "Cells")
    t = parse_feature_name("Correlation_RWC_DNA_AGP_Cells")
    assert (t.category, t.channel, t.channel2) == ("colocalisation", "DNA", "AGP")
    assert parse_feature_name("Parent_Cells_Nuclei").category == "count"


def test_ingest_empty(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("Metadata_Well,Granularity_1_DNA_Nuclei\n")
    ft = ingest_external_features(p)
    assert len(ft) == 0 and ft.feature_columns == ["Granularity_1_DNA_Nuclei"]


def test_ingest_malformed(tmp_path):
    lines = ["Metadata_Well,ObjectNumber,Intensity_MeanIntensity_DNA_Nuclei,AreaShape_Area_Cells"]
    for i in range(100):
        if i in (10, 50):
            lines.append(f"A{i:02d},{i},oops,3")
        elif i == 70:
            lines.append(f"A{i:02d},{i},1.0")
        else:
            lines.append(f"A{i:02d},{i},{i * 0.5},{i}")
    p = tmp_path / "f.csv"
    p.write_text("\n".join(lines) + "\n")
    ft = ingest_external_features(p)
    assert len(ft) == 97 and ft.malformed == 3
    lines += ["B01,1,bad,1"] * 10
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="malformed"):
        ingest_external_features(p)


def test_median_aggregation_permutation_invariant(toy_pairs):
    _, ft = profile_site(toy_pairs[0].if_gt, {"Plate": "P", "Well": "A01"})
    shuffled = FeatureTable(ft.df.sample(frac=1.0, random_state=0))
    pd.testing.assert_frame_equal(ft.aggregate(how="median"), shuffled.aggregate(how="median"))
