import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from dirlat.data import (CHEXPERT_CLASSES, LabeledImages, ManifestError, ManifestRow, SyntheticSpec, _background,
                         balanced_sample, cooccurrence_matrix, draw_sample_params, feature_layer, generate_synthetic,
                         largest_remainder, load_images, load_manifest, load_manifest_with_counts, render_sample,
                         split_dataset, write_manifest)

NAMES = ["A", "B", "C"]


def write_csv(path, text):
    path.write_text(text)
    return path


def test_manifest_policies(tmp_path):
    p = write_csv(tmp_path / "m.csv", "Path,A,B,C\nx1.png,1,0,1\nx2.png,-1,1,\nx3.png,0.0,1.0,0\n")
    rows = load_manifest(p, NAMES, "to_negative")
    assert [r.labels for r in rows] == [(1, 0, 1), (0, 1, 0), (0, 1, 0)]
    assert rows[1].raw == (-1, 1, None)
    load = load_manifest_with_counts(p, NAMES, "drop_row")
    assert [r.path for r in load.rows] == ["x1.png", "x3.png"]
    assert load.counts["dropped_rows"] == 1 and load.counts["uncertain"] == 1 and load.counts["missing"] == 1


def test_manifest_extra_columns_and_order(tmp_path):
    p = write_csv(tmp_path / "m.csv", "Sex,C,path,A,B\nF,1,a.png,0,1\n")
    assert load_manifest(p, NAMES)[0].labels == (0, 1, 1)


@pytest.mark.parametrize("text", ["path,A,B\nx,1,0\n", "file,A,B,C\nx,1,0,0\n", "path,A,B,C\nx,2,0,0\n",
                                  "path,A,B,C\nx,yes,0,0\n", "path,A,B,C\n,1,0,0\n"])
def test_manifest_errors(tmp_path, text):
    with pytest.raises(ManifestError):
        load_manifest(write_csv(tmp_path / "m.csv", text), NAMES)


def test_manifest_unreadable(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "absent.csv", NAMES)


def test_manifest_roundtrip(tmp_path):
    rows = [ManifestRow("a.png", (1, 0, 0)), ManifestRow("b.png", (0, 1, 1))]
    write_manifest(rows, NAMES, tmp_path / "m.csv")
    assert [r.labels for r in load_manifest(tmp_path / "m.csv", NAMES)] == [(1, 0, 0), (0, 1, 1)]


def _rows(n, seed, c=3):
    rng = np.random.default_rng(seed)
    return [ManifestRow(f"img{i}.png", tuple(int(v) for v in rng.integers(0, 2, c))) for i in range(n)]


def test_balanced_sample_contract():
    rows = _rows(200, 0)
    out, rep = balanced_sample(rows, 30, seed=4, class_names=NAMES)
    assert len({r.path for r in out}) == len(out)
    for c, name in enumerate(NAMES):
        assert rep[name]["selected"] == 30 and rep[name]["shortfall"] == 0
    again, _ = balanced_sample(rows, 30, seed=4, class_names=NAMES)
    assert out == again


def test_balanced_sample_shortfall_and_dedup(caplog):
    rows = [ManifestRow("both.png", (1, 1)), ManifestRow("a.png", (1, 0))]
    out, rep = balanced_sample(rows, 5, seed=0, class_names=["x", "y"])
    assert sorted(r.path for r in out) == ["a.png", "both.png"]
    assert rep["x"] == {"selected": 2, "available": 2, "shortfall": 3}
    assert "only" in caplog.text


def test_cooccurrence_examples():
    m = cooccurrence_matrix([ManifestRow("a", (1, 1, 0, 0))])
    ref = np.zeros((4, 4), dtype=int)
    ref[0, 0] = ref[1, 1] = ref[0, 1] = ref[1, 0] = 1
    assert np.array_equal(m, ref)
    assert not cooccurrence_matrix([ManifestRow("a", (0, 0)), ManifestRow("b", (0, 0))]).any()
    with pytest.raises(ValueError):
        cooccurrence_matrix([])


def test_cooccurrence_brute_force():
    rows = _rows(50, 9, c=4)
    ref = np.zeros((4, 4), dtype=int)
    for r in rows:
        for i in range(4):
            for j in range(4):
                ref[i, j] += r.labels[i] == 1 and r.labels[j] == 1
    m = cooccurrence_matrix(rows)
    assert np.array_equal(m, ref)
    assert np.array_equal(m, m.T)


def test_split_examples():
    rows = _rows(100, 1)
    assert split_dataset(rows, (1, 0, 0), 3).sizes() == (100, 0, 0)
    s = split_dataset(rows, (0.8, 0.1, 0.1), 3)
    assert s.sizes() == (80, 10, 10)
    assert s == split_dataset(rows, (0.8, 0.1, 0.1), 3)
    with pytest.raises(ValueError):
        split_dataset(rows, (0.5, 0.2, 0.2), 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2**31 - 1))
def test_split_disjoint(n, seed):
    rows = _rows(n, seed)
    s = split_dataset(rows + rows[: n // 3], (0.75, 0.125, 0.125), seed)
    paths = [r.path for part in (s.train, s.val, s.test) for r in part]
    assert len(paths) == len(set(paths)) == n


def test_largest_remainder_cases():
    assert largest_remainder(68_000, [52_943 / 68_000, 5_057 / 68_000, 10_000 / 68_000]) == [52_943, 5_057, 10_000]
    assert largest_remainder(10, [1 / 3, 1 / 3, 1 / 3]) == [4, 3, 3]


def test_chexpert_classes():
    assert CHEXPERT_CLASSES == ("No Finding", "Lung Opacity", "Pleural Effusion", "Support Devices")


def test_synthetic_zero_prevalence():
    ds = generate_synthetic(SyntheticSpec(image_size=16, prevalence=(0, 0, 0)), 20, 1)
    assert (ds.data.labels == [1, 0, 0, 0]).all()


@pytest.mark.parametrize("kind", ["blob", "texture", "line"])
def test_feature_changes_image_exactly_on_support(kind):
    spec = SyntheticSpec(image_size=32, noise=0.0)
    p = draw_sample_params(np.random.default_rng(5))
    labels = [int(k == kind) for k in spec.features]
    diff = render_sample(p, labels, spec) - np.clip(_background(p, 32), 0, 1)
    support = feature_layer(p, kind, 32) > 0
    assert support.any()
    assert np.array_equal(diff != 0, support)


def test_synthetic_prevalence_binomial():
    spec = SyntheticSpec(image_size=8, prevalence=(0.4, 0.4, 0.4), noise=0.0)
    ds = generate_synthetic(spec, 10_000, 2)
    freq = ds.data.labels[:, 1:].mean(0)
    se = math.sqrt(0.4 * 0.6 / 10_000)
    assert (np.abs(freq - 0.4) < 3 * se).all()


@pytest.mark.parametrize("policy", ["independent", "exclusive"])
def test_no_finding_exclusive(policy):
    ds = generate_synthetic(SyntheticSpec(image_size=8, cooccurrence=policy), 500, 3)
    y = ds.data.labels
    assert np.array_equal(y[:, 0], (y[:, 1:].sum(1) == 0).astype(int))
    if policy == "exclusive":
        assert (y.sum(1) == 1).all()


def test_synthetic_deterministic_and_valid():
    a = generate_synthetic(SyntheticSpec(image_size=16), 30, 8)
    b = generate_synthetic(SyntheticSpec(image_size=16), 30, 8)
    assert np.array_equal(a.data.images, b.data.images) and np.array_equal(a.data.labels, b.data.labels)
    assert a.data.images.min() >= 0 and a.data.images.max() <= 1
    with pytest.raises(ValueError):
        SyntheticSpec(prevalence=(0.5, 0.5)).validate()
    with pytest.raises(ValueError):
        SyntheticSpec(noise=-1).validate()
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(), 0, 1)


def test_synthetic_write_and_reload(tmp_path):
    ds = generate_synthetic(SyntheticSpec(image_size=16), 12, 4)
    manifest = ds.write(tmp_path)
    rows = load_manifest(manifest, ds.spec.class_names)
    with Image.open(tmp_path / rows[0].path) as im:
        assert im.mode == "L" and im.size == (16, 16)
    data = load_images(rows, tmp_path, 16, ds.spec.class_names)
    assert np.array_equal(data.labels, ds.data.labels)
    assert np.abs(data.images - ds.data.images).max() <= 0.5 / 255 + 1e-7
    big = load_images(rows[:2], tmp_path, 32, ds.spec.class_names)
    assert big.images.shape == (2, 1, 32, 32)


def test_labeled_images_take():
    d = LabeledImages(np.zeros((3, 1, 4, 4), np.float32), np.eye(3, dtype=int), ["a", "b", "c"], NAMES)
    assert d.take(["c", "a"]).ids == ["c", "a"]
    assert d.take(["c"]).labels.tolist() == [[0, 0, 1]]
    with pytest.raises(ValueError):
        LabeledImages(np.zeros((3, 4, 4)), np.eye(3), ["a", "b", "c"], NAMES)
