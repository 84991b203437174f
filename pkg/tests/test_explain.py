import csv
import zipfile

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from PIL import Image

from dirlat.classify import ClassifierEnsemble
from dirlat.explain import (FactorSelection, SelectionError, TraversalSeries, VarianceMap, bootstrap_median_ci,
                            concentration_score, eligible_cases, explain_cases, grid_shape, render_traversal_grid,
                            save_series_archive, select_factor, traverse, variance_map, write_index)
from dirlat.model import DirVAE, LatentCode, ModelConfig, Posterior
from dirlat.numerics import check_simplex


def tiny(kind="dirichlet", k=3):
    torch.manual_seed(0)
    return DirVAE(ModelConfig(prior_kind=kind, latent_dim=k, image_size=8, base_channels=4, max_channels=8))


def head(weights, bias=5.0):
    w = torch.as_tensor(weights, dtype=torch.float32)
    ens = ClassifierEnsemble(w.shape[-1], [f"c{i}" for i in range(w.shape[0])])
    with torch.no_grad():
        ens.weight.copy_(w)
        ens.bias.fill_(bias)
    return ens


IMG = np.random.default_rng(0).uniform(size=(1, 8, 8)).astype(np.float32)


def test_select_factor_is_argmax_abs_weight():
    model = tiny()
    sel = select_factor(IMG, 0, 1, model, head([[0.1, -2.0, 0.3]]))
    assert sel.factor == 1
    assert_allclose(sel.gradient, [0.1, -2.0, 0.3], atol=1e-6)
    assert_allclose(sel.magnitude, [0.1, 2.0, 0.3], atol=1e-6)


def test_select_factor_ties_go_low():
    assert select_factor(IMG, 0, 1, tiny(), head([[-0.5, 0.5, 0.5]])).factor == 0


def test_select_factor_precondition():
    model = tiny()
    with pytest.raises(SelectionError):
        select_factor(IMG, 0, 0, model, head([[1.0, 0.0, 0.0]]))
    with pytest.raises(SelectionError):
        select_factor(IMG, 0, 1, model, head([[1.0, 0.0, 0.0]], bias=-5.0))


def manual_selection(model, gamma, factor):
    g = torch.as_tensor(gamma, dtype=torch.float32)
    anchor = LatentCode(g / g.sum(), g)
    post = Posterior("dirichlet", concentration=g)
    return FactorSelection(0, factor, np.zeros(len(gamma)), anchor, post, 1.0, "img")


def test_traverse_arithmetic():
    model = tiny()
    series = traverse(manual_selection(model, [1.0, 1.0, 2.0], 0), model, values=[4.0, 1.0])
    assert series.gamma[0].tolist() == [4.0, 1.0, 2.0]
    assert_allclose(series.codes[0].numpy(), [4 / 7, 1 / 7, 2 / 7], rtol=1e-6)
    assert torch.equal(series.codes[1], series.anchor_code)


def test_traverse_default_grid_and_errors():
    model = tiny()
    sel = manual_selection(model, [0.3, 2.0, 0.7], 2)
    series = traverse(sel, model, steps=5)
    assert_allclose(series.values, [0.1, 10 ** -0.5, 1.0, 10 ** 0.5, 10.0], rtol=1e-12)
    assert len(series) == 5 and series.reconstructions.shape == (5, 8, 8)
    for bad in (dict(steps=1), dict(scale_min=0.0), dict(scale_min=2.0, scale_max=1.0)):
        with pytest.raises(ValueError):
            traverse(sel, model, **bad)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(1e-3, 50.0), min_size=3, max_size=3), st.integers(0, 2), st.integers(2, 9))
def test_dirichlet_preservation(gamma, k, steps):
    model = tiny()
    series = traverse(manual_selection(model, gamma, k), model, steps=steps)
    others = [j for j in range(3) if j != k]
    assert torch.equal(series.gamma[:, others], series.anchor_gamma[others].expand(steps, -1))
    check_simplex(series.codes)


def test_gaussian_traverse_preserves_code_space():
    model = tiny("gaussian")
    post = model.encode(torch.as_tensor(IMG[None]))
    ens = head([[0.0, 0.0, 3.0]])
    sel = select_factor(IMG, 0, 1, model, ens)
    series = traverse(sel, model, steps=7, sigma_range=3.0)
    sigma = float(torch.exp(0.5 * post.log_variance[0, 2].detach()))
    assert_allclose(series.values, np.linspace(-3 * sigma, 3 * sigma, 7), rtol=1e-6)
    assert torch.equal(series.codes[:, :2], series.anchor_code[:2].expand(7, -1))
    assert series.gamma is None


def fake_series(recon):
    recon = np.asarray(recon, dtype=np.float64)
    n = len(recon)
    return TraversalSeries("dirichlet", 0, 0, np.arange(1, n + 1, dtype=float), torch.zeros(n, 3), None, recon,
                           torch.zeros(3), None, recon[0], "img")


def test_variance_map_examples():
    same = np.full((3, 4, 4), 0.3)
    assert not variance_map(fake_series(same)).values.any()
    two = np.zeros((2, 4, 4))
    two[1, 2, 1] = 0.2
    v = variance_map(fake_series(two)).values
    assert_allclose(v[2, 1], 0.01, rtol=1e-12)
    assert np.count_nonzero(v) == 1
    with pytest.raises(ValueError):
        variance_map(fake_series(same[:1]))


def test_variance_map_brute_force_and_permutation():
    rec = np.random.default_rng(3).uniform(size=(3, 5, 5))
    v = variance_map(fake_series(rec)).values
    ref = np.zeros((5, 5))
    for i in range(5):
        for j in range(5):
            vals = [rec[s, i, j] for s in range(3)]
            m = sum(vals) / 3
            ref[i, j] = sum((x - m) ** 2 for x in vals) / 3
    assert_allclose(v, ref, atol=1e-9)
    assert_allclose(variance_map(fake_series(rec[[2, 0, 1]])).values, v, atol=1e-15)
    assert (v >= 0).all()


def test_concentration_examples():
    one = np.zeros((20, 20))
    one[4, 7] = 3.0
    assert concentration_score(one, 0.05) == 1.0
    assert concentration_score(np.ones((64, 64)), 0.05) == pytest.approx(0.05, abs=1e-12)
    assert concentration_score(np.ones((7, 7)), 0.05) == pytest.approx(0.05, abs=1e-12)
    with pytest.raises(ValueError):
        concentration_score(np.zeros((4, 4)), 0.05)
    with pytest.raises(ValueError):
        concentration_score(one, 1.0)


def brute_concentration(v, q):
    flat = sorted(v.ravel().tolist(), reverse=True)
    m = q * len(flat)
    mass, i = 0.0, 0
    while i + 1 <= m:
        mass += flat[i]
        i += 1
    if i < len(flat):
        mass += (m - i) * flat[i]
    return mass / sum(flat)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_concentration_brute_force_and_monotone(seed, q1, q2):
    v = np.random.default_rng(seed).exponential(size=(9, 11))
    assert abs(concentration_score(v, q1) - brute_concentration(v, q1)) <= 1e-9
    lo, hi = sorted((q1, q2))
    assert concentration_score(v, lo) <= concentration_score(v, hi) + 1e-12


def test_grid_layout_and_determinism(tmp_path):
    model = tiny()
    series = traverse(manual_selection(model, [1.0, 2.0, 0.5], 1), model, steps=8)
    vmap = variance_map(series)
    # anchor + 8 steps + variance tile
    rows, cols, h, w = grid_shape(10, 8, 1)
    assert (rows, cols, h, w) == (3, 4, 26, 35)
    assert grid_shape(10, 64, 1)[2:] == (194, 259)
    a = render_traversal_grid(series, vmap, tmp_path / "a.png", {"seed": 1, "k_star": 1})
    b = render_traversal_grid(series, vmap, tmp_path / "b.png", {"k_star": 1, "seed": 1})
    assert a.read_bytes() == b.read_bytes()
    with Image.open(a) as im:
        assert im.size == (w, h) and im.text["k_star"] == "1"


def test_zero_variance_tile_is_uniform(tmp_path):
    series = fake_series(np.full((3, 8, 8), 0.4))
    path = render_traversal_grid(series, variance_map(series), tmp_path / "z.png")
    rows, cols, _, _ = grid_shape(5, 8, 1)
    px = np.asarray(Image.open(path))
    r, c = rows - 1, cols - 1
    tile = px[r * 9:r * 9 + 8, c * 9:c * 9 + 8]
    assert (tile == tile[0, 0]).all()


def test_archive_is_byte_stable(tmp_path):
    model = tiny()
    series = traverse(manual_selection(model, [1.0, 2.0, 0.5], 1), model, steps=4)
    vmap = variance_map(series)
    a = save_series_archive(tmp_path / "a.npz", series, vmap, {"seed": 3})
    b = save_series_archive(tmp_path / "b.npz", series, vmap, {"seed": 3})
    assert a.read_bytes() == b.read_bytes()
    data = np.load(a)
    assert_allclose(data["variance"], vmap.values)
    assert_allclose(data["gamma"], series.gamma.double().numpy())
    assert "reconstructions.npy" in zipfile.ZipFile(a).namelist()


def test_index_csv(tmp_path):
    write_index([{"image_id": "x.png", "class": "blob", "k_star": 3, "concentration_score": 0.4, "extra": 1}],
                tmp_path / "index.csv")
    rows = list(csv.DictReader(open(tmp_path / "index.csv")))
    assert rows == [{"image_id": "x.png", "class": "blob", "k_star": "3", "concentration_score": "0.4"}]


def test_eligible_cases_excludes_cooccurring():
    labels = np.array([[0, 1, 0], [0, 1, 1], [1, 0, 0], [0, 0, 1], [0, 0, 1]])
    probs = np.array([[0, 0.9, 0], [0, 0.9, 0.9], [0.8, 0, 0], [0, 0, 0.2], [0, 0, 0.7]])
    assert eligible_cases(labels, probs, 0.5) == [(0, 1), (2, 0), (4, 2)]
    assert eligible_cases(labels, probs, 0.5, classes=[1, 2]) == [(0, 1), (4, 2)]


def test_explain_cases_end_to_end():
    model = tiny()
    ens = head([[0.2, -1.0, 0.4], [0.0, 0.0, 0.0]])
    imgs = np.random.default_rng(1).uniform(size=(3, 1, 8, 8)).astype(np.float32)
    labels = np.array([[1, 0], [1, 0], [0, 1]])
    done = explain_cases(model, ens, imgs, labels, [(0, 0), (1, 0)], steps=4)
    assert [c.series.factor for c in done] == [1, 1]
    assert all(c.score is None or 0 < c.score <= 1 for c in done)


def test_bootstrap_median():
    med, lo, hi = bootstrap_median_ci([1.0, 2.0, 3.0, 4.0, 5.0], seed=0)
    assert med == 3.0 and lo <= med <= hi
    assert bootstrap_median_ci([2.0] * 4) == (2.0, 2.0, 2.0)
    with pytest.raises(ValueError):
        bootstrap_median_ci([])


def test_variance_map_display_normalized():
    vm = VarianceMap(np.array([[0.0, 0.02], [0.01, 0.04]]))
    assert vm.scale == 0.04 and vm.display().max() == 1.0
