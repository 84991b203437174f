"""Gradient-guided latent traversals and pixel-wise variance maps.

For a correctly predicted positive case, the factor to traverse is the latent
coordinate with the largest absolute gradient of the class logit. Dirichlet
latents are traversed in gamma space (one coordinate rescaled, then
renormalized); Gaussian latents are traversed in code space over
``mean +- sigma_range * std``.

Grid layout for ``n_tiles`` square tiles of side ``tile`` px::

    cols = ceil(sqrt(n_tiles)), rows = ceil(n_tiles / cols)
    width = cols * tile + (cols - 1) * separator
    height = rows * tile + (rows - 1) * separator

Tiles fill row-major (optional input image, anchor reconstruction, steps);
the variance map always occupies the bottom-right slot.
"""

from __future__ import annotations

import csv
import io
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .classify import ClassifierEnsemble
from .model import DirVAE, LatentCode, Posterior

GRADIENT_ATOL = 1e-6
ARCHIVE_SCHEMA = "dirlat-traversal-v1"


class SelectionError(ValueError):
    """The image/class pair is not a correctly predicted positive case."""


@dataclass
class FactorSelection:
    class_index: int
    factor: int
    gradient: np.ndarray
    anchor: LatentCode
    posterior: Posterior
    probability: float
    image_id: str = ""

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.gradient)


@dataclass
class TraversalSeries:
    kind: str
    factor: int
    class_index: int
    values: np.ndarray          # scale factors (Dirichlet) or offsets (Gaussian)
    codes: torch.Tensor         # [steps, latent_dim]
    gamma: torch.Tensor | None  # [steps, latent_dim], Dirichlet mode only
    reconstructions: np.ndarray  # [steps, size, size]
    anchor_code: torch.Tensor
    anchor_gamma: torch.Tensor | None
    anchor_reconstruction: np.ndarray
    image_id: str = ""

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class VarianceMap:
    values: np.ndarray
    scale: float = field(init=False)

    def __post_init__(self):
        self.scale = float(self.values.max()) if self.values.size else 0.0

    def display(self) -> np.ndarray:
        return self.values / self.scale if self.scale > 0 else np.zeros_like(self.values)


@torch.no_grad()
def _encode_one(model: DirVAE, image) -> Posterior:
    x = torch.as_tensor(np.asarray(image), dtype=next(model.parameters()).dtype)
    while x.dim() < 4:
        x = x.unsqueeze(0)
    return model.encode(x).index(0)


def select_factor(image, class_index: int, label: int, model: DirVAE, ensemble: ClassifierEnsemble,
                  threshold: float = 0.5, image_id: str = "") -> FactorSelection:
    """Pick the factor with the largest absolute class-logit gradient at the posterior-mean latent.

    Ties resolve to the lowest index. Requires the class to be truly
    positive and predicted positive.
    """
    post = _encode_one(model, image)
    anchor = model.mean_latent(post)
    z = anchor.code.detach().clone().to(ensemble.weight.dtype).requires_grad_(True)
    logit = ensemble.logits(z)[class_index]
    prob = float(torch.sigmoid(logit.detach()))
    if int(label) != 1 or prob < threshold:
        raise SelectionError(
            f"class {class_index} is not a correctly predicted positive (label={label}, p={prob:.3f}, thr={threshold})"
        )
    (grad,) = torch.autograd.grad(logit, z)
    grad = grad.detach().double().numpy()
    w = ensemble.weight[class_index].detach().double().numpy()
    if not np.allclose(grad, w, rtol=0, atol=GRADIENT_ATOL):
        raise RuntimeError("logit gradient differs from the head weight vector")
    return FactorSelection(class_index, int(np.argmax(np.abs(grad))), grad, anchor, post, prob, image_id)


def _factor_steps(selection: FactorSelection, kind: str, steps: int, scale_min: float, scale_max: float,
                  sigma_range: float, values) -> np.ndarray:
    if values is not None:
        return np.asarray(values, dtype=np.float64)
    if steps < 2:
        raise ValueError("a traversal needs at least 2 steps")
    if kind == "dirichlet":
        if scale_min <= 0 or scale_min >= scale_max:
            raise ValueError("need 0 < scale_min < scale_max")
        return np.geomspace(scale_min, scale_max, steps)
    sigma = float(torch.exp(0.5 * selection.posterior.log_variance[selection.factor]))
    return np.linspace(-sigma_range * sigma, sigma_range * sigma, steps)


@torch.no_grad()
def traverse(selection: FactorSelection, model: DirVAE, steps: int = 8, scale_min: float = 0.1,
             scale_max: float = 10.0, sigma_range: float = 3.0, values: Sequence[float] | None = None) -> TraversalSeries:
    """Vary only the selected factor and decode every step.

    ``values`` overrides the default grid: multiplicative scales in
    Dirichlet mode, additive offsets to the mean in Gaussian mode.
    """
    k = selection.factor
    kind = model.prior_kind
    vals = _factor_steps(selection, kind, steps, scale_min, scale_max, sigma_range, values)
    if kind == "dirichlet" and np.any(vals <= 0):
        raise ValueError("Dirichlet traversal scales must be > 0")
    anchor = selection.anchor
    n = len(vals)
    if kind == "dirichlet":
        gamma = anchor.gamma_space.unsqueeze(0).repeat(n, 1)
        gamma[:, k] = gamma[:, k] * torch.as_tensor(vals, dtype=gamma.dtype)
        codes = gamma / gamma.sum(-1, keepdim=True)
    else:
        gamma = None
        codes = anchor.code.unsqueeze(0).repeat(n, 1)
        codes[:, k] = codes[:, k] + torch.as_tensor(vals, dtype=codes.dtype)
    recon = model.decode(codes)[:, 0].double().numpy()
    anchor_recon = model.decode(anchor.code.unsqueeze(0))[0, 0].double().numpy()
    return TraversalSeries(kind, k, selection.class_index, vals, codes, gamma, recon, anchor.code,
                           anchor.gamma_space, anchor_recon, selection.image_id)


def variance_map(series) -> VarianceMap:
    """Per-pixel population variance over the traversal reconstructions."""
    recon = series.reconstructions if isinstance(series, TraversalSeries) else np.asarray(series)
    if recon.ndim != 3 or recon.shape[0] < 2:
        raise ValueError("variance_map needs at least 2 reconstructions")
    return VarianceMap(np.var(recon.astype(np.float64), axis=0))


def concentration_score(vmap, top_fraction: float = 0.05) -> float:
    """Share of total variance held by the top ``top_fraction`` of pixels.

    ``top_fraction * pixel_count`` is generally fractional; the boundary pixel counts
    with that fractional weight, so a uniform map scores exactly ``top_fraction``.
    """
    v = vmap.values if isinstance(vmap, VarianceMap) else np.asarray(vmap, dtype=np.float64)
    if not 0 < top_fraction < 1:
        raise ValueError("top_fraction must lie in (0, 1)")
    flat = np.sort(v.ravel())[::-1]
    total = flat.sum()
    if not total > 0:
        raise ValueError("variance map is all zero")
    m = top_fraction * flat.size
    full = int(math.floor(m))
    mass = flat[:full].sum()
    if full < flat.size:
        mass += (m - full) * flat[full]
    return float(mass / total)


# --------------------------------------------------------------------------
# Output
# --------------------------------------------------------------------------


def grid_shape(n_tiles: int, tile: int, separator: int = 1) -> tuple[int, int, int, int]:
    """(rows, cols, height, width) of the traversal grid."""
    cols = math.ceil(math.sqrt(n_tiles))
    rows = math.ceil(n_tiles / cols)
    return rows, cols, rows * tile + (rows - 1) * separator, cols * tile + (cols - 1) * separator


def render_traversal_grid(series: TraversalSeries, vmap: VarianceMap, path, annotations: dict | None = None,
                          input_image: np.ndarray | None = None, separator: int = 1) -> Path:
    tiles = ([] if input_image is None else [np.asarray(input_image, dtype=np.float64).reshape(series.reconstructions.shape[1:])])
    tiles += [series.anchor_reconstruction, *series.reconstructions]
    size = tiles[0].shape[0]
    n = len(tiles) + 1
    rows, cols, h, w = grid_shape(n, size, separator)
    canvas = np.ones((h, w), dtype=np.float64)
    slots = list(range(len(tiles))) + [rows * cols - 1]
    for slot, tile in zip(slots, tiles + [vmap.display()]):
        r, c = divmod(slot, cols)
        y, x = r * (size + separator), c * (size + separator)
        canvas[y:y + size, x:x + size] = np.clip(tile, 0.0, 1.0)
    info = PngInfo()
    for key, value in sorted((annotations or {}).items()):
        info.add_text(str(key), str(value))
    path = Path(path)
    Image.fromarray(np.round(canvas * 255).astype(np.uint8), mode="L").save(path, format="PNG", pnginfo=info)
    return path


def save_series_archive(path, series: TraversalSeries, vmap: VarianceMap, meta: dict | None = None) -> Path:
    """npz-compatible archive with fixed member timestamps (byte-stable)."""
    arrays = {
        "values": series.values,
        "codes": series.codes.double().numpy(),
        "reconstructions": series.reconstructions,
        "anchor_code": series.anchor_code.double().numpy(),
        "anchor_reconstruction": series.anchor_reconstruction,
        "variance": vmap.values,
        "factor": np.asarray(series.factor),
        "class_index": np.asarray(series.class_index),
    }
    if series.gamma is not None:
        arrays["gamma"] = series.gamma.double().numpy()
        arrays["anchor_gamma"] = series.anchor_gamma.double().numpy()
    meta = {"schema": ARCHIVE_SCHEMA, "image_id": series.image_id, "kind": series.kind, **(meta or {})}
    arrays["meta"] = np.asarray(repr(sorted(meta.items())))
    path = Path(path)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zi = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zi.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(zi, buf.getvalue())
    return path


INDEX_FIELDS = ("image_id", "class", "k_star", "concentration_score")


def write_index(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=INDEX_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in INDEX_FIELDS})


# --------------------------------------------------------------------------
# Dataset-level helpers
# --------------------------------------------------------------------------


def eligible_cases(labels: np.ndarray, probabilities: np.ndarray, threshold=0.5,
                   classes: Sequence[int] | None = None) -> list[tuple[int, int]]:
    """(image index, class) for single-label images whose label was predicted positive.

    Images with co-occurring labels are skipped. ``classes`` restricts the
    classes of interest.
    """
    labels = np.asarray(labels)
    thr = np.broadcast_to(np.asarray(threshold, dtype=np.float64), (labels.shape[1],))
    allowed = set(range(labels.shape[1]) if classes is None else classes)
    out = []
    for i, row in enumerate(labels):
        pos = np.flatnonzero(row == 1)
        if pos.size != 1 or int(pos[0]) not in allowed:
            continue
        c = int(pos[0])
        if probabilities[i, c] >= thr[c]:
            out.append((i, c))
    return out


@dataclass
class ExplainedCase:
    index: int
    class_index: int
    selection: FactorSelection
    series: TraversalSeries
    vmap: VarianceMap
    score: float | None


def explain_cases(model: DirVAE, ensemble: ClassifierEnsemble, images: np.ndarray, labels: np.ndarray,
                  cases: list[tuple[int, int]], ids: Sequence[str] | None = None, threshold=0.5, steps: int = 8,
                  scale_min: float = 0.1, scale_max: float = 10.0, sigma_range: float = 3.0,
                  top_fraction: float = 0.05) -> list[ExplainedCase]:
    thr = np.broadcast_to(np.asarray(threshold, dtype=np.float64), (labels.shape[1],))
    out = []
    for i, c in cases:
        sel = select_factor(images[i], c, int(labels[i, c]), model, ensemble, float(thr[c]),
                            image_id=ids[i] if ids is not None else str(i))
        series = traverse(sel, model, steps, scale_min, scale_max, sigma_range)
        vmap = variance_map(series)
        score = concentration_score(vmap, top_fraction) if vmap.scale > 0 else None
        out.append(ExplainedCase(i, c, sel, series, vmap, score))
    return out


def bootstrap_median_ci(values: Sequence[float], n_boot: int = 2000, level: float = 0.95, seed: int = 0) -> tuple[float, float, float]:
    """Median with a percentile bootstrap interval."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values")
    rng = np.random.default_rng(seed)
    meds = np.median(v[rng.integers(0, v.size, size=(n_boot, v.size))], axis=1)
    lo, hi = np.quantile(meds, [(1 - level) / 2, (1 + level) / 2])
    return float(np.median(v)), float(lo), float(hi)
