"""Special functions, Gamma/Dirichlet densities, reparameterized sampling and KLs.

Everything here is a pure function. Inputs may be Python floats, numpy
arrays or torch tensors; torch inputs keep their autograd graph, other
inputs are evaluated in float64 and returned as floats/ndarrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
import scipy.special as sc
import torch

ArrayLike = Union[float, np.ndarray, torch.Tensor]

SIMPLEX_ATOL = 1e-6


class DomainError(ValueError):
    """An argument lies outside the domain of the function."""


class DimensionError(ValueError):
    """Vector arguments have incompatible lengths."""


def _as_tensor(x) -> tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        return x, True
    return torch.from_numpy(np.array(x, dtype=np.float64)), False


def _out(t: torch.Tensor, keep_tensor: bool):
    if keep_tensor:
        return t
    arr = t.detach().cpu().numpy()
    return float(arr) if arr.ndim == 0 else arr


def _require_positive(name: str, t: torch.Tensor) -> None:
    with torch.no_grad():
        if not bool(torch.all(t > 0)):
            raise DomainError(f"{name} must be > 0")


def _match_last_dim(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape[-1:] != b.shape[-1:]:
        raise DimensionError(
            f"{what}: length {a.shape[-1] if a.dim() else 1} != {b.shape[-1] if b.dim() else 1}"
        )


@dataclass(frozen=True)
class DirichletPrior:
    concentration: torch.Tensor
    rate: float = 1.0

    def __post_init__(self):
        conc = torch.as_tensor(self.concentration, dtype=torch.float64)
        if conc.dim() != 1 or conc.numel() == 0:
            raise DimensionError("concentration must be a nonempty vector")
        if not bool(torch.all(conc > 0)):
            raise DomainError("concentration entries must be > 0")
        if not self.rate > 0:
            raise DomainError("rate must be > 0")
        object.__setattr__(self, "concentration", conc)

    @property
    def latent_dim(self) -> int:
        return int(self.concentration.numel())

    @classmethod
    def symmetric(cls, latent_dim: int, value: float = 0.5, rate: float = 1.0) -> "DirichletPrior":
        return cls(torch.full((latent_dim,), float(value), dtype=torch.float64), rate)


@dataclass(frozen=True)
class DirichletPosteriorParams:
    concentration_hat: torch.Tensor

    def __post_init__(self):
        _require_positive("concentration_hat", torch.as_tensor(self.concentration_hat))


@dataclass(frozen=True)
class GammaDraws:
    values: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.values.sum(-1)


@dataclass(frozen=True)
class SimplexPoint:
    coords: torch.Tensor

    def check(self, atol: float = SIMPLEX_ATOL) -> None:
        check_simplex(self.coords, atol)


def check_simplex(coords, atol: float = SIMPLEX_ATOL) -> None:
    c, _ = _as_tensor(coords)
    with torch.no_grad():
        if not bool(torch.all(c >= 0)):
            raise DomainError("simplex coordinates must be >= 0")
        err = (c.sum(-1) - 1.0).abs().max()
        if float(err) > atol:
            raise DomainError(f"simplex coordinates must sum to 1 (off by {float(err):.3g})")


def _unwrap(obj, attr: str):
    return getattr(obj, attr) if hasattr(obj, attr) else obj


# --------------------------------------------------------------------------
# Special functions
# --------------------------------------------------------------------------


def log_gamma_fn(x: ArrayLike):
    """Natural log of the gamma function, positive arguments only."""
    t, keep = _as_tensor(x)
    _require_positive("x", t)
    return _out(torch.lgamma(t), keep)


def digamma_fn(x: ArrayLike):
    """Derivative of :func:`log_gamma_fn`, positive arguments only."""
    t, keep = _as_tensor(x)
    _require_positive("x", t)
    return _out(torch.digamma(t), keep)


# --------------------------------------------------------------------------
# Densities
# --------------------------------------------------------------------------


def gamma_log_pdf(x: ArrayLike, shape: ArrayLike, rate: ArrayLike = 1.0):
    """Log density of Gamma(shape, rate) (rate parameterization)."""
    tx, keep_x = _as_tensor(x)
    ta, keep_a = _as_tensor(shape)
    tb, keep_b = _as_tensor(rate)
    for name, t in (("x", tx), ("shape", ta), ("rate", tb)):
        _require_positive(name, t)
    out = ta * torch.log(tb) - torch.lgamma(ta) + (ta - 1) * torch.log(tx) - tb * tx
    return _out(out, keep_x or keep_a or keep_b)


def dirichlet_log_pdf(point, prior):
    """Log density of Dir(alpha) at a simplex point.

    Coordinates exactly at zero contribute 0 when their concentration is 1,
    -inf when it exceeds 1 and +inf below 1 (the density is unbounded there).
    """
    x, keep_x = _as_tensor(_unwrap(point, "coords"))
    alpha, keep_a = _as_tensor(_unwrap(prior, "concentration"))
    _match_last_dim(x, alpha, "dirichlet_log_pdf")
    _require_positive("concentration", alpha)
    check_simplex(x)
    x, alpha = torch.broadcast_tensors(x, alpha.to(x.dtype))
    at_zero = x == 0
    safe_x = torch.where(at_zero, torch.ones_like(x), x)
    terms = (alpha - 1) * torch.log(safe_x)
    boundary = torch.where(
        alpha == 1,
        torch.zeros_like(x),
        torch.where(alpha < 1, torch.full_like(x, math.inf), torch.full_like(x, -math.inf)),
    )
    terms = torch.where(at_zero, boundary, terms)
    out = torch.lgamma(alpha.sum(-1)) - torch.lgamma(alpha).sum(-1) + terms.sum(-1)
    return _out(out, keep_x or keep_a)


# --------------------------------------------------------------------------
# Reparameterized sampling
# --------------------------------------------------------------------------

# Below this value gammaincinv loses relative precision (and eventually
# underflows), while the small-value expansion is accurate to first order.
_SMALL_X = 1e-30
_FD_REL_STEP = 1e-5


def _log_icdf_approx(shape: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    # log of (uniform * shape * Gamma(shape)) ** (1 / shape)
    return (torch.log(u) + torch.lgamma(shape + 1)) / shape


def _dshape_gammainc(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    h = _FD_REL_STEP * a
    return (sc.gammainc(a + h, x) - sc.gammainc(a - h, x)) / (2 * h)


class _LogStdGammaICDF(torch.autograd.Function):
    """Log standard-gamma inverse CDF of a uniform draw, differentiated implicitly in shape."""

    @staticmethod
    def forward(ctx, shape, u):
        a = shape.detach().cpu().double().numpy()
        uu = u.detach().cpu().double().numpy()
        x = sc.gammaincinv(a, uu)
        small = x < _SMALL_X
        logx = np.log(np.where(small, 1.0, x))
        if small.any():
            approx = (np.log(uu) + sc.gammaln(a + 1)) / a
            logx = np.where(small, approx, logx)
        ctx.save_for_backward(shape, u)
        ctx.logx = logx
        ctx.small = small
        return torch.as_tensor(logx, dtype=shape.dtype, device=shape.device)

    @staticmethod
    def backward(ctx, grad_out):
        shape, u = ctx.saved_tensors
        a = shape.detach().cpu().double().numpy()
        uu = u.detach().cpu().double().numpy()
        logx, small = ctx.logx, ctx.small
        x = np.exp(logx)
        # d log(value) / d shape = -(d cdf / d shape) / (value * pdf(value)), cdf = regularized lower incomplete gamma
        log_xpdf = a * logx - x - sc.gammaln(a)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            dlogx = -_dshape_gammainc(a, x) * np.exp(-log_xpdf)
        if small.any():
            d_small = sc.digamma(a + 1) / a - (np.log(uu) + sc.gammaln(a + 1)) / a**2
            dlogx = np.where(small, d_small, dlogx)
        g = torch.as_tensor(dlogx, dtype=grad_out.dtype, device=grad_out.device)
        return grad_out * g, None


def _log_std_gamma(shape: torch.Tensor, u: torch.Tensor, method: str) -> torch.Tensor:
    if method == "exact":
        return _LogStdGammaICDF.apply(shape, u)
    if method == "approx":
        return _log_icdf_approx(shape, u)
    raise ValueError(f"unknown gamma sampling method {method!r}")


def _check_uniform(u: torch.Tensor) -> None:
    with torch.no_grad():
        if not bool(torch.all((u > 0) & (u < 1))):
            raise DomainError("uniform draws must lie in (0, 1)")


def sample_gamma_reparam(shape: ArrayLike, rate: ArrayLike, uniform_draw: ArrayLike, method: str = "exact"):
    """Gamma(shape, rate) draw as a deterministic transform of a uniform draw.

    ``method="exact"`` inverts the regularized incomplete gamma function and
    differentiates through it implicitly. ``method="approx"`` uses the
    small-shape closed form ``(uniform_draw * shape * Gamma(shape)) ** (1 / shape) / rate``,
    which underestimates the mean (see :func:`approx_sampler_bias`).
    """
    ta, keep_a = _as_tensor(shape)
    tb, keep_b = _as_tensor(rate)
    tu, keep_u = _as_tensor(uniform_draw)
    _require_positive("shape", ta)
    _require_positive("rate", tb)
    _check_uniform(tu)
    ta, tu = torch.broadcast_tensors(ta, tu.to(ta.dtype))
    x = torch.exp(_log_std_gamma(ta, tu, method)) / tb
    return _out(x, keep_a or keep_b or keep_u)


def sample_dirichlet(concentration, uniform_draws, rate: float = 1.0, method: str = "exact"):
    """Dirichlet draw by normalizing independent shared-rate gamma draws.

    Works on batches: the last axis is the simplex axis. Normalization is
    done in log space so that tiny gamma draws cannot produce 0/0.
    """
    alpha, keep_a = _as_tensor(_unwrap(_unwrap(concentration, "concentration"), "concentration_hat"))
    u, keep_u = _as_tensor(uniform_draws)
    _match_last_dim(alpha, u, "sample_dirichlet")
    _require_positive("concentration", alpha)
    _check_uniform(u)
    alpha, u = torch.broadcast_tensors(alpha, u.to(alpha.dtype))
    log_x = _log_std_gamma(alpha, u, method) - math.log(rate)
    coords = torch.softmax(log_x, dim=-1)
    values = torch.exp(log_x)
    if not (keep_a or keep_u):
        values, coords = values.detach(), coords.detach()
    return GammaDraws(values), SimplexPoint(coords)


def approx_sampler_bias(shape: float, n: int = 100_000, seed: int = 0) -> dict:
    """Monte-Carlo mean of both gamma samplers against the exact mean ``shape``."""
    u = torch.as_tensor(np.random.default_rng(seed).uniform(size=n), dtype=torch.float64)
    a = torch.full_like(u, float(shape))
    out = {"shape": float(shape), "true_mean": float(shape), "n": n}
    for method in ("exact", "approx"):
        x = torch.exp(_log_std_gamma(a, u, method))
        m = float(x.mean())
        out[f"{method}_mean"] = m
        out[f"{method}_rel_bias"] = (m - shape) / shape
    out["std_error"] = math.sqrt(shape / n)
    return out


# --------------------------------------------------------------------------
# KL divergences
# --------------------------------------------------------------------------


def kl_multigamma(posterior, prior):
    """KL between shared-rate MultiGamma(alpha_hat) and MultiGamma(alpha).

    sum lnG(alpha) - sum lnG(alpha_hat) + sum (alpha_hat - alpha) psi(alpha_hat),
    summed over the last axis.
    """
    a_hat, keep_h = _as_tensor(_unwrap(posterior, "concentration_hat"))
    alpha, keep_a = _as_tensor(_unwrap(prior, "concentration"))
    _match_last_dim(a_hat, alpha, "kl_multigamma")
    _require_positive("concentration_hat", a_hat)
    _require_positive("concentration", alpha)
    alpha = alpha.to(a_hat.dtype)
    kl = torch.lgamma(alpha) - torch.lgamma(a_hat) + (a_hat - alpha) * torch.digamma(a_hat)
    return _out(kl.sum(-1), keep_h or keep_a)


def kl_gaussian(mean: ArrayLike, log_variance: ArrayLike):
    """KL(N(mean, exp(log_variance)) || N(0, I)), summed over the last axis."""
    mu, keep_m = _as_tensor(mean)
    lv, keep_v = _as_tensor(log_variance)
    if mu.shape != lv.shape:
        raise DimensionError(f"kl_gaussian: shapes {tuple(mu.shape)} != {tuple(lv.shape)}")
    kl = -0.5 * (1 + lv - mu.pow(2) - torch.exp(lv))
    return _out(kl.sum(-1), keep_m or keep_v)
