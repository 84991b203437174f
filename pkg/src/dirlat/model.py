"""Convolutional VAE with a Dirichlet or Gaussian latent head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import numerics

PRIOR_KINDS = ("dirichlet", "gaussian")
CONCENTRATION_FLOOR = 1e-4
LOGVAR_CLAMP = 10.0


@dataclass
class ModelConfig:
    prior_kind: str = "dirichlet"
    latent_dim: int = 1024
    image_size: int = 128
    prior_concentration: float = 0.5
    prior_rate: float = 1.0
    base_channels: int = 32
    max_channels: int = 256
    gamma_sampler: str = "exact"

    def validate(self) -> None:
        if self.prior_kind not in PRIOR_KINDS:
            raise ValueError(f"prior_kind must be one of {PRIOR_KINDS}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        depth = math.log2(self.image_size / 4)
        if self.image_size < 8 or depth != int(depth):
            raise ValueError("image_size must be 4 * 2**d with d >= 1")
        if self.prior_concentration <= 0 or self.prior_rate <= 0:
            raise ValueError("prior concentration and rate must be > 0")
        if self.gamma_sampler not in ("exact", "approx"):
            raise ValueError("gamma_sampler must be 'exact' or 'approx'")

    @property
    def depth(self) -> int:
        return int(math.log2(self.image_size / 4))

    def channels(self) -> list[int]:
        return [min(self.base_channels * 2**i, self.max_channels) for i in range(self.depth)]


@dataclass
class Posterior:
    """Per-image posterior parameters: concentration (Dirichlet) or mean/log-variance."""

    kind: str
    concentration: torch.Tensor | None = None
    mean: torch.Tensor | None = None
    log_variance: torch.Tensor | None = None

    def detach(self) -> "Posterior":
        f = lambda t: None if t is None else t.detach()
        return Posterior(self.kind, f(self.concentration), f(self.mean), f(self.log_variance))

    def __len__(self) -> int:
        t = self.concentration if self.kind == "dirichlet" else self.mean
        return int(t.shape[0])

    def index(self, idx) -> "Posterior":
        f = lambda t: None if t is None else t[idx]
        return Posterior(self.kind, f(self.concentration), f(self.mean), f(self.log_variance))


@dataclass
class LatentCode:
    """Decoder input ``code``; in Dirichlet mode also the pre-normalization gamma values."""

    code: torch.Tensor
    gamma_space: torch.Tensor | None = None


class DirVAE(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        k = config.latent_dim
        chans = config.channels()

        layers: list[nn.Module] = []
        c_in = 1
        for c in chans:
            layers += [nn.Conv2d(c_in, c, 4, 2, 1), nn.LeakyReLU(0.2)]
            c_in = c
        layers.append(nn.Flatten())
        self.encoder = nn.Sequential(*layers)
        feat = chans[-1] * 16
        # only the head for the configured prior exists
        self.head = nn.Linear(feat, k if config.prior_kind == "dirichlet" else 2 * k)

        rev = chans[::-1]
        self.decoder_in = nn.Linear(k, rev[0] * 16)
        up: list[nn.Module] = []
        for a, b in zip(rev[:-1], rev[1:]):
            up += [nn.ConvTranspose2d(a, b, 4, 2, 1), nn.LeakyReLU(0.2)]
        up.append(nn.ConvTranspose2d(rev[-1], 1, 4, 2, 1))
        self.decoder = nn.Sequential(*up)
        self._top = (rev[0], 4, 4)

        self.register_buffer(
            "prior_concentration", torch.full((k,), float(config.prior_concentration)), persistent=False
        )

    @property
    def prior_kind(self) -> str:
        return self.config.prior_kind

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def prior(self) -> numerics.DirichletPrior:
        return numerics.DirichletPrior.symmetric(self.latent_dim, self.config.prior_concentration, self.config.prior_rate)

    def _check_images(self, x: torch.Tensor) -> None:
        s = self.config.image_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (1, s, s):
            raise ValueError(f"expected images [B, 1, {s}, {s}], got {tuple(x.shape)}")

    def encode(self, images: torch.Tensor) -> Posterior:
        self._check_images(images)
        h = self.head(self.encoder(images))
        if self.prior_kind == "dirichlet":
            return Posterior("dirichlet", concentration=F.softplus(h) + CONCENTRATION_FLOOR)
        mean, logvar = h.chunk(2, dim=-1)
        return Posterior("gaussian", mean=mean, log_variance=logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))

    def draw_noise(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Parameter-free noise for ``sample_latent``: uniforms (Dirichlet) or normals (Gaussian)."""
        shape = (n, self.latent_dim)
        if self.prior_kind == "dirichlet":
            return np.clip(rng.uniform(size=shape), 1e-12, 1 - 2**-53)
        return rng.standard_normal(size=shape)

    def sample_latent(self, post: Posterior, draws) -> LatentCode:
        if post.kind == "dirichlet":
            u = torch.as_tensor(draws, dtype=torch.float64)
            if u.shape != post.concentration.shape:
                raise ValueError(f"draws {tuple(u.shape)} vs posterior {tuple(post.concentration.shape)}")
            gamma, point = numerics.sample_dirichlet(
                post.concentration, u.to(post.concentration.dtype), rate=self.config.prior_rate,
                method=self.config.gamma_sampler,
            )
            return LatentCode(point.coords, gamma.values)
        eps = torch.as_tensor(draws, dtype=post.mean.dtype)
        if eps.shape != post.mean.shape:
            raise ValueError(f"draws {tuple(eps.shape)} vs posterior {tuple(post.mean.shape)}")
        return LatentCode(post.mean + torch.exp(0.5 * post.log_variance) * eps)

    def mean_latent(self, post: Posterior) -> LatentCode:
        """Deterministic anchor: alpha_hat / sum(alpha_hat), or the Gaussian mean."""
        if post.kind == "dirichlet":
            gamma = post.concentration / self.config.prior_rate
            return LatentCode(gamma / gamma.sum(-1, keepdim=True), gamma)
        return LatentCode(post.mean)

    def decode(self, code) -> torch.Tensor:
        z = code.code if isinstance(code, LatentCode) else code
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"code length {z.shape[-1]} != latent_dim {self.latent_dim}")
        h = F.leaky_relu(self.decoder_in(z), 0.2).view(-1, *self._top)
        return torch.sigmoid(self.decoder(h))

    def kl(self, post: Posterior) -> torch.Tensor:
        """Per-image KL to the prior."""
        if post.kind == "dirichlet":
            return numerics.kl_multigamma(post.concentration, self.prior_concentration.to(post.concentration.dtype))
        return numerics.kl_gaussian(post.mean, post.log_variance)


def l1_reconstruction_loss(original: torch.Tensor, reconstruction: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel difference."""
    if original.shape != reconstruction.shape:
        raise ValueError(f"shape mismatch {tuple(original.shape)} vs {tuple(reconstruction.shape)}")
    return (original - reconstruction).abs().mean()


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
