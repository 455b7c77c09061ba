"""Pose-encoding VAE: the conditional posterior q(z | x, y, a), the
reparameterization path, prior sampling, and the KL term.

The posterior sees the target image x together with the pose conditioning
y, so the latent only has to carry what y cannot explain — appearance.
Three fusion schemes are supported: "early" concatenates x and y before a
single encoder, "shared" reuses the generator's pose encoder (tied
weights), and "separate" trains an untied pose encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nnblocks import ConvFuse, MhaFuse, UNetEncoder

FUSION_SCHEMES = ("early", "shared", "separate")
AGGREGATORS = ("mha", "conv")


@dataclass
class PosteriorParams:
    """Gaussian posterior parameters: mean and log-variance, (B, M)."""

    mu: torch.Tensor
    log_var: torch.Tensor

    def validate(self):
        if self.mu.shape != self.log_var.shape:
            raise ValueError("mu and log_var must share a shape")
        if not torch.isfinite(self.mu).all() or not torch.isfinite(self.log_var).all():
            raise ValueError("posterior parameters must be finite")
        return self


@dataclass
class PosteriorConfig:
    latent_dim: int = 64
    scheme: str = "separate"              # early | shared | separate
    aggregator: str = "mha"               # f_xy fusion: mha | conv
    use_pose: bool = True                 # False → plain q(z|x) baseline
    attribute_in_posterior: bool = False  # feed y ⊕ upsampled-attribute
    image_channels: int = 3
    cond_channels: int = 3
    image_size: int = 64
    channels: tuple = (16, 32, 64, 128, 256)
    dim: int = 256
    heads: int = 4
    depth: int = 2                        # fusion attention layers

    def __post_init__(self):
        if self.scheme not in FUSION_SCHEMES:
            raise ValueError(f"unknown fusion scheme: {self.scheme!r}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator: {self.aggregator!r}")


def _mlp_head(dim, out_dim):
    return nn.Sequential(
        nn.Linear(dim, dim), nn.LeakyReLU(0.2, inplace=True),
        nn.Linear(dim, out_dim))


class PosteriorEncoder(nn.Module):
    """Computes q(z | x, y[, a]) under the configured fusion scheme.

    For the "shared" scheme pass the generator's pose encoder; its weights
    are used (and trained) in place of an own pose encoder.
    """

    def __init__(self, config: PosteriorConfig, pose_encoder: UNetEncoder | None = None):
        super().__init__()
        self.config = config
        cfg = config
        cond_ch = cfg.cond_channels + (cfg.image_channels if cfg.attribute_in_posterior else 0)
        self.grid = cfg.image_size // (2 ** (len(cfg.channels) - 1))
        if self.grid < 1:
            raise ValueError("encoder pyramid deeper than the image allows")

        if cfg.scheme == "early" and cfg.use_pose:
            self.x_encoder = UNetEncoder(cfg.image_channels + cond_ch, cfg.channels)
        else:
            self.x_encoder = UNetEncoder(cfg.image_channels, cfg.channels)

        self.pose_encoder = None
        self._tied_pose_encoder = False
        if cfg.use_pose and cfg.scheme == "shared":
            if cfg.attribute_in_posterior:
                raise ValueError("scheme 'shared' ties the pose encoder to the "
                                 "generator's, whose input width cannot carry "
                                 "the upsampled attribute; use 'early' or "
                                 "'separate'")
            if pose_encoder is None:
                raise ValueError("scheme 'shared' needs the generator's pose encoder")
            self.pose_encoder = pose_encoder
            self._tied_pose_encoder = True
        elif cfg.use_pose and cfg.scheme == "separate":
            self.pose_encoder = UNetEncoder(cond_ch, cfg.channels)

        self.proj_x = nn.Conv2d(cfg.channels[-1], cfg.dim, 1)
        n_tok = self.grid * self.grid
        self.pos_x = nn.Parameter(torch.randn(1, n_tok, cfg.dim) * 0.02)
        if self.pose_encoder is not None:
            y_width = (self.pose_encoder.channels[-1]
                       if cfg.scheme == "shared" else cfg.channels[-1])
            self.proj_y = nn.Conv2d(y_width, cfg.dim, 1)
            self.pos_y = nn.Parameter(torch.randn(1, n_tok, cfg.dim) * 0.02)
        else:
            self.proj_y = None
            self.pos_y = None

        if cfg.aggregator == "mha":
            self.fuse = MhaFuse(cfg.dim, depth=cfg.depth, heads=cfg.heads)
        else:
            width = cfg.dim * (2 if self.proj_y is not None else 1)
            self.fuse = ConvFuse(width, cfg.dim)

        self.mu_head = _mlp_head(cfg.dim, cfg.latent_dim)
        self.log_var_head = _mlp_head(cfg.dim, cfg.latent_dim)

    def named_parameters(self, prefix: str = "", recurse: bool = True,
                         remove_duplicate: bool = True):
        # A tied pose encoder belongs to the generator; keep it out of this
        # module's own parameter listing so optimizers do not double-count.
        for name, p in super().named_parameters(prefix, recurse, remove_duplicate):
            if self._tied_pose_encoder and name.startswith(
                    f"{prefix + '.' if prefix else ''}pose_encoder."):
                continue
            yield name, p

    def _tokens(self, fmap, proj, pos):
        m = proj(fmap)
        if m.shape[-1] != self.grid or m.shape[-2] != self.grid:
            m = F.adaptive_avg_pool2d(m, (self.grid, self.grid))
        tok = m.flatten(2).transpose(1, 2)
        return tok + pos, m

    def forward(self, x, y=None, a_up=None) -> PosteriorParams:
        cfg = self.config
        if cfg.use_pose:
            if y is None:
                raise ValueError("this posterior is pose-conditioned; pass y")
            if y.shape[-2:] != x.shape[-2:]:
                raise ValueError(f"x {tuple(x.shape[-2:])} and y "
                                 f"{tuple(y.shape[-2:])} disagree spatially")
            if cfg.attribute_in_posterior:
                if a_up is None:
                    raise ValueError("configured for y ⊕ a↑; pass a_up")
                y = torch.cat([y, a_up], dim=1)
        if cfg.use_pose and cfg.scheme == "early":
            mx = self.x_encoder(torch.cat([x, y], dim=1))[-1]
            tok_x, map_x = self._tokens(mx, self.proj_x, self.pos_x)
            tok_y, map_y = None, None
        else:
            mx = self.x_encoder(x)[-1]
            tok_x, map_x = self._tokens(mx, self.proj_x, self.pos_x)
            tok_y = map_y = None
            if self.pose_encoder is not None:
                my = self.pose_encoder(y)[-1]
                tok_y, map_y = self._tokens(my, self.proj_y, self.pos_y)

        if cfg.aggregator == "mha":
            f_xy = self.fuse(tok_x, tok_y)
        else:
            fmap = map_x if map_y is None else torch.cat([map_x, map_y], dim=1)
            f_xy = self.fuse(fmap)
        return PosteriorParams(mu=self.mu_head(f_xy),
                               log_var=self.log_var_head(f_xy))


def reparameterize(params: PosteriorParams, generator: torch.Generator | None = None):
    """z = mu + sigma * eps with eps ~ N(0, 1); gradients flow to both heads."""
    eps = torch.randn(params.mu.shape, generator=generator,
                      dtype=params.mu.dtype, device=params.mu.device)
    return params.mu + torch.exp(0.5 * params.log_var) * eps


def kl_loss(params: PosteriorParams) -> torch.Tensor:
    """KL(q || N(0, I)) = -1/2 sum(1 + log s^2 - s^2 - mu^2), batch mean."""
    term = 1.0 + params.log_var - torch.exp(params.log_var) - params.mu ** 2
    per_sample = -0.5 * term.sum(dim=-1)
    return per_sample.mean()


def sample_prior(n: int, latent_dim: int,
                 generator: torch.Generator | None = None,
                 dtype=torch.float32) -> torch.Tensor:
    """Draw n latent codes from the standard normal prior."""
    if latent_dim < 1:
        raise ValueError("latent_dim must be at least 1")
    return torch.randn(n, latent_dim, generator=generator, dtype=dtype)
