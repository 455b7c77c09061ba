"""The part-wise generator: a shared pose encoder + bottleneck feeding
three style-modulated UNet decoders (head / hand / torso), the attribute
embedding stub, the z–attribute style fusion, and mask composition.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import VocabularyError
from .nnblocks import ConvBlock, MhaFuse, UNetDecoder, UNetEncoder
from .synthdata import N_ATTRIBUTE_COMBOS

ATTRIBUTE_DIM = 512
PARTS = ("head", "hand", "torso")


class AttributeCodec(nn.Module):
    """Frozen attribute embedding: one-hot combination -> R^512.

    Stands in for a pretrained text encoder. Each attribute combination
    maps to a fixed random orthonormal direction, so distinct attributes
    are maximally separated; the table is a frozen buffer. Substitute any
    module with the same (ids -> (B, dim)) contract to plug in a real
    encoder.
    """

    def __init__(self, n_classes=N_ATTRIBUTE_COMBOS, dim=ATTRIBUTE_DIM, seed=0):
        super().__init__()
        if dim < n_classes:
            raise ValueError("embedding dim must be at least the class count")
        g = torch.Generator().manual_seed(seed)
        m = torch.randn(dim, n_classes, generator=g, dtype=torch.float64)
        q, _ = torch.linalg.qr(m)
        self.n_classes = n_classes
        self.dim = dim
        self.register_buffer("table", q.T.contiguous().float())

    def forward(self, attr_ids: torch.Tensor) -> torch.Tensor:
        attr_ids = torch.as_tensor(attr_ids, dtype=torch.long)
        if attr_ids.numel() and (attr_ids.min() < 0 or attr_ids.max() >= self.n_classes):
            bad = attr_ids[(attr_ids < 0) | (attr_ids >= self.n_classes)][0].item()
            raise VocabularyError(f"attribute id {bad} outside vocabulary "
                                  f"[0, {self.n_classes})")
        return self.table[attr_ids]


class StyleFuser(nn.Module):
    """z_a = MHA(z, a): project both to the style width and fuse as a
    two-token sequence; with no attribute the latent token is fused alone."""

    def __init__(self, latent_dim, style_dim=128, attr_dim=ATTRIBUTE_DIM,
                 depth=2, heads=4):
        super().__init__()
        self.z_proj = nn.Linear(latent_dim, style_dim)
        self.a_proj = nn.Linear(attr_dim, style_dim)
        self.fuse = MhaFuse(style_dim, depth=depth, heads=heads)

    def forward(self, z, a=None):
        tokens = [self.z_proj(z)[:, None]]
        if a is not None:
            tokens.append(self.a_proj(a)[:, None])
        return self.fuse(torch.cat(tokens, dim=1))


class AttributeUpsampler(nn.Module):
    """a -> image-shaped map: a 4-layer MLP to a coarse grid, then as many
    transpose convs as the target size requires (3 at the 8x-upsampling
    default)."""

    def __init__(self, attr_dim=ATTRIBUTE_DIM, out_size=64, out_ch=3,
                 base_size=8, width=64, conv_ch=16):
        super().__init__()
        if out_size < 2 * base_size or out_size % base_size:
            raise ValueError("out_size must be a multiple of base_size, "
                             "at least 2x")
        n_ups = (out_size // base_size).bit_length() - 1
        if base_size * (2 ** n_ups) != out_size:
            raise ValueError("out_size / base_size must be a power of two")
        self.base_size = base_size
        self.conv_ch = conv_ch
        self.mlp = nn.Sequential(
            nn.Linear(attr_dim, width), nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(width, width), nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(width, width), nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(width, conv_ch * base_size * base_size),
        )
        ups = []
        ch = conv_ch
        for i in range(n_ups):
            nxt = out_ch if i == n_ups - 1 else ch
            ups.append(nn.ConvTranspose2d(ch, nxt, 4, stride=2, padding=1))
            if i < n_ups - 1:
                ups.append(nn.LeakyReLU(0.2, inplace=True))
            ch = nxt
        self.ups = nn.Sequential(*ups)

    def forward(self, a):
        h = self.mlp(a)
        h = h.reshape(-1, self.conv_ch, self.base_size, self.base_size)
        return self.ups(h)


@dataclass
class GeneratorConfig:
    image_size: int = 64
    cond_channels: int = 3          # 3 for skeleton renders, K for heatmaps
    out_channels: int = 3
    channels: tuple = (16, 32, 64, 128, 256)
    latent_dim: int = 64
    style_dim: int = 128
    attr_dim: int = ATTRIBUTE_DIM
    n_attributes: int = N_ATTRIBUTE_COMBOS
    attr_seed: int = 0
    psi_mode: str = "linear"        # linear | conv | none
    use_skips: bool = True
    use_attribute: bool = True
    fuse_depth: int = 2
    heads: int = 4


@dataclass
class GeneratorOutput:
    """Per-part syntheses, each (B, C, H, W) in (0, 1)."""

    x_head: torch.Tensor
    x_hand: torch.Tensor
    x_torso: torch.Tensor

    def part(self, name):
        return {"head": self.x_head, "hand": self.x_hand,
                "torso": self.x_torso}[name]


class PENetGenerator(nn.Module):
    """Pose-conditioned signer synthesis with three part decoders.

    The encoder and bottleneck are shared; each part decoder receives the
    skip pyramid with its features modulated by the style code at every
    level. When modulation is disabled (psi_mode "none") the style is
    injected into the bottleneck instead, so style conditioning never
    disappears entirely.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        cfg = config
        self.encoder = UNetEncoder(cfg.cond_channels, cfg.channels)
        self.bottleneck = ConvBlock(cfg.channels[-1], cfg.channels[-1])
        self.decoders = nn.ModuleDict({
            part: UNetDecoder(cfg.out_channels, channels=cfg.channels,
                              style_dim=cfg.style_dim, psi_mode=cfg.psi_mode,
                              use_skips=cfg.use_skips)
            for part in PARTS
        })
        self.attr_codec = AttributeCodec(cfg.n_attributes, cfg.attr_dim,
                                         seed=cfg.attr_seed)
        self.style_fuser = StyleFuser(cfg.latent_dim, cfg.style_dim,
                                      cfg.attr_dim, depth=cfg.fuse_depth,
                                      heads=cfg.heads)
        self.attr_upsampler = AttributeUpsampler(
            cfg.attr_dim, out_size=cfg.image_size, out_ch=cfg.cond_channels)
        if cfg.psi_mode == "none":
            self.bottleneck_style = nn.Linear(cfg.style_dim, cfg.channels[-1])
        else:
            self.bottleneck_style = None

    def encode_attribute(self, attr_ids) -> torch.Tensor:
        return self.attr_codec(attr_ids)

    def fuse_style(self, z, a=None) -> torch.Tensor:
        if not self.config.use_attribute:
            a = None
        return self.style_fuser(z, a)

    def upsample_attribute(self, a) -> torch.Tensor:
        return self.attr_upsampler(a)

    def generate(self, y, z_a) -> GeneratorOutput:
        cfg = self.config
        if y.shape[-1] != cfg.image_size or y.shape[-2] != cfg.image_size:
            raise ValueError(f"conditioning is {tuple(y.shape[-2:])}, "
                             f"model configured for {cfg.image_size}")
        if y.shape[1] != cfg.cond_channels:
            raise ValueError(f"conditioning has {y.shape[1]} channels, "
                             f"expected {cfg.cond_channels}")
        skips = self.encoder(y)
        bneck = self.bottleneck(skips[-1])
        if self.bottleneck_style is not None:
            bneck = bneck + self.bottleneck_style(z_a)[:, :, None, None]
        skips = skips[:-1] + [bneck]
        outs = {part: dec(skips, z_a) for part, dec in self.decoders.items()}
        return GeneratorOutput(x_head=outs["head"], x_hand=outs["hand"],
                               x_torso=outs["torso"])

    def forward(self, y, z, attr_ids=None) -> GeneratorOutput:
        a = self.encode_attribute(attr_ids) if attr_ids is not None else None
        z_a = self.fuse_style(z, a)
        return self.generate(y, z_a)


def _check_mask(m, like):
    if m.shape[-2:] != like.shape[-2:]:
        raise ValueError(f"mask {tuple(m.shape[-2:])} does not match parts "
                         f"{tuple(like.shape[-2:])}")
    if not torch.all((m == 0) | (m == 1)):
        raise ValueError("masks must be binary")
    while m.dim() < like.dim():
        m = m.unsqueeze(0 if m.dim() < like.dim() - 1 else 1)
    if m.dim() == like.dim() and m.shape[1] not in (1, like.shape[1]):
        raise ValueError("mask channel dim must be 1 or match the parts")
    return m.bool()


def compose(parts: GeneratorOutput, m_head, m_hand, m_torso) -> torch.Tensor:
    """Assemble the composite: hand over head over torso, background black.

    Overlapping mask pixels are resolved by the priority rule before the
    piecewise assembly, so the result equals each part exactly on its
    effective region.
    """
    x = parts.x_head
    mh = _check_mask(m_hand, x)
    head = _check_mask(m_head, x)
    mhd = head & ~mh
    mt = _check_mask(m_torso, x) & ~mh & ~head
    out = torch.zeros_like(x)
    out = torch.where(mt, parts.x_torso, out)
    out = torch.where(mhd, parts.x_head, out)
    out = torch.where(mh, parts.x_hand, out)
    return out
