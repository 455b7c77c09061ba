"""Reusable network pieces: conv blocks, token fusion, UNet scaffolding,
and the style-modulation layers used on decoder skip connections."""

from __future__ import annotations

import torch
import torch.nn as nn


def init_weights(module: nn.Module, std: float = 0.02):
    """Normal(0, std) init for conv/linear weights, zeros for biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return module


class ConvBlock(nn.Module):
    """3x3 conv + instance norm + LeakyReLU(0.2)."""

    def __init__(self, in_ch, out_ch, stride=1, norm=True, act=True):
        super().__init__()
        layers = [nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)]
        if norm:
            layers.append(nn.InstanceNorm2d(out_ch))
        if act:
            layers.append(nn.LeakyReLU(0.2, inplace=True))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class DownBlock(nn.Module):
    """Halve the resolution: strided conv followed by a refinement conv."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.net = nn.Sequential(
            ConvBlock(in_ch, out_ch, stride=2),
            ConvBlock(out_ch, out_ch, stride=1),
        )

    def forward(self, x):
        return self.net(x)


class UpBlock(nn.Module):
    """Double the resolution with a transpose conv."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.net = nn.Sequential(
            nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1),
            nn.InstanceNorm2d(out_ch),
            nn.LeakyReLU(0.2, inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection to a token sequence (B, N, D).

    Token i is the bias-free linear projection of patch i; inputs whose
    sides are not multiples of the patch are floor-cropped. Optionally
    prepends a learnable class token and adds learned position codes.
    """

    def __init__(self, in_ch, dim, patch=8, with_cls=False, max_side=None):
        super().__init__()
        self.patch = patch
        self.proj = nn.Conv2d(in_ch, dim, kernel_size=patch, stride=patch,
                              bias=False)
        self.cls = nn.Parameter(torch.zeros(1, 1, dim)) if with_cls else None
        if max_side is not None:
            n = (max_side // patch) ** 2 + (1 if with_cls else 0)
            self.pos = nn.Parameter(torch.randn(1, n, dim) * 0.02)
        else:
            self.pos = None

    def forward(self, x):
        if x.shape[-2] < self.patch or x.shape[-1] < self.patch:
            raise ValueError(
                f"input {tuple(x.shape[-2:])} smaller than patch {self.patch}")
        tokens = self.proj(x).flatten(2).transpose(1, 2)
        if self.cls is not None:
            tokens = torch.cat([self.cls.expand(x.shape[0], -1, -1), tokens], dim=1)
        if self.pos is not None:
            if tokens.shape[1] > self.pos.shape[1]:
                raise ValueError(f"{tokens.shape[1]} tokens exceed the "
                                 f"position table ({self.pos.shape[1]})")
            tokens = tokens + self.pos[:, : tokens.shape[1]]
        return tokens


class TransformerLayer(nn.Module):
    """Pre-norm self-attention block: x + MHA(LN x), then x + MLP(LN x)."""

    def __init__(self, dim, heads=4, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class MhaFuse(nn.Module):
    """Fuse one or two token sequences into a single vector.

    The sequences are concatenated behind a learnable class token, run
    through `depth` transformer layers, and the class-token output is the
    fused feature. With no position codes on the inputs the result is
    invariant to token order.
    """

    def __init__(self, dim, depth=2, heads=4):
        super().__init__()
        self.cls = nn.Parameter(torch.zeros(1, 1, dim))
        self.layers = nn.ModuleList(
            [TransformerLayer(dim, heads) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)

    def forward(self, seq_a, seq_b=None):
        if seq_b is not None:
            if seq_b.shape[-1] != seq_a.shape[-1]:
                raise ValueError(
                    f"token dims differ: {seq_a.shape[-1]} vs {seq_b.shape[-1]}")
            tokens = torch.cat([seq_a, seq_b], dim=1)
        else:
            tokens = seq_a
        x = torch.cat([self.cls.expand(tokens.shape[0], -1, -1), tokens], dim=1)
        for layer in self.layers:
            x = layer(x)
        return self.norm(x[:, 0])


class ConvFuse(nn.Module):
    """Fuse concatenated feature maps with a 3x3 stride-1 conv, then pool."""

    def __init__(self, in_ch, dim):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, dim, 3, stride=1, padding=1)
        self.act = nn.LeakyReLU(0.2, inplace=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, fmap):
        x = self.act(self.conv(fmap))
        return self.proj(x.mean(dim=(2, 3)))


class CrossAttention(nn.Module):
    """Single pre-norm cross-attention block: queries attend to a context."""

    def __init__(self, dim, heads=4, mlp_ratio=2.0):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, query, context):
        q = self.norm_q(query)
        kv = self.norm_kv(context)
        x = query + self.attn(q, kv, kv, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class PsiModulate(nn.Module):
    """Style modulation: instance-normalize, then per-channel scale/shift.

    out = (1 + s(z)) * instnorm(f) + b(z), with s and b linear in the style
    vector and zero-initialized, so the layer starts as plain normalization.
    """

    def __init__(self, channels, style_dim):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.to_scale = nn.Linear(style_dim, channels)
        self.to_shift = nn.Linear(style_dim, channels)
        nn.init.zeros_(self.to_scale.weight)
        nn.init.zeros_(self.to_scale.bias)
        nn.init.zeros_(self.to_shift.weight)
        nn.init.zeros_(self.to_shift.bias)

    def forward(self, f, z):
        h = self.norm(f)
        s = self.to_scale(z)[:, :, None, None]
        b = self.to_shift(z)[:, :, None, None]
        return (1.0 + s) * h + b


class PsiConv(nn.Module):
    """Conv variant of the style modulation.

    The style vector is broadcast over the spatial grid, concatenated with
    the normalized feature, and a small conv net predicts dense per-pixel
    scale/shift maps. Zero-initialized heads keep it normalization-only at
    init.
    """

    def __init__(self, channels, style_dim, hidden=32):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.body = nn.Sequential(
            nn.Conv2d(channels + style_dim, hidden, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.to_scale = nn.Conv2d(hidden, channels, 3, padding=1)
        self.to_shift = nn.Conv2d(hidden, channels, 3, padding=1)
        for head in (self.to_scale, self.to_shift):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, f, z):
        h = self.norm(f)
        zmap = z[:, :, None, None].expand(-1, -1, f.shape[2], f.shape[3])
        e = self.body(torch.cat([h, zmap], dim=1))
        return (1.0 + self.to_scale(e)) * h + self.to_shift(e)


def make_psi(mode: str, channels: int, style_dim: int) -> nn.Module | None:
    """Build the requested modulation layer; mode 'none' returns None."""
    if mode == "linear":
        return PsiModulate(channels, style_dim)
    if mode == "conv":
        return PsiConv(channels, style_dim)
    if mode == "none":
        return None
    raise ValueError(f"unknown psi mode: {mode!r}")


class UNetEncoder(nn.Module):
    """Stem plus a downsampling pyramid; returns per-level skips.

    With channels (c0..cL-1) the skips sit at resolutions (R, R/2, ...,
    R/2^(L-1)); the last skip is also the bottleneck input.
    """

    def __init__(self, in_ch, channels=(16, 32, 64, 128, 256)):
        super().__init__()
        self.channels = tuple(channels)
        self.stem = ConvBlock(in_ch, channels[0], stride=1)
        self.downs = nn.ModuleList(
            [DownBlock(channels[i - 1], channels[i])
             for i in range(1, len(channels))])

    def forward(self, x):
        skips = [self.stem(x)]
        for down in self.downs:
            skips.append(down(skips[-1]))
        return skips


class UNetDecoder(nn.Module):
    """Upsampling path with optional skip fusion and style modulation.

    Each level upsamples, optionally concatenates the matching encoder
    skip, applies the Psi modulation to the (possibly concatenated)
    feature, and fuses with a conv. The head maps to `out_ch` through a
    sigmoid, so outputs live in (0, 1).
    """

    def __init__(self, out_ch, channels=(16, 32, 64, 128, 256),
                 style_dim=128, psi_mode="linear", use_skips=True):
        super().__init__()
        self.channels = tuple(channels)
        self.use_skips = bool(use_skips)
        self.psi_mode = psi_mode
        ups, psis, fuses = [], [], []
        for i in range(len(channels) - 1, 0, -1):
            ups.append(UpBlock(channels[i], channels[i - 1]))
            width = channels[i - 1] * (2 if self.use_skips else 1)
            psi = make_psi(psi_mode, width, style_dim)
            psis.append(psi if psi is not None else nn.Identity())
            fuses.append(ConvBlock(width, channels[i - 1], stride=1))
        self.ups = nn.ModuleList(ups)
        self.psis = nn.ModuleList(psis)
        self.fuses = nn.ModuleList(fuses)
        self.head = nn.Conv2d(channels[0], out_ch, 3, padding=1)

    def forward(self, skips, style):
        x = skips[-1]
        for level, (up, psi, fuse) in enumerate(zip(self.ups, self.psis, self.fuses)):
            x = up(x)
            if self.use_skips:
                x = torch.cat([x, skips[-2 - level]], dim=1)
            if self.psi_mode != "none":
                x = psi(x, style)
            x = fuse(x)
        return torch.sigmoid(self.head(x))
