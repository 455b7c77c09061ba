"""Perceptual loss, the three-operator differentiable edge loss, and
total-loss assembly.

The perceptual backbone is a frozen randomly-initialized conv net with
five tap points (the first tap is the image itself, so the loss keeps a
direct pixel-space anchor); real pretrained backbones can be plugged in
by passing custom stages.

The edge operators run on an internal grayscale conversion and share a
smoothed absolute value `sqrt(v^2 + eps^2) - eps` whose eps is an exact
power of two, so constant images produce bitwise-zero maps. Canny's
hysteresis is replaced by a differentiable surrogate: Gaussian smoothing,
Sobel gradients, soft non-maximum suppression (bilinear samples one pixel
along +/- the gradient direction, compared through sigmoid gates), and a
sigmoid double threshold at t_low=0.1, t_high=0.2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

# power of two: sqrt(EPS^2) == EPS exactly, so smooth-abs(0) == 0
_EPS = 2.0 ** -20

T_LOW = 0.1
T_HIGH = 0.2


class FeatureExtractor(nn.Module):
    """Frozen multi-tap feature network for perceptual distances.

    Tap 1 is the identity; taps 2..n are successively strided conv
    features with fixed random weights.
    """

    def __init__(self, in_ch=3, width=16, n_taps=5, seed=0, stages=None):
        super().__init__()
        if n_taps < 1:
            raise ValueError("need at least one tap")
        if stages is None:
            torch.manual_seed(seed)
            stages = []
            prev = in_ch
            ch = width
            for _ in range(n_taps - 1):
                stages.append(nn.Sequential(
                    nn.Conv2d(prev, ch, 3, stride=2, padding=1),
                    nn.LeakyReLU(0.2, inplace=True),
                ))
                prev = ch
                ch = min(ch * 2, width * 8)
        self.stages = nn.ModuleList(stages)
        self.n_taps = len(self.stages) + 1
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        """Returns the list of tap activations, the input first."""
        taps = [x]
        h = x
        for stage in self.stages:
            h = stage(h)
            taps.append(h)
        return taps


def perceptual_loss(x, x_hat, extractor: FeatureExtractor):
    """Sum over taps of the per-sample L2 feature distance, batch mean."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs "
                         f"{tuple(x_hat.shape)}")
    total = 0.0
    for fx, fh in zip(extractor(x), extractor(x_hat)):
        diff = (fx - fh).flatten(1)
        total = total + diff.norm(dim=1).mean()
    return total


@dataclass
class EdgeMaps:
    sobel_mag: torch.Tensor
    laplacian: torch.Tensor
    soft_canny: torch.Tensor

    def as_tuple(self):
        return (self.sobel_mag, self.laplacian, self.soft_canny)


def _to_gray(image):
    if image.shape[1] == 1:
        return image
    if image.shape[1] != 3:
        raise ValueError(f"expected 1 or 3 channels, got {image.shape[1]}")
    w = image.new_tensor([0.299, 0.587, 0.114]).view(1, 3, 1, 1)
    return (image * w).sum(dim=1, keepdim=True)


def _smooth_abs(v):
    return torch.sqrt(v * v + _EPS * _EPS) - _EPS


def _shift(p, i, j, h, w):
    return p[..., i:i + h, j:j + w]


def _sobel(gray):
    """3x3 Sobel gradients with replicate padding.

    Implemented with explicit slicing, grouped so the positive and
    negative taps run through bitwise-identical computations: constant
    inputs cancel exactly regardless of rounding or conv backend.
    """
    h, w = gray.shape[-2:]
    p = F.pad(gray, (1, 1, 1, 1), mode="replicate")

    def col(j):
        return (_shift(p, 0, j, h, w) + 2.0 * _shift(p, 1, j, h, w)
                + _shift(p, 2, j, h, w))

    def row(i):
        return (_shift(p, i, 0, h, w) + 2.0 * _shift(p, i, 1, h, w)
                + _shift(p, i, 2, h, w))

    return col(2) - col(0), row(2) - row(0)


def _laplacian(gray):
    """3x3 Laplacian with replicate padding; exact zero on constants."""
    h, w = gray.shape[-2:]
    p = F.pad(gray, (1, 1, 1, 1), mode="replicate")
    cross = ((_shift(p, 0, 1, h, w) + _shift(p, 2, 1, h, w))
             + (_shift(p, 1, 0, h, w) + _shift(p, 1, 2, h, w)))
    return cross - 4.0 * _shift(p, 1, 1, h, w)


def _gradient_magnitude(gx, gy):
    return torch.sqrt(gx * gx + gy * gy + _EPS * _EPS) - _EPS


def _gaussian_kernel(dtype, device, radius=2, sigma=1.0):
    xs = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    k = torch.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _blur_axis(x, k, radius, axis):
    n = x.shape[axis]
    pad = (radius, radius, 0, 0) if axis == -1 else (0, 0, radius, radius)
    p = F.pad(x, pad, mode="replicate")
    out = torch.zeros_like(x)
    for t in range(2 * radius + 1):
        sl = p.narrow(axis, t, n)
        out = out + k[t] * sl
    return out


def _gaussian_smooth(gray, radius=2, sigma=1.0):
    k = _gaussian_kernel(gray.dtype, gray.device, radius, sigma)
    return _blur_axis(_blur_axis(gray, k, radius, -1), k, radius, -2)


def _sample_along(m, dx, dy):
    """Bilinear samples of map m one step (dx, dy) away from each pixel."""
    b, _, hgt, wid = m.shape
    ys = torch.arange(hgt, dtype=m.dtype, device=m.device)
    xs = torch.arange(wid, dtype=m.dtype, device=m.device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    px = gx.unsqueeze(0) + dx.squeeze(1)
    py = gy.unsqueeze(0) + dy.squeeze(1)
    nx = 2.0 * px / max(wid - 1, 1) - 1.0
    ny = 2.0 * py / max(hgt - 1, 1) - 1.0
    grid = torch.stack([nx, ny], dim=-1)
    return F.grid_sample(m, grid, mode="bilinear", padding_mode="border",
                         align_corners=True)


def _soft_canny(gray, nms_sharpness=10.0, threshold_temp=0.02):
    smoothed = _gaussian_smooth(gray)
    gx, gy = _sobel(smoothed)
    raw = torch.sqrt(gx * gx + gy * gy + _EPS * _EPS)
    m = raw - _EPS
    dx = gx / raw
    dy = gy / raw
    m_plus = _sample_along(m, dx, dy)
    m_minus = _sample_along(m, -dx, -dy)
    nms = (torch.sigmoid(nms_sharpness * (m - m_plus))
           * torch.sigmoid(nms_sharpness * (m - m_minus)))
    gate = 0.5 * (torch.sigmoid((m - T_LOW) / threshold_temp)
                  + torch.sigmoid((m - T_HIGH) / threshold_temp))
    # the magnitude factor makes constant inputs map to exact zero
    return m * nms * gate


def edge_maps(image) -> EdgeMaps:
    """Sobel magnitude, Laplacian magnitude, and soft Canny response."""
    gray = _to_gray(image)
    gx, gy = _sobel(gray)
    return EdgeMaps(
        sobel_mag=_gradient_magnitude(gx, gy),
        laplacian=_smooth_abs(_laplacian(gray)),
        soft_canny=_soft_canny(gray),
    )


def edge_loss(x, x_hat):
    """Mean L1 distance between edge maps, summed over the three operators."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs "
                         f"{tuple(x_hat.shape)}")
    maps_x = edge_maps(x).as_tuple()
    maps_h = edge_maps(x_hat).as_tuple()
    total = 0.0
    for a, b in zip(maps_x, maps_h):
        total = total + (a - b).abs().mean()
    return total


@dataclass
class LossWeights:
    lambda_edge: float = 0.01
    lambda_attrib: float = 0.001
    beta: float = 0.001
    lambda_adv: float = 1.0

    def __post_init__(self):
        for name in ("lambda_edge", "lambda_attrib", "beta", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class LossReport:
    perc: float
    feat: float
    edge: float
    attrib: float
    vae: float
    total: float

    def as_dict(self):
        return {"perc": self.perc, "feat": self.feat, "edge": self.edge,
                "attrib": self.attrib, "vae": self.vae, "total": self.total}


_COMPONENTS = ("perc", "feat", "edge", "attrib", "vae")


def total_generator_loss(components, weights: LossWeights | None = None):
    """Weighted total L = perc + feat + λ_edge·edge + λ_attrib·attrib +
    β·vae, plus a report of the unweighted components.

    Any adversarial generator term the caller wants logged is folded into
    the `feat` component before the call.
    """
    weights = weights or LossWeights()
    missing = [k for k in _COMPONENTS if k not in components]
    if missing:
        raise ValueError(f"missing loss components: {missing}")
    c = {k: components[k] for k in _COMPONENTS}
    total = (c["perc"] + c["feat"] + weights.lambda_edge * c["edge"]
             + weights.lambda_attrib * c["attrib"] + weights.beta * c["vae"])

    def _item(v):
        return float(v.detach()) if torch.is_tensor(v) else float(v)

    report = LossReport(perc=_item(c["perc"]), feat=_item(c["feat"]),
                        edge=_item(c["edge"]), attrib=_item(c["attrib"]),
                        vae=_item(c["vae"]), total=_item(total))
    return total, report
