"""Evaluation protocol: masked SSIM/PSNR/FID, a toy pose estimator with a
keypoint L2 / Hit@ report, and the ablation table emitter.

Array conventions follow the rest of the package: numpy images are HWC
float in [0, 1], torch tensors are CHW.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import linalg, ndimage
from torch import nn

from . import posekit
from .errors import NumericsError
from .losses import FeatureExtractor, edge_maps
from .posekit import KP

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
HIT_THRESHOLD = 0.3

# Table rows of the keypoint report: every joint belongs to exactly one.
POSE_EVAL_REGIONS = {
    "Head": ("nose", "l_eye", "r_eye", "l_ear", "r_ear"),
    "R-Hand": ("r_wrist", "r_hand"),
    "L-Hand": ("l_wrist", "l_hand"),
    "Clothes": ("neck", "pelvis", "l_hip", "r_hip",
                "l_shoulder", "r_shoulder", "l_elbow", "r_elbow"),
}


# ---------------------------------------------------------------------------
# SSIM / PSNR


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - r
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2-D map with a symmetric window."""
    out = np.apply_along_axis(lambda r: np.convolve(r, w, mode="valid"),
                              1, img)
    return np.apply_along_axis(lambda c: np.convolve(c, w, mode="valid"),
                               0, out)


def _ssim_channel(x, y, win, sigma, c1, c2):
    w = _gaussian_window(win, sigma)
    mu_x = _filter_valid(x, w)
    mu_y = _filter_valid(y, w)
    var_x = _filter_valid(x * x, w) - mu_x * mu_x
    var_y = _filter_valid(y * y, w) - mu_y * mu_y
    cov = _filter_valid(x * y, w) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return num / den


def pixel_metrics(x, x_hat, mask=None):
    """Return (SSIM, PSNR dB) between two images on the [0, 1] range.

    SSIM uses an 11x11 Gaussian window (sigma 1.5), c1 = (0.01 R)^2,
    c2 = (0.03 R)^2 with R = 1, averaged over the window-valid interior;
    on crops smaller than the window, the window shrinks to the largest
    odd size that fits (sigma scaled proportionally).  PSNR is
    10 log10(R^2 / MSE), capped at 100 dB.

    With a binary ``mask``, both images are restricted to the mask's
    bounding-box crop and off-mask pixels inside the crop are zeroed in
    both; an empty mask yields the (nan, nan) skip sentinel.
    """
    x = np.asarray(x, dtype=np.float64)
    xh = np.asarray(x_hat, dtype=np.float64)
    if x.shape != xh.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {xh.shape}")
    if x.ndim == 2:
        x, xh = x[..., None], xh[..., None]
    if x.ndim != 3:
        raise ValueError(f"expected (H, W) or (H, W, C), got {x.shape}")
    if mask is not None:
        mask = np.asarray(mask) > 0.5
        if mask.shape != x.shape[:2]:
            raise ValueError(
                f"mask shape {mask.shape} does not match image {x.shape[:2]}")
        if not mask.any():
            return float("nan"), float("nan")
        ys, xs = np.nonzero(mask)
        r0, r1 = ys.min(), ys.max() + 1
        c0, c1 = xs.min(), xs.max() + 1
        m = mask[r0:r1, c0:c1][..., None]
        x = x[r0:r1, c0:c1] * m
        xh = xh[r0:r1, c0:c1] * m

    mse = float(np.mean((x - xh) ** 2))
    if mse <= 1e-10:
        psnr = PSNR_CAP_DB
    else:
        psnr = min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))

    h, w = x.shape[:2]
    win = min(SSIM_WINDOW, h, w)
    if win % 2 == 0:
        win -= 1
    sigma = SSIM_SIGMA * win / SSIM_WINDOW
    c1_, c2_ = 0.01 ** 2, 0.03 ** 2
    maps = [_ssim_channel(x[..., c], xh[..., c], win, sigma, c1_, c2_)
            for c in range(x.shape[2])]
    ssim = float(np.mean(np.stack(maps)))
    return ssim, psnr


# ---------------------------------------------------------------------------
# FID


def matrix_sqrt(a: np.ndarray) -> np.ndarray:
    """Principal matrix square root (real part), via Schur decomposition.

    Raises NumericsError when the result carries a significant imaginary
    residue, i.e. the input was not close to PSD.
    """
    s, _ = linalg.sqrtm(np.asarray(a, dtype=np.float64), disp=False)
    if np.iscomplexobj(s):
        resid = float(np.abs(s.imag).max())
        if resid > 1e-6:
            raise NumericsError(
                f"matrix square root has imaginary residue {resid:.3e}; "
                "covariance product is not PSD")
        s = s.real
    if not np.isfinite(s).all():
        raise NumericsError("matrix square root is non-finite")
    return s


def fid_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """Frechet distance between two Gaussians given their moments."""
    mu_a = np.atleast_1d(np.asarray(mu_a, dtype=np.float64))
    mu_b = np.atleast_1d(np.asarray(mu_b, dtype=np.float64))
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape:
        raise ValueError("moment shapes disagree")
    diff = mu_a - mu_b
    covmean = matrix_sqrt(cov_a @ cov_b)
    val = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b)
                - 2.0 * np.trace(covmean))
    if val < -1e-3:
        raise NumericsError(f"negative squared Frechet distance {val:.3e}")
    return max(val, 0.0)


def fid(features_a, features_b, eps: float = 1e-6) -> float:
    """FID between two feature sets of shape (N, D).

    When a set is not larger than the embedding dimension, its covariance
    is regularized with ``eps`` on the diagonal.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("feature sets must be 2-D (N, D)")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least 2 feature vectors per set")
    moments = []
    for s in (a, b):
        mu = s.mean(axis=0)
        cov = np.atleast_2d(np.cov(s, rowvar=False))
        if s.shape[0] <= s.shape[1]:
            cov = cov + eps * np.eye(cov.shape[0])
        moments.extend([mu, cov])
    return fid_from_moments(*moments)


def _image_batch(images) -> torch.Tensor:
    """Coerce images to a (N, 3, H, W) float32 tensor.

    Accepts numpy HWC (single or batched) or torch CHW (single or batched).
    """
    if isinstance(images, torch.Tensor):
        t = images.detach().float()
        if t.ndim == 3:
            t = t[None]
    else:
        arr = np.asarray(images, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ValueError(f"expected (N, H, W, 3) images, got {arr.shape}")
        t = torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
    if t.ndim != 4 or t.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) tensor, got {tuple(t.shape)}")
    return t


def embed_images(images, extractor: FeatureExtractor | None = None,
                 tap: int = 2, seed: int = 0) -> np.ndarray:
    """Embed images into (N, D) rows by spatially pooling one extractor tap.

    Pooling keeps the spatial mean and spatial std of every channel — the
    std terms keep the embedding sensitive to texture differences that a
    plain average would wash out.  The default frozen extractor's tap 2
    carries 32 channels, so the embedding has the 64 dims used for FID;
    pass ``tap`` for custom extractors.
    """
    x = _image_batch(images)
    if extractor is None:
        extractor = FeatureExtractor(seed=seed)
    with torch.no_grad():
        taps = extractor(x)
    feats = taps[tap].double()
    pooled = torch.cat([feats.mean(dim=(2, 3)),
                        feats.std(dim=(2, 3), unbiased=False)], dim=1)
    return pooled.numpy()


# ---------------------------------------------------------------------------
# toy pose estimator


class ToyPoseEstimator(nn.Module):
    """Small fully convolutional heatmap regressor with coordinate channels.

    The network operates at half the input resolution — dilated filters
    there see a body-scale context cheaply, which is what disambiguates
    the visually identical left/right hands — and ``infer`` maps the
    response-weighted peak centroid back to full-resolution sub-pixel
    coordinates.  The two coordinate channels anchor those filters to
    absolute position; confidences are sigmoid peaks, so they live in
    [0, 1].
    """

    def __init__(self, n_joints: int = posekit.K, width: int = 28,
                 seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.n_joints = n_joints
        self.pool = nn.AvgPool2d(2)
        self.net = nn.Sequential(
            nn.Conv2d(5, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=2, dilation=2), nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=4, dilation=4), nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, n_joints, 1),
        )
        self.trained = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.pool(x)
        b, _, h, w = x.shape
        gx = torch.linspace(-1.0, 1.0, w, dtype=x.dtype)
        gy = torch.linspace(-1.0, 1.0, h, dtype=x.dtype)
        grid_x = gx.view(1, 1, 1, w).expand(b, 1, h, w)
        grid_y = gy.view(1, 1, h, 1).expand(b, 1, h, w)
        return self.net(torch.cat([x, grid_x, grid_y], dim=1))

    def heatmaps(self, x: torch.Tensor) -> torch.Tensor:
        """Sigmoid response maps at half the input resolution."""
        return torch.sigmoid(self.forward(x))

    def infer(self, image):
        """Estimate (keypoints (K, 2) in (x, y) pixels, confidences (K,)).

        Peak locations are refined to sub-pixel precision with the
        response-weighted centroid of a small window around the argmax,
        then scaled back to input coordinates (half-res cell i covers
        input pixels 2i and 2i+1, so its center is 2i + 0.5).
        """
        x = _image_batch(image)
        if x.shape[0] != 1:
            raise ValueError("infer takes a single image")
        with torch.no_grad():
            h = self.heatmaps(x)[0]
        k, hh, ww = h.shape
        flat = h.reshape(k, -1)
        conf, idx = flat.max(dim=1)
        maps = h.numpy().astype(np.float64)
        kp = np.empty((k, 2), dtype=np.float64)
        r = 1
        for j in range(k):
            py, px = divmod(int(idx[j]), ww)
            y0, y1 = max(0, py - r), min(hh, py + r + 1)
            x0, x1 = max(0, px - r), min(ww, px + r + 1)
            win = maps[j, y0:y1, x0:x1]
            total = win.sum()
            if total > 0.0:
                gy, gx = np.mgrid[y0:y1, x0:x1]
                cx = (gx * win).sum() / total
                cy = (gy * win).sum() / total
            else:
                cx, cy = float(px), float(py)
            kp[j] = (2.0 * cx + 0.5, 2.0 * cy + 0.5)
        return kp, conf.double().numpy()


def _half_pose(pose) -> "posekit.Pose":
    """Map a pose onto the estimator's half-resolution heatmap grid."""
    w, h = pose.canvas
    half = (w // 2, h // 2)
    kp = (pose.keypoints - 0.5) / 2.0
    kp[:, 0] = np.clip(kp[:, 0], 0.0, half[0] - 1e-6)
    kp[:, 1] = np.clip(kp[:, 1], 0.0, half[1] - 1e-6)
    return posekit.Pose(kp, pose.visibility.copy(), half).validate()


def train_pose_estimator(frames, steps: int = 400, lr: float = 2e-3,
                         tau: float = 1.5, width: int = 28, n_blank: int = 6,
                         pos_weight: float = 50.0,
                         seed: int = 0) -> ToyPoseEstimator:
    """Fit the toy estimator on ground-truth frames plus blank negatives.

    The MSE is reweighted by ``1 + pos_weight * target`` — with narrow
    Gaussian targets, almost every pixel is background, and unweighted
    MSE collapses to the all-quiet solution.  Blank all-zero images with
    all-zero target heatmaps teach every joint channel to stay quiet when
    there is nothing to detect.
    """
    if not frames:
        raise ValueError("no training frames")
    est = ToyPoseEstimator(width=width, seed=seed)
    images = _image_batch(np.stack([f.image for f in frames]))
    targets = torch.from_numpy(np.stack([
        posekit.render_heatmaps(_half_pose(f.pose), tau=tau).channels
        for f in frames]).astype(np.float32))
    if n_blank > 0:
        images = torch.cat([images, torch.zeros_like(images[:n_blank])])
        targets = torch.cat([targets, torch.zeros_like(targets[:n_blank])])
    weight = 1.0 + pos_weight * targets
    opt = torch.optim.Adam(est.parameters(), lr=lr)
    for _ in range(steps):
        opt.zero_grad(set_to_none=True)
        loss = torch.mean(weight * (est.heatmaps(images) - targets) ** 2)
        loss.backward()
        opt.step()
    opt.zero_grad(set_to_none=True)
    est.trained = True
    return est


def estimator_error(estimator: ToyPoseEstimator, frames) -> float:
    """Mean pixel L2 of the estimator against GT over visible joints."""
    errs = []
    for f in frames:
        kp, _ = estimator.infer(f.image)
        d = np.linalg.norm(kp - f.pose.keypoints, axis=1)
        errs.extend(d[f.pose.visibility].tolist())
    return float(np.mean(errs))


# ---------------------------------------------------------------------------
# keypoint L2 / Hit@ report


@dataclass
class RegionScore:
    """Keypoint scores for one report region."""

    l2_mean: float
    l2_std: float
    hit_pct: float
    n_hits: int
    n_joints: int


@dataclass
class PoseEvalReport:
    """Per-region keypoint L2 (over joint hits only) and Hit@ rates."""

    regions: dict
    samples_per_pose: int
    hit_threshold: float

    def as_dict(self) -> dict:
        return {
            "samples_per_pose": self.samples_per_pose,
            "hit_threshold": self.hit_threshold,
            "regions": {
                name: {
                    "l2_mean": s.l2_mean, "l2_std": s.l2_std,
                    "hit_pct": s.hit_pct, "n_hits": s.n_hits,
                    "n_joints": s.n_joints,
                } for name, s in self.regions.items()
            },
        }


def pose_eval(generate, frames, estimator: ToyPoseEstimator,
              n_samples: int = 5,
              hit_threshold: float = HIT_THRESHOLD) -> PoseEvalReport:
    """Score a generator's pose fidelity with the toy estimator.

    ``generate(pose, sample_index) -> (H, W, 3) image`` is called
    ``n_samples`` times per frame.  A joint counts as a hit only when the
    estimator is confident on both the synthesis and the ground-truth
    image; L2 to the ground-truth keypoint is averaged over hits.
    """
    if not getattr(estimator, "trained", False):
        raise RuntimeError(
            "refusing to evaluate with an untrained pose estimator")
    region_l2 = {name: [] for name in POSE_EVAL_REGIONS}
    region_hits = {name: 0 for name in POSE_EVAL_REGIONS}
    region_total = {name: 0 for name in POSE_EVAL_REGIONS}
    for frame in frames:
        _, gt_conf = estimator.infer(frame.image)
        for s in range(n_samples):
            img = generate(frame.pose, s)
            kp, conf = estimator.infer(img)
            for name, joints in POSE_EVAL_REGIONS.items():
                for jname in joints:
                    j = KP[jname]
                    if not frame.pose.visibility[j]:
                        continue
                    region_total[name] += 1
                    if conf[j] >= hit_threshold and gt_conf[j] >= hit_threshold:
                        region_hits[name] += 1
                        region_l2[name].append(float(np.linalg.norm(
                            kp[j] - frame.pose.keypoints[j])))
    regions = {}
    for name in POSE_EVAL_REGIONS:
        l2 = np.asarray(region_l2[name], dtype=np.float64)
        total = region_total[name]
        regions[name] = RegionScore(
            l2_mean=float(l2.mean()) if l2.size else float("nan"),
            l2_std=float(l2.std()) if l2.size else float("nan"),
            hit_pct=100.0 * region_hits[name] / total if total else 0.0,
            n_hits=region_hits[name],
            n_joints=total,
        )
    return PoseEvalReport(regions=regions, samples_per_pose=n_samples,
                          hit_threshold=hit_threshold)


# ---------------------------------------------------------------------------
# region metrics


@dataclass
class RegionMetrics:
    """Per-region SSIM/PSNR (mean, std over frames) and set-level FID."""

    ssim: dict
    psnr: dict
    fid: dict
    n_frames: int

    def as_dict(self) -> dict:
        return {
            "n_frames": self.n_frames,
            "ssim": {k: {"mean": m, "std": s}
                     for k, (m, s) in self.ssim.items()},
            "psnr": {k: {"mean": m, "std": s}
                     for k, (m, s) in self.psnr.items()},
            "fid": dict(self.fid),
        }


def _nanstat(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if np.isnan(arr).all():
        return float("nan"), float("nan")
    return float(np.nanmean(arr)), float(np.nanstd(arr))


def compute_region_metrics(real, fake, masks: dict,
                           extractor: FeatureExtractor | None = None,
                           seed: int = 0) -> RegionMetrics:
    """Masked SSIM/PSNR/FID over an evaluation set.

    ``real`` / ``fake`` are (N, H, W, 3) arrays; ``masks`` maps region
    name to (N, H, W) binary arrays.  A "composite" region (no mask) is
    always included.  SSIM/PSNR are averaged per frame (empty-mask frames
    are skipped via the nan sentinel); FID is computed once per region on
    pooled embeddings of mask-zeroed frames.
    """
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.shape != fake.shape or real.ndim != 4:
        raise ValueError("real/fake must be (N, H, W, 3) with equal shapes")
    n = real.shape[0]
    if extractor is None:
        extractor = FeatureExtractor(seed=seed)
    regions = {"composite": None}
    regions.update(masks)
    ssim_stats, psnr_stats, fids = {}, {}, {}
    for name, m in regions.items():
        ssims, psnrs = [], []
        for i in range(n):
            s, p = pixel_metrics(real[i], fake[i],
                                 None if m is None else m[i])
            ssims.append(s)
            psnrs.append(p)
        ssim_stats[name] = _nanstat(ssims)
        psnr_stats[name] = _nanstat(psnrs)
        if n >= 2:
            if m is None:
                ra, fa = real, fake
            else:
                ra = real * (m[..., None] > 0.5)
                fa = fake * (m[..., None] > 0.5)
            fids[name] = fid(
                embed_images(ra.astype(np.float32), extractor),
                embed_images(fa.astype(np.float32), extractor))
        else:
            fids[name] = float("nan")
    return RegionMetrics(ssim=ssim_stats, psnr=psnr_stats, fid=fids,
                         n_frames=n)


# ---------------------------------------------------------------------------
# boundary-band edge error (reported, not gated)


def boundary_edge_report(real, fake, union_masks, band_px: int = 2) -> dict:
    """Mean absolute edge-map error inside a band around part boundaries
    versus everywhere else.

    A healthy edge term concentrates residual edge error off the body
    boundary, so ``band_mean <= off_band_mean`` is the expected reading.
    """
    xr = _image_batch(np.asarray(real, dtype=np.float32))
    xf = _image_batch(np.asarray(fake, dtype=np.float32))
    er = edge_maps(xr)
    ef = edge_maps(xf)
    err = sum(torch.abs(a - b)
              for a, b in zip(er.as_tuple(), ef.as_tuple()))
    err = err[:, 0].numpy()
    band_vals, off_vals = [], []
    for i in range(err.shape[0]):
        m = np.asarray(union_masks[i]) > 0.5
        band = ndimage.binary_dilation(m, iterations=band_px) & ~ \
            ndimage.binary_erosion(m, iterations=band_px)
        band_vals.append(err[i][band])
        off_vals.append(err[i][~band])
    band_all = np.concatenate(band_vals)
    off_all = np.concatenate(off_vals)
    return {
        "band_px": band_px,
        "band_mean": float(band_all.mean()) if band_all.size else float("nan"),
        "off_band_mean": float(off_all.mean()) if off_all.size else
        float("nan"),
    }


# ---------------------------------------------------------------------------
# ablation table


ABLATION_ROWS: tuple = (
    ("w/o L_edge", {"use_edge_loss": False}),
    ("L_edge", {}),
    ("f_xy (Conv)", {"aggregator": "conv"}),
    ("PE (concate)", {"fusion": "early"}),
    ("PE (shared)", {"fusion": "shared"}),
    ("PE (separate)", {"fusion": "separate"}),
    ("w/o f_skip", {"use_skips": False}),
    ("w/o f_skip & Ψ", {"use_skips": False, "psi_mode": "none"}),
    ("Ψ(Conv)", {"psi_mode": "conv"}),
    ("w/o (m_hand)", {"use_hand_mask": False}),
    ("full model", {}),
)

EXTERNAL_BASELINES = ("external baseline A", "external baseline B")

_CSV_COLUMNS = ("row", "status", "psnr_composite", "ssim_composite",
                "psnr_head", "ssim_head", "fid_head",
                "psnr_hand", "ssim_hand", "fid_hand",
                "psnr_torso", "ssim_torso", "fid_torso")


def reconstruct_all(trainer, data, chunk: int = 8):
    """Posterior-mean reconstructions of every frame.

    Returns (real, fake) as (N, H, W, 3) float arrays in [0, 1] plus the
    per-region mask dict used by compute_region_metrics.
    """
    reals, fakes = [], []
    with torch.no_grad():
        for start in range(0, len(data), chunk):
            idx = np.arange(start, min(start + chunk, len(data)))
            batch = data.batch(idx)
            _, composite = trainer.reconstruct(batch)
            reals.append(batch["x"].permute(0, 2, 3, 1).numpy())
            fakes.append(composite.clamp(0.0, 1.0)
                         .permute(0, 2, 3, 1).numpy())
    masks = {
        "head": data.m_head[:, 0].numpy(),
        "hand": data.m_hand[:, 0].numpy(),
        "torso": data.m_torso[:, 0].numpy(),
    }
    return np.concatenate(reals), np.concatenate(fakes), masks


def evaluate_trained(trainer, data,
                     extractor: FeatureExtractor | None = None):
    """RegionMetrics plus the boundary-band report for a trained model."""
    real, fake, masks = reconstruct_all(trainer, data)
    metrics = compute_region_metrics(real, fake, masks, extractor=extractor)
    union = np.clip(masks["head"] + masks["hand"] + masks["torso"], 0.0, 1.0)
    edges = boundary_edge_report(real, fake, union)
    return metrics, edges


def _row_cells(metrics: RegionMetrics) -> dict:
    cells = {
        "psnr_composite": metrics.psnr["composite"][0],
        "ssim_composite": metrics.ssim["composite"][0],
    }
    for region in ("head", "hand", "torso"):
        cells[f"psnr_{region}"] = metrics.psnr[region][0]
        cells[f"ssim_{region}"] = metrics.ssim[region][0]
        cells[f"fid_{region}"] = metrics.fid[region]
    return cells


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if math.isnan(value) else f"{value:.4f}"
    return str(value)


def write_ablation_csv(rows: list, path) -> None:
    lines = [",".join(_CSV_COLUMNS)]
    for row in rows:
        lines.append(",".join(
            _format_cell(row.get(col)) for col in _CSV_COLUMNS))
    text = "\n".join(lines) + "\n"
    with open(path, "w", newline="") as fh:
        fh.write(text)


def assemble_grid(images, n_cols: int) -> np.ndarray:
    """Tile equally sized HWC images into one image, row-major."""
    images = [np.asarray(im, dtype=np.float32) for im in images]
    h, w, c = images[0].shape
    n_rows = (len(images) + n_cols - 1) // n_cols
    grid = np.zeros((n_rows * h, n_cols * w, c), dtype=np.float32)
    for i, im in enumerate(images):
        r, col = divmod(i, n_cols)
        grid[r * h:(r + 1) * h, col * w:(col + 1) * w] = im
    return grid


def save_png(image: np.ndarray, path) -> None:
    """Write an HWC float image in [0, 1] as an 8-bit PNG."""
    from PIL import Image

    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def ablation_report(corpus_dir, steps: int = 600, seed: int = 0,
                    out_csv=None, out_grid=None, rows=None,
                    overrides: dict | None = None, n_show: int = 4,
                    progress=None) -> list:
    """Train every ablation row with the shared seed and tabulate metrics.

    Each row is a (name, config-overrides) pair; a row that raises is
    recorded as failed without stopping the others.  Returns the list of
    row dicts; optionally writes the CSV table and a comparison grid
    (ground truth on the first row, one row of reconstructions per
    variant).
    """
    from .trainer import TrainConfig, train

    if rows is None:
        rows = ABLATION_ROWS
    base = TrainConfig(corpus=str(corpus_dir), steps=steps,
                       seed=seed).to_dict()
    if overrides:
        base.update(overrides)
    results = []
    grid_rows = []
    gt_row = None
    for name, row_overrides in rows:
        if progress is not None:
            progress(name)
        record = {"row": name, "status": "ok"}
        try:
            cfg_dict = dict(base)
            cfg_dict.update(row_overrides)
            cfg = TrainConfig.from_dict(cfg_dict)
            state = train(cfg)
            trainer = state.trainer
            real, fake, masks = reconstruct_all(trainer, trainer.data)
            metrics = compute_region_metrics(real, fake, masks)
            record.update(_row_cells(metrics))
            if gt_row is None:
                gt_row = [real[i] for i in range(min(n_show, len(real)))]
            grid_rows.append([fake[i] for i in range(min(n_show, len(fake)))])
        except Exception as exc:  # noqa: BLE001 - row isolation by contract
            record["status"] = f"failed: {type(exc).__name__}"
            grid_rows.append(None)
        results.append(record)
    for name in EXTERNAL_BASELINES:
        results.append({"row": name, "status": "external"})
    if out_csv is not None:
        write_ablation_csv(results, out_csv)
    if out_grid is not None and gt_row is not None:
        n_cols = len(gt_row)
        blank = np.zeros_like(gt_row[0])
        tiles = list(gt_row)
        for row_imgs in grid_rows:
            tiles.extend(row_imgs if row_imgs is not None
                         else [blank] * n_cols)
        save_png(assemble_grid(tiles, n_cols), out_grid)
    return results
