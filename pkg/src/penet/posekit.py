"""2D poses and the two conditioning-image renders (heatmaps, RGB skeletons).

Coordinates are (x, y) in pixels, origin at the top-left corner; a canvas
is (W, H). Keypoints marked invisible are excluded from every render and
from every downstream loss.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np
from scipy import ndimage

if TYPE_CHECKING:
    from .synthdata import FrameRecord

# Fixed 17-keypoint topology: 5 head, 4 torso, 3 per arm (shoulder, elbow,
# wrist) and one fingertip cluster per hand.
KEYPOINT_NAMES = (
    "nose", "l_eye", "r_eye", "l_ear", "r_ear",
    "neck", "pelvis", "l_hip", "r_hip",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hand", "r_hand",
)
K = len(KEYPOINT_NAMES)
KP = {name: i for i, name in enumerate(KEYPOINT_NAMES)}

LIMBS = (
    (KP["nose"], KP["l_eye"]),
    (KP["nose"], KP["r_eye"]),
    (KP["l_eye"], KP["l_ear"]),
    (KP["r_eye"], KP["r_ear"]),
    (KP["neck"], KP["nose"]),
    (KP["neck"], KP["pelvis"]),
    (KP["pelvis"], KP["l_hip"]),
    (KP["pelvis"], KP["r_hip"]),
    (KP["neck"], KP["l_shoulder"]),
    (KP["neck"], KP["r_shoulder"]),
    (KP["l_shoulder"], KP["l_elbow"]),
    (KP["l_elbow"], KP["l_wrist"]),
    (KP["l_wrist"], KP["l_hand"]),
    (KP["r_shoulder"], KP["r_elbow"]),
    (KP["r_elbow"], KP["r_wrist"]),
    (KP["r_wrist"], KP["r_hand"]),
)

LEFT_RIGHT_PAIRS = (
    (KP["l_eye"], KP["r_eye"]),
    (KP["l_ear"], KP["r_ear"]),
    (KP["l_hip"], KP["r_hip"]),
    (KP["l_shoulder"], KP["r_shoulder"]),
    (KP["l_elbow"], KP["r_elbow"]),
    (KP["l_wrist"], KP["r_wrist"]),
    (KP["l_hand"], KP["r_hand"]),
)

# Keypoint groups used by the part decoders and the pose-evaluation report.
HEAD_KEYPOINTS = tuple(KP[n] for n in ("nose", "l_eye", "r_eye", "l_ear", "r_ear"))
TORSO_KEYPOINTS = tuple(
    KP[n] for n in ("neck", "pelvis", "l_hip", "r_hip", "l_shoulder",
                    "r_shoulder", "l_elbow", "r_elbow")
)
L_HAND_KEYPOINTS = (KP["l_wrist"], KP["l_hand"])
R_HAND_KEYPOINTS = (KP["r_wrist"], KP["r_hand"])
HAND_KEYPOINTS = (KP["l_hand"], KP["r_hand"])


@dataclass
class Pose:
    """K 2D keypoints with visibility flags on a (W, H) canvas."""

    keypoints: np.ndarray          # (K, 2) float64, (x, y) in pixels
    visibility: np.ndarray         # (K,) bool
    canvas: tuple[int, int]        # (W, H)

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        self.canvas = (int(self.canvas[0]), int(self.canvas[1]))

    def validate(self):
        W, H = self.canvas
        if self.keypoints.ndim != 2 or self.keypoints.shape[1] != 2:
            raise ValueError(f"keypoints must be (K, 2), got {self.keypoints.shape}")
        k = self.keypoints.shape[0]
        if k < 1:
            raise ValueError("a pose needs at least one keypoint")
        if self.visibility.shape != (k,):
            raise ValueError("visibility length must match keypoint count")
        vis = self.keypoints[self.visibility]
        if vis.size and (
            (vis[:, 0] < 0).any() or (vis[:, 0] >= W).any()
            or (vis[:, 1] < 0).any() or (vis[:, 1] >= H).any()
        ):
            raise ValueError("visible keypoints must lie inside the canvas")
        return self

    @property
    def k(self):
        return self.keypoints.shape[0]

    def copy(self):
        return Pose(self.keypoints.copy(), self.visibility.copy(), self.canvas)


@dataclass
class PoseSequence:
    """Ordered pose frames sharing one keypoint count and canvas."""

    frames: list[Pose]

    def validate(self):
        if not self.frames:
            raise ValueError("empty pose sequence")
        k, canvas = self.frames[0].k, self.frames[0].canvas
        for i, f in enumerate(self.frames):
            if f.k != k or f.canvas != canvas:
                raise ValueError(f"frame {i} disagrees on K or canvas")
            f.validate()
        return self

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]


@dataclass
class HeatmapStack:
    """Per-keypoint Gaussian response maps, one channel per keypoint."""

    channels: np.ndarray   # (K, H, W) float64 in [0, 1]
    tau: float


@dataclass
class SkeletonImage:
    """RGB raster of the skeleton; background pixels are exactly zero."""

    pixels: np.ndarray                      # (H, W, 3) float32 in [0, 1]
    palette: dict[int, tuple[float, float, float]]
    stroke_width: float


def default_palette():
    """Distinct colors for the fixed limb list, one hue per limb."""
    palette = {}
    n = len(LIMBS)
    for i in range(n):
        r, g, b = colorsys.hsv_to_rgb(i / n, 1.0, 1.0)
        palette[i] = (float(r), float(g), float(b))
    return palette


def render_heatmaps(pose: Pose, tau: float = 6.0) -> HeatmapStack:
    """Render one Gaussian response channel per keypoint.

    Channel i at pixel p is exp(-||p - y_i||^2 / (2 tau^2)); channels of
    invisible keypoints are all zero.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    pose.validate()
    W, H = pose.canvas
    xs = np.arange(W, dtype=np.float64)
    ys = np.arange(H, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)              # (H, W)
    channels = np.zeros((pose.k, H, W), dtype=np.float64)
    inv_two_tau2 = 1.0 / (2.0 * tau * tau)
    for i in range(pose.k):
        if not pose.visibility[i]:
            continue
        x, y = pose.keypoints[i]
        d2 = (gx - x) ** 2 + (gy - y) ** 2
        channels[i] = np.exp(-d2 * inv_two_tau2)
    return HeatmapStack(channels=channels, tau=float(tau))


def _draw_segment(buf, pa, pb, radius, color):
    """Paint a capsule of the given radius between two points (in buf coords)."""
    h, w = buf.shape[:2]
    x0 = max(0, int(np.floor(min(pa[0], pb[0]) - radius - 1)))
    x1 = min(w - 1, int(np.ceil(max(pa[0], pb[0]) + radius + 1)))
    y0 = max(0, int(np.floor(min(pa[1], pb[1]) - radius - 1)))
    y1 = min(h - 1, int(np.ceil(max(pa[1], pb[1]) + radius + 1)))
    if x1 < x0 or y1 < y0:
        return
    gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
    ab = np.array(pb) - np.array(pa)
    denom = float(ab @ ab)
    px = gx - pa[0]
    py = gy - pa[1]
    if denom < 1e-12:
        t = np.zeros_like(px, dtype=np.float64)
    else:
        t = np.clip((px * ab[0] + py * ab[1]) / denom, 0.0, 1.0)
    dx = px - t * ab[0]
    dy = py - t * ab[1]
    mask = dx * dx + dy * dy <= radius * radius
    buf[gy[mask], gx[mask]] = color


def render_skeleton(pose: Pose, palette=None, stroke_width: float = 2.0,
                    supersample: int = 4) -> SkeletonImage:
    """Rasterize the pose as colored limb segments.

    Limbs whose two endpoints are visible are drawn as capsules on a
    supersampled grid and box-downsampled, which anti-aliases the strokes
    deterministically.
    """
    pose.validate()
    if palette is None:
        palette = default_palette()
    missing = [i for i in range(len(LIMBS)) if i not in palette]
    if missing:
        raise ValueError(f"palette misses limb indices {missing}")
    W, H = pose.canvas
    s = int(supersample)
    hi = np.zeros((H * s, W * s, 3), dtype=np.float64)
    offset = (s - 1) / 2.0   # center of the final pixel in supersample coords
    radius = stroke_width * s / 2.0
    for limb_idx, (a, b) in enumerate(LIMBS):
        if not (pose.visibility[a] and pose.visibility[b]):
            continue
        pa = pose.keypoints[a] * s + offset
        pb = pose.keypoints[b] * s + offset
        _draw_segment(hi, pa, pb, radius, np.asarray(palette[limb_idx]))
    low = hi.reshape(H, s, W, s, 3).mean(axis=(1, 3))
    return SkeletonImage(pixels=low.astype(np.float32), palette=dict(palette),
                         stroke_width=float(stroke_width))


@dataclass
class AugmentParams:
    """Bounds for the random geometric augmentation."""

    max_rotation_deg: float = 15.0
    max_shift_px: float = 4.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    flip_prob: float = 0.5

    def is_identity(self):
        return (self.max_rotation_deg == 0 and self.max_shift_px == 0
                and self.scale_range == (1.0, 1.0) and self.flip_prob == 0)


@dataclass
class GeomTransform:
    """Affine map x' = A @ [x, y, 1] plus a horizontal-flip flag."""

    matrix: np.ndarray        # (2, 3) float64
    flipped: bool
    canvas: tuple[int, int]

    def is_identity(self):
        ident = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        return not self.flipped and np.allclose(self.matrix, ident)


def make_transform(canvas, rotation_deg: float = 0.0, shift=(0.0, 0.0),
                   scale: float = 1.0, flip: bool = False) -> GeomTransform:
    """Compose flip, then scale and rotation about the canvas center, then shift."""
    W, H = canvas
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0

    def mat3(a):
        m = np.eye(3)
        m[:2, :] = a
        return m

    flip_m = np.array([[-1.0, 0.0, 2 * cx], [0.0, 1.0, 0.0]]) if flip \
        else np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    th = np.deg2rad(rotation_deg)
    c, s = np.cos(th), np.sin(th)
    rot_scale = np.array([
        [scale * c, -scale * s, cx - scale * (c * cx - s * cy)],
        [scale * s, scale * c, cy - scale * (s * cx + c * cy)],
    ])
    shift_m = np.array([[1.0, 0.0, shift[0]], [0.0, 1.0, shift[1]]])
    full = mat3(shift_m) @ mat3(rot_scale) @ mat3(flip_m)
    return GeomTransform(matrix=full[:2, :], flipped=bool(flip),
                         canvas=(int(W), int(H)))


def sample_transform(params: AugmentParams, rng: np.random.Generator,
                     canvas) -> GeomTransform:
    """Draw one transform uniformly within the augmentation bounds."""
    rot = rng.uniform(-params.max_rotation_deg, params.max_rotation_deg)
    shift = rng.uniform(-params.max_shift_px, params.max_shift_px, size=2)
    scale = rng.uniform(params.scale_range[0], params.scale_range[1])
    flip = bool(rng.random() < params.flip_prob)
    return make_transform(canvas, rotation_deg=rot, shift=tuple(shift),
                          scale=scale, flip=flip)


def apply_to_pose(t: GeomTransform, pose: Pose) -> Pose:
    """Transform keypoints; out-of-canvas points become invisible.

    A horizontal flip also swaps left/right keypoint indices.
    """
    W, H = t.canvas
    kp = pose.keypoints @ t.matrix[:, :2].T + t.matrix[:, 2]
    vis = pose.visibility.copy()
    inside = (kp[:, 0] >= 0) & (kp[:, 0] < W) & (kp[:, 1] >= 0) & (kp[:, 1] < H)
    vis &= inside
    if t.flipped and pose.k == K:
        perm = np.arange(K)
        for a, b in LEFT_RIGHT_PAIRS:
            perm[a], perm[b] = b, a
        kp = kp[perm]
        vis = vis[perm]
    return Pose(kp, vis, (W, H))


def apply_to_image(t: GeomTransform, image: np.ndarray, order: int = 1) -> np.ndarray:
    """Warp an (H, W) or (H, W, C) image by the transform.

    Uses inverse mapping; order 1 is bilinear (images), order 0 nearest
    (binary masks). Pixels mapped from outside the canvas become 0.
    """
    a3 = np.eye(3)
    a3[:2, :] = t.matrix
    inv = np.linalg.inv(a3)
    # scipy indexes (row, col) = (y, x): swap axes of the inverse map.
    m = np.array([[inv[1, 1], inv[1, 0]], [inv[0, 1], inv[0, 0]]])
    off = np.array([inv[1, 2], inv[0, 2]])
    if image.ndim == 2:
        out = ndimage.affine_transform(image, m, offset=off, order=order,
                                       mode="constant", cval=0.0)
        return out.astype(image.dtype, copy=False)
    chans = [ndimage.affine_transform(image[..., c], m, offset=off, order=order,
                                      mode="constant", cval=0.0)
             for c in range(image.shape[-1])]
    return np.stack(chans, axis=-1).astype(image.dtype, copy=False)


def augment(frame: "FrameRecord", params: AugmentParams,
            rng: np.random.Generator) -> "FrameRecord":
    """Apply one random geometric transform to image, pose, and all masks."""
    t = sample_transform(params, rng, frame.pose.canvas)
    if t.is_identity():
        return frame
    return transform_frame(t, frame)


def transform_frame(t: GeomTransform, frame: "FrameRecord") -> "FrameRecord":
    """Apply a fixed transform to every spatial field of a frame record."""
    return replace(
        frame,
        image=apply_to_image(t, frame.image, order=1),
        pose=apply_to_pose(t, frame.pose),
        mask_head=apply_to_image(t, frame.mask_head, order=0),
        mask_hand=apply_to_image(t, frame.mask_hand, order=0),
        mask_torso=apply_to_image(t, frame.mask_torso, order=0),
    )


def pose_row(pose: Pose, frame_index: int, **extra) -> dict:
    """One JSON-lines row for a pose: {"frame", "kp", "vis"} plus extras."""
    row = {
        "frame": int(frame_index),
        "kp": [[float(x), float(y)] for x, y in pose.keypoints],
        "vis": [bool(v) for v in pose.visibility],
    }
    row.update(extra)
    return row


def parse_pose_row(row: dict, canvas) -> tuple[int, Pose]:
    kp = np.asarray(row["kp"], dtype=np.float64)
    vis = np.asarray(row["vis"], dtype=bool)
    return int(row["frame"]), Pose(kp, vis, canvas)


def write_poses_jsonl(poses, path, extras=None):
    """Write poses as JSON lines; `extras` is an optional per-row dict list."""
    extras = extras or [{}] * len(poses)
    with open(path, "w") as fh:
        for i, (pose, extra) in enumerate(zip(poses, extras)):
            fh.write(json.dumps(pose_row(pose, i, **extra), sort_keys=True))
            fh.write("\n")


def read_poses_jsonl(path, canvas):
    """Read JSON-lines poses; returns rows as (frame_index, Pose, raw_row)."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            idx, pose = parse_pose_row(row, canvas)
            out.append((idx, pose, row))
    return out
