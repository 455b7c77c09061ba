"""Procedural signer corpus: articulated stick figures with known attributes.

Every frame carries its ground-truth pose, per-part masks derived from the
same geometry that painted the pixels, and the signer's appearance
attributes (skin tone, gender proxy, ethnicity proxy). The generator is a
plain kinematic chain, so limb lengths are exact across a sequence and the
masks are pixel-accurate by construction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorpusIOError
from . import posekit
from .posekit import (
    K,
    KP,
    Pose,
    PoseSequence,
    pose_row,
)

N_SKIN_TONES = 4
N_GENDERS = 2
N_ETHNICITIES = 2
N_ATTRIBUTE_COMBOS = N_SKIN_TONES * N_GENDERS * N_ETHNICITIES

# Appearance tables. Colors are RGB in [0, 1].
SKIN_COLORS = (
    (0.96, 0.80, 0.69),
    (0.82, 0.62, 0.48),
    (0.62, 0.42, 0.30),
    (0.40, 0.26, 0.18),
)
SHIRT_COLORS = ((0.20, 0.35, 0.75), (0.75, 0.25, 0.30))    # by gender proxy
COLLAR_COLORS = ((0.95, 0.85, 0.20), (0.20, 0.75, 0.35))   # by ethnicity proxy
# exact black, matching the composition operator's background so a perfect
# part reconstruction composites into a perfect frame
BACKGROUND_COLOR = (0.0, 0.0, 0.0)

# Sampling skew for corpus generation; the minority combinations are what
# the inverse-frequency sampler is meant to rebalance.
SKIN_TONE_PROBS = (0.55, 0.25, 0.12, 0.08)
GENDER_PROBS = (0.5, 0.5)
ETHNICITY_PROBS = (0.7, 0.3)


@dataclass(frozen=True)
class SignerSpec:
    """Discrete appearance attributes of one synthetic signer."""

    skin_tone: int
    gender: int
    ethnicity: int

    def __post_init__(self):
        if not (0 <= self.skin_tone < N_SKIN_TONES):
            raise ValueError(f"skin_tone out of range: {self.skin_tone}")
        if not (0 <= self.gender < N_GENDERS):
            raise ValueError(f"gender out of range: {self.gender}")
        if not (0 <= self.ethnicity < N_ETHNICITIES):
            raise ValueError(f"ethnicity out of range: {self.ethnicity}")

    @property
    def attribute_id(self) -> int:
        return (self.skin_tone * N_GENDERS + self.gender) * N_ETHNICITIES + self.ethnicity

    @classmethod
    def from_attribute_id(cls, attr_id: int) -> "SignerSpec":
        if not (0 <= attr_id < N_ATTRIBUTE_COMBOS):
            raise ValueError(f"attribute id out of range: {attr_id}")
        eth = attr_id % N_ETHNICITIES
        rest = attr_id // N_ETHNICITIES
        return cls(skin_tone=rest // N_GENDERS, gender=rest % N_GENDERS, ethnicity=eth)

    def one_hot(self) -> np.ndarray:
        v = np.zeros(N_ATTRIBUTE_COMBOS, dtype=np.float32)
        v[self.attribute_id] = 1.0
        return v


@dataclass
class FrameRecord:
    """One rendered frame with its full ground truth."""

    image: np.ndarray        # (H, W, 3) float32 in [0, 1]
    pose: Pose
    mask_head: np.ndarray    # (H, W) float32, binary, disjoint from the others
    mask_hand: np.ndarray
    mask_torso: np.ndarray
    signer: SignerSpec
    frame_index: int


def sample_signer(rng: np.random.Generator) -> SignerSpec:
    """Draw a signer from the (deliberately skewed) attribute distribution."""
    return SignerSpec(
        skin_tone=int(rng.choice(N_SKIN_TONES, p=SKIN_TONE_PROBS)),
        gender=int(rng.choice(N_GENDERS, p=GENDER_PROBS)),
        ethnicity=int(rng.choice(N_ETHNICITIES, p=ETHNICITY_PROBS)),
    )


def rest_pose(canvas=(64, 64)) -> Pose:
    """Canonical front-facing pose with arms hanging, scaled to the canvas."""
    W, H = canvas
    cx = (W - 1) / 2.0
    l1, l2, l3 = 0.14 * H, 0.12 * H, 0.04 * H   # upper arm, forearm, hand
    kp = np.zeros((K, 2))
    kp[KP["neck"]] = (cx, 0.32 * H)
    kp[KP["pelvis"]] = (cx, 0.72 * H)
    kp[KP["l_hip"]] = (cx + 0.09 * W, 0.72 * H)
    kp[KP["r_hip"]] = (cx - 0.09 * W, 0.72 * H)
    kp[KP["l_shoulder"]] = (cx + 0.16 * W, 0.34 * H)
    kp[KP["r_shoulder"]] = (cx - 0.16 * W, 0.34 * H)
    kp[KP["nose"]] = (cx, 0.22 * H)
    kp[KP["l_eye"]] = (cx + 0.035 * W, 0.185 * H)
    kp[KP["r_eye"]] = (cx - 0.035 * W, 0.185 * H)
    kp[KP["l_ear"]] = (cx + 0.065 * W, 0.20 * H)
    kp[KP["r_ear"]] = (cx - 0.065 * W, 0.20 * H)
    for side in ("l", "r"):
        sh = kp[KP[f"{side}_shoulder"]]
        kp[KP[f"{side}_elbow"]] = sh + (0.0, l1)
        kp[KP[f"{side}_wrist"]] = kp[KP[f"{side}_elbow"]] + (0.0, l2)
        kp[KP[f"{side}_hand"]] = kp[KP[f"{side}_wrist"]] + (0.0, l3)
    return Pose(kp, np.ones(K, dtype=bool), canvas).validate()


def _smooth_track(rng, n, lo, hi):
    """A smooth bounded trajectory: offset sinusoid inside [lo, hi]."""
    mid = rng.uniform(lo, hi)
    amp = rng.uniform(0.0, min(mid - lo, hi - mid))
    freq = rng.uniform(0.5, 2.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    t = np.arange(n)
    return mid + amp * np.sin(2 * np.pi * freq * t / max(n, 1) + phase)


def sample_pose_sequence(rng: np.random.Generator, n_frames: int,
                         canvas=(64, 64)) -> PoseSequence:
    """Sample an articulated sequence by driving arm joint angles.

    Arm positions come from a kinematic chain off the rest pose, so the
    upper-arm/forearm/hand segment lengths are exactly constant across
    frames. A global sway translates the whole figure rigidly, and an
    independent track moves the head relative to the torso, so the
    corpus exercises both rigid translation and head/torso offset —
    without that variation a conditional model is free to ignore where
    the conditioning puts the figure.
    """
    W, H = canvas
    base = rest_pose(canvas)
    l1, l2, l3 = 0.14 * H, 0.12 * H, 0.04 * H
    head = list(posekit.HEAD_KEYPOINTS)
    # absolute angles measured from straight down, positive toward the
    # figure's outside; bend is the forearm angle relative to the upper arm
    tracks = {}
    for side in ("l", "r"):
        tracks[f"{side}_arm"] = np.deg2rad(_smooth_track(rng, n_frames, -20.0, 60.0))
        tracks[f"{side}_bend"] = np.deg2rad(_smooth_track(rng, n_frames, -120.0, 15.0))
    sway_x = _smooth_track(rng, n_frames, -0.05 * W, 0.05 * W)
    sway_y = _smooth_track(rng, n_frames, -0.015 * H, 0.015 * H)
    head_dx = _smooth_track(rng, n_frames, -0.20 * W, 0.20 * W)
    head_dy = _smooth_track(rng, n_frames, -0.02 * H, 0.02 * H)

    frames = []
    for t in range(n_frames):
        kp = base.keypoints.copy()
        kp[:, 0] += sway_x[t]
        kp[:, 1] += sway_y[t]
        kp[head, 0] += head_dx[t]
        kp[head, 1] += head_dy[t]
        for side, outward in (("l", 1.0), ("r", -1.0)):
            sh = kp[KP[f"{side}_shoulder"]]
            a = tracks[f"{side}_arm"][t]
            b = a + tracks[f"{side}_bend"][t]
            u1 = np.array([np.sin(a) * outward, np.cos(a)])
            u2 = np.array([np.sin(b) * outward, np.cos(b)])
            elbow = sh + l1 * u1
            wrist = elbow + l2 * u2
            hand = wrist + l3 * u2
            kp[KP[f"{side}_elbow"]] = elbow
            kp[KP[f"{side}_wrist"]] = wrist
            kp[KP[f"{side}_hand"]] = hand
        frames.append(Pose(kp, np.ones(K, dtype=bool), canvas).validate())
    return PoseSequence(frames).validate()


def _paint_capsule(region, pa, pb, radius):
    """Set region True inside the capsule pa--pb of the given radius."""
    h, w = region.shape
    x0 = max(0, int(np.floor(min(pa[0], pb[0]) - radius - 1)))
    x1 = min(w - 1, int(np.ceil(max(pa[0], pb[0]) + radius + 1)))
    y0 = max(0, int(np.floor(min(pa[1], pb[1]) - radius - 1)))
    y1 = min(h - 1, int(np.ceil(max(pa[1], pb[1]) + radius + 1)))
    if x1 < x0 or y1 < y0:
        return
    gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
    ab = np.array(pb, dtype=np.float64) - np.array(pa, dtype=np.float64)
    denom = float(ab @ ab)
    px = gx - pa[0]
    py = gy - pa[1]
    t = np.zeros_like(px, dtype=np.float64) if denom < 1e-12 else \
        np.clip((px * ab[0] + py * ab[1]) / denom, 0.0, 1.0)
    dx = px - t * ab[0]
    dy = py - t * ab[1]
    hit = dx * dx + dy * dy <= radius * radius
    region[gy[hit], gx[hit]] = True


def _paint_ellipse(region, center, rx, ry):
    h, w = region.shape
    gx, gy = np.meshgrid(np.arange(w), np.arange(h))
    inside = ((gx - center[0]) / rx) ** 2 + ((gy - center[1]) / ry) ** 2 <= 1.0
    region |= inside


def figure_regions(pose: Pose, signer: SignerSpec) -> dict[str, np.ndarray]:
    """Raw (overlapping) part regions from the pose geometry.

    Returns boolean arrays for "head", "hand", and "torso"; clothing
    (trunk, shoulder/hip bars, sleeved arms, collar) counts as torso.
    """
    W, H = pose.canvas
    kp = pose.keypoints
    head = np.zeros((H, W), dtype=bool)
    hand = np.zeros((H, W), dtype=bool)
    torso = np.zeros((H, W), dtype=bool)

    ear_span = np.linalg.norm(kp[KP["l_ear"]] - kp[KP["r_ear"]])
    rx = 0.85 * ear_span
    ry = 1.25 * rx
    head_center = kp[[KP["nose"], KP["l_eye"], KP["r_eye"],
                      KP["l_ear"], KP["r_ear"]]].mean(axis=0)
    _paint_ellipse(head, head_center, max(rx, 1.0), max(ry, 1.0))

    trunk_r = 0.11 * W * (1.0 if signer.gender == 0 else 1.22)
    _paint_capsule(torso, kp[KP["neck"]], kp[KP["pelvis"]], trunk_r)
    _paint_capsule(torso, kp[KP["l_shoulder"]], kp[KP["r_shoulder"]], 0.045 * H)
    _paint_capsule(torso, kp[KP["l_hip"]], kp[KP["r_hip"]], 0.05 * H)
    for side in ("l", "r"):
        _paint_capsule(torso, kp[KP[f"{side}_shoulder"]],
                       kp[KP[f"{side}_elbow"]], 0.030 * H)
        _paint_capsule(torso, kp[KP[f"{side}_elbow"]],
                       kp[KP[f"{side}_wrist"]], 0.026 * H)
        _paint_capsule(hand, kp[KP[f"{side}_wrist"]],
                       kp[KP[f"{side}_hand"]], 0.022 * H)
        _paint_capsule(hand, kp[KP[f"{side}_hand"]],
                       kp[KP[f"{side}_hand"]], 0.035 * H)
    return {"head": head, "hand": hand, "torso": torso}


def _collar_region(pose: Pose):
    W, H = pose.canvas
    region = np.zeros((H, W), dtype=bool)
    _paint_capsule(region, pose.keypoints[KP["neck"]],
                   pose.keypoints[KP["neck"]], 0.045 * H)
    return region


def render_frame(pose: Pose, signer: SignerSpec, frame_index: int = 0) -> FrameRecord:
    """Paint the figure and derive disjoint part masks.

    Mask priority is hand over head over torso: a pixel claimed by a
    higher-priority part is removed from the lower ones, matching the
    paint order of the image.
    """
    pose.validate()
    W, H = pose.canvas
    regions = figure_regions(pose, signer)
    head_raw, hand_raw, torso_raw = regions["head"], regions["hand"], regions["torso"]

    img = np.empty((H, W, 3), dtype=np.float32)
    img[:] = BACKGROUND_COLOR
    img[torso_raw] = SHIRT_COLORS[signer.gender]
    collar = _collar_region(pose) & torso_raw
    img[collar] = COLLAR_COLORS[signer.ethnicity]
    img[head_raw] = SKIN_COLORS[signer.skin_tone]
    img[hand_raw] = SKIN_COLORS[signer.skin_tone]

    mask_hand = hand_raw
    mask_head = head_raw & ~hand_raw
    mask_torso = torso_raw & ~hand_raw & ~head_raw
    return FrameRecord(
        image=img,
        pose=pose,
        mask_head=mask_head.astype(np.float32),
        mask_hand=mask_hand.astype(np.float32),
        mask_torso=mask_torso.astype(np.float32),
        signer=signer,
        frame_index=int(frame_index),
    )


def weighted_sampler(frames: list[FrameRecord]) -> np.ndarray:
    """Inverse attribute-combination frequency weights, normalized to sum 1."""
    ids = np.array([f.signer.attribute_id for f in frames])
    counts = np.bincount(ids, minlength=N_ATTRIBUTE_COMBOS).astype(np.float64)
    w = 1.0 / counts[ids]
    return w / w.sum()


def sample_indices(rng: np.random.Generator, weights: np.ndarray, n: int) -> np.ndarray:
    return rng.choice(len(weights), size=n, replace=True, p=weights)


# ---------------------------------------------------------------------------
# corpus I/O


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_corpus(out_dir, frames: list[FrameRecord], seed: int,
                 extra_meta: dict | None = None) -> dict:
    """Write frames to a corpus directory and return its manifest.

    Layout: data.npz (arrays), poses.jsonl (one row per frame), and
    manifest.json recording counts plus sha256 digests of both files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not frames:
        raise CorpusIOError(out, "refusing to write an empty corpus")
    canvas = frames[0].pose.canvas
    arrays = {
        "images": np.stack([f.image for f in frames]),
        "keypoints": np.stack([f.pose.keypoints for f in frames]),
        "visibility": np.stack([f.pose.visibility for f in frames]),
        "mask_head": np.stack([f.mask_head for f in frames]),
        "mask_hand": np.stack([f.mask_hand for f in frames]),
        "mask_torso": np.stack([f.mask_torso for f in frames]),
        "skin_tone": np.array([f.signer.skin_tone for f in frames], dtype=np.int16),
        "gender": np.array([f.signer.gender for f in frames], dtype=np.int16),
        "ethnicity": np.array([f.signer.ethnicity for f in frames], dtype=np.int16),
        "frame_index": np.array([f.frame_index for f in frames], dtype=np.int32),
    }
    np.savez(out / "data.npz", **arrays)

    rows = []
    for f in frames:
        rows.append((f.pose, {
            "skin_tone": f.signer.skin_tone,
            "gender": f.signer.gender,
            "ethnicity": f.signer.ethnicity,
        }))
    with open(out / "poses.jsonl", "w") as fh:
        for i, (pose, extra) in enumerate(rows):
            fh.write(json.dumps(pose_row(pose, i, **extra), sort_keys=True) + "\n")

    ids = [f.signer.attribute_id for f in frames]
    manifest = {
        "version": 1,
        "seed": int(seed),
        "canvas": [int(canvas[0]), int(canvas[1])],
        "n_frames": len(frames),
        "combo_counts": np.bincount(ids, minlength=N_ATTRIBUTE_COMBOS).tolist(),
        "sha256": {
            "data.npz": _sha256(out / "data.npz"),
            "poses.jsonl": _sha256(out / "poses.jsonl"),
        },
    }
    if extra_meta:
        manifest.update(extra_meta)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_corpus(corpus_dir) -> tuple[list[FrameRecord], dict]:
    """Load a corpus directory, verifying file digests against the manifest."""
    root = Path(corpus_dir)
    man_path = root / "manifest.json"
    if not man_path.is_file():
        raise CorpusIOError(man_path, "manifest not found")
    with open(man_path) as fh:
        manifest = json.load(fh)
    for name, want in manifest.get("sha256", {}).items():
        p = root / name
        if not p.is_file():
            raise CorpusIOError(p, "corpus file missing")
        got = _sha256(p)
        if got != want:
            raise CorpusIOError(p, f"digest mismatch (manifest {want[:12]}…, file {got[:12]}…)")
    with np.load(root / "data.npz") as z:
        arrays = {k: z[k] for k in z.files}
    canvas = tuple(manifest["canvas"])
    frames = []
    for i in range(manifest["n_frames"]):
        pose = Pose(arrays["keypoints"][i], arrays["visibility"][i], canvas)
        signer = SignerSpec(int(arrays["skin_tone"][i]), int(arrays["gender"][i]),
                            int(arrays["ethnicity"][i]))
        frames.append(FrameRecord(
            image=arrays["images"][i],
            pose=pose,
            mask_head=arrays["mask_head"][i],
            mask_hand=arrays["mask_hand"][i],
            mask_torso=arrays["mask_torso"][i],
            signer=signer,
            frame_index=int(arrays["frame_index"][i]),
        ))
    return frames, manifest


def gen_corpus(out_dir, n_signers: int = 8, frames_per_signer: int = 16,
               canvas=(64, 64), seed: int = 0) -> dict:
    """Generate and write a corpus; fully determined by the seed."""
    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(n_signers):
        signer = sample_signer(rng)
        seq = sample_pose_sequence(rng, frames_per_signer, canvas)
        for t, pose in enumerate(seq.frames):
            frames.append(render_frame(pose, signer, frame_index=t))
    return write_corpus(out_dir, frames, seed=seed,
                        extra_meta={"n_signers": int(n_signers),
                                    "frames_per_signer": int(frames_per_signer)})
