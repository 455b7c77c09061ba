"""Criterion-5 protocol analysis on the saved probe7 A model.

1. Per-pose: initial head offset o (head mean x - neck x) vs measured dx
   for the -10 px edit on raw corpus poses (clamp hypothesis: undershoot
   grows when the edit target o-10 leaves the trained span ~[-12.6,+12.5]).
2. Recentered protocol: shift head keypoints so o=0 before the edit; the
   -10 target is then mid-span for every pose.  Per-pose dx printed for
   both the mask and the luma centroid.
"""
import os
import time

import numpy as np
import torch

torch.set_num_threads(1)

from penet import posekit
from penet.trainer import TrainConfig, TrainData, Trainer, pose_conditioning

T0 = time.time()
STATE = "scratch_probe7_state"
HEAD = list(posekit.HEAD_KEYPOINTS)
NECK = posekit.KP["neck"]


def log(msg):
    print(f"[{time.time() - T0:7.0f}s] {msg}", flush=True)


def centroids_x(x_head):
    luma = x_head[0].mean(0)
    W = luma.shape[1]
    xs = torch.arange(W, dtype=torch.float32)
    mask = luma > 0.1
    mask_cx = float(xs[mask.any(0)].mean()) if mask.any() else float("nan")
    col_w = luma.sum(0)
    luma_cx = float((col_w * xs).sum() / col_w.sum())
    return mask_cx, luma_cx


cfg = TrainConfig(corpus=os.path.join(STATE, "corpus64"), steps=2000, seed=0)
data = TrainData.from_corpus(cfg)
trainer = Trainer.from_checkpoint(os.path.join(STATE, "a.ckpt"), data=data)
log("model loaded")


def gen_head(pose, z, attr):
    y = torch.from_numpy(
        pose_conditioning(pose, cfg.pose_format, cfg.pose_tau))[None]
    return trainer.generator(y, z, attr)


rows = []
with torch.no_grad():
    for i, f in enumerate(data.frames):
        batch = data.batch([i])
        x, y_post, a_up = trainer._posterior_inputs(batch)
        z = trainer.posterior(x, y_post, a_up).mu
        attr = batch["attr"] if cfg.use_attribute else None
        pose0 = f.pose.copy()
        o = float(pose0.keypoints[HEAD, 0].mean()
                  - pose0.keypoints[NECK, 0])

        # raw corpus pose
        pose_shift = pose0.copy()
        pose_shift.keypoints[HEAD, 0] -= 10.0
        m0, l0 = centroids_x(gen_head(pose0, z, attr).x_head)
        m1, l1 = centroids_x(gen_head(pose_shift, z, attr).x_head)

        # recentered pose (head over neck), then the same edit
        pose_c = pose0.copy()
        pose_c.keypoints[HEAD, 0] -= o
        pose_c_shift = pose_c.copy()
        pose_c_shift.keypoints[HEAD, 0] -= 10.0
        mc0, lc0 = centroids_x(gen_head(pose_c, z, attr).x_head)
        mc1, lc1 = centroids_x(gen_head(pose_c_shift, z, attr).x_head)

        rows.append((i, o, m1 - m0, l1 - l0, mc1 - mc0, lc1 - lc0))

log("  i   offset | raw: mask_dx luma_dx | recentered: mask_dx luma_dx")
for i, o, dm, dl, dcm, dcl in sorted(rows, key=lambda r: r[1]):
    log(f" {i:2d}  {o:+6.2f} |      {dm:+6.2f}  {dl:+6.2f} |"
        f"             {dcm:+6.2f}  {dcl:+6.2f}")

raw_l = np.array([r[3] for r in rows])
rec_m = np.array([r[4] for r in rows])
rec_l = np.array([r[5] for r in rows])
log(f"raw luma:   mean {raw_l.mean():+.2f} "
    f"range [{raw_l.min():+.2f}, {raw_l.max():+.2f}]")
log(f"rec mask:   mean {rec_m.mean():+.2f} "
    f"range [{rec_m.min():+.2f}, {rec_m.max():+.2f}]")
log(f"rec luma:   mean {rec_l.mean():+.2f} "
    f"range [{rec_l.min():+.2f}, {rec_l.max():+.2f}]")
for name, arr in (("rec mask", rec_m), ("rec luma", rec_l)):
    inside = np.abs(arr + 10.0) <= 3.0
    log(f"{name}: per-pose within 10+/-3 for {inside.sum()}/{len(arr)}")
log("done")
