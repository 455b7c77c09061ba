"""Response-curve diagnostic on the probe4 checkpoint.

Sweeps head-only edit sizes and a whole-figure shift: a saturating curve
means the model clamps head offsets to the trained wobble range; a
uniformly damped linear curve points at the architecture.
"""
import os
import time

import numpy as np
import torch

torch.set_num_threads(1)

from penet import posekit
from penet.trainer import Trainer, pose_conditioning

T0 = time.time()
STATE = "scratch_probe4_state"
HEAD = list(posekit.HEAD_KEYPOINTS)


def log(msg):
    print(f"[{time.time() - T0:7.0f}s] {msg}", flush=True)


def centroid_x(x_head):
    luma = x_head[0].mean(0)
    xs = torch.arange(luma.shape[1], dtype=torch.float32)
    mask = luma > 0.1
    return float(xs[mask.any(0)].mean()) if mask.any() else float("nan")


tr = Trainer.from_checkpoint(os.path.join(STATE, "a.ckpt"))
cfg = tr.config
data = tr.data
ok = [i for i, f in enumerate(data.frames)
      if f.pose.keypoints[HEAD, 0].min() >= 15.0][:8]


def gen_head(pose, z, attr):
    y = torch.from_numpy(pose_conditioning(
        pose, cfg.pose_format, cfg.pose_tau))[None]
    with torch.no_grad():
        return tr.generator(y, z, attr).x_head


for joints, label in ((HEAD, "head-only"), (list(range(posekit.K)), "all")):
    for dx_edit in (-2.0, -4.0, -6.0, -8.0, -10.0, -14.0):
        dxs = []
        with torch.no_grad():
            for i in ok:
                batch = data.batch([i])
                x, y_post, a_up = tr._posterior_inputs(batch)
                z = tr.posterior(x, y_post, a_up).mu
                attr = batch["attr"] if cfg.use_attribute else None
                base = data.frames[i].pose
                if base.keypoints[joints, 0].min() + dx_edit < 1.0:
                    continue
                pose2 = base.copy()
                pose2.keypoints[joints, 0] += dx_edit
                c0 = centroid_x(gen_head(base, z, attr))
                c2 = centroid_x(gen_head(pose2, z, attr))
                dxs.append(c2 - c0)
        dxs = np.array(dxs)
        log(f"{label} edit {dx_edit:+.0f}: response {dxs.mean():+.2f} "
            f"(ratio {dxs.mean() / dx_edit:.2f}, n={len(dxs)})")
log("done")
