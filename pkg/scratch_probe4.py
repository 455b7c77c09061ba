"""Probe after the pose-diversity corpus change.

A: criterion-4 rerun  (2000 steps, default config, 64x64, 2x8 corpus)
B: pose control       (head shift -10 px at fixed posterior-mu z, 10 poses)
C: probe gap          (use_attribute=False arms, beta sweep, 64-frame 32x32)
D: skip gap           (full vs skipless, 16f and 64f corpora at 32x32)
"""
import os
import time

import numpy as np
import torch

torch.set_num_threads(1)

from penet import posekit
from penet.evalkit import pixel_metrics, reconstruct_all
from penet.synthdata import gen_corpus
from penet.trainer import TrainConfig, TrainData, Trainer, pose_conditioning

T0 = time.time()
STATE = "scratch_probe4_state"
os.makedirs(STATE, exist_ok=True)


def log(msg):
    print(f"[{time.time() - T0:7.0f}s] {msg}", flush=True)


def corpus(name, n_signers, frames, canvas, seed=0):
    path = os.path.join(STATE, name)
    if not os.path.exists(os.path.join(path, "manifest.json")):
        gen_corpus(path, n_signers=n_signers, frames_per_signer=frames,
                   canvas=canvas, seed=seed)
    return path


def psnr_ssim(trainer):
    real, fake, _ = reconstruct_all(trainer, trainer.data)
    ss, ps = zip(*(pixel_metrics(real[i], fake[i]) for i in range(len(real))))
    return float(np.mean(ps)), float(np.mean(ss))


def run(cfg, log_every=None, tag=""):
    data = TrainData.from_corpus(cfg)
    trainer = Trainer(cfg, data)
    for step in range(cfg.steps):
        trainer.train_step(data.batch(trainer.sample_batch_indices()))
        if log_every and (step + 1) % log_every == 0:
            p, s = psnr_ssim(trainer)
            log(f"{tag} @{step + 1}: PSNR {p:.2f} SSIM {s:.3f}")
    return trainer


# ---------------------------------------------------------------- A
c64 = corpus("corpus64", 2, 8, (64, 64))
log("A: 2000 steps, default config, 64x64 (new corpus)")
cfg_a = TrainConfig(corpus=c64, steps=2000, seed=0)
tr_a = run(cfg_a, log_every=500, tag="A")
tr_a.save(os.path.join(STATE, "a.ckpt"))

# ---------------------------------------------------------------- B
log("B: pose control (head shift -10 px, 10 poses)")
HEAD = list(posekit.HEAD_KEYPOINTS)
data_a = tr_a.data


def centroids_x(x_head):
    luma = x_head[0].mean(0)
    W = luma.shape[1]
    xs = torch.arange(W, dtype=torch.float32)
    mask = luma > 0.1
    mask_cx = float(xs[mask.any(0)].mean()) if mask.any() else float("nan")
    col_w = luma.sum(0)
    luma_cx = float((col_w * xs).sum() / col_w.sum())
    return mask_cx, luma_cx


ok = [i for i, f in enumerate(data_a.frames)
      if f.pose.keypoints[HEAD, 0].min() >= 11.0][:10]
dx_mask, dx_luma = [], []
with torch.no_grad():
    for i in ok:
        batch = data_a.batch([i])
        x, y_post, a_up = tr_a._posterior_inputs(batch)
        z = tr_a.posterior(x, y_post, a_up).mu
        attr = batch["attr"] if cfg_a.use_attribute else None
        out0 = tr_a.generator(batch["y"], z, attr)
        pose2 = data_a.frames[i].pose.copy()
        pose2.keypoints[HEAD, 0] -= 10.0
        y2 = torch.from_numpy(
            pose_conditioning(pose2, cfg_a.pose_format, cfg_a.pose_tau))[None]
        out2 = tr_a.generator(y2, z, attr)
        m0, l0 = centroids_x(out0.x_head)
        m2, l2 = centroids_x(out2.x_head)
        dx_mask.append(m2 - m0)
        dx_luma.append(l2 - l0)
dx_mask, dx_luma = np.array(dx_mask), np.array(dx_luma)
log(f"B: mask dx mean {dx_mask.mean():.2f} range "
    f"[{dx_mask.min():.2f}, {dx_mask.max():.2f}]")
log(f"B: luma dx mean {dx_luma.mean():.2f} range "
    f"[{dx_luma.min():.2f}, {dx_luma.max():.2f}]")
log("B: per-pose mask dx: " + str([f"{v:.1f}" for v in dx_mask]))

# ---------------------------------------------------------------- C
c32big = corpus("corpus32x64", 8, 8, (32, 32))


def loo_r2(Z, t, alpha=1.0):
    from sklearn.linear_model import Ridge
    n = len(t)
    pred = np.empty(n)
    for i in range(n):
        m = np.ones(n, bool)
        m[i] = False
        pred[i] = Ridge(alpha=alpha).fit(Z[m], t[m]).predict(Z[i:i + 1])[0]
    return 1.0 - ((t - pred) ** 2).sum() / ((t - t.mean()) ** 2).sum()


for beta in (0.001, 0.01):
    r2 = {}
    for use_pose in (True, False):
        cfg = TrainConfig(corpus=c32big, image_size=32, steps=800, seed=0,
                          use_attribute=False, beta=beta,
                          use_pose_in_posterior=use_pose)
        log(f"C: arm beta={beta} use_pose={use_pose} (800 steps)")
        tr = run(cfg)
        data = tr.data
        with torch.no_grad():
            batch = data.batch(list(range(len(data))))
            x, y_post, a_up = tr._posterior_inputs(batch)
            Z = tr.posterior(x, y_post, a_up).mu.numpy()
        t = np.array([f.pose.keypoints[:, 0].mean() for f in data.frames])
        r2[use_pose] = loo_r2(Z, t)
        log(f"C: beta={beta} use_pose={use_pose} LOO R^2 = {r2[use_pose]:.3f}")
    log(f"C: beta={beta} gap (no_pose - pose) = {r2[False] - r2[True]:.3f} "
        f"(need >= 0.2)")

# ---------------------------------------------------------------- D
c32small = corpus("corpus32x16", 2, 8, (32, 32))
for cname, cpath in (("16f", c32small), ("64f", c32big)):
    for skips in (True, False):
        cfg = TrainConfig(corpus=cpath, image_size=32, steps=2000, seed=0,
                          use_skips=skips)
        tag = f"D {cname} skips={skips}"
        log(tag + " (2000 steps)")
        run(cfg, log_every=500, tag=tag)
log("done")
