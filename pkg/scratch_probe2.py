"""Scratch probe: criteria 4/5/8 + ablation skip-gap empirics. Delete before commit."""
import os
import sys
import tempfile
import time

import numpy as np
import torch

from penet import evalkit as ek
from penet.synthdata import gen_corpus, read_corpus
from penet.trainer import TrainConfig, TrainData, Trainer, train
from penet.posekit import KP

T0 = time.time()


def log(msg):
    print(f"[{time.time()-T0:7.0f}s] {msg}", flush=True)


HEAD_JOINTS = ("nose", "l_eye", "r_eye", "l_ear", "r_ear")


def head_centroids(x_head):
    """(thresholded-mask centroid x, luma-weighted centroid x)"""
    luma = (0.299 * x_head[0] + 0.587 * x_head[1] + 0.114 * x_head[2]).numpy()
    h, w = luma.shape
    gx = np.arange(w)[None, :].repeat(h, 0)
    m = luma > 0.1
    cx_mask = float(gx[m].mean()) if m.any() else float("nan")
    cx_w = float((gx * luma).sum() / max(luma.sum(), 1e-9))
    return cx_mask, cx_w


def psnr_ssim(trainer, data):
    real, fake, masks = ek.reconstruct_all(trainer, data)
    n = real.shape[0]
    vals = [ek.pixel_metrics(real[i], fake[i]) for i in range(n)]
    ssim = float(np.mean([v[0] for v in vals]))
    psnr = float(np.mean([v[1] for v in vals]))
    return psnr, ssim


def main():
    out = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                       "scratch_probe2_state")
    os.makedirs(out, exist_ok=True)
    corpus = os.path.join(out, "corpus64")
    if not os.path.isdir(corpus):
        gen_corpus(corpus, n_signers=2, frames_per_signer=8,
                   canvas=(64, 64), seed=0)
    frames, _ = read_corpus(corpus)

    # ---- Part A: criterion 4 (overfit) + criterion 5 (pose control)
    ckpt = os.path.join(out, "c4.ckpt")
    cfg = TrainConfig(corpus=corpus, steps=2000, batch_size=4, seed=0)
    if os.path.exists(ckpt):
        log("A: reusing checkpoint")
        from penet.trainer import Trainer as Tr
        trainer = Tr.from_checkpoint(ckpt, data=TrainData(frames, cfg))
    else:
        log("A: training 2000 steps (default config, 64x64)")
        state = train(cfg, ckpt_path=ckpt)
        trainer = state.trainer
    data = trainer.data
    psnr, ssim = psnr_ssim(trainer, data)
    log(f"A: composite PSNR {psnr:.2f} dB, SSIM {ssim:.4f}")

    log("B: pose-control (head shift -10 px, 10 poses)")
    shifts_mask, shifts_w = [], []
    with torch.no_grad():
        count = 0
        for i in range(len(data)):
            pose = frames[i].pose
            hx = [pose.keypoints[KP[j]][0] for j in HEAD_JOINTS]
            if min(hx) < 11.0:
                continue
            batch = data.batch(np.array([i]))
            x, y_post, a_up = trainer._posterior_inputs(batch)
            params = trainer.posterior(x, y_post, a_up)
            z = params.mu
            attr = batch["attr"]
            out_base = trainer.generator(batch["y"], z, attr)
            pose2 = pose.copy()
            for j in HEAD_JOINTS:
                pose2.keypoints[KP[j]][0] -= 10.0
            pose2.validate()
            from penet.trainer import _conditioning
            y2 = torch.from_numpy(_conditioning(
                pose2, trainer.config.pose_format,
                trainer.config.pose_tau))[None]
            out_edit = trainer.generator(y2, z, attr)
            c0m, c0w = head_centroids(out_base.x_head[0])
            c1m, c1w = head_centroids(out_edit.x_head[0])
            shifts_mask.append(c1m - c0m)
            shifts_w.append(c1w - c0w)
            count += 1
            if count >= 10:
                break
    sm, sw = np.array(shifts_mask), np.array(shifts_w)
    log(f"B: mask-centroid dx: mean {sm.mean():.2f} range [{sm.min():.2f}, {sm.max():.2f}]")
    log(f"B: luma-weighted dx: mean {sw.mean():.2f} range [{sw.min():.2f}, {sw.max():.2f}]")
    log(f"B: per-pose mask dx: {[f'{v:.1f}' for v in sm]}")

    # ---- Part C: criterion 8 (pose-agnosticism probe)
    def loo_r2(Z, t):
        n = len(t)
        preds = np.empty(n)
        from sklearn.linear_model import Ridge
        for i in range(n):
            idx = np.arange(n) != i
            r = Ridge(alpha=1.0).fit(Z[idx], t[idx])
            preds[i] = r.predict(Z[i:i + 1])[0]
        ss_res = float(((t - preds) ** 2).sum())
        ss_tot = float(((t - t.mean()) ** 2).sum())
        return 1.0 - ss_res / ss_tot

    r2 = {}
    for use_pose in (True, False):
        log(f"C: training probe arm use_pose_in_posterior={use_pose} (600 steps)")
        c = TrainConfig(corpus=corpus, steps=600, batch_size=4, seed=0,
                        use_pose_in_posterior=use_pose)
        st = train(c)
        tr = st.trainer
        with torch.no_grad():
            batch = tr.data.batch(np.arange(len(tr.data)))
            x, y_post, a_up = tr._posterior_inputs(batch)
            Z = tr.posterior(x, y_post, a_up).mu.numpy()
        t = np.array([f.pose.keypoints[f.pose.visibility][:, 0].mean()
                      for f in frames])
        r2[use_pose] = loo_r2(Z, t)
        log(f"C: use_pose={use_pose} LOO R^2 = {r2[use_pose]:.3f}")
    log(f"C: gap (no_pose - pose) = {r2[False] - r2[True]:.3f} (need >= 0.2)")

    # ---- Part D: criterion 10 skip-gap at 32x32
    corpus32 = os.path.join(out, "corpus32")
    if not os.path.isdir(corpus32):
        gen_corpus(corpus32, n_signers=2, frames_per_signer=8,
                   canvas=(32, 32), seed=0)
    frames32, _ = read_corpus(corpus32)
    for variant, kw in (("full", {}), ("skipless", {"use_skips": False})):
        c = TrainConfig(corpus=corpus32, image_size=32, steps=300,
                        batch_size=4, seed=0, **kw)
        d = TrainData(frames32, c)
        tr = Trainer(c, d)
        for stop in (300, 600):
            while tr.step_count < stop:
                tr.train_step(d.batch(tr.sample_batch_indices()))
            p, s = psnr_ssim(tr, d)
            log(f"D: {variant} @{stop}: PSNR {p:.2f} SSIM {s:.3f}")


if __name__ == "__main__":
    main()
