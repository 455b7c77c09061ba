"""Criterion-5 z-protocol probe on the saved probe4 checkpoint.

Measures head-centroid shift under a -10 px head-keypoint edit with:
  1. z = posterior mu of the edited frame (probe4 baseline, dx -3.8)
  2. z ~ prior, 3 seeds
  3. z = per-signer mean posterior mu
Then trains 2000 more steps and re-measures protocol 1 and 2.
"""
import os
import time

import numpy as np
import torch

torch.set_num_threads(1)

from penet import posekit
from penet.evalkit import assemble_grid, pixel_metrics, reconstruct_all, save_png
from penet.trainer import Trainer, pose_conditioning

T0 = time.time()
STATE = "scratch_probe4_state"
HEAD = list(posekit.HEAD_KEYPOINTS)


def log(msg):
    print(f"[{time.time() - T0:7.0f}s] {msg}", flush=True)


def centroids_x(x_head):
    luma = x_head[0].mean(0)
    W = luma.shape[1]
    xs = torch.arange(W, dtype=torch.float32)
    mask = luma > 0.1
    mask_cx = float(xs[mask.any(0)].mean()) if mask.any() else float("nan")
    return mask_cx


def measure(tr, z_for, tag, save_tiles=None):
    cfg = tr.config
    data = tr.data
    ok = [i for i, f in enumerate(data.frames)
          if f.pose.keypoints[HEAD, 0].min() >= 11.0][:10]
    dxs = []
    tiles = []
    with torch.no_grad():
        for i in ok:
            batch = data.batch([i])
            z = z_for(tr, batch, i)
            attr = batch["attr"] if cfg.use_attribute else None
            out0 = tr.generator(batch["y"], z, attr)
            pose2 = data.frames[i].pose.copy()
            pose2.keypoints[HEAD, 0] -= 10.0
            y2 = torch.from_numpy(pose_conditioning(
                pose2, cfg.pose_format, cfg.pose_tau))[None]
            out2 = tr.generator(y2, z, attr)
            dxs.append(centroids_x(out2.x_head) - centroids_x(out0.x_head))
            if save_tiles is not None and len(tiles) < 8:
                tiles.append(out0.x_head[0].permute(1, 2, 0).numpy())
                tiles.append(out2.x_head[0].permute(1, 2, 0).numpy())
    dxs = np.array(dxs)
    n_in = int(((dxs >= -13) & (dxs <= -7)).sum())
    log(f"{tag}: dx mean {dxs.mean():.2f} range [{dxs.min():.2f}, "
        f"{dxs.max():.2f}] within10pm3 {n_in}/10")
    if save_tiles is not None:
        save_png(assemble_grid(tiles, n_cols=2), save_tiles)
    return dxs


def z_posterior(tr, batch, i):
    x, y_post, a_up = tr._posterior_inputs(batch)
    return tr.posterior(x, y_post, a_up).mu


def z_prior(seed):
    def f(tr, batch, i):
        g = torch.Generator().manual_seed(seed * 1000 + i)
        return torch.randn(1, tr.config.latent_dim, generator=g)
    return f


def signer_mean_mu(tr):
    data = tr.data
    with torch.no_grad():
        batch = data.batch(list(range(len(data))))
        x, y_post, a_up = tr._posterior_inputs(batch)
        mu = tr.posterior(x, y_post, a_up).mu
    ids = batch["attr"].numpy()
    means = {a: mu[ids == a].mean(0, keepdim=True) for a in set(ids.tolist())}
    def f(tr, batch, i):
        return means[int(batch["attr"][0])]
    return f


tr = Trainer.from_checkpoint(os.path.join(STATE, "a.ckpt"))
log("loaded checkpoint @2000")

with torch.no_grad():
    batch = tr.data.batch(list(range(len(tr.data))))
    x, y_post, a_up = tr._posterior_inputs(batch)
    mu = tr.posterior(x, y_post, a_up).mu
log(f"posterior mu norms: mean {mu.norm(dim=1).mean():.2f} "
    f"(prior typical {np.sqrt(tr.config.latent_dim):.2f})")

measure(tr, z_posterior, "post-mu@2000")
for s in (1, 2, 3):
    measure(tr, z_prior(s), f"prior-s{s}@2000",
            save_tiles=f"{STATE}/b_prior_s{s}.png" if s == 1 else None)
measure(tr, signer_mean_mu(tr), "signer-mean@2000")

# prior-sample quality check: PSNR of prior tiles is meaningless, but
# reconstruction must stay intact after the restore
real, fake, _ = reconstruct_all(tr, tr.data)
ss, ps = zip(*(pixel_metrics(real[i], fake[i]) for i in range(len(real))))
log(f"recon check: PSNR {np.mean(ps):.2f} SSIM {np.mean(ss):.3f}")

log("continuing training to 4000 steps")
for step in range(2000):
    tr.train_step(tr.data.batch(tr.sample_batch_indices()))
real, fake, _ = reconstruct_all(tr, tr.data)
ss, ps = zip(*(pixel_metrics(real[i], fake[i]) for i in range(len(real))))
log(f"@4000: PSNR {np.mean(ps):.2f} SSIM {np.mean(ss):.3f}")
measure(tr, z_posterior, "post-mu@4000")
measure(tr, z_prior(1), "prior-s1@4000")
tr.save(os.path.join(STATE, "a4000.ckpt"))
log("done")
