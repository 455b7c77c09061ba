"""Criterion-6 probe: attribute steering on a balanced 4-tone corpus.

Four signers share (gender, ethnicity) = (0, 0) and differ only in
skin_tone; micro-train with attribute conditioning, then 50 seeded
trials: swap the skin tone at fixed z and check the mean skin-region
(head|hand) color of the swapped render lands closer to the target
palette than the source palette.  Both z protocols are measured
(posterior mu of the source frame, and a prior draw).
"""
import os
import time

import numpy as np
import torch

torch.set_num_threads(1)

from penet.evalkit import pixel_metrics, reconstruct_all
from penet.generator import compose
from penet.synthdata import (
    SKIN_COLORS,
    FrameRecord,
    SignerSpec,
    render_frame,
    sample_pose_sequence,
)
from penet.trainer import TrainConfig, TrainData, Trainer

T0 = time.time()


def log(msg):
    print(f"[{time.time() - T0:7.0f}s] {msg}", flush=True)


def balanced_frames(frames_per_signer=8, canvas=(32, 32), seed=0):
    rng = np.random.default_rng(seed)
    frames = []
    for tone in range(4):
        signer = SignerSpec(skin_tone=tone, gender=0, ethnicity=0)
        seq = sample_pose_sequence(rng, frames_per_signer, canvas)
        for t, pose in enumerate(seq.frames):
            frames.append(render_frame(pose, signer, frame_index=t))
    return frames


def steering_trials(trainer, data, n_trials=50, seed=0, z_mode="posterior"):
    cfg = trainer.config
    rng = np.random.default_rng(seed)
    g = torch.Generator().manual_seed(seed)
    wins = 0
    margins = []
    with torch.no_grad():
        for _ in range(n_trials):
            i = int(rng.integers(len(data)))
            src = data.frames[i].signer
            tgt_tone = int(rng.choice([t for t in range(4)
                                       if t != src.skin_tone]))
            tgt = SignerSpec(skin_tone=tgt_tone, gender=src.gender,
                             ethnicity=src.ethnicity)
            batch = data.batch([i])
            if z_mode == "posterior":
                x, y_post, a_up = trainer._posterior_inputs(batch)
                z = trainer.posterior(x, y_post, a_up).mu
            else:
                z = torch.randn(1, cfg.latent_dim, generator=g)
            attr = torch.tensor([tgt.attribute_id], dtype=torch.long)
            out = trainer.generator(batch["y"], z, attr)
            comp = compose(out, batch["m_head"], batch["m_hand"],
                           batch["m_torso"])
            img = comp[0].permute(1, 2, 0).numpy()
            skin = (batch["m_head"][0, 0] + batch["m_hand"][0, 0]).numpy() > 0.5
            mean_rgb = img[skin].mean(axis=0)
            d_tgt = np.linalg.norm(mean_rgb - np.array(SKIN_COLORS[tgt_tone]))
            d_src = np.linalg.norm(mean_rgb
                                   - np.array(SKIN_COLORS[src.skin_tone]))
            margins.append(d_src - d_tgt)
            wins += int(d_tgt < d_src)
    margins = np.array(margins)
    return wins, margins


frames = balanced_frames()
log(f"corpus: {len(frames)} frames, tones "
    f"{sorted(set(f.signer.skin_tone for f in frames))}")

for steps in (800, 1200):
    cfg = TrainConfig(corpus="", image_size=32, steps=steps, seed=0)
    data = TrainData(frames, cfg)
    trainer = Trainer(cfg, data)
    for step in range(cfg.steps):
        trainer.train_step(data.batch(trainer.sample_batch_indices()))
    real, fake, _ = reconstruct_all(trainer, data)
    ss, ps = zip(*(pixel_metrics(real[i], fake[i]) for i in range(len(real))))
    log(f"steps={steps}: recon PSNR {np.mean(ps):.2f} SSIM {np.mean(ss):.3f}")
    for z_mode in ("posterior", "prior"):
        wins, margins = steering_trials(trainer, data, z_mode=z_mode)
        log(f"steps={steps} z={z_mode}: {wins}/50 wins "
            f"(need >= 40), margin mean {margins.mean():+.3f} "
            f"min {margins.min():+.3f}")
log("done")
