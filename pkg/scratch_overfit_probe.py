"""Scratch probe: overfit trajectory on the 16-frame micro corpus."""
import math
import os
import sys
import tempfile
import time

import torch

from penet.synthdata import gen_corpus
from penet.trainer import TrainConfig, TrainData, Trainer
from penet.generator import compose


def psnr(a, b):
    mse = float(((a - b) ** 2).mean())
    if mse <= 1e-10:
        return 100.0
    return min(10.0 * math.log10(1.0 / mse), 100.0)


def eval_recon(tr, data):
    tr.generator.eval()
    tr.posterior.eval()
    vals = []
    with torch.no_grad():
        for i in range(0, len(data), 8):
            idx = list(range(i, min(i + 8, len(data))))
            batch = data.batch(idx)
            x, y_post, a_up = tr._posterior_inputs(batch)
            params = tr.posterior(x, y_post, a_up)
            z = params.mu  # deterministic reconstruction
            attr = batch["attr"] if tr.config.use_attribute else None
            out = tr.generator(batch["y"], z, attr)
            comp = compose(out, batch["m_head"], batch["m_hand"],
                           batch["m_torso"])
            for j in range(comp.shape[0]):
                vals.append(psnr(comp[j], batch["x"][j]))
    tr.generator.train()
    tr.posterior.train()
    return sum(vals) / len(vals)


def main():
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
    overrides = {}
    for arg in sys.argv[2:]:
        k, v = arg.split("=", 1)
        overrides[k] = v
    td = tempfile.mkdtemp()
    corpus = os.path.join(td, "corpus")
    gen_corpus(corpus, n_signers=2, frames_per_signer=8, canvas=(64, 64),
               seed=0)
    cfg_dict = TrainConfig(corpus=corpus, steps=steps, batch_size=4,
                           seed=0).to_dict()
    cfg_dict.update(overrides)
    cfg = TrainConfig.from_dict(cfg_dict)
    data = TrainData.from_corpus(cfg)
    tr = Trainer(cfg, data)
    t0 = time.time()
    for s in range(1, steps + 1):
        rec = tr.train_step(data.batch(tr.sample_batch_indices()))
        if s % 100 == 0 or s == steps:
            p = eval_recon(tr, data)
            print(f"step {s:5d}  psnr {p:6.2f}  perc {rec['perc']:9.2f} "
                  f"feat {rec['feat']:11.1f} d {rec['d_loss']:.3f} "
                  f"({time.time() - t0:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
