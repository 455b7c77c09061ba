"""GAN training loop: alternating critic/generator updates with the
pose-encoding posterior trained alongside the generator.

Determinism contract: all randomness flows through two explicit
generators (a torch.Generator for latent sampling, a numpy Generator for
batch order), model construction is seeded once, and identical
config+seed reproduce loss traces and checkpoints exactly.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import posekit
from .checkpoint import load_checkpoint, save_checkpoint
from .critics import (
    AttributeClassifier,
    DiscriminatorConfig,
    MultiScaleDiscriminator,
    adversarial_losses,
    attribute_loss,
    feature_matching_loss,
)
from .errors import TrainingAbort
from .generator import GeneratorConfig, PENetGenerator, compose
from .losses import (
    FeatureExtractor,
    LossWeights,
    edge_loss,
    perceptual_loss,
    total_generator_loss,
)
from .pevae import PosteriorConfig, PosteriorEncoder, kl_loss, reparameterize
from .synthdata import read_corpus, sample_indices, weighted_sampler

POSE_FORMATS = ("skeleton", "heatmap")
PSI_MODES = ("linear", "conv", "none")
LOG_KEYS = ("step", "perc", "feat", "edge", "attrib", "vae", "total", "d_loss")


@dataclass
class TrainConfig:
    """Flat, serializable training configuration (the checkpoint hashes
    its canonical JSON)."""

    corpus: str = ""
    image_size: int = 64
    batch_size: int = 4
    steps: int = 200
    # optimizer
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    # loss weights
    lambda_edge: float = 0.01
    lambda_attrib: float = 0.001
    beta: float = 0.001
    lambda_adv: float = 1.0
    # architecture / fusion
    fusion: str = "separate"          # early | shared | separate
    aggregator: str = "mha"           # mha | conv
    pose_format: str = "skeleton"     # skeleton | heatmap
    pose_tau: float = 6.0
    latent_dim: int = 64
    style_dim: int = 128
    base_channels: int = 16
    posterior_dim: int = 128
    # ablation switches
    use_edge_loss: bool = True
    psi_mode: str = "linear"          # linear | conv | none
    use_hand_mask: bool = True
    use_skips: bool = True
    use_attribute: bool = True
    attribute_in_posterior: bool = False
    use_pose_in_posterior: bool = True
    # misc
    seed: int = 0
    history_window: int = 100
    classifier_fit_steps: int = 200
    debug_grad_checks: bool = False

    def validate(self):
        if self.image_size < 32 or self.image_size & (self.image_size - 1):
            raise ValueError("image_size must be a power of two >= 32")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.pose_format not in POSE_FORMATS:
            raise ValueError(f"pose_format must be one of {POSE_FORMATS}")
        if self.psi_mode not in PSI_MODES:
            raise ValueError(f"psi_mode must be one of {PSI_MODES}")
        for name in ("lr_g", "lr_d", "lambda_edge", "lambda_attrib", "beta",
                     "lambda_adv", "pose_tau"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        return self

    def channels(self):
        return tuple(self.base_channels * m for m in (1, 2, 4, 8, 16))

    def cond_channels(self):
        if self.pose_format == "skeleton":
            return 3
        return len(posekit.KEYPOINT_NAMES)

    def weights(self) -> LossWeights:
        return LossWeights(
            lambda_edge=self.lambda_edge if self.use_edge_loss else 0.0,
            lambda_attrib=self.lambda_attrib,
            beta=self.beta,
            lambda_adv=self.lambda_adv,
        )

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            image_size=self.image_size,
            cond_channels=self.cond_channels(),
            channels=self.channels(),
            latent_dim=self.latent_dim,
            style_dim=self.style_dim,
            psi_mode=self.psi_mode,
            use_skips=self.use_skips,
            use_attribute=self.use_attribute,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(fields)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            ftype = fields[k].type
            if isinstance(v, str) and ftype != "str":
                v = _coerce(v, ftype)
            kwargs[k] = v
        return cls(**kwargs).validate()


def _coerce(text: str, ftype: str):
    if ftype == "bool":
        low = text.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if ftype == "int":
        return int(text)
    if ftype == "float":
        return float(text)
    return text


def pose_conditioning(pose, pose_format, tau):
    """Pose -> (C, H, W) float32 conditioning in the configured format."""
    if pose_format == "heatmap":
        return posekit.render_heatmaps(pose, tau=tau).channels.astype(
            np.float32)
    return posekit.render_skeleton(pose).pixels.transpose(2, 0, 1)


class TrainData:
    """Corpus frames tensorized once: images, pose conditioning, masks,
    attribute ids, and the inverse-frequency sampling weights."""

    def __init__(self, frames, config: TrainConfig):
        if not frames:
            raise ValueError("empty corpus")
        h, w = frames[0].image.shape[:2]
        if (w, h) != (config.image_size, config.image_size):
            raise ValueError(f"corpus canvas {w}x{h} does not match "
                             f"configured image_size {config.image_size}")
        self.frames = frames
        self.images = torch.stack([
            torch.from_numpy(f.image.transpose(2, 0, 1).copy())
            for f in frames])
        self.cond = torch.stack([
            torch.from_numpy(pose_conditioning(f.pose, config.pose_format,
                                               config.pose_tau))
            for f in frames])
        m_head = [torch.from_numpy(f.mask_head[None].copy()) for f in frames]
        m_hand = [torch.from_numpy(f.mask_hand[None].copy()) for f in frames]
        m_torso = [torch.from_numpy(f.mask_torso[None].copy()) for f in frames]
        self.m_head = torch.stack(m_head)
        self.m_hand = torch.stack(m_hand)
        self.m_torso = torch.stack(m_torso)
        if not config.use_hand_mask:
            # fold the hand region into the torso decoder's responsibility
            self.m_torso = torch.clamp(self.m_torso + self.m_hand, 0.0, 1.0)
            self.m_hand = torch.zeros_like(self.m_hand)
        self.attr = torch.tensor([f.signer.attribute_id for f in frames],
                                 dtype=torch.long)
        self.weights = weighted_sampler(frames)

    @classmethod
    def from_corpus(cls, config: TrainConfig) -> "TrainData":
        frames, _ = read_corpus(config.corpus)
        return cls(frames, config)

    def __len__(self):
        return len(self.frames)

    def batch(self, idx):
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return {
            "x": self.images[idx],
            "y": self.cond[idx],
            "m_head": self.m_head[idx],
            "m_hand": self.m_hand[idx],
            "m_torso": self.m_torso[idx],
            "attr": self.attr[idx],
            "idx": idx,
        }


@dataclass
class TrainState:
    """What a finished (or checkpointed) run hands back."""

    step: int
    history: list = field(default_factory=list)
    trainer: object = field(default=None, repr=False, compare=False)


class Trainer:
    def __init__(self, config: TrainConfig, data: TrainData):
        config.validate()
        self.config = config
        self.data = data
        cfg = config

        torch.manual_seed(cfg.seed)
        self.generator = PENetGenerator(cfg.generator_config())
        self.posterior = PosteriorEncoder(
            PosteriorConfig(
                latent_dim=cfg.latent_dim,
                scheme=cfg.fusion,
                aggregator=cfg.aggregator,
                use_pose=cfg.use_pose_in_posterior,
                attribute_in_posterior=cfg.attribute_in_posterior,
                cond_channels=cfg.cond_channels(),
                image_size=cfg.image_size,
                channels=cfg.channels(),
                dim=cfg.posterior_dim,
            ),
            pose_encoder=self.generator.encoder,
        )
        self.discriminator = MultiScaleDiscriminator(DiscriminatorConfig(
            cond_channels=cfg.cond_channels()))
        self.extractor = FeatureExtractor(seed=cfg.seed)
        self.classifier = AttributeClassifier(seed=cfg.seed)
        if cfg.use_attribute and cfg.classifier_fit_steps > 0:
            self.classifier.fit(data.images, data.attr,
                                steps=cfg.classifier_fit_steps)

        g_params = list(self.generator.parameters()) + \
            list(self.posterior.parameters())
        self.opt_g = torch.optim.Adam(g_params, lr=cfg.lr_g,
                                      betas=(cfg.beta1, cfg.beta2))
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(),
                                      lr=cfg.lr_d,
                                      betas=(cfg.beta1, cfg.beta2))
        self.torch_gen = torch.Generator().manual_seed(cfg.seed + 1)
        self.np_rng = np.random.default_rng(cfg.seed + 2)
        self.step_count = 0
        self.history: list[dict] = []

    # ------------------------------------------------------------------
    # forward helpers

    def _posterior_inputs(self, batch):
        x, y, attr = batch["x"], batch["y"], batch["attr"]
        a_up = None
        if self.config.attribute_in_posterior:
            a_up = self.generator.upsample_attribute(
                self.generator.encode_attribute(attr))
        return x, (y if self.config.use_pose_in_posterior else None), a_up

    def generate(self, batch, z=None):
        """Full generator pass for a batch; z defaults to a posterior
        sample (the reconstruction path)."""
        params = None
        if z is None:
            x, y_post, a_up = self._posterior_inputs(batch)
            params = self.posterior(x, y_post, a_up)
            z = reparameterize(params, self.torch_gen)
        attr = batch["attr"] if self.config.use_attribute else None
        out = self.generator(batch["y"], z, attr)
        composite = compose(out, batch["m_head"], batch["m_hand"],
                            batch["m_torso"])
        return out, composite, params

    def reconstruct(self, batch):
        """Posterior-mean reconstruction: the deterministic eval path.

        Uses z = mu instead of a reparameterized sample so repeated calls
        agree bitwise.
        """
        x, y_post, a_up = self._posterior_inputs(batch)
        params = self.posterior(x, y_post, a_up)
        attr = batch["attr"] if self.config.use_attribute else None
        out = self.generator(batch["y"], params.mu, attr)
        composite = compose(out, batch["m_head"], batch["m_hand"],
                            batch["m_torso"])
        return out, composite

    @staticmethod
    def _merge_parts(head, hand, torso):
        return torch.cat([head, hand, torso], dim=1)

    def _real_parts(self, batch):
        x = batch["x"]
        return self._merge_parts(x * batch["m_head"], x * batch["m_hand"],
                                 x * batch["m_torso"])

    # ------------------------------------------------------------------
    # optimization

    def train_step(self, batch) -> dict:
        cfg = self.config
        x, y = batch["x"], batch["y"]

        out, composite, params = self.generate(batch)
        fake_parts = self._merge_parts(out.x_head, out.x_hand, out.x_torso)
        real_parts = self._real_parts(batch)

        # critic update
        self.opt_d.zero_grad(set_to_none=True)
        d_real = self.discriminator(y, real_parts)
        d_fake = self.discriminator(y, fake_parts.detach())
        d_loss, _ = adversarial_losses([l for l, _ in d_real],
                                       [l for l, _ in d_fake])
        self._check_finite(d_loss, "d_loss", batch)
        d_loss.backward()
        self.opt_d.step()

        # generator + posterior update (against the updated critic)
        self.opt_g.zero_grad(set_to_none=True)
        with torch.no_grad():
            d_real = self.discriminator(y, real_parts)
        d_fake = self.discriminator(y, fake_parts)
        _, g_adv = adversarial_losses([l for l, _ in d_real],
                                      [l for l, _ in d_fake])
        fm = feature_matching_loss([f for _, f in d_real],
                                   [f for _, f in d_fake])

        perc = perceptual_loss(x, composite, self.extractor)
        for name, mask in (("x_head", "m_head"), ("x_hand", "m_hand"),
                           ("x_torso", "m_torso")):
            perc = perc + perceptual_loss(x * batch[mask],
                                          getattr(out, name), self.extractor)
        edge = edge_loss(x, composite) if cfg.use_edge_loss \
            else x.new_zeros(())
        attrib = attribute_loss(composite, batch["attr"], self.classifier) \
            if cfg.use_attribute else x.new_zeros(())
        vae = kl_loss(params)

        components = {"perc": perc, "feat": fm + cfg.lambda_adv * g_adv,
                      "edge": edge, "attrib": attrib, "vae": vae}
        total, report = total_generator_loss(components, cfg.weights())
        self._check_finite(total, "total", batch)
        total.backward()
        if cfg.debug_grad_checks:
            self._assert_frozen_clean()
        self.opt_g.step()

        self.step_count += 1
        record = {"step": self.step_count, **report.as_dict(),
                  "d_loss": float(d_loss.detach())}
        self.history.append(record)
        if len(self.history) > cfg.history_window:
            del self.history[:-cfg.history_window]
        return record

    def _check_finite(self, value, name, batch):
        if torch.isfinite(value.detach()).all():
            return
        dump_path = f"abort_step{self.step_count}.npz"
        np.savez(dump_path,
                 x=batch["x"].numpy(), y=batch["y"].numpy(),
                 attr=batch["attr"].numpy(), idx=batch["idx"].numpy(),
                 step=np.array(self.step_count))
        raise TrainingAbort(
            f"non-finite {name} at step {self.step_count}", dump_path)

    def _assert_frozen_clean(self):
        for name, module in (("attribute classifier", self.classifier),
                             ("feature extractor", self.extractor)):
            for p in module.parameters():
                if p.grad is not None and p.grad.abs().sum() > 0:
                    raise AssertionError(
                        f"gradient leaked into the frozen {name}")

    def sample_batch_indices(self):
        return sample_indices(self.np_rng, self.data.weights,
                              self.config.batch_size)

    # ------------------------------------------------------------------
    # persistence

    def state(self) -> TrainState:
        return TrainState(step=self.step_count, history=list(self.history))

    def _payload(self) -> dict:
        return {
            "step": self.step_count,
            "models": {
                "generator": self.generator.state_dict(),
                "posterior": self.posterior.state_dict(),
                "discriminator": self.discriminator.state_dict(),
                "classifier": self.classifier.state_dict(),
                "extractor": self.extractor.state_dict(),
            },
            "optim": {
                "g": self.opt_g.state_dict(),
                "d": self.opt_d.state_dict(),
            },
            "rng": {
                "torch": self.torch_gen.get_state(),
                "numpy": self.np_rng.bit_generator.state,
            },
            "history": [dict(r) for r in self.history],
        }

    def save(self, path):
        return save_checkpoint(self._payload(), self.config.to_dict(), path)

    def _restore(self, payload):
        models = payload["models"]
        self.generator.load_state_dict(models["generator"])
        self.posterior.load_state_dict(models["posterior"])
        self.discriminator.load_state_dict(models["discriminator"])
        self.classifier.load_state_dict(models["classifier"])
        self.extractor.load_state_dict(models["extractor"])
        self.opt_g.load_state_dict(payload["optim"]["g"])
        self.opt_d.load_state_dict(payload["optim"]["d"])
        self.torch_gen.set_state(payload["rng"]["torch"])
        rng = np.random.default_rng()
        rng.bit_generator.state = payload["rng"]["numpy"]
        self.np_rng = rng
        self.step_count = payload["step"]
        self.history = [dict(r) for r in payload["history"]]

    @classmethod
    def from_checkpoint(cls, path, data: TrainData | None = None,
                        expect_config: TrainConfig | None = None):
        payload, config_dict = load_checkpoint(
            path, expect_config.to_dict() if expect_config else None)
        config = TrainConfig.from_dict(config_dict)
        if data is None:
            data = TrainData.from_corpus(config)
        trainer = cls(config, data)
        trainer._restore(payload)
        return trainer


def train(config: TrainConfig, log_path=None, ckpt_path=None,
          data: TrainData | None = None,
          resume: str | None = None) -> TrainState:
    """Run the configured number of steps; writes one JSONL record per
    step and (optionally) a final checkpoint."""
    config.validate()
    if data is None:
        data = TrainData.from_corpus(config)
    if resume:
        trainer = Trainer.from_checkpoint(resume, data=data,
                                          expect_config=config)
    else:
        trainer = Trainer(config, data)

    log_file = open(log_path, "a" if resume else "w") if log_path else None
    try:
        for _ in range(config.steps):
            idx = trainer.sample_batch_indices()
            record = trainer.train_step(data.batch(idx))
            if log_file:
                log_file.write(json.dumps(
                    {k: record[k] for k in LOG_KEYS}) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    if ckpt_path:
        trainer.save(ckpt_path)
    state = trainer.state()
    state.trainer = trainer
    return state
