"""Adversarial critics: a pose-conditioned multi-scale patch discriminator
with feature matching, plus the frozen attribute classifier loss.

The three part images are merged into a single 9-channel input (hand,
head, torso) and concatenated with the pose conditioning, instead of one
discriminator per part.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import VocabularyError
from .synthdata import N_ATTRIBUTE_COMBOS


@dataclass
class DiscriminatorConfig:
    n_scales: int = 2
    n_layers: int = 4
    base_channels: int = 32
    cond_channels: int = 3
    part_channels: int = 9       # hand ⊕ head ⊕ torso, 3 each

    def __post_init__(self):
        if self.n_scales < 1:
            raise ValueError("need at least one scale")
        if self.n_layers < 1:
            raise ValueError("need at least one layer")


class PatchDiscriminator(nn.Module):
    """Single-scale patch critic; exposes one feature per layer."""

    def __init__(self, in_ch, n_layers=4, base_channels=32):
        super().__init__()
        layers = []
        ch = base_channels
        prev = in_ch
        for i in range(n_layers):
            stride = 2 if i < n_layers - 1 else 1
            block = [nn.Conv2d(prev, ch, 4, stride=stride, padding=2)]
            if i > 0:
                block.append(nn.InstanceNorm2d(ch))
            block.append(nn.LeakyReLU(0.2, inplace=True))
            layers.append(nn.Sequential(*block))
            prev = ch
            ch = min(ch * 2, base_channels * 8)
        self.layers = nn.ModuleList(layers)
        self.head = nn.Conv2d(prev, 1, 4, stride=1, padding=2)

    def forward(self, x):
        feats = []
        h = x
        for layer in self.layers:
            h = layer(h)
            feats.append(h)
        return self.head(h), feats


class MultiScaleDiscriminator(nn.Module):
    """Runs the patch critic on the input and its downsampled pyramid."""

    def __init__(self, config: DiscriminatorConfig | None = None):
        super().__init__()
        self.config = config or DiscriminatorConfig()
        in_ch = self.config.cond_channels + self.config.part_channels
        self.scales = nn.ModuleList([
            PatchDiscriminator(in_ch, self.config.n_layers,
                               self.config.base_channels)
            for _ in range(self.config.n_scales)
        ])

    def forward(self, y, parts):
        """y: pose conditioning; parts: merged part images (B, 9, H, W).

        Returns one (patch-logit map, feature list) pair per scale.
        """
        if parts.shape[1] != self.config.part_channels:
            raise ValueError(f"expected {self.config.part_channels} part "
                             f"channels, got {parts.shape[1]}")
        if y.shape[-2:] != parts.shape[-2:]:
            raise ValueError("pose conditioning and parts disagree spatially")
        x = torch.cat([y, parts], dim=1)
        out = []
        for i, scale in enumerate(self.scales):
            if i > 0:
                x = F.avg_pool2d(x, kernel_size=3, stride=2, padding=1,
                                 count_include_pad=False)
            out.append(scale(x))
        return out


def feature_matching_loss(real_feats, fake_feats):
    """Sum over scales and layers of the L1 feature distance, batch mean.

    The per-layer norm is the plain sum of absolute differences over the
    feature entries of one sample.
    """
    if len(real_feats) != len(fake_feats):
        raise ValueError("scale count mismatch between real and fake features")
    total = 0.0
    for layers_r, layers_f in zip(real_feats, fake_feats):
        if len(layers_r) != len(layers_f):
            raise ValueError("layer count mismatch between real and fake features")
        for fr, ff in zip(layers_r, layers_f):
            total = total + (fr - ff).abs().flatten(1).sum(dim=1).mean()
    return total


def adversarial_losses(real_logits, fake_logits):
    """Non-saturating GAN losses from per-scale patch logits.

    d_loss = E[-log s(real)] + E[-log(1 - s(fake))], g_loss =
    E[-log s(fake)], each averaged over scales.
    """
    if len(real_logits) != len(fake_logits):
        raise ValueError("scale count mismatch between real and fake logits")
    d_terms, g_terms = [], []
    for r, f in zip(real_logits, fake_logits):
        d_terms.append(F.softplus(-r).mean() + F.softplus(f).mean())
        g_terms.append(F.softplus(-f).mean())
    n = len(d_terms)
    return sum(d_terms) / n, sum(g_terms) / n


class AttributeClassifier(nn.Module):
    """Frozen random conv backbone + a linear classification head.

    The backbone stands in for a pretrained encoder; only the head is
    trained (by `fit`, before GAN training), after which the whole module
    stays frozen and serves as the attribute loss.
    """

    def __init__(self, n_classes=N_ATTRIBUTE_COMBOS, in_ch=3, width=32,
                 feat_dim=64, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.backbone = nn.Sequential(
            nn.Conv2d(in_ch, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width * 2, feat_dim, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        )
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.head = nn.Linear(feat_dim, n_classes)
        self.n_classes = n_classes

    def features(self, x):
        return self.backbone(x).mean(dim=(2, 3))

    def forward(self, x):
        return self.head(self.features(x))

    def fit(self, images, labels, steps=300, lr=0.05, weight_decay=1e-4):
        """Train the head by full-batch logistic regression; returns final
        training accuracy. Backbone features are computed once and reused."""
        with torch.no_grad():
            feats = self.features(images)
        head = self.head
        opt = torch.optim.Adam(head.parameters(), lr=lr,
                               weight_decay=weight_decay)
        for _ in range(steps):
            opt.zero_grad()
            loss = F.cross_entropy(head(feats), labels)
            loss.backward()
            opt.step()
        opt.zero_grad(set_to_none=True)
        with torch.no_grad():
            acc = (head(feats).argmax(dim=1) == labels).float().mean().item()
        for p in head.parameters():
            p.requires_grad_(False)
        return acc


def attribute_loss(image, labels, classifier: AttributeClassifier):
    """Cross-entropy of the classifier's prediction on (generated) images."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= classifier.n_classes):
        raise VocabularyError(f"label outside vocabulary "
                              f"[0, {classifier.n_classes})")
    return F.cross_entropy(classifier(image), labels)
