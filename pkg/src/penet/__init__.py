"""Pose-conditioned, attribute-steerable signer synthesis at desk scale.

The package is organised as a library: `posekit` (poses and conditioning
renders), `synthdata` (procedural corpus), `nnblocks` (reusable network
blocks), `pevae` (pose-encoding variational posterior), `generator`
(part-wise UNet generator), `critics` (discriminator and attribute
classifier), `losses` (perceptual / edge / total loss), `trainer`
(GAN optimisation loop), `evalkit` (metrics and reports) and `cli`.
"""

__version__ = "0.1.0"
