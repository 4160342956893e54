"""Desk-scale GAN with bipartite latent-to-feature attention.

A self-contained laboratory: a numpy autodiff engine, bipartite attention
layers, a style-based generator/discriminator pair, an adversarial training
loop, a synthetic multi-object scene dataset, and evaluation tooling for
sample quality and latent/object decomposition, all deterministic from a
seed on a single CPU core.
"""

from .engine import Tensor, backward, no_grad, tensor
from .estimator import BipartiteGAN

__all__ = ["BipartiteGAN", "Tensor", "backward", "no_grad", "tensor"]

__version__ = "0.1.0"
