"""Scikit-learn style front door: fit the adversarial pair on an image array,
then sample from the weight-averaged generator.

The constructor parameters mirror the configuration-file keys one to one, so
a fitted estimator documents its own training recipe via get_params().
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig, generator_config, train_config
from .metrics import ImageEmbedder, frechet_embed_distance
from .network import sample_images
from .training import init_train_state, run_training


class BipartiteGAN(BaseEstimator):
    """Generative model over [N, 3, R, R] images with values in (-1, 1).

    fit() trains a generator/discriminator pair from scratch and keeps the
    exponential moving average of the generator for sampling; the run is
    bit-reproducible from `seed`. sample() draws fresh images, score() is the
    negative Frechet embed distance against a reference set (higher is
    better), computed with a fixed seeded random-convolution embedder.
    """

    def __init__(
        self,
        resolution=32,
        channels=None,
        k=16,
        latent_dim=32,
        mapping_depth=8,
        attention_variant="duplex",
        attn_first_level=0,
        attn_last_level=None,
        heads=4,
        use_resnet_skips=True,
        noise_inputs=False,
        disc_attention=False,
        learning_rate=0.001,
        beta1=0.0,
        beta2=0.99,
        adam_eps=1e-8,
        batch_size=16,
        r1_gamma=40.0,
        r1_interval=16,
        ema_decay=0.999,
        style_mix_prob=0.9,
        total_steps=5000,
        seed=0,
        log_every=10,
        embedder_seed=17,
    ):
        self.resolution = resolution
        self.channels = channels
        self.k = k
        self.latent_dim = latent_dim
        self.mapping_depth = mapping_depth
        self.attention_variant = attention_variant
        self.attn_first_level = attn_first_level
        self.attn_last_level = attn_last_level
        self.heads = heads
        self.use_resnet_skips = use_resnet_skips
        self.noise_inputs = noise_inputs
        self.disc_attention = disc_attention
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.batch_size = batch_size
        self.r1_gamma = r1_gamma
        self.r1_interval = r1_interval
        self.ema_decay = ema_decay
        self.style_mix_prob = style_mix_prob
        self.total_steps = total_steps
        self.seed = seed
        self.log_every = log_every
        self.embedder_seed = embedder_seed

    _CONFIG_KEYS = (
        "resolution", "channels", "k", "latent_dim", "mapping_depth",
        "attention_variant", "attn_first_level", "attn_last_level", "heads",
        "use_resnet_skips", "noise_inputs", "disc_attention", "learning_rate",
        "beta1", "beta2", "adam_eps", "batch_size", "r1_gamma", "r1_interval",
        "ema_decay", "style_mix_prob", "total_steps", "seed", "log_every",
        "embedder_seed",
    )

    def _configs(self):
        cfg = RunConfig(**{key: getattr(self, key) for key in self._CONFIG_KEYS})
        return generator_config(cfg), train_config(cfg)

    def fit(self, X, y=None):
        """Train on images X of shape [N, 3, resolution, resolution]."""
        gen_cfg, t_cfg = self._configs()
        X = np.asarray(X, dtype=np.float32)
        want = (3, self.resolution, self.resolution)
        if X.ndim != 4 or X.shape[1:] != want:
            raise ValueError(f"expected images [N, {want[0]}, {want[1]}, {want[2]}], got {X.shape}")
        self.state_ = init_train_state(gen_cfg, t_cfg)
        self.history_ = run_training(
            self.state_, X, t_cfg.total_steps, log_every=self.log_every
        )
        self.generator_ = self.state_.ema_generator()
        return self

    def sample(self, n, seed=None):
        """Draw n images [n, 3, R, R] from the averaged generator."""
        check_is_fitted(self)
        return sample_images(self.generator_, n, self.seed if seed is None else seed)

    def score(self, X, y=None):
        """Negative Frechet embed distance between X and len(X) fresh samples.

        The embedder has 64 features, so X needs at least 65 images."""
        check_is_fitted(self)
        X = np.asarray(X, dtype=np.float32)
        embedder = ImageEmbedder(self.embedder_seed, self.resolution)
        fake = self.sample(X.shape[0])
        return -frechet_embed_distance(embedder.embed(X), embedder.embed(fake))
