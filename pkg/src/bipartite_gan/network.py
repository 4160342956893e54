"""Generator and discriminator assembled from the engine and attention pieces.

The generator maps a latent vector z (split into k components, sent through a
shared MLP) to an image: a learned 4x4 constant is refined by per-level
synthesis blocks (bipartite attention -> 3x3 conv -> leaky ReLU -> bilinear
upsample, with variance-preserving ResNet skips), then a final 1x1 RGB
projection with tanh. The discriminator mirrors the stack downwards and ends
with a minibatch-stddev channel, a conv, and an affine to one logit per item.
Attention lives in the generator; a flag can enable it in the discriminator
for ablations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine as eng
from .attention import AttentionParams, FeatureGrid, LatentSet, bipartite_layer
from .engine import Tensor
from .layers import Affine, Conv1x1, Conv3x3, unit_uniform
from .rng import Xoshiro256StarStar

_INV_SQRT2 = 1.0 / math.sqrt(2.0)


@dataclass
class GeneratorConfig:
    """Architecture settings shared by the generator and discriminator."""

    resolution: int = 32
    base_resolution: int = 4
    channels: tuple[int, ...] | None = None  # per level; derived when None
    k: int = 16  # latent components
    latent_dim: int = 32  # dim of each component
    mapping_depth: int = 8
    attention_variant: str = "duplex"  # simplex | duplex
    attn_first_level: int = 0
    attn_last_level: int | None = None  # default: last level
    heads: int = 4
    use_resnet_skips: bool = True
    noise_inputs: bool = False
    disc_attention: bool = False

    @property
    def num_levels(self) -> int:
        return int(math.log2(self.resolution)) - 1

    def channel_schedule(self) -> list[int]:
        if self.channels is not None:
            return list(self.channels)
        levels = self.num_levels
        return [min(256, 32 * 2 ** (levels - 1 - l)) for l in range(levels)]

    def attention_levels(self) -> list[int]:
        last = self.num_levels - 1 if self.attn_last_level is None else self.attn_last_level
        return [l for l in range(self.num_levels) if self.attn_first_level <= l <= last]

    def validate(self) -> None:
        r, b = self.resolution, self.base_resolution
        if b != 4:
            raise ValueError(f"base resolution is fixed at 4, got {b}")
        if r < 8 or r & (r - 1):
            raise ValueError(f"resolution must be a power of 2, >= 8, got {r}")
        if self.k < 1 or self.latent_dim < 1:
            raise ValueError(f"k and latent_dim must be positive, got {self.k}, {self.latent_dim}")
        if self.attention_variant not in ("simplex", "duplex"):
            raise ValueError(f"unknown attention variant {self.attention_variant!r}")
        sched = self.channel_schedule()
        if len(sched) != self.num_levels:
            raise ValueError(f"channel schedule has {len(sched)} entries for {self.num_levels} levels")
        for l in self.attention_levels():
            if sched[l] % 4 != 0:
                raise ValueError(f"attention level {l} needs channels divisible by 4, got {sched[l]}")


@dataclass
class AttentionBlock:
    """Per-level attention: layer params plus the latent-side adapters."""

    params: AttentionParams
    lift: Affine  # latent_dim -> level channels
    pos_embed: Tensor  # [k, level channels]; zero-init so latent slots start exchangeable

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = self.params.named_params(f"{prefix}")
        out.update(self.lift.named_params(f"{prefix}.lift"))
        out[f"{prefix}.pos_embed"] = self.pos_embed
        return out


def _features_from_map(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return eng.reshape(eng.transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def _map_from_features(f: Tensor, h: int, w: int) -> Tensor:
    n = f.shape[0]
    return eng.transpose(eng.reshape(f, (n, h, w, f.shape[-1])), (0, 3, 1, 2))


class Generator:
    """Synthesis network; constructing it draws all parameters from the rng."""

    def __init__(self, config: GeneratorConfig, rng: Xoshiro256StarStar | int, dtype=np.float32):
        config.validate()
        if isinstance(rng, int):
            rng = Xoshiro256StarStar(rng)
        self.config = config
        self.dtype = dtype
        d = config.latent_dim
        levels = config.num_levels
        sched = config.channel_schedule()
        out_ch = sched[1:] + [sched[-1]]  # conv targets; last level keeps width

        self.mapping: list[Affine] = []
        for i in range(config.mapping_depth):
            gain = math.sqrt(2.0) if i < config.mapping_depth - 1 else 1.0
            self.mapping.append(Affine.create(d, d, rng, gain=gain, dtype=dtype))

        self.const = eng.param(unit_uniform(rng, (sched[0], 4, 4), dtype))

        attn_levels = set(config.attention_levels())
        self.attn: list[AttentionBlock | None] = []
        self.convs: list[Conv3x3] = []
        self.skips: list[Conv1x1 | None] = []
        self.noise_strength: list[Tensor] = []
        for l in range(levels):
            if l in attn_levels:
                self.attn.append(
                    AttentionBlock(
                        params=AttentionParams.create(
                            sched[l], config.heads, config.attention_variant, rng, dtype
                        ),
                        lift=Affine.create(d, sched[l], rng, gain=1.0, dtype=dtype),
                        pos_embed=eng.param(np.zeros((config.k, sched[l]), dtype=dtype)),
                    )
                )
            else:
                self.attn.append(None)
            self.convs.append(Conv3x3.create(sched[l], out_ch[l], rng, gain=math.sqrt(2.0), dtype=dtype))
            if config.use_resnet_skips and sched[l] != out_ch[l]:
                self.skips.append(Conv1x1.create(sched[l], out_ch[l], rng, gain=1.0, bias=False, dtype=dtype))
            else:
                self.skips.append(None)
            if config.noise_inputs:
                self.noise_strength.append(eng.param(np.zeros((), dtype=dtype)))
        self.to_rgb = Conv1x1.create(out_ch[-1], 3, rng, gain=1.0, dtype=dtype)

    # -- parameters --------------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.mapping):
            out.update(layer.named_params(f"g.mapping.{i}"))
        out["g.const"] = self.const
        for l in range(self.config.num_levels):
            if self.attn[l] is not None:
                out.update(self.attn[l].named_params(f"g.level{l}.attn"))
            out.update(self.convs[l].named_params(f"g.level{l}.conv"))
            if self.skips[l] is not None:
                out.update(self.skips[l].named_params(f"g.level{l}.skip"))
            if self.config.noise_inputs:
                out[f"g.level{l}.noise_strength"] = self.noise_strength[l]
        out.update(self.to_rgb.named_params("g.torgb"))
        return out

    # -- forward -----------------------------------------------------------

    def mapping_forward(self, z: Tensor) -> Tensor:
        """z [..., k*d] -> intermediate latents [..., k, d] via the shared MLP."""
        k, d = self.config.k, self.config.latent_dim
        if z.shape[-1] != k * d:
            raise ValueError(f"z length {z.shape[-1]} != k*d = {k * d}")
        batch = z.shape[:-1]
        h = eng.reshape(z, (int(np.prod(batch) or 1) * k, d))
        for i, layer in enumerate(self.mapping):
            h = layer(h)
            if i < len(self.mapping) - 1:
                h = eng.leaky_relu(h, 0.2)
        return eng.reshape(h, (*batch, k, d))

    def style_mix(self, z_a: Tensor, z_b: Tensor, crossover_level: int) -> list[Tensor]:
        """Per-level latent assignment: levels < crossover take z_a, the rest z_b."""
        levels = self.config.num_levels
        if not 0 <= crossover_level <= levels:
            raise ValueError(f"crossover level {crossover_level} outside [0, {levels}]")
        mapped_a = self.mapping_forward(z_a)
        mapped_b = self.mapping_forward(z_b) if crossover_level < levels else None
        return [mapped_a if l < crossover_level else mapped_b for l in range(levels)]

    def synthesis_block(
        self,
        x: Tensor,
        latents: Tensor,
        level: int,
        noise_rng: Xoshiro256StarStar | None = None,
    ) -> tuple[Tensor, Tensor | None]:
        """One synthesis level: attention if configured, conv, upsample, skip.

        x is [N, C, r, r] with r = 4 * 2**level, latents [N, k, d]. Returns
        the features feeding the next level and the attention weights (None
        at levels without attention).
        """
        cfg = self.config
        if not 0 <= level < cfg.num_levels:
            raise ValueError(f"level {level} outside [0, {cfg.num_levels})")
        x_in = x
        res = 4 * 2**level
        block = self.attn[level]
        w: Tensor | None = None
        if block is not None:
            feats = _features_from_map(x)
            xf = FeatureGrid.create(feats, res, res)
            values = block.lift(latents)
            ys = LatentSet(values, block.pos_embed)
            xf, _, w = bipartite_layer(xf, ys, block.params)
            x = _map_from_features(xf.features, res, res)
        x = eng.leaky_relu(self.convs[level](x), 0.2)
        if cfg.noise_inputs and noise_rng is not None:
            noise = noise_rng.normals((x.shape[0], 1, x.shape[2], x.shape[3]), dtype=x.data.dtype)
            x = x + self.noise_strength[level] * Tensor(noise)
        if level < cfg.num_levels - 1:
            x = eng.bilinear_up2(x)
        if cfg.use_resnet_skips:
            skip = x_in if level == cfg.num_levels - 1 else eng.bilinear_up2(x_in)
            if self.skips[level] is not None:
                skip = self.skips[level](skip)
            x = x + skip * _INV_SQRT2
        return x, w

    def synthesize(
        self,
        per_level_latents: list[Tensor],
        noise_rng: Xoshiro256StarStar | None = None,
    ) -> tuple[Tensor, list[Tensor | None]]:
        """Run the synthesis stack on per-level mapped latents [N, k, d].

        Returns (images [N, 3, R, R] in (-1, 1), attention weights per level,
        None at levels without attention).
        """
        levels = self.config.num_levels
        if len(per_level_latents) != levels:
            raise ValueError(f"expected {levels} per-level latents, got {len(per_level_latents)}")
        n = per_level_latents[0].shape[0]
        c0 = self.const.shape[0]
        x = eng.broadcast_to(eng.reshape(self.const, (1, c0, 4, 4)), (n, c0, 4, 4))
        weights: list[Tensor | None] = []
        for l in range(levels):
            x, w = self.synthesis_block(x, per_level_latents[l], l, noise_rng)
            weights.append(w)
        return eng.tanh(self.to_rgb(x)), weights

    def forward(self, z: Tensor, noise_rng=None) -> tuple[Tensor, list[Tensor | None]]:
        """z [N, k*d] -> (images, per-level attention weights), no style mixing."""
        mapped = self.mapping_forward(z)
        return self.synthesize([mapped] * self.config.num_levels, noise_rng)


def minibatch_stddev(x: Tensor) -> Tensor:
    """Append one channel holding the batch-spread statistic.

    The statistic is the mean over positions and channels of the per-position
    cross-batch population standard deviation; identical batch items give an
    exact 0. Statistics accumulate in float64 so the value is invariant to
    batch order.
    """
    if x.ndim != 4:
        raise ValueError(f"minibatch_stddev expects [N,C,H,W], got {x.shape}")
    n, _, h, w = x.shape
    if n < 2:
        raise ValueError(f"minibatch_stddev needs a batch of at least 2, got {n}")
    x64 = eng.astype(x, np.float64)
    mu = eng.tmean(x64, axis=0, keepdims=True)
    var = eng.tmean((x64 - mu) * (x64 - mu), axis=0, keepdims=True)
    stat = eng.astype(eng.tmean(eng.sqrt(var)), x.data.dtype)
    chan = eng.broadcast_to(eng.reshape(stat, (1, 1, 1, 1)), (n, 1, h, w))
    return eng.concat([x, chan], axis=1)


class Discriminator:
    """Mirror of the generator: downsampling conv stack to a per-item logit."""

    def __init__(self, config: GeneratorConfig, rng: Xoshiro256StarStar | int, dtype=np.float32):
        config.validate()
        if isinstance(rng, int):
            rng = Xoshiro256StarStar(rng)
        self.config = config
        self.dtype = dtype
        sched = config.channel_schedule()
        levels = config.num_levels
        # Walk the generator schedule backwards: 32 px at sched[-1] wide,
        # widening while downsampling to the 4 px base.
        self.widths = [sched[levels - 1 - i] for i in range(levels)]
        self.from_rgb = Conv1x1.create(3, self.widths[0], rng, gain=1.0, dtype=dtype)
        self.convs: list[Conv3x3] = []
        self.skips: list[Conv1x1 | None] = []
        self.attn: list[tuple[AttentionParams, Tensor, Tensor] | None] = []
        for i in range(levels - 1):
            c_in, c_out = self.widths[i], self.widths[i + 1]
            if config.disc_attention:
                p = AttentionParams.create(c_in, config.heads, config.attention_variant, rng, dtype)
                seeds = eng.param(unit_uniform(rng, (config.k, c_in), dtype))
                pos = eng.param(np.zeros((config.k, c_in), dtype=dtype))
                self.attn.append((p, seeds, pos))
            else:
                self.attn.append(None)
            self.convs.append(Conv3x3.create(c_in, c_out, rng, gain=math.sqrt(2.0), dtype=dtype))
            if config.use_resnet_skips and c_in != c_out:
                self.skips.append(Conv1x1.create(c_in, c_out, rng, gain=1.0, bias=False, dtype=dtype))
            else:
                self.skips.append(None)
        top = self.widths[-1]
        self.final_conv = Conv3x3.create(top + 1, top, rng, gain=math.sqrt(2.0), dtype=dtype)
        self.logit = Affine.create(top * 16, 1, rng, gain=1.0, dtype=dtype)

    def named_params(self) -> dict[str, Tensor]:
        out = self.from_rgb.named_params("d.fromrgb")
        for i in range(len(self.convs)):
            if self.attn[i] is not None:
                p, seeds, pos = self.attn[i]
                out.update(p.named_params(f"d.level{i}.attn"))
                out[f"d.level{i}.attn.seeds"] = seeds
                out[f"d.level{i}.attn.pos_embed"] = pos
            out.update(self.convs[i].named_params(f"d.level{i}.conv"))
            if self.skips[i] is not None:
                out.update(self.skips[i].named_params(f"d.level{i}.skip"))
        out.update(self.final_conv.named_params("d.final_conv"))
        out.update(self.logit.named_params("d.logit"))
        return out

    def forward(self, images: Tensor) -> Tensor:
        """images [N, 3, R, R] -> logits [N]."""
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != cfg.resolution:
            raise ValueError(
                f"expected [N, 3, {cfg.resolution}, {cfg.resolution}] images, got {images.shape}"
            )
        x = self.from_rgb(images)
        res = cfg.resolution
        for i, conv in enumerate(self.convs):
            x_in = x
            if self.attn[i] is not None:
                p, seeds, pos = self.attn[i]
                n = x.shape[0]
                feats = _features_from_map(x)
                xf = FeatureGrid.create(feats, res, res)
                values = eng.broadcast_to(
                    eng.reshape(seeds, (1, *seeds.shape)), (n, *seeds.shape)
                )
                xf, _, _ = bipartite_layer(xf, LatentSet(values, pos), p)
                x = _map_from_features(xf.features, res, res)
            x = eng.bilinear_down2(eng.leaky_relu(conv(x), 0.2))
            if cfg.use_resnet_skips:
                skip = eng.bilinear_down2(x_in)
                if self.skips[i] is not None:
                    skip = self.skips[i](skip)
                x = x + skip * _INV_SQRT2
            res //= 2
        x = minibatch_stddev(x)
        x = eng.leaky_relu(self.final_conv(x), 0.2)
        n = x.shape[0]
        flat = eng.reshape(x, (n, x.shape[1] * x.shape[2] * x.shape[3]))
        return eng.reshape(self.logit(flat), (n,))


# -- spec-level functional aliases -------------------------------------------


def init_params(config: GeneratorConfig, seed: int) -> tuple[Generator, Discriminator]:
    """Deterministically initialize a generator/discriminator pair."""
    from .rng import mix64

    gen = Generator(config, Xoshiro256StarStar(mix64(seed ^ 0x47454E)))
    disc = Discriminator(config, Xoshiro256StarStar(mix64(seed ^ 0x444953)))
    return gen, disc


def mapping_forward(gen: Generator, z: Tensor) -> Tensor:
    return gen.mapping_forward(z)


def style_mix(gen: Generator, z_a: Tensor, z_b: Tensor, crossover_level: int) -> list[Tensor]:
    return gen.style_mix(z_a, z_b, crossover_level)


def synthesis_block(
    gen: Generator,
    x: Tensor,
    latents: Tensor,
    level: int,
    noise_rng: Xoshiro256StarStar | None = None,
) -> tuple[Tensor, Tensor | None]:
    return gen.synthesis_block(x, latents, level, noise_rng)


def generator_forward(gen: Generator, z: Tensor) -> tuple[Tensor, list[Tensor | None]]:
    """Single-sample forward: z [k*d] -> (image [3, R, R], per-level weights)."""
    img, weights = gen.forward(eng.reshape(z, (1, z.shape[-1])))
    return eng.reshape(img, img.shape[1:]), [
        None if w is None else w[0] for w in weights
    ]


def discriminator_forward(disc: Discriminator, images: Tensor) -> Tensor:
    return disc.forward(images)


def sample_images(gen: Generator, n: int, seed: int, batch_size: int = 32) -> np.ndarray:
    """Draw n images [n, 3, R, R] from a dedicated, seed-keyed latent stream."""
    from .rng import mix64

    rng = Xoshiro256StarStar(mix64(seed ^ 0x53414D50))
    zdim = gen.config.k * gen.config.latent_dim
    chunks = []
    done = 0
    while done < n:
        b = min(batch_size, n - done)
        z = rng.normals((b, zdim), dtype=np.float32)
        with eng.no_grad():
            images, _ = gen.forward(Tensor(z))
        chunks.append(images.data)
        done += b
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0,), dtype=np.float32)
