"""Bipartite attention between a feature grid and a small latent set.

The layer connects n = H*W image features with m latents (m << n), so cost
is O(n*m) rather than the O(n^2) of self-attention. Three update rules are
provided: the simplex update modulates normalized features by scale and
shift computed from the attended message; the additive update sends
information the other way, latents absorbing features through a residual
plus normalization; and the duplex update first recomputes latent
"centroids" (attention-weighted feature averages) and then uses those as
keys when modulating the features. A duplex layer chains all three.

Reductions over the latent axis (softmax normalizer and weighted value
average) accumulate in float64 before rounding back, which makes float32
results bit-invariant under latent permutations.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import engine as eng
from . import imageio
from .engine import Tensor
from .layers import Affine
from .rng import Xoshiro256StarStar

_ENCODING_CACHE: dict[tuple, np.ndarray] = {}


def build_positional_encodings(height: int, width: int, d: int) -> Tensor:
    """Sinusoidal grid encoding: first d/2 channels encode the column index,
    last d/2 the row index, each as interleaved sin/cos with base 10000.

    Rows are laid out row-major: feature p sits at (row p // W, col p % W).
    """
    if d % 4 != 0:
        raise ValueError(f"positional encoding needs d divisible by 4, got d={d}")
    key = (height, width, d)
    cached = _ENCODING_CACHE.get(key)
    if cached is None:
        half = d // 2
        pairs = half // 2
        freqs = 10000.0 ** (-2.0 * np.arange(pairs) / half)  # [pairs]

        def axis_enc(length):
            angle = np.arange(length)[:, None] * freqs[None, :]  # [length, pairs]
            enc = np.zeros((length, half))
            enc[:, 0::2] = np.sin(angle)
            enc[:, 1::2] = np.cos(angle)
            return enc

        col = axis_enc(width)  # [W, half]
        row = axis_enc(height)  # [H, half]
        enc = np.zeros((height * width, d), dtype=np.float32)
        enc[:, :half] = np.tile(col, (height, 1))
        enc[:, half:] = np.repeat(row, width, axis=0)
        cached = enc
        _ENCODING_CACHE[key] = cached
    return Tensor(cached)


@dataclass
class FeatureGrid:
    """Image features as a set of n = H*W d-vectors plus their fixed grid encoding."""

    features: Tensor  # [..., n, d]
    height: int
    width: int
    grid_encoding: Tensor  # [n, d], constant

    @classmethod
    def create(cls, features: Tensor, height: int, width: int) -> "FeatureGrid":
        n, d = features.shape[-2], features.shape[-1]
        if n != height * width:
            raise ValueError(f"feature count {n} != height*width = {height * width}")
        return cls(features, height, width, build_positional_encodings(height, width, d))

    def with_features(self, features: Tensor) -> "FeatureGrid":
        return FeatureGrid(features, self.height, self.width, self.grid_encoding)


@dataclass
class LatentSet:
    """A set of m latent vectors; keys hold duplex centroids when fresh."""

    values: Tensor  # [..., m, d]
    pos_embed: Tensor  # [m, d], trained
    keys: Tensor | None = None  # [..., m, d], produced by compute_centroids


@dataclass
class StageMaps:
    """The affine maps owned by one attention stage (unused slots are None)."""

    q: Affine | None = None
    k: Affine | None = None
    v: Affine | None = None
    gamma: Affine | None = None
    beta: Affine | None = None

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in ("q", "k", "v", "gamma", "beta"):
            m = getattr(self, name)
            if m is not None:
                out.update(m.named_params(f"{prefix}.{name}"))
        return out


@dataclass
class AttentionParams:
    """Parameters of one bipartite attention layer.

    simplex/additive variants use `main` only. The duplex variant owns three
    stages with separate maps: `to_latents` (additive update of the latents),
    `centroid` (key construction), and `main` (the feature update, whose
    keys are the centroids and which therefore has no k map).
    """

    dim: int
    heads: int
    variant: str  # simplex | duplex | additive
    main: StageMaps
    to_latents: StageMaps | None = None
    centroid: StageMaps | None = None

    def __post_init__(self):
        if self.variant not in ("simplex", "duplex", "additive"):
            raise ValueError(f"unknown attention variant {self.variant!r}")
        if self.dim % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide dim ({self.dim})")

    @classmethod
    def create(
        cls,
        dim: int,
        heads: int,
        variant: str,
        rng: Xoshiro256StarStar,
        dtype=np.float32,
    ) -> "AttentionParams":
        def stage(*names) -> StageMaps:
            maps = {}
            for name in names:
                bias_init = 1.0 if name == "gamma" else 0.0
                maps[name] = Affine.create(dim, dim, rng, gain=1.0, bias_init=bias_init, dtype=dtype)
            return StageMaps(**maps)

        if variant == "duplex":
            return cls(
                dim,
                heads,
                variant,
                main=stage("q", "v", "gamma", "beta"),
                to_latents=stage("q", "k", "v"),
                centroid=stage("q", "k", "v"),
            )
        if variant == "simplex":
            return cls(dim, heads, variant, main=stage("q", "k", "v", "gamma", "beta"))
        return cls(dim, heads, variant, main=stage("q", "k", "v"))

    def additive_view(self) -> "AttentionParams":
        """The additive-stage parameters of a duplex layer, as their own params."""
        return AttentionParams(self.dim, self.heads, "additive", self.to_latents)

    def centroid_view(self) -> "AttentionParams":
        return AttentionParams(self.dim, self.heads, "additive", self.centroid)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = self.main.named_params(f"{prefix}.main")
        if self.to_latents is not None:
            out.update(self.to_latents.named_params(f"{prefix}.to_latents"))
        if self.centroid is not None:
            out.update(self.centroid.named_params(f"{prefix}.centroid"))
        return out


# -- core attention ----------------------------------------------------------


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d)) v for 2-D inputs; returns (output, weights).

    The weight matrix is returned alongside the output so callers can export
    attention maps.
    """
    if q.ndim != 2 or k.ndim != 2:
        raise ValueError(f"scaled_dot_attention expects 2-D q and k, got {q.shape}, {k.shape}")
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    with eng.mac_scope("attn_core"):
        scores = eng.matmul(q, eng.transpose(k, (1, 0))) * (1.0 / math.sqrt(q.shape[-1]))
        weights = eng.softmax(scores, -1)
        out = _f64_average(weights, v)
    return out, weights


def _f64_average(weights: Tensor, values: Tensor) -> Tensor:
    # Weighted value sum over the latent axis, accumulated in float64 so the
    # rounded result does not depend on latent order.
    dtype = values.data.dtype
    out = eng.matmul(eng.astype(weights, np.float64), eng.astype(values, np.float64))
    return eng.astype(out, dtype) if dtype != np.float64 else out


def _split_heads(t: Tensor, heads: int) -> Tensor:
    """[..., r, d] -> [..., h, r, d/h] on contiguous channel blocks."""
    *batch, r, d = t.shape
    t = eng.reshape(t, (*batch, r, heads, d // heads))
    nd = t.ndim
    axes = list(range(nd))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return eng.transpose(t, axes)


def _merge_heads(t: Tensor) -> Tensor:
    *batch, h, r, dh = t.shape
    nd = t.ndim
    axes = list(range(nd))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return eng.reshape(eng.transpose(t, axes), (*batch, r, h * dh))


def _attend(
    x_in: Tensor,
    q_map: Affine,
    heads: int,
    y_in: Tensor | None = None,
    k_map: Affine | None = None,
    v_map: Affine | None = None,
    keys: Tensor | None = None,
    values_in: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Multi-head attention core. Keys come from k_map(y_in) or are given
    directly (duplex centroids); values from v_map(values_in or y_in).

    Returns (attended [..., n, d], weights [..., h, n, m]).
    """
    with eng.mac_scope("attn_maps"):
        q = q_map(x_in)
        k = k_map(y_in) if k_map is not None else keys
        v = v_map(values_in if values_in is not None else y_in)
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    scale = 1.0 / math.sqrt(q.shape[-1] / heads)
    with eng.mac_scope("attn_core"):
        axes = list(range(kh.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        scores = eng.matmul(qh, eng.transpose(kh, axes)) * scale
        weights = eng.softmax(scores, -1)
        out = _f64_average(weights, vh)
    return _merge_heads(out), weights


def bipartite_attend(
    xf: FeatureGrid, ys: LatentSet, p: AttentionParams
) -> tuple[Tensor, Tensor]:
    """Features attend to latents: a(X, Y) with q from the feature side.

    Positional encodings are added to both sides before the q/k/v maps.
    Returns (attended [..., n, d], weights [..., h, n, m]).
    """
    if p.variant == "duplex":
        raise ValueError("duplex feature updates take keys from centroids; use duplex_update")
    if xf.features.shape[-1] != p.dim or ys.values.shape[-1] != p.dim:
        raise ValueError(
            f"dim mismatch: features {xf.features.shape[-1]}, latents "
            f"{ys.values.shape[-1]}, params {p.dim}"
        )
    x_in = xf.features + xf.grid_encoding
    y_in = ys.values + ys.pos_embed
    return _attend(x_in, p.main.q, p.heads, y_in=y_in, k_map=p.main.k, v_map=p.main.v)


def _modulate(features: Tensor, attended: Tensor, stage: StageMaps) -> Tensor:
    # gamma(a) * channel_norm(X) + beta(a); the modulation sees the raw
    # features, not the position-encoded ones.
    with eng.mac_scope("attn_maps"):
        gamma = stage.gamma(attended)
        beta = stage.beta(attended)
    return gamma * eng.channel_norm(features) + beta


def simplex_update(xf: FeatureGrid, ys: LatentSet, p: AttentionParams) -> tuple[FeatureGrid, Tensor]:
    """One-way update: normalized features rescaled and shifted by the
    attended latent message. Returns (new grid, weights [..., h, n, m])."""
    if p.variant != "simplex":
        raise ValueError(f"simplex_update needs simplex params, got {p.variant!r}")
    attended, weights = bipartite_attend(xf, ys, p)
    return xf.with_features(_modulate(xf.features, attended, p.main)), weights


def additive_update(ys: LatentSet, xf: FeatureGrid, p: AttentionParams) -> tuple[LatentSet, Tensor]:
    """Latents absorb features: values := channel_norm(values + a(Y, X)).

    Keys are invalidated: any previously computed centroids refer to the old
    values. Returns (new latent set, weights [..., h, m, n])."""
    if p.variant != "additive":
        raise ValueError(f"additive_update needs additive params, got {p.variant!r}")
    y_in = ys.values + ys.pos_embed
    x_in = xf.features + xf.grid_encoding
    attended, weights = _attend(y_in, p.main.q, p.heads, y_in=x_in, k_map=p.main.k, v_map=p.main.v)
    new_values = eng.channel_norm(ys.values + attended)
    return LatentSet(new_values, ys.pos_embed, keys=None), weights


def compute_centroids(ys: LatentSet, xf: FeatureGrid, p: AttentionParams) -> Tensor:
    """Centroids K[j]: attention-weighted averages of v-mapped features under
    latent-as-query attention. Stored into ys.keys and returned."""
    stage = p.centroid if p.variant == "duplex" else p.main
    y_in = ys.values + ys.pos_embed
    x_in = xf.features + xf.grid_encoding
    keys, _ = _attend(y_in, stage.q, p.heads, y_in=x_in, k_map=stage.k, v_map=stage.v)
    ys.keys = keys
    return keys


def duplex_update(xf: FeatureGrid, ys: LatentSet, p: AttentionParams) -> tuple[FeatureGrid, Tensor]:
    """Simplex-style modulation whose attention keys are the stored centroids."""
    if p.variant != "duplex":
        raise ValueError(f"duplex_update needs duplex params, got {p.variant!r}")
    if ys.keys is None:
        raise RuntimeError("duplex_update requires centroids; run compute_centroids first")
    x_in = xf.features + xf.grid_encoding
    y_in = ys.values + ys.pos_embed
    attended, weights = _attend(
        x_in, p.main.q, p.heads, keys=ys.keys, v_map=p.main.v, values_in=y_in
    )
    return xf.with_features(_modulate(xf.features, attended, p.main)), weights


def bipartite_layer(
    xf: FeatureGrid, ys: LatentSet, p: AttentionParams
) -> tuple[FeatureGrid, LatentSet, Tensor]:
    """One full attention layer.

    duplex: latents updated first (additive), centroids recomputed, then the
    features are updated against the centroids. simplex: features updated
    only, latents returned untouched. Returns the final feature-update
    weights [..., h, n, m] for attention-map export.
    """
    if p.variant == "simplex":
        new_xf, weights = simplex_update(xf, ys, p)
        return new_xf, ys, weights
    if p.variant == "duplex":
        new_ys, _ = additive_update(ys, xf, p.additive_view())
        compute_centroids(new_ys, xf, p)
        new_xf, weights = duplex_update(xf, new_ys, p)
        return new_xf, new_ys, weights
    raise ValueError(f"bipartite_layer supports simplex or duplex, got {p.variant!r}")


# -- attention-map export ------------------------------------------------------

# Fixed 16-color palette for argmax composites (wraps for m > 16).
COMPOSITE_PALETTE = np.array(
    [
        (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
        (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
        (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
        (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    ],
    dtype=np.uint8,
)


def head_mean(weights: np.ndarray) -> np.ndarray:
    """[h, n, m] (or [n, m]) attention weights -> head-averaged [n, m]."""
    w = np.asarray(weights, dtype=np.float64)
    return w if w.ndim == 2 else w.mean(axis=0)


def export_attention_maps(layer_weights, grid_shapes, out_dir) -> list[str]:
    """Write per-latent PGM heatmaps and per-layer argmax composites.

    Args:
        layer_weights: per layer, weights [h, n, m] or [n, m] (numpy or Tensor).
        grid_shapes: per layer, the (H, W) of that layer's feature grid.
        out_dir: target directory (created if missing).

    Returns:
        List of file paths written. Heatmaps are min-max scaled per map;
        constant maps come out black.
    """
    imageio.ensure_dir(out_dir)
    written = []
    for layer, (weights, (h, w)) in enumerate(zip(layer_weights, grid_shapes)):
        wmat = head_mean(weights.data if isinstance(weights, Tensor) else weights)
        n, m = wmat.shape
        if n != h * w:
            raise ValueError(f"layer {layer}: {n} weight rows but grid {h}x{w}")
        for j in range(m):
            heat = wmat[:, j].reshape(h, w)
            lo, hi = heat.min(), heat.max()
            scaled = (heat - lo) / (hi - lo) if hi > lo else np.zeros_like(heat)
            img = np.floor(scaled * 255.0 + 0.5).astype(np.uint8)
            path = os.path.join(out_dir, f"layer{layer}_latent{j}.pgm")
            imageio.save_pgm(path, img)
            written.append(path)
        owner = wmat.argmax(axis=1).reshape(h, w)
        composite = COMPOSITE_PALETTE[owner % len(COMPOSITE_PALETTE)]
        path = os.path.join(out_dir, f"layer{layer}_composite.ppm")
        imageio.save_ppm(path, composite)
        written.append(path)
    return written
