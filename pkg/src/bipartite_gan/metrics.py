"""Evaluation: attention segmentation quality, exact object detection on
flat-color scenes, chi-square scene statistics, and embedding-space
distribution metrics.

The object detector inverts the renderer (nearest-palette quantization plus
connected components), so on clean renders it recovers ground truth exactly;
on generated images it gives a conservative scene reading. Distribution
metrics (Frechet distance, kNN precision/recall) run on features from a
fixed, seeded, never-trained random convolutional embedder, whose seed is
part of every report.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from . import engine as eng
from .attention import head_mean
from .engine import Tensor
from .imageio import quantize
from .network import Generator, sample_images
from .rng import Xoshiro256StarStar, mix64
from .scenes import BACKGROUND, PALETTE, RADIUS_MAX, RADIUS_MIN, SHAPES


# -- attention segments --------------------------------------------------------


def extract_attention_segments(layer_weights, grid_shapes) -> list[np.ndarray]:
    """Per-layer argmax maps: pixel p belongs to the latent with the largest
    attention weight (ties resolved toward the lowest latent index)."""
    segments = []
    for layer, (weights, (h, w)) in enumerate(zip(layer_weights, grid_shapes)):
        wmat = head_mean(weights.data if isinstance(weights, Tensor) else weights)
        if wmat.shape[0] != h * w:
            raise ValueError(f"layer {layer}: {wmat.shape[0]} weight rows but grid {h}x{w}")
        segments.append(wmat.argmax(axis=1).reshape(h, w).astype(np.int64))
    return segments


def _resize_maps(maps: np.ndarray, target: int) -> np.ndarray:
    """Bilinearly double [m, H, W] maps until they reach target x target."""
    h, w = maps.shape[-2:]
    if h != w:
        raise ValueError(f"attention grids must be square, got {h}x{w}")
    out = maps.astype(np.float32)
    while out.shape[-1] < target:
        with eng.no_grad():
            out = eng.bilinear_up2(Tensor(out[None])).data[0]
    if out.shape[-2:] != (target, target):
        raise ValueError(f"cannot resize {h}x{w} attention maps to {target}x{target}")
    return out


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def attention_segment_iou(layer_weights, grid_shapes, class_masks: dict) -> dict:
    """Best IoU per class over every (layer, latent) attention segment.

    Maps are bilinearly resized to the mask resolution, re-argmaxed into
    segments there, and each class mask is scored with the maximum IoU over
    all segments from all layers."""
    if not class_masks:
        return {}
    target = next(iter(class_masks.values())).shape[0]
    for name, mask in class_masks.items():
        if mask.shape != (target, target):
            raise ValueError(f"class mask {name} is {mask.shape}, expected {(target, target)}")
    segments = []
    for layer, (weights, (h, w)) in enumerate(zip(layer_weights, grid_shapes)):
        wmat = head_mean(weights.data if isinstance(weights, Tensor) else weights)
        if wmat.shape[0] != h * w:
            raise ValueError(f"layer {layer}: {wmat.shape[0]} weight rows but grid {h}x{w}")
        m = wmat.shape[1]
        heat = wmat.T.reshape(m, h, w)
        resized = _resize_maps(heat, target)
        owner = resized.argmax(axis=0)
        segments.extend(owner == j for j in range(m))
    return {
        name: max(_iou(seg, mask) for seg in segments)
        for name, mask in class_masks.items()
    }


# -- object detection ----------------------------------------------------------

MIN_COMPONENT_PIXELS = 12
FILL_TARGETS = (("circle", math.pi / 4.0), ("square", 1.0), ("triangle", 0.5))
FILL_BAND = 0.12


@dataclass
class DetectedObject:
    shape: str  # circle | square | triangle | unknown
    color: int  # palette index
    x: float  # centroid, unit coordinates
    y: float
    r: float  # radius back-solved from the pixel area via the shape's formula
    area: int  # pixels
    mask: np.ndarray  # boolean [R, R]


def _radius_from_area(shape: str, area_px: float, resolution: int) -> float:
    area = area_px / (resolution * resolution)
    if shape == "square":
        return math.sqrt(area / 2.0)
    if shape == "triangle":
        return math.sqrt(4.0 * area / (3.0 * math.sqrt(3.0)))
    return math.sqrt(area / math.pi)  # circle and unknown


def quantize_to_palette(image: np.ndarray) -> np.ndarray:
    """[3, R, R] image in (-1, 1) -> nearest color index; len(PALETTE) = background."""
    table = np.concatenate([PALETTE, BACKGROUND[None]], axis=0).astype(np.int32)
    rgb = quantize(image).astype(np.int32)  # [3, R, R]
    d2 = ((rgb[None] - table[:, :, None, None]) ** 2).sum(axis=1)  # [9, R, R]
    return d2.argmin(axis=0)


def detect_objects(image: np.ndarray) -> list[DetectedObject]:
    """Classical detector for flat-color scenes.

    Nearest-palette quantization, 4-connected components of at least
    MIN_COMPONENT_PIXELS per object color, shape classification by the
    bounding-box fill ratio (nearest target within +-FILL_BAND, else
    "unknown")."""
    resolution = image.shape[-1]
    labels = quantize_to_palette(image)
    found = []
    for color in range(len(PALETTE)):
        comp, n_comp = ndimage.label(labels == color)
        for comp_id in range(1, n_comp + 1):
            mask = comp == comp_id
            area = int(mask.sum())
            if area < MIN_COMPONENT_PIXELS:
                continue
            ys, xs = np.nonzero(mask)
            bbox = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
            fill = area / bbox
            shape, gap = min(
                ((name, abs(fill - target)) for name, target in FILL_TARGETS),
                key=lambda item: item[1],
            )
            if gap > FILL_BAND:
                shape = "unknown"
            found.append(
                DetectedObject(
                    shape=shape,
                    color=color,
                    x=float((xs.mean() + 0.5) / resolution),
                    y=float((ys.mean() + 0.5) / resolution),
                    r=_radius_from_area(shape, area, resolution),
                    area=area,
                    mask=mask,
                )
            )
    return found


def detection_class_masks(detections, resolution: int, background=True) -> dict:
    """Union mask per shape class (plus the leftover background)."""
    masks = {}
    covered = np.zeros((resolution, resolution), dtype=bool)
    for det in detections:
        covered |= det.mask
        if det.shape == "unknown":
            continue
        if det.shape not in masks:
            masks[det.shape] = np.zeros((resolution, resolution), dtype=bool)
        masks[det.shape] |= det.mask
    if background:
        masks["background"] = ~covered
    return masks


# -- chi-square scene statistics -------------------------------------------------

N_COLORS = len(PALETTE)
SIZE_BINS = 3
COUNT_BINS = 4
N_PAIR_BINS = N_COLORS * (N_COLORS + 1) // 2  # unordered color pairs


def _pair_bin(c1: int, c2: int) -> int:
    i, j = min(c1, c2), max(c1, c2)
    return i * N_COLORS - i * (i - 1) // 2 + (j - i)


def detection_statistics(per_image_detections) -> dict[str, np.ndarray]:
    """Histogram the detected scene factors.

    count: detections per image clamped into {1..4}; color: palette marginal;
    shape: known shapes only; size: equal-width radius bins on the sampling
    range; cooccurrence: unordered color pairs within an image."""
    count = np.zeros(COUNT_BINS)
    color = np.zeros(N_COLORS)
    shape = np.zeros(len(SHAPES))
    size = np.zeros(SIZE_BINS)
    pairs = np.zeros(N_PAIR_BINS)
    width = (RADIUS_MAX - RADIUS_MIN) / SIZE_BINS
    for dets in per_image_detections:
        count[int(np.clip(len(dets), 1, COUNT_BINS)) - 1] += 1
        for d in dets:
            color[d.color] += 1
            if d.shape in SHAPES:
                shape[SHAPES.index(d.shape)] += 1
            size_bin = int(np.clip((d.r - RADIUS_MIN) / width, 0, SIZE_BINS - 1))
            size[size_bin] += 1
        for i in range(len(dets)):
            for j in range(i + 1, len(dets)):
                pairs[_pair_bin(dets[i].color, dets[j].color)] += 1
    return {"count": count, "color": color, "shape": shape, "size": size,
            "cooccurrence": pairs}


def chi_square(observed: np.ndarray, expected: np.ndarray) -> float:
    """Pearson statistic sum (O - E)^2 / E over aligned bins."""
    observed = np.asarray(observed, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if observed.shape != expected.shape:
        raise ValueError(f"bin shapes differ: {observed.shape} vs {expected.shape}")
    if np.any(expected <= 0):
        raise ValueError("every expected count must be positive")
    return float(np.sum((observed - expected) ** 2 / expected))


def chi_square_report(stats: dict, reference: dict) -> dict:
    """Per-property chi-square of stats against reference proportions.

    The reference histogram is rescaled to each observed total. Properties
    with no observations (or an unusable reference) come out as None."""
    report = {}
    for name, observed in stats.items():
        ref = reference[name]
        total_obs, total_ref = observed.sum(), ref.sum()
        if total_obs <= 0 or np.any(ref <= 0):
            report[name] = None
            continue
        report[name] = chi_square(observed, ref * (total_obs / total_ref))
    return report


# -- embedding metrics -----------------------------------------------------------


class ImageEmbedder:
    """Fixed random conv net: 3 stride-2 3x3 layers, leaky ReLU, global
    average pool to `dim` features. Never trained; the seed defines it."""

    WIDTHS = (16, 32)

    def __init__(self, seed: int, resolution: int, dim: int = 64):
        if resolution < 8:
            raise ValueError(f"embedder needs images >= 8 px, got {resolution}")
        self.seed = seed
        self.dim = dim
        self.resolution = resolution
        rng = Xoshiro256StarStar(mix64(seed ^ 0x454D4245))
        widths = (3,) + self.WIDTHS + (dim,)
        self.kernels = []
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            scale = math.sqrt(2.0 / (c_in * 9))
            self.kernels.append(
                rng.normals((c_out, c_in, 3, 3), dtype=np.float32) * scale
            )

    @staticmethod
    def _conv_stride2(x: np.ndarray, w: np.ndarray) -> np.ndarray:
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        windows = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::2, ::2]
        return np.einsum("nchwij,ocij->nohw", windows, w, optimize=True)

    def embed(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """[N, 3, R, R] images in (-1, 1) -> [N, dim] float64 features."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[-1] != self.resolution:
            raise ValueError(
                f"expected [N, 3, {self.resolution}, {self.resolution}] images, "
                f"got {images.shape}"
            )
        feats = []
        for lo in range(0, images.shape[0], batch_size):
            x = images[lo : lo + batch_size]
            for kernel in self.kernels:
                x = self._conv_stride2(x, kernel)
                x = np.maximum(x, 0.2 * x)
            feats.append(x.mean(axis=(2, 3), dtype=np.float64))
        return np.concatenate(feats, axis=0)


def frechet_embed_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two embedding sets.

    |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)), with the cross term from
    the symmetric eigendecomposition of S2^(1/2) S1 S2^(1/2); negative
    eigenvalues are clamped to zero (warning if below -1e-6)."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    for name, f in (("first", a), ("second", b)):
        if f.ndim != 2:
            raise ValueError(f"{name} feature set must be 2-D, got {f.shape}")
        if f.shape[0] < f.shape[1] + 1:
            raise ValueError(
                f"{name} set needs at least dim+1 = {f.shape[1] + 1} points, has {f.shape[0]}"
            )
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))  # 1-D features give a 0-d cov
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))

    # order the cross term canonically so swapping arguments returns the
    # bit-identical value (the other terms are already exactly symmetric)
    if cov_b.tobytes() < cov_a.tobytes():
        cov_a, cov_b = cov_b, cov_a
    vals_b, vecs_b = np.linalg.eigh(cov_b)
    root_b = (vecs_b * np.sqrt(np.clip(vals_b, 0.0, None))) @ vecs_b.T
    inner = root_b @ cov_a @ root_b
    vals = np.linalg.eigh((inner + inner.T) / 2.0)[0]
    if vals.min() < -1e-6:
        warnings.warn(
            f"covariance product eigenvalues clamped from {vals.min():.3e}",
            RuntimeWarning,
            stacklevel=2,
        )
    cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)


def knn_precision_recall(real_feats, fake_feats, k: int = 3) -> tuple[float, float]:
    """Manifold membership: a point counts as covered when it falls inside
    some reference point's k-th-neighbor ball (self excluded)."""
    real = np.asarray(real_feats, dtype=np.float64)
    fake = np.asarray(fake_feats, dtype=np.float64)
    for name, f in (("real", real), ("fake", fake)):
        if f.shape[0] < k + 1:
            raise ValueError(f"{name} set needs at least k+1 = {k + 1} points, has {f.shape[0]}")

    def radii(points):
        d = np.linalg.norm(points[:, None] - points[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        return np.sort(d, axis=1)[:, k - 1]

    def covered(queries, manifold, manifold_radii):
        d = np.linalg.norm(queries[:, None] - manifold[None], axis=-1)
        return float(np.mean(np.any(d <= manifold_radii[None], axis=1)))

    precision = covered(fake, real, radii(real))
    recall = covered(real, fake, radii(fake))
    return precision, recall


# -- full report ------------------------------------------------------------------


def generated_attention_iou(gen: Generator, n_images: int, seed: int) -> dict:
    """Mean best-IoU per class between attention segments and detector masks
    over n_images generated samples (per class, over images where it occurs)."""
    rng = Xoshiro256StarStar(mix64(seed ^ 0x494F55))
    zdim = gen.config.k * gen.config.latent_dim
    cfg = gen.config
    levels = cfg.attention_levels()
    shapes = [(cfg.base_resolution << l, cfg.base_resolution << l) for l in levels]
    totals: dict[str, list] = {}
    for _ in range(n_images):
        z = rng.normals((1, zdim), dtype=np.float32)
        with eng.no_grad():
            image, weights = gen.forward(Tensor(z))
        layer_weights = [weights[l].data[0] for l in levels]
        detections = detect_objects(image.data[0])
        masks = detection_class_masks(detections, cfg.resolution)
        scores = attention_segment_iou(layer_weights, shapes, masks)
        for name, value in scores.items():
            totals.setdefault(name, []).append(value)
    return {name: float(np.mean(vals)) for name, vals in totals.items()}


def full_report(
    gen: Generator,
    real_images: np.ndarray,
    n_samples: int = 1000,
    embedder_seed: int = 17,
    seed: int = 0,
    iou_samples: int = 200,
) -> dict:
    """The metrics document: embedding distances, detection statistics, and
    attention IoU, all from freshly drawn generator samples."""
    resolution = real_images.shape[-1]
    n_real = min(n_samples, real_images.shape[0])
    real = real_images[:n_real]
    fake = sample_images(gen, n_samples, seed)

    embedder = ImageEmbedder(embedder_seed, resolution)
    real_feats = embedder.embed(real)
    fake_feats = embedder.embed(fake)
    fed = frechet_embed_distance(real_feats, fake_feats)
    precision, recall = knn_precision_recall(real_feats, fake_feats)

    real_stats = detection_statistics([detect_objects(img) for img in real])
    fake_stats = detection_statistics([detect_objects(img) for img in fake])
    chi2 = chi_square_report(fake_stats, real_stats)

    iou = generated_attention_iou(gen, iou_samples, seed)
    for key in ("circle", "square", "triangle", "background"):
        iou.setdefault(key, None)

    return {
        "fed": fed,
        "precision": precision,
        "recall": recall,
        "chi2": chi2,
        "iou": iou,
        "n_samples": int(n_samples),
        "embedder_seed": int(embedder_seed),
    }
