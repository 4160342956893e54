"""Deterministic synthetic multi-object scenes with exact ground truth.

Scenes hold 1-4 flat-colored shapes (circle, square, triangle) on a gray
background. Factors (count, shape, color, size, position) are drawn uniformly
subject to a no-overlap constraint, so expected statistics are known exactly;
rendering is hard-edged, so color and shape detection on clean renders can be
exact. Every scene derives from a single 64-bit dataset seed.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import imageio
from .rng import SplitMix64, mix64

SHAPES = ("circle", "square", "triangle")

# 8 well-separated object colors plus the background gray.
PALETTE = np.array(
    [
        (230, 25, 75),  # red
        (60, 180, 75),  # green
        (0, 130, 200),  # blue
        (255, 225, 25),  # yellow
        (145, 30, 180),  # purple
        (70, 240, 240),  # cyan
        (245, 130, 48),  # orange
        (240, 50, 230),  # magenta
    ],
    dtype=np.uint8,
)
BACKGROUND = np.array((200, 200, 200), dtype=np.uint8)

RADIUS_MIN, RADIUS_MAX = 0.08, 0.2
MAX_OBJECTS = 4
PLACEMENT_ATTEMPTS = 1000


@dataclass
class SceneObject:
    shape: str  # circle | square | triangle
    color: int  # palette index
    x: float  # center, unit coordinates (x right, y down)
    y: float
    r: float  # circumradius; every shape is inscribed in this disc


@dataclass
class SceneSpec:
    objects: list[SceneObject]


def sample_scene(rng: SplitMix64) -> SceneSpec:
    """Draw factors uniformly; rejection-sample positions so objects never
    overlap (pairwise center distance >= r_i + r_j and full extent inside the
    unit square). After 1000 failed placement attempts the object count drops
    by one and placement restarts, which guarantees termination."""
    count = 1 + rng.randint(MAX_OBJECTS)
    while True:
        objects = _try_place(count, rng)
        if objects is not None:
            return SceneSpec(objects)
        count -= 1


def _try_place(count: int, rng: SplitMix64) -> list[SceneObject] | None:
    objects: list[SceneObject] = []
    attempts = 0
    while len(objects) < count:
        if attempts >= PLACEMENT_ATTEMPTS:
            return None
        attempts += 1
        # per-object draw order: shape, color, r, x, y
        shape = SHAPES[rng.randint(len(SHAPES))]
        color = rng.randint(len(PALETTE))
        r = rng.uniform_in(RADIUS_MIN, RADIUS_MAX)
        x = rng.uniform_in(r, 1.0 - r)
        y = rng.uniform_in(r, 1.0 - r)
        if all(math.hypot(x - o.x, y - o.y) >= r + o.r for o in objects):
            objects.append(SceneObject(shape, color, x, y, r))
    return objects


def _inside(obj: SceneObject, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Boolean mask of pixel centers inside the shape."""
    dx = xs - obj.x
    dy = ys - obj.y
    if obj.shape == "circle":
        return dx * dx + dy * dy <= obj.r * obj.r
    if obj.shape == "square":
        half = obj.r / math.sqrt(2.0)  # half-side; circumradius is the half-diagonal
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    # equilateral triangle, apex up (negative y), circumradius r
    r = obj.r
    verts = [
        (0.0, -r),
        (-r * math.sqrt(3.0) / 2.0, r / 2.0),
        (r * math.sqrt(3.0) / 2.0, r / 2.0),
    ]
    inside = np.ones_like(dx, dtype=bool)
    for i in range(3):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % 3]
        # vertices wind counter-clockwise in (x right, y down) coords, so
        # interior points sit on the non-positive side of each cross product
        cross = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax)
        inside &= cross <= 0.0
    return inside


@dataclass
class RenderedScene:
    image: np.ndarray  # [3, R, R] float32 in (-1, 1)
    masks: list[np.ndarray]  # one boolean [R, R] mask per object
    background: np.ndarray  # boolean [R, R]


def render_scene(spec: SceneSpec, resolution: int) -> RenderedScene:
    """Hard-edge flat-color rasterization; later objects draw over earlier
    ones and masks record the final visibility partition."""
    if resolution < 16:
        raise ValueError(f"resolution must be >= 16, got {resolution}")
    centers = (np.arange(resolution) + 0.5) / resolution
    ys, xs = np.meshgrid(centers, centers, indexing="ij")
    owner = np.full((resolution, resolution), -1, dtype=np.int32)
    for i, obj in enumerate(spec.objects):
        owner[_inside(obj, xs, ys)] = i
    colors = np.array([PALETTE[o.color] for o in spec.objects] + [BACKGROUND], dtype=np.uint8)
    rgb = colors[owner]  # [R, R, 3] uint8; owner -1 hits the background row
    image = imageio.dequantize(rgb.transpose(2, 0, 1))
    masks = [owner == i for i in range(len(spec.objects))]
    return RenderedScene(image, masks, owner == -1)


def scene_seed(dataset_seed: int, index: int) -> int:
    return mix64(dataset_seed ^ mix64(index + 1))


def scene_for_index(dataset_seed: int, index: int) -> SceneSpec:
    return sample_scene(SplitMix64(scene_seed(dataset_seed, index)))


def manifest_line(index: int, spec: SceneSpec) -> str:
    fields = [str(index), str(len(spec.objects))]
    for o in spec.objects:
        fields.append(f"{o.shape},{o.color},{o.x:.6f},{o.y:.6f},{o.r:.6f}")
    return "\t".join(fields)


def parse_manifest(path: str) -> list[SceneSpec]:
    """Read a manifest back into factor records (positions at 6 decimals)."""
    specs = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            count = int(fields[1])
            objects = []
            for cell in fields[2 : 2 + count]:
                shape, color, x, y, r = cell.split(",")
                objects.append(SceneObject(shape, int(color), float(x), float(y), float(r)))
            specs.append(SceneSpec(objects))
    return specs


def generate_dataset(n: int, seed: int, out_dir: str, resolution: int = 32) -> str:
    """Render n scenes to PPM files plus a manifest; returns the manifest path.

    Files: scene{index:05d}.ppm and manifest.tsv under out_dir. Scene i
    depends only on (seed, i), so a prefix of a larger dataset equals the
    smaller dataset (data-efficiency sweeps can subset by prefix).
    """
    imageio.ensure_dir(out_dir)
    lines = []
    for i in range(n):
        spec = scene_for_index(seed, i)
        rendered = render_scene(spec, resolution)
        imageio.save_ppm(os.path.join(out_dir, f"scene{i:05d}.ppm"), rendered.image)
        lines.append(manifest_line(i, spec))
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    with open(manifest_path, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")
    return manifest_path


def load_dataset_images(dataset_dir: str) -> np.ndarray:
    """Load every scene*.ppm in index order into one [N, 3, R, R] array."""
    names = sorted(
        f for f in os.listdir(dataset_dir) if f.startswith("scene") and f.endswith(".ppm")
    )
    if not names:
        raise ValueError(f"no scene*.ppm files in {dataset_dir}")
    return np.stack([imageio.load_ppm(os.path.join(dataset_dir, f)) for f in names])


def render_dataset_array(n: int, seed: int, resolution: int = 32) -> np.ndarray:
    """In-memory equivalent of generate_dataset + load_dataset_images."""
    return np.stack(
        [render_scene(scene_for_index(seed, i), resolution).image for i in range(n)]
    )
