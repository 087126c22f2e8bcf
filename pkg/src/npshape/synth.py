"""Procedural generator of SEM-like grayscale scenes with exact ground truth.

Shapes are rasterized with stylized shading (class-separable geometry, not
physical rendering), placed without overlap unless allowed, then the scene
gets Gaussian blur and noise. Masks are captured pre-noise, so they are
exact; synthetic confidence metadata is pinned at 1.0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import PlacementError, ValidationError
from .mask_io import MaskRecord, write_mask_manifest

CLASSES = ("cube", "pyramid", "triangle", "truncated_triangle", "circle", "dot", "blob")

# dots are small by design; everything else clears the default 500 px floor
MIN_AREA = {"dot": 300}
DEFAULT_MIN_AREA = 500

BACKGROUND_LEVEL = 25.0


@dataclass
class SynthSpec:
    seed: int
    canvas: tuple = (768, 768)
    counts: dict = field(default_factory=dict)   # class -> shape count
    size_range: tuple = (48, 88)
    overlap_allowed: bool = False
    noise_sigma: float = 6.0
    blur_sigma: float = 1.0
    dot_diameter: float = 30.0
    dot_jitter: float = 0.15
    min_gap: int = 3

    def __post_init__(self):
        unknown = set(self.counts) - set(CLASSES)
        if unknown:
            raise ValidationError(f"unknown shape classes {sorted(unknown)}")
        if any(v < 0 for v in self.counts.values()):
            raise ValidationError("shape counts must be >= 0")
        h, w = self.canvas
        if self.size_range[1] + 2 * self.min_gap >= min(h, w):
            raise ValidationError("shapes do not fit the canvas")


@dataclass
class SynthScene:
    image: np.ndarray            # uint8 H x W
    masks: list                  # MaskRecord, predicted_iou = stability = 1.0
    labels: dict                 # mask id -> class


def _polygon_mask(vertices, shape):
    """Rasterize a convex polygon (vertices (y, x), counterclockwise)."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    inside = np.ones((h, w), dtype=bool)
    n = len(vertices)
    for i in range(n):
        y0, x0 = vertices[i]
        y1, x1 = vertices[(i + 1) % n]
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        inside &= cross >= 0
    return inside


def _ccw(vertices):
    area = 0.0
    n = len(vertices)
    for i in range(n):
        y0, x0 = vertices[i]
        y1, x1 = vertices[(i + 1) % n]
        area += x0 * y1 - x1 * y0
    return vertices if area >= 0 else vertices[::-1]


def _regular_vertices(n_sides, radius, rotation, center):
    cy, cx = center
    return [(cy + radius * math.sin(rotation + 2 * math.pi * k / n_sides),
             cx + radius * math.cos(rotation + 2 * math.pi * k / n_sides))
            for k in range(n_sides)]


def _shade_flat(mask, base, grad_angle, grad_span, shape):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    u = (yy - h / 2) * math.sin(grad_angle) + (xx - w / 2) * math.cos(grad_angle)
    span = max(np.abs(u[mask]).max(), 1.0) if mask.any() else 1.0
    return base + grad_span * u / span


def _render_shape(cls, size, rng):
    """Build one shape's local (mask, intensity) patch. Deterministic per rng state."""
    pad = 4
    side = int(math.ceil(size)) + 2 * pad
    center = (side / 2.0, side / 2.0)
    rotation = rng.uniform(0, 2 * math.pi)
    base = rng.uniform(150, 225)
    yy, xx = np.mgrid[0:side, 0:side]

    if cls == "cube":
        radius = size / math.sqrt(2.0)
        verts = _ccw(_regular_vertices(4, radius, rotation, center))
        mask = _polygon_mask(verts, (side, side))
        # two "3-D" faces split along the rotated midline, each with a gradient
        u = (yy - center[0]) * math.sin(rotation) + (xx - center[1]) * math.cos(rotation)
        tone = np.where(u < 0, base, base * 0.72)
        tone = tone + 14.0 * u / max(1.0, np.abs(u[mask]).max() if mask.any() else 1.0)
    elif cls == "pyramid":
        radius = size / 2.0
        verts = _ccw(_regular_vertices(3, radius, rotation, center))
        mask = _polygon_mask(verts, (side, side))
        # three faces meeting at the apex, shaded by angular sector
        ang = np.arctan2(yy - center[0], xx - center[1]) - rotation
        sector = np.floor((ang % (2 * math.pi)) / (2 * math.pi / 3)).astype(int) % 3
        tone = base * np.take(np.array([1.0, 0.84, 0.68]), sector)
    elif cls in ("triangle", "truncated_triangle"):
        radius = size / 2.0
        jit_r = rng.uniform(0.92, 1.08, size=3)
        jit_a = rng.uniform(-0.1, 0.1, size=3)
        verts = [(center[0] + radius * jit_r[k] * math.sin(rotation + jit_a[k] + 2 * math.pi * k / 3),
                  center[1] + radius * jit_r[k] * math.cos(rotation + jit_a[k] + 2 * math.pi * k / 3))
                 for k in range(3)]
        if cls == "truncated_triangle":
            f = rng.uniform(0.15, 0.30)
            cut = []
            for k in range(3):
                a = np.array(verts[k])
                bpt = np.array(verts[(k + 1) % 3])
                cut.append(tuple(a + f * (bpt - a)))
                cut.append(tuple(bpt - f * (bpt - a)))
            verts = cut
        verts = _ccw(verts)
        mask = _polygon_mask(verts, (side, side))
        tone = _shade_flat(mask, base, rotation, 9.0, (side, side))
    elif cls in ("circle", "dot"):
        radius = size / 2.0
        rr = np.sqrt((yy - center[0]) ** 2 + (xx - center[1]) ** 2)
        mask = rr <= radius
        if cls == "circle":
            tone = base * (1.0 - 0.12 * (rr / radius) ** 2)
        else:
            tone = np.full((side, side), min(250.0, base + 30.0))
    elif cls == "blob":
        r0 = size / 2.0 * 0.9
        amps = rng.uniform(0.05, 0.15, size=4)
        phases = rng.uniform(0, 2 * math.pi, size=4)
        rr = np.sqrt((yy - center[0]) ** 2 + (xx - center[1]) ** 2)
        ang = np.arctan2(yy - center[0], xx - center[1])
        radius = r0 * (1.0 + sum(a * np.cos((k + 2) * ang + p)
                                 for k, (a, p) in enumerate(zip(amps, phases))))
        mask = rr <= radius
        tone = np.full((side, side), base * 0.85)
    else:
        raise ValidationError(f"unknown shape class {cls!r}")
    return mask, np.clip(tone, 0, 255)


def _shape_size(cls, spec: SynthSpec, rng) -> float:
    if cls == "dot":
        return spec.dot_diameter * rng.uniform(1 - spec.dot_jitter, 1 + spec.dot_jitter)
    return rng.uniform(*spec.size_range)


def generate_scene(spec: SynthSpec, id_prefix: str = "m") -> SynthScene:
    """Rasterize one scene; bitwise deterministic for a given spec."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.canvas
    image = np.full((h, w), BACKGROUND_LEVEL, dtype=np.float64)
    occupied = np.zeros((h, w), dtype=bool)
    masks = []
    labels = {}
    idx = 0
    for cls in CLASSES:
        for _ in range(spec.counts.get(cls, 0)):
            placed = False
            for _attempt in range(1000):
                size = _shape_size(cls, spec, rng)
                patch_mask, patch_tone = _render_shape(cls, size, rng)
                ph, pw = patch_mask.shape
                if patch_mask.sum() < MIN_AREA.get(cls, DEFAULT_MIN_AREA):
                    continue
                r0 = rng.integers(0, h - ph + 1)
                c0 = rng.integers(0, w - pw + 1)
                win = (slice(r0, r0 + ph), slice(c0, c0 + pw))
                if not spec.overlap_allowed:
                    grown = ndimage.binary_dilation(patch_mask, iterations=spec.min_gap) \
                        if spec.min_gap else patch_mask
                    if (occupied[win] & grown).any():
                        continue
                full = np.zeros((h, w), dtype=bool)
                full[win] = patch_mask
                image[win][patch_mask] = patch_tone[patch_mask]
                occupied[win] |= patch_mask
                mid = f"{id_prefix}{idx:03d}"
                masks.append(MaskRecord.from_mask(mid, "", full, 1.0, 1.0))
                labels[mid] = cls
                idx += 1
                placed = True
                break
            if not placed:
                raise PlacementError(
                    f"could not place {cls!r} #{idx} after 1000 attempts "
                    f"(canvas {h}x{w}, overlap_allowed={spec.overlap_allowed})")
    if spec.blur_sigma > 0:
        image = ndimage.gaussian_filter(image, spec.blur_sigma)
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return SynthScene(image=np.clip(np.rint(image), 0, 255).astype(np.uint8),
                      masks=masks, labels=labels)


def _chunk_counts(counts: dict, max_per_scene: int):
    """Split per-class counts into per-scene count dicts of bounded size."""
    total = sum(counts.values())
    if total == 0:
        return []
    n_scenes = max(1, math.ceil(total / max_per_scene))
    scenes = [dict() for _ in range(n_scenes)]
    slot = 0
    for cls in CLASSES:
        for _ in range(counts.get(cls, 0)):
            scene = scenes[slot % n_scenes]
            scene[cls] = scene.get(cls, 0) + 1
            slot += 1
    return [s for s in scenes if s]


def export_dataset(out_dir, split_counts: dict, seed: int = 0,
                   canvas=(768, 768), size_range=(48, 88),
                   noise_sigma: float = 6.0, blur_sigma: float = 1.0,
                   dot_diameter: float = 30.0, max_per_scene: int = 20) -> dict:
    """Write a train/validation/test dataset honoring exact per-class counts.

    `split_counts` maps split name -> {class: count}. Every split gets its
    own scenes; ids carry the split and scene, so splits are disjoint by id.
    Returns the dataset manifest (also written as dataset.json).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": seed, "canvas": list(canvas), "splits": {}}
    split_order = [s for s in ("train", "validation", "test") if s in split_counts]
    for si, split in enumerate(split_order):
        counts = split_counts[split]
        scene_dicts = _chunk_counts(counts, max_per_scene)
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        labels = {}
        scene_entries = []
        for k, scene_counts in enumerate(scene_dicts):
            scene_id = f"{split}-s{k:02d}"
            spec = SynthSpec(seed=seed * 10007 + si * 1009 + k,
                             canvas=canvas, counts=scene_counts,
                             size_range=size_range, noise_sigma=noise_sigma,
                             blur_sigma=blur_sigma, dot_diameter=dot_diameter)
            scene = generate_scene(spec, id_prefix=f"{scene_id}-m")
            img_path = split_dir / f"{scene_id}.png"
            Image.fromarray(scene.image).save(img_path)
            for rec in scene.masks:
                rec.source_image_id = scene_id
            write_mask_manifest(scene.masks, split_dir / f"{scene_id}_masks",
                                source_image=scene_id)
            labels.update(scene.labels)
            scene_entries.append({"id": scene_id, "image": img_path.name,
                                  "masks": f"{scene_id}_masks",
                                  "counts": scene_counts})
        (split_dir / "labels.json").write_text(json.dumps(labels, indent=1, sort_keys=True))
        realized = {}
        for cls in labels.values():
            realized[cls] = realized.get(cls, 0) + 1
        if realized != {c: n for c, n in counts.items() if n > 0}:
            raise ValidationError(
                f"{split}: realized counts {realized} differ from requested {counts}")
        manifest["splits"][split] = {"classes": dict(counts), "scenes": scene_entries}
    (out_dir / "dataset.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest
