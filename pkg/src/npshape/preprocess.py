"""Crop standardization to the backbone input size and data-driven pipeline selection.

Five candidate pipelines are supported; the best one is picked by embedding
the training crops under each candidate and maximizing the average Euclidean
distance between class centroids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .mask_io import ParticleCrop

# Declaration order doubles as the tie-break order in selection.
PIPELINES = (
    "stretch_resize",
    "pad_square_resize",
    "center_canvas",
    "masked_pad_resize",
    "binary_mask_pad_resize",
)

# Crop variant each pipeline consumes.
PIPELINE_VARIANT = {
    "stretch_resize": "raw_crop",
    "pad_square_resize": "raw_crop",
    "center_canvas": "raw_crop",
    "masked_pad_resize": "background_removed",
    "binary_mask_pad_resize": "binary_mask",
}


@dataclass
class PreprocSpec:
    pipeline: str
    target_side: int = 224
    pad_value: int = 0

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValidationError(f"unknown pipeline {self.pipeline!r}")
        if self.target_side <= 0:
            raise ValidationError("target_side must be positive")
        if not (0 <= self.pad_value <= 255):
            raise ValidationError("pad_value must be an 8-bit intensity")

    @property
    def tag(self) -> str:
        return f"{self.pipeline}/{self.target_side}/{self.pad_value}"


@dataclass
class PreprocSelectionReport:
    distances: dict  # pipeline tag -> average inter-centroid distance
    chosen: PreprocSpec


def default_candidates(target_side: int = 224, pad_value: int = 0):
    return [PreprocSpec(p, target_side, pad_value) for p in PIPELINES]


def bilinear_resize(img, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resampling, half-pixel centers, no antialias filter.

    Output pixel (r, c) samples the input at ((r+0.5)*sh-0.5, (c+0.5)*sw-0.5)
    with edge clamping; values are rounded to the nearest intensity level.
    """
    img = np.asarray(img, dtype=np.float64)
    in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return np.rint(img).clip(0, 255).astype(np.uint8)
    sr = in_h / out_h
    sc = in_w / out_w
    r = (np.arange(out_h) + 0.5) * sr - 0.5
    c = (np.arange(out_w) + 0.5) * sc - 0.5
    r0 = np.clip(np.floor(r), 0, in_h - 1).astype(int)
    c0 = np.clip(np.floor(c), 0, in_w - 1).astype(int)
    r1 = np.clip(r0 + 1, 0, in_h - 1)
    c1 = np.clip(c0 + 1, 0, in_w - 1)
    fr = np.clip(r - r0, 0.0, 1.0)[:, None]
    fc = np.clip(c - c0, 0.0, 1.0)[None, :]
    top = img[np.ix_(r0, c0)] * (1 - fc) + img[np.ix_(r0, c1)] * fc
    bot = img[np.ix_(r1, c0)] * (1 - fc) + img[np.ix_(r1, c1)] * fc
    out = top * (1 - fr) + bot * fr
    return np.rint(out).clip(0, 255).astype(np.uint8)


def pad_to_square(img, pad_value: int = 0) -> np.ndarray:
    """Pad the shorter dimension symmetrically (extra pixel goes after)."""
    h, w = img.shape
    side = max(h, w)
    out = np.full((side, side), pad_value, dtype=np.uint8)
    r0 = (side - h) // 2
    c0 = (side - w) // 2
    out[r0:r0 + h, c0:c0 + w] = img
    return out


def apply_preproc(crop: ParticleCrop, spec: PreprocSpec) -> np.ndarray:
    """Standardize one crop to a target_side x target_side uint8 raster."""
    px = crop.pixels
    if px.size == 0:
        raise ValidationError(f"crop {crop.mask_id!r} is empty")
    needed = PIPELINE_VARIANT[spec.pipeline]
    if needed != "raw_crop" and crop.variant != needed:
        raise ValidationError(
            f"pipeline {spec.pipeline!r} needs the {needed!r} crop variant, "
            f"got {crop.variant!r}")
    side = spec.target_side
    if spec.pipeline == "stretch_resize":
        return bilinear_resize(px, side, side)
    if spec.pipeline == "center_canvas":
        h, w = px.shape
        if h <= side and w <= side:
            out = np.full((side, side), spec.pad_value, dtype=np.uint8)
            r0 = (side - h) // 2
            c0 = (side - w) // 2
            out[r0:r0 + h, c0:c0 + w] = px
            return out
        # too large to place unscaled; fall through to pad-then-resize
    return bilinear_resize(pad_to_square(px, spec.pad_value), side, side)


def _fcolumn_mean(X: np.ndarray) -> np.ndarray:
    # fsum per column: exactly rounded, hence invariant to row order
    n = X.shape[0]
    return np.array([math.fsum(X[:, j]) / n for j in range(X.shape[1])])


def class_centroids(X, y):
    """Mean embedding per class. X is N x D, y gives one label per row."""
    X = np.asarray(X, dtype=np.float64)
    y = list(y)
    if X.shape[0] != len(y):
        raise ValidationError(f"{X.shape[0]} rows but {len(y)} labels")
    out = {}
    for cls in sorted(set(y)):
        idx = [i for i, lab in enumerate(y) if lab == cls]
        if not idx:
            raise ValidationError(f"class {cls!r} has no rows")
        out[cls] = _fcolumn_mean(X[idx])
    return out


def avg_centroid_distance(centroids: dict) -> float:
    """Mean Euclidean distance over all unordered centroid pairs."""
    keys = sorted(centroids)
    if len(keys) < 2:
        raise ValidationError("need at least 2 classes to compare centroids")
    dists = []
    for i in range(len(keys)):
        for j in range(i + 1, len(keys)):
            d = centroids[keys[i]] - centroids[keys[j]]
            dists.append(math.sqrt(math.fsum(d * d)))
    return math.fsum(dists) / len(dists)


def l2_normalize_rows(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.sqrt((X * X).sum(axis=1, keepdims=True))
    norms[norms == 0] = 1.0
    return X / norms


def select_preproc(bundles, labels, candidates, provider,
                   l2_normalize: bool = False) -> PreprocSelectionReport:
    """Pick the candidate pipeline maximizing average inter-centroid distance.

    `bundles` maps each training particle to its crop variants
    (dict variant -> ParticleCrop, as produced by mask_io.crop_variants);
    `provider` embeds standardized rasters (embed.embed_batch signature).
    Distances are compared after rounding to 1e-9; ties go to the earliest
    candidate in PIPELINES order.
    """
    from .embed import embed_batch  # late import: embed depends on preprocess specs

    labels = list(labels)
    if len(set(labels)) < 2:
        raise ValidationError("preprocessing selection needs >= 2 classes")
    if not candidates:
        raise ValidationError("no candidate pipelines given")

    distances = {}
    order = sorted(candidates, key=lambda s: PIPELINES.index(s.pipeline))
    for spec in order:
        variant = PIPELINE_VARIANT[spec.pipeline]
        rasters = [apply_preproc(b[variant], spec) for b in bundles]
        mat = embed_batch(rasters, provider)
        rows = l2_normalize_rows(mat.rows) if l2_normalize else mat.rows
        distances[spec.tag] = avg_centroid_distance(class_centroids(rows, labels))

    best = order[0]
    for spec in order[1:]:
        if round(distances[spec.tag], 9) > round(distances[best.tag], 9):
            best = spec
    return PreprocSelectionReport(distances=distances, chosen=best)
