"""Segmentation-mask records: validation, filtering, bounding boxes, crops, and disk formats.

Masks arrive from an upstream segmenter as a directory of PNG rasters (or
uncompressed RLE entries) plus a ``masks.json`` manifest carrying per-mask
confidence metadata. Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import EmptyMaskError, FileFormatError, ValidationError

CROP_VARIANTS = ("raw_crop", "background_removed", "binary_mask")

MANIFEST_NAME = "masks.json"


@dataclass
class FilterThresholds:
    """Retention thresholds for segmentation masks."""

    min_predicted_iou: float = 0.95
    min_stability: float = 0.95
    min_area_px: int = 500

    def __post_init__(self):
        for name in ("min_predicted_iou", "min_stability"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValidationError(f"{name} must be finite, got {v}")
        if self.min_area_px < 0:
            raise ValidationError(f"min_area_px must be >= 0, got {self.min_area_px}")


@dataclass
class BoundingBox:
    """Inclusive pixel-index box (row_min, col_min) .. (row_max, col_max)."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValidationError(f"degenerate bounding box {self.astuple()}")

    def astuple(self):
        return (self.row_min, self.col_min, self.row_max, self.col_max)

    @property
    def height(self) -> int:
        return self.row_max - self.row_min + 1

    @property
    def width(self) -> int:
        return self.col_max - self.col_min + 1


@dataclass
class MaskRecord:
    """One binary segmentation mask plus the segmenter's confidence metadata."""

    id: str
    source_image_id: str
    mask: np.ndarray  # bool, H x W
    predicted_iou: float
    stability_score: float
    area_px: int

    @classmethod
    def from_mask(cls, id, source_image_id, mask, predicted_iou, stability_score):
        mask = np.asarray(mask, dtype=bool)
        return cls(id, source_image_id, mask, float(predicted_iou),
                   float(stability_score), int(mask.sum()))

    def validate(self):
        if self.mask.ndim != 2 or self.mask.dtype != np.bool_:
            raise ValidationError(f"mask {self.id!r}: raster must be 2-D boolean")
        actual = int(self.mask.sum())
        if actual != self.area_px:
            raise ValidationError(
                f"mask {self.id!r}: area_px={self.area_px} but raster has "
                f"{actual} foreground pixels")
        for name in ("predicted_iou", "stability_score"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"mask {self.id!r}: {name}={v} outside [0, 1]")


@dataclass
class ParticleCrop:
    """A particle cut out at its mask's bounding box."""

    mask_id: str
    pixels: np.ndarray  # uint8, h x w
    bbox: BoundingBox
    variant: str

    def __post_init__(self):
        if self.variant not in CROP_VARIANTS:
            raise ValidationError(f"unknown crop variant {self.variant!r}")


def filter_masks(records, thresholds: FilterThresholds | None = None):
    """Keep records meeting all three thresholds, preserving input order.

    Raises ValidationError (naming the offending id) if any record is
    internally inconsistent.
    """
    t = thresholds or FilterThresholds()
    for r in records:
        r.validate()
    return [r for r in records
            if r.predicted_iou >= t.min_predicted_iou
            and r.stability_score >= t.min_stability
            and r.area_px >= t.min_area_px]


def bbox_from_mask(mask) -> BoundingBox:
    """Tightest axis-aligned box containing every foreground pixel."""
    mask = np.asarray(mask, dtype=bool)
    rows = mask.any(axis=1)
    cols = mask.any(axis=0)
    if not rows.any():
        raise EmptyMaskError("mask has no foreground pixels")
    rmin, rmax = np.flatnonzero(rows)[[0, -1]]
    cmin, cmax = np.flatnonzero(cols)[[0, -1]]
    return BoundingBox(int(rmin), int(cmin), int(rmax), int(cmax))


def expand_bbox(box: BoundingBox, margin: int, image_shape) -> BoundingBox:
    """Grow a box by `margin` pixels on every side, clamped to image bounds."""
    h, w = image_shape[:2]
    return BoundingBox(max(0, box.row_min - margin), max(0, box.col_min - margin),
                       min(h - 1, box.row_max + margin), min(w - 1, box.col_max + margin))


def crop_particle(image, record: MaskRecord, variant: str = "raw_crop",
                  margin: int = 0) -> ParticleCrop:
    """Crop one particle out of `image` at its mask's bounding box.

    raw_crop copies the image pixels, background_removed zeroes everything
    outside the mask footprint, binary_mask emits the mask itself as 0/255.
    """
    image = np.asarray(image)
    if image.shape[:2] != record.mask.shape:
        raise ValidationError(
            f"mask {record.id!r}: image shape {image.shape[:2]} does not match "
            f"mask shape {record.mask.shape}")
    if variant not in CROP_VARIANTS:
        raise ValidationError(f"unknown crop variant {variant!r}")
    box = bbox_from_mask(record.mask)
    if margin:
        box = expand_bbox(box, int(margin), image.shape)
    win = (slice(box.row_min, box.row_max + 1), slice(box.col_min, box.col_max + 1))
    sub_mask = record.mask[win]
    if variant == "raw_crop":
        pixels = image[win].astype(np.uint8, copy=True)
    elif variant == "background_removed":
        pixels = np.where(sub_mask, image[win], 0).astype(np.uint8)
    else:
        pixels = (sub_mask.astype(np.uint8)) * 255
    return ParticleCrop(record.id, pixels, box, variant)


def crop_variants(image, record: MaskRecord, margin: int = 0):
    """All three crop variants of one particle, keyed by variant name."""
    return {v: crop_particle(image, record, v, margin) for v in CROP_VARIANTS}


def split_components(record: MaskRecord):
    """Split a multi-component mask into one record per connected component.

    Single-component masks come back as a one-element list holding the
    original record. Components are 8-connected; ids get a ``_cNN`` suffix
    in scan order.
    """
    labels, n = ndimage.label(record.mask, structure=np.ones((3, 3), dtype=int))
    if n <= 1:
        return [record]
    return [MaskRecord.from_mask(f"{record.id}_c{k:02d}", record.source_image_id,
                                 labels == k + 1, record.predicted_iou,
                                 record.stability_score)
            for k in range(n)]


def touches_border(record: MaskRecord) -> bool:
    box = bbox_from_mask(record.mask)
    h, w = record.mask.shape
    return box.row_min == 0 or box.col_min == 0 or box.row_max == h - 1 or box.col_max == w - 1


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def find_overlaps(records, threshold: float = 0.8):
    """Pairs of record ids whose masks overlap with IoU above `threshold`.

    Retained masks are never deduplicated; overlaps are only reported so
    downstream reports can flag them.
    """
    out = []
    for i in range(len(records)):
        for j in range(i + 1, len(records)):
            iou = mask_iou(records[i].mask, records[j].mask)
            if iou > threshold:
                out.append((records[i].id, records[j].id, iou))
    return out


def load_grayscale(path) -> np.ndarray:
    """Load an image as 8-bit grayscale.

    16-bit inputs are linearly rescaled to 8-bit with a per-image min-max;
    RGB inputs are converted with the standard luma weights.
    """
    img = Image.open(path)
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img, dtype=np.float64)
        lo, hi = arr.min(), arr.max()
        if hi > lo:
            arr = (arr - lo) / (hi - lo) * 255.0
        else:
            arr = np.zeros_like(arr)
        return np.rint(arr).astype(np.uint8)
    return np.asarray(img.convert("L"), dtype=np.uint8)


def rle_encode(mask) -> dict:
    """Uncompressed row-major RLE, first count covering background."""
    mask = np.asarray(mask, dtype=bool)
    flat = mask.reshape(-1)
    counts = []
    run_val = False  # RLE starts with a background run (may have length 0)
    run_len = 0
    for v in flat:
        if v == run_val:
            run_len += 1
        else:
            counts.append(run_len)
            run_val = v
            run_len = 1
    counts.append(run_len)
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    try:
        h, w = rle["size"]
        counts = rle["counts"]
    except (KeyError, TypeError, ValueError) as e:
        raise FileFormatError(f"malformed RLE entry: {e}")
    total = sum(counts)
    if total != h * w:
        raise FileFormatError(
            f"RLE counts sum to {total}, expected {h}x{w}={h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    val = False
    for c in counts:
        if val:
            flat[pos:pos + c] = True
        pos += c
        val = not val
    return flat.reshape(h, w)


def write_mask_manifest(records, out_dir, source_image: str = "",
                        rle: bool = False) -> Path:
    """Write records to `out_dir` in the on-disk mask format.

    PNG mode stores each mask as a 0/255 raster named ``<id>.png``; RLE mode
    inlines uncompressed run lengths in the manifest. Round-trips bit-exact
    through read_mask_manifest either way.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for r in records:
        r.validate()
        entry = {"id": r.id, "predicted_iou": r.predicted_iou,
                 "stability_score": r.stability_score, "area": r.area_px}
        if rle:
            entry["rle"] = rle_encode(r.mask)
        else:
            fname = f"{r.id}.png"
            Image.fromarray(r.mask.astype(np.uint8) * 255).save(out_dir / fname)
            entry["file"] = fname
        entries.append(entry)
    manifest = {"source_image": source_image or (records[0].source_image_id if records else ""),
                "masks": entries}
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def decode_mask_entry(entry: dict, base_dir, source_image: str) -> MaskRecord:
    """Decode one manifest entry; recomputes area and checks it against metadata."""
    try:
        mid = entry["id"]
        iou = float(entry["predicted_iou"])
        stab = float(entry["stability_score"])
    except (KeyError, TypeError, ValueError) as e:
        raise FileFormatError(f"malformed manifest entry: {e}")
    if "rle" in entry:
        mask = rle_decode(entry["rle"])
    elif "file" in entry:
        png_path = Path(base_dir) / entry["file"]
        if not png_path.exists():
            raise FileFormatError(f"mask {mid!r}: raster file {entry['file']!r} missing")
        arr = np.asarray(Image.open(png_path).convert("L"))
        bad = np.logical_and(arr != 0, arr != 255)
        if bad.any():
            raise FileFormatError(f"mask {mid!r}: PNG raster is not 0/255")
        mask = arr == 255
    else:
        raise FileFormatError(f"mask {mid!r}: entry has neither 'file' nor 'rle'")
    rec = MaskRecord.from_mask(mid, source_image, mask, iou, stab)
    if "area" in entry and int(entry["area"]) != rec.area_px:
        raise ValidationError(
            f"mask {mid!r}: manifest area {entry['area']} but raster has "
            f"{rec.area_px} foreground pixels")
    rec.validate()
    return rec


def read_mask_manifest(mask_dir):
    """Read a mask directory back into MaskRecords (manifest order)."""
    mask_dir = Path(mask_dir)
    path = mask_dir / MANIFEST_NAME
    if not path.exists():
        raise FileFormatError(f"no {MANIFEST_NAME} in {mask_dir}")
    try:
        manifest = json.loads(path.read_text())
        source = manifest["source_image"]
        entries = manifest["masks"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise FileFormatError(f"malformed {MANIFEST_NAME}: {e}")
    return [decode_mask_entry(e, mask_dir, source) for e in entries]
