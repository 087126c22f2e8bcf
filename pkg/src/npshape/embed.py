"""Feature-vector providers for standardized particle rasters.

Three interchangeable providers: a portable neural-network graph (ONNX file
executed by the bundled numpy runner), a precomputed embedding file, and a
deterministic hand-crafted shape descriptor used as the test-time stand-in
for the real backbone.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import FileFormatError, GraphError, ValidationError

TOY_DIM = 64
GRAPH_DIM = 768

# Input statistics the pretrained backbone expects (grayscale replicated to
# three channels before normalization).
DEFAULT_NORM_MEAN = (0.485, 0.456, 0.406)
DEFAULT_NORM_STD = (0.229, 0.224, 0.225)

EMB_MAGIC = b"NPEMB1"


@dataclass
class ProviderConfig:
    kind: str  # toy_descriptor | portable_graph | precomputed_file
    path: Path | None = None
    embedding_dim: int = TOY_DIM
    norm_mean: tuple = DEFAULT_NORM_MEAN
    norm_std: tuple = DEFAULT_NORM_STD

    @classmethod
    def toy(cls):
        return cls(kind="toy_descriptor", embedding_dim=TOY_DIM)

    @classmethod
    def graph(cls, path, embedding_dim: int | None = None):
        if embedding_dim is None:
            from .graph_runner import declared_output_width
            embedding_dim = declared_output_width(path) or GRAPH_DIM
        return cls(kind="portable_graph", path=Path(path), embedding_dim=embedding_dim)

    @classmethod
    def precomputed(cls, path):
        mat = load_embeddings(path)
        return cls(kind="precomputed_file", path=Path(path),
                   embedding_dim=mat.rows.shape[1])

    def __post_init__(self):
        if self.kind not in ("toy_descriptor", "portable_graph", "precomputed_file"):
            raise ValidationError(f"unknown provider kind {self.kind!r}")
        if self.embedding_dim <= 0:
            raise ValidationError("embedding_dim must be positive")
        if self.kind == "portable_graph":
            if self.path is None or not Path(self.path).exists():
                raise GraphError(f"graph file {self.path} does not exist")
            from .graph_runner import declared_output_width
            declared = declared_output_width(self.path)
            if declared is not None and declared != self.embedding_dim:
                raise GraphError(
                    f"graph declares output width {declared}, config says "
                    f"{self.embedding_dim}")

    def fingerprint(self) -> str:
        payload = {"kind": self.kind, "dim": self.embedding_dim,
                   "mean": list(self.norm_mean), "std": list(self.norm_std)}
        if self.path is not None:
            payload["file_sha256"] = _file_digest(self.path)
        digest = hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]
        return f"{self.kind}:{self.embedding_dim}:{digest}"


@dataclass
class EmbeddingMatrix:
    ids: list
    rows: np.ndarray  # N x D float32
    provider_fingerprint: str = ""

    def validate(self):
        if self.rows.ndim != 2:
            raise ValidationError("embedding rows must be a 2-D matrix")
        if len(self.ids) != self.rows.shape[0]:
            raise ValidationError(
                f"{len(self.ids)} ids for {self.rows.shape[0]} rows")
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("duplicate embedding ids")
        if not np.isfinite(self.rows).all():
            raise ValidationError("embedding matrix contains non-finite values")


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def raster_digest(raster) -> str:
    """Content id of a standardized raster; precomputed files key rows by this."""
    arr = np.ascontiguousarray(np.asarray(raster, dtype=np.uint8))
    h = hashlib.sha256(f"{arr.shape[0]}x{arr.shape[1]}:".encode())
    h.update(arr.tobytes())
    return "sha256:" + h.hexdigest()


# ---------------------------------------------------------------------------
# toy descriptor

def _hu_section(I, m00, cy, cx):
    h, w = I.shape
    y = np.arange(h, dtype=np.float64)[:, None] - cy
    x = np.arange(w, dtype=np.float64)[None, :] - cx

    def mu(p, q):
        return float(((x ** p) * (y ** q) * I).sum())

    def eta(p, q):
        return mu(p, q) / (m00 ** (1.0 + (p + q) / 2.0))

    e20, e02, e11 = eta(2, 0), eta(0, 2), eta(1, 1)
    e30, e03, e21, e12 = eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2)
    h1 = e20 + e02
    h2 = (e20 - e02) ** 2 + 4 * e11 ** 2
    h3 = (e30 - 3 * e12) ** 2 + (3 * e21 - e03) ** 2
    h4 = (e30 + e12) ** 2 + (e21 + e03) ** 2
    h5 = ((e30 - 3 * e12) * (e30 + e12)
          * ((e30 + e12) ** 2 - 3 * (e21 + e03) ** 2)
          + (3 * e21 - e03) * (e21 + e03)
          * (3 * (e30 + e12) ** 2 - (e21 + e03) ** 2))
    h6 = ((e20 - e02) * ((e30 + e12) ** 2 - (e21 + e03) ** 2)
          + 4 * e11 * (e30 + e12) * (e21 + e03))
    h7 = ((3 * e21 - e03) * (e30 + e12)
          * ((e30 + e12) ** 2 - 3 * (e21 + e03) ** 2)
          - (e30 - 3 * e12) * (e21 + e03)
          * (3 * (e30 + e12) ** 2 - (e21 + e03) ** 2))
    vals = np.array([h1, h2, h3, h4, h5, h6, h7])
    # log-scale then map the documented [-35, 35] range onto [0, 1]
    logs = -np.sign(vals) * np.log10(np.abs(vals) + 1e-30)
    return np.clip((logs + 35.0) / 70.0, 0.0, 1.0)


def _radial_section(I, m00, cy, cx, bins=16):
    h, w = I.shape
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / math.hypot(h, w)
    idx = np.minimum((r * bins).astype(int), bins - 1)
    hist = np.zeros(bins)
    np.add.at(hist, idx, I)
    return hist / m00


def _resample_closed(points, n):
    """Resample a closed polyline to n points equally spaced by arc length."""
    pts = np.asarray(points, dtype=np.float64)
    closed = np.vstack([pts, pts[:1]])
    seg = np.sqrt(((closed[1:] - closed[:-1]) ** 2).sum(axis=1))
    total = seg.sum()
    if total == 0:
        return None
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.arange(n) * total / n
    out = np.empty((n, 2))
    j = 0
    for k, t in enumerate(targets):
        while cum[j + 1] < t:
            j += 1
        f = (t - cum[j]) / seg[j] if seg[j] > 0 else 0.0
        out[k] = closed[j] + f * (closed[j + 1] - closed[j])
    return out


def _contour_section(I, bins=16, samples=48, chord=2):
    """Turning-angle histogram of the largest thresholded component.

    The outline is resampled to 48 equidistant points and the turn at each
    point is measured between chords two samples long (long enough to
    average out pixel staircase); turn magnitudes in [0, pi] fill 16 bins
    weighted by the turn itself, normalized by the total turning. Rotating
    the shape leaves the histogram unchanged.
    """
    binary = (I > 0.5).astype(np.uint8)
    if binary.sum() == 0:
        return np.zeros(bins)
    n, labels, stats, _ = cv2.connectedComponentsWithStats(binary, connectivity=8)
    if n <= 1:
        return np.zeros(bins)
    largest = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
    comp = (labels == largest).astype(np.uint8)
    contours, _ = cv2.findContours(comp, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    if not contours:
        return np.zeros(bins)
    contour = max(contours, key=len).reshape(-1, 2)
    if len(contour) < 8:
        return np.zeros(bins)
    pts = _resample_closed(contour, samples)
    if pts is None:
        return np.zeros(bins)
    prev = np.roll(pts, chord, axis=0)
    nxt = np.roll(pts, -chord, axis=0)
    v_in = pts - prev
    v_out = nxt - pts
    cross = v_in[:, 0] * v_out[:, 1] - v_in[:, 1] * v_out[:, 0]
    dot = (v_in * v_out).sum(axis=1)
    turn = np.abs(np.arctan2(cross, dot))  # [0, pi]
    idx = np.minimum((turn / math.pi * bins).astype(int), bins - 1)
    hist = np.zeros(bins)
    np.add.at(hist, idx, turn)
    total = hist.sum()
    return hist / total if total > 0 else hist


def _block_section(I, grid=5):
    # 224 is not divisible by 5: block boundaries fall at i*side//5
    rows = np.array_split(I, grid, axis=0)
    return np.array([b.mean() for r in rows for b in np.array_split(r, grid, axis=1)])


def _minmax(v):
    span = v.max() - v.min()
    return (v - v.min()) / span if span > 0 else np.zeros_like(v)


def toy_descriptor(raster) -> np.ndarray:
    """64-d deterministic shape descriptor for a square grayscale raster.

    Sections: 7 log-scaled rotation-invariant moment values, a 16-bin radial
    intensity histogram about the centroid, a 16-bin contour turning-angle
    histogram of the largest thresholded component, and 25 block means on a
    5x5 grid. Each section is min-max normalized over its own range: the
    moment values over the fixed [-35, 35] log range, the two histograms
    over their own per-raster value range, and the block means over the
    [0, 1] intensity range. The raster is first divided by its maximum, so
    scaling the intensities of a binary mask cannot change the result. An
    all-zero raster yields the all-zero descriptor.
    """
    arr = np.asarray(raster, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValidationError("toy descriptor expects a square 2-D raster")
    peak = arr.max()
    if peak <= 0:
        return np.zeros(TOY_DIM, dtype=np.float32)
    I = arr / peak
    m00 = float(I.sum())
    h, w = I.shape
    yy = np.arange(h, dtype=np.float64)
    xx = np.arange(w, dtype=np.float64)
    cy = float((I.sum(axis=1) * yy).sum() / m00)
    cx = float((I.sum(axis=0) * xx).sum() / m00)
    parts = [
        _hu_section(I, m00, cy, cx),
        _minmax(_radial_section(I, m00, cy, cx)),
        _minmax(_contour_section(I)),
        _block_section(I),
    ]
    return np.concatenate(parts).astype(np.float32)


# ---------------------------------------------------------------------------
# batch embedding

def graph_input_batch(rasters, cfg: ProviderConfig) -> np.ndarray:
    """Stack rasters into the N x 3 x S x S float32 tensor the graph expects."""
    batch = np.stack([np.asarray(r, dtype=np.float32) / 255.0 for r in rasters])
    batch = np.repeat(batch[:, None, :, :], 3, axis=1)
    mean = np.asarray(cfg.norm_mean, dtype=np.float32)[None, :, None, None]
    std = np.asarray(cfg.norm_std, dtype=np.float32)[None, :, None, None]
    return (batch - mean) / std


def embed_batch(rasters, cfg: ProviderConfig, ids=None) -> EmbeddingMatrix:
    """Embed standardized rasters; row order equals input order."""
    rasters = list(rasters)
    if not rasters:
        raise ValidationError("no rasters to embed")
    side = np.asarray(rasters[0]).shape[0]
    for r in rasters:
        s = np.asarray(r).shape
        if len(s) != 2 or s[0] != s[1] or s[0] != side:
            raise ValidationError(f"raster of shape {s} is not {side}x{side}")
    if ids is None:
        ids = [f"r{i:06d}" for i in range(len(rasters))]

    if cfg.kind == "toy_descriptor":
        rows = np.stack([toy_descriptor(r) for r in rasters])
    elif cfg.kind == "precomputed_file":
        table = load_embeddings(cfg.path)
        lookup = dict(zip(table.ids, table.rows))
        rows = []
        for r in rasters:
            key = raster_digest(r)
            if key not in lookup:
                raise ValidationError(
                    f"precomputed file has no row for raster {key[:23]}...")
            rows.append(lookup[key])
        rows = np.stack(rows)
    else:
        from .graph_runner import run_graph_cached
        rows = run_graph_cached(cfg.path, graph_input_batch(rasters, cfg))
        rows = np.asarray(rows, dtype=np.float32)
    if rows.shape[1] != cfg.embedding_dim:
        raise GraphError(
            f"provider emitted width {rows.shape[1]}, config declares "
            f"{cfg.embedding_dim}")
    mat = EmbeddingMatrix(list(ids), rows.astype(np.float32), cfg.fingerprint())
    mat.validate()
    return mat


# ---------------------------------------------------------------------------
# embedding file format: magic, u32 header length, JSON header, float32 payload

def save_embeddings(mat: EmbeddingMatrix, path) -> Path:
    mat.validate()
    header = json.dumps({"n": len(mat.ids), "d": int(mat.rows.shape[1]),
                         "ids": list(mat.ids), "provider": mat.provider_fingerprint},
                        sort_keys=True).encode()
    payload = np.ascontiguousarray(mat.rows, dtype="<f4").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(payload)
    return path


def load_embeddings(path) -> EmbeddingMatrix:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:6] != EMB_MAGIC:
        raise FileFormatError(f"{path}: bad magic, not an embedding file")
    if len(blob) < 10:
        raise FileFormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", blob[6:10])
    if len(blob) < 10 + hlen:
        raise FileFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[10:10 + hlen])
        n, d, ids, provider = header["n"], header["d"], header["ids"], header["provider"]
    except (json.JSONDecodeError, KeyError) as e:
        raise FileFormatError(f"{path}: malformed header: {e}")
    payload = blob[10 + hlen:]
    if len(payload) != n * d * 4:
        raise FileFormatError(
            f"{path}: payload has {len(payload)} bytes, header declares "
            f"{n}x{d} float32 ({n * d * 4})")
    rows = np.frombuffer(payload, dtype="<f4").reshape(n, d).copy()
    if not np.isfinite(rows).all():
        raise FileFormatError(f"{path}: payload contains non-finite rows")
    mat = EmbeddingMatrix(list(ids), rows, provider)
    mat.validate()
    return mat
