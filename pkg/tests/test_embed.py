import math
import struct

import numpy as np
import pytest

from npshape import (EmbeddingMatrix, FileFormatError, MaskRecord,
                     ProviderConfig, ValidationError, crop_particle,
                     embed_batch, load_embeddings, raster_digest,
                     save_embeddings, toy_descriptor)
from npshape.embed import TOY_DIM
from npshape.preprocess import PreprocSpec, apply_preproc


def circle_raster(side, radius, value=255):
    yy, xx = np.mgrid[0:side, 0:side]
    r = np.sqrt((yy - side / 2) ** 2 + (xx - side / 2) ** 2)
    return np.where(r <= radius, value, 0).astype(np.uint8)


def triangle_raster(side, tri_side, value=255):
    # filled equilateral triangle centered on the canvas
    cy = cx = side / 2
    R = tri_side / math.sqrt(3.0)
    verts = [(cy + R * math.sin(a), cx + R * math.cos(a))
             for a in (math.pi / 2, math.pi / 2 + 2 * math.pi / 3,
                       math.pi / 2 + 4 * math.pi / 3)]
    yy, xx = np.mgrid[0:side, 0:side]
    inside = np.ones((side, side), dtype=bool)
    for i in range(3):
        y0, x0 = verts[i]
        y1, x1 = verts[(i + 1) % 3]
        inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    return np.where(inside, value, 0).astype(np.uint8)


class TestToyDescriptor:
    def test_all_zero_raster(self):
        d = toy_descriptor(np.zeros((64, 64), np.uint8))
        assert d.shape == (TOY_DIM,)
        assert (d == 0).all()

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        raster = rng.integers(0, 256, (96, 96)).astype(np.uint8)
        assert (toy_descriptor(raster) == toy_descriptor(raster)).all()

    def test_translation_under_center_canvas(self):
        # same shape at different source positions, recentered by preprocessing
        shape = circle_raster(41, 15, 220)
        spec = PreprocSpec("center_canvas", 128)
        descriptors = []
        for (r0, c0) in ((5, 7), (60, 40)):
            img = np.zeros((120, 120), np.uint8)
            img[r0:r0 + 41, c0:c0 + 41] = shape
            rec = MaskRecord.from_mask("m", "img", img > 0, 1.0, 1.0)
            crop = crop_particle(img, rec, "raw_crop")
            descriptors.append(toy_descriptor(apply_preproc(crop, spec)))
        assert np.abs(descriptors[0] - descriptors[1]).max() <= 1e-6

    def test_circle_vs_triangle_contour_sections(self):
        area = 5000.0
        circle = circle_raster(224, math.sqrt(area / math.pi))
        triangle = triangle_raster(224, math.sqrt(4.0 * area / math.sqrt(3.0)))
        assert abs(int((circle > 0).sum()) - int((triangle > 0).sum())) < area * 0.1
        dc = toy_descriptor(circle)[23:39]
        dt = toy_descriptor(triangle)[23:39]
        assert np.abs(dc - dt).max() >= 0.2

    def test_intensity_scaling_of_binary_mask(self):
        mask = circle_raster(80, 25, 1)
        a = toy_descriptor(mask * 255)
        b = toy_descriptor(mask * 37)
        assert (a == b).all()

    def test_non_square_rejected(self):
        with pytest.raises(ValidationError):
            toy_descriptor(np.zeros((10, 20), np.uint8))


class TestEmbedBatch:
    def test_identical_rasters_identical_rows(self):
        r = circle_raster(64, 20)
        mat = embed_batch([r, r], ProviderConfig.toy())
        assert (mat.rows[0] == mat.rows[1]).all()

    def test_row_order_matches_input_order(self):
        rs = [circle_raster(64, rad) for rad in (8, 14, 20)]
        mat = embed_batch(rs, ProviderConfig.toy(), ids=["a", "b", "c"])
        perm = embed_batch(rs[::-1], ProviderConfig.toy(), ids=["c", "b", "a"])
        assert (mat.rows == perm.rows[::-1]).all()
        assert mat.ids == ["a", "b", "c"]

    def test_mixed_sizes_rejected(self):
        with pytest.raises(ValidationError):
            embed_batch([circle_raster(64, 8), circle_raster(32, 8)],
                        ProviderConfig.toy())

    def test_fingerprint_tracks_config(self):
        a = ProviderConfig.toy()
        b = ProviderConfig(kind="toy_descriptor", norm_mean=(0.5, 0.5, 0.5))
        assert a.fingerprint() != b.fingerprint()

    def test_all_rows_finite(self):
        rng = np.random.default_rng(1)
        rasters = [rng.integers(0, 256, (48, 48)).astype(np.uint8) for _ in range(6)]
        mat = embed_batch(rasters, ProviderConfig.toy())
        assert np.isfinite(mat.rows).all()


class TestEmbeddingFile:
    def _matrix(self, n=5, d=8, seed=0):
        rng = np.random.default_rng(seed)
        rows = rng.normal(size=(n, d)).astype(np.float32)
        return EmbeddingMatrix([f"id{i}" for i in range(n)], rows, "prov:1")

    def test_round_trip_bit_exact(self, tmp_path):
        mat = self._matrix()
        p = tmp_path / "emb.npe"
        save_embeddings(mat, p)
        first = p.read_bytes()
        loaded = load_embeddings(p)
        assert loaded.ids == mat.ids
        assert (loaded.rows == mat.rows).all()
        assert loaded.provider_fingerprint == mat.provider_fingerprint
        save_embeddings(loaded, p)
        assert p.read_bytes() == first

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "emb.npe"
        save_embeddings(self._matrix(), p)
        blob = p.read_bytes()
        p.write_bytes(blob[:-7])
        with pytest.raises(FileFormatError, match="payload"):
            load_embeddings(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "emb.npe"
        p.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(FileFormatError, match="magic"):
            load_embeddings(p)

    def test_nan_rows_rejected(self, tmp_path):
        mat = self._matrix()
        p = tmp_path / "emb.npe"
        save_embeddings(mat, p)
        blob = bytearray(p.read_bytes())
        (hlen,) = struct.unpack("<I", blob[6:10])
        offset = 10 + hlen
        blob[offset:offset + 4] = struct.pack("<f", float("nan"))
        p.write_bytes(bytes(blob))
        with pytest.raises(FileFormatError, match="non-finite"):
            load_embeddings(p)

    def test_table1_scale_file(self, tmp_path):
        # dataset-1 test split size: 176 cubes + 12 pyramids = 188 rows, 768-d
        rng = np.random.default_rng(2)
        rows = rng.normal(size=(188, 768)).astype(np.float32)
        mat = EmbeddingMatrix([f"p{i}" for i in range(188)], rows, "backbone")
        p = tmp_path / "test.npe"
        save_embeddings(mat, p)
        loaded = load_embeddings(p)
        assert loaded.rows.shape == (188, 768)
        assert len(loaded.ids) == 188

    def test_duplicate_ids_rejected(self):
        rows = np.zeros((2, 3), dtype=np.float32)
        with pytest.raises(ValidationError, match="duplicate"):
            EmbeddingMatrix(["a", "a"], rows, "x").validate()


class TestPrecomputedProvider:
    def test_lookup_by_raster_digest(self, tmp_path):
        rasters = [circle_raster(32, r) for r in (6, 10)]
        toy = embed_batch(rasters, ProviderConfig.toy())
        keyed = EmbeddingMatrix([raster_digest(r) for r in rasters],
                                toy.rows, "frozen")
        p = tmp_path / "pre.npe"
        save_embeddings(keyed, p)
        cfg = ProviderConfig.precomputed(p)
        out = embed_batch(rasters, cfg, ids=["x", "y"])
        assert (out.rows == toy.rows).all()

    def test_missing_raster_errors(self, tmp_path):
        raster = circle_raster(32, 6)
        keyed = EmbeddingMatrix([raster_digest(raster)],
                                np.ones((1, 4), np.float32), "frozen")
        p = tmp_path / "pre.npe"
        save_embeddings(keyed, p)
        with pytest.raises(ValidationError, match="no row"):
            embed_batch([circle_raster(32, 9)], ProviderConfig.precomputed(p))
