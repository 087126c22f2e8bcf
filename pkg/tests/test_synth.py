import json
import math

import numpy as np
import pytest

from npshape import (FilterThresholds, PlacementError, SynthSpec,
                     ValidationError, export_dataset, filter_masks,
                     generate_scene, read_mask_manifest)


class TestGenerateScene:
    def test_exact_class_counts(self):
        spec = SynthSpec(seed=7, counts={"cube": 10}, canvas=(640, 640))
        scene = generate_scene(spec)
        assert len(scene.masks) == 10
        assert all(cls == "cube" for cls in scene.labels.values())
        assert set(scene.labels) == {r.id for r in scene.masks}

    def test_same_seed_bitwise_identical(self):
        spec = SynthSpec(seed=42, counts={"triangle": 4, "circle": 3, "dot": 5},
                         canvas=(512, 512))
        a = generate_scene(spec)
        b = generate_scene(spec)
        assert (a.image == b.image).all()
        assert len(a.masks) == len(b.masks)
        for ra, rb in zip(a.masks, b.masks):
            assert ra.id == rb.id and (ra.mask == rb.mask).all()

    def test_different_seed_differs(self):
        base = dict(counts={"cube": 4}, canvas=(512, 512))
        a = generate_scene(SynthSpec(seed=1, **base))
        b = generate_scene(SynthSpec(seed=2, **base))
        assert not (a.image == b.image).all()

    def test_dot_area_near_analytic_disc(self):
        spec = SynthSpec(seed=3, counts={"dot": 8}, canvas=(512, 512),
                         dot_diameter=30.0, dot_jitter=0.0)
        scene = generate_scene(spec)
        expected = math.pi * 15.0 ** 2
        for rec in scene.masks:
            assert expected * 0.9 <= rec.area_px <= expected * 1.1

    def test_masks_disjoint_without_overlap(self):
        spec = SynthSpec(seed=4, counts={"cube": 6, "pyramid": 6}, canvas=(700, 700))
        scene = generate_scene(spec)
        total = np.zeros(spec.canvas, dtype=int)
        for rec in scene.masks:
            total += rec.mask
        assert total.max() <= 1

    def test_masks_pass_validation_and_thresholds(self):
        counts = {c: 2 for c in ("cube", "pyramid", "triangle",
                                 "truncated_triangle", "circle", "blob")}
        scene = generate_scene(SynthSpec(seed=5, counts=counts, canvas=(768, 768)))
        kept = filter_masks(scene.masks, FilterThresholds())
        assert len(kept) == len(scene.masks)
        dots = generate_scene(SynthSpec(seed=6, counts={"dot": 10}, canvas=(512, 512)))
        kept = filter_masks(dots.masks, FilterThresholds(min_area_px=250))
        assert len(kept) == 10
        assert all(r.area_px >= 300 for r in dots.masks)

    def test_placement_error_when_crowded(self):
        spec = SynthSpec(seed=8, counts={"cube": 40}, canvas=(150, 150),
                         size_range=(60, 70))
        with pytest.raises(PlacementError, match="1000 attempts"):
            generate_scene(spec)

    def test_unknown_class_rejected(self):
        with pytest.raises(ValidationError):
            SynthSpec(seed=0, counts={"hexagon": 1})

    def test_shapes_must_fit_canvas(self):
        with pytest.raises(ValidationError):
            SynthSpec(seed=0, counts={"cube": 1}, canvas=(64, 64),
                      size_range=(60, 70))

    def test_overlap_allowed_mode(self):
        spec = SynthSpec(seed=9, counts={"circle": 25}, canvas=(300, 300),
                         size_range=(60, 80), overlap_allowed=True)
        scene = generate_scene(spec)  # would be impossible without overlap
        assert len(scene.masks) == 25


class TestExportDataset:
    def test_table1_shaped_counts(self, tmp_path):
        split_counts = {
            "train": {"triangle": 7, "truncated_triangle": 5, "circle": 6},
            "validation": {"triangle": 6, "truncated_triangle": 6, "circle": 7},
            "test": {"triangle": 83, "truncated_triangle": 11, "circle": 11},
        }
        manifest = export_dataset(tmp_path, split_counts, seed=1)
        assert manifest["splits"]["test"]["classes"]["triangle"] == 83
        for split, counts in split_counts.items():
            labels = json.loads((tmp_path / split / "labels.json").read_text())
            realized = {}
            for cls in labels.values():
                realized[cls] = realized.get(cls, 0) + 1
            assert realized == counts
            # every scene round-trips through the mask format
            for scene in manifest["splits"][split]["scenes"]:
                records = read_mask_manifest(tmp_path / split / scene["masks"])
                assert records
                for rec in records:
                    assert rec.id in labels

    def test_splits_disjoint_by_id(self, tmp_path):
        split_counts = {"train": {"cube": 4}, "test": {"cube": 4}}
        export_dataset(tmp_path, split_counts, seed=2)
        train_ids = set(json.loads((tmp_path / "train" / "labels.json").read_text()))
        test_ids = set(json.loads((tmp_path / "test" / "labels.json").read_text()))
        assert train_ids and test_ids
        assert not (train_ids & test_ids)

    def test_deterministic_exports(self, tmp_path):
        split_counts = {"train": {"dot": 5, "blob": 3}}
        m1 = export_dataset(tmp_path / "a", split_counts, seed=3)
        m2 = export_dataset(tmp_path / "b", split_counts, seed=3)
        img1 = (tmp_path / "a" / "train" / "train-s00.png").read_bytes()
        img2 = (tmp_path / "b" / "train" / "train-s00.png").read_bytes()
        assert img1 == img2
        assert m1["splits"] == m2["splits"]

    def test_scene_chunking(self, tmp_path):
        manifest = export_dataset(tmp_path, {"test": {"cube": 45}}, seed=4,
                                  max_per_scene=20)
        scenes = manifest["splits"]["test"]["scenes"]
        assert len(scenes) == 3
        assert sum(s["counts"]["cube"] for s in scenes) == 45
