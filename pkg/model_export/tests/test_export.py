"""Export + parity tests.

The downstream pipeline is exercised strictly through its external
interfaces: the ``npshape`` CLI and the documented crop/embedding file
formats (the embedding reader below is an independent implementation of
the format).
"""

import json
import os
import struct
import subprocess
import sys

import numpy as np
import pytest
import torch
from PIL import Image

from model_export import (TINY, VITB14, ExportError, export_backbone,
                          load_probe, preprocess, probe_raster, random_init,
                          resolve_model)
from model_export.vit import load_state_dict


def read_embedding_file(path):
    """Independent reader for the documented embedding format."""
    blob = open(path, "rb").read()
    assert blob[:6] == b"NPEMB1"
    (hlen,) = struct.unpack("<I", blob[6:10])
    header = json.loads(blob[10:10 + hlen])
    rows = np.frombuffer(blob[10 + hlen:], dtype="<f4").reshape(
        header["n"], header["d"])
    return header["ids"], rows


def npshape(*args):
    return subprocess.run([sys.executable, "-m", "npshape.cli", *args],
                          capture_output=True, text=True)


def make_probe_crop_dir(tmp_path, raster):
    """A crops directory holding the probe as a single 224x224 crop."""
    crops = tmp_path / "probe_crops"
    (crops / "raw_crop").mkdir(parents=True)
    Image.fromarray(raster).save(crops / "raw_crop" / "probe.png")
    side = raster.shape[0]
    (crops / "crops.json").write_text(json.dumps({"crops": [{
        "id": "probe", "scene": "probe", "bbox": [0, 0, side - 1, side - 1],
        "label": None, "variants": {"raw_crop": "raw_crop/probe.png"}}]}))
    return crops


@pytest.fixture(scope="module")
def tiny_export(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    model = random_init(TINY, seed=3)
    probe = export_backbone("tiny-random:3", out / "tiny.onnx", model=model)
    return out / "tiny.onnx", probe


class TestExport:
    def test_probe_json_round_trip(self, tiny_export):
        path, probe = tiny_export
        loaded = load_probe(path.with_suffix(".probe.json"))
        assert loaded == probe
        assert len(loaded.reference) == TINY.dim
        assert np.isfinite(loaded.reference).all()

    def test_export_deterministic(self, tmp_path):
        a = export_backbone("tiny-random:9", tmp_path / "a.onnx")
        b = export_backbone("tiny-random:9", tmp_path / "b.onnx")
        assert (tmp_path / "a.onnx").read_bytes() == (tmp_path / "b.onnx").read_bytes()
        assert a.reference == b.reference
        assert a.graph_sha256 == b.graph_sha256

    def test_unsupported_module_listed(self, tmp_path):
        model = random_init(TINY, seed=0)
        model.blocks[0].attn.proj = torch.nn.Sequential(
            torch.nn.Linear(TINY.dim, TINY.dim), torch.nn.ReLU())
        with pytest.raises(ExportError, match="ReLU|Sequential"):
            export_backbone("tiny-broken", tmp_path / "x.onnx", model=model)

    def test_checkpoint_path_with_conv_patch_weight(self, tmp_path):
        # published checkpoints store the patch projection as a 4-D conv kernel
        model = random_init(TINY, seed=4)
        state = model.state_dict()
        p = TINY.patch_size
        state["patch_embed.proj.weight"] = \
            state["patch_embed.proj.weight"].reshape(TINY.dim, 3, p, p)
        ckpt = tmp_path / "tiny.pth"
        torch.save(state, ckpt)
        rebuilt = resolve_model(str(ckpt))
        x = preprocess(probe_raster(TINY.image_size))
        with torch.no_grad():
            assert torch.equal(model(x), rebuilt(x))

    def test_bad_checkpoint_rejected(self, tmp_path):
        with pytest.raises(ExportError, match="not resolvable"):
            resolve_model(str(tmp_path / "missing.pth"))

    def test_hub_failure_is_explicit(self, monkeypatch):
        def boom(*a, **k):
            raise RuntimeError("no network")
        monkeypatch.setattr(torch.hub, "load", boom)
        with pytest.raises(ExportError, match="vitb14-random"):
            resolve_model("vitb14")

    def test_mismatched_checkpoint_keys(self):
        with pytest.raises(ValueError, match="does not match"):
            load_state_dict(TINY, {"cls_token": torch.zeros(1, 1, TINY.dim)})


class TestParityThroughPipeline:
    def test_tiny_graph_parity(self, tiny_export, tmp_path):
        graph_path, probe = tiny_export
        raster = np.asarray(Image.open(graph_path.with_suffix(".probe.png")))
        crops = make_probe_crop_dir(tmp_path, raster)
        emb = tmp_path / "probe.npe"
        # stretch_resize at the native side is the identity standardization
        result = npshape("embed", "--crops", str(crops),
                         "--pipeline", "stretch_resize",
                         "--target-side", str(TINY.image_size),
                         "--provider", f"graph:{graph_path}",
                         "--out", str(emb))
        assert result.returncode == 0, result.stderr
        ids, rows = read_embedding_file(emb)
        assert ids == ["probe"]
        diff = np.abs(rows[0].astype(np.float64) - np.asarray(probe.reference)).max()
        assert diff < 1e-4, f"parity diff {diff}"
        print(f"\n[SECONDARY] tiny-backbone probe parity through the CLI: "
              f"max-abs {diff:.2e} < 1e-4: PASS")

    def test_wrong_input_side_rejected(self, tiny_export, tmp_path):
        graph_path, _ = tiny_export
        small = probe_raster(64)
        crops = make_probe_crop_dir(tmp_path, small)
        result = npshape("embed", "--crops", str(crops),
                         "--pipeline", "stretch_resize", "--target-side", "64",
                         "--provider", f"graph:{graph_path}",
                         "--out", str(tmp_path / "x.npe"))
        assert result.returncode != 0
        assert "dim" in result.stderr or "declares" in result.stderr

    def test_full_pipeline_with_tiny_graph(self, tiny_export, tmp_path):
        graph_path, _ = tiny_export
        cfg = tmp_path / "run.toml"
        cfg.write_text(f"""
[run]
out_dir = "{tmp_path / 'out'}"
seed = 11

[synth]
canvas = [512, 512]

[synth.train]
cube = 6
pyramid = 6

[synth.test]
cube = 10
pyramid = 4

[preproc]
select = false
pipeline = "masked_pad_resize"

[embed]
provider = "graph:{graph_path}"

[train]
mode = "lr"
""")
        result = npshape("run", "--config", str(cfg))
        assert result.returncode == 0, result.stderr
        report = json.loads((tmp_path / "out" / "eval" / "report.json").read_text())
        manifest = json.loads((tmp_path / "out" / "run_manifest.json").read_text())
        assert manifest["provider_fingerprint"].startswith("portable_graph")
        assert 0.0 <= report["macro"]["f1"] <= 1.0
        print(f"\n[SECONDARY] full pipeline on the tiny exported graph: "
              f"macro-F1 {report['macro']['f1']:.3f}")


@pytest.mark.slow
class TestFullScaleBackbone:
    def test_vitb14_random_parity(self, tmp_path):
        model = random_init(VITB14, seed=0)
        probe = export_backbone("vitb14-random:0", tmp_path / "vitb14.onnx",
                                model=model)
        raster = np.asarray(Image.open((tmp_path / "vitb14.onnx")
                                       .with_suffix(".probe.png")))
        crops = make_probe_crop_dir(tmp_path, raster)
        emb = tmp_path / "probe.npe"
        result = npshape("embed", "--crops", str(crops),
                         "--pipeline", "stretch_resize",
                         "--provider", f"graph:{tmp_path / 'vitb14.onnx'}",
                         "--out", str(emb))
        assert result.returncode == 0, result.stderr
        ids, rows = read_embedding_file(emb)
        assert rows.shape == (1, 768)
        diff = np.abs(rows[0].astype(np.float64)
                      - np.asarray(probe.reference)).max()
        assert diff < 1e-4, f"parity diff {diff}"
        print(f"\n[SECONDARY] ViT-B/14-scale probe parity: "
              f"max-abs {diff:.2e} < 1e-4: PASS")


REAL_GRAPH = os.environ.get("NPSHAPE_REAL_GRAPH", "")


@pytest.mark.skipif(not REAL_GRAPH, reason="set NPSHAPE_REAL_GRAPH to an "
                    "exported graph of the published pretrained backbone "
                    "(weights are not fetchable in offline environments)")
def test_real_backbone_beats_toy_within_margin(tmp_path):
    """With real pretrained weights, LR-only on the triangles analog must
    reach at least the toy provider's macro-F1 minus 0.05."""
    def run_with(provider):
        cfg = tmp_path / f"run_{provider.split(':')[0]}.toml"
        cfg.write_text(f"""
[run]
out_dir = "{tmp_path / provider.split(':')[0]}"
seed = 11

[synth.train]
triangle = 7
truncated_triangle = 5
circle = 6

[synth.test]
triangle = 83
truncated_triangle = 11
circle = 11

[embed]
provider = "{provider}"

[train]
mode = "lr"
""")
        result = npshape("run", "--config", str(cfg))
        assert result.returncode == 0, result.stderr
        out_dir = tmp_path / provider.split(":")[0]
        return json.loads((out_dir / "eval" / "report.json").read_text())["macro"]["f1"]

    f1_toy = run_with("toy")
    f1_real = run_with(f"graph:{REAL_GRAPH}")
    assert f1_real >= f1_toy - 0.05, (f1_real, f1_toy)
    print(f"\n[SECONDARY] real backbone LR-only macro-F1 {f1_real:.3f} >= "
          f"toy {f1_toy:.3f} - 0.05: PASS")
