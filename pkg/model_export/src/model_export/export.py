"""One-shot backbone export with a recorded numerical parity probe.

The probe is a deterministic synthetic raster; its reference embedding is
computed by the native torch model using the same preprocessing the
downstream pipeline documents (intensities to [0, 1], grayscale replicated
to three channels, per-channel mean/std normalization). Any conformant
runtime executing the exported graph must reproduce the reference within
1e-4 max-abs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .onnx_writer import ExportError, vit_to_graph
from .vit import TINY, VITB14, VisionTransformer, load_state_dict, random_init

EXPORTER_VERSION = "0.1.0"

NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)


@dataclass
class ParityProbe:
    probe_sha256: str
    reference: list          # embedding as float64 values
    exporter_version: str
    model_ref: str
    graph_sha256: str

    def to_dict(self):
        return {"probe_sha256": self.probe_sha256, "reference": self.reference,
                "exporter_version": self.exporter_version,
                "model_ref": self.model_ref, "graph_sha256": self.graph_sha256}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["probe_sha256"], doc["reference"],
                   doc["exporter_version"], doc["model_ref"],
                   doc["graph_sha256"])


def probe_raster(side: int = 224) -> np.ndarray:
    """Deterministic synthetic probe image: blobs on a gradient."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    img = 40.0 + 60.0 * xx / side + 30.0 * yy / side
    for (cy, cx, r, amp) in ((0.3, 0.35, 0.18, 150.0), (0.7, 0.6, 0.12, 110.0),
                             (0.45, 0.75, 0.08, 90.0)):
        d2 = ((yy / side - cy) ** 2 + (xx / side - cx) ** 2) / (r * r)
        img += amp * np.exp(-d2)
    img += 10.0 * np.sin(xx / 7.0) * np.cos(yy / 11.0)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def preprocess(raster: np.ndarray) -> torch.Tensor:
    x = torch.from_numpy(np.asarray(raster, dtype=np.float32) / 255.0)
    x = x.unsqueeze(0).repeat(3, 1, 1)
    mean = torch.tensor(NORM_MEAN).view(3, 1, 1)
    std = torch.tensor(NORM_STD).view(3, 1, 1)
    return ((x - mean) / std).unsqueeze(0)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def resolve_model(model_ref: str) -> VisionTransformer:
    """Build the model named by a checkpoint reference.

    Accepted forms: ``vitb14`` (fetch published weights via torch.hub, needs
    network), ``vitb14-random[:seed]`` / ``tiny-random[:seed]`` (seeded
    random weights, offline), or a path to a ``.pth`` state dict.
    """
    if model_ref == "vitb14":
        try:
            hub_model = torch.hub.load("facebookresearch/dinov2", "dinov2_vitb14")
        except Exception as e:
            raise ExportError(
                f"cannot fetch published vitb14 weights ({e}); pass a local "
                f".pth checkpoint or use vitb14-random:<seed>")
        return load_state_dict(VITB14, hub_model.state_dict())
    for prefix, cfg in (("vitb14-random", VITB14), ("tiny-random", TINY)):
        if model_ref == prefix or model_ref.startswith(prefix + ":"):
            seed = int(model_ref.split(":", 1)[1]) if ":" in model_ref else 0
            return random_init(cfg, seed)
    path = Path(model_ref)
    if path.exists():
        state = torch.load(path, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        dim = state["cls_token"].shape[-1]
        cfg = VITB14 if dim == VITB14.dim else TINY
        return load_state_dict(cfg, state)
    raise ExportError(f"checkpoint reference {model_ref!r} is not resolvable")


def export_backbone(model_ref: str, out_path, probe_path=None,
                    model: VisionTransformer | None = None) -> ParityProbe:
    """Write the graph file and its parity probe (PNG + JSON beside it)."""
    model = model if model is not None else resolve_model(model_ref)
    model.eval()
    graph_bytes = vit_to_graph(model)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_bytes(graph_bytes)

    raster = probe_raster(model.cfg.image_size)
    probe_path = Path(probe_path) if probe_path else out_path.with_suffix(".probe.png")
    Image.fromarray(raster).save(probe_path)
    with torch.no_grad():
        reference = model(preprocess(raster))[0].numpy().astype(np.float64)
    if not np.isfinite(reference).all():
        raise ExportError("reference embedding is not finite")

    probe = ParityProbe(
        probe_sha256=_sha256(probe_path.read_bytes()),
        reference=[float(v) for v in reference],
        exporter_version=EXPORTER_VERSION,
        model_ref=model_ref,
        graph_sha256=_sha256(graph_bytes))
    probe_json = probe_path.with_suffix(".json")
    probe_json.write_text(json.dumps(probe.to_dict(), indent=1, sort_keys=True))
    return probe


def load_probe(path) -> ParityProbe:
    return ParityProbe.from_dict(json.loads(Path(path).read_text()))
