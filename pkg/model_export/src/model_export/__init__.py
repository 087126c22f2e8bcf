"""Backbone export to the portable graph format, with parity probes."""

__version__ = "0.1.0"

from .export import (ParityProbe, export_backbone, load_probe, preprocess,
                     probe_raster, resolve_model)
from .onnx_writer import ExportError, vit_to_graph
from .vit import TINY, VITB14, VisionTransformer, VitConfig, random_init
