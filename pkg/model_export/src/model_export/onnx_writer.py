"""Serialize a vision transformer into the open neural-network exchange format.

The protobuf wire format is written directly (tag/varint/length-delimited),
producing a standard single-input single-output graph at opset 17 using a
small operator vocabulary: MatMul, Add, Mul, Div, Erf, Reshape, Transpose,
Concat, Gather, Softmax, LayerNormalization, ReduceMean.
"""

from __future__ import annotations

import math

import numpy as np

IR_VERSION = 8
OPSET = 17

_FLOAT = 1
_INT64 = 7

_ATTR_FLOAT = 1
_ATTR_INT = 2
_ATTR_INTS = 7


class ExportError(Exception):
    pass


def _varint(v: int) -> bytes:
    if v < 0:
        v += 1 << 64
    out = bytearray()
    while True:
        byte = v & 0x7F
        v >>= 7
        if v:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _tag(field: int, wire: int) -> bytes:
    return _varint(field << 3 | wire)


def _vint(field: int, v: int) -> bytes:
    return _tag(field, 0) + _varint(v)


def _blob(field: int, payload: bytes) -> bytes:
    return _tag(field, 2) + _varint(len(payload)) + payload


def _string(field: int, s: str) -> bytes:
    return _blob(field, s.encode())


def _f32(field: int, v: float) -> bytes:
    return _tag(field, 5) + np.float32(v).tobytes()


def encode_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    out = b"".join(_vint(1, int(d)) for d in arr.shape)
    if arr.dtype == np.int64:
        out += _vint(2, _INT64)
        out += _blob(9, arr.astype("<i8").tobytes())
    elif arr.dtype in (np.float32, np.float64):
        out += _vint(2, _FLOAT)
        out += _blob(9, arr.astype("<f4").tobytes())
    else:
        raise ExportError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
    out += _string(8, name)
    return out


def _attr_int(name: str, v: int) -> bytes:
    return _string(1, name) + _vint(3, v) + _vint(20, _ATTR_INT)


def _attr_float(name: str, v: float) -> bytes:
    return _string(1, name) + _f32(2, v) + _vint(20, _ATTR_FLOAT)


def _attr_ints(name: str, vals) -> bytes:
    packed = b"".join(_varint(int(v)) for v in vals)
    return _string(1, name) + _blob(8, packed) + _vint(20, _ATTR_INTS)


def encode_node(op: str, inputs, outputs, attrs: dict | None = None) -> bytes:
    out = b"".join(_string(1, i) for i in inputs)
    out += b"".join(_string(2, o) for o in outputs)
    out += _string(4, op)
    for key, val in (attrs or {}).items():
        if isinstance(val, bool):
            raise ExportError(f"boolean attribute {key!r} not representable")
        if isinstance(val, int):
            out += _blob(5, _attr_int(key, val))
        elif isinstance(val, float):
            out += _blob(5, _attr_float(key, val))
        elif isinstance(val, (list, tuple)):
            out += _blob(5, _attr_ints(key, val))
        else:
            raise ExportError(f"unsupported attribute value for {key!r}")
    return out


def encode_value_info(name: str, dims) -> bytes:
    dim_blobs = b""
    for d in dims:
        if d is None:
            dim_blobs += _blob(1, _string(2, "N"))
        else:
            dim_blobs += _blob(1, _vint(1, int(d)))
    tensor_type = _blob(1, _vint(1, _FLOAT) + _blob(2, dim_blobs))
    return _string(1, name) + _blob(2, tensor_type)


def encode_model(nodes, initializers, input_info, output_info,
                 producer: str = "model_export") -> bytes:
    graph = b"".join(_blob(1, n) for n in nodes)
    graph += _string(2, "backbone")
    graph += b"".join(_blob(5, t) for t in initializers)
    graph += _blob(11, encode_value_info(*input_info))
    graph += _blob(12, encode_value_info(*output_info))
    model = _vint(1, IR_VERSION)
    model += _string(2, producer)
    model += _blob(7, graph)
    model += _blob(8, _string(1, "") + _vint(2, OPSET))
    return model


class GraphBuilder:
    def __init__(self):
        self.nodes = []
        self.initializers = []
        self._n = 0

    def init(self, name: str, arr) -> str:
        self.initializers.append(encode_tensor(name, np.asarray(arr)))
        return name

    def op(self, op_type: str, inputs, attrs=None, name=None) -> str:
        out = name or f"t{self._n}"
        self._n += 1
        self.nodes.append(encode_node(op_type, inputs, [out], attrs))
        return out


def vit_to_graph(model) -> bytes:
    """Build the exchange-format graph for a VisionTransformer.

    Raises ExportError naming the operator if the model contains a module
    this exporter cannot convert.
    """
    from torch import nn

    from .vit import (Attention, Block, LayerScale, Mlp, PatchEmbed,
                      VisionTransformer)

    supported = (VisionTransformer, PatchEmbed, Block, Attention, Mlp,
                 LayerScale, nn.LayerNorm, nn.Linear, nn.GELU, nn.ModuleList)
    for module in model.modules():
        if not isinstance(module, supported):
            raise ExportError(
                f"unsupported operator in conversion: {type(module).__name__}")

    cfg = model.cfg
    p = cfg.patch_size
    side = cfg.image_size // p
    tokens = cfg.tokens
    state = {k: v.detach().cpu().numpy().astype(np.float32)
             for k, v in model.state_dict().items()}

    g = GraphBuilder()
    eps = cfg.layer_norm_eps

    def linear(x, prefix, name=None):
        w = g.init(f"{prefix}.w", state[f"{prefix}.weight"].T.copy())
        b = g.init(f"{prefix}.b", state[f"{prefix}.bias"])
        return g.op("Add", [g.op("MatMul", [x, w]), b], name=name)

    def layernorm(x, prefix):
        w = g.init(f"{prefix}.w", state[f"{prefix}.weight"])
        b = g.init(f"{prefix}.b", state[f"{prefix}.bias"])
        return g.op("LayerNormalization", [x, w, b],
                    {"axis": -1, "epsilon": float(eps)})

    # patch extraction as reshape/transpose/reshape + linear projection
    shape1 = g.init("shape_split", np.array([0, 3, side, p, side, p], np.int64))
    x = g.op("Reshape", ["input", shape1])
    x = g.op("Transpose", [x], {"perm": [0, 2, 4, 1, 3, 5]})
    shape2 = g.init("shape_patches", np.array([0, side * side, 3 * p * p], np.int64))
    x = g.op("Reshape", [x, shape2])
    patches = linear(x, "patch_embed.proj")

    # class token broadcast to the batch without dynamic shape ops:
    # zero out a per-sample reduction, then add the learned token
    zero = g.init("zero", np.zeros((), np.float32))
    pooled = g.op("ReduceMean", [patches], {"axes": [1], "keepdims": 1})
    cls = g.op("Add", [g.op("Mul", [pooled, zero]),
                       g.init("cls_token", state["cls_token"])])
    x = g.op("Concat", [cls, patches], {"axis": 1})
    x = g.op("Add", [x, g.init("pos_embed", state["pos_embed"])])

    heads = cfg.heads
    hd = cfg.head_dim
    qkv_shape = g.init("shape_qkv", np.array([0, tokens, 3, heads, hd], np.int64))
    merge_shape = g.init("shape_merge", np.array([0, tokens, cfg.dim], np.int64))
    scale = g.init("qk_scale", np.float32(1.0 / math.sqrt(hd)))
    idx = {k: g.init(f"idx{k}", np.array(k, np.int64)) for k in range(3)}
    half = g.init("half", np.float32(0.5))
    one = g.init("one", np.float32(1.0))
    sqrt2 = g.init("sqrt2", np.float32(math.sqrt(2.0)))

    def gelu(x):
        erf = g.op("Erf", [g.op("Div", [x, sqrt2])])
        return g.op("Mul", [g.op("Mul", [x, g.op("Add", [erf, one])]), half])

    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        h = layernorm(x, f"{pre}.norm1")
        qkv = linear(h, f"{pre}.attn.qkv")
        qkv = g.op("Reshape", [qkv, qkv_shape])
        qkv = g.op("Transpose", [qkv], {"perm": [2, 0, 3, 1, 4]})
        q = g.op("Gather", [qkv, idx[0]], {"axis": 0})
        k = g.op("Gather", [qkv, idx[1]], {"axis": 0})
        v = g.op("Gather", [qkv, idx[2]], {"axis": 0})
        q = g.op("Mul", [q, scale])
        kt = g.op("Transpose", [k], {"perm": [0, 1, 3, 2]})
        attn = g.op("Softmax", [g.op("MatMul", [q, kt])], {"axis": -1})
        out = g.op("MatMul", [attn, v])
        out = g.op("Transpose", [out], {"perm": [0, 2, 1, 3]})
        out = g.op("Reshape", [out, merge_shape])
        out = linear(out, f"{pre}.attn.proj")
        out = g.op("Mul", [out, g.init(f"{pre}.ls1", state[f"{pre}.ls1.gamma"])])
        x = g.op("Add", [x, out])

        h = layernorm(x, f"{pre}.norm2")
        h = gelu(linear(h, f"{pre}.mlp.fc1"))
        h = linear(h, f"{pre}.mlp.fc2")
        h = g.op("Mul", [h, g.init(f"{pre}.ls2", state[f"{pre}.ls2.gamma"])])
        x = g.op("Add", [x, h])

    x = layernorm(x, "norm")
    g.op("Gather", [x, g.init("idx_cls", np.array(0, np.int64))],
         {"axis": 1}, name="embedding")

    return encode_model(
        g.nodes, g.initializers,
        ("input", [None, 3, cfg.image_size, cfg.image_size]),
        ("embedding", [None, cfg.dim]))
