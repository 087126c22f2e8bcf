"""Portable neural-network graph runner.

Loads a serialized graph in the open neural-network exchange format
(single input tensor, single output tensor) and executes it with numpy.
Only the operator subset documented in SUPPORTED_OPS is accepted; anything
else fails loudly with the operator name. Arithmetic runs in float64 and
the result is cast to float32, so repeated runs are bitwise identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .errors import GraphError

# protobuf wire types
_VARINT, _I64, _LEN, _I32 = 0, 1, 2, 5

_F32 = 1   # tensor element types
_I64T = 7

_MAX_SUPPORTED_OPSET = 17


def _read_varint(buf, pos):
    result = 0
    shift = 0
    while True:
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise GraphError("corrupt varint")


def _signed(v):
    return v - (1 << 64) if v >= (1 << 63) else v


def _parse_fields(buf):
    """Decode one protobuf message into {field_number: [(wire_type, value)]}."""
    fields = {}
    pos = 0
    n = len(buf)
    while pos < n:
        key, pos = _read_varint(buf, pos)
        fno, wt = key >> 3, key & 7
        if wt == _VARINT:
            val, pos = _read_varint(buf, pos)
        elif wt == _I64:
            val = bytes(buf[pos:pos + 8])
            pos += 8
        elif wt == _LEN:
            ln, pos = _read_varint(buf, pos)
            val = buf[pos:pos + ln]
            pos += ln
        elif wt == _I32:
            val = bytes(buf[pos:pos + 4])
            pos += 4
        else:
            raise GraphError(f"unsupported protobuf wire type {wt}")
        fields.setdefault(fno, []).append((wt, val))
    return fields


def _varint_list(entries):
    """Repeated int64 field: either one varint per entry or packed bytes."""
    out = []
    for wt, val in entries:
        if wt == _VARINT:
            out.append(_signed(val))
        else:
            pos = 0
            while pos < len(val):
                v, pos = _read_varint(val, pos)
                out.append(_signed(v))
    return out


def _parse_tensor(buf):
    f = _parse_fields(buf)
    dims = _varint_list(f.get(1, []))
    dtype = f[2][0][1] if 2 in f else _F32
    name = bytes(f[8][0][1]).decode() if 8 in f else ""
    if 9 in f:  # raw_data, little-endian
        raw = f[9][0][1]
        if dtype == _F32:
            arr = np.frombuffer(raw, dtype="<f4")
        elif dtype == _I64T:
            arr = np.frombuffer(raw, dtype="<i8")
        else:
            raise GraphError(f"tensor {name!r}: unsupported element type {dtype}")
    elif dtype == _F32 and 4 in f:
        vals = []
        for wt, val in f[4]:
            if wt == _I32:
                vals.append(struct.unpack("<f", val)[0])
            else:
                vals.extend(np.frombuffer(val, dtype="<f4"))
        arr = np.asarray(vals, dtype=np.float32)
    elif dtype == _I64T and 7 in f:
        arr = np.asarray(_varint_list(f[7]), dtype=np.int64)
    else:
        arr = np.zeros(0, dtype=np.float32 if dtype == _F32 else np.int64)
    if dtype == _F32:
        arr = arr.astype(np.float64)
    return name, arr.reshape(dims) if dims else arr.reshape(())


def _parse_attribute(buf):
    f = _parse_fields(buf)
    name = bytes(f[1][0][1]).decode()
    if 2 in f:
        return name, struct.unpack("<f", f[2][0][1])[0]
    if 3 in f:
        return name, _signed(f[3][0][1])
    if 5 in f:
        return name, _parse_tensor(f[5][0][1])[1]
    if 7 in f:
        vals = []
        for wt, val in f[7]:
            if wt == _I32:
                vals.append(struct.unpack("<f", val)[0])
            else:
                vals.extend(np.frombuffer(val, dtype="<f4").tolist())
        return name, vals
    if 8 in f:
        return name, _varint_list(f[8])
    if 4 in f:
        return name, bytes(f[4][0][1])
    return name, None


def _parse_value_info(buf):
    """Returns (name, [dim or None, ...]); None marks a dynamic dimension."""
    f = _parse_fields(buf)
    name = bytes(f[1][0][1]).decode()
    dims = []
    if 2 in f:
        type_f = _parse_fields(f[2][0][1])
        if 1 in type_f:  # tensor_type
            tt = _parse_fields(type_f[1][0][1])
            if 2 in tt:  # shape
                shape_f = _parse_fields(tt[2][0][1])
                for _, dbuf in shape_f.get(1, []):
                    df = _parse_fields(dbuf)
                    if 1 in df:
                        dims.append(int(df[1][0][1]))
                    else:
                        dims.append(None)
    return name, dims


@dataclass
class Node:
    op_type: str
    inputs: list
    outputs: list
    attrs: dict
    name: str = ""


@dataclass
class Graph:
    nodes: list
    initializers: dict
    input_name: str
    input_dims: list
    output_name: str
    output_dims: list


def load_graph(path) -> Graph:
    """Parse a graph file and validate the single-input/single-output contract."""
    buf = memoryview(Path(path).read_bytes())
    try:
        model = _parse_fields(buf)
    except (GraphError, IndexError, struct.error) as e:
        raise GraphError(f"{path}: cannot parse model: {e}")
    if 7 not in model:
        raise GraphError(f"{path}: file has no graph")
    for _, op_buf in model.get(8, []):
        op_f = _parse_fields(op_buf)
        domain = bytes(op_f[1][0][1]).decode() if 1 in op_f else ""
        version = op_f[2][0][1] if 2 in op_f else 0
        if domain == "" and version > _MAX_SUPPORTED_OPSET:
            raise GraphError(
                f"{path}: opset {version} newer than supported {_MAX_SUPPORTED_OPSET}")
    g = _parse_fields(model[7][0][1])

    initializers = {}
    for _, tbuf in g.get(5, []):
        name, arr = _parse_tensor(tbuf)
        initializers[name] = arr

    nodes = []
    for _, nbuf in g.get(1, []):
        f = _parse_fields(nbuf)
        nodes.append(Node(
            op_type=bytes(f[4][0][1]).decode() if 4 in f else "",
            inputs=[bytes(v).decode() for _, v in f.get(1, [])],
            outputs=[bytes(v).decode() for _, v in f.get(2, [])],
            attrs=dict(_parse_attribute(ab) for _, ab in f.get(5, [])),
            name=bytes(f[3][0][1]).decode() if 3 in f else "",
        ))

    graph_inputs = [_parse_value_info(b) for _, b in g.get(11, [])]
    graph_outputs = [_parse_value_info(b) for _, b in g.get(12, [])]
    real_inputs = [(n, d) for n, d in graph_inputs if n not in initializers]
    if len(real_inputs) != 1:
        raise GraphError(
            f"{path}: expected exactly one graph input, found "
            f"{[n for n, _ in real_inputs]}")
    if len(graph_outputs) != 1:
        raise GraphError(
            f"{path}: expected exactly one graph output, found "
            f"{[n for n, _ in graph_outputs]}")

    unsupported = sorted({n.op_type for n in nodes} - set(SUPPORTED_OPS))
    if unsupported:
        raise GraphError(f"{path}: unsupported operators: {', '.join(unsupported)}")

    return Graph(nodes=nodes, initializers=initializers,
                 input_name=real_inputs[0][0], input_dims=real_inputs[0][1],
                 output_name=graph_outputs[0][0], output_dims=graph_outputs[0][1])


# ---------------------------------------------------------------------------
# operator kernels

def _op_reshape(node, data, shape):
    target = [int(s) for s in np.asarray(shape).reshape(-1)]
    out = []
    for i, s in enumerate(target):
        if s == 0:
            out.append(data.shape[i])
        else:
            out.append(s)
    return data.reshape(out)


def _op_gather(node, data, indices):
    axis = int(node.attrs.get("axis", 0))
    return np.take(data, np.asarray(indices, dtype=np.int64), axis=axis)


def _op_softmax(node, x):
    axis = int(node.attrs.get("axis", -1))
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def _op_layernorm(node, x, scale, bias=None):
    axis = int(node.attrs.get("axis", -1))
    eps = float(node.attrs.get("epsilon", 1e-5))
    axes = tuple(range(axis % x.ndim, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=axes, keepdims=True)
    y = (x - mean) / np.sqrt(var + eps) * scale
    return y + bias if bias is not None else y


def _op_reduce_mean(node, x):
    axes = node.attrs.get("axes")
    keep = bool(node.attrs.get("keepdims", 1))
    axes = tuple(int(a) for a in axes) if axes else None
    return x.mean(axis=axes, keepdims=keep)


SUPPORTED_OPS = {
    "MatMul": lambda node, a, b: np.matmul(a, b),
    "Add": lambda node, a, b: a + b,
    "Sub": lambda node, a, b: a - b,
    "Mul": lambda node, a, b: a * b,
    "Div": lambda node, a, b: a / b,
    "Sqrt": lambda node, a: np.sqrt(a),
    "Erf": lambda node, a: special.erf(a),
    "Transpose": lambda node, a: np.transpose(a, node.attrs["perm"]),
    "Concat": lambda node, *xs: np.concatenate(xs, axis=int(node.attrs["axis"])),
    "Identity": lambda node, a: a,
    "Reshape": _op_reshape,
    "Gather": _op_gather,
    "Softmax": _op_softmax,
    "LayerNormalization": _op_layernorm,
    "ReduceMean": _op_reduce_mean,
}


def run_graph(graph: Graph, batch) -> np.ndarray:
    """Execute the graph on an input batch; returns float32."""
    batch = np.asarray(batch)
    declared = graph.input_dims
    if declared and batch.ndim != len(declared):
        raise GraphError(
            f"input rank {batch.ndim} does not match declared rank {len(declared)}")
    for i, d in enumerate(declared):
        if d is not None and batch.shape[i] != d:
            raise GraphError(
                f"input dim {i} is {batch.shape[i]}, graph declares {d}")
    values = dict(graph.initializers)
    values[graph.input_name] = batch.astype(np.float64)
    for node in graph.nodes:
        try:
            args = [values[name] for name in node.inputs]
        except KeyError as e:
            raise GraphError(
                f"node {node.name or node.op_type}: input {e} not yet computed "
                f"(graph not topologically sorted?)")
        result = SUPPORTED_OPS[node.op_type](node, *args)
        values[node.outputs[0]] = result
    if graph.output_name not in values:
        raise GraphError(f"graph never produced its output {graph.output_name!r}")
    out = values[graph.output_name]
    if graph.output_dims:
        for i, d in enumerate(graph.output_dims):
            if d is not None and out.shape[i] != d:
                raise GraphError(
                    f"output dim {i} is {out.shape[i]}, graph declares {d}")
    return np.asarray(out, dtype=np.float32)


def declared_output_width(path) -> int | None:
    g = _load_cached(path)
    return g.output_dims[-1] if g.output_dims else None


_cache = {}


def _load_cached(path) -> Graph:
    p = Path(path).resolve()
    st = p.stat()
    key = (str(p), st.st_size, st.st_mtime_ns)
    if key not in _cache:
        _cache.clear()  # one graph at a time; they can be large
        _cache[key] = load_graph(p)
    return _cache[key]


def run_graph_cached(path, batch) -> np.ndarray:
    return run_graph(_load_cached(path), batch)
