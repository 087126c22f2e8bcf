"""Exercise the portable-graph runner against graphs encoded by an
independent minimal writer living in this test."""

import numpy as np
import pytest

from npshape.errors import GraphError
from npshape.graph_runner import load_graph, run_graph


# -- tiny protobuf writer (independent of any production encoder) -----------

def _varint(v):
    if v < 0:
        v += 1 << 64
    out = bytearray()
    while True:
        b = v & 0x7F
        v >>= 7
        if v:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _field(num, wire, payload):
    return _varint(num << 3 | wire) + payload


def _len_field(num, blob):
    return _field(num, 2, _varint(len(blob)) + blob)


def _str_field(num, s):
    return _len_field(num, s.encode())


def tensor(name, arr):
    arr = np.asarray(arr)
    blob = b"".join(_field(1, 0, _varint(int(d))) for d in arr.shape)
    if arr.dtype == np.int64:
        blob += _field(2, 0, _varint(7))
        blob += _len_field(9, arr.astype("<i8").tobytes())
    else:
        blob += _field(2, 0, _varint(1))
        blob += _len_field(9, arr.astype("<f4").tobytes())
    blob += _str_field(8, name)
    return blob


def attr_int(name, v):
    return _str_field(1, name) + _field(3, 0, _varint(v)) + _field(20, 0, _varint(2))


def attr_ints(name, vals):
    packed = b"".join(_varint(v) for v in vals)
    return _str_field(1, name) + _len_field(8, packed) + _field(20, 0, _varint(7))


def node(op, inputs, outputs, attrs=()):
    blob = b"".join(_str_field(1, i) for i in inputs)
    blob += b"".join(_str_field(2, o) for o in outputs)
    blob += _str_field(4, op)
    blob += b"".join(_len_field(5, a) for a in attrs)
    return blob


def value_info(name, dims):
    dim_blobs = b"".join(
        _len_field(1, _field(1, 0, _varint(d)) if d is not None else _str_field(2, "N"))
        for d in dims)
    shape = _len_field(2, dim_blobs)
    tensor_type = _len_field(1, _field(1, 0, _varint(1)) + shape)
    return _str_field(1, name) + _len_field(2, tensor_type)


def model(nodes, initializers, inputs, outputs, opset=17):
    graph = b"".join(_len_field(1, n) for n in nodes)
    graph += _str_field(2, "testgraph")
    graph += b"".join(_len_field(5, t) for t in initializers)
    graph += b"".join(_len_field(11, v) for v in inputs)
    graph += b"".join(_len_field(12, v) for v in outputs)
    blob = _field(1, 0, _varint(8))  # ir_version
    blob += _len_field(8, _str_field(1, "") + _field(2, 0, _varint(opset)))
    blob += _len_field(7, graph)
    return blob


def linear_softmax_model(W, b):
    nodes = [
        node("MatMul", ["X", "W"], ["mm"]),
        node("Add", ["mm", "b"], ["scores"]),
        node("Softmax", ["scores"], ["Y"], [attr_int("axis", -1)]),
    ]
    return model(nodes, [tensor("W", W), tensor("b", b)],
                 [value_info("X", [None, W.shape[0]])],
                 [value_info("Y", [None, W.shape[1]])])


@pytest.fixture
def linear_graph(tmp_path):
    rng = np.random.default_rng(0)
    W = rng.normal(size=(4, 3)).astype(np.float32)
    b = rng.normal(size=(3,)).astype(np.float32)
    p = tmp_path / "linear.onnx"
    p.write_bytes(linear_softmax_model(W, b))
    return p, W, b


class TestRunner:
    def test_matches_numpy_reference(self, linear_graph):
        path, W, b = linear_graph
        g = load_graph(path)
        x = np.random.default_rng(1).normal(size=(5, 4)).astype(np.float32)
        got = run_graph(g, x)
        z = x.astype(np.float64) @ W.astype(np.float64) + b.astype(np.float64)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        want = e / e.sum(axis=1, keepdims=True)
        assert got.dtype == np.float32
        assert np.abs(got - want).max() < 1e-6

    def test_repeat_runs_bitwise_identical(self, linear_graph):
        path, _, _ = linear_graph
        g = load_graph(path)
        x = np.random.default_rng(2).normal(size=(3, 4)).astype(np.float32)
        assert (run_graph(g, x) == run_graph(g, x)).all()

    def test_wrong_input_shape_rejected(self, linear_graph):
        path, _, _ = linear_graph
        g = load_graph(path)
        with pytest.raises(GraphError, match="dim"):
            run_graph(g, np.zeros((2, 5), np.float32))
        with pytest.raises(GraphError, match="rank"):
            run_graph(g, np.zeros((2, 4, 1), np.float32))

    def test_unsupported_operator_listed(self, tmp_path):
        m = model([node("FancyOp", ["X"], ["Y"])], [],
                  [value_info("X", [None, 2])], [value_info("Y", [None, 2])])
        p = tmp_path / "bad.onnx"
        p.write_bytes(m)
        with pytest.raises(GraphError, match="FancyOp"):
            load_graph(p)

    def test_two_inputs_rejected(self, tmp_path):
        m = model([node("Add", ["A", "B"], ["Y"])], [],
                  [value_info("A", [None, 2]), value_info("B", [None, 2])],
                  [value_info("Y", [None, 2])])
        p = tmp_path / "two.onnx"
        p.write_bytes(m)
        with pytest.raises(GraphError, match="one graph input"):
            load_graph(p)

    def test_garbage_file_rejected(self, tmp_path):
        p = tmp_path / "junk.onnx"
        p.write_bytes(b"\xff" * 64)
        with pytest.raises(GraphError):
            load_graph(p)

    def test_newer_opset_rejected(self, tmp_path):
        m = model([node("Identity", ["X"], ["Y"])], [],
                  [value_info("X", [None, 2])], [value_info("Y", [None, 2])],
                  opset=25)
        p = tmp_path / "new.onnx"
        p.write_bytes(m)
        with pytest.raises(GraphError, match="opset"):
            load_graph(p)

    def test_transformer_style_ops(self, tmp_path):
        # LayerNormalization + Reshape/Transpose/Gather round a tiny attention
        rng = np.random.default_rng(3)
        scale = np.ones(6, np.float32)
        bias = np.zeros(6, np.float32)
        shape = np.array([0, 2, 3], np.int64)
        idx = np.array(1, np.int64)
        nodes = [
            node("LayerNormalization", ["X", "scale", "bias"], ["ln"],
                 [attr_int("axis", -1)]),
            node("Reshape", ["ln", "shape"], ["r"]),
            node("Transpose", ["r"], ["t"], [attr_ints("perm", [1, 0, 2])]),
            node("Gather", ["t", "idx"], ["Y"], [attr_int("axis", 0)]),
        ]
        m = model(nodes, [tensor("scale", scale), tensor("bias", bias),
                          tensor("shape", shape), tensor("idx", idx)],
                  [value_info("X", [None, 6])], [value_info("Y", [None, 3])])
        p = tmp_path / "tf.onnx"
        p.write_bytes(m)
        g = load_graph(p)
        x = rng.normal(size=(4, 6)).astype(np.float32)
        got = run_graph(g, x)
        xf = x.astype(np.float64)
        ln = (xf - xf.mean(-1, keepdims=True)) / np.sqrt(
            xf.var(-1, keepdims=True) + 1e-5)
        want = ln.reshape(4, 2, 3).transpose(1, 0, 2)[1]
        assert np.abs(got - want).max() < 1e-6
