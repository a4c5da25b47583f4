import json

import numpy as np
import pytest

from dnnforge import presets
from dnnforge.ir import (Graph, Node, ParseError, TensorDesc, ValidationError,
                         infer_shapes, load_model, save_model, toposort)


def test_lenet_preset_structure():
    g = presets.build_lenet()
    ops = [n.op for n in g.nodes]
    assert ops.count("Conv2D") == 2
    assert ops.count("Linear") == 2
    assert "MaxPool" in ops and "ReLU" in ops and "Softmax" in ops
    g.validate()


def test_empty_identity_graph(tmp_path):
    g = Graph(name="ident", inputs=["x"], outputs=["x"])
    g.edges["x"] = TensorDesc((4,))
    g.validate()
    path = save_model(g, str(tmp_path / "ident"))
    g2 = load_model(path)
    assert g2.inputs == g2.outputs == ["x"]
    assert not g2.nodes


def test_dangling_edge_error():
    g = Graph(name="bad", inputs=["x"], outputs=["y"])
    g.edges["x"] = TensorDesc((4,))
    g.nodes.append(Node("r", "ReLU", ["nowhere"], ["y"]))
    with pytest.raises(ValidationError, match="nowhere"):
        g.validate()


def test_duplicate_producer_error():
    g = Graph(name="bad", inputs=["x"], outputs=["y"])
    g.edges["x"] = TensorDesc((4,))
    g.nodes.append(Node("a", "ReLU", ["x"], ["y"]))
    g.nodes.append(Node("b", "ReLU", ["x"], ["y"]))
    with pytest.raises(ValidationError, match="produced by both"):
        g.validate()


def test_cycle_detected():
    g = Graph(name="bad", inputs=["x"], outputs=["c"])
    g.edges["x"] = TensorDesc((4,))
    g.nodes.append(Node("a", "Add", ["x", "c"], ["b"]))
    g.nodes.append(Node("b", "ReLU", ["b"], ["c"]))
    with pytest.raises(ValidationError, match="cycle"):
        toposort(g)


def test_arity_and_attr_validation():
    bad_arity = Node("n", "ReLU", ["a", "b"], ["c"])
    with pytest.raises(ValidationError, match="'n'"):
        bad_arity.validate()
    missing_attr = Node("n", "Conv2D", ["a"], ["b"],
                        params={"weight": "w", "bias": "b"})
    with pytest.raises(ValidationError, match="kernel"):
        missing_attr.validate()
    unknown_attr = Node("n", "ReLU", ["a"], ["b"], attrs={"bogus": 1})
    with pytest.raises(ValidationError, match="bogus"):
        unknown_attr.validate()
    bad_roles = Node("n", "Linear", ["a"], ["b"], params={"weight": "w"})
    with pytest.raises(ValidationError, match="roles"):
        bad_roles.validate()


def chain_graph(names):
    g = Graph(name="chain", inputs=["e0"], outputs=[f"e{len(names)}"])
    g.edges["e0"] = TensorDesc((4,))
    for i, name in enumerate(names):
        g.nodes.append(Node(name, "ReLU", [f"e{i}"], [f"e{i + 1}"]))
    return g


def test_toposort_chain_and_single():
    g = chain_graph(["a", "b", "c"])
    assert [n.name for n in toposort(g)] == ["a", "b", "c"]
    g1 = chain_graph(["only"])
    assert [n.name for n in toposort(g1)] == ["only"]


def test_toposort_diamond_tiebreak():
    # A -> B, A -> C, (B, C) -> D; manifest order [A, B, C, D].
    # Kahn by hand: A first; then B and C both ready, index tie-break -> B.
    g = Graph(name="d", inputs=["x"], outputs=["out"])
    g.edges["x"] = TensorDesc((4,))
    g.nodes.append(Node("A", "ReLU", ["x"], ["a"]))
    g.nodes.append(Node("B", "ReLU", ["a"], ["b"]))
    g.nodes.append(Node("C", "ReLU", ["a"], ["c"]))
    g.nodes.append(Node("D", "Add", ["b", "c"], ["out"]))
    assert [n.name for n in toposort(g)] == ["A", "B", "C", "D"]
    # swapping manifest order of B and C flips the tie-break
    g.nodes[1], g.nodes[2] = g.nodes[2], g.nodes[1]
    assert [n.name for n in toposort(g)] == ["A", "C", "B", "D"]


def test_infer_shapes_lenet_chain():
    g = presets.build_lenet()
    assert g.edges["conv1.out"].shape == (32, 26, 26)
    assert g.edges["conv2.out"].shape == (64, 24, 24)
    assert g.edges["pool.out"].shape == (64, 12, 12)
    assert g.edges["flatten.out"].shape == (9216,)
    assert g.edges["fc1.out"].shape == (128,)
    assert g.edges[g.outputs[0]].shape == (10,)


def test_infer_shapes_alexnet_flatten():
    g = presets.build_alexnet()
    assert g.edges["flatten.out"].shape == (6400,)


def test_infer_shapes_idempotent():
    g = presets.build_lenet()
    before = {k: (v.shape, v.dtype) for k, v in g.edges.items()}
    infer_shapes(g)
    after = {k: (v.shape, v.dtype) for k, v in g.edges.items()}
    assert before == after


def test_conv_stride_too_large():
    g = Graph(name="bad", inputs=["x"], outputs=["y"])
    g.edges["x"] = TensorDesc((1, 3, 3))
    g.add_param("w", np.zeros((1, 1, 5, 5), dtype=np.float32))
    g.add_param("b", np.zeros(1, dtype=np.float32))
    g.nodes.append(Node("c", "Conv2D", ["x"], ["y"], attrs={"kernel": 5},
                        params={"weight": "w", "bias": "b"}))
    with pytest.raises(ValidationError, match="'c'"):
        infer_shapes(g)


def test_linear_size_mismatch():
    g = Graph(name="bad", inputs=["x"], outputs=["y"])
    g.edges["x"] = TensorDesc((5,))
    g.add_param("w", np.zeros((2, 4), dtype=np.float32))
    g.add_param("b", np.zeros(2, dtype=np.float32))
    g.nodes.append(Node("fc", "Linear", ["x"], ["y"],
                        params={"weight": "w", "bias": "b"}))
    with pytest.raises(ValidationError, match="'fc'"):
        infer_shapes(g)


def test_bundle_roundtrip_bitexact(tmp_path):
    g = presets.build_mlp((2, 8, 2), seed=3)
    path = save_model(g, str(tmp_path / "m"))
    g2 = load_model(path)
    assert [n.name for n in g2.nodes] == [n.name for n in g.nodes]
    for name, p in g.params.items():
        assert np.array_equal(g2.params[name].values, p.values)
        assert g2.params[name].values.dtype == p.values.dtype
    assert g2.meta["baseline_params"] == g.meta["baseline_params"]


def test_truncated_blob_error(tmp_path):
    g = presets.build_mlp((2, 4, 2), seed=0)
    path = save_model(g, str(tmp_path / "m"))
    bin_path = str(tmp_path / "m.bin")
    with open(bin_path, "rb") as f:
        raw = f.read()
    with open(bin_path, "wb") as f:
        f.write(raw[:-5])
    with pytest.raises(ParseError, match="truncated"):
        load_model(path)


def test_manifest_parse_errors(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{not json")
    (tmp_path / "x.bin").write_bytes(b"")
    with pytest.raises(ParseError):
        load_model(str(p))
    p.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(ParseError, match="manifest"):
        load_model(str(p))


def test_u8_edge_requires_quant():
    d = TensorDesc((4,), dtype="u8")
    with pytest.raises(ValidationError, match="quantization"):
        d.validate("edge")


def test_crs_layout_needs_2d():
    d = TensorDesc((4, 2, 2), layout="crs")
    with pytest.raises(ValidationError, match="2-D"):
        d.validate("param")
