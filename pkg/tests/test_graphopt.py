import numpy as np

from dnnforge import graphopt, presets, quant, refrun
from dnnforge.ir import Graph, Node, TensorDesc, infer_shapes

from conftest import two_conv_graph


def randomize_bn(g, seed=0):
    rng = np.random.default_rng(seed)
    for n in g.nodes:
        if n.op != "BatchNorm":
            continue
        c = g.params[n.params["gamma"]].values.shape[0]
        g.params[n.params["gamma"]].values = rng.uniform(0.5, 1.5, c).astype(np.float32)
        g.params[n.params["beta"]].values = (rng.standard_normal(c) * 0.2).astype(np.float32)
        g.params[n.params["mean"]].values = (rng.standard_normal(c) * 0.2).astype(np.float32)
        g.params[n.params["var"]].values = rng.uniform(0.5, 2.0, c).astype(np.float32)
    return g


def test_fold_identity_params():
    w = np.random.default_rng(0).standard_normal((3, 2)).astype(np.float32)
    b = np.random.default_rng(1).standard_normal(3).astype(np.float32)
    ones, zeros = np.ones(3, np.float32), np.zeros(3, np.float32)
    w2, b2 = graphopt.fold_bn_params(w, b, ones, zeros, zeros, ones, eps=0.0)
    assert np.array_equal(w2, w)
    assert np.array_equal(b2, b)


def test_fold_scale_cancels():
    # gamma=2, var=4, eps=0: scale 2/sqrt(4) = 1 leaves weights unchanged
    w = np.random.default_rng(2).standard_normal((3, 4)).astype(np.float32)
    b = np.zeros(3, np.float32)
    w2, b2 = graphopt.fold_bn_params(w, b, np.full(3, 2.0), np.zeros(3),
                                     np.zeros(3), np.full(3, 4.0), eps=0.0)
    assert np.allclose(w2, w, rtol=1e-7)
    assert np.array_equal(b2, b)


def _bn_graph(seed=0):
    g = two_conv_graph(seed=seed, channels=(2, 4, 3), hw=5)
    rng = np.random.default_rng(seed + 10)
    for role in ("gamma", "beta", "mean", "var"):
        g.add_param(f"bn.{role}", np.zeros(4, dtype=np.float32))
    relu = g.node("r1")
    g.nodes.insert(1, Node("bn", "BatchNorm", ["e1"], ["e1b"],
                           params={r: f"bn.{r}" for r in ("gamma", "beta", "mean", "var")}))
    relu.inputs[0] = "e1b"
    infer_shapes(g)
    return randomize_bn(g, seed)


def test_fold_conv_bn_equivalence():
    g = _bn_graph(seed=1)
    folded, report = graphopt.fold_batchnorm(g)
    assert report["folded"] == ["bn"]
    assert all(n.op != "BatchNorm" for n in folded.nodes)
    rng = np.random.default_rng(3)
    for _ in range(10):
        x = rng.standard_normal((2, 5, 5)).astype(np.float32)
        a = refrun.run(g, x)
        b = refrun.run(folded, x)
        assert np.allclose(a, b, rtol=1e-5, atol=1e-6)


def test_fold_alexnet_removes_all_bn():
    g = randomize_bn(presets.build_alexnet(seed=0), seed=1)
    folded, report = graphopt.fold_batchnorm(g)
    assert sum(1 for n in folded.nodes if n.op == "BatchNorm") == 0
    assert len(report["folded"]) == 4
    x = np.random.default_rng(4).standard_normal((2, 3, 32, 32))
    a = refrun.forward_batch(g, x)[g.outputs[0]]
    b = refrun.forward_batch(folded, x)[folded.outputs[0]]
    assert np.allclose(a, b, rtol=1e-5, atol=1e-8)


def test_fold_skips_bn_on_input():
    g = Graph(name="b", inputs=["x"], outputs=["y"])
    g.edges["x"] = TensorDesc((3, 4, 4))
    for role in ("gamma", "beta", "mean", "var"):
        g.add_param(f"bn.{role}", np.ones(3, dtype=np.float32))
    g.nodes.append(Node("bn", "BatchNorm", ["x"], ["y"],
                        params={r: f"bn.{r}" for r in ("gamma", "beta", "mean", "var")}))
    infer_shapes(g)
    folded, report = graphopt.fold_batchnorm(g)
    assert report["skipped"] == ["bn"]
    assert any(n.op == "BatchNorm" for n in folded.nodes)


def test_fold_skips_multi_consumer_producer():
    g = _bn_graph(seed=2)
    # add a second consumer of the conv output
    g.nodes.append(Node("extra", "ReLU", ["e1"], ["extra_out"]))
    g.outputs = ["e4"]
    infer_shapes(g)
    g.nodes.append(Node("fl2", "Flatten", ["extra_out"], ["dead"]))
    infer_shapes(g)
    folded, report = graphopt.fold_batchnorm(g)
    assert "bn" in report["skipped"]


def test_fold_idempotent():
    g = _bn_graph(seed=3)
    f1, _ = graphopt.fold_batchnorm(g)
    f2, rep = graphopt.fold_batchnorm(f1)
    assert rep["folded"] == []
    for k in f1.params:
        assert np.array_equal(f2.params[k].values, f1.params[k].values)


def _quantized_mlp(blobs, trained_mlp):
    g, _ = trained_mlp
    return quant.ppq(g, blobs.train_x[:64])


def test_fuse_relu_sets_clamp(trained_mlp, blobs):
    qg = _quantized_mlp(blobs, trained_mlp)
    fused, report = graphopt.fuse_relu(qg)
    assert len(report["fused"]) == 2
    for n in fused.nodes:
        if n.op == "QLinearMatMul" and n.name in ("fc1", "fc2"):
            assert int(n.attr("clamp_min")) == fused.edges[n.outputs[0]].quant.zero_point
    # bit-exact u8 equivalence
    for x in blobs.test_x[:10]:
        assert np.array_equal(refrun.run(qg, x), refrun.run(fused, x))


def test_fuse_relu_clamp_floor_is_zp():
    # fused node output bytes never fall below the zero point
    rng = np.random.default_rng(0)
    from dnnforge.ir import QuantParams

    q_x = QuantParams(0.02, 7)
    q_w = QuantParams(0.01, 128)
    q_y = QuantParams(0.05, 128)
    w = rng.integers(0, 256, (4, 6)).astype(np.uint8)
    x = rng.integers(0, 256, 6).astype(np.uint8)
    b = np.zeros(4, dtype=np.int32)
    y = refrun.qlinear(w, q_w, b, x, q_x, q_y, clamp_min=q_y.zero_point)
    assert y.min() >= 128
    unfused = refrun.relu_u8(refrun.qlinear(w, q_w, b, x, q_x, q_y), q_y.zero_point)
    assert np.array_equal(y, unfused)


def test_fuse_skips_multi_consumer(trained_mlp, blobs):
    qg = _quantized_mlp(blobs, trained_mlp)
    relu = next(n for n in qg.nodes if n.op == "ReLU")
    qg.nodes.append(Node("tap", "Flatten", [relu.inputs[0]], ["tap_out"]))
    infer_shapes(qg)
    fused, report = graphopt.fuse_relu(qg)
    assert relu.name not in report["fused"]
    assert any(n.name == relu.name for n in fused.nodes)


def test_fuse_zero_zp_is_value_noop(trained_mlp, blobs):
    qg = _quantized_mlp(blobs, trained_mlp)
    relu = next(n for n in qg.nodes if n.op == "ReLU")
    src = qg.edges[relu.inputs[0]]
    src.quant.zero_point = 0  # force: all stored values already >= 0 point
    fused, _ = graphopt.fuse_relu(qg)
    prod = next(n for n in fused.nodes if n.op == "QLinearMatMul" and relu.outputs[0] in n.outputs)
    assert int(prod.attr("clamp_min")) == 0


def test_passes_preserve_io():
    g = randomize_bn(presets.build_alexnet(seed=5), seed=6)
    out_shape = g.edges[g.outputs[0]].shape
    folded, _ = graphopt.fold_batchnorm(g)
    assert folded.inputs == g.inputs and folded.outputs == g.outputs
    assert folded.edges[folded.outputs[0]].shape == out_shape


def test_fuse_idempotent(trained_mlp, blobs):
    qg = _quantized_mlp(blobs, trained_mlp)
    f1, r1 = graphopt.fuse_relu(qg)
    f2, r2 = graphopt.fuse_relu(f1)
    assert r2["fused"] == []
    assert [n.name for n in f2.nodes] == [n.name for n in f1.nodes]
