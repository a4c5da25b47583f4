import numpy as np
import pytest

from dnnforge import memplan, presets, prune
from dnnforge.ir import Graph, Node, TensorDesc, infer_shapes, toposort
from dnnforge.memplan import (LifetimeTable, first_fit_plan, lifetimes,
                              naive_total, verify_plan)

from conftest import relu_chain, two_conv_graph


def test_lifetimes_chain_example():
    # A -> op1 -> B -> op2 -> C with C the graph output: op1 allocates B,
    # op2 releases B, and the caller-buffer edges A and C never appear.
    g = relu_chain(2)
    t = lifetimes(g)
    assert t.order == ["op1", "op2"]
    assert t.alloc == [["e1"], []]
    assert t.release == [[], ["e1"], []]
    assert set(t.sizes) == {"e1"}


def test_lifetimes_single_op_graph():
    g = relu_chain(1)
    t = lifetimes(g)
    assert t.alloc == [[]]
    assert t.release == [[], []]
    assert t.sizes == {}


def test_lifetimes_diamond_last_consumer():
    g = Graph(name="d", inputs=["x"], outputs=["out"])
    g.edges["x"] = TensorDesc((4,))
    g.nodes.append(Node("A", "ReLU", ["x"], ["a"]))
    g.nodes.append(Node("B", "ReLU", ["a"], ["b"]))
    g.nodes.append(Node("C", "ReLU", ["a"], ["c"]))
    g.nodes.append(Node("D", "Add", ["b", "c"], ["out"]))
    infer_shapes(g)
    t = lifetimes(g)
    # edge a: consumed by B (index 1) and C (index 2); released after C
    assert "a" in t.release[2]


def test_lifetimes_dead_edge_reported():
    g = Graph(name="dead", inputs=["x"], outputs=["y"])
    g.edges["x"] = TensorDesc((4,))
    g.nodes.append(Node("a", "ReLU", ["x"], ["y"]))
    g.nodes.append(Node("b", "ReLU", ["x"], ["unused"]))
    infer_shapes(g)
    with pytest.raises(ValueError, match="dead"):
        lifetimes(g)


def test_lifetimes_defer_release_for_matmul_consumers(trained_mlp):
    g, _ = trained_mlp
    order = toposort(g)
    index = {n.name: i for i, n in enumerate(order)}
    t = lifetimes(g)
    # relu outputs feed Linear nodes, which re-read their input while
    # writing, so the release slips one operator later
    relu_out = "relu1.out"
    consumer = index["fc2"]
    assert relu_out in t.release[consumer + 1]


def test_first_fit_chain_reuse_peak():
    t = LifetimeTable(order=["op1", "op2", "op3"],
                      alloc=[["B"], ["D"], []],
                      release=[[], ["B"], ["D"], []])
    t.sizes = {"B": 200, "D": 100}
    plan = first_fit_plan(t)
    assert plan.offsets["D"] == (0, 100)
    assert plan.peak == 200
    assert naive_total(t) == 300  # the no-reuse bound the planner beats


def test_first_fit_single_tensor():
    t = LifetimeTable(order=["op1", "op2"], alloc=[["A"], []],
                      release=[[], ["A"], []])
    plan = first_fit_plan(t, {"A": 64})
    assert plan.peak == 64


def test_first_fit_fragmented_gap():
    # 50 then 100 live together; the 50 frees but its 52-byte hole cannot
    # hold the next 100, which lands above everything
    t = LifetimeTable(order=["op1", "op2"],
                      alloc=[["small", "big"], ["next"]],
                      release=[[], ["small"], ["big", "next"]])
    plan = first_fit_plan(t, {"small": 50, "big": 100, "next": 100})
    assert plan.offsets["small"] == (0, 52)
    assert plan.offsets["big"] == (52, 100)
    assert plan.offsets["next"] == (152, 100)
    assert plan.peak == 252
    assert verify_plan(plan, t) is None


def test_planner_deterministic():
    g1 = presets.build_lenet(seed=0)
    g2 = presets.build_lenet(seed=0)
    p1 = first_fit_plan(lifetimes(g1))
    p2 = first_fit_plan(lifetimes(g2))
    assert p1.offsets == p2.offsets and p1.peak == p2.peak


def test_verify_accepts_planner_output():
    for g in (presets.build_lenet(), presets.build_mlp((2, 32, 32, 2)),
              presets.build_resnet(), presets.build_alexnet()):
        t = lifetimes(g)
        plan = first_fit_plan(t)
        assert verify_plan(plan, t) is None
        assert plan.peak <= naive_total(t)


def test_verify_flags_overlap():
    t = LifetimeTable(order=["op1"], alloc=[["a", "b"]], release=[[], ["a", "b"]])
    plan = first_fit_plan(t, {"a": 8, "b": 8})
    plan.offsets["b"] = (0, 8)  # collide with a
    v = verify_plan(plan, t)
    assert v is not None and "overlap" in v.message


def test_verify_flags_bad_peak():
    t = LifetimeTable(order=["op1"], alloc=[["a"]], release=[[], ["a"]])
    plan = first_fit_plan(t, {"a": 16})
    plan.peak = 8
    v = verify_plan(plan, t)
    assert v is not None and "peak" in v.message


def test_conv_scratch_lives_one_operator():
    g = presets.build_lenet()
    t = lifetimes(g)
    i = t.order.index("conv1")
    assert "conv1#scratch" in t.alloc[i]
    assert "conv1#scratch" in t.release[i + 1]
    # im2col matrix bytes: C*K*K x Ho*Wo floats
    assert t.sizes["conv1#scratch"] == 1 * 9 * 26 * 26 * 4


def test_no_scratch_for_identity_unroll():
    g = two_conv_graph(seed=0, kernel=1)
    for n in g.nodes:
        if n.op == "Conv2D":
            n.attrs["stride"] = 1
            n.attrs["pad"] = 0
    t = lifetimes(g)
    assert not any(e.endswith("#scratch") for e in t.sizes)


def test_matmul_inputs_never_overlap_outputs():
    # correctness requirement for emitted code: outputs (and scratch) of
    # operators that re-read or widen their input must not alias it
    from dnnforge import quant, trainer

    mlp = presets.build_mlp((2, 32, 32, 2))
    qmlp = quant.ppq(mlp, trainer.make_blobs(64, 2, seed=0).train_x[:32])
    for g in (presets.build_lenet(), mlp, presets.build_resnet(), qmlp):
        t = lifetimes(g)
        plan = first_fit_plan(t)
        index = {name: i for i, name in enumerate(t.order)}
        nodes = {n.name: n for n in g.nodes}
        managed = set(plan.offsets)
        for name, n in nodes.items():
            if n.op not in ("Conv2D", "Linear", "QLinearConv", "QLinearMatMul",
                            "DequantizeLinear"):
                continue
            targets = [e for e in n.outputs if e in managed]
            targets += [e for e in (f"{name}#scratch",) if e in managed]
            for src in n.inputs:
                if src not in managed:
                    continue
                so, ss = plan.offsets[src]
                for tgt in targets:
                    to, ts = plan.offsets[tgt]
                    assert to + ts <= so or so + ss <= to, (name, src, tgt)


def test_peak_bound_and_pruning_effects():
    base = presets.build_mlp((2, 32, 32, 2), seed=0)
    t0 = lifetimes(base)
    p0 = first_fit_plan(t0)
    assert p0.peak <= naive_total(t0)

    # element pruning: shapes unchanged, plan unchanged
    masked = base.copy()
    masked.params["fc2.weight"].values[:, ::2] = 0.0
    p1 = first_fit_plan(lifetimes(masked))
    assert p1.peak == p0.peak and p1.offsets == p0.offsets

    # structural pruning weakly reduces the peak
    shrunk = prune.shrink_structures(base, {"fc1": list(range(8)),
                                            "fc2": list(range(8))})
    p2 = first_fit_plan(lifetimes(shrunk))
    assert p2.peak <= p0.peak


def _random_table(rng) -> tuple[LifetimeTable, dict]:
    """Random chain/diamond/skip topology as an abstract lifetime table."""
    k = int(rng.integers(2, 12))
    alloc = [[] for _ in range(k)]
    release = [[] for _ in range(k + 1)]
    sizes = {}
    live = []
    eid = 0
    for i in range(k):
        # consume up to two live edges (diamond/skip joins)
        rng.shuffle(live)
        for _ in range(int(rng.integers(0, 3))):
            if not live:
                break
            e, born = live.pop()
            # release at this op or defer one slot (mirrors unsafe consumers)
            release[min(i + int(rng.integers(0, 2)), k)].append(e)
        for _ in range(int(rng.integers(1, 3))):
            name = f"t{eid}"
            eid += 1
            alloc[i].append(name)
            sizes[name] = int(rng.integers(1, 400))
            live.append((name, i))
    for e, _ in live:
        release[k].append(e)
    table = LifetimeTable(order=[f"op{i}" for i in range(k)], alloc=alloc,
                          release=release, sizes=sizes)
    table.check()
    return table, sizes


def test_randomized_corpus_small():
    rng = np.random.default_rng(0)
    for _ in range(100):
        table, sizes = _random_table(rng)
        plan = first_fit_plan(table, sizes)
        assert verify_plan(plan, table) is None
        assert plan.peak <= naive_total(table)


def test_table_check_rejects_inconsistencies():
    with pytest.raises(ValueError, match="twice"):
        LifetimeTable(order=["a"], alloc=[["e", "e"]], release=[[], ["e"]]).check()
    with pytest.raises(ValueError, match="mismatch"):
        LifetimeTable(order=["a"], alloc=[["e"]], release=[[], []]).check()
    with pytest.raises(ValueError, match="before"):
        LifetimeTable(order=["a", "b"], alloc=[[], ["e"]],
                      release=[["e"], [], []]).check()
