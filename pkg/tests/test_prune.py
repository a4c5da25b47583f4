import math

import numpy as np
import pytest

from dnnforge import presets, prune, refrun, trainer
from dnnforge.ir import Node, infer_shapes

from conftest import two_conv_graph


def eq1(s_i, s_f, t, t0, n, dt):
    # independent evaluation of the cubic ramp
    return s_f + (s_i - s_f) * (1.0 - (t - t0) / (n * dt)) ** 3


def test_agp_boundary_values():
    s = prune.PruneSchedule(kind="agp", s_i=0.1, s_f=0.8, t0=3, n=4, dt=2)
    assert prune.agp_sparsity(s, 3) == pytest.approx(0.1)
    assert prune.agp_sparsity(s, 11) == pytest.approx(0.8)
    assert prune.agp_sparsity(s, 100) == pytest.approx(0.8)
    assert prune.agp_sparsity(s, 0) == pytest.approx(0.1)


def test_agp_midpoint_hand_value():
    s = prune.PruneSchedule(kind="agp", s_i=0.0, s_f=0.9, t0=0, n=2, dt=5)
    assert prune.agp_sparsity(s, 5) == pytest.approx(0.7875, abs=1e-12)


def test_agp_clamps_to_step_boundary():
    s = prune.PruneSchedule(kind="agp", s_i=0.0, s_f=0.9, t0=0, n=2, dt=5)
    assert prune.agp_sparsity(s, 7) == prune.agp_sparsity(s, 5)


def test_agp_monotone():
    s = prune.PruneSchedule(kind="agp", s_i=0.05, s_f=0.95, t0=2, n=7, dt=3)
    values = [prune.agp_sparsity(s, t) for t in range(0, 40)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    for t in range(2, 2 + 7 * 3 + 1, 3):
        assert prune.agp_sparsity(s, t) == pytest.approx(eq1(0.05, 0.95, t, 2, 7, 3), abs=1e-12)


def test_schedule_validation():
    with pytest.raises(ValueError):
        prune.PruneSchedule(kind="agp", s_i=0.9, s_f=0.5)
    with pytest.raises(ValueError):
        prune.PruneSchedule(kind="agp", n=0)
    with pytest.raises(ValueError):
        prune.PruneSchedule(kind="nope")


def test_rank_elements_level():
    h = prune.Heuristic("level")
    order = prune.rank_elements(np.array([0.1, -0.5, 0.3, 0.05]), h)
    assert order.tolist() == [3, 0, 2, 1]


def test_rank_elements_ties_by_flat_index():
    h = prune.Heuristic("level")
    order = prune.rank_elements(np.full(5, 0.25), h)
    assert order.tolist() == [0, 1, 2, 3, 4]


def test_rank_elements_random_seeded():
    h = prune.Heuristic("random", seed=7)
    a = prune.rank_elements(np.zeros(10), h, name="w")
    b = prune.rank_elements(np.zeros(10), h, name="w")
    assert np.array_equal(a, b)
    c = prune.rank_elements(np.zeros(10), prune.Heuristic("random", seed=8), name="w")
    assert not np.array_equal(a, c)


def test_rank_mode_mismatch():
    with pytest.raises(ValueError, match="element"):
        prune.rank_elements(np.zeros(4), prune.Heuristic("l1"))
    g = two_conv_graph()
    with pytest.raises(ValueError, match="structural"):
        prune.rank_structures(g, "c1", prune.Heuristic("level"))


def test_rank_structures_l1_hand_example():
    g = two_conv_graph(channels=(1, 3, 2), hw=4)
    w = g.params["c1.weight"]
    # filters with L1 norms 2.0, 0.5, 1.0 -> ascending importance [1, 2, 0]
    w.values = np.zeros((3, 1, 2, 2), dtype=np.float32)
    w.values[0, 0, 0, 0] = 2.0
    w.values[1, 0, 0, 0] = 0.5
    w.values[2, 0, 0, 0] = -1.0
    order = prune.rank_structures(g, "c1", prune.Heuristic("l1"))
    assert order.tolist() == [1, 2, 0]
    order2 = prune.rank_structures(g, "c1", prune.Heuristic("l2"))
    assert order2.tolist() == [1, 2, 0]


def test_rank_structures_gradient_and_activation(blobs):
    g = presets.build_mlp((2, 8, 2), seed=0)
    calib = (blobs.train_x[:16], blobs.train_y[:16])
    for kind in ("gradient", "activation_zeros"):
        with pytest.raises(ValueError, match="calibration"):
            prune.rank_structures(g, "fc1", prune.Heuristic(kind))
        order = prune.rank_structures(g, "fc1", prune.Heuristic(kind, calib=calib))
        assert sorted(order.tolist()) == list(range(8))


def test_apply_element_mask():
    g = two_conv_graph()
    w = g.params["c1.weight"].values
    mask = np.zeros(w.shape, dtype=bool)
    mask[0] = True
    g2 = prune.apply_element_mask(g, {"c1.weight": mask})
    assert np.all(g2.params["c1.weight"].values[0] == 0)
    assert g2.params["c1.weight"].desc.shape == g.params["c1.weight"].desc.shape
    assert not np.all(g.params["c1.weight"].values[0] == 0)  # original untouched


def test_apply_empty_mask_is_identity():
    g = two_conv_graph()
    g2 = prune.apply_element_mask(g, {})
    for k in g.params:
        assert np.array_equal(g2.params[k].values, g.params[k].values)


def test_apply_mask_shape_mismatch():
    g = two_conv_graph()
    with pytest.raises(ValueError, match="shape"):
        prune.apply_element_mask(g, {"c1.weight": np.zeros((1, 1), dtype=bool)})


def test_shrink_propagates_to_next_conv():
    g = two_conv_graph(channels=(3, 3, 4))
    shrunk = prune.shrink_structures(g, {"c1": [0, 2]})
    assert shrunk.params["c1.weight"].desc.shape == (2, 3, 2, 2)
    assert shrunk.params["c1.bias"].desc.shape == (2,)
    assert shrunk.params["c2.weight"].desc.shape == (4, 2, 2, 2)
    # surviving channels carry the original values
    assert np.array_equal(shrunk.params["c2.weight"].values,
                          g.params["c2.weight"].values[:, [0, 2]])
    infer_shapes(shrunk)


def test_shrink_equals_mask_exactly():
    g = two_conv_graph(channels=(3, 3, 4))
    keep = {"c1": [1]}
    masks = prune.structural_masks(g, keep)
    masked = prune.apply_element_mask(g, masks)
    shrunk = prune.shrink_structures(g, keep)
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.standard_normal((3, 6, 6)).astype(np.float32)
        assert np.array_equal(refrun.run(masked, x), refrun.run(shrunk, x))


def test_shrink_through_flatten_into_linear(blobs):
    # conv -> flatten -> linear: removing a filter removes a column band
    g = two_conv_graph(channels=(2, 4, 3), hw=5)
    rng = np.random.default_rng(1)
    feat = g.edges["e4"].shape[0]
    g.add_param("h.weight", rng.standard_normal((2, feat)).astype(np.float32) * 0.3)
    g.add_param("h.bias", np.zeros(2, dtype=np.float32))
    g.nodes.append(Node("h", "Linear", ["e4"], ["l"], params={"weight": "h.weight", "bias": "h.bias"}))
    g.nodes.append(Node("s", "Softmax", ["l"], ["p"]))
    g.outputs = ["p"]
    infer_shapes(g)
    keep = {"c2": [0, 2]}
    shrunk = prune.shrink_structures(g, keep)
    spatial = g.edges["e3"].shape[1] * g.edges["e3"].shape[2]
    assert shrunk.params["h.weight"].desc.shape == (2, 2 * spatial)
    x = rng.standard_normal((2, 5, 5)).astype(np.float32)
    masked = prune.apply_element_mask(g, prune.structural_masks(g, keep))
    assert np.array_equal(refrun.run(masked, x), refrun.run(shrunk, x))


def test_shrink_with_batchnorm_between():
    g = two_conv_graph(channels=(2, 4, 3), hw=5)
    rng = np.random.default_rng(2)
    # splice a BatchNorm between c1 and r1
    for role, v in (("gamma", rng.uniform(0.5, 1.5, 4)), ("beta", rng.standard_normal(4) * 0.1),
                    ("mean", rng.standard_normal(4) * 0.1), ("var", rng.uniform(0.5, 2.0, 4))):
        g.add_param(f"bn.{role}", v.astype(np.float32))
    relu = g.node("r1")
    g.nodes.insert(1, Node("bn", "BatchNorm", ["e1"], ["e1b"],
                           params={r: f"bn.{r}" for r in ("gamma", "beta", "mean", "var")}))
    relu.inputs[0] = "e1b"
    infer_shapes(g)
    keep = {"c1": [0, 3]}
    shrunk = prune.shrink_structures(g, keep)
    assert shrunk.params["bn.gamma"].desc.shape == (2,)
    masked = prune.apply_element_mask(g, prune.structural_masks(g, keep))
    x = rng.standard_normal((2, 5, 5)).astype(np.float32)
    assert np.array_equal(refrun.run(masked, x), refrun.run(shrunk, x))


def test_shrink_protects_graph_output():
    g = presets.build_mlp((2, 8, 2), seed=0)
    with pytest.raises(ValueError, match="output"):
        prune.shrink_structures(g, {"fc2": [0]})


def test_shrink_rejects_empty_keep_list():
    g = two_conv_graph()
    with pytest.raises(ValueError, match="empties"):
        prune.shrink_structures(g, {"c1": []})


def test_shrink_rejects_add_join():
    g = presets.build_resnet(seed=0)
    with pytest.raises(ValueError, match="Add"):
        prune.shrink_structures(g, {"b1_conv2": [0, 1]})


def test_structural_targets_skip_protected():
    g = presets.build_mlp((2, 8, 8, 2), seed=0)
    assert prune.structural_targets(g) == ["fc1", "fc2"]


def test_element_zero_fraction_window(trained_mlp, blobs):
    g, _ = trained_mlp
    g = g.copy()
    hook = prune.schedule_hook(prune.PruneSchedule(kind="one_shot", s_f=0.37, t0=0),
                               prune.Heuristic("level"))
    trainer.train(g, blobs, trainer.TrainConfig(lr=1e-3, epochs=1, batch_size=64, seed=0),
                  hooks=[hook])
    for name in prune.prunable_weights(g):
        w = g.params[name].values
        frac = float((w == 0).mean())
        assert 0.37 <= frac <= 0.37 + 1.0 / w.size


def test_agp_masks_monotone(blobs):
    g = presets.build_mlp((2, 16, 2), seed=0)
    sched = prune.PruneSchedule(kind="agp", s_f=0.8, t0=0, n=4, dt=1)
    hook = prune.schedule_hook(sched, prune.Heuristic("level"))
    snapshots = []

    class Spy:
        def on_epoch_begin(self, epoch, graph, ctx):
            snapshots.append({k: m.copy() for k, m in hook.masks.items()})

    trainer.train(g, blobs, trainer.TrainConfig(lr=1e-2, epochs=6, batch_size=32, seed=0),
                  hooks=[hook, Spy()])
    for before, after in zip(snapshots, snapshots[1:]):
        for k, m in before.items():
            assert np.all(after[k][m])  # once pruned, stays pruned


def test_agp_event_count_example(blobs):
    g = presets.build_mlp((2, 16, 2), seed=0)
    hook = prune.schedule_hook(prune.PruneSchedule(kind="agp", s_f=0.5, t0=0, n=5, dt=2),
                               prune.Heuristic("level"))
    trainer.train(g, blobs, trainer.TrainConfig(lr=1e-2, epochs=10, batch_size=32, seed=0),
                  hooks=[hook])
    assert len(hook.events) == 5


def test_zero_target_is_noop(blobs):
    g = presets.build_mlp((2, 16, 2), seed=0)
    hook = prune.schedule_hook(prune.PruneSchedule(kind="agp", s_f=0.0, t0=0, n=2, dt=1),
                               prune.Heuristic("level"))
    trainer.train(g, blobs, trainer.TrainConfig(lr=1e-2, epochs=4, batch_size=32, seed=0),
                  hooks=[hook])
    assert hook.events == []
    assert hook.masks == {}


def test_one_shot_single_event(blobs):
    g = presets.build_mlp((2, 16, 2), seed=0)
    hook = prune.schedule_hook(prune.PruneSchedule(kind="one_shot", s_f=0.5, t0=5),
                               prune.Heuristic("level"))
    g, metrics = trainer.train(g, blobs, trainer.TrainConfig(lr=1e-2, epochs=10,
                                                             batch_size=32, seed=0),
                               hooks=[hook])
    assert len(hook.events) == 1
    assert hook.events[0][0] == 5
    assert len(metrics["train_loss"]) == 10  # 5 retraining epochs followed


def test_hook_mode_heuristic_compatibility():
    with pytest.raises(ValueError):
        prune.schedule_hook(prune.PruneSchedule(), prune.Heuristic("l1"), mode="element")
    with pytest.raises(ValueError):
        prune.schedule_hook(prune.PruneSchedule(), prune.Heuristic("level"), mode="structural")


def test_structural_realized_exceeds_target():
    # removing filters also removes downstream channels, so the realized
    # parameter reduction exceeds the per-layer rate
    g = two_conv_graph(channels=(3, 4, 4))
    target = 0.5
    drop = math.ceil(target * 4)
    shrunk = prune.shrink_structures(g, {"c1": list(range(4 - drop))})
    removed = g.param_count() - shrunk.param_count()
    own = drop * (3 * 2 * 2) + drop  # filters plus biases of c1 alone
    assert removed > own
    assert prune.realized_sparsity(shrunk) >= removed / g.param_count() - 1e-12
