"""Inference-graph rewrites applied after training and compression.

Batch-norm folding absorbs a BatchNorm that directly follows a Conv2D or
Linear (and is its only consumer) into that layer's weights and bias. ReLU
fusion removes a ReLU that directly follows a quantized conv/matmul by
tightening the producer's output clamp from [0, 255] to [zp, 255]: stored
values below the zero point encode negatives, so clamping at zp is the ReLU.

Pass order over a full pipeline: fold (on the f32 graph), quantize, fuse.
Both passes are idempotent and never change graph I/O arity or shapes.
"""

from __future__ import annotations

import numpy as np

from .ir import Graph


def fold_bn_params(w: np.ndarray, b: np.ndarray, gamma, beta, mean, var, eps: float):
    """Closed-form fold: w' = w * g/sqrt(v+eps) per channel, b' = (b-m)*that + beta."""
    scale = np.asarray(gamma, dtype=np.float64) / np.sqrt(np.asarray(var, dtype=np.float64) + eps)
    w64 = np.asarray(w, dtype=np.float64)
    extra = (1,) * (w64.ndim - 1)
    w_new = w64 * scale.reshape(-1, *extra)
    b_new = (np.asarray(b, dtype=np.float64) - np.asarray(mean, dtype=np.float64)) * scale \
        + np.asarray(beta, dtype=np.float64)
    return w_new.astype(w.dtype), b_new.astype(b.dtype)


def fold_batchnorm(g: Graph) -> tuple[Graph, dict]:
    """Fold every eligible BatchNorm; returns (graph, report).

    A BatchNorm stays in place (and is reported) unless it directly follows
    a Conv2D/Linear node that has no other consumer.
    """
    g = g.copy()
    report = {"folded": [], "skipped": []}
    changed = True
    while changed:
        changed = False
        for bn in list(g.nodes):
            if bn.op != "BatchNorm":
                continue
            src_edge = bn.inputs[0]
            producer = g.producer(src_edge)
            if (producer is None or producer.op not in ("Conv2D", "Linear")
                    or len(g.consumers(src_edge)) != 1 or src_edge in g.outputs):
                if bn.name not in report["skipped"]:
                    report["skipped"].append(bn.name)
                continue
            w = g.params[producer.params["weight"]]
            b = g.params[producer.params["bias"]]
            w.values, b.values = fold_bn_params(
                w.values, b.values,
                g.params[bn.params["gamma"]].values,
                g.params[bn.params["beta"]].values,
                g.params[bn.params["mean"]].values,
                g.params[bn.params["var"]].values,
                float(bn.attr("epsilon")),
            )
            # rewire: producer now writes the BN's output edge directly
            producer.outputs[0] = bn.outputs[0]
            del g.edges[src_edge]
            g.nodes.remove(bn)
            for pname in bn.params.values():
                del g.params[pname]
                g.param_order.remove(pname)
            report["folded"].append(bn.name)
            changed = True
    g.validate()
    return g, report


def fuse_relu(g: Graph) -> tuple[Graph, dict]:
    """Fuse ReLU into a preceding quantized conv/matmul via the output clamp."""
    g = g.copy()
    report = {"fused": []}
    for relu in list(g.nodes):
        if relu.op != "ReLU":
            continue
        src_edge = relu.inputs[0]
        producer = g.producer(src_edge)
        if (producer is None or producer.op not in ("QLinearConv", "QLinearMatMul")
                or len(g.consumers(src_edge)) != 1 or src_edge in g.outputs):
            continue
        q = g.edges[src_edge].quant
        producer.attrs["clamp_min"] = int(q.zero_point)
        out_edge = relu.outputs[0]
        producer.outputs[0] = out_edge
        g.edges[out_edge].quant = q
        del g.edges[src_edge]
        g.nodes.remove(relu)
        report["fused"].append(relu.name)
    g.validate()
    return g, report


def optimize(g: Graph) -> tuple[Graph, dict]:
    """Run both rewrites in order; safe on float and quantized graphs alike."""
    g, fold_report = fold_batchnorm(g)
    g, fuse_report = fuse_relu(g)
    return g, {"fold_batchnorm": fold_report, "fuse_relu": fuse_report}
