"""Affine 8-bit quantization: calibration, integer matmul, PPQ, and QAT.

The mapping is f(x) = clamp(round(x / s) + zp) with per-tensor scale s and
zero point zp in [0, 255]; dequantization is s * (v - zp). Rounding is
half-away-from-zero everywhere (the same rule the reference interpreter and
the C runtime use, so integer paths agree bit for bit). The full-integer
matmul keeps a 32-bit signed accumulator and applies a single real-valued
requantization multiplier (s_a * s_b) / s_c in double precision.
"""

from __future__ import annotations

import numpy as np

from .ir import Graph, Node, QuantParams, TensorDesc, ValidationError

__all__ = [
    "QuantParams", "round_half_away", "clamp_u8", "calibrate", "quantize",
    "dequantize", "fake_quant", "qmatmul", "quantize_weight", "quantize_bias",
    "quantize_graph", "ppq", "QatHook", "qat_hook",
]

I32_MIN = -(2 ** 31)
I32_MAX = 2 ** 31 - 1


def round_half_away(x):
    """Round to nearest integer, ties away from zero (vectorized)."""
    x = np.asarray(x)
    return np.trunc(x + np.copysign(0.5, x))


def clamp_u8(x):
    """Clamp to [0, 255]; absorbs overflow of the quantized domain."""
    return np.clip(x, 0, 255)


def calibrate(values=None, min_data: float | None = None, max_data: float | None = None) -> QuantParams:
    """Derive QuantParams from observed values or an explicit running range.

    The range is widened to include zero so the zero point is exact. The
    all-zero degenerate case yields scale 1, zero point 0.
    """
    if values is not None:
        values = np.asarray(values, dtype=np.float64)
        finite = values[np.isfinite(values)]
        if finite.size == 0:
            raise ValueError("calibrate requires at least one finite value")
        min_data = float(finite.min())
        max_data = float(finite.max())
    if min_data is None or max_data is None:
        raise ValueError("calibrate needs values or an explicit (min_data, max_data) range")
    lo = min(float(min_data), 0.0)
    hi = max(float(max_data), 0.0)
    if lo == hi:  # all values identical and zero
        return QuantParams(scale=1.0, zero_point=0, min_data=lo, max_data=hi)
    s = (hi - lo) / 255.0
    zp = int(clamp_u8(round_half_away(-lo / s)))
    return QuantParams(scale=s, zero_point=zp, min_data=lo, max_data=hi)


def quantize(x, q: QuantParams) -> np.ndarray:
    """Real -> u8 per the affine scheme; scalar in, scalar-shaped array out."""
    x = np.asarray(x)
    v = round_half_away(np.asarray(x, dtype=np.float64) / q.scale) + q.zero_point
    return clamp_u8(v).astype(np.uint8)


def dequantize(v, q: QuantParams) -> np.ndarray:
    """u8 -> real: s * (v - zp), rounded once to f32."""
    v = np.asarray(v)
    return (q.scale * (v.astype(np.float64) - q.zero_point)).astype(np.float32)


def fake_quant(x, q: QuantParams) -> np.ndarray:
    """Quantize-dequantize round trip in float space (QAT forward)."""
    out = dequantize(quantize(x, q), q)
    return out.astype(np.asarray(x).dtype, copy=False)


def quantize_weight(values: np.ndarray) -> tuple[np.ndarray, QuantParams]:
    q = calibrate(values)
    return quantize(values, q), q


def quantize_bias(values: np.ndarray, s_in: float, s_w: float) -> tuple[np.ndarray, QuantParams]:
    """Bias becomes i32 with scale s_in * s_w and zero point 0."""
    s = float(s_in) * float(s_w)
    b = round_half_away(np.asarray(values, dtype=np.float64) / s)
    b = np.clip(b, I32_MIN, I32_MAX).astype(np.int32)
    return b, QuantParams(scale=s, zero_point=0)


def requant_multiplier(q_a: QuantParams, q_b: QuantParams, q_c: QuantParams) -> float:
    return (q_a.scale * q_b.scale) / q_c.scale


def qmatmul(a: np.ndarray, q_a: QuantParams, b: np.ndarray, q_b: QuantParams,
            q_c: QuantParams, bias: np.ndarray | None = None,
            clamp_min: int = 0) -> np.ndarray:
    """Full-integer matmul of u8 matrices; 32-bit signed accumulator.

    The only real-valued step is the requantization multiply, performed in
    double precision. ``clamp_min`` tightens the output clamp floor (used by
    fused ReLU, where values below the zero point encode negatives).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"qmatmul dimension mismatch: {a.shape} x {b.shape}")
    acc = (a.astype(np.int64) - q_a.zero_point) @ (b.astype(np.int64) - q_b.zero_point)
    if bias is not None:
        acc = acc + np.asarray(bias, dtype=np.int64).reshape(-1, 1)
    if acc.size and (acc.min() < I32_MIN or acc.max() > I32_MAX):
        raise OverflowError("qmatmul accumulator exceeds 32-bit signed range")
    m = requant_multiplier(q_a, q_b, q_c)
    c = q_c.zero_point + round_half_away(m * acc.astype(np.float64))
    return np.clip(c, clamp_min, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Graph rewriting

_PASSTHROUGH_U8 = ("ReLU", "MaxPool", "Flatten")
_QUANTIZABLE = {"Conv2D": "QLinearConv", "Linear": "QLinearMatMul"}


def quantize_graph(g: Graph, act_qp: dict[str, QuantParams]) -> Graph:
    """Rewrite a trained f32 graph into full-integer form.

    ``act_qp`` maps activation edge names of the original graph to their
    QuantParams (from PPQ calibration or QAT-trained ranges). Ops without a
    quantized counterpart stay in f32 behind explicit dequantize/quantize
    bridges; Softmax stays f32 and graph outputs keep their f32 contract.
    """
    out = Graph(name=g.name, inputs=list(g.inputs), outputs=list(g.outputs),
                meta=dict(g.meta))
    qp: dict[str, QuantParams] = {}       # quant params of u8 edges in the new graph
    u8_of: dict[str, str] = {}            # original edge -> u8 edge name
    f32_of: dict[str, str] = {}           # original edge -> f32 edge name

    def need_qp(edge: str) -> QuantParams:
        if edge not in act_qp:
            raise ValidationError(f"no quantization range recorded for edge {edge!r}")
        return act_qp[edge]

    def as_u8(edge: str) -> str:
        if edge in u8_of:
            return u8_of[edge]
        q = need_qp(edge)
        qe = edge + ".q"
        out.nodes.append(Node(name=qe, op="QuantizeLinear", inputs=[f32_of[edge]],
                              outputs=[qe]))
        out.edges[qe] = TensorDesc(shape=g.edges[edge].shape, dtype="u8", quant=q)
        qp[qe] = q
        u8_of[edge] = qe
        return qe

    def as_f32(edge: str) -> str:
        if edge in f32_of:
            return f32_of[edge]
        src = u8_of[edge]
        de = edge + ".dq"
        out.nodes.append(Node(name=de, op="DequantizeLinear", inputs=[src], outputs=[de]))
        out.edges[de] = TensorDesc(shape=g.edges[edge].shape, dtype="f32")
        f32_of[edge] = de
        return de

    for e in g.inputs:
        out.edges[e] = TensorDesc(shape=g.edges[e].shape, dtype=g.edges[e].dtype)
        f32_of[e] = e

    from .ir import toposort

    for n in toposort(g):
        src = n.inputs[0]
        if n.op in _QUANTIZABLE:
            qin = as_u8(src)
            q_in = qp[qin]
            w = g.params[n.params["weight"]]
            wq, q_w = quantize_weight(w.values)
            bq, q_b = quantize_bias(g.params[n.params["bias"]].values, q_in.scale, q_w.scale)
            q_out = need_qp(n.outputs[0])
            wname, bname = n.params["weight"], n.params["bias"]
            out.add_param(wname, wq, TensorDesc(shape=w.desc.shape, dtype="u8", quant=q_w))
            out.add_param(bname, bq, TensorDesc(shape=(bq.size,), dtype="i32", quant=q_b))
            attrs = dict(n.attrs)
            node = Node(name=n.name, op=_QUANTIZABLE[n.op], inputs=[qin],
                        outputs=[n.outputs[0]], attrs=attrs,
                        params={"weight": wname, "bias": bname})
            out.nodes.append(node)
            out.edges[n.outputs[0]] = TensorDesc(shape=g.edges[n.outputs[0]].shape,
                                                 dtype="u8", quant=q_out)
            qp[n.outputs[0]] = q_out
            u8_of[n.outputs[0]] = n.outputs[0]
        elif n.op in _PASSTHROUGH_U8:
            qin = as_u8(src)
            q_in = qp[qin]
            out.nodes.append(Node(name=n.name, op=n.op, inputs=[qin],
                                  outputs=[n.outputs[0]], attrs=dict(n.attrs)))
            out.edges[n.outputs[0]] = TensorDesc(shape=g.edges[n.outputs[0]].shape,
                                                 dtype="u8", quant=q_in)
            qp[n.outputs[0]] = q_in
            u8_of[n.outputs[0]] = n.outputs[0]
        else:
            # Softmax and ops without a quantized counterpart run in f32.
            fins = [as_f32(e) if e in u8_of and e not in f32_of else f32_of.get(e, e)
                    for e in n.inputs]
            out.nodes.append(Node(name=n.name, op=n.op, inputs=fins,
                                  outputs=[n.outputs[0]], attrs=dict(n.attrs),
                                  params=dict(n.params)))
            for role, pname in n.params.items():
                p = g.params[pname]
                out.add_param(pname, p.values.copy(),
                              TensorDesc(shape=p.desc.shape, dtype=p.desc.dtype))
            out.edges[n.outputs[0]] = TensorDesc(shape=g.edges[n.outputs[0]].shape, dtype="f32")
            f32_of[n.outputs[0]] = n.outputs[0]

    # Graph outputs keep the original f32 contract.
    renames = {}
    for i, e in enumerate(g.outputs):
        if e in f32_of:
            renames[e] = f32_of[e]
        else:
            renames[e] = as_f32(e)
        out.outputs[i] = renames[e]
    from .ir import infer_shapes

    infer_shapes(out)
    # re-attach calibrated quant params lost during inference bookkeeping
    for e, q in qp.items():
        out.edges[e].quant = q
    out.validate()
    return out


def collect_weight_ranges(g: Graph) -> dict[str, QuantParams]:
    return {name: calibrate(p.values) for name, p in g.params.items()}


def ppq(g: Graph, calib) -> Graph:
    """Post-process quantization: ranges from a calibration batch, no retraining.

    ``calib`` is an array of samples (leading batch dimension) or a Dataset,
    in which case its training split is used.
    """
    from . import refrun

    samples = getattr(calib, "train_x", calib)
    ranges = refrun.collect_ranges(g, np.asarray(samples))
    act_qp = {e: calibrate(min_data=lo, max_data=hi) for e, (lo, hi) in ranges.items()}
    return quantize_graph(g, act_qp)


class QatHook:
    """Trainer hook applying fake-quantization to weights and activations.

    Weight ranges come from the current tensor each step; activation ranges
    are running min/max across batches. Gradients pass straight through the
    fake-quantization (straight-through estimator): the trainer applies raw
    gradients to the underlying f32 weights.
    """

    _FQ_OPS = ("Conv2D", "Linear", "ReLU", "MaxPool", "Add", "BatchNorm")

    def __init__(self, g: Graph):
        self.ranges: dict[str, tuple[float, float]] = {}
        self._fq_edges = set(g.inputs)
        for n in g.nodes:
            if n.op in self._FQ_OPS:
                self._fq_edges.update(n.outputs)

    def transform_weight(self, node: Node, name: str, w: np.ndarray) -> np.ndarray:
        if node.op not in ("Conv2D", "Linear"):
            return w
        return fake_quant(w, calibrate(w))

    def transform_activation(self, edge: str, x: np.ndarray) -> np.ndarray:
        if edge not in self._fq_edges:
            return x
        lo = float(x.min())
        hi = float(x.max())
        if edge in self.ranges:
            old = self.ranges[edge]
            lo = min(lo, old[0])
            hi = max(hi, old[1])
        self.ranges[edge] = (lo, hi)
        return fake_quant(x, calibrate(min_data=lo, max_data=hi))

    def export(self, g: Graph) -> Graph:
        """Rewrite ``g`` into full-integer form using the trained ranges."""
        act_qp = {e: calibrate(min_data=lo, max_data=hi)
                  for e, (lo, hi) in self.ranges.items()}
        return quantize_graph(g, act_qp)


def qat_hook(g: Graph) -> QatHook:
    return QatHook(g)
