"""Reference interpreter: the semantic oracle for every other stage.

Two execution paths live here:

* ``run`` executes one sample with deployment semantics. Float reductions
  accumulate sequentially (via cumsum, which numpy evaluates left to
  right), so a C runtime that accumulates in program order reproduces the
  f32 results bit for bit when compiled without FMA contraction. The
  integer path shares the quant module's rounding, so u8 results are
  bit-exact by construction.
* ``forward_batch`` is the fast batched path used for training, range
  calibration, and accuracy evaluation. It trades bit-level reproducibility
  of the deployment path for BLAS throughput.

Convolutions lower to matrix products through im2col in both paths.
"""

from __future__ import annotations

import numpy as np

from . import quant
from .ir import Graph, Node, ValidationError, toposort
from .pack import CrsTensor


# ---------------------------------------------------------------------------
# im2col lowering

def im2col(x: np.ndarray, kernel: int, stride: int, pad: int, zero=0) -> np.ndarray:
    """Unroll (C, H, W) into a (C*K*K, Ho*Wo) matrix; padding takes ``zero``.

    Row index is (c * K + kh) * K + kw, column index is ho * Wo + wo, so a
    weight matrix flattened to (F, C*K*K) turns the convolution into one
    matrix product.
    """
    c, h, w = x.shape
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (w + 2 * pad - kernel) // stride + 1
    if pad:
        xp = np.full((c, h + 2 * pad, w + 2 * pad), zero, dtype=x.dtype)
        xp[:, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(1, 2))
    win = win[:, ::stride, ::stride, :, :]            # (C, Ho, Wo, K, K)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kernel * kernel, ho * wo)
    return np.ascontiguousarray(cols)


def im2col_batch(x: np.ndarray, kernel: int, stride: int, pad: int, zero=0) -> np.ndarray:
    """Batched im2col: (N, C, H, W) -> (N, C*K*K, Ho*Wo)."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (w + 2 * pad - kernel) // stride + 1
    if pad:
        xp = np.full((n, c, h + 2 * pad, w + 2 * pad), zero, dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]         # (N, C, Ho, Wo, K, K)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kernel * kernel, ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, in_shape, kernel: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of im2col_batch (scatter-add); used by conv backward."""
    n, c, h, w = in_shape
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (w + 2 * pad - kernel) // stride + 1
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kernel, kernel, ho, wo)
    for kh in range(kernel):
        for kw in range(kernel):
            xp[:, :, kh:kh + ho * stride:stride, kw:kw + wo * stride:stride] += cols6[:, :, kh, kw]
    if pad:
        return xp[:, :, pad:pad + h, pad:pad + w]
    return xp


# ---------------------------------------------------------------------------
# deployment-exact single-sample operators (f32 path)

def _seqsum(products: np.ndarray) -> np.ndarray:
    """Sum over the last axis in strict left-to-right order."""
    return np.cumsum(products, axis=-1)[..., -1]


def linear_f32(w: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    prod = w * x[np.newaxis, :]
    return (_seqsum(prod) + b).astype(np.float32)


def conv2d_f32(w: np.ndarray, b: np.ndarray, x: np.ndarray,
               kernel: int, stride: int, pad: int) -> np.ndarray:
    f = w.shape[0]
    cols = im2col(x, kernel, stride, pad, zero=np.float32(0.0))
    w2 = w.reshape(f, -1)
    prod = w2[:, :, np.newaxis] * cols[np.newaxis, :, :]   # (F, K, L)
    y = np.cumsum(prod, axis=1)[:, -1, :] + b[:, np.newaxis]
    c, h, wdt = x.shape
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (wdt + 2 * pad - kernel) // stride + 1
    return y.reshape(f, ho, wo).astype(np.float32)


def relu_f32(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, x.dtype.type(0))


def maxpool(x: np.ndarray, pool: int) -> np.ndarray:
    c, h, w = x.shape
    ho, wo = h // pool, w // pool
    v = x[:, :ho * pool, :wo * pool].reshape(c, ho, pool, wo, pool)
    return v.max(axis=(2, 4))


def batchnorm_f32(gamma, beta, mean, var, eps: float, x: np.ndarray) -> np.ndarray:
    eps = np.float32(eps) if x.dtype == np.float32 else x.dtype.type(eps)
    scale = gamma / np.sqrt(var + eps)
    extra = (1,) * (x.ndim - 1)
    return (x - mean.reshape(-1, *extra)) * scale.reshape(-1, *extra) + beta.reshape(-1, *extra)


def softmax_f32(x: np.ndarray) -> np.ndarray:
    m = x.max()
    e = np.exp(x - m)
    return e / np.cumsum(e)[-1]


# ---------------------------------------------------------------------------
# quantized single-sample operators

def qlinear(w: np.ndarray, q_w, b: np.ndarray, x: np.ndarray, q_x, q_y,
            clamp_min: int = 0) -> np.ndarray:
    return quant.qmatmul(w, q_w, x.reshape(-1, 1), q_x, q_y,
                         bias=b, clamp_min=clamp_min).reshape(-1)


def qconv2d(w: np.ndarray, q_w, b: np.ndarray, x: np.ndarray, q_x, q_y,
            kernel: int, stride: int, pad: int, clamp_min: int = 0) -> np.ndarray:
    f = w.shape[0]
    cols = im2col(x, kernel, stride, pad, zero=np.uint8(q_x.zero_point))
    y = quant.qmatmul(w.reshape(f, -1), q_w, cols, q_x, q_y,
                      bias=b, clamp_min=clamp_min)
    c, h, wdt = x.shape
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (wdt + 2 * pad - kernel) // stride + 1
    return y.reshape(f, ho, wo)


def relu_u8(x: np.ndarray, zp: int) -> np.ndarray:
    return np.maximum(x, np.uint8(zp))


def crs_matvec(m: CrsTensor, vec: np.ndarray, q_m=None, q_vec=None, q_out=None,
               bias: np.ndarray | None = None, clamp_min: int = 0) -> np.ndarray:
    """Sparse matrix times vector, dense-equivalent by construction.

    The f32 variant accumulates stored values in column order, matching the
    dense sequential sum because skipped entries contribute exact zeros. The
    u8 variant folds the zero-point handling of the integer matmul: absent
    entries contribute (zp - zp) = 0 to the accumulator.
    """
    rows = m.rows
    rp = m.row_ptr
    if q_m is None:
        out = np.zeros(rows, dtype=np.float32)
        for i in range(rows):
            lo, hi = rp[i], rp[i + 1]
            if hi > lo:
                prod = m.values[lo:hi] * vec[m.col_ind[lo:hi]]
                out[i] = np.cumsum(prod)[-1]
            if bias is not None:
                out[i] = out[i] + bias[i]
        return out
    if q_vec is None or q_out is None:
        raise ValueError("u8 crs_matvec needs q_m, q_vec, and q_out")
    acc = np.zeros(rows, dtype=np.int64)
    vec64 = vec.astype(np.int64) - q_vec.zero_point
    for i in range(rows):
        lo, hi = rp[i], rp[i + 1]
        if hi > lo:
            acc[i] = np.sum((m.values[lo:hi].astype(np.int64) - q_m.zero_point)
                            * vec64[m.col_ind[lo:hi]])
    if bias is not None:
        acc = acc + np.asarray(bias, dtype=np.int64)
    if acc.size and (acc.min() < quant.I32_MIN or acc.max() > quant.I32_MAX):
        raise OverflowError("crs_matvec accumulator exceeds 32-bit signed range")
    mult = quant.requant_multiplier(q_m, q_vec, q_out)
    out = q_out.zero_point + quant.round_half_away(mult * acc.astype(np.float64))
    return np.clip(out, clamp_min, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# graph execution

def _check_dtype(node: Node, got: np.dtype, want: str):
    table = {"f32": np.float32, "u8": np.uint8}
    if got != table[want]:
        raise ValidationError(
            f"node {node.name!r}: expected {want} input, got {got}; "
            "quantized and float tensors mix only through bridge nodes"
        )


def run(g: Graph, x: np.ndarray) -> np.ndarray:
    """Execute one sample in serialized order with deployment semantics."""
    if len(g.inputs) != 1 or len(g.outputs) != 1:
        raise ValidationError("run supports single-input single-output graphs")
    in_desc = g.edges[g.inputs[0]]
    x = np.asarray(x)
    if tuple(x.shape) != in_desc.shape:
        raise ValidationError(f"input shape {x.shape} != declared {in_desc.shape}")
    if in_desc.dtype == "f32":
        x = np.ascontiguousarray(x, dtype=np.float32)
    else:
        x = np.ascontiguousarray(x, dtype=np.uint8)
    vals = {g.inputs[0]: x}

    def p(n: Node, role: str) -> np.ndarray:
        return g.params[n.params[role]].values

    def pq(n: Node, role: str):
        return g.params[n.params[role]].desc.quant

    for n in toposort(g):
        a = vals[n.inputs[0]]
        if n.op == "Conv2D":
            _check_dtype(n, a.dtype, "f32")
            out = conv2d_f32(p(n, "weight"), p(n, "bias"), a,
                             int(n.attr("kernel")), int(n.attr("stride")), int(n.attr("pad")))
        elif n.op == "Linear":
            _check_dtype(n, a.dtype, "f32")
            out = linear_f32(p(n, "weight"), p(n, "bias"), a)
        elif n.op == "BatchNorm":
            _check_dtype(n, a.dtype, "f32")
            out = batchnorm_f32(p(n, "gamma"), p(n, "beta"), p(n, "mean"), p(n, "var"),
                                float(n.attr("epsilon")), a)
        elif n.op == "MaxPool":
            out = maxpool(a, int(n.attr("pool")))
        elif n.op == "ReLU":
            if a.dtype == np.uint8:
                out = relu_u8(a, g.edges[n.inputs[0]].quant.zero_point)
            else:
                out = relu_f32(a)
        elif n.op == "Softmax":
            _check_dtype(n, a.dtype, "f32")
            out = softmax_f32(a)
        elif n.op == "Flatten":
            out = a.reshape(-1)
        elif n.op == "Add":
            b = vals[n.inputs[1]]
            _check_dtype(n, a.dtype, "f32")
            _check_dtype(n, b.dtype, "f32")
            out = a + b
        elif n.op == "QuantizeLinear":
            _check_dtype(n, a.dtype, "f32")
            out = quant.quantize(a, g.edges[n.outputs[0]].quant)
        elif n.op == "DequantizeLinear":
            _check_dtype(n, a.dtype, "u8")
            out = quant.dequantize(a, g.edges[n.inputs[0]].quant)
        elif n.op == "QLinearConv":
            _check_dtype(n, a.dtype, "u8")
            out = qconv2d(p(n, "weight"), pq(n, "weight"), p(n, "bias"), a,
                          g.edges[n.inputs[0]].quant, g.edges[n.outputs[0]].quant,
                          int(n.attr("kernel")), int(n.attr("stride")), int(n.attr("pad")),
                          clamp_min=int(n.attr("clamp_min")))
        elif n.op == "QLinearMatMul":
            _check_dtype(n, a.dtype, "u8")
            out = qlinear(p(n, "weight"), pq(n, "weight"), p(n, "bias"), a,
                          g.edges[n.inputs[0]].quant, g.edges[n.outputs[0]].quant,
                          clamp_min=int(n.attr("clamp_min")))
        else:
            raise ValidationError(f"node {n.name!r}: unsupported op {n.op}")
        vals[n.outputs[0]] = out
    return vals[g.outputs[0]]


# ---------------------------------------------------------------------------
# batched float path (training / calibration / evaluation)

TRAINABLE_OPS = ("Conv2D", "Linear", "BatchNorm", "MaxPool", "ReLU", "Softmax",
                 "Flatten", "Add")


def forward_batch(g: Graph, x: np.ndarray, hook=None, tape: dict | None = None,
                  bn_training: bool = False) -> dict[str, np.ndarray]:
    """Batched forward over all f32 ops; returns the activation of every edge.

    ``hook`` may expose transform_weight(node, name, w) and
    transform_activation(edge, y); both default to identity (used by QAT
    fake-quantization, gradients pass straight through). When ``tape`` is a
    dict it receives per-node auxiliaries for the backward pass. BatchNorm
    uses batch statistics and updates running stats in place only when
    ``bn_training`` is set.
    """
    x = np.asarray(x)
    acts: dict[str, np.ndarray] = {}

    def touch(edge: str, y: np.ndarray) -> np.ndarray:
        if hook is not None and hasattr(hook, "transform_activation"):
            y = hook.transform_activation(edge, y)
        acts[edge] = y
        return y

    def weight(n: Node, role: str) -> np.ndarray:
        w = g.params[n.params[role]].values
        if hook is not None and hasattr(hook, "transform_weight"):
            w = hook.transform_weight(n, n.params[role], w)
        return w

    touch(g.inputs[0], x)
    for n in toposort(g):
        if n.op not in TRAINABLE_OPS:
            raise ValidationError(f"node {n.name!r}: op {n.op} has no batched float path")
        a = acts[n.inputs[0]]
        if n.op == "Linear":
            w = weight(n, "weight")
            y = a @ w.T + g.params[n.params["bias"]].values
            if tape is not None:
                tape[n.name] = {"w": w}
        elif n.op == "Conv2D":
            k, s, pd = int(n.attr("kernel")), int(n.attr("stride")), int(n.attr("pad"))
            w = weight(n, "weight")
            f = w.shape[0]
            cols = im2col_batch(a, k, s, pd)
            y = np.matmul(w.reshape(f, -1)[np.newaxis], cols)
            y = y + g.params[n.params["bias"]].values.reshape(1, f, 1)
            nb, _, hh, ww = a.shape
            ho = (hh + 2 * pd - k) // s + 1
            wo = (ww + 2 * pd - k) // s + 1
            y = y.reshape(nb, f, ho, wo)
            if tape is not None:
                tape[n.name] = {"w": w, "cols": cols}
        elif n.op == "ReLU":
            y = np.where(a > 0, a, a.dtype.type(0))
        elif n.op == "MaxPool":
            pl = int(n.attr("pool"))
            nb, c, h, w_ = a.shape
            ho, wo = h // pl, w_ // pl
            v = a[:, :, :ho * pl, :wo * pl].reshape(nb, c, ho, pl, wo, pl)
            y = v.max(axis=(3, 5))
        elif n.op == "Flatten":
            y = a.reshape(a.shape[0], -1)
        elif n.op == "Add":
            y = a + acts[n.inputs[1]]
        elif n.op == "Softmax":
            m = a.max(axis=1, keepdims=True)
            e = np.exp(a - m)
            y = e / e.sum(axis=1, keepdims=True)
        elif n.op == "BatchNorm":
            gmm = g.params[n.params["gamma"]].values
            bta = g.params[n.params["beta"]].values
            eps = float(n.attr("epsilon"))
            axes = (0,) if a.ndim == 2 else (0, 2, 3)
            shape = (1, -1) if a.ndim == 2 else (1, -1, 1, 1)
            if bn_training:
                mu = a.mean(axis=axes)
                var = a.var(axis=axes)
                rm = g.params[n.params["mean"]]
                rv = g.params[n.params["var"]]
                rm.values = ((1 - 0.1) * rm.values + 0.1 * mu).astype(rm.values.dtype)
                rv.values = ((1 - 0.1) * rv.values + 0.1 * var).astype(rv.values.dtype)
            else:
                mu = g.params[n.params["mean"]].values
                var = g.params[n.params["var"]].values
            inv = 1.0 / np.sqrt(var + eps)
            xhat = (a - mu.reshape(shape)) * inv.reshape(shape)
            y = gmm.reshape(shape) * xhat + bta.reshape(shape)
            if tape is not None:
                tape[n.name] = {"xhat": xhat, "inv": inv, "axes": axes, "shape": shape,
                                "gamma": gmm}
        touch(n.outputs[0], y)
    return acts


def collect_ranges(g: Graph, samples: np.ndarray) -> dict[str, tuple[float, float]]:
    """Observed (min, max) per edge over a calibration batch (f32 graphs)."""
    acts = forward_batch(g, np.asarray(samples, dtype=np.float32))
    return {e: (float(a.min()), float(a.max())) for e, a in acts.items()}


def is_quantized(g: Graph) -> bool:
    return any(n.op.startswith("Q") or n.op == "DequantizeLinear" for n in g.nodes)


def predict(g: Graph, samples: np.ndarray) -> np.ndarray:
    """Class predictions; batched for f32 graphs, per-sample for integer ones."""
    samples = np.asarray(samples)
    if is_quantized(g):
        outs = np.stack([run(g, s.astype(np.float32)) for s in samples])
    else:
        acts = forward_batch(g, samples.astype(np.float32))
        outs = acts[g.outputs[0]]
    return np.argmax(outs, axis=1)


def evaluate(g: Graph, samples: np.ndarray, labels: np.ndarray):
    """Top-1 accuracy plus a per-class breakdown."""
    labels = np.asarray(labels)
    pred = predict(g, samples)
    acc = float(np.mean(pred == labels)) if labels.size else float("nan")
    per_class = {}
    for c in np.unique(labels):
        m = labels == c
        per_class[int(c)] = float(np.mean(pred[m] == c))
    return acc, per_class
