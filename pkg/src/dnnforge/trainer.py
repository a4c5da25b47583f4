"""Minimal training engine: batched forward/backward, SGD with momentum.

Training runs on the batched float path of the reference interpreter; the
backward pass lives here. Hooks are duck-typed objects that may implement
any of:

    on_epoch_begin(epoch, graph, ctx)   fired at the start of each epoch
    on_train_end(epochs, graph, ctx)    fired once after the last epoch
    after_step(graph, ctx)              fired after every optimizer step
    transform_weight(node, name, w)     forward-time weight substitution
    transform_activation(edge, y)       forward-time activation substitution

The forward-time transforms realize fake-quantization with straight-through
gradients: backward uses the transformed activations but updates the raw
parameters. Pruning hooks use after_step to keep masked weights at zero,
which removes them from the optimizer's reach.

The loss is softmax cross-entropy; graphs must end in a Softmax node.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import refrun
from .ir import Graph, ParseError, ValidationError, toposort


@dataclass
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if not (0 <= self.momentum < 1):
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class Dataset:
    """Feature tensors with class labels and a train/test split."""

    samples: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)
        if len(self.samples) != len(self.labels):
            raise ValueError(
                f"sample count {len(self.samples)} != label count {len(self.labels)}"
            )
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ValueError("label exceeds declared class count")

    @property
    def train_x(self) -> np.ndarray:
        return self.samples[self.train_idx]

    @property
    def train_y(self) -> np.ndarray:
        return self.labels[self.train_idx]

    @property
    def test_x(self) -> np.ndarray:
        return self.samples[self.test_idx]

    @property
    def test_y(self) -> np.ndarray:
        return self.labels[self.test_idx]


def make_blobs(n: int, classes: int, seed: int, dim: int = 2,
               spread: float = 1.0, test_frac: float = 0.25) -> Dataset:
    """Gaussian blobs around class centers on a circle; deterministic per seed."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = np.zeros((classes, dim))
    centers[:, 0] = 3.0 * np.cos(angles)
    centers[:, 1 % dim] = 3.0 * np.sin(angles)
    labels = rng.integers(0, classes, size=n)
    samples = centers[labels] + spread * rng.standard_normal((n, dim))
    perm = rng.permutation(n)
    n_test = int(round(n * test_frac))
    return Dataset(samples=samples.astype(np.float32), labels=labels,
                   train_idx=perm[n_test:], test_idx=perm[:n_test],
                   num_classes=classes)


# ---------------------------------------------------------------------------
# IDX files (MNIST format: big-endian header, u8 payload)

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


def read_idx(path: str) -> np.ndarray:
    """Read one IDX file (images or labels), validating magic and length."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise ParseError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IDX_MAGIC_IMAGES:
        ndim = 3
    elif magic == IDX_MAGIC_LABELS:
        ndim = 1
    else:
        raise ParseError(f"{path}: bad IDX magic 0x{magic:08x}")
    if len(raw) < 4 + 4 * ndim:
        raise ParseError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    count = int(np.prod(dims))
    data = raw[4 + 4 * ndim:]
    if len(data) < count:
        raise ParseError(f"{path}: truncated IDX payload ({len(data)} < {count} bytes)")
    return np.frombuffer(data[:count], dtype=np.uint8).reshape(dims)


def _labels_path_for(images_path: str) -> str:
    return images_path.replace("images-idx3-ubyte", "labels-idx1-ubyte")


def load_idx(path: str) -> Dataset:
    """Build a Dataset from IDX files; pixels are scaled to [0, 1].

    ``path`` is either a directory holding the four standard MNIST files
    (train/t10k pairs) or an images file whose labels file sits next to it
    under the conventional name.
    """
    if os.path.isdir(path):
        tri = read_idx(os.path.join(path, "train-images-idx3-ubyte"))
        trl = read_idx(os.path.join(path, "train-labels-idx1-ubyte"))
        tei = read_idx(os.path.join(path, "t10k-images-idx3-ubyte"))
        tel = read_idx(os.path.join(path, "t10k-labels-idx1-ubyte"))
        images = np.concatenate([tri, tei])
        labels = np.concatenate([trl, tel])
        train_idx = np.arange(len(tri))
        test_idx = np.arange(len(tri), len(images))
    else:
        images = read_idx(path)
        labels_path = _labels_path_for(path)
        if labels_path == path or not os.path.exists(labels_path):
            raise ParseError(f"no labels file found next to {path}")
        labels = read_idx(labels_path)
        if len(labels) != len(images):
            raise ParseError("image/label counts differ")
        train_idx = np.arange(len(images))
        test_idx = np.arange(0)
    samples = (images.astype(np.float32) / 255.0)[:, np.newaxis, :, :]
    return Dataset(samples=samples, labels=labels.astype(np.int64),
                   train_idx=train_idx, test_idx=test_idx,
                   num_classes=int(labels.max()) + 1 if labels.size else 0)


# ---------------------------------------------------------------------------
# backward pass

def _softmax_stable(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def forward_backward(g: Graph, x: np.ndarray, y: np.ndarray, hook=None):
    """One batched pass; returns (mean cross-entropy loss, param gradients)."""
    order = toposort(g)
    if not order or order[-1].op != "Softmax":
        raise ValidationError("training requires a trailing Softmax classification head")
    tape: dict = {}
    acts = refrun.forward_batch(g, x, hook=hook, tape=tape, bn_training=True)
    softmax_node = order[-1]
    logits = acts[softmax_node.inputs[0]]
    n = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))).reshape(-1)
    loss = float(np.mean(lse - logits[np.arange(n), y]))
    probs = _softmax_stable(logits)
    dlogits = probs
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n

    grads: dict[str, np.ndarray] = {}
    dacts: dict[str, np.ndarray] = {softmax_node.inputs[0]: dlogits}

    def accum(edge: str, g_):
        if edge in dacts:
            dacts[edge] = dacts[edge] + g_
        else:
            dacts[edge] = g_

    for node in reversed(order[:-1]):
        out = node.outputs[0]
        dy = dacts.get(out)
        if dy is None:
            continue
        a = acts[node.inputs[0]]
        if node.op == "Linear":
            w = tape[node.name]["w"]
            grads[node.params["weight"]] = dy.T @ a
            grads[node.params["bias"]] = dy.sum(axis=0)
            accum(node.inputs[0], dy @ w)
        elif node.op == "Conv2D":
            k, s, pd = int(node.attr("kernel")), int(node.attr("stride")), int(node.attr("pad"))
            w = tape[node.name]["w"]
            cols = tape[node.name]["cols"]
            f = w.shape[0]
            nb = dy.shape[0]
            dy2 = dy.reshape(nb, f, -1)
            grads[node.params["weight"]] = np.einsum("nfl,nkl->fk", dy2, cols).reshape(w.shape)
            grads[node.params["bias"]] = dy2.sum(axis=(0, 2))
            dcols = np.matmul(w.reshape(f, -1).T[np.newaxis], dy2)
            accum(node.inputs[0], refrun.col2im(dcols, a.shape, k, s, pd))
        elif node.op == "ReLU":
            accum(node.inputs[0], dy * (a > 0))
        elif node.op == "MaxPool":
            pl = int(node.attr("pool"))
            nb, c, h, w_ = a.shape
            ho, wo = h // pl, w_ // pl
            win = a[:, :, :ho * pl, :wo * pl].reshape(nb, c, ho, pl, wo, pl)
            out_v = acts[out].reshape(nb, c, ho, 1, wo, 1)
            mask = (win == out_v)
            dx = np.zeros_like(a)
            dx_v = (mask * dy.reshape(nb, c, ho, 1, wo, 1)).reshape(nb, c, ho * pl, wo * pl)
            dx[:, :, :ho * pl, :wo * pl] = dx_v
            accum(node.inputs[0], dx)
        elif node.op == "Flatten":
            accum(node.inputs[0], dy.reshape(a.shape))
        elif node.op == "Add":
            accum(node.inputs[0], dy)
            accum(node.inputs[1], dy)
        elif node.op == "BatchNorm":
            t = tape[node.name]
            xhat, inv, axes, shape, gmm = t["xhat"], t["inv"], t["axes"], t["shape"], t["gamma"]
            cnt = np.prod([a.shape[i] for i in axes])
            grads[node.params["beta"]] = dy.sum(axis=axes)
            grads[node.params["gamma"]] = (dy * xhat).sum(axis=axes)
            dxhat = dy * gmm.reshape(shape)
            dx = (inv.reshape(shape) / cnt) * (
                cnt * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            accum(node.inputs[0], dx)
        else:
            raise ValidationError(f"node {node.name!r}: op {node.op} unsupported in training mode")
    return loss, grads


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             velocity: dict[str, np.ndarray], lr: float, momentum: float) -> None:
    """v <- momentum * v + g;  w <- w - lr * v (in place)."""
    for name, grad in grads.items():
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(grad)
        v = momentum * v + grad
        velocity[name] = v
        params[name] -= (lr * v).astype(params[name].dtype)


@dataclass
class TrainContext:
    cfg: TrainConfig
    data: Dataset
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    rng: np.random.Generator | None = None


def train(g: Graph, data: Dataset, cfg: TrainConfig, hooks=()):
    """Train in place; returns (graph, metrics) with per-epoch loss/accuracy.

    Deterministic for a fixed (seed, config, dataset). Test accuracy is
    measured on the plain graph through the reference evaluator, so the
    final reported accuracy equals a later refrun evaluation bit for bit.
    """
    for n in g.nodes:
        if n.op not in refrun.TRAINABLE_OPS:
            raise ValidationError(f"node {n.name!r}: op {n.op} unsupported in training mode")
    rng = np.random.default_rng(cfg.seed)
    ctx = TrainContext(cfg=cfg, data=data, rng=rng)
    metrics = {"train_loss": [], "test_acc": []}
    x_train, y_train = data.train_x, data.train_y
    n_train = len(x_train)
    for epoch in range(cfg.epochs):
        for h in hooks:
            if hasattr(h, "on_epoch_begin"):
                h.on_epoch_begin(epoch, g, ctx)
        perm = rng.permutation(n_train)
        loss_sum = 0.0
        for start in range(0, n_train, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            hook = _merge_hooks(hooks)
            loss, grads = forward_backward(g, x_train[idx], y_train[idx], hook=hook)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss {loss} at epoch {epoch}")
            params = {name: p.values for name, p in g.params.items()}
            sgd_step(params, grads, ctx.velocity, cfg.lr, cfg.momentum)
            for h in hooks:
                if hasattr(h, "after_step"):
                    h.after_step(g, ctx)
            loss_sum += loss * len(idx)
        metrics["train_loss"].append(loss_sum / n_train if n_train else float("nan"))
        if len(data.test_idx):
            acc, _ = refrun.evaluate(g, data.test_x, data.test_y)
            metrics["test_acc"].append(acc)
    for h in hooks:
        if hasattr(h, "on_train_end"):
            h.on_train_end(cfg.epochs, g, ctx)
    return g, metrics


class _HookChain:
    def __init__(self, hooks):
        self.hooks = hooks

    def transform_weight(self, node, name, w):
        for h in self.hooks:
            if hasattr(h, "transform_weight"):
                w = h.transform_weight(node, name, w)
        return w

    def transform_activation(self, edge, y):
        for h in self.hooks:
            if hasattr(h, "transform_activation"):
                y = h.transform_activation(edge, y)
        return y


def _merge_hooks(hooks):
    active = [h for h in hooks
              if hasattr(h, "transform_weight") or hasattr(h, "transform_activation")]
    if not active:
        return None
    if len(active) == 1:
        return active[0]
    return _HookChain(active)


def grad_check(g: Graph, data, epsilon: float = 1e-4, max_elements: int = 200) -> float:
    """Max relative error between analytic gradients and central differences.

    Runs on an f64 copy of the parameters so the finite-difference noise
    floor sits far below the 1e-3 acceptance threshold. Tensors larger than
    ``max_elements`` are subsampled deterministically.
    """
    if isinstance(data, Dataset):
        x, y = data.train_x, data.train_y
    else:
        x, y = data
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    work = g.copy()
    for p in work.params.values():
        p.values = p.values.astype(np.float64)
    base = {name: p.values.copy() for name, p in work.params.items()}

    def loss_only() -> float:
        snapshot = {name: p.values.copy() for name, p in work.params.items()}
        loss, _ = forward_backward(work, x, y)
        for name, p in work.params.items():  # undo BN running-stat updates in place
            p.values[...] = snapshot[name]
        return loss

    _, grads = forward_backward(work, x, y)
    for name, p in work.params.items():
        p.values[...] = base[name]

    worst = 0.0
    rng = np.random.default_rng(0)
    for name, p in work.params.items():
        if name not in grads:
            continue
        flat = p.values.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = loss_only()
            flat[i] = orig - epsilon
            lm = loss_only()
            flat[i] = orig
            numeric = (lp - lm) / (2 * epsilon)
            analytic = grads[name].reshape(-1)[i]
            denom = max(abs(analytic), abs(numeric))
            rel = abs(analytic - numeric) / denom if denom > 0 else 0.0
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# dataset cache in the canonical blob format

def save_dataset(ds: Dataset, path: str) -> str:
    import json

    base = path[:-5] if path.endswith(".json") else path
    arrays = {
        "samples": ds.samples.astype("<f4"),
        "labels": ds.labels.astype("<i4"),
        "train_idx": ds.train_idx.astype("<i4"),
        "test_idx": ds.test_idx.astype("<i4"),
    }
    manifest = {
        "format": "dnnforge-dataset",
        "version": 1,
        "num_classes": int(ds.num_classes),
        "tensors": [{"name": k, "shape": list(v.shape),
                     "dtype": "f32" if v.dtype.kind == "f" else "i32"}
                    for k, v in arrays.items()],
    }
    with open(base + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(base + ".bin", "wb") as f:
        for v in arrays.values():
            f.write(np.ascontiguousarray(v).tobytes())
    return base + ".json"


def load_dataset(path: str) -> Dataset:
    import json

    base = path[:-5] if path.endswith(".json") else path
    try:
        with open(base + ".json") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"cannot read dataset manifest {base}.json: {e}") from e
    if manifest.get("format") != "dnnforge-dataset":
        raise ParseError(f"{base}.json: not a dnnforge dataset manifest")
    with open(base + ".bin", "rb") as f:
        blob = f.read()
    arrays = {}
    off = 0
    for t in manifest["tensors"]:
        dt = np.dtype("<f4") if t["dtype"] == "f32" else np.dtype("<i4")
        n = int(np.prod(t["shape"])) * dt.itemsize
        arrays[t["name"]] = np.frombuffer(blob[off:off + n], dtype=dt).reshape(t["shape"])
        off += n
    return Dataset(samples=arrays["samples"], labels=arrays["labels"],
                   train_idx=arrays["train_idx"], test_idx=arrays["test_idx"],
                   num_classes=int(manifest["num_classes"]))
