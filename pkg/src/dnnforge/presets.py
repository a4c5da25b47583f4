"""Bundled architecture presets and parameter initialization.

``lenet`` is a full-scale configuration (trainable at desk scale on MNIST).
``alexnet`` and ``resnet`` are structure-only configurations: their graphs
are complete and runnable, but nothing here claims training parity with any
published result. The residual preset documents one concrete interpretation:
a stride-2 stem, downsampling at block entry via the first conv (with a 1x1
projection shortcut when channel count or stride changes), so the classifier
input size follows from the 32x32 input resolution.
"""

from __future__ import annotations

import numpy as np

from .ir import Graph, Node, TensorDesc, infer_shapes


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_params(g: Graph, seed: int = 0) -> Graph:
    """Kaiming-uniform conv/linear weights, zero biases, identity batch-norm."""
    rng = np.random.default_rng(seed)
    for n in g.nodes:
        if n.op in ("Conv2D", "Linear"):
            w = g.params[n.params["weight"]]
            fan_in = int(np.prod(w.desc.shape[1:]))
            w.values = kaiming_uniform(rng, w.desc.shape, fan_in)
            b = g.params[n.params["bias"]]
            b.values = np.zeros(b.desc.shape, dtype=np.float32)
        elif n.op == "BatchNorm":
            g.params[n.params["gamma"]].values[:] = 1.0
            g.params[n.params["beta"]].values[:] = 0.0
            g.params[n.params["mean"]].values[:] = 0.0
            g.params[n.params["var"]].values[:] = 1.0
    return g


class _Builder:
    """Accumulates a chain of nodes; edge names derive from node names."""

    def __init__(self, name: str, input_edge: str, input_shape: tuple[int, ...]):
        self.g = Graph(name=name, inputs=[input_edge], outputs=[])
        self.g.edges[input_edge] = TensorDesc(shape=input_shape)
        self.head = input_edge

    def _zeros(self, name: str, shape: tuple[int, ...]) -> str:
        self.g.add_param(name, np.zeros(shape, dtype=np.float32))
        return name

    def node(self, name: str, op: str, inputs: list[str], attrs=None, params=None) -> str:
        out = f"{name}.out"
        self.g.nodes.append(Node(name=name, op=op, inputs=inputs, outputs=[out],
                                 attrs=attrs or {}, params=params or {}))
        self.head = out
        return out

    def conv(self, name: str, cin: int, cout: int, kernel: int, stride: int = 1,
             pad: int = 0, src: str | None = None) -> str:
        w = self._zeros(f"{name}.weight", (cout, cin, kernel, kernel))
        b = self._zeros(f"{name}.bias", (cout,))
        return self.node(name, "Conv2D", [src or self.head],
                         attrs={"kernel": kernel, "stride": stride, "pad": pad},
                         params={"weight": w, "bias": b})

    def bn(self, name: str, c: int, src: str | None = None) -> str:
        params = {role: self._zeros(f"{name}.{role}", (c,))
                  for role in ("gamma", "beta", "mean", "var")}
        return self.node(name, "BatchNorm", [src or self.head], params=params)

    def relu(self, name: str, src: str | None = None) -> str:
        return self.node(name, "ReLU", [src or self.head])

    def pool(self, name: str, size: int) -> str:
        return self.node(name, "MaxPool", [self.head], attrs={"pool": size})

    def flatten(self, name: str) -> str:
        return self.node(name, "Flatten", [self.head])

    def linear(self, name: str, nin: int, nout: int) -> str:
        w = self._zeros(f"{name}.weight", (nout, nin))
        b = self._zeros(f"{name}.bias", (nout,))
        return self.node(name, "Linear", [self.head], params={"weight": w, "bias": b})

    def softmax(self, name: str = "softmax") -> str:
        return self.node(name, "Softmax", [self.head])

    def add(self, name: str, a: str, b: str) -> str:
        return self.node(name, "Add", [a, b])

    def finish(self, seed: int) -> Graph:
        self.g.outputs = [self.head]
        infer_shapes(self.g)
        init_params(self.g, seed=seed)
        self.g.meta["baseline_params"] = self.g.param_count()
        self.g.validate()
        return self.g


def build_mlp(dims=(2, 32, 32, 2), name: str = "mlp", seed: int = 0) -> Graph:
    """Fully-connected classifier: Linear/ReLU chain with a Softmax head."""
    b = _Builder(name, "x", (dims[0],))
    for i in range(len(dims) - 1):
        b.linear(f"fc{i + 1}", dims[i], dims[i + 1])
        if i < len(dims) - 2:
            b.relu(f"relu{i + 1}")
    b.softmax()
    return b.finish(seed)


def build_lenet(name: str = "lenet", seed: int = 0) -> Graph:
    b = _Builder(name, "image", (1, 28, 28))
    b.conv("conv1", 1, 32, kernel=3, stride=1)
    b.relu("relu1")
    b.conv("conv2", 32, 64, kernel=3, stride=1)
    b.relu("relu2")
    b.pool("pool", 2)
    b.flatten("flatten")
    b.linear("fc1", 9216, 128)
    b.relu("relu3")
    b.linear("fc2", 128, 10)
    b.softmax()
    return b.finish(seed)


def build_alexnet(name: str = "alexnet", seed: int = 0) -> Graph:
    b = _Builder(name, "image", (3, 32, 32))
    convs = [(3, 64, 2, 2), (64, 192, 3, 1), (192, 384, 3, 1), (384, 256, 3, 1)]
    for i, (cin, cout, k, s) in enumerate(convs, start=1):
        b.conv(f"conv{i}", cin, cout, kernel=k, stride=s)
        b.bn(f"bn{i}", cout)
        b.relu(f"relu{i}")
    b.pool("pool", 2)
    b.flatten("flatten")
    b.linear("fc1", 6400, 4096)
    b.relu("relu5")
    b.linear("fc2", 4096, 4096)
    b.relu("relu6")
    b.linear("fc3", 4096, 10)
    b.softmax()
    return b.finish(seed)


def build_resnet(name: str = "resnet", seed: int = 0) -> Graph:
    b = _Builder(name, "image", (3, 32, 32))
    b.conv("stem", 3, 64, kernel=3, stride=2, pad=1)
    b.bn("stem_bn", 64)
    b.relu("stem_relu")
    blocks = [(64, 64, 1), (64, 128, 2), (128, 256, 2), (256, 512, 2)]
    for i, (cin, cout, stride) in enumerate(blocks, start=1):
        block_in = b.head
        b.conv(f"b{i}_conv1", cin, cout, kernel=3, stride=stride, pad=1)
        b.bn(f"b{i}_bn1", cout)
        b.relu(f"b{i}_relu1")
        b.conv(f"b{i}_conv2", cout, cout, kernel=3, stride=1, pad=1)
        main = b.bn(f"b{i}_bn2", cout)
        if cin != cout or stride != 1:
            b.conv(f"b{i}_proj", cin, cout, kernel=1, stride=stride, pad=0, src=block_in)
            shortcut = b.bn(f"b{i}_proj_bn", cout)
        else:
            shortcut = block_in
        b.add(f"b{i}_add", main, shortcut)
        b.relu(f"b{i}_relu2")
    b.pool("pool", 2)
    b.flatten("flatten")
    b.linear("fc", 512, 10)
    b.softmax()
    return b.finish(seed)


PRESETS = {
    "mlp": build_mlp,
    "lenet": build_lenet,
    "alexnet": build_alexnet,
    "resnet": build_resnet,
}


def build(name: str, seed: int = 0) -> Graph:
    try:
        builder = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None
    return builder(seed=seed)
