"""Graph IR, model bundle I/O, validation, topological ordering, shape inference.

A model bundle on disk is a pair of files: a JSON manifest ``<name>.json``
and a raw blob ``<name>.bin``. The manifest describes topology, operator
attributes, and tensor metadata; the blob is the concatenation of all
parameter tensors in manifest order, little-endian, with no padding
between tensors. Bundles always store parameters densely; the compact CRS
layout exists only in the packed weight stream (see ``pack``).

Activation tensors are batch-free: convolutional activations are (C, H, W)
channel-major, conv weights are (F, C, Kh, Kw), linear weights (out, in).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np


class ModelError(Exception):
    """Base class for model loading/validation failures."""


class ParseError(ModelError):
    """Manifest or blob could not be decoded."""


class ValidationError(ModelError):
    """Graph structure violates an invariant."""


DTYPES = {
    "f32": np.dtype("<f4"),
    "u8": np.dtype("u1"),
    "i32": np.dtype("<i4"),
}

ELEM_SIZE = {"f32": 4, "u8": 1, "i32": 4}


def np_dtype(name: str) -> np.dtype:
    try:
        return DTYPES[name]
    except KeyError:
        raise ParseError(f"unknown element type {name!r}") from None


@dataclass
class QuantParams:
    """Affine quantization parameters: real = scale * (stored - zero_point)."""

    scale: float
    zero_point: int
    min_data: float | None = None
    max_data: float | None = None

    def validate(self, where: str = "") -> None:
        if not (self.scale > 0.0):
            raise ValidationError(f"{where}: quant scale must be > 0, got {self.scale}")
        if not (0 <= int(self.zero_point) <= 255):
            raise ValidationError(f"{where}: zero point {self.zero_point} outside [0, 255]")

    def to_json(self) -> dict:
        d = {"scale": float(self.scale), "zero_point": int(self.zero_point)}
        if self.min_data is not None:
            d["min_data"] = float(self.min_data)
        if self.max_data is not None:
            d["max_data"] = float(self.max_data)
        return d

    @staticmethod
    def from_json(d: dict) -> "QuantParams":
        return QuantParams(
            scale=float(d["scale"]),
            zero_point=int(d["zero_point"]),
            min_data=d.get("min_data"),
            max_data=d.get("max_data"),
        )


@dataclass
class TensorDesc:
    """Shape, element type, layout, and optional quantization of one tensor."""

    shape: tuple[int, ...]
    dtype: str = "f32"
    layout: str = "dense"
    quant: QuantParams | None = None

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)

    @property
    def numel(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    @property
    def nbytes(self) -> int:
        return self.numel * ELEM_SIZE[self.dtype]

    def validate(self, where: str = "") -> None:
        if len(self.shape) == 0:
            raise ValidationError(f"{where}: empty shape")
        if any(d <= 0 for d in self.shape):
            raise ValidationError(f"{where}: non-positive dimension in shape {self.shape}")
        if self.dtype not in DTYPES:
            raise ValidationError(f"{where}: unknown dtype {self.dtype!r}")
        if self.layout not in ("dense", "crs"):
            raise ValidationError(f"{where}: unknown layout {self.layout!r}")
        if self.layout == "crs" and len(self.shape) != 2:
            raise ValidationError(f"{where}: crs layout requires a 2-D logical shape")
        if self.dtype == "u8" and self.quant is None:
            raise ValidationError(f"{where}: u8 tensor without quantization parameters")
        if self.quant is not None:
            self.quant.validate(where)

    def to_json(self) -> dict:
        d = {"shape": list(self.shape), "dtype": self.dtype}
        if self.layout != "dense":
            d["layout"] = self.layout
        if self.quant is not None:
            d["quant"] = self.quant.to_json()
        return d

    @staticmethod
    def from_json(d: dict) -> "TensorDesc":
        q = QuantParams.from_json(d["quant"]) if "quant" in d else None
        return TensorDesc(
            shape=tuple(d["shape"]),
            dtype=d.get("dtype", "f32"),
            layout=d.get("layout", "dense"),
            quant=q,
        )


@dataclass
class ParamTensor:
    """A static parameter tensor: descriptor plus dense values."""

    desc: TensorDesc
    values: np.ndarray

    def validate(self, where: str = "") -> None:
        self.desc.validate(where)
        if self.values.size != self.desc.numel:
            raise ValidationError(
                f"{where}: value count {self.values.size} != shape product {self.desc.numel}"
            )
        if self.values.dtype != DTYPES[self.desc.dtype]:
            self.values = self.values.astype(DTYPES[self.desc.dtype])


# Operator registry: input/output arity, parameter roles, and attributes.
# An attribute default of None marks a required attribute.
OPS: dict[str, dict] = {
    "Conv2D": dict(nin=1, nout=1, params=("weight", "bias"),
                   attrs={"kernel": None, "stride": 1, "pad": 0}),
    "Linear": dict(nin=1, nout=1, params=("weight", "bias"), attrs={}),
    "BatchNorm": dict(nin=1, nout=1, params=("gamma", "beta", "mean", "var"),
                      attrs={"epsilon": 1e-5}),
    "MaxPool": dict(nin=1, nout=1, params=(), attrs={"pool": None}),
    "ReLU": dict(nin=1, nout=1, params=(), attrs={}),
    "Softmax": dict(nin=1, nout=1, params=(), attrs={}),
    "Flatten": dict(nin=1, nout=1, params=(), attrs={}),
    "Add": dict(nin=2, nout=1, params=(), attrs={}),
    "QuantizeLinear": dict(nin=1, nout=1, params=(), attrs={}),
    "DequantizeLinear": dict(nin=1, nout=1, params=(), attrs={}),
    "QLinearConv": dict(nin=1, nout=1, params=("weight", "bias"),
                        attrs={"kernel": None, "stride": 1, "pad": 0, "clamp_min": 0}),
    "QLinearMatMul": dict(nin=1, nout=1, params=("weight", "bias"),
                          attrs={"clamp_min": 0}),
}


@dataclass
class Node:
    """One operator: kind, attributes, edge references, attached parameters."""

    name: str
    op: str
    inputs: list[str]
    outputs: list[str]
    attrs: dict = field(default_factory=dict)
    params: dict[str, str] = field(default_factory=dict)

    def attr(self, key: str):
        if key in self.attrs:
            return self.attrs[key]
        return OPS[self.op]["attrs"][key]

    def validate(self) -> None:
        if self.op not in OPS:
            raise ValidationError(f"node {self.name!r}: unknown op kind {self.op!r}")
        spec = OPS[self.op]
        if len(self.inputs) != spec["nin"]:
            raise ValidationError(
                f"node {self.name!r}: {self.op} takes {spec['nin']} input(s), got {len(self.inputs)}"
            )
        if len(self.outputs) != spec["nout"]:
            raise ValidationError(
                f"node {self.name!r}: {self.op} produces {spec['nout']} output(s), got {len(self.outputs)}"
            )
        for key in self.attrs:
            if key not in spec["attrs"]:
                raise ValidationError(f"node {self.name!r}: {self.op} has no attribute {key!r}")
        for key, default in spec["attrs"].items():
            if default is None and key not in self.attrs:
                raise ValidationError(f"node {self.name!r}: missing required attribute {key!r}")
        roles = set(self.params)
        expected = set(spec["params"])
        if roles != expected:
            raise ValidationError(
                f"node {self.name!r}: parameter roles {sorted(roles)} != expected {sorted(expected)}"
            )

    def to_json(self) -> dict:
        d = {"name": self.name, "op": self.op, "inputs": list(self.inputs),
             "outputs": list(self.outputs)}
        if self.attrs:
            d["attrs"] = dict(self.attrs)
        if self.params:
            d["params"] = dict(self.params)
        return d


@dataclass
class Graph:
    """Directed acyclic operator graph with named activation edges."""

    name: str
    nodes: list[Node] = field(default_factory=list)
    edges: dict[str, TensorDesc] = field(default_factory=dict)
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    params: dict[str, ParamTensor] = field(default_factory=dict)
    param_order: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def producer(self, edge: str) -> Node | None:
        for n in self.nodes:
            if edge in n.outputs:
                return n
        return None

    def consumers(self, edge: str) -> list[Node]:
        return [n for n in self.nodes if edge in n.inputs]

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def add_param(self, name: str, values: np.ndarray, desc: TensorDesc | None = None) -> str:
        if desc is None:
            desc = TensorDesc(shape=values.shape, dtype="f32")
        p = ParamTensor(desc=desc, values=np.asarray(values, dtype=DTYPES[desc.dtype]))
        self.params[name] = p
        if name not in self.param_order:
            self.param_order.append(name)
        return name

    def copy(self) -> "Graph":
        import copy as _copy

        g = Graph(
            name=self.name,
            nodes=[Node(n.name, n.op, list(n.inputs), list(n.outputs),
                        dict(n.attrs), dict(n.params)) for n in self.nodes],
            edges={k: TensorDesc(v.shape, v.dtype, v.layout,
                                 _copy.copy(v.quant)) for k, v in self.edges.items()},
            inputs=list(self.inputs),
            outputs=list(self.outputs),
            params={k: ParamTensor(TensorDesc(p.desc.shape, p.desc.dtype, p.desc.layout,
                                              _copy.copy(p.desc.quant)),
                                   p.values.copy()) for k, p in self.params.items()},
            param_order=list(self.param_order),
            meta=_copy.deepcopy(self.meta),
        )
        return g

    def param_count(self) -> int:
        return sum(p.values.size for p in self.params.values())

    def validate(self) -> None:
        produced: dict[str, str] = {}
        for n in self.nodes:
            n.validate()
            for out in n.outputs:
                if out in produced:
                    raise ValidationError(
                        f"edge {out!r} produced by both {produced[out]!r} and {n.name!r}"
                    )
                if out in self.inputs:
                    raise ValidationError(
                        f"node {n.name!r}: writes to graph input edge {out!r}"
                    )
                produced[out] = n.name
        for n in self.nodes:
            for inp in n.inputs:
                if inp not in produced and inp not in self.inputs:
                    raise ValidationError(
                        f"node {n.name!r}: input edge {inp!r} is never produced (dangling)"
                    )
            for role, pname in n.params.items():
                if pname not in self.params:
                    raise ValidationError(
                        f"node {n.name!r}: parameter {pname!r} ({role}) not found"
                    )
        for out in self.outputs:
            if out not in produced and out not in self.inputs:
                raise ValidationError(f"graph output edge {out!r} is never produced")
        for name, p in self.params.items():
            p.validate(f"param {name!r}")
        for name, desc in self.edges.items():
            if desc.shape:
                desc.validate(f"edge {name!r}")
        toposort(self)  # raises on cycles


def toposort(g: Graph) -> list[Node]:
    """Kahn's algorithm; ties broken by manifest node index (deterministic)."""
    import heapq

    index = {n.name: i for i, n in enumerate(g.nodes)}
    producer = {}
    for n in g.nodes:
        for out in n.outputs:
            producer[out] = n.name
    preds: dict[str, set[str]] = {n.name: set() for n in g.nodes}
    for n in g.nodes:
        for inp in n.inputs:
            if inp in producer:
                preds[n.name].add(producer[inp])
    indegree = {name: len(p) for name, p in preds.items()}
    succs: dict[str, list[str]] = {n.name: [] for n in g.nodes}
    for name, p in preds.items():
        for q in p:
            succs[q].append(name)
    ready = [index[name] for name, d in indegree.items() if d == 0]
    heapq.heapify(ready)
    order: list[Node] = []
    while ready:
        i = heapq.heappop(ready)
        node = g.nodes[i]
        order.append(node)
        for s in succs[node.name]:
            indegree[s] -= 1
            if indegree[s] == 0:
                heapq.heappush(ready, index[s])
    if len(order) != len(g.nodes):
        stuck = sorted(name for name, d in indegree.items() if d > 0)
        raise ValidationError(f"cycle detected involving nodes {stuck}")
    return order


def _conv_out(n: Node, hw: int, where: str) -> int:
    k = int(n.attr("kernel"))
    s = int(n.attr("stride"))
    p = int(n.attr("pad"))
    if k <= 0 or s <= 0 or p < 0:
        raise ValidationError(f"node {n.name!r}: invalid kernel/stride/pad ({k}, {s}, {p})")
    out = (hw + 2 * p - k) // s + 1
    if hw + 2 * p - k < 0 or out <= 0:
        raise ValidationError(
            f"node {n.name!r}: {where} dimension {hw} too small for kernel {k} stride {s} pad {p}"
        )
    return out


def infer_shapes(g: Graph, input_shape=None) -> Graph:
    """Populate every edge TensorDesc by tracing execution; idempotent.

    ``input_shape`` may be None (use shapes already present on input edges),
    a single shape sequence (graphs with exactly one input), or a mapping
    from input edge name to shape.
    """
    if input_shape is not None:
        if isinstance(input_shape, dict):
            shapes = {k: tuple(v) for k, v in input_shape.items()}
        else:
            if len(g.inputs) != 1:
                raise ValidationError("input_shape must be a mapping for multi-input graphs")
            shapes = {g.inputs[0]: tuple(input_shape)}
        for name, shape in shapes.items():
            if name not in g.inputs:
                raise ValidationError(f"{name!r} is not a graph input")
            old = g.edges.get(name)
            if old is not None and old.shape and old.shape != shape:
                raise ValidationError(
                    f"input {name!r}: declared shape {old.shape} != provided {shape}"
                )
            if old is None:
                g.edges[name] = TensorDesc(shape=shape)
            else:
                old.shape = shape
    for name in g.inputs:
        if name not in g.edges or not g.edges[name].shape:
            raise ValidationError(f"input edge {name!r} has no shape")

    def set_edge(name: str, shape: tuple[int, ...], dtype: str, quant=None) -> None:
        old = g.edges.get(name)
        if old is None:
            g.edges[name] = TensorDesc(shape=shape, dtype=dtype, quant=quant)
        else:
            old.shape = tuple(shape)
            old.dtype = dtype
            if old.quant is None:
                old.quant = quant
        g.edges[name].validate(f"edge {name!r}")

    def pvals(n: Node, role: str) -> ParamTensor:
        return g.params[n.params[role]]

    for n in toposort(g):
        in_descs = [g.edges[e] for e in n.inputs]
        d0 = in_descs[0]
        if n.op in ("Conv2D", "QLinearConv"):
            if len(d0.shape) != 3:
                raise ValidationError(f"node {n.name!r}: conv input must be (C, H, W), got {d0.shape}")
            c, h, w = d0.shape
            wshape = pvals(n, "weight").desc.shape
            if len(wshape) != 4 or wshape[1] != c or wshape[2] != int(n.attr("kernel")) \
                    or wshape[3] != int(n.attr("kernel")):
                raise ValidationError(
                    f"node {n.name!r}: weight shape {wshape} inconsistent with input "
                    f"channels {c} and kernel {n.attr('kernel')}"
                )
            f = wshape[0]
            ho = _conv_out(n, h, "height")
            wo = _conv_out(n, w, "width")
            set_edge(n.outputs[0], (f, ho, wo), "u8" if n.op == "QLinearConv" else d0.dtype)
        elif n.op in ("Linear", "QLinearMatMul"):
            if len(d0.shape) != 1:
                raise ValidationError(
                    f"node {n.name!r}: linear input must be 1-D (flatten first), got {d0.shape}"
                )
            wshape = pvals(n, "weight").desc.shape
            if len(wshape) != 2 or wshape[1] != d0.shape[0]:
                raise ValidationError(
                    f"node {n.name!r}: weight shape {wshape} does not accept input size {d0.shape[0]}"
                )
            set_edge(n.outputs[0], (wshape[0],), "u8" if n.op == "QLinearMatMul" else d0.dtype)
        elif n.op == "BatchNorm":
            c = d0.shape[0]
            for role in ("gamma", "beta", "mean", "var"):
                if pvals(n, role).desc.shape != (c,):
                    raise ValidationError(
                        f"node {n.name!r}: {role} shape {pvals(n, role).desc.shape} != ({c},)"
                    )
            set_edge(n.outputs[0], d0.shape, d0.dtype)
        elif n.op == "MaxPool":
            p = int(n.attr("pool"))
            if len(d0.shape) != 3:
                raise ValidationError(f"node {n.name!r}: pool input must be (C, H, W), got {d0.shape}")
            c, h, w = d0.shape
            if h // p <= 0 or w // p <= 0:
                raise ValidationError(f"node {n.name!r}: pool size {p} larger than input {h}x{w}")
            set_edge(n.outputs[0], (c, h // p, w // p), d0.dtype, quant=d0.quant)
        elif n.op in ("ReLU", "Softmax"):
            set_edge(n.outputs[0], d0.shape, d0.dtype, quant=d0.quant)
        elif n.op == "Flatten":
            set_edge(n.outputs[0], (d0.numel,), d0.dtype, quant=d0.quant)
        elif n.op == "Add":
            d1 = in_descs[1]
            if d0.shape != d1.shape:
                raise ValidationError(
                    f"node {n.name!r}: add operand shapes {d0.shape} != {d1.shape}"
                )
            set_edge(n.outputs[0], d0.shape, d0.dtype)
        elif n.op == "QuantizeLinear":
            set_edge(n.outputs[0], d0.shape, "u8")
        elif n.op == "DequantizeLinear":
            set_edge(n.outputs[0], d0.shape, "f32")
        else:  # pragma: no cover - registry and branches kept in sync
            raise ValidationError(f"node {n.name!r}: no shape rule for op {n.op}")
    return g


def _manifest_path(path: str) -> tuple[str, str]:
    base = path[:-5] if path.endswith(".json") else path
    return base + ".json", base + ".bin"


def save_model(g: Graph, path: str) -> str:
    """Write the bundle ``<path>.json`` + ``<path>.bin``; returns the manifest path."""
    man_path, bin_path = _manifest_path(path)
    manifest = {
        "format": "dnnforge-model",
        "version": 1,
        "name": g.name,
        "inputs": list(g.inputs),
        "outputs": list(g.outputs),
        "edges": {k: v.to_json() for k, v in g.edges.items()},
        "nodes": [n.to_json() for n in g.nodes],
        "params": [dict(name=name, **g.params[name].desc.to_json())
                   for name in g.param_order],
        "meta": g.meta,
    }
    blob = bytearray()
    for name in g.param_order:
        p = g.params[name]
        blob += np.ascontiguousarray(p.values, dtype=DTYPES[p.desc.dtype]).tobytes()
    os.makedirs(os.path.dirname(os.path.abspath(man_path)), exist_ok=True)
    with open(man_path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(bin_path, "wb") as f:
        f.write(bytes(blob))
    return man_path


def load_model(path: str) -> Graph:
    """Load and validate a model bundle; all graph invariants hold on return."""
    man_path, bin_path = _manifest_path(path)
    try:
        with open(man_path) as f:
            manifest = json.load(f)
    except OSError as e:
        raise ParseError(f"cannot read manifest {man_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"manifest {man_path} is not valid JSON: {e}") from e
    if manifest.get("format") != "dnnforge-model":
        raise ParseError(f"{man_path}: not a dnnforge model manifest")
    if int(manifest.get("version", 0)) != 1:
        raise ParseError(f"{man_path}: unsupported manifest version {manifest.get('version')}")
    try:
        g = Graph(
            name=manifest.get("name", "model"),
            inputs=list(manifest["inputs"]),
            outputs=list(manifest["outputs"]),
            meta=dict(manifest.get("meta", {})),
        )
        for d in manifest.get("nodes", []):
            g.nodes.append(Node(
                name=d["name"], op=d["op"],
                inputs=list(d["inputs"]), outputs=list(d["outputs"]),
                attrs=dict(d.get("attrs", {})), params=dict(d.get("params", {})),
            ))
        for name, d in manifest.get("edges", {}).items():
            g.edges[name] = TensorDesc.from_json(d)
        pdescs = [(d["name"], TensorDesc.from_json(d)) for d in manifest.get("params", [])]
    except (KeyError, TypeError) as e:
        raise ParseError(f"{man_path}: malformed manifest ({e})") from e

    try:
        with open(bin_path, "rb") as f:
            blob = f.read()
    except OSError as e:
        if pdescs:
            raise ParseError(f"cannot read blob {bin_path}: {e}") from e
        blob = b""
    off = 0
    for name, desc in pdescs:
        dt = np_dtype(desc.dtype)
        n = desc.numel * dt.itemsize
        if off + n > len(blob):
            raise ParseError(
                f"{bin_path}: truncated blob, tensor {name!r} needs {n} bytes at offset {off}"
            )
        values = np.frombuffer(blob[off:off + n], dtype=dt).reshape(desc.shape).copy()
        g.params[name] = ParamTensor(desc=desc, values=values)
        g.param_order.append(name)
        off += n
    if off != len(blob):
        raise ParseError(f"{bin_path}: {len(blob) - off} trailing bytes after last tensor")
    g.validate()
    return g
