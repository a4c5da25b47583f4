"""Element-wise and structural pruning: heuristics, schedules, shrinking.

Element masks are boolean arrays (True = pruned, held at exact zero);
structural pruning tracks a keep-list of surviving structures per layer
(conv filters, linear rows). During training both modes operate through
masks so the optimizer state stays aligned; the physical removal of
structures, including the propagation into downstream input channels,
batch-norm parameters and next-layer columns, happens in
``shrink_structures`` once training is done. Because a masked structure
contributes exact zeros everywhere downstream, the shrunk graph reproduces
the masked graph's deployment-path outputs bit for bit.

Sparsity targets apply per layer. Biases are never pruned element-wise;
structural pruning removes the bias entries of removed structures.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .ir import Graph, Node

ELEMENT_HEURISTICS = ("level", "random")
STRUCTURAL_HEURISTICS = ("l1", "l2", "gradient", "activation_zeros", "random")


@dataclass
class PruneSchedule:
    """One-shot or automated-gradual schedule parameters."""

    kind: str = "agp"            # "one_shot" | "agp"
    s_i: float = 0.0
    s_f: float = 0.5
    t0: int = 0
    n: int = 1
    dt: int = 1

    def __post_init__(self):
        if self.kind not in ("one_shot", "agp"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not (0.0 <= self.s_i <= self.s_f <= 1.0):
            raise ValueError(f"need 0 <= s_i <= s_f <= 1, got {self.s_i}, {self.s_f}")
        if self.n < 1 or self.dt < 1:
            raise ValueError("n and dt must be >= 1")


def agp_sparsity(sched: PruneSchedule, t: int) -> float:
    """Target sparsity at epoch t on the cubic ramp from s_i to s_f.

    Epochs before t0 return s_i; epochs past the last step return s_f;
    epochs between step boundaries clamp down to the previous boundary.
    """
    if t <= sched.t0:
        return sched.s_i
    span = sched.n * sched.dt
    if t >= sched.t0 + span:
        return sched.s_f
    steps = (t - sched.t0) // sched.dt
    tt = steps * sched.dt
    frac = 1.0 - tt / span
    return sched.s_f + (sched.s_i - sched.s_f) * frac ** 3


@dataclass
class Heuristic:
    """Importance criterion; gradient/activation kinds need calibration data."""

    kind: str = "level"
    seed: int = 0
    calib: tuple | None = None   # (samples, labels) for gradient/activation ranking

    def __post_init__(self):
        if self.kind not in set(ELEMENT_HEURISTICS) | set(STRUCTURAL_HEURISTICS):
            raise ValueError(f"unknown heuristic {self.kind!r}")


def _salt(seed: int, name: str) -> int:
    return (seed + zlib.crc32(name.encode())) & 0xFFFFFFFF


def rank_elements(tensor: np.ndarray, h: Heuristic, name: str = "") -> np.ndarray:
    """Flat indices in ascending importance (least important first).

    Ties resolve to the lower flat index; random uses a seeded shuffle.
    """
    tensor = np.asarray(tensor)
    if h.kind == "level":
        return np.argsort(np.abs(tensor).reshape(-1), kind="stable")
    if h.kind == "random":
        rng = np.random.default_rng(_salt(h.seed, name))
        return rng.permutation(tensor.size)
    raise ValueError(f"heuristic {h.kind!r} does not apply to element-wise pruning")


def structure_importance(g: Graph, node: Node, h: Heuristic) -> np.ndarray:
    """Importance value per structure (conv filter / linear row) of one layer."""
    w = g.params[node.params["weight"]].values
    flat = w.reshape(w.shape[0], -1)
    if h.kind == "l1":
        return np.abs(flat).sum(axis=1)
    if h.kind == "l2":
        return np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1))
    if h.kind == "random":
        rng = np.random.default_rng(_salt(h.seed, node.name))
        return rng.permutation(w.shape[0]).astype(np.float64)
    if h.kind == "gradient":
        if h.calib is None:
            raise ValueError("gradient heuristic requires calibration data")
        from .trainer import forward_backward

        x, y = h.calib
        _, grads = forward_backward(g, np.asarray(x), np.asarray(y))
        gw = grads[node.params["weight"]].reshape(w.shape[0], -1)
        return np.abs(flat * gw).mean(axis=1)
    if h.kind == "activation_zeros":
        if h.calib is None:
            raise ValueError("activation_zeros heuristic requires calibration data")
        from . import refrun

        x, _ = h.calib
        acts = refrun.forward_batch(g, np.asarray(x, dtype=np.float32))
        edge = _post_relu_edge(g, node)
        a = acts[edge]
        axes = tuple(i for i in range(a.ndim) if i != 1)
        zero_frac = (a == 0).mean(axis=axes)
        # structures with the most zeros rank least important
        return 1.0 - zero_frac
    raise ValueError(f"heuristic {h.kind!r} does not apply to structural pruning")


def _post_relu_edge(g: Graph, node: Node) -> str:
    """Follow the single-consumer chain through BatchNorm to the ReLU output."""
    edge = node.outputs[0]
    for _ in range(4):
        consumers = g.consumers(edge)
        if len(consumers) != 1:
            break
        c = consumers[0]
        if c.op == "ReLU":
            return c.outputs[0]
        if c.op == "BatchNorm":
            edge = c.outputs[0]
            continue
        break
    return edge


def rank_structures(g: Graph, node: Node | str, h: Heuristic) -> np.ndarray:
    """Structure indices in ascending importance; deterministic ties."""
    if isinstance(node, str):
        node = g.node(node)
    imp = structure_importance(g, node, h)
    return np.argsort(imp, kind="stable")


def prunable_weights(g: Graph) -> list[str]:
    """Element-prunable parameter tensors: conv/linear weights, never biases."""
    return [n.params["weight"] for n in g.nodes if n.op in ("Conv2D", "Linear")]


def apply_element_mask(g: Graph, masks: dict[str, np.ndarray]) -> Graph:
    """Zero the masked weights; shapes stay intact. Returns a new graph."""
    g = g.copy()
    for name, mask in masks.items():
        p = g.params[name]
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != p.values.shape:
            raise ValueError(f"mask shape {mask.shape} != tensor shape {p.values.shape} for {name!r}")
        p.values[mask] = 0
    return g


# ---------------------------------------------------------------------------
# structural removal with dependency propagation

def _propagate_effects(g: Graph, node: Node, kept: list[int]) -> list[tuple[str, int, np.ndarray, str]]:
    """Slice list [(param, axis, kept indices)] implied by keeping ``kept``
    structures of ``node``, following data dependencies downstream."""
    kept = np.asarray(sorted(int(i) for i in kept), dtype=np.int64)
    w = g.params[node.params["weight"]]
    n_struct = w.desc.shape[0]
    if kept.size == 0:
        raise ValueError(f"node {node.name!r}: keep-list empties the layer")
    if kept.size and (kept[0] < 0 or kept[-1] >= n_struct):
        raise ValueError(f"node {node.name!r}: keep index out of range")
    effects: list[tuple[str, int, np.ndarray, str]] = [
        (node.params["weight"], 0, kept, "weight"),
        (node.params["bias"], 0, kept, "bias"),
    ]

    def walk(edge: str, idx: np.ndarray, total: int):
        if edge in g.outputs:
            raise ValueError(
                f"node {node.name!r}: structural pruning would reach graph output {edge!r}"
            )
        for c in g.consumers(edge):
            if c.op in ("ReLU", "MaxPool", "Softmax"):
                walk(c.outputs[0], idx, total)
            elif c.op == "BatchNorm":
                for role in ("gamma", "beta", "mean", "var"):
                    effects.append((c.params[role], 0, idx, role))
                walk(c.outputs[0], idx, total)
            elif c.op == "Flatten":
                per = g.edges[edge].numel // total
                expanded = (idx[:, None] * per + np.arange(per)[None, :]).reshape(-1)
                walk(c.outputs[0], expanded, total * per)
            elif c.op in ("Conv2D", "Linear"):
                effects.append((c.params["weight"], 1, idx, "weight"))
            elif c.op == "Add":
                raise ValueError(
                    f"node {node.name!r}: structural pruning through Add joins is not supported"
                )
            else:
                raise ValueError(
                    f"node {node.name!r}: cannot propagate structural pruning through {c.op}"
                )

    walk(node.outputs[0], kept, n_struct)
    return effects


def structural_targets(g: Graph) -> list[str]:
    """Conv/linear nodes whose filters/rows can be removed safely."""
    names = []
    for n in g.nodes:
        if n.op not in ("Conv2D", "Linear"):
            continue
        n_struct = g.params[n.params["weight"]].desc.shape[0]
        try:
            _propagate_effects(g, n, list(range(n_struct)))
        except ValueError:
            continue
        names.append(n.name)
    return names


def structural_masks(g: Graph, keep: dict[str, list[int]]) -> dict[str, np.ndarray]:
    """Element masks equivalent to a keep-list (True = pruned).

    Covers the layer's weight rows and bias entries plus the gamma/beta of a
    directly following BatchNorm, so masked structures produce exact zeros.
    """
    masks: dict[str, np.ndarray] = {}
    for name, kept in keep.items():
        node = g.node(name)
        effects = _propagate_effects(g, node, kept)
        for pname, axis, idx, role in effects:
            if axis != 0 or role in ("mean", "var"):
                continue  # downstream columns and BN stats need no masking
            p = g.params[pname]
            dropped = np.setdiff1d(np.arange(p.desc.shape[0]), idx)
            m = masks.setdefault(pname, np.zeros(p.desc.shape, dtype=bool))
            m[dropped] = True
    return masks


def shrink_structures(g: Graph, keep: dict[str, list[int]]) -> Graph:
    """Physically remove structures and everything depending on them."""
    effects: list[tuple[str, int, np.ndarray, str]] = []
    for name, kept in keep.items():
        effects.extend(_propagate_effects(g, g.node(name), kept))
    g = g.copy()
    for pname, axis, idx, _role in effects:
        p = g.params[pname]
        p.values = np.take(p.values, idx, axis=axis)
        p.desc.shape = tuple(p.values.shape)
    from .ir import infer_shapes

    infer_shapes(g)
    g.validate()
    return g


def effective_param_count(g: Graph) -> int:
    """Parameters that still carry a value: zeros inside prunable weight
    tensors (or zero-point entries for quantized ones) do not count."""
    prunable = set()
    for n in g.nodes:
        if n.op in ("Conv2D", "Linear", "QLinearConv", "QLinearMatMul"):
            prunable.add(n.params["weight"])
    total = 0
    for name, p in g.params.items():
        if name in prunable:
            if p.desc.dtype == "u8" and p.desc.quant is not None:
                total += int(np.count_nonzero(p.values != p.desc.quant.zero_point))
            else:
                total += int(np.count_nonzero(p.values))
        else:
            total += int(p.values.size)
    return total


def realized_sparsity(g: Graph) -> float:
    """Fraction of baseline parameters that no longer carry a value."""
    baseline = g.meta.get("baseline_params", g.param_count())
    return 1.0 - effective_param_count(g) / baseline if baseline else 0.0


# ---------------------------------------------------------------------------
# training-time schedule hook

class PruneHook:
    """Trainer hook that grows masks along a pruning schedule.

    Masks are monotone: once an element or structure is pruned it stays
    pruned across retraining. ``after_step`` re-zeros masked weights and
    their momentum, which is what removes them from the optimizer's scope.
    """

    def __init__(self, sched: PruneSchedule, heuristic: Heuristic,
                 mode: str = "element", calib_size: int = 64):
        if mode not in ("element", "structural"):
            raise ValueError(f"unknown pruning mode {mode!r}")
        if mode == "element" and heuristic.kind not in ELEMENT_HEURISTICS:
            raise ValueError(f"heuristic {heuristic.kind!r} is structural-only")
        if mode == "structural" and heuristic.kind not in STRUCTURAL_HEURISTICS:
            raise ValueError(f"heuristic {heuristic.kind!r} is element-only")
        self.sched = sched
        self.heuristic = heuristic
        self.mode = mode
        self.calib_size = calib_size
        self.masks: dict[str, np.ndarray] = {}
        self.keep: dict[str, list[int]] = {}
        self.events: list[tuple[int, float]] = []
        self._element_order: dict[str, np.ndarray] = {}
        self._applied_target = 0.0

    # -- schedule -----------------------------------------------------------

    def _boundary(self, t: int) -> bool:
        s = self.sched
        if s.kind == "one_shot":
            return t == s.t0
        return s.t0 <= t <= s.t0 + s.n * s.dt and (t - s.t0) % s.dt == 0

    def _target(self, t: int) -> float:
        if self.sched.kind == "one_shot":
            return self.sched.s_f
        return agp_sparsity(self.sched, t)

    def on_epoch_begin(self, epoch: int, g: Graph, ctx) -> None:
        if self._boundary(epoch):
            self._apply(epoch, g, ctx)

    def on_train_end(self, epochs: int, g: Graph, ctx) -> None:
        if self.sched.kind == "agp" and self._boundary(epochs):
            self._apply(epochs, g, ctx)

    def after_step(self, g: Graph, ctx) -> None:
        for name, mask in self.masks.items():
            g.params[name].values[mask] = 0
            v = ctx.velocity.get(name) if ctx is not None else None
            if v is not None:
                v[mask] = 0

    # -- mask growth ---------------------------------------------------------

    def _calib(self, ctx):
        if self.heuristic.calib is not None:
            return self.heuristic.calib
        if ctx is None or ctx.data is None:
            raise ValueError(f"{self.heuristic.kind} heuristic needs calibration data")
        k = min(self.calib_size, len(ctx.data.train_idx))
        return ctx.data.train_x[:k], ctx.data.train_y[:k]

    def _apply(self, t: int, g: Graph, ctx) -> None:
        target = self._target(t)
        if target <= self._applied_target or target <= 0:
            return
        if self.mode == "element":
            self._grow_element(target, g)
        else:
            self._grow_structural(target, g, ctx)
        self._applied_target = target
        self.events.append((t, target))
        self.after_step(g, ctx if ctx is not None else None)

    def _grow_element(self, target: float, g: Graph) -> None:
        for name in prunable_weights(g):
            w = g.params[name].values
            mask = self.masks.setdefault(name, np.zeros(w.shape, dtype=bool))
            want = math.ceil(target * w.size)
            have = int(mask.sum())
            if want <= have:
                continue  # rounding already reached this step's count
            if name not in self._element_order and self.heuristic.kind == "random":
                h = Heuristic("random", seed=self.heuristic.seed)
                self._element_order[name] = rank_elements(w, h, name=name)
            if self.heuristic.kind == "random":
                order = self._element_order[name]
            else:
                order = rank_elements(w, self.heuristic, name=name)
            flat = mask.reshape(-1)
            fresh = order[~flat[order]][:want - have]
            flat[fresh] = True

    def _grow_structural(self, target: float, g: Graph, ctx) -> None:
        h = self.heuristic
        if h.kind in ("gradient", "activation_zeros") and h.calib is None:
            h = Heuristic(h.kind, seed=h.seed, calib=self._calib(ctx))
        changed = False
        for name in structural_targets(g):
            node = g.node(name)
            n_struct = g.params[node.params["weight"]].desc.shape[0]
            kept = self.keep.get(name, list(range(n_struct)))
            want_drop = min(math.ceil(target * n_struct), n_struct - 1)
            have_drop = n_struct - len(kept)
            if want_drop <= have_drop:
                continue
            order = rank_structures(g, node, h)
            kept_set = set(kept)
            victims = [int(i) for i in order if int(i) in kept_set][:want_drop - have_drop]
            kept = sorted(kept_set - set(victims))
            self.keep[name] = kept
            changed = True
        if changed:
            self.masks = structural_masks(g, self.keep)


def schedule_hook(sched: PruneSchedule, heuristic: Heuristic,
                  mode: str = "element", calib_size: int = 64) -> PruneHook:
    return PruneHook(sched, heuristic, mode=mode, calib_size=calib_size)
