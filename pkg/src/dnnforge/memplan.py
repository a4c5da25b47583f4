"""Offline activation-memory planning: lifetimes plus first-fit placement.

The planner walks operators in serialized order with an unbounded balloon.
For each operator it first frees the regions in that operator's release
list, then places each allocation at the lowest-offset free gap that fits
(first fit, gaps scanned by ascending offset); the running maximum of the
highest occupied byte is the peak. Graph inputs and outputs live in caller
buffers and never enter the balloon.

An edge is released at its last consumer when that consumer can safely
write outputs over its own input region (elementwise and forward-moving
ops). Matrix-product consumers re-read their whole input while writing, so
their inputs release one operator later; that keeps emitted code correct
without touching the planner mechanics. Convolutions get a scratch region
for the im2col matrix, alive only during the operator itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ir import ELEM_SIZE, Graph, toposort

ALIGN = 4

# Ops that may produce into (parts of) the region their input occupied:
# elementwise or forward-moving with an output element no wider than the
# input element. DequantizeLinear widens u8 to f32 and would overwrite
# bytes it has not read yet, so it defers like the matrix products.
_REUSE_SAFE = ("ReLU", "MaxPool", "Flatten", "Softmax", "BatchNorm", "Add",
               "QuantizeLinear")
_CONV_OPS = ("Conv2D", "QLinearConv")


def align_up(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


@dataclass
class LifetimeTable:
    """Per-operator allocation and release lists over balloon-managed edges.

    ``release`` has one trailing slot: edges released only after the final
    operator land there. ``sizes`` holds the byte size of every edge in the
    table (scratch regions included).
    """

    order: list[str]
    alloc: list[list[str]]
    release: list[list[str]]
    sizes: dict[str, int] = field(default_factory=dict)

    def check(self) -> None:
        k = len(self.order)
        if len(self.alloc) != k or len(self.release) != k + 1:
            raise ValueError("alloc/release list lengths inconsistent with operator count")
        seen_alloc: dict[str, int] = {}
        seen_release: dict[str, int] = {}
        for i, names in enumerate(self.alloc):
            for e in names:
                if e in seen_alloc:
                    raise ValueError(f"edge {e!r} allocated twice")
                seen_alloc[e] = i
        for i, names in enumerate(self.release):
            for e in names:
                if e in seen_release:
                    raise ValueError(f"edge {e!r} released twice")
                seen_release[e] = i
        if set(seen_alloc) != set(seen_release):
            missing = set(seen_alloc) ^ set(seen_release)
            raise ValueError(f"allocation/release mismatch for {sorted(missing)}")
        for e, i in seen_alloc.items():
            if seen_release[e] < i:
                raise ValueError(f"edge {e!r} released before allocation")


def _scratch_bytes(g: Graph, node) -> int:
    k = int(node.attr("kernel"))
    s = int(node.attr("stride"))
    p = int(node.attr("pad"))
    if k == 1 and s == 1 and p == 0:
        return 0  # identity unroll reads the input in place
    c, h, w = g.edges[node.inputs[0]].shape
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    esize = ELEM_SIZE[g.edges[node.inputs[0]].dtype]
    return c * k * k * ho * wo * esize


def lifetimes(g: Graph, order=None) -> LifetimeTable:
    """Build the allocation/release lists for all non-I/O activation edges."""
    nodes = order if order is not None else toposort(g)
    k = len(nodes)
    index = {n.name: i for i, n in enumerate(nodes)}
    table = LifetimeTable(order=[n.name for n in nodes],
                          alloc=[[] for _ in range(k)],
                          release=[[] for _ in range(k + 1)])
    external = set(g.inputs) | set(g.outputs)
    for n in nodes:
        for e in n.outputs:
            if e in external:
                continue
            consumers = g.consumers(e)
            if not consumers:
                raise ValueError(f"edge {e!r} has no consumer and is not a graph output (dead edge)")
            last = max(index[c.name] for c in consumers)
            last_node = nodes[last]
            release_at = last if last_node.op in _REUSE_SAFE else last + 1
            table.alloc[index[n.name]].append(e)
            table.release[release_at].append(e)
            table.sizes[e] = g.edges[e].nbytes
        if n.op in _CONV_OPS:
            sb = _scratch_bytes(g, n)
            if sb:
                name = f"{n.name}#scratch"
                i = index[n.name]
                table.alloc[i].append(name)
                table.release[i + 1].append(name)
                table.sizes[name] = sb
    table.check()
    return table


@dataclass
class MemoryPlan:
    """Balloon offsets per edge, peak size, and per-operator occupancy."""

    offsets: dict[str, tuple[int, int]]      # edge -> (offset, aligned size)
    peak: int
    snapshots: list[list[tuple[str, int, int]]]
    order: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "peak_bytes": self.peak,
            "offsets": {e: {"offset": off, "bytes": sz}
                        for e, (off, sz) in sorted(self.offsets.items())},
            "order": list(self.order),
        }


def first_fit_plan(table: LifetimeTable, sizes: dict[str, int] | None = None) -> MemoryPlan:
    """Place every allocation at the first free gap, scanning by offset."""
    if sizes is None:
        sizes = table.sizes
    table.check()
    live: dict[str, tuple[int, int]] = {}
    offsets: dict[str, tuple[int, int]] = {}
    snapshots: list[list[tuple[str, int, int]]] = []
    peak = 0
    for i in range(len(table.order)):
        for e in table.release[i]:
            live.pop(e, None)
        for e in table.alloc[i]:
            size = align_up(int(sizes[e]))
            cursor = 0
            for off, sz in sorted(live.values()):
                if cursor + size <= off:
                    break
                cursor = max(cursor, off + sz)
            live[e] = (cursor, size)
            offsets[e] = (cursor, size)
        if live:
            peak = max(peak, max(off + sz for off, sz in live.values()))
        snapshots.append(sorted((e, off, sz) for e, (off, sz) in live.items()))
    return MemoryPlan(offsets=offsets, peak=peak, snapshots=snapshots,
                      order=list(table.order))


@dataclass
class PlanViolation:
    op_index: int
    edges: tuple[str, ...]
    message: str

    def __str__(self):
        return f"operator {self.op_index}: {self.message} ({', '.join(self.edges)})"


def verify_plan(plan: MemoryPlan, table: LifetimeTable) -> PlanViolation | None:
    """Independent overlap checker; returns the first violation or None.

    Asserts that concurrently-live regions are pairwise disjoint at every
    operator and that the recorded peak matches the occupancy maximum.
    """
    try:
        table.check()
    except ValueError as e:
        return PlanViolation(-1, (), str(e))
    alloc_at: dict[str, int] = {}
    release_at: dict[str, int] = {}
    for i, names in enumerate(table.alloc):
        for e in names:
            alloc_at[e] = i
    for i, names in enumerate(table.release):
        for e in names:
            release_at[e] = i
    for e in alloc_at:
        if e not in plan.offsets:
            return PlanViolation(alloc_at[e], (e,), "edge missing from plan")
    max_end = 0
    for i in range(len(table.order)):
        regions = []
        for e in alloc_at:
            if alloc_at[e] <= i < release_at[e]:
                off, sz = plan.offsets[e]
                regions.append((off, sz, e))
        regions.sort()
        for (o1, s1, e1), (o2, s2, e2) in zip(regions, regions[1:]):
            if o1 + s1 > o2:
                return PlanViolation(i, (e1, e2), "live regions overlap")
        if regions:
            max_end = max(max_end, max(o + s for o, s, _ in regions))
    if plan.peak != max_end:
        return PlanViolation(len(table.order) - 1, (),
                             f"recorded peak {plan.peak} != occupancy maximum {max_end}")
    return None


def plan_graph(g: Graph) -> MemoryPlan:
    """Convenience wrapper: lifetimes + first-fit for a shape-inferred graph."""
    return first_fit_plan(lifetimes(g))


def naive_total(table: LifetimeTable) -> int:
    """Sum of all aligned activation sizes: the no-reuse upper bound."""
    return int(sum(align_up(int(s)) for s in table.sizes.values()))
