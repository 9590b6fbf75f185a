"""Graph intermediate representation for feed-forward CNNs.

A :class:`ModelGraph` is a DAG of :class:`Node` objects.  Each node names its
producers in ``inputs``; the reserved id ``"input"`` is the graph source.
Tensors are plain ``numpy`` arrays (float32 unless a caller deliberately
promotes a graph with :meth:`ModelGraph.astype`).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

INPUT = "input"

KINDS = (
    "Conv",
    "BN",
    "ReLU",
    "ReLU6",
    "Add",
    "MaxPool",
    "GlobalAvgPool",
    "FC",
    "Flatten",
    "ChannelPad",
)

PARAM_KINDS = {"Conv", "BN", "FC"}


class GraphError(ValueError):
    """Raised when an operation is given a structurally invalid graph."""


@dataclass
class ConvSpec:
    weight: np.ndarray  # [out, in/groups, kh, kw]
    bias: Optional[np.ndarray] = None
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    groups: int = 1
    # Unstructured scheme only: effective weight is (weight * factor) masked.
    factor: Optional[np.ndarray] = None  # [in, in]
    mask: Optional[np.ndarray] = None  # shape of weight

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        if self.factor is not None:
            return self.factor.shape[1]
        return self.weight.shape[1] * self.groups

    @property
    def kernel(self):
        return self.weight.shape[2], self.weight.shape[3]


@dataclass
class BNSpec:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    @property
    def channels(self):
        return self.gamma.shape[0]

    @classmethod
    def fresh(cls, channels, dtype=np.float32, eps=1e-5):
        return cls(
            np.ones(channels, dtype),
            np.zeros(channels, dtype),
            np.zeros(channels, dtype),
            np.ones(channels, dtype),
            eps,
        )


@dataclass
class FCSpec:
    weight: np.ndarray  # [out, in]
    bias: Optional[np.ndarray] = None


@dataclass
class PoolSpec:
    kernel: int
    stride: int
    padding: int = 0


@dataclass
class PadSpec:
    """Parameter-free shortcut: spatial subsampling plus zero channel padding."""

    stride: int
    before: int
    after: int


@dataclass
class Node:
    id: str
    kind: str
    inputs: tuple
    params: object = None


@dataclass(frozen=True)
class BlockTag:
    stage: int
    block: int
    role: str  # "first" | "inner"

    @property
    def label(self):
        return f"{self.stage}.{self.block}"

    @classmethod
    def parse(cls, text, role="inner"):
        stage, block = str(text).split(".")
        return cls(int(stage), int(block), role)


@dataclass
class CostReport:
    params: int
    macs: int

    def __str__(self):
        return f"params={self.params:,} macs={self.macs:,}"


# tensor slots per parameterised node kind
_SLOTS = {
    "Conv": ("weight", "bias", "factor", "mask"),
    "BN": ("gamma", "beta", "running_mean", "running_var"),
    "FC": ("weight", "bias"),
}


def tensor_slots(node):
    """Yield ``(slot_name, array)`` for every tensor the node carries."""
    for name in _SLOTS.get(node.kind, ()):
        arr = getattr(node.params, name)
        if arr is not None:
            yield name, arr


@dataclass
class ModelGraph:
    nodes: dict = field(default_factory=dict)  # id -> Node, insertion order kept
    input_spec: tuple = (3, 32, 32)
    block_tags: dict = field(default_factory=dict)  # node id -> BlockTag
    mode: str = "eval"
    name: str = ""
    adaptors: dict = field(default_factory=dict)  # adaptor id -> surgery.Adaptor

    # ---- structure -------------------------------------------------------
    @property
    def edges(self):
        return [(src, n.id) for n in self.nodes.values() for src in n.inputs]

    def add(self, node_id, kind, inputs, params=None, tag=None):
        if node_id in self.nodes or node_id == INPUT:
            raise GraphError(f"duplicate node id {node_id!r}")
        if isinstance(inputs, str):
            inputs = (inputs,)
        self.nodes[node_id] = Node(node_id, kind, tuple(inputs), params)
        if tag is not None:
            self.block_tags[node_id] = tag
        return node_id

    def consumers(self, node_id):
        return [n.id for n in self.nodes.values() if node_id in n.inputs]

    def consumer_map(self):
        out = {INPUT: []}
        for nid in self.nodes:
            out[nid] = []
        for n in self.nodes.values():
            for src in n.inputs:
                out.setdefault(src, []).append(n.id)
        return out

    def sink(self):
        cmap = self.consumer_map()
        sinks = [nid for nid in self.nodes if not cmap[nid]]
        if len(sinks) != 1:
            raise GraphError(f"graph must have exactly one sink, found {sinks}")
        return sinks[0]

    def topo_order(self):
        """Kahn ordering, ties broken by insertion order.  Raises on cycles."""
        indeg = {nid: 0 for nid in self.nodes}
        for n in self.nodes.values():
            for src in n.inputs:
                if src != INPUT:
                    indeg[n.id] += 1
        cmap = self.consumer_map()
        position = {nid: i for i, nid in enumerate(self.nodes)}
        ready = sorted((nid for nid, d in indeg.items() if d == 0), key=position.get)
        order = []
        import heapq

        heap = [(position[nid], nid) for nid in ready]
        heapq.heapify(heap)
        while heap:
            _, nid = heapq.heappop(heap)
            order.append(nid)
            for c in cmap.get(nid, ()):
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(heap, (position[c], c))
        if len(order) != len(self.nodes):
            stuck = sorted(set(self.nodes) - set(order))
            raise GraphError(f"cycle through nodes {stuck}")
        return order

    def ancestors(self, targets):
        seen = set()
        stack = list(targets)
        while stack:
            nid = stack.pop()
            if nid in seen or nid == INPUT:
                continue
            seen.add(nid)
            stack.extend(self.nodes[nid].inputs)
        return seen

    def descendants(self, sources):
        cmap = self.consumer_map()
        seen = set()
        stack = list(sources)
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            stack.extend(cmap.get(nid, ()))
        return seen

    def replace_input(self, consumer, old, new):
        node = self.nodes[consumer]
        node.inputs = tuple(new if i == old else i for i in node.inputs)

    def remove(self, node_id):
        del self.nodes[node_id]
        self.block_tags.pop(node_id, None)

    def block_nodes(self, stage, block):
        return [nid for nid in self.nodes if (t := self.block_tags.get(nid)) and (t.stage, t.block) == (stage, block)]

    def blocks(self):
        """Sorted unique BlockTags present in the graph."""
        return sorted(set(self.block_tags.values()), key=lambda t: (t.stage, t.block))

    # ---- tensors ---------------------------------------------------------
    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        g = self.copy()
        for node in g.nodes.values():
            for name, arr in tensor_slots(node):
                if name != "mask":
                    setattr(node.params, name, arr.astype(dtype))
        for ad in g.adaptors.values():
            if ad.param[1] == "weight":
                ad.weight = g.nodes[ad.param[0]].params.weight
            else:
                ad.weight = g.nodes[ad.param[0]].params.factor
        return g

    def conv_ids(self):
        return [nid for nid, n in self.nodes.items() if n.kind == "Conv"]

    def classes(self):
        return infer_shapes(self)[self.sink()][0]


# --------------------------------------------------------------------------
# shape inference and validation
# --------------------------------------------------------------------------


def _conv_out(shape, spec):
    c, h, w = shape
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.padding
    return (spec.out_channels, (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1)


def _node_shape(node, in_shapes, problems):
    """Output shape of ``node`` given producer shapes; appends to ``problems``."""
    kind, p = node.kind, node.params
    x = in_shapes[0]
    if kind == "Conv":
        if len(x) != 3:
            problems.append((node.id, f"Conv expects a [C,H,W] input, got {x}"))
            return None
        if x[0] != p.in_channels:
            problems.append((node.id, f"Conv expects {p.in_channels} input channels, producer gives {x[0]}"))
        out = _conv_out(x, p)
        if out[1] <= 0 or out[2] <= 0:
            problems.append((node.id, f"Conv output collapses to {out}"))
        return out
    if kind == "BN":
        if x[0] != p.channels:
            problems.append((node.id, f"BN has {p.channels} channels, producer gives {x[0]}"))
        return x
    if kind in ("ReLU", "ReLU6"):
        return x
    if kind == "Add":
        if in_shapes[0] != in_shapes[1]:
            problems.append((node.id, f"Add inputs differ: {in_shapes[0]} vs {in_shapes[1]}"))
        return x
    if kind == "MaxPool":
        c, h, w = x
        k, s, pad = p.kernel, p.stride, p.padding
        return (c, (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1)
    if kind == "GlobalAvgPool":
        return (x[0], 1, 1)
    if kind == "Flatten":
        return (int(np.prod(x)),)
    if kind == "FC":
        feat = int(np.prod(x))
        if len(x) != 1:
            problems.append((node.id, f"FC expects a flat input, got {x}"))
        if feat != p.weight.shape[1]:
            problems.append((node.id, f"FC expects {p.weight.shape[1]} features, producer gives {feat}"))
        return (p.weight.shape[0],)
    if kind == "ChannelPad":
        c, h, w = x
        s = p.stride
        return (c + p.before + p.after, (h + s - 1) // s, (w + s - 1) // s)
    problems.append((node.id, f"unknown node kind {kind!r}"))
    return None


def infer_shapes(graph, problems=None):
    """Per-node output shapes (batch dim omitted).  Raises GraphError on failure
    unless a ``problems`` list is supplied to collect issues instead."""
    collect = problems is not None
    problems = problems if collect else []
    shapes = {INPUT: tuple(graph.input_spec)}
    for nid in graph.topo_order():
        node = graph.nodes[nid]
        ins = []
        for src in node.inputs:
            if src not in shapes:
                problems.append((nid, f"unknown producer {src!r}"))
                ins.append(None)
            else:
                ins.append(shapes[src])
        if any(s is None for s in ins) or not ins:
            shapes[nid] = None
            continue
        shapes[nid] = _node_shape(node, ins, problems)
    if problems and not collect:
        raise GraphError("; ".join(f"{nid}: {msg}" for nid, msg in problems))
    return shapes


@dataclass
class Violation:
    rule: str
    nodes: tuple
    detail: str

    def __str__(self):
        return f"[{self.rule}] {', '.join(self.nodes)}: {self.detail}"


def validate_graph(graph):
    """Return every violated structural invariant; an empty list means valid."""
    out = []
    ids = list(graph.nodes)
    if INPUT in graph.nodes:
        out.append(Violation("unique-id", (INPUT,), "'input' is reserved for the graph source"))
    for nid, node in graph.nodes.items():
        if node.id != nid:
            out.append(Violation("unique-id", (nid,), f"node registered under {nid!r} carries id {node.id!r}"))
        if node.kind not in KINDS:
            out.append(Violation("kind", (nid,), f"unknown kind {node.kind!r}"))
            continue
        arity = 2 if node.kind == "Add" else 1
        if len(node.inputs) != arity:
            out.append(Violation("arity", (nid,), f"{node.kind} needs {arity} input(s), has {len(node.inputs)}"))
        for src in node.inputs:
            if src != INPUT and src not in graph.nodes:
                out.append(Violation("dangling-edge", (nid,), f"producer {src!r} does not exist"))
        out.extend(_param_violations(node))
    if len(set(ids)) != len(ids):
        out.append(Violation("unique-id", tuple(ids), "duplicate ids"))

    try:
        graph.topo_order()
    except GraphError as exc:
        cyc = tuple(str(exc).split("[", 1)[-1].rstrip("]").replace("'", "").split(", "))
        out.append(Violation("acyclic", cyc, str(exc)))
        return out

    cmap = graph.consumer_map()
    sinks = [nid for nid in graph.nodes if not cmap[nid]]
    if len(sinks) != 1:
        out.append(Violation("single-sink", tuple(sinks), f"{len(sinks)} sinks"))
    if not cmap[INPUT]:
        out.append(Violation("single-source", (), "nothing consumes the graph input"))
    unreachable = set(graph.nodes) - graph.descendants([INPUT])
    if unreachable:
        out.append(Violation("single-source", tuple(sorted(unreachable)), "not reachable from the input"))

    problems = []
    if not any(v.rule == "dangling-edge" for v in out):
        infer_shapes(graph, problems)
    for nid, msg in problems:
        out.append(Violation("channel-compat", (nid,), msg))

    out.extend(_tag_violations(graph))
    if graph.mode not in ("train", "eval"):
        out.append(Violation("mode", (), f"mode must be train or eval, got {graph.mode!r}"))
    return out


def _param_violations(node):
    p, nid = node.params, node.id
    out = []
    if node.kind == "Conv":
        if not isinstance(p, ConvSpec):
            return [Violation("params", (nid,), "Conv without ConvSpec")]
        w = p.weight
        if w.ndim != 4 or min(w.shape) < 1:
            out.append(Violation("params", (nid,), f"bad conv weight shape {w.shape}"))
        if p.groups < 1 or w.shape[0] % p.groups:
            out.append(Violation("params", (nid,), "out channels not divisible by groups"))
        if min(p.stride) < 1 or min(p.padding) < 0:
            out.append(Violation("params", (nid,), "stride must be >= 1 and padding >= 0"))
        if p.bias is not None and p.bias.shape != (w.shape[0],):
            out.append(Violation("params", (nid,), "bias length differs from out channels"))
        if p.mask is not None and p.mask.shape != w.shape:
            out.append(Violation("params", (nid,), "mask shape differs from weight"))
    elif node.kind == "BN":
        if not isinstance(p, BNSpec):
            return [Violation("params", (nid,), "BN without BNSpec")]
        shapes = {p.gamma.shape, p.beta.shape, p.running_mean.shape, p.running_var.shape}
        if len(shapes) != 1:
            out.append(Violation("params", (nid,), "BN vectors differ in length"))
        if np.any(p.running_var < 0) or not p.eps > 0:
            out.append(Violation("params", (nid,), "BN variance negative or eps not positive"))
    elif node.kind == "FC":
        if not isinstance(p, FCSpec) or p.weight.ndim != 2:
            out.append(Violation("params", (nid,), "FC needs a 2-D weight"))
    return out


def _tag_violations(graph):
    out = []
    per_stage = {}
    for nid, tag in graph.block_tags.items():
        if nid not in graph.nodes:
            out.append(Violation("block-tag", (nid,), "tag refers to a missing node"))
            continue
        if tag.role not in ("first", "inner") or tag.stage < 1 or tag.block < 1:
            out.append(Violation("block-tag", (nid,), f"malformed tag {tag}"))
        per_stage.setdefault(tag.stage, set()).add(tag.block)
    for stage, blocks in per_stage.items():
        if sorted(blocks) != list(range(1, len(blocks) + 1)):
            out.append(Violation("block-tag", (), f"stage {stage} block indices {sorted(blocks)} not contiguous from 1"))
    return out


def count_cost(graph):
    """Parameters (Conv/BN/FC weights and biases) and multiply-accumulates.

    One multiply-accumulate counts as one MAC.  BN, activations, pooling,
    adds and channel padding contribute no MACs.  Running BN statistics are
    buffers, not parameters.
    """
    problems = validate_graph(graph)
    if problems:
        raise GraphError("invalid graph: " + "; ".join(map(str, problems)))
    shapes = infer_shapes(graph)
    params = macs = 0
    for nid, node in graph.nodes.items():
        p = node.params
        if node.kind == "Conv":
            params += p.weight.size + (p.bias.size if p.bias is not None else 0)
            o, h, w = shapes[nid]
            kh, kw = p.kernel
            macs += h * w * o * (p.in_channels // p.groups) * kh * kw
        elif node.kind == "BN":
            params += p.gamma.size + p.beta.size
        elif node.kind == "FC":
            params += p.weight.size + (p.bias.size if p.bias is not None else 0)
            macs += p.weight.shape[0] * p.weight.shape[1]
    return CostReport(int(params), int(macs))
