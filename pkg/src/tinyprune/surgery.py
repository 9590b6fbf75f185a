"""Structure-changing rewrites.

Every insert operation returns a *new* graph (the input is never touched)
plus the :class:`Adaptor` records it created.  Adaptors are ordinary bias-free
1x1 ``Conv`` nodes registered in ``graph.adaptors``; :func:`merge_adaptors`
folds them into their neighbouring convolutions and removes them again.

Merge sides, with convolution weights laid out ``[out, in, kh, kw]``:

* ``post``: the adaptor ``U`` (N x C) follows conv ``W`` (C x I):
  ``W'[n] = sum_c U[n, c] W[c]`` and ``b' = U b``.
* ``pre``: the adaptor ``V`` (C x N) precedes conv ``W`` (O x C):
  ``W'[:, n] = sum_c W[:, c] V[c, n]``; bias unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .ir import INPUT, BlockTag, BNSpec, ConvSpec, GraphError, infer_shapes, validate_graph


class SurgeryError(ValueError):
    pass


class SiteNotPrunable(SurgeryError):
    pass


class PlanError(SurgeryError):
    pass


@dataclass
class Adaptor:
    id: str
    weight: np.ndarray  # [out, in, 1, 1]; the live array inside the graph
    site: tuple  # (predecessor id, successor id) it was spliced between
    merge_targets: tuple  # conv ids it merges into
    merge_side: str  # "pre" | "post"
    init_policy: str  # identity | channel-select | custom
    trainable: bool = True
    param: tuple = None  # (node id, slot) of the trainable tensor
    taps: tuple = ()  # (teacher id, student id) pairs this adaptor is trained through
    bn: Optional[str] = None  # BN re-dimensioned alongside this adaptor


def collect_taps(adaptors):
    seen = []
    for ad in adaptors:
        for t in ad.taps:
            if t not in seen:
                seen.append(t)
    return seen


def site_bns(adaptors):
    return sorted({ad.bn for ad in adaptors if ad.bn})


# --------------------------------------------------------------------------
# pure tensor algebra
# --------------------------------------------------------------------------


def _as_matrix(u):
    u = np.asarray(u)
    if u.ndim == 4:
        if u.shape[2:] != (1, 1):
            raise SurgeryError(f"adaptor kernel must be 1x1, got {u.shape[2:]}")
        return u[:, :, 0, 0]
    if u.ndim != 2:
        raise SurgeryError(f"adaptor weight must be 2-D or [out,in,1,1], got shape {u.shape}")
    return u


def merge_adjacent_linear(adaptor, target, side):
    """Compose an adaptor weight with an adjacent conv; returns a new ConvSpec."""
    u = _as_matrix(adaptor.weight if isinstance(adaptor, Adaptor) else adaptor)
    if target.groups != 1:
        raise SurgeryError("cannot merge an adaptor through a grouped convolution")
    if target.factor is not None:
        raise SurgeryError("target carries an unmerged factor")
    w = target.weight
    if side == "post":
        if u.shape[1] != w.shape[0]:
            raise SurgeryError(f"adaptor {u.shape} does not compose after conv with {w.shape[0]} outputs")
        w2 = np.einsum("nc,cikl->nikl", u, w).astype(w.dtype)
        b2 = None if target.bias is None else (u @ target.bias).astype(w.dtype)
        mask = None
    elif side == "pre":
        if u.shape[0] != w.shape[1]:
            raise SurgeryError(f"adaptor {u.shape} does not compose before conv with {w.shape[1]} inputs")
        w2 = np.einsum("ockl,cn->onkl", w, u).astype(w.dtype)
        b2 = None if target.bias is None else target.bias.copy()
        mask = None
    else:
        raise SurgeryError(f"merge side must be 'pre' or 'post', got {side!r}")
    return ConvSpec(w2, b2, tuple(target.stride), tuple(target.padding), 1, None, mask)


def fold_bn(conv, bn):
    """Absorb an eval-mode BN into the preceding conv."""
    if bn.channels != conv.out_channels:
        raise SurgeryError(f"BN has {bn.channels} channels, conv has {conv.out_channels} outputs")
    dt = conv.weight.dtype
    scale = bn.gamma.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    w = conv.weight * scale[:, None, None, None]
    bias = np.zeros(conv.out_channels) if conv.bias is None else conv.bias.astype(np.float64)
    b = bn.beta + scale * (bias - bn.running_mean)
    return ConvSpec(w.astype(dt), b.astype(dt), tuple(conv.stride), tuple(conv.padding), conv.groups)


def compose_and_mask(W, U, M):
    """``(W * U) ⊙ M`` with ``U`` acting on the input side of ``W``."""
    u = _as_matrix(U)
    W = np.asarray(W)
    if W.ndim != 4 or u.shape[0] != W.shape[1]:
        raise SurgeryError(f"U {u.shape} does not compose with W {W.shape}")
    comp = np.einsum("ockl,cn->onkl", W, u)
    M = np.asarray(M)
    if M.shape != comp.shape:
        raise SurgeryError(f"mask shape {M.shape} differs from composed weight {comp.shape}")
    return (comp * M).astype(W.dtype)


def magnitude_mask(weight, sparsity):
    """Binary mask zeroing the ``sparsity`` fraction of smallest-|w| entries."""
    if not 0 <= sparsity < 1:
        raise SurgeryError("sparsity must lie in [0, 1)")
    flat = np.abs(weight).ravel()
    n_zero = int(round(sparsity * flat.size))
    mask = np.ones(flat.size, dtype=weight.dtype)
    if n_zero:
        order = np.argsort(flat, kind="stable")
        mask[order[:n_zero]] = 0
    return mask.reshape(weight.shape)


def select_keep_channels(conv, N):
    """Indices of the N filters with largest l1 norm (ties to lower index), ascending."""
    w = conv.weight if isinstance(conv, ConvSpec) else np.asarray(conv)
    out = w.shape[0]
    if not 1 <= N < out:
        raise SurgeryError(f"N must satisfy 1 <= N < {out}, got {N}")
    norms = np.abs(w.astype(np.float64)).reshape(out, -1).sum(axis=1)
    order = np.lexsort((np.arange(out), -norms))
    return sorted(int(i) for i in order[:N])


def rank_for_energy(s, tau, mode="cumulative"):
    if not 0 < tau <= 1:
        raise SurgeryError(f"energy threshold must be in (0, 1], got {tau}")
    e = s.astype(np.float64) ** 2
    total = e.sum()
    if total == 0:
        return 1
    if mode == "cumulative":
        cum = np.cumsum(e) / total
        return int(min(np.searchsorted(cum, tau - 1e-12) + 1, len(s)))
    if mode == "component":
        return max(1, int(np.sum(e / total >= tau)))
    raise SurgeryError(f"unknown energy mode {mode!r}")


def low_rank_decompose(conv, tau, mode="cumulative"):
    """Split a conv into a k x k conv with r filters and a 1x1 conv.

    ``r`` is the smallest rank reaching cumulative squared singular-value
    energy ``tau`` (or, with ``mode="component"``, the number of singular
    directions whose individual energy share is at least ``tau``).
    """
    if not 0 < tau <= 1:
        raise SurgeryError(f"energy threshold must be in (0, 1], got {tau}")
    if conv.groups != 1:
        raise SurgeryError("low-rank decomposition needs groups=1")
    w = conv.weight
    o = w.shape[0]
    u, s, vt = np.linalg.svd(w.reshape(o, -1).astype(np.float64), full_matrices=False)
    r = rank_for_energy(s, tau, mode)
    first = (s[:r, None] * vt[:r]).reshape((r,) + w.shape[1:]).astype(w.dtype)
    second = u[:, :r].reshape(o, r, 1, 1).astype(w.dtype)
    a = ConvSpec(first, None, tuple(conv.stride), tuple(conv.padding), 1)
    b = ConvSpec(second, None if conv.bias is None else conv.bias.copy(), (1, 1), (0, 0), 1)
    return a, b


# --------------------------------------------------------------------------
# graph helpers
# --------------------------------------------------------------------------


def _adaptor_spec(mat, dtype):
    return ConvSpec(np.ascontiguousarray(mat, dtype=dtype)[:, :, None, None], None, (1, 1), (0, 0), 1)


def _splice(g, producer, node_id, mat, consumers, tag=None):
    """Insert a 1x1 conv after ``producer`` feeding ``consumers``."""
    dtype = _dtype(g)
    g.add(node_id, "Conv", (producer,), _adaptor_spec(mat, dtype), tag=tag)
    for c in consumers:
        g.replace_input(c, producer, node_id)
    return g.nodes[node_id].params


def _dtype(g):
    for n in g.nodes.values():
        if n.kind == "Conv":
            return n.params.weight.dtype
    return np.float32


def _unique_id(g, base):
    nid, i = base, 1
    while nid in g.nodes:
        i += 1
        nid = f"{base}{i}"
    return nid


def _register(g, node_id, site, targets, side, policy, taps=(), bn=None, trainable=True):
    ad = Adaptor(
        node_id,
        g.nodes[node_id].params.weight,
        site,
        tuple(targets),
        side,
        policy,
        trainable,
        (node_id, "weight"),
        tuple(taps),
        bn,
    )
    g.adaptors[node_id] = ad
    return ad


def _is_plain_conv(g, nid):
    n = g.nodes.get(nid)
    return n is not None and n.kind == "Conv" and n.params.groups == 1 and n.params.factor is None


def _single_consumer(g, cmap, nid, kind=None):
    cons = cmap.get(nid, [])
    if len(cons) != 1:
        return None
    if kind and g.nodes[cons[0]].kind not in (kind if isinstance(kind, tuple) else (kind,)):
        return None
    return cons[0]


def _selection(C, N, keep, policy, weights):
    """Return (pre N x C, post C x N) adaptor matrices and keep indices."""
    if policy == "custom":
        if weights is None or "pre" not in weights or "post" not in weights:
            raise SurgeryError("custom init needs weights={'pre': NxC, 'post': CxN}")
        pre, post = _as_matrix(weights["pre"]), _as_matrix(weights["post"])
        if pre.shape != (N, C) or post.shape != (C, N):
            raise SurgeryError(f"custom adaptor shapes {pre.shape}/{post.shape} != ({N},{C})/({C},{N})")
        return pre, post, list(range(N)) if keep is None else list(keep)
    if policy == "identity":
        if N != C:
            raise SurgeryError("identity init needs N == C")
        eye = np.eye(C)
        return eye, eye, list(range(C))
    if policy != "channel-select":
        raise SurgeryError(f"unknown init policy {policy!r}")
    if len(keep) != N or list(keep) != sorted(set(keep)) or keep[0] < 0 or keep[-1] >= C:
        raise SurgeryError(f"keep must be {N} strictly increasing indices in [0, {C})")
    sel = np.zeros((N, C))
    sel[np.arange(N), keep] = 1.0
    return sel, sel.T.copy(), list(keep)


def _redim_bn(bn, keep):
    idx = np.asarray(keep)
    return BNSpec(
        bn.gamma[idx].copy(), bn.beta[idx].copy(), bn.running_mean[idx].copy(), bn.running_var[idx].copy(), bn.eps
    )


def resolve_site(graph, site):
    """Map a site name to ``(kind, info)`` for filter-level surgery.

    ``site`` may be the BN of a conv→BN→ReLU chain (inside a block), that
    chain's conv or activation, or the output activation of a residual block
    (between blocks).
    """
    g = graph
    if site not in g.nodes:
        raise SiteNotPrunable(f"unknown site {site!r}")
    cmap = g.consumer_map()
    node = g.nodes[site]
    if node.kind == "Conv":
        nxt = _single_consumer(g, cmap, site, "BN")
        if nxt is None:
            raise SiteNotPrunable(f"conv {site!r} is not followed by a single BN")
        site, node = nxt, g.nodes[nxt]
    if node.kind in ("ReLU", "ReLU6"):
        src = g.nodes[node.inputs[0]]
        if src.kind == "BN":
            site, node = src.id, src
        elif src.kind == "Add":
            return _inter_block_site(g, cmap, src, node)
        else:
            raise SiteNotPrunable(f"activation {site!r} does not follow a BN or Add")
    if node.kind != "BN":
        raise SiteNotPrunable(f"{site!r} ({node.kind}) is not a prunable feature map")
    prod = node.inputs[0]
    if not _is_plain_conv(g, prod) or cmap[prod] != [site]:
        raise SiteNotPrunable(f"BN {site!r} must directly follow a plain conv with no other consumer")
    nxt = _single_consumer(g, cmap, site)
    if nxt is None:
        raise SiteNotPrunable(f"BN {site!r} must feed exactly one node")
    kind = g.nodes[nxt].kind
    if kind == "Add":
        relu = _single_consumer(g, cmap, nxt, ("ReLU", "ReLU6"))
        if relu is None:
            raise SiteNotPrunable(f"Add {nxt!r} is not followed by an activation")
        return _inter_block_site(g, cmap, g.nodes[nxt], g.nodes[relu])
    if kind not in ("ReLU", "ReLU6"):
        raise SiteNotPrunable(f"BN {site!r} is not followed by an activation")
    consumers = cmap[nxt]
    bad = [c for c in consumers if not _is_plain_conv(g, c)]
    if not consumers or bad:
        raise SiteNotPrunable(f"feature map {nxt!r} feeds non-conv or grouped consumers {bad or consumers}")
    return "inside", {"conv": prod, "bn": site, "act": nxt, "consumers": consumers}


def _inter_block_site(g, cmap, add, act):
    branches = []
    for src in add.inputs:
        n = g.nodes.get(src)
        if n is None or n.kind != "BN" or not _is_plain_conv(g, n.inputs[0]):
            raise SiteNotPrunable(
                f"residual stream at {act.id!r} has an identity shortcut; pruning it needs every block of the stage"
            )
        if cmap[n.inputs[0]] != [src] or cmap[src] != [add.id]:
            raise SiteNotPrunable(f"branch through {src!r} is shared")
        branches.append((n.inputs[0], src))
    consumers = cmap[act.id]
    bad = [c for c in consumers if not _is_plain_conv(g, c)]
    if not consumers or bad:
        raise SiteNotPrunable(f"block output {act.id!r} feeds non-conv consumers {bad or consumers}")
    return "inter", {"branches": branches, "add": add.id, "act": act.id, "consumers": consumers}


# --------------------------------------------------------------------------
# filter-level insertion / pruning
# --------------------------------------------------------------------------


def insert_channel_adaptors(graph, site, N, init="channel-select", keep=None, weights=None):
    """Splice pre/post 1x1 adaptors around a feature map and shrink it to N channels.

    Inside a block (conv→BN→act→convs) this adds ``pre`` (N x C) between the
    conv and BN and ``post`` (C x N) after the activation.  At a block output
    whose shortcut is a downsample conv, a third adaptor follows the
    downsample conv.  Returns ``(graph', adaptors)``.
    """
    kind, info = resolve_site(graph, site)
    g = graph.copy()
    if kind == "inside":
        convs, bns = [info["conv"]], [info["bn"]]
    else:
        convs = [c for c, _ in info["branches"]]
        bns = [b for _, b in info["branches"]]
    C = g.nodes[bns[0]].params.channels
    if N > C or N < 1 or (N == C and init != "identity"):
        raise SurgeryError(f"N must satisfy 1 <= N < C={C} (N == C only with identity init), got {N}")
    if init == "channel-select" and keep is None:
        keep = select_keep_channels(g.nodes[convs[0]].params, N)
    pre, post, keep = _selection(C, N, keep, init, weights)

    act, consumers = info["act"], info["consumers"]
    taps = tuple((c, c) for c in consumers)
    made = []
    for conv_id, bn_id in zip(convs, bns):
        name = _unique_id(g, f"{bn_id}.pre")
        _splice(g, conv_id, name, pre, [bn_id], tag=g.block_tags.get(bn_id))
        if init != "identity":
            g.nodes[bn_id].params = _redim_bn(g.nodes[bn_id].params, keep)
        made.append(_register(g, name, (conv_id, bn_id), (conv_id,), "post", init, taps, bn_id))
    name = _unique_id(g, f"{act}.post")
    _splice(g, act, name, post, consumers, tag=g.block_tags.get(act))
    made.append(_register(g, name, (act, consumers[0]), consumers, "pre", init, taps, None))
    _check(g)
    return g, made


def prune_channels(graph, site, keep):
    """Hard-prune a conv→BN→act feature map to the channels in ``keep``."""
    try:
        kind, info = resolve_site(graph, site)
    except SiteNotPrunable as exc:
        raise SurgeryError(f"cannot prune {site!r}: {exc}") from exc
    if kind != "inside":
        raise SurgeryError(f"site {site!r} feeds an Add whose other branch is not pruned identically")
    g = graph.copy()
    conv = g.nodes[info["conv"]].params
    C = conv.out_channels
    keep = list(keep)
    if not keep or keep != sorted(set(keep)) or keep[0] < 0 or keep[-1] >= C:
        raise SurgeryError(f"keep must be strictly increasing indices within [0, {C})")
    idx = np.asarray(keep)
    conv.weight = conv.weight[idx].copy()
    if conv.bias is not None:
        conv.bias = conv.bias[idx].copy()
    g.nodes[info["bn"]].params = _redim_bn(g.nodes[info["bn"]].params, keep)
    for c in info["consumers"]:
        spec = g.nodes[c].params
        spec.weight = spec.weight[:, idx].copy()
    _check(g)
    return g


# --------------------------------------------------------------------------
# block dropping
# --------------------------------------------------------------------------


def _as_tag(graph, tag):
    if isinstance(tag, BlockTag):
        stage, block = tag.stage, tag.block
    else:
        t = BlockTag.parse(tag)
        stage, block = t.stage, t.block
    for t in graph.blocks():
        if (t.stage, t.block) == (stage, block):
            return t
    raise SurgeryError(f"block {stage}.{block} not found in graph")


def block_io(graph, tag):
    """External input tensor and output node of a block."""
    nodes = set(graph.block_nodes(tag.stage, tag.block))
    entries = {s for n in nodes for s in graph.nodes[n].inputs if s not in nodes}
    cmap = graph.consumer_map()
    exits = [n for n in nodes if any(c not in nodes for c in cmap[n]) or not cmap[n]]
    if len(entries) != 1 or len(exits) != 1:
        raise SurgeryError(f"block {tag.label} must have one entry and one exit (got {sorted(entries)}, {exits})")
    return entries.pop(), exits[0]


def check_droppable(graph, tag):
    tag = _as_tag(graph, tag)
    if tag.role != "inner":
        raise PlanError(f"block {tag.label} has role={tag.role}; only inner blocks can be dropped")
    entry, exit_ = block_io(graph, tag)
    shapes = infer_shapes(graph)
    if shapes[entry] != shapes[exit_]:
        raise PlanError(f"block {tag.label} changes shape {shapes[entry]} -> {shapes[exit_]}")
    for nid in graph.block_nodes(tag.stage, tag.block):
        p = graph.nodes[nid].params
        if isinstance(p, ConvSpec) and tuple(p.stride) != (1, 1):
            raise PlanError(f"block {tag.label} contains strided conv {nid!r}")
    return tag, entry, exit_


def drop_block(graph, tag):
    """Remove a block and feed its input tensor to its former consumers.

    Later blocks of the same stage are renumbered so block indices stay
    contiguous.
    """
    tag, entry, exit_ = check_droppable(graph, tag)
    g = graph.copy()
    cmap = g.consumer_map()
    for c in cmap[exit_]:
        g.replace_input(c, exit_, entry)
    for nid in g.block_nodes(tag.stage, tag.block):
        g.remove(nid)
        g.adaptors.pop(nid, None)
    for nid, t in list(g.block_tags.items()):
        if t.stage == tag.stage and t.block > tag.block:
            g.block_tags[nid] = BlockTag(t.stage, t.block - 1, t.role)
    _check(g)
    return g


def _entry_convs(g, stage, block):
    """Convs of a block that read tensors from outside it (possibly through a pool)."""
    nodes = set(g.block_nodes(stage, block))
    out = []
    for nid in g.topo_order():
        n = g.nodes[nid]
        if nid not in nodes or n.kind != "Conv":
            continue
        src = n.inputs[0]
        if src not in nodes or (g.nodes[src].kind == "MaxPool" and g.nodes[src].inputs[0] not in nodes):
            out.append(nid)
    return out


def _stage_is_residual(g, stage):
    return any(g.nodes[n].kind == "Add" for n, t in g.block_tags.items() if t.stage == stage)


def insert_block_adaptors(graph, dropped, already_dropped=False):
    """Drop ``dropped`` (unless ``already_dropped``) and add identity adaptors.

    Residual nets get one adaptor before each entry conv (first conv and
    downsample conv) of every later block in the stage and of the next
    stage's first block, with taps at those convs' outputs.  Sequential nets
    get a single adaptor before the next conv.
    """
    if already_dropped:
        tag = dropped if isinstance(dropped, BlockTag) else BlockTag.parse(dropped)
        stage, block = tag.stage, tag.block
        residual = _stage_is_residual(graph, stage)
        g = graph.copy()
    else:
        tag = _as_tag(graph, dropped)
        stage, block = tag.stage, tag.block
        residual = _stage_is_residual(graph, stage)
        g = drop_block(graph, tag)

    targets = []
    later = sorted({t.block for t in g.blocks() if t.stage == stage and t.block >= block})
    candidates = [(stage, b) for b in later] + [(stage + 1, 1)]
    for s, b in candidates:
        if not g.block_nodes(s, b):
            continue
        convs = _entry_convs(g, s, b)
        if convs:
            targets.extend(convs)
            if not residual:
                break
    if not residual:
        targets = targets[:1]
    if not targets:
        raise SiteNotPrunable(f"no convolution consumes the tensor of dropped block {stage}.{block}")

    made = []
    for conv_id in targets:
        if not _is_plain_conv(g, conv_id):
            raise SiteNotPrunable(f"entry conv {conv_id!r} is grouped; adaptor cannot merge into it")
        src = g.nodes[conv_id].inputs[0]
        C = g.nodes[conv_id].params.in_channels
        name = _unique_id(g, f"{conv_id}.adapt")
        _splice(g, src, name, np.eye(C), [conv_id], tag=g.block_tags.get(conv_id))
        made.append(_register(g, name, (src, conv_id), (conv_id,), "pre", "identity", ((conv_id, conv_id),)))
    _check(g)
    return g, made


# --------------------------------------------------------------------------
# unstructured and low-rank sites
# --------------------------------------------------------------------------


def insert_unstructured_adaptor(graph, conv_id, mask):
    """Attach an identity input-side factor ``U`` and mask ``M`` to a conv.

    The conv then applies ``(W * U) ⊙ M``; only ``U`` is trained.
    """
    g = graph.copy()
    node = g.nodes.get(conv_id)
    if node is None or node.kind != "Conv" or node.params.groups != 1:
        raise SiteNotPrunable(f"{conv_id!r} is not a plain conv")
    spec = node.params
    mask = np.asarray(mask)
    if mask.shape != spec.weight.shape:
        raise SurgeryError(f"mask shape {mask.shape} differs from weight {spec.weight.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise SurgeryError("mask entries must be 0 or 1")
    C = spec.weight.shape[1]
    spec.factor = np.eye(C, dtype=spec.weight.dtype)
    spec.mask = mask.astype(spec.weight.dtype)
    ad = Adaptor(conv_id, spec.factor, (conv_id, conv_id), (conv_id,), "pre", "identity", True,
                 (conv_id, "factor"), ((conv_id, conv_id),))
    g.adaptors[conv_id] = ad
    return g, [ad]


def insert_low_rank(graph, conv_id, tau, mode="cumulative"):
    """Replace a conv by its low-rank pair and add an identity adaptor after it.

    The k x k factor becomes ``<id>.lr``; the 1x1 factor keeps ``<id>`` so
    downstream wiring is unchanged.  The tap compares the teacher conv output
    with the adaptor output.
    """
    g = graph.copy()
    node = g.nodes.get(conv_id)
    if node is None or node.kind != "Conv":
        raise SiteNotPrunable(f"{conv_id!r} is not a conv")
    a, b = low_rank_decompose(node.params, tau, mode)
    tag = g.block_tags.get(conv_id)
    lr_id = _unique_id(g, f"{conv_id}.lr")
    g.add(lr_id, "Conv", node.inputs, a, tag=tag)
    node.inputs = (lr_id,)
    node.params = b
    consumers = g.consumers(conv_id)
    name = _unique_id(g, f"{conv_id}.adapt")
    _splice(g, conv_id, name, np.eye(b.out_channels), consumers, tag=tag)
    ad = _register(g, name, (conv_id, consumers[0] if consumers else name), (conv_id,), "post", "identity",
                   ((conv_id, name),))
    _check(g)
    return g, [ad]


# --------------------------------------------------------------------------
# merging
# --------------------------------------------------------------------------


def merge_adaptor(graph, adaptor_id):
    """Merge one registered adaptor in place (graph is mutated)."""
    g = graph
    ad = g.adaptors.get(adaptor_id)
    if ad is None:
        raise SurgeryError(f"no adaptor {adaptor_id!r}")
    if ad.param[1] == "factor":
        spec = g.nodes[ad.id].params
        w = compose_and_mask(spec.weight, spec.factor, spec.mask)
        spec.weight, spec.factor = w, None
        del g.adaptors[adaptor_id]
        return g
    node = g.nodes[ad.id]
    u = node.params.weight
    cmap = g.consumer_map()
    if ad.merge_side == "post":
        (target,) = ad.merge_targets
        if node.inputs != (target,) or cmap[target] != [ad.id]:
            raise SurgeryError(f"adaptor {ad.id!r} is not directly after its sole-consumer conv {target!r}")
        g.nodes[target].params = merge_adjacent_linear(u, g.nodes[target].params, "post")
        for c in cmap[ad.id]:
            g.replace_input(c, ad.id, target)
    else:
        if sorted(cmap[ad.id]) != sorted(ad.merge_targets):
            raise SurgeryError(f"adaptor {ad.id!r} feeds {cmap[ad.id]}, not exactly its merge targets")
        src = node.inputs[0]
        for t in ad.merge_targets:
            g.nodes[t].params = merge_adjacent_linear(u, g.nodes[t].params, "pre")
            g.replace_input(t, ad.id, src)
    g.remove(ad.id)
    del g.adaptors[adaptor_id]
    return g


def merge_adaptors(graph, ids=None):
    """Return a copy with the given (default: all) adaptors merged."""
    g = graph.copy()
    for aid in list(ids if ids is not None else g.adaptors):
        merge_adaptor(g, aid)
    _check(g)
    return g


def fold_all_bn(graph):
    """Fold every BN that directly follows a conv (with no other consumer)."""
    g = graph.copy()
    for nid in list(g.nodes):
        node = g.nodes[nid]
        if node.kind != "BN":
            continue
        prod = node.inputs[0]
        if prod == INPUT or g.nodes[prod].kind != "Conv" or g.nodes[prod].params.factor is not None:
            continue
        if g.consumers(prod) != [nid]:
            continue
        g.nodes[prod].params = fold_bn(g.nodes[prod].params, node.params)
        for c in g.consumers(nid):
            g.replace_input(c, nid, prod)
        g.remove(nid)
    _check(g)
    return g


def _check(g):
    problems = validate_graph(g)
    if problems:
        raise GraphError("surgery produced an invalid graph: " + "; ".join(map(str, problems)))


# --------------------------------------------------------------------------
# compression plans
# --------------------------------------------------------------------------

SCHEMES = ("block_drop", "filter_level", "unstructured", "low_rank")


@dataclass
class CompressionPlan:
    scheme: str
    blocks: list = field(default_factory=list)  # "stage.block" labels
    keep_counts: dict = field(default_factory=dict)  # site id -> N
    masks: dict = field(default_factory=dict)  # conv id -> mask array or path to .npy
    sparsity: Optional[float] = None  # magnitude masks for listed/all convs when masks are absent
    energy_threshold: float = 0.4
    energy_mode: str = "cumulative"
    convs: list = field(default_factory=list)  # low_rank / unstructured targets (empty = all eligible)

    def __post_init__(self):
        if self.scheme not in SCHEMES and self.scheme != "none":
            raise PlanError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        self.blocks = [b.label if isinstance(b, BlockTag) else str(b) for b in self.blocks]

    @property
    def empty(self):
        if self.scheme == "block_drop":
            return not self.blocks
        if self.scheme == "filter_level":
            return not self.keep_counts
        return self.scheme == "none"

    def validate(self, graph):
        if self.scheme == "block_drop":
            stages = [BlockTag.parse(b).stage for b in self.blocks]
            if len(stages) != len(set(stages)):
                raise PlanError(f"at most one block per stage may be dropped, got {self.blocks}")
            for b in self.blocks:
                check_droppable(graph, b)
        elif self.scheme == "filter_level":
            for site, n in self.keep_counts.items():
                kind, info = resolve_site(graph, site)
                bn = info["bn"] if kind == "inside" else info["branches"][0][1]
                c = graph.nodes[bn].params.channels
                if not 1 <= int(n) < c:
                    raise PlanError(f"keep count for {site!r} must satisfy 1 <= N < {c}, got {n}")
        elif self.scheme == "low_rank":
            if not 0 < self.energy_threshold <= 1:
                raise PlanError("energy_threshold must lie in (0, 1]")
            for c in self.convs:
                if not _is_plain_conv(graph, c):
                    raise PlanError(f"{c!r} is not a plain conv")
        elif self.scheme == "unstructured":
            if not self.masks and self.sparsity is None:
                raise PlanError("unstructured plan needs masks or a sparsity level")
            for c in list(self.masks) + list(self.convs):
                if not _is_plain_conv(graph, c):
                    raise PlanError(f"{c!r} is not a plain conv")
        return self

    def mask_for(self, graph, conv_id):
        m = self.masks.get(conv_id)
        if m is None:
            return magnitude_mask(graph.nodes[conv_id].params.weight, self.sparsity)
        if isinstance(m, (str, Path)):
            m = np.load(m)
        return np.asarray(m)

    def to_dict(self):
        d = {"scheme": self.scheme}
        if self.blocks:
            d["blocks"] = list(self.blocks)
        if self.keep_counts:
            d["keep_counts"] = {k: int(v) for k, v in self.keep_counts.items()}
        if self.masks:
            d["masks"] = {k: str(v) for k, v in self.masks.items() if isinstance(v, (str, Path))}
        if self.sparsity is not None:
            d["sparsity"] = float(self.sparsity)
        if self.scheme == "low_rank":
            d["energy_threshold"] = float(self.energy_threshold)
            d["energy_mode"] = self.energy_mode
        if self.convs:
            d["convs"] = list(self.convs)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - {"scheme", "blocks", "keep_counts", "masks", "sparsity", "energy_threshold",
                            "energy_mode", "convs"}
        if unknown:
            raise PlanError(f"unknown plan keys {sorted(unknown)}")
        if "scheme" not in d:
            raise PlanError("plan needs a scheme")
        d["blocks"] = [str(b) for b in d.get("blocks") or []]
        d["keep_counts"] = dict(d.get("keep_counts") or {})
        d["masks"] = dict(d.get("masks") or {})
        d["convs"] = list(d.get("convs") or [])
        if d.get("energy_threshold") is None:
            d.pop("energy_threshold", None)
        return cls(**d)

    def to_yaml(self, path=None):
        text = yaml.safe_dump(self.to_dict(), sort_keys=False)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_yaml(cls, text_or_path):
        p = Path(str(text_or_path))
        text = p.read_text() if "\n" not in str(text_or_path) and p.exists() else str(text_or_path)
        return cls.from_dict(yaml.safe_load(text))


def default_low_rank_convs(graph):
    return [nid for nid, n in graph.nodes.items()
            if n.kind == "Conv" and n.params.groups == 1 and n.params.kernel != (1, 1) and nid in graph.block_tags]


def default_unstructured_convs(graph):
    return [nid for nid, n in graph.nodes.items() if n.kind == "Conv" and n.params.groups == 1]


def apply_vanilla(graph, plan):
    """The vanilla pruned model: the plan applied with init-only adaptors, merged."""
    from .recovery import run_practise, MimicConfig

    out, _ = run_practise(graph, plan, None, MimicConfig(), freeze_front_k=10**9)
    return out
