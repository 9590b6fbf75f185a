"""Forward evaluation and reverse-mode gradients over a :class:`ModelGraph`.

``run`` evaluates only the nodes needed for the requested outputs and can be
seeded with precomputed activations (``feed``) so a student graph can reuse a
teacher's prefix.  With ``record=True`` it keeps what :func:`backward` needs.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .ir import INPUT, GraphError

BN_MOMENTUM = 0.1


class Trace:
    def __init__(self, graph, order, values, caches, train_bn):
        self.graph = graph
        self.order = order  # evaluated node ids, topological
        self.values = values
        self.caches = caches
        self.train_bn = train_bn

    def __getitem__(self, node_id):
        return self.values[node_id]


def effective_weight(spec):
    """Conv weight as applied: ``(W * U) ⊙ M`` when a factor/mask is attached."""
    w = spec.weight
    if spec.factor is not None:
        w = np.einsum("ockl,cn->onkl", w, spec.factor)
    if spec.mask is not None:
        w = w * spec.mask
    return w


# --------------------------------------------------------------------------
# per-kind forward / backward
# --------------------------------------------------------------------------


def _conv_forward(x, spec, record):
    w = effective_weight(spec)
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    sh, sw = spec.stride
    ph, pw = spec.padding
    g = spec.groups
    cache = None
    if g == 1 and kh == kw == 1 and sh == sw == 1 and ph == pw == 0:
        out = np.matmul(w.reshape(o, c), x.reshape(n, c, h * wd)).reshape(n, o, h, wd)
        cache = ("1x1", x, w)
    elif g == 1:
        cols = kernels.im2col(x, kh, kw, sh, sw, ph, pw)
        ho, wo = kernels.out_size(h, kh, sh, ph), kernels.out_size(wd, kw, sw, pw)
        out = (w.reshape(o, -1) @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
        out = np.ascontiguousarray(out)
        cache = ("gemm", cols, w, x.shape)
    elif g == c == o and cg == 1:
        out = kernels.depthwise_forward(x, w, sh, sw, ph, pw)
        cache = ("dw", x, w)
    else:
        og = o // g
        ho, wo = kernels.out_size(h, kh, sh, ph), kernels.out_size(wd, kw, sw, pw)
        out = np.empty((n, o, ho, wo), dtype=x.dtype)
        cols_all = []
        for gi in range(g):
            cols = kernels.im2col(x[:, gi * cg : (gi + 1) * cg], kh, kw, sh, sw, ph, pw)
            res = w[gi * og : (gi + 1) * og].reshape(og, -1) @ cols
            out[:, gi * og : (gi + 1) * og] = res.reshape(og, n, ho, wo).transpose(1, 0, 2, 3)
            cols_all.append(cols)
        cache = ("grouped", cols_all, w, x.shape)
    if spec.bias is not None:
        out += spec.bias[None, :, None, None]
    return out, (cache if record else None)


def _conv_backward(dout, spec, cache, need_dx, wanted):
    kind = cache[0]
    grads = {}
    n, o, ho, wo = dout.shape
    dw = None
    dx = None
    need_dw = bool({"weight", "factor"} & wanted)
    if kind == "1x1":
        _, x, w = cache
        c = x.shape[1]
        d3 = dout.reshape(n, o, ho * wo)
        x3 = x.reshape(n, c, -1)
        if need_dw:
            dw = np.einsum("nop,ncp->oc", d3, x3, optimize=True).reshape(w.shape)
        if need_dx:
            dx = np.matmul(w.reshape(o, c).T, d3).reshape(x.shape)
    elif kind == "gemm":
        _, cols, w, x_shape = cache
        kh, kw = w.shape[2], w.shape[3]
        d2 = dout.transpose(1, 0, 2, 3).reshape(o, -1)
        if need_dw:
            dw = (d2 @ cols.T).reshape(w.shape)
        if need_dx:
            dcols = w.reshape(o, -1).T @ d2
            dx = kernels.col2im(dcols, x_shape, kh, kw, *spec.stride, *spec.padding)
    elif kind == "dw":
        _, x, w = cache
        dx, dw = kernels.depthwise_backward(x, w, dout, *spec.stride, *spec.padding)
    else:
        _, cols_all, w, x_shape = cache
        g = spec.groups
        og, cg = o // g, w.shape[1]
        kh, kw = w.shape[2], w.shape[3]
        dw = np.empty_like(w)
        dx = np.zeros(x_shape, dtype=dout.dtype)
        for gi in range(g):
            d2 = dout[:, gi * og : (gi + 1) * og].transpose(1, 0, 2, 3).reshape(og, -1)
            wg = w[gi * og : (gi + 1) * og].reshape(og, -1)
            dw[gi * og : (gi + 1) * og] = (d2 @ cols_all[gi].T).reshape(og, cg, kh, kw)
            sub_shape = (x_shape[0], cg) + tuple(x_shape[2:])
            dx[:, gi * cg : (gi + 1) * cg] = kernels.col2im(wg.T @ d2, sub_shape, kh, kw, *spec.stride, *spec.padding)
    if "bias" in wanted and spec.bias is not None:
        grads["bias"] = dout.sum(axis=(0, 2, 3))
    if dw is not None:
        if spec.mask is not None:
            dw = dw * spec.mask
        if spec.factor is not None:
            if "factor" in wanted:
                grads["factor"] = np.einsum("ockl,onkl->cn", spec.weight, dw, optimize=True)
            if "weight" in wanted:
                grads["weight"] = np.einsum("onkl,cn->ockl", dw, spec.factor, optimize=True)
        elif "weight" in wanted:
            grads["weight"] = dw
    return dx, grads


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bshape(v, x):
    return v.reshape((1, -1) + (1,) * (x.ndim - 2))


def _bn_forward(x, spec, train, update, record):
    axes = _bn_axes(x)
    if train:
        m = x.size // x.shape[1]
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var + spec.eps)
        xhat = (x - _bshape(mean, x)) * _bshape(inv, x)
        out = xhat * _bshape(spec.gamma, x) + _bshape(spec.beta, x)
        if update:
            unbiased = var * (m / max(m - 1, 1))
            spec.running_mean[...] = (1 - BN_MOMENTUM) * spec.running_mean + BN_MOMENTUM * mean
            spec.running_var[...] = (1 - BN_MOMENTUM) * spec.running_var + BN_MOMENTUM * unbiased
        return out.astype(x.dtype, copy=False), (("train", xhat, inv) if record else None)
    inv = 1.0 / np.sqrt(spec.running_var + spec.eps)
    scale = spec.gamma * inv
    shift = spec.beta - spec.running_mean * scale
    out = x * _bshape(scale.astype(x.dtype), x) + _bshape(shift.astype(x.dtype), x)
    return out, (("eval", x, inv) if record else None)


def _bn_backward(dout, spec, cache, need_dx, wanted):
    mode = cache[0]
    axes = _bn_axes(dout)
    grads = {}
    if mode == "train":
        _, xhat, inv = cache
        if "gamma" in wanted:
            grads["gamma"] = (dout * xhat).sum(axis=axes)
        if "beta" in wanted:
            grads["beta"] = dout.sum(axis=axes)
        dx = None
        if need_dx:
            m = dout.size // dout.shape[1]
            dxhat = dout * _bshape(spec.gamma, dout)
            s1 = dxhat.sum(axis=axes)
            s2 = (dxhat * xhat).sum(axis=axes)
            dx = _bshape(inv / m, dout) * (m * dxhat - _bshape(s1, dout) - xhat * _bshape(s2, dout))
        return dx, grads
    _, x, inv = cache
    if "gamma" in wanted:
        grads["gamma"] = (dout * (x - _bshape(spec.running_mean, x)) * _bshape(inv, x)).sum(axis=axes)
    if "beta" in wanted:
        grads["beta"] = dout.sum(axis=axes)
    dx = dout * _bshape(spec.gamma * inv, dout) if need_dx else None
    return dx, grads


# --------------------------------------------------------------------------
# graph evaluation
# --------------------------------------------------------------------------


def _needed(graph, outputs, feed):
    need = set()
    stack = list(outputs)
    while stack:
        nid = stack.pop()
        if nid in need or nid == INPUT:
            continue
        need.add(nid)
        if nid in feed:
            continue
        stack.extend(graph.nodes[nid].inputs)
    return need


def run(graph, x=None, outputs=None, train_bn=None, feed=None, record=False, update_stats=True, order=None):
    """Evaluate ``graph`` and return a :class:`Trace`.

    ``train_bn`` is the set of BN node ids that normalise with batch
    statistics; when omitted it is every BN for ``graph.mode == "train"`` and
    none otherwise.  Running statistics of those BNs are updated unless
    ``update_stats`` is false.
    """
    feed = dict(feed or {})
    if outputs is None:
        outputs = [graph.sink()]
    if train_bn is None:
        train_bn = {nid for nid, n in graph.nodes.items() if n.kind == "BN"} if graph.mode == "train" else set()
    order = order or graph.topo_order()
    need = _needed(graph, outputs, feed)
    plan = [nid for nid in order if nid in need and nid not in feed]

    values = {INPUT: x}
    values.update(feed)
    caches = {}
    remaining = {}
    if not record:
        keep = set(outputs)
        for nid in plan:
            for src in graph.nodes[nid].inputs:
                remaining[src] = remaining.get(src, 0) + 1
    for nid in plan:
        node = graph.nodes[nid]
        ins = [values[s] for s in node.inputs]
        if any(v is None for v in ins):
            raise GraphError(f"node {nid!r} reached without an input value")
        out, cache = _apply(node, ins, nid in train_bn, update_stats, record)
        values[nid] = out
        if record:
            caches[nid] = cache
        else:
            for src in node.inputs:
                remaining[src] -= 1
                if remaining[src] == 0 and src not in keep:
                    values.pop(src, None)
    return Trace(graph, plan, values, caches, set(train_bn))


def _apply(node, ins, bn_train, update_stats, record):
    kind, p = node.kind, node.params
    x = ins[0]
    if kind == "Conv":
        return _conv_forward(x, p, record)
    if kind == "BN":
        return _bn_forward(x, p, bn_train, update_stats, record)
    if kind == "ReLU":
        out = np.maximum(x, 0)
        return out, (out > 0 if record else None)
    if kind == "ReLU6":
        out = np.clip(x, 0, 6)
        return out, (((x > 0) & (x < 6)) if record else None)
    if kind == "Add":
        return ins[0] + ins[1], None
    if kind == "MaxPool":
        out, arg = kernels.maxpool_forward(x, p.kernel, p.stride, p.padding)
        return out, ((arg, x.shape) if record else None)
    if kind == "GlobalAvgPool":
        return x.mean(axis=(2, 3), keepdims=True), (x.shape if record else None)
    if kind == "Flatten":
        return x.reshape(x.shape[0], -1), (x.shape if record else None)
    if kind == "FC":
        out = x @ p.weight.T
        if p.bias is not None:
            out = out + p.bias
        return out, (x if record else None)
    if kind == "ChannelPad":
        n, c, h, w = x.shape
        s = p.stride
        sub = x[:, :, ::s, ::s]
        out = np.zeros((n, c + p.before + p.after) + sub.shape[2:], dtype=x.dtype)
        out[:, p.before : p.before + c] = sub
        return out, (x.shape if record else None)
    raise GraphError(f"cannot evaluate node kind {kind!r}")


def backward(trace, seeds, wrt):
    """Reverse-mode gradients of a scalar loss.

    ``seeds`` maps node ids to d(loss)/d(node output).  ``wrt`` is an
    iterable of ``(node_id, slot)`` pairs; only these parameter gradients are
    materialised, and activations upstream of every requested parameter are
    never differentiated.
    """
    graph = trace.graph
    wrt = set(wrt)
    owners = {nid for nid, _ in wrt}
    wanted_by_node = {}
    for nid, slot in wrt:
        wanted_by_node.setdefault(nid, set()).add(slot)
    evaluated = set(trace.order)
    # activations that depend on a requested parameter
    live = set()
    for nid in trace.order:
        if nid in owners or any(s in live for s in graph.nodes[nid].inputs):
            live.add(nid)

    grads_act = {}
    for nid, g in seeds.items():
        if nid in live:
            grads_act[nid] = grads_act.get(nid, 0) + g
    out = {}
    for nid in reversed(trace.order):
        if nid not in grads_act:
            continue
        dout = grads_act.pop(nid)
        node = graph.nodes[nid]
        need_inputs = [s for s in node.inputs if s in live and s in evaluated]
        wanted = wanted_by_node.get(nid, set())
        dxs, pgrads = _backward_node(node, dout, trace, bool(need_inputs), wanted)
        for slot, g in pgrads.items():
            out[(nid, slot)] = g
        for src, dx in zip(node.inputs, dxs):
            if dx is None or src not in need_inputs:
                continue
            if src in grads_act:
                grads_act[src] = grads_act[src] + dx
            else:
                grads_act[src] = dx
    for key in wrt:
        if key not in out:
            spec = graph.nodes[key[0]].params
            out[key] = np.zeros_like(getattr(spec, key[1]))
    return out


def _backward_node(node, dout, trace, need_dx, wanted):
    kind, p = node.kind, node.params
    cache = trace.caches.get(node.id)
    if kind == "Conv":
        dx, g = _conv_backward(dout, p, cache, need_dx, wanted)
        return [dx], g
    if kind == "BN":
        dx, g = _bn_backward(dout, p, cache, need_dx, wanted)
        return [dx], g
    if kind in ("ReLU", "ReLU6"):
        return [dout * cache], {}
    if kind == "Add":
        return [dout, dout], {}
    if kind == "MaxPool":
        arg, shape = cache
        return [kernels.maxpool_backward(dout, arg, shape)], {}
    if kind == "GlobalAvgPool":
        n, c, h, w = cache
        return [np.broadcast_to(dout / (h * w), cache).astype(dout.dtype)], {}
    if kind == "Flatten":
        return [dout.reshape(cache)], {}
    if kind == "FC":
        x = cache
        g = {}
        if "weight" in wanted:
            g["weight"] = dout.T @ x
        if "bias" in wanted and p.bias is not None:
            g["bias"] = dout.sum(axis=0)
        return [dout @ p.weight if need_dx else None], g
    if kind == "ChannelPad":
        n, c, h, w = cache
        dx = np.zeros(cache, dtype=dout.dtype)
        dx[:, :, :: p.stride, :: p.stride] = dout[:, p.before : p.before + c]
        return [dx], {}
    raise GraphError(f"no gradient rule for {kind!r}")


def forward(graph, batch, taps=None):
    """Logits plus a dict of tapped activations.

    Eval-mode graphs use running BN statistics and are pure functions of
    ``(graph, batch)``; train-mode graphs normalise with batch statistics and
    update running statistics with momentum 0.1.
    """
    batch = np.asarray(batch)
    expected = tuple(graph.input_spec)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
        raise ValueError(f"batch shape {batch.shape} does not match input spec [N, {expected}]")
    taps = list(taps or ())
    unknown = [t for t in taps if t not in graph.nodes]
    if unknown:
        raise KeyError(f"unknown tap id(s): {unknown}")
    dtype = _graph_dtype(graph)
    sink = graph.sink()
    trace = run(graph, batch.astype(dtype, copy=False), outputs=[sink] + taps)
    return trace[sink], {t: trace[t] for t in taps}


def _graph_dtype(graph):
    for node in graph.nodes.values():
        if node.kind in ("Conv", "FC"):
            return node.params.weight.dtype
    return np.float32


def param_keys(graph, kinds=("Conv", "BN", "FC")):
    """All trainable ``(node_id, slot)`` pairs for the given node kinds."""
    keys = []
    for nid, node in graph.nodes.items():
        if node.kind not in kinds:
            continue
        p = node.params
        if node.kind == "BN":
            keys += [(nid, "gamma"), (nid, "beta")]
            continue
        if node.kind == "Conv" and p.factor is not None:
            keys.append((nid, "factor"))
            continue
        keys.append((nid, "weight"))
        if p.bias is not None:
            keys.append((nid, "bias"))
    return keys


def get_param(graph, key):
    return getattr(graph.nodes[key[0]].params, key[1])
