"""Feature-mimicking recovery, KD finetuning and evaluation.

A mimic job trains only adaptor tensors (plus, by default, the affine
parameters of the BN re-dimensioned at the site) so the student's tapped
activations match the frozen teacher's.  Student nodes whose parameters and
inputs are identical to the teacher's are not re-evaluated: their teacher
activations are fed straight into the student forward.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import engine, surgery
from .ir import INPUT, infer_shapes, tensor_slots
from .tinyset import as_arrays, augment_batch, policy_for

log = logging.getLogger(__name__)


class RecoveryError(RuntimeError):
    pass


@dataclass
class MimicConfig:
    lr: float = 1e-4
    batch_size: int = 64  # clamped to the tiny-set size
    max_epochs: int = 1000
    patience: int = 10
    seed: int = 0
    augment: Optional[str] = "auto"  # auto | cifar | imagenet | none
    bn_update: str = "site"  # site | all | none: which student BNs use batch statistics
    train_bn_affine: bool = True  # also fit gamma/beta of the re-dimensioned site BN
    eval_batch: int = 256
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class FinetuneConfig:
    lr: float = 1e-4
    batch_size: int = 256  # clamped to the tiny-set size
    epochs: int = 100
    beta: float = 100.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    augment: Optional[str] = "auto"

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


@dataclass
class MimicJob:
    teacher: object
    student: object
    trainable: list  # adaptor ids
    taps: list  # (teacher id, student id)
    bn_nodes: list = field(default_factory=list)  # site BNs
    loss_trace: list = field(default_factory=list)

    @classmethod
    def from_adaptors(cls, teacher, student, adaptors):
        return cls(teacher, student, [a.id for a in adaptors if a.trainable], surgery.collect_taps(adaptors),
                   surgery.site_bns(adaptors))

    def validate(self):
        missing = [a for a in self.trainable if a not in self.student.adaptors]
        if missing:
            raise RecoveryError(f"trainable adaptors {missing} are not registered in the student")
        if not self.taps:
            raise RecoveryError("mimic job has no taps")
        ts, ss = infer_shapes(self.teacher), infer_shapes(self.student)
        for t, s in self.taps:
            if t not in ts or s not in ss:
                raise RecoveryError(f"tap ({t!r}, {s!r}) names a missing node")
            if ts[t] != ss[s]:
                raise RecoveryError(f"tap ({t!r}, {s!r}) shapes differ: {ts[t]} vs {ss[s]}")
        return self

    def param_keys(self, cfg):
        keys = [self.student.adaptors[a].param for a in self.trainable]
        if cfg.train_bn_affine:
            for bn in self.bn_nodes:
                keys += [(bn, "gamma"), (bn, "beta")]
        return keys

    def train_bn(self, cfg):
        if cfg.bn_update == "none":
            return set()
        if cfg.bn_update == "site":
            return set(self.bn_nodes)
        if cfg.bn_update == "all":
            owners = {self.student.adaptors[a].id for a in self.trainable}
            down = self.student.descendants(owners)
            return {n for n in down if self.student.nodes[n].kind == "BN"}
        raise RecoveryError(f"unknown bn_update mode {cfg.bn_update!r}")


@dataclass
class MimicResult:
    loss_trace: list
    epochs: int
    initial_loss: float
    best_loss: float
    seconds: float
    stopped_early: bool


# --------------------------------------------------------------------------
# optimisers (in place so adaptor records keep pointing at live arrays)
# --------------------------------------------------------------------------


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = params  # key -> array
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k].astype(p.dtype, copy=False)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p -= (self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(p.dtype)


class SGD:
    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        self.params, self.lr, self.momentum, self.wd = params, lr, momentum, weight_decay
        self.buf = {}

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        for k, p in self.params.items():
            g = grads[k].astype(p.dtype, copy=False)
            if self.wd and k[1] in ("weight", "factor"):
                g = g + self.wd * p
            if self.momentum:
                b = self.buf.get(k)
                b = g.copy() if b is None else self.momentum * b + g
                self.buf[k] = b
                g = b
            p -= (lr * g).astype(p.dtype)


# --------------------------------------------------------------------------
# mimic training
# --------------------------------------------------------------------------


def _params_equal(a, b):
    if a.kind != b.kind or a.inputs != b.inputs:
        return False
    ta, tb = dict(tensor_slots(a)), dict(tensor_slots(b))
    if ta.keys() != tb.keys():
        return False
    if a.kind in ("MaxPool", "ChannelPad") and a.params != b.params:
        return False
    if a.kind == "Conv" and (a.params.stride, a.params.padding, a.params.groups) != (
        b.params.stride, b.params.padding, b.params.groups
    ):
        return False
    return all(ta[k].shape == tb[k].shape and np.array_equal(ta[k], tb[k]) for k in ta)


class _Plan:
    """Which teacher activations a student forward can reuse."""

    def __init__(self, teacher, student, taps, dirty):
        self.t_order = teacher.topo_order()
        self.s_order = student.topo_order()
        clean = set()
        for nid in self.s_order:
            sn, tn = student.nodes[nid], teacher.nodes.get(nid)
            if tn is None or nid in dirty:
                continue
            if all(s == INPUT or s in clean for s in sn.inputs) and _params_equal(tn, sn):
                clean.add(nid)
        self.s_taps = [s for _, s in taps]
        self.t_taps = [t for t, _ in taps]
        need = student.ancestors(self.s_taps)
        frontier = {s for n in need - clean for s in student.nodes[n].inputs if s in clean}
        frontier |= {s for s in self.s_taps if s in clean}
        self.frontier = sorted(frontier)
        self.t_outputs = list(dict.fromkeys(self.t_taps + self.frontier))

    def teacher(self, teacher, x):
        tr = engine.run(teacher, x, outputs=self.t_outputs, train_bn=set(), update_stats=False, order=self.t_order)
        return tr.values

    def student(self, student, x, tvals, train_bn, record):
        feed = {f: tvals[f] for f in self.frontier}
        return engine.run(student, x, outputs=self.s_taps, train_bn=train_bn, feed=feed, record=record,
                          order=self.s_order)


def _tap_loss(plan, svals, tvals):
    loss = 0.0
    seeds = {}
    for t, s in zip(plan.t_taps, plan.s_taps):
        diff = svals[s] - tvals[t]
        loss += float(np.mean(diff.astype(np.float64) ** 2))
        g = (2.0 / diff.size) * diff
        seeds[s] = seeds[s] + g if s in seeds else g
    return loss, seeds


def _eval_loss(job, plan, x, tcache, cfg):
    """Eval-mode tap MSE over the whole set (means over every element)."""
    sums = np.zeros(len(plan.s_taps))
    counts = np.zeros(len(plan.s_taps))
    for i in range(0, len(x), cfg.eval_batch):
        xb = x[i : i + cfg.eval_batch]
        tv = tcache[i // cfg.eval_batch]
        sv = plan.student(job.student, xb, tv, set(), False).values
        for j, (t, s) in enumerate(zip(plan.t_taps, plan.s_taps)):
            d = (sv[s] - tv[t]).astype(np.float64)
            sums[j] += np.sum(d * d)
            counts[j] += d.size
    return float(np.sum(sums / counts))


def mimic_loss(job, data, cfg=None):
    """Eval-mode mimic loss of the job's current student on ``data``."""
    cfg = cfg or MimicConfig()
    x, _ = as_arrays(data)
    if len(x) == 0:
        raise RecoveryError("empty data")
    job.validate()
    plan = _Plan(job.teacher, job.student, job.taps, set())
    tcache = [plan.teacher(job.teacher, x[i : i + cfg.eval_batch]) for i in range(0, len(x), cfg.eval_batch)]
    return _eval_loss(job, plan, x, tcache, cfg)


def train_adaptors(job, data, cfg=None):
    """Minimise the summed per-tap MSE by Adam on the job's trainable tensors.

    ``loss_trace[0]`` is the loss before any update; each later entry is the
    eval-mode loss after one epoch.  Training stops after ``patience`` epochs
    without a new best, and the best state (trainable tensors plus running
    statistics of BNs in batch-statistics mode) is restored, so the returned
    state's loss equals ``min(loss_trace)``.
    """
    cfg = cfg or MimicConfig()
    x, _ = as_arrays(data)
    n = len(x)
    if n == 0:
        raise RecoveryError("empty data")
    job.validate()
    t0 = time.perf_counter()
    student = job.student
    keys = job.param_keys(cfg)
    params = {k: engine.get_param(student, k) for k in keys}
    train_bn = job.train_bn(cfg)
    dirty = {k[0] for k in keys} | train_bn
    plan = _Plan(job.teacher, student, job.taps, dirty)
    policy = policy_for(student.input_spec) if cfg.augment == "auto" else cfg.augment
    batch = max(1, min(cfg.batch_size, n))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x313]))

    tcache = [plan.teacher(job.teacher, x[i : i + cfg.eval_batch]) for i in range(0, n, cfg.eval_batch)]

    def snapshot():
        state = {k: p.copy() for k, p in params.items()}
        for bn in train_bn:
            p = student.nodes[bn].params
            state[(bn, "running_mean")] = p.running_mean.copy()
            state[(bn, "running_var")] = p.running_var.copy()
        return state

    def restore(state):
        for k, v in state.items():
            engine.get_param(student, k)[...] = v

    trace = [_eval_loss(job, plan, x, tcache, cfg)]
    best, best_state, since = trace[0], snapshot(), 0
    opt = Adam(params, cfg.lr, cfg.betas, cfg.eps)
    epochs = 0
    stopped = False
    if trace[0] > 0 and keys:
        for epoch in range(cfg.max_epochs):
            order = rng.permutation(n)
            for i in range(0, n, batch):
                idx = order[i : i + batch]
                xb = augment_batch(x[idx], policy, int(rng.integers(2**31)))
                tv = plan.teacher(job.teacher, xb)
                tr = plan.student(student, xb, tv, train_bn, True)
                _, seeds = _tap_loss(plan, tr.values, tv)
                grads = engine.backward(tr, seeds, keys)
                opt.step(grads)
            epochs = epoch + 1
            loss = _eval_loss(job, plan, x, tcache, cfg)
            if not np.isfinite(loss):
                raise RecoveryError(f"mimic loss diverged at epoch {epochs}")
            trace.append(loss)
            if loss < best:
                best, best_state, since = loss, snapshot(), 0
            else:
                since += 1
                if since >= cfg.patience:
                    stopped = True
                    break
    restore(best_state)
    job.loss_trace = trace
    return MimicResult(trace, epochs, trace[0], best, time.perf_counter() - t0, stopped)


# --------------------------------------------------------------------------
# orchestration
# --------------------------------------------------------------------------


def _sites(teacher, plan):
    """Ordered ``(site id, insert callable)`` pairs, front to back."""
    order = {nid: i for i, nid in enumerate(teacher.topo_order())}
    if plan.scheme == "block_drop":
        labels = sorted(plan.blocks, key=lambda b: tuple(int(v) for v in b.split(".")))
        return [(b, lambda g, b=b: surgery.insert_block_adaptors(g, b)) for b in labels]
    if plan.scheme == "filter_level":
        sites = sorted(plan.keep_counts, key=lambda s: order[s])
        return [(s, lambda g, s=s: surgery.insert_channel_adaptors(g, s, int(plan.keep_counts[s]))) for s in sites]
    if plan.scheme == "unstructured":
        convs = list(plan.masks) or list(plan.convs) or surgery.default_unstructured_convs(teacher)
        convs = sorted(set(convs), key=order.get)
        masks = {c: plan.mask_for(teacher, c) for c in convs}
        return [(c, lambda g, c=c: surgery.insert_unstructured_adaptor(g, c, masks[c])) for c in convs]
    if plan.scheme == "low_rank":
        convs = sorted(set(plan.convs or surgery.default_low_rank_convs(teacher)), key=order.get)
        return [
            (c, lambda g, c=c: surgery.insert_low_rank(g, c, plan.energy_threshold, plan.energy_mode)) for c in convs
        ]
    return []


def run_practise(teacher, plan, data, cfg=None, freeze_front_k=0):
    """Apply ``plan`` site by site: insert adaptors, fit them by mimicking, merge.

    The first ``freeze_front_k`` sites keep their initial adaptors (no
    training).  Returns ``(graph, report)``; the graph has no adaptors.
    """
    cfg = cfg or MimicConfig()
    t0 = time.perf_counter()
    plan.validate(teacher)
    teacher = teacher.copy()
    teacher.mode = "eval"
    current = teacher.copy()
    sites = _sites(teacher, plan)
    if data is not None and len(as_arrays(data)[0]) == 0:
        raise RecoveryError("empty data")
    report = {"scheme": plan.scheme, "sites": [], "jobs": 0}
    for i, (site, insert) in enumerate(sites):
        st = time.perf_counter()
        student, adaptors = insert(current)
        entry = {"site": site, "adaptors": [a.id for a in adaptors], "taps": surgery.collect_taps(adaptors)}
        if i < freeze_front_k:
            entry.update(frozen=True, epochs=0, initial_loss=None, best_loss=None, loss_trace=[])
        else:
            if data is None:
                raise RecoveryError("data is required to train unfrozen sites")
            job = MimicJob.from_adaptors(teacher, student, adaptors)
            res = train_adaptors(job, data, cfg)
            report["jobs"] += 1
            entry.update(frozen=False, epochs=res.epochs, initial_loss=res.initial_loss, best_loss=res.best_loss,
                         loss_trace=res.loss_trace, stopped_early=res.stopped_early)
            log.info("site %s: %d epochs, loss %.4g -> %.4g", site, res.epochs, res.initial_loss, res.best_loss)
        current = surgery.merge_adaptors(student)
        entry["seconds"] = time.perf_counter() - st
        report["sites"].append(entry)
    current.mode = "eval"
    report["seconds"] = time.perf_counter() - t0
    return current, report


# --------------------------------------------------------------------------
# supervised training: KD finetuning and plain classifier training
# --------------------------------------------------------------------------


def penultimate(graph):
    """Node feeding the final FC: the feature vector after global pooling."""
    sink = graph.nodes[graph.sink()]
    if sink.kind != "FC":
        raise RecoveryError("graph does not end in an FC layer")
    return sink.inputs[0]


def _softmax_xent(logits, y):
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = len(y)
    loss = -np.mean(np.log(p[np.arange(n), y] + 1e-300))
    grad = p
    grad[np.arange(n), y] -= 1.0
    return float(loss), (grad / n).astype(logits.dtype)


def _supervised(student, x, y, *, lr, epochs, batch, seed, augment, optimizer, teacher=None, beta=0.0,
                momentum=0.9, weight_decay=0.0, schedule=None):
    g = student.copy()
    g.mode = "train"
    n = len(x)
    batch = max(1, min(batch, n))
    keys = engine.param_keys(g)
    params = {k: engine.get_param(g, k) for k in keys}
    opt = Adam(params, lr) if optimizer == "adam" else SGD(params, lr, momentum, weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7F7]))
    policy = policy_for(g.input_spec) if augment == "auto" else augment
    sink = g.sink()
    feat = penultimate(g)
    t_feat = penultimate(teacher) if teacher is not None else None
    train_bn = {nid for nid, nd in g.nodes.items() if nd.kind == "BN"}
    order_s = g.topo_order()
    order_t = teacher.topo_order() if teacher is not None else None
    steps_per_epoch = (n + batch - 1) // batch
    total = max(1, epochs * steps_per_epoch)
    history = []
    step = 0
    for epoch in range(epochs):
        perm = rng.permutation(n)
        ep_loss = 0.0
        for i in range(0, n, batch):
            idx = perm[i : i + batch]
            xb = augment_batch(x[idx], policy, int(rng.integers(2**31)))
            tr = engine.run(g, xb, outputs=[sink, feat], train_bn=train_bn, record=True, order=order_s)
            ce, dlogits = _softmax_xent(tr[sink], y[idx])
            seeds = {sink: dlogits}
            loss = ce
            if beta > 0:
                tv = engine.run(teacher, xb, outputs=[t_feat], train_bn=set(), update_stats=False, order=order_t)
                diff = tr[feat] - tv[t_feat]
                loss += beta * float(np.mean(diff.astype(np.float64) ** 2))
                seeds[feat] = (beta * 2.0 / diff.size) * diff
            grads = engine.backward(tr, seeds, keys)
            if schedule == "cosine":
                cur = 0.5 * lr * (1 + np.cos(np.pi * step / total))
                opt.step(grads, cur) if isinstance(opt, SGD) else opt.step(grads)
            else:
                opt.step(grads)
            step += 1
            ep_loss += loss * len(idx)
        if not np.isfinite(ep_loss):
            raise RecoveryError(f"training diverged at epoch {epoch + 1}")
        history.append(ep_loss / n)
    g.mode = "eval"
    return g, history


def finetune_kd(student, teacher, data, cfg=None):
    """Whole-network finetuning on ``L_c + beta * L_mse`` (penultimate features).

    Returns ``(graph, report)``; ``student`` is left unchanged.
    """
    cfg = cfg or FinetuneConfig()
    x, y = as_arrays(data)
    if y is None:
        raise RecoveryError("finetuning needs a labeled tiny set")
    if len(x) == 0:
        raise RecoveryError("empty data")
    if cfg.beta > 0:
        fs = infer_shapes(student)[penultimate(student)]
        ft = infer_shapes(teacher)[penultimate(teacher)]
        if fs != ft:
            raise RecoveryError(f"penultimate features differ: student {fs} vs teacher {ft}")
    t0 = time.perf_counter()
    out, hist = _supervised(student, x, y, lr=cfg.lr, epochs=cfg.epochs, batch=cfg.batch_size, seed=cfg.seed,
                            augment=cfg.augment, optimizer="sgd", teacher=teacher if cfg.beta > 0 else None,
                            beta=cfg.beta, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return out, {"loss_trace": hist, "epochs": cfg.epochs, "beta": cfg.beta, "seconds": time.perf_counter() - t0}


def kd_loss(student, teacher, x, y, beta):
    """Eval-mode ``L_c + beta * L_mse`` and its two parts (no augmentation)."""
    ls = engine.run(student, x, outputs=[student.sink(), penultimate(student)], train_bn=set(), update_stats=False)
    lt = engine.run(teacher, x, outputs=[penultimate(teacher)], train_bn=set(), update_stats=False)
    ce, _ = _softmax_xent(ls[student.sink()], np.asarray(y))
    mse = float(np.mean((ls[penultimate(student)] - lt[penultimate(teacher)]).astype(np.float64) ** 2))
    return ce + beta * mse, ce, mse


def train_classifier(graph, x, y, epochs=30, lr=0.05, batch_size=64, seed=0, augment="auto", momentum=0.9,
                     weight_decay=5e-4, optimizer="sgd", schedule="cosine"):
    """Plain cross-entropy training from the given weights (used for teachers)."""
    out, hist = _supervised(graph, np.asarray(x, np.float32), np.asarray(y), lr=lr, epochs=epochs,
                            batch=batch_size, seed=seed, augment=augment, optimizer=optimizer,
                            momentum=momentum, weight_decay=weight_decay, schedule=schedule)
    return out, hist


def evaluate(graph, data, batch_size=256, topk=(1, 5)):
    """Top-1 / top-5 accuracy in percent.

    Ties between equal logits rank the lower class index first, so a
    constant-logit model predicts class 0.
    """
    x, y = as_arrays(data)
    if y is None:
        raise RecoveryError("evaluation needs labels")
    if len(x) == 0:
        raise RecoveryError("empty dataset")
    g = graph
    hits = np.zeros(len(topk))
    order = g.topo_order()
    sink = g.sink()
    for i in range(0, len(x), batch_size):
        logits = engine.run(g, x[i : i + batch_size], train_bn=set(), update_stats=False, order=order)[sink]
        yb = np.asarray(y[i : i + batch_size])
        own = logits[np.arange(len(yb)), yb][:, None]
        cls = np.arange(logits.shape[1])[None, :]
        rank = np.sum((logits > own) | ((logits == own) & (cls < yb[:, None])), axis=1)
        for j, k in enumerate(topk):
            hits[j] += np.sum(rank < k)
    acc = 100.0 * hits / len(x)
    return tuple(float(a) for a in acc)
