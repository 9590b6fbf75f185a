"""Checkpoint directory format.

``manifest.json`` holds structure (nodes, inputs, geometry, tags, tensor
shapes) plus a format version; every tensor lives in its own blob of
little-endian float32 values named ``<node id>.<slot>.bin``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .ir import BlockTag, BNSpec, ConvSpec, FCSpec, ModelGraph, Node, PadSpec, PoolSpec, tensor_slots

FORMAT_VERSION = 1
_LE32 = np.dtype("<f4")


class CheckpointError(IOError):
    pass


def _blob_name(node_id, slot):
    return f"{node_id}.{slot}.bin"


def _geometry(node):
    p = node.params
    if node.kind == "Conv":
        return {"stride": list(p.stride), "padding": list(p.padding), "groups": p.groups}
    if node.kind == "BN":
        return {"eps": p.eps}
    if node.kind == "MaxPool":
        return {"kernel": p.kernel, "stride": p.stride, "padding": p.padding}
    if node.kind == "ChannelPad":
        return {"stride": p.stride, "before": p.before, "after": p.after}
    return {}


def save_checkpoint(graph, path):
    """Write ``graph`` to directory ``path`` (created if missing)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    nodes = []
    for nid, node in graph.nodes.items():
        tensors = {}
        for slot, arr in tensor_slots(node):
            data = np.ascontiguousarray(arr, dtype=_LE32)
            if not np.all(np.isfinite(data)):
                raise CheckpointError(f"non-finite values in {nid}.{slot}")
            fname = _blob_name(nid, slot)
            data.tofile(path / fname)
            tensors[slot] = {"file": fname, "shape": list(arr.shape)}
        entry = {"id": nid, "kind": node.kind, "inputs": list(node.inputs), "tensors": tensors}
        entry.update(_geometry(node))
        tag = graph.block_tags.get(nid)
        if tag is not None:
            entry["tag"] = {"stage": tag.stage, "block": tag.block, "role": tag.role}
        nodes.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": graph.name,
        "mode": graph.mode,
        "input_spec": list(graph.input_spec),
        "nodes": nodes,
    }
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1))
    os.replace(tmp, path / "manifest.json")
    return path


def _read_blob(path, entry):
    fname = path / entry["file"]
    if not fname.exists():
        raise CheckpointError(f"missing tensor blob {fname}")
    shape = tuple(entry["shape"])
    expected = int(np.prod(shape)) * _LE32.itemsize
    size = fname.stat().st_size
    if size != expected:
        raise CheckpointError(f"blob length mismatch for {fname.name}: {size} bytes, expected {expected}")
    return np.fromfile(fname, dtype=_LE32).astype(np.float32).reshape(shape)


def load_checkpoint(path):
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"no manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest {mpath}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version!r} (this build reads {FORMAT_VERSION})")
    g = ModelGraph(
        input_spec=tuple(manifest["input_spec"]),
        mode=manifest.get("mode", "eval"),
        name=manifest.get("name", ""),
    )
    try:
        for e in manifest["nodes"]:
            t = {slot: _read_blob(path, ent) for slot, ent in e["tensors"].items()}
            kind = e["kind"]
            if kind == "Conv":
                params = ConvSpec(
                    t["weight"], t.get("bias"), tuple(e["stride"]), tuple(e["padding"]), e["groups"],
                    t.get("factor"), t.get("mask"),
                )
            elif kind == "BN":
                params = BNSpec(t["gamma"], t["beta"], t["running_mean"], t["running_var"], e["eps"])
            elif kind == "FC":
                params = FCSpec(t["weight"], t.get("bias"))
            elif kind == "MaxPool":
                params = PoolSpec(e["kernel"], e["stride"], e["padding"])
            elif kind == "ChannelPad":
                params = PadSpec(e["stride"], e["before"], e["after"])
            else:
                params = None
            g.nodes[e["id"]] = Node(e["id"], kind, tuple(e["inputs"]), params)
            if "tag" in e:
                g.block_tags[e["id"]] = BlockTag(**e["tag"])
    except KeyError as exc:
        raise CheckpointError(f"manifest entry missing field {exc}") from exc
    return g


def graphs_equal(a, b):
    """Structural and bitwise tensor equality (adaptor metadata ignored)."""
    if (a.input_spec, a.mode, list(a.nodes)) != (b.input_spec, b.mode, list(b.nodes)):
        return False
    if a.block_tags != b.block_tags:
        return False
    for nid, na in a.nodes.items():
        nb = b.nodes[nid]
        if (na.kind, na.inputs) != (nb.kind, nb.inputs):
            return False
        if _geometry(na) != _geometry(nb):
            return False
        ta, tb = dict(tensor_slots(na)), dict(tensor_slots(nb))
        if ta.keys() != tb.keys():
            return False
        for slot in ta:
            x, y = ta[slot], tb[slot]
            if x.shape != y.shape or x.tobytes() != y.astype(x.dtype).tobytes():
                return False
    return True
