"""Command line entry point: ``tinyprune <subcommand>``.

Exit codes: 0 ok, 2 configuration error, 3 data/artifact error, 4 training
error, 5 measurement error.
"""

from __future__ import annotations

import argparse
import copy
import datetime as dt
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__, bench, recovery, surgery, tinyset
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .ir import count_cost
from .zoo import PLANS, ArchitectureError, build_architecture

log = logging.getLogger("tinyprune")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN, EXIT_MEASURE = 0, 2, 3, 4, 5
CONFIG_VERSION = 1

DEFAULTS = {
    "version": CONFIG_VERSION,
    "model": {"name": "resnet14", "variant": "cifar", "checkpoint": None, "seed": 0},
    "plan": {"scheme": "block_drop", "blocks": [], "keep_counts": {}, "energy_threshold": 0.4,
             "energy_mode": "cumulative", "sparsity": None, "masks": {}, "convs": []},
    "data": {"source": "shapes", "mode": "random_n", "k_or_n": 50, "seed": 0, "stratified": False,
             "root": None, "pool_per_class": 200, "shape": None},
    "eval": {"source": None, "root": None, "per_class": 100, "seed": 1},
    "mimic": {"lr": 1e-4, "batch": 64, "epochs": 1000, "patience": 10, "seed": 0, "augment": "auto",
              "bn_update": "site"},
    "finetune": {"enabled": False, "lr": 1e-4, "batch": 256, "epochs": 100, "beta": 100.0, "momentum": 0.9,
                 "seed": 0},
    "recovery": {"freeze_front_k": 0},
    "bench": {"enabled": False, "batch": 64, "threads": 1, "warmup": 10, "runs": 30},
    "out": {"dir": "runs/latest"},
}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# config handling
# --------------------------------------------------------------------------


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict) and k not in ("keep_counts", "masks"):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be a mapping")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def apply_override(cfg, item):
    """``a.b.c=value`` with the value parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = yaml.safe_load(raw)
    return cfg


def load_config(path=None, overrides=()):
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
    if raw.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {raw.get('version')!r}")
    cfg = _merge(DEFAULTS, raw)
    for item in overrides:
        apply_override(cfg, item)
    check_config(cfg)
    return cfg


def check_config(cfg):
    m, d, f = cfg["model"], cfg["data"], cfg["finetune"]
    if d["source"] == "gaussian" and d["mode"] != "synthetic":
        d["mode"] = "synthetic"
    if d["mode"] not in ("kshot", "random_n", "synthetic"):
        raise ConfigError(f"data.mode must be kshot, random_n or synthetic, got {d['mode']!r}")
    if d["mode"] == "synthetic" and d["source"] != "gaussian":
        raise ConfigError("data.mode=synthetic requires data.source=gaussian")
    if f["enabled"] and d["mode"] == "synthetic":
        raise ConfigError("finetune.enabled needs a labeled tiny set, but data.source is unlabeled")
    for sec, keys in (("mimic", ("lr", "batch", "epochs", "patience")), ("finetune", ("lr", "batch", "epochs")),
                      ("bench", ("batch", "threads", "warmup", "runs"))):
        for k in keys:
            v = cfg[sec][k]
            if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"{sec}.{k} must be a non-negative number, got {v!r}")
    if f["beta"] < 0:
        raise ConfigError("finetune.beta must be >= 0")
    if cfg["bench"]["enabled"] and cfg["bench"]["runs"] < 5:
        raise ConfigError("bench.runs must be >= 5")
    if not m.get("checkpoint") and not m.get("name"):
        raise ConfigError("model.name or model.checkpoint is required")
    try:
        make_plan(cfg)
    except surgery.PlanError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def make_plan(cfg):
    p = dict(cfg["plan"])
    if isinstance(p.get("blocks"), str):
        # named table variants, e.g. blocks: C
        table = PLANS.get(cfg["model"]["name"], {})
        if p["blocks"] in table:
            p["blocks"] = table[p["blocks"]]
        else:
            p["blocks"] = [b for b in p["blocks"].replace(",", " ").split() if b]
    return surgery.CompressionPlan.from_dict({k: v for k, v in p.items() if v is not None or k == "sparsity"})


# --------------------------------------------------------------------------
# artifacts
# --------------------------------------------------------------------------


def load_model(mcfg):
    if mcfg.get("checkpoint"):
        return load_checkpoint(mcfg["checkpoint"])
    return build_architecture(mcfg["name"], mcfg["variant"], seed=int(mcfg.get("seed") or 0))


def make_source(dcfg, input_spec, seed_key="seed"):
    src = dcfg["source"]
    if src == "shapes":
        return tinyset.synthetic_shapes(int(dcfg.get("pool_per_class") or dcfg.get("per_class") or 200),
                                        seed=int(dcfg.get("pool_seed", 0)), size=int(input_spec[1]))
    if src == "cifar10":
        return tinyset.load_cifar10(dcfg["root"], train=dcfg.get("train", True))
    if src == "folder":
        return tinyset.ImageFolderSource(dcfg["root"], size=int(input_spec[1]))
    raise tinyset.DataError(f"unknown data source {src!r}")


def make_tinyset(dcfg, input_spec):
    if dcfg["source"] == "gaussian":
        shape = dcfg.get("shape") or list(input_spec)
        return tinyset.synth_gaussian(int(dcfg["k_or_n"]), shape, int(dcfg["seed"]))
    if dcfg["source"] == "tinyset":
        return tinyset.load_tinyset(dcfg["root"])
    source = make_source(dcfg, input_spec)
    return tinyset.sample_tinyset(source, dcfg["mode"], int(dcfg["k_or_n"]), int(dcfg["seed"]),
                                  bool(dcfg.get("stratified")))


def make_eval_set(ecfg, input_spec):
    if not ecfg.get("source"):
        return None
    if ecfg["source"] == "shapes":
        src = tinyset.synthetic_shapes(int(ecfg.get("per_class") or 100), seed=int(ecfg.get("seed", 1)),
                                       size=int(input_spec[1]))
        return src.images, src.labels
    if ecfg["source"] == "cifar10":
        src = tinyset.load_cifar10(ecfg["root"], train=False)
        return src.images, src.labels
    if ecfg["source"] == "folder":
        src = tinyset.ImageFolderSource(ecfg["root"], size=int(input_spec[1]))
        return src.load(range(len(src))), src.labels
    raise tinyset.DataError(f"unknown eval source {ecfg['source']!r}")


def _cost_dict(g):
    c = count_cost(g)
    return {"params": c.params, "macs": c.macs}


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o)}")


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------


def run_pipeline(config_path=None, overrides=(), cfg=None):
    """Run build → plan → recovery → (finetune) → eval → cost → (bench).

    Returns ``(exit_code, manifest)``; the manifest is also written to
    ``<out.dir>/manifest.json`` when the run gets far enough to have one.
    """
    manifest = {"tool": "tinyprune", "version": __version__, "started": _now()}
    try:
        cfg = cfg if cfg is not None else load_config(config_path, overrides)
    except ConfigError as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG, {**manifest, "error": str(exc)}
    manifest["config"] = cfg
    out = Path(cfg["out"]["dir"])
    try:
        teacher = load_model(cfg["model"])
        data = make_tinyset(cfg["data"], teacher.input_spec)
        evalset = make_eval_set(cfg["eval"], teacher.input_spec)
    except (CheckpointError, tinyset.DataError, FileNotFoundError) as exc:
        log.error("data: %s", exc)
        return EXIT_DATA, {**manifest, "error": str(exc)}
    except ArchitectureError as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG, {**manifest, "error": str(exc)}
    if cfg["finetune"]["enabled"] and not data.labeled:
        return EXIT_CONFIG, {**manifest, "error": "finetune needs a labeled tiny set"}

    plan = make_plan(cfg)
    try:
        plan.validate(teacher)
    except surgery.SurgeryError as exc:
        log.error("plan: %s", exc)
        return EXIT_CONFIG, {**manifest, "error": str(exc)}
    manifest["plan"] = plan.to_dict()
    manifest["tinyset"] = {"recipe": vars(data.recipe), "size": len(data), "labeled": data.labeled}

    mc = cfg["mimic"]
    mimic_cfg = recovery.MimicConfig(lr=mc["lr"], batch_size=int(mc["batch"]), max_epochs=int(mc["epochs"]),
                                     patience=int(mc["patience"]), seed=int(mc["seed"]), augment=mc["augment"],
                                     bn_update=mc["bn_update"])
    try:
        student, report = recovery.run_practise(teacher, plan, data, mimic_cfg,
                                                freeze_front_k=int(cfg["recovery"]["freeze_front_k"]))
        manifest["recovery"] = {"jobs": report["jobs"], "seconds": report["seconds"], "sites": [
            {k: s.get(k) for k in ("site", "frozen", "epochs", "initial_loss", "best_loss", "seconds")}
            for s in report["sites"]]}
        manifest["finetune"] = None
        if cfg["finetune"]["enabled"]:
            fc = cfg["finetune"]
            ft_cfg = recovery.FinetuneConfig(lr=fc["lr"], batch_size=int(fc["batch"]), epochs=int(fc["epochs"]),
                                             beta=float(fc["beta"]), momentum=float(fc["momentum"]),
                                             seed=int(fc["seed"]))
            student, ft_report = recovery.finetune_kd(student, teacher, data, ft_cfg)
            manifest["finetune"] = {"epochs": ft_cfg.epochs, "beta": ft_cfg.beta, "seconds": ft_report["seconds"],
                                    "final_loss": ft_report["loss_trace"][-1] if ft_report["loss_trace"] else None}
    except (recovery.RecoveryError, surgery.SurgeryError) as exc:
        log.error("training: %s", exc)
        return EXIT_TRAIN, {**manifest, "error": str(exc)}

    manifest["cost"] = {"before": _cost_dict(teacher), "after": _cost_dict(student)}
    if evalset is not None:
        manifest["accuracy"] = {"teacher": recovery.evaluate(teacher, evalset),
                                "student": recovery.evaluate(student, evalset)}
    out.mkdir(parents=True, exist_ok=True)
    ckpt = save_checkpoint(student, out / "compressed")
    tinyset.save_tinyset(data, out / "tinyset")
    manifest["checkpoints"] = {"compressed": str(ckpt), "tinyset": str(out / "tinyset"),
                               "teacher": cfg["model"].get("checkpoint")}
    code = EXIT_OK
    if cfg["bench"]["enabled"]:
        b = cfg["bench"]
        try:
            lat = {}
            for name, g in (("teacher", teacher), ("compressed", student)):
                rep = bench.measure_latency(g, int(b["batch"]), int(b["warmup"]), int(b["runs"]), int(b["threads"]))
                rep.save(out / f"latency-{name}.json")
                lat[name] = {"median_ms": rep.median_ms, "p10_ms": rep.p10_ms, "p90_ms": rep.p90_ms}
            manifest["latency"] = lat
        except bench.MeasurementError as exc:
            log.error("measurement: %s", exc)
            manifest["error"] = str(exc)
            code = EXIT_MEASURE
    manifest["finished"] = _now()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, default=_jsonable))
    return code, manifest


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def _cmd_compress(args):
    code, manifest = run_pipeline(args.config, args.set)
    if code == EXIT_OK:
        print(json.dumps({k: manifest.get(k) for k in ("cost", "recovery", "finetune", "accuracy", "checkpoints")},
                         indent=1, default=_jsonable))
    return code


def _cmd_finetune(args):
    try:
        student = load_checkpoint(args.checkpoint)
        teacher = load_checkpoint(args.teacher)
        data = tinyset.load_tinyset(args.tinyset)
    except (CheckpointError, tinyset.DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if not data.labeled:
        print("error: finetuning needs a labeled tiny set", file=sys.stderr)
        return EXIT_CONFIG
    cfg = recovery.FinetuneConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs, beta=args.beta,
                                  seed=args.seed)
    try:
        out, rep = recovery.finetune_kd(student, teacher, data, cfg)
    except recovery.RecoveryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    save_checkpoint(out, args.out)
    print(json.dumps({"out": str(args.out), "final_loss": rep["loss_trace"][-1] if rep["loss_trace"] else None}))
    return EXIT_OK


def _cmd_eval(args):
    try:
        g = load_checkpoint(args.checkpoint)
        if args.tinyset:
            ts = tinyset.load_tinyset(args.tinyset)
            data = (ts.images, ts.labels)
        else:
            data = make_eval_set({"source": args.source, "root": args.root, "per_class": args.per_class,
                                  "seed": args.seed}, g.input_spec)
        top1, top5 = recovery.evaluate(g, data)
    except (CheckpointError, tinyset.DataError, recovery.RecoveryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps({"top1": top1, "top5": top5}))
    return EXIT_OK


def _graph_from_args(args):
    if args.checkpoint:
        g = load_checkpoint(args.checkpoint)
    else:
        g = build_architecture(args.model, args.variant)
    blocks = []
    if args.drop:
        table = PLANS.get(args.model, {})
        blocks = table.get(args.drop) or [b for b in args.drop.replace(",", " ").split() if b]
    for b in blocks:
        g = surgery.drop_block(g, b)
    return g


def _cmd_cost(args):
    try:
        g = _graph_from_args(args)
    except (ArchitectureError, surgery.SurgeryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    c = count_cost(g)
    print(json.dumps({"params": c.params, "macs": c.macs, "params_M": round(c.params / 1e6, 2),
                      "macs_G": round(c.macs / 1e9, 2), "macs_M": round(c.macs / 1e6, 2)}))
    return EXIT_OK


def _cmd_bench(args):
    try:
        if args.kernels:
            rows = bench.kernel_benchmark(repeats=args.runs)
            for r in rows:
                print(f"{r['kernel']:<20} numba {r['numba_ms']:8.3f} ms   numpy {r['numpy_ms']:8.3f} ms   "
                      f"max|diff| {r['max_abs_diff']:.2e}")
            return EXIT_OK
        g = _graph_from_args(args)
        rep = bench.measure_latency(g, args.batch, args.warmup, args.runs, args.threads)
    except bench.MeasurementError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MEASURE
    except (ArchitectureError, surgery.SurgeryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.out:
        rep.save(args.out)
    d = rep.to_dict()
    d.pop("per_run_ms")
    print(json.dumps(d))
    return EXIT_OK


def _cmd_sample(args):
    dcfg = {"source": args.source, "mode": args.mode, "k_or_n": args.k_or_n, "seed": args.seed,
            "stratified": args.stratified, "root": args.root, "pool_per_class": args.pool_per_class,
            "shape": None}
    spec = (3, args.size, args.size)
    try:
        if args.source == "gaussian":
            dcfg["mode"] = "synthetic"
        ts = make_tinyset(dcfg, spec)
    except tinyset.DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    tinyset.save_tinyset(ts, args.out)
    print(json.dumps({"out": str(args.out), "size": len(ts), "recipe": vars(ts.recipe)}))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="tinyprune", description="Compress CNNs with tiny training sets.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compress", help="run the full pipeline from a YAML config")
    c.add_argument("--config", "-c", help="YAML config file")
    c.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    c.set_defaults(func=_cmd_compress)

    f = sub.add_parser("finetune", help="KD-finetune a compressed checkpoint")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--teacher", required=True)
    f.add_argument("--tinyset", required=True, help="directory written by `sample` or `compress`")
    f.add_argument("--out", required=True)
    f.add_argument("--lr", type=float, default=1e-4)
    f.add_argument("--batch", type=int, default=256)
    f.add_argument("--epochs", type=int, default=100)
    f.add_argument("--beta", type=float, default=100.0)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=_cmd_finetune)

    e = sub.add_parser("eval", help="top-1/top-5 accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--tinyset")
    e.add_argument("--source", default="shapes", choices=["shapes", "cifar10", "folder"])
    e.add_argument("--root")
    e.add_argument("--per-class", type=int, default=100)
    e.add_argument("--seed", type=int, default=1)
    e.set_defaults(func=_cmd_eval)

    for name, fn, helptext in (("cost", _cmd_cost, "parameter and MAC count"),
                               ("bench", _cmd_bench, "latency measurement")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--model", default="resnet34")
        s.add_argument("--variant", default="imagenet")
        s.add_argument("--checkpoint")
        s.add_argument("--drop", help="table variant (A/B/C/D) or block list like 1.2,2.2")
        if name == "bench":
            s.add_argument("--batch", type=int, default=64)
            s.add_argument("--threads", type=int, default=1)
            s.add_argument("--warmup", type=int, default=10)
            s.add_argument("--runs", type=int, default=30)
            s.add_argument("--out")
            s.add_argument("--kernels", action="store_true", help="compare numba and numpy kernels instead")
        s.set_defaults(func=fn)

    s = sub.add_parser("sample", help="draw and export a tiny set")
    s.add_argument("--source", default="shapes", choices=["shapes", "cifar10", "folder", "gaussian"])
    s.add_argument("--root")
    s.add_argument("--mode", default="random_n", choices=["kshot", "random_n"])
    s.add_argument("--k-or-n", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--stratified", action="store_true")
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--pool-per-class", type=int, default=200)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_sample)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
