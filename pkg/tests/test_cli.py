import json

import pytest
import yaml

from tinyprune import cli, tinyset, zoo
from tinyprune.checkpoint import graphs_equal, load_checkpoint, save_checkpoint


def _cfg(tmp_path, **over):
    cfg = {
        "version": 1,
        "model": {"name": "resnet14", "variant": "cifar"},
        "plan": {"scheme": "block_drop", "blocks": ["2.2"]},
        "data": {"source": "shapes", "mode": "random_n", "k_or_n": 20, "seed": 0, "pool_per_class": 10},
        "mimic": {"epochs": 3, "patience": 2},
        "out": {"dir": str(tmp_path / "run")},
    }
    for key, value in over.items():
        sec, k = key.split("__")
        cfg.setdefault(sec, {})[k] = value
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_config_defaults_and_overrides(tmp_path):
    cfg = cli.load_config(_cfg(tmp_path), ["mimic.lr=0.01", "plan.blocks=[1.2]", "finetune.beta=0"])
    assert cfg["mimic"]["lr"] == 0.01
    assert cli.make_plan(cfg).blocks == ["1.2"]
    assert cfg["finetune"]["beta"] == 0 and cfg["mimic"]["batch"] == 64
    assert cfg["bench"] == {"enabled": False, "batch": 64, "threads": 1, "warmup": 10, "runs": 30}


@pytest.mark.parametrize("over,items", [
    ({}, ["mimic.speed=3"]),
    ({}, ["nonsense"]),
    ({"version__": None}, []),
    ({"plan__scheme": "squash"}, []),
    ({"mimic__lr": -1}, []),
    ({"bench__runs": 3, "bench__enabled": True}, []),
    ({"data__source": "gaussian", "finetune__enabled": True}, []),
])
def test_config_errors(tmp_path, over, items):
    path = _cfg(tmp_path, **{k: v for k, v in over.items() if not k.startswith("version")})
    if "version__" in over:
        d = yaml.safe_load(path.read_text())
        d["version"] = 2
        path.write_text(yaml.safe_dump(d))
    with pytest.raises(cli.ConfigError):
        cli.load_config(path, items)


def test_unlabeled_finetune_fails_before_training(tmp_path, monkeypatch):
    called = []
    monkeypatch.setattr(cli.recovery, "run_practise", lambda *a, **k: called.append(1))
    path = _cfg(tmp_path, data__source="gaussian", finetune__enabled=True)
    assert cli.main(["compress", "--config", str(path)]) == cli.EXIT_CONFIG
    assert not called


def test_pipeline_writes_manifest_and_is_reproducible(tmp_path):
    path = _cfg(tmp_path, finetune__enabled=True, finetune__epochs=1, eval__source="shapes", eval__per_class=3)
    code, man = cli.run_pipeline(path)
    assert code == 0
    out = tmp_path / "run"
    on_disk = json.loads((out / "manifest.json").read_text())
    for key in ("config", "plan", "tinyset", "recovery", "cost", "checkpoints", "started", "finished", "version"):
        assert key in on_disk
    assert on_disk["recovery"]["jobs"] == 1 and on_disk["finetune"]["beta"] == 100.0
    assert on_disk["cost"]["after"]["macs"] < on_disk["cost"]["before"]["macs"]
    first = load_checkpoint(out / "compressed")
    # rerun with identical seeds gives a bitwise-identical checkpoint
    code, _ = cli.run_pipeline(path)
    assert code == 0 and graphs_equal(first, load_checkpoint(out / "compressed"))
    ts = tinyset.load_tinyset(out / "tinyset")
    assert len(ts) == 20 and ts.labeled


def test_mimic_only_has_no_finetune_stage(tmp_path):
    code, man = cli.run_pipeline(_cfg(tmp_path, mimic__epochs=1))
    assert code == 0 and man["finetune"] is None and man["recovery"]["jobs"] == 1


def test_resnet34_plan_c_manifest(tmp_path):
    path = _cfg(tmp_path, model__name="resnet34", model__variant="imagenet", plan__blocks="C",
                data__source="gaussian", data__k_or_n=50, mimic__epochs=0)
    code, man = cli.run_pipeline(path)
    assert code == 0
    assert man["recovery"]["jobs"] == 3 and man["finetune"] is None
    assert [s["site"] for s in man["recovery"]["sites"]] == ["1.2", "2.2", "3.2"]
    assert round(man["cost"]["after"]["macs"] / 1e9, 2) == 2.97


def test_missing_artifacts_map_to_data_exit(tmp_path):
    path = _cfg(tmp_path, model__checkpoint=str(tmp_path / "nope"))
    assert cli.main(["compress", "-c", str(path)]) == cli.EXIT_DATA
    path = _cfg(tmp_path, data__source="cifar10", data__root=str(tmp_path))
    assert cli.main(["compress", "-c", str(path)]) == cli.EXIT_DATA


def test_invalid_plan_maps_to_config_exit(tmp_path):
    path = _cfg(tmp_path, plan__blocks=["1.1"])
    assert cli.main(["compress", "-c", str(path)]) == cli.EXIT_CONFIG


def test_training_failure_maps_to_training_exit(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise cli.recovery.RecoveryError("diverged")

    monkeypatch.setattr(cli.recovery, "run_practise", boom)
    assert cli.main(["compress", "-c", str(_cfg(tmp_path))]) == cli.EXIT_TRAIN


def test_measurement_failure_maps_to_measure_exit(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise cli.bench.MeasurementError("oom")

    monkeypatch.setattr(cli.bench, "measure_latency", boom)
    path = _cfg(tmp_path, bench__enabled=True, bench__runs=5)
    assert cli.main(["compress", "-c", str(path)]) == cli.EXIT_MEASURE


def test_cost_command(capsys):
    assert cli.main(["cost", "--model", "resnet34", "--drop", "C"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert (out["params_M"], out["macs_G"]) == (20.25, 2.97)
    assert cli.main(["cost", "--model", "resnet56", "--variant", "cifar"]) == 0
    assert cli.main(["cost", "--model", "mobilenetv2", "--variant", "cifar"]) == cli.EXIT_CONFIG


def test_bench_command(capsys, tmp_path):
    code = cli.main(["bench", "--model", "resnet14", "--variant", "cifar", "--batch", "2", "--warmup", "0",
                     "--runs", "5", "--out", str(tmp_path / "lat.json")])
    assert code == 0 and json.loads(capsys.readouterr().out)["timed_runs"] == 5
    assert cli.main(["bench", "--model", "resnet14", "--variant", "cifar", "--runs", "3"]) == cli.EXIT_MEASURE


def test_sample_eval_finetune_commands(tmp_path, capsys):
    assert cli.main(["sample", "--k-or-n", "2", "--mode", "kshot", "--pool-per-class", "4",
                     "--out", str(tmp_path / "ts")]) == 0
    assert len(tinyset.load_tinyset(tmp_path / "ts")) == 20
    teacher = zoo.build_architecture("resnet14", "cifar")
    save_checkpoint(teacher, tmp_path / "t")
    before = (tmp_path / "t" / "fc.weight.bin").read_bytes()
    assert cli.main(["finetune", "--checkpoint", str(tmp_path / "t"), "--teacher", str(tmp_path / "t"),
                     "--tinyset", str(tmp_path / "ts"), "--epochs", "1", "--out", str(tmp_path / "ft")]) == 0
    assert (tmp_path / "t" / "fc.weight.bin").read_bytes() == before  # inputs never mutated
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "ft"), "--tinyset", str(tmp_path / "ts")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert 0 <= res["top1"] <= res["top5"] <= 100
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "missing")]) == cli.EXIT_DATA


def test_finetune_command_rejects_unlabeled(tmp_path):
    tinyset.save_tinyset(tinyset.synth_gaussian(3, [3, 32, 32], 0), tmp_path / "g")
    save_checkpoint(zoo.build_architecture("resnet14", "cifar"), tmp_path / "t")
    code = cli.main(["finetune", "--checkpoint", str(tmp_path / "t"), "--teacher", str(tmp_path / "t"),
                     "--tinyset", str(tmp_path / "g"), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_CONFIG
