import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tinyprune import engine, surgery, zoo
from tinyprune.checkpoint import CheckpointError, graphs_equal, load_checkpoint, save_checkpoint
from tinyprune.ir import INPUT, BlockTag, BNSpec, ConvSpec, FCSpec, GraphError, ModelGraph, count_cost, validate_graph

from conftest import toy_resnet


def _cost(name, variant, drop=()):
    g = zoo.build_architecture(name, variant)
    for b in drop:
        g = surgery.drop_block(g, b)
    return count_cost(g)


# --------------------------------------------------------------------------
# builders and costs
# --------------------------------------------------------------------------


@pytest.mark.parametrize("name,variant", [(n, v) for n, vs in zoo.ARCHITECTURES.items() for v in vs])
def test_builders_validate(name, variant):
    g = zoo.build_architecture(name, variant)
    assert validate_graph(g) == []
    c = count_cost(g)
    assert c.params > 0 and c.macs > 0


def test_resnet34_cost_table_row():
    c = _cost("resnet34", "imagenet")
    assert round(c.params / 1e6, 2) == 21.80
    assert round(c.macs / 1e9, 2) == 3.66


def test_resnet56_cost():
    c = _cost("resnet56", "cifar")
    assert round(c.params / 1e3, 2) == 853.02
    assert round(c.macs / 1e6, 2) == 125.49


def test_resnet50_and_mobilenet_costs():
    c = _cost("resnet50", "imagenet")
    assert (round(c.params / 1e6, 2), round(c.macs / 1e9, 2)) == (25.56, 4.09)
    c = _cost("mobilenetv2", "imagenet")
    assert round(c.params / 1e6, 2) == 3.50
    # reported as 300.79 M; this counter lands 7*7*320 MACs lower (see notes)
    assert abs(c.macs / 1e6 - 300.79) < 0.03


def test_unsupported_pair():
    with pytest.raises(zoo.ArchitectureError):
        zoo.build_architecture("mobilenetv2", "cifar")
    with pytest.raises(zoo.ArchitectureError):
        zoo.build_architecture("alexnet", "imagenet")


def test_single_conv_macs():
    g = ModelGraph(input_spec=(64, 56, 56))
    g.add("c", "Conv", INPUT, ConvSpec(np.zeros((64, 64, 3, 3), np.float32), None, (1, 1), (1, 1)))
    assert count_cost(g).macs == 115_605_504
    assert count_cost(g).params == 64 * 64 * 9


def test_bn_running_stats_are_not_params():
    g = ModelGraph(input_spec=(4, 8, 8))
    g.add("c", "Conv", INPUT, ConvSpec(np.zeros((6, 4, 1, 1), np.float32)))
    g.add("bn", "BN", "c", BNSpec.fresh(6))
    assert count_cost(g).params == 24 + 12


def test_builders_are_deterministic():
    a = zoo.build_architecture("resnet56", "cifar", seed=3)
    b = zoo.build_architecture("resnet56", "cifar", seed=3)
    c = zoo.build_architecture("resnet56", "cifar", seed=4)
    assert graphs_equal(a, b)
    assert not graphs_equal(a, c)


def test_stage_tags_resnet34():
    g = zoo.build_architecture("resnet34", "imagenet")
    blocks = g.blocks()
    assert [sum(t.stage == s for t in blocks) for s in (1, 2, 3, 4)] == [3, 4, 6, 3]
    assert all((t.role == "first") == (t.block == 1) for t in blocks)
    assert "stem.conv" not in g.block_tags


def test_blocktag_parse():
    t = BlockTag.parse("2.3")
    assert (t.stage, t.block, t.label) == (2, 3, "2.3")


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


def test_add_channel_mismatch_names_the_add():
    g = ModelGraph(input_spec=(3, 8, 8))
    g.add("a", "Conv", INPUT, ConvSpec(np.zeros((64, 3, 1, 1), np.float32)))
    g.add("b", "Conv", INPUT, ConvSpec(np.zeros((128, 3, 1, 1), np.float32)))
    g.add("sum", "Add", ("a", "b"))
    problems = validate_graph(g)
    assert any("sum" in v.nodes and v.rule == "channel-compat" for v in problems)


def test_cycle_detected():
    g = ModelGraph(input_spec=(3, 8, 8))
    g.add("a", "ReLU", INPUT)
    g.add("b", "ReLU", "a")
    g.nodes["a"].inputs = ("b",)
    assert any(v.rule == "acyclic" for v in validate_graph(g))


def test_two_sinks_and_bad_tags():
    g = ModelGraph(input_spec=(3, 8, 8))
    g.add("a", "ReLU", INPUT)
    g.add("b", "ReLU", INPUT)
    g.block_tags["a"] = BlockTag(1, 2, "inner")
    rules = {v.rule for v in validate_graph(g)}
    assert "single-sink" in rules and "block-tag" in rules


def test_count_cost_rejects_invalid():
    g = ModelGraph(input_spec=(3, 8, 8))
    g.add("a", "Conv", INPUT, ConvSpec(np.zeros((4, 5, 1, 1), np.float32)))
    with pytest.raises(GraphError):
        count_cost(g)


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------


def test_zero_batch_bias_free_relu_net():
    g = ModelGraph(input_spec=(3, 8, 8))
    r = np.random.default_rng(0)
    g.add("c1", "Conv", INPUT, ConvSpec(r.normal(size=(4, 3, 3, 3)).astype(np.float32), None, (1, 1), (1, 1)))
    g.add("r1", "ReLU", "c1")
    g.add("p", "GlobalAvgPool", "r1")
    g.add("f", "Flatten", "p")
    g.add("fc", "FC", "f", FCSpec(r.normal(size=(5, 4)).astype(np.float32), None))
    logits, _ = engine.forward(g, np.zeros((2, 3, 8, 8), np.float32))
    assert logits.shape == (2, 5) and not logits.any()


def test_eval_forward_is_deterministic(rng):
    g = toy_resnet()
    x = rng.standard_normal((3, 3, 32, 32)).astype(np.float32)
    a, ta = engine.forward(g, x, taps=["s2.b1.relu"])
    b, tb = engine.forward(g, x, taps=["s2.b1.relu"])
    assert np.array_equal(a, b) and np.array_equal(ta["s2.b1.relu"], tb["s2.b1.relu"])


def test_forward_rejects_bad_shape_and_taps(rng):
    g = toy_resnet()
    with pytest.raises(ValueError):
        engine.forward(g, np.zeros((1, 3, 16, 16), np.float32))
    with pytest.raises(KeyError):
        engine.forward(g, np.zeros((1, 3, 32, 32), np.float32), taps=["nope"])


def test_train_mode_updates_running_stats(rng):
    g = toy_resnet()
    g.mode = "train"
    before = g.nodes["stem.bn"].params.running_mean.copy()
    engine.forward(g, rng.standard_normal((4, 3, 32, 32)).astype(np.float32))
    assert not np.array_equal(before, g.nodes["stem.bn"].params.running_mean)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    g = zoo.build_architecture("resnet56", "cifar", seed=7)
    save_checkpoint(g, tmp_path / "ck")
    h = load_checkpoint(tmp_path / "ck")
    assert graphs_equal(g, h)
    assert count_cost(h) == count_cost(g)


def test_checkpoint_round_trip_with_adaptors_and_factor(tmp_path):
    g = toy_resnet()
    g, _ = surgery.insert_channel_adaptors(g, "s1.b1.bn1", 4)
    m = surgery.magnitude_mask(g.nodes["s2.b2.conv1"].params.weight, 0.5)
    g, _ = surgery.insert_unstructured_adaptor(g, "s2.b2.conv1", m)
    save_checkpoint(g, tmp_path / "ck")
    h = load_checkpoint(tmp_path / "ck")
    assert graphs_equal(g, h)
    x = np.ones((1, 3, 32, 32), np.float32)
    assert np.array_equal(engine.forward(g, x)[0], engine.forward(h, x)[0])


def test_truncated_blob(tmp_path):
    g = toy_resnet()
    save_checkpoint(g, tmp_path / "ck")
    blob = tmp_path / "ck" / "stem.conv.weight.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="length"):
        load_checkpoint(tmp_path / "ck")


def test_future_version(tmp_path):
    g = toy_resnet()
    save_checkpoint(g, tmp_path / "ck")
    man = tmp_path / "ck" / "manifest.json"
    d = json.loads(man.read_text())
    d["format_version"] = 99
    man.write_text(json.dumps(d))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ck")


def test_non_finite_rejected(tmp_path):
    g = toy_resnet()
    g.nodes["fc"].params.weight[0, 0] = np.nan
    with pytest.raises(CheckpointError):
        save_checkpoint(g, tmp_path / "ck")


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**16), c=st.integers(1, 6), k=st.sampled_from([1, 3]))
def test_checkpoint_property(tmp_path_factory, seed, c, k):
    r = np.random.default_rng(seed)
    g = ModelGraph(input_spec=(2, 5, 5))
    g.add("c", "Conv", INPUT, ConvSpec(r.normal(size=(c, 2, k, k)).astype(np.float32), r.normal(size=c).astype(
        np.float32), (1, 1), (k // 2, k // 2)))
    g.add("bn", "BN", "c", BNSpec(*(r.uniform(0.5, 1, c).astype(np.float32) for _ in range(4))))
    path = tmp_path_factory.mktemp("ck")
    save_checkpoint(g, path / "x")
    assert graphs_equal(g, load_checkpoint(path / "x"))
