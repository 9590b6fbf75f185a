import numpy as np
import pytest

from tinyprune import engine, recovery, surgery, tinyset, zoo
from tinyprune.checkpoint import graphs_equal
from tinyprune.ir import INPUT, FCSpec, ModelGraph
from tinyprune.recovery import FinetuneConfig, MimicConfig, MimicJob, RecoveryError
from tinyprune.surgery import CompressionPlan

from conftest import toy_resnet

FAST = MimicConfig(max_epochs=15, patience=3, lr=1e-3)


def _data(n=24, seed=0, labeled=True):
    src = tinyset.synthetic_shapes(5, seed=seed)
    ts = tinyset.sample_tinyset(src, "random_n", n, seed)
    return ts if labeled else tinyset.TinySet(ts.images, None, ts.recipe)


def _tap_mse(teacher, student, taps, x):
    tt = engine.run(teacher, x, outputs=[t for t, _ in taps], train_bn=set(), update_stats=False)
    ss = engine.run(student, x, outputs=[s for _, s in taps], train_bn=set(), update_stats=False)
    return sum(float(np.mean((ss[s].astype(np.float64) - tt[t]) ** 2)) for t, s in taps)


# --------------------------------------------------------------------------
# mimic jobs
# --------------------------------------------------------------------------


def test_zero_loss_fixed_point():
    g = toy_resnet()
    h, ads = surgery.insert_channel_adaptors(g, "s2.b2.bn1", 16, init="identity")
    job = MimicJob.from_adaptors(g, h, ads)
    before = [a.weight.copy() for a in ads]
    res = recovery.train_adaptors(job, _data(), FAST)
    assert res.initial_loss == 0.0 and res.epochs == 0
    assert all(np.array_equal(a.weight, b) for a, b in zip(ads, before))


def test_block_drop_initial_loss_is_vanilla_tap_mse():
    g = toy_resnet()
    h, ads = surgery.insert_block_adaptors(g, "2.2")
    job = MimicJob.from_adaptors(g, h, ads)
    data = _data()
    vanilla = surgery.drop_block(g, "2.2")
    expect = _tap_mse(g, vanilla, job.taps, data.images)
    assert abs(recovery.mimic_loss(job, data) - expect) < 1e-6
    res = recovery.train_adaptors(job, data, MimicConfig(max_epochs=0))
    assert abs(res.initial_loss - expect) < 1e-6


def test_channel_select_initial_loss_is_pruned_tap_mse():
    g = toy_resnet()
    h, ads = surgery.insert_channel_adaptors(g, "s2.b2.bn1", 8)
    job = MimicJob.from_adaptors(g, h, ads)
    keep = surgery.select_keep_channels(g.nodes["s2.b2.conv1"].params, 8)
    pruned = surgery.prune_channels(g, "s2.b2.bn1", keep)
    data = _data()
    assert abs(recovery.mimic_loss(job, data) - _tap_mse(g, pruned, job.taps, data.images)) < 1e-6


def test_training_bookkeeping_and_isolation():
    g = toy_resnet()
    h, ads = surgery.insert_block_adaptors(g, "2.2")
    job = MimicJob.from_adaptors(g, h, ads)
    data = _data()
    frozen = {nid: n.params.weight.copy() for nid, n in h.nodes.items() if n.kind in ("Conv", "FC")
              and nid not in h.adaptors}
    res = recovery.train_adaptors(job, data, FAST)
    assert res.epochs >= 1 and res.best_loss <= res.initial_loss
    assert res.best_loss == min(res.loss_trace)
    assert abs(recovery.mimic_loss(job, data) - res.best_loss) < 1e-9
    for nid, w in frozen.items():
        assert np.array_equal(h.nodes[nid].params.weight, w)
    merged = surgery.merge_adaptors(h)
    x = np.random.default_rng(0).standard_normal((100, 3, 32, 32)).astype(np.float32)
    assert np.max(np.abs(engine.forward(merged, x)[0] - engine.forward(h, x)[0])) < 1e-4


def test_batch_is_clamped_to_tiny_set():
    g = toy_resnet()
    h, ads = surgery.insert_block_adaptors(g, "1.2")
    res = recovery.train_adaptors(MimicJob.from_adaptors(g, h, ads), _data(n=5), MimicConfig(max_epochs=2))
    assert res.epochs == 2


def test_job_validation():
    g = toy_resnet()
    h, ads = surgery.insert_block_adaptors(g, "1.2")
    job = MimicJob(g, h, ["ghost"], surgery.collect_taps(ads))
    with pytest.raises(RecoveryError):
        job.validate()
    with pytest.raises(RecoveryError):
        MimicJob(g, h, [a.id for a in ads], [("s1.b1.conv1", "s2.b1.conv1")]).validate()
    with pytest.raises(RecoveryError):
        recovery.train_adaptors(MimicJob.from_adaptors(g, h, ads), np.zeros((0, 3, 32, 32), np.float32))


def test_mimic_gradient_matches_finite_differences():
    g = toy_resnet().astype(np.float64)
    h, ads = surgery.insert_channel_adaptors(g, "s2.b2.bn1", 10)
    job = MimicJob.from_adaptors(g, h, ads)
    x = np.random.default_rng(1).standard_normal((4, 3, 32, 32))
    plan = recovery._Plan(g, h, job.taps, {a.id for a in ads})
    tv = plan.teacher(g, x)

    def loss():
        return recovery._tap_loss(plan, plan.student(h, x, tv, set(), False).values, tv)[0]

    tr = plan.student(h, x, tv, set(), True)
    _, seeds = recovery._tap_loss(plan, tr.values, tv)
    keys = [a.param for a in ads]
    grads = engine.backward(tr, seeds, keys)
    for key in keys:
        w = engine.get_param(h, key).reshape(-1)
        for i in np.random.default_rng(2).choice(w.size, 5, replace=False):
            old = w[i]
            w[i] = old + 1e-6
            up = loss()
            w[i] = old - 1e-6
            down = loss()
            w[i] = old
            num = (up - down) / 2e-6
            ana = grads[key].reshape(-1)[i]
            assert abs(num - ana) <= 1e-3 * max(abs(num), 1e-8)


# --------------------------------------------------------------------------
# run_practise
# --------------------------------------------------------------------------


def test_resnet34_plan_c_runs_three_jobs():
    g = zoo.build_architecture("resnet34", "imagenet")
    data = tinyset.synth_gaussian(2, [3, 224, 224], 0)
    plan = CompressionPlan("block_drop", blocks=zoo.PLANS["resnet34"]["C"])
    out, rep = recovery.run_practise(g, plan, data, MimicConfig(max_epochs=0))
    assert rep["jobs"] == 3 and [s["site"] for s in rep["sites"]] == ["1.2", "2.2", "3.2"]
    assert not out.adaptors


def test_all_frozen_is_vanilla():
    g = toy_resnet()
    plan = CompressionPlan("block_drop", blocks=["1.2", "2.2"])
    out, rep = recovery.run_practise(g, plan, _data(), FAST, freeze_front_k=2)
    assert rep["jobs"] == 0
    vanilla = surgery.drop_block(surgery.drop_block(g, "1.2"), "2.2")
    x = _data().images
    np.testing.assert_allclose(engine.forward(out, x)[0], engine.forward(vanilla, x)[0], atol=1e-5)
    assert graphs_equal(surgery.apply_vanilla(g, plan), out)


def test_last_stage_drop_has_no_merge_target():
    with pytest.raises(surgery.SiteNotPrunable):
        surgery.insert_block_adaptors(toy_resnet(), "3.2")


def test_empty_plan_is_identity():
    g = toy_resnet()
    out, rep = recovery.run_practise(g, CompressionPlan("block_drop"), _data(), FAST)
    assert graphs_equal(out, g) and rep["jobs"] == 0


def test_run_practise_is_deterministic_and_isolated():
    g = toy_resnet()
    plan = CompressionPlan("filter_level", keep_counts={"s2.b2.bn1": 8, "s1.b1.relu1": 4})
    data = _data(labeled=False)  # labels are never needed
    a, rep = recovery.run_practise(g, plan, data, FAST)
    b, _ = recovery.run_practise(g, plan, data, FAST)
    assert graphs_equal(a, b)
    assert rep["jobs"] == 2 and [s["site"] for s in rep["sites"]] == ["s1.b1.relu1", "s2.b2.bn1"]
    touched = {"s1.b1.conv1", "s1.b1.conv2", "s2.b2.conv1", "s2.b2.conv2"}
    for nid, n in a.nodes.items():
        if n.kind in ("Conv", "FC") and nid not in touched:
            assert np.array_equal(n.params.weight, g.nodes[nid].params.weight), nid


@pytest.mark.parametrize("plan", [
    CompressionPlan("low_rank", convs=["s2.b2.conv1"], energy_threshold=0.6),
    CompressionPlan("unstructured", convs=["s3.b2.conv2"], sparsity=0.9),
])
def test_other_schemes_improve_or_hold(plan):
    g = toy_resnet()
    out, rep = recovery.run_practise(g, plan, _data(), FAST)
    site = rep["sites"][0]
    assert site["best_loss"] <= site["initial_loss"]
    assert not out.adaptors
    if plan.scheme == "unstructured":
        w = out.nodes["s3.b2.conv2"].params.weight
        m = surgery.magnitude_mask(g.nodes["s3.b2.conv2"].params.weight, 0.9)
        assert np.all(w[m == 0] == 0)


# --------------------------------------------------------------------------
# finetuning and evaluation
# --------------------------------------------------------------------------


def test_kd_loss_parts():
    g = toy_resnet()
    data = _data()
    total, ce, mse = recovery.kd_loss(g, g, data.images, data.labels, 100.0)
    assert mse == 0.0 and total == ce
    s = surgery.drop_block(g, "2.2")
    total, ce, mse = recovery.kd_loss(s, g, data.images, data.labels, 0.0)
    assert total == ce and mse > 0


def test_beta_zero_ignores_teacher():
    g = toy_resnet()
    s = surgery.drop_block(g, "2.2")
    data = _data()
    cfg = FinetuneConfig(beta=0.0, epochs=2, lr=1e-2)
    a, _ = recovery.finetune_kd(s, g, data, cfg)
    b, _ = recovery.finetune_kd(s, toy_resnet(seed=5), data, cfg)
    assert graphs_equal(a, b)
    c, _ = recovery.finetune_kd(s, g, data, FinetuneConfig(beta=100.0, epochs=2, lr=1e-2))
    assert not graphs_equal(a, c)


def test_finetune_errors():
    g = toy_resnet()
    with pytest.raises(RecoveryError):
        recovery.finetune_kd(g, g, _data(labeled=False))
    with pytest.raises(ValueError):
        FinetuneConfig(beta=-1)


def test_finetune_leaves_student_untouched():
    g = toy_resnet()
    s = surgery.drop_block(g, "2.2")
    before = s.copy()
    recovery.finetune_kd(s, g, _data(), FinetuneConfig(epochs=1))
    assert graphs_equal(s, before)


def _linear_classifier(w, b=None):
    g = ModelGraph(input_spec=(w.shape[1], 1, 1))
    g.add("flat", "Flatten", INPUT)
    g.add("fc", "FC", "flat", FCSpec(w.astype(np.float32), None if b is None else b.astype(np.float32)))
    return g


def test_evaluate_one_hot_and_constant():
    y = np.repeat(np.arange(10), 3)
    x = np.eye(10, dtype=np.float32)[y][:, :, None, None]
    assert recovery.evaluate(_linear_classifier(np.eye(10)), (x, y)) == (100.0, 100.0)
    top1, top5 = recovery.evaluate(_linear_classifier(np.zeros((10, 10))), (x, y))
    assert top1 == pytest.approx(100 * np.mean(y == 0)) and top5 == pytest.approx(50.0)


def test_evaluate_top5_contains_top1():
    g = toy_resnet()
    data = _data()
    top1, top5 = recovery.evaluate(g, data)
    assert top5 >= top1
    with pytest.raises(RecoveryError):
        recovery.evaluate(g, _data(labeled=False))
