import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridsod.data import LabelKind, Sample, partition, quantize_map
from hybridsod.exceptions import ConfigError, MisuseError, PipelineStateError, TrainingAborted
from hybridsod.orchestrator import (CredibilityState, EventLog, Pipeline, build_schedule,
                                    credibility_gate, real_count_at)
from hybridsod.rnet import RefinementNetwork
from hybridsod.store import RunStore, read_gray, to_uint8
from hybridsod.training import OptimizerPolicy, epoch_loop, learning_rate, make_batches

from conftest import ScriptedNet, tiny_config, tiny_data


# ---------------------------------------------------------------- schedule

def test_schedule_g10_golden():
    s = build_schedule(10, 1000)
    assert len(s) == 5
    assert [p.rnet_predict_group for p in s] == [2, 4, 6, 8, 10]
    assert [p.snet_predict_group for p in s] == [3, 5, 7, 9, None]
    assert s[0].rnet_train_groups == (1,) and s[0].snet_train_groups == (1, 2)
    assert s[1].rnet_train_groups == (1, 3) and s[1].snet_train_groups == (1, 2, 4)
    assert s[-1].snet_train_groups == (1, 2, 4, 6, 8, 10)
    assert [(p.real_count, p.contaminated_count) for p in s] == [
        (500, 500), (600, 400), (700, 300), (800, 200), (900, 100)]


@pytest.mark.parametrize("groups, plans", [(5, 3), (10, 5), (15, 8), (2, 1), (3, 2), (4, 2)])
def test_schedule_plan_counts(groups, plans):
    assert len(build_schedule(groups, 100)) == plans


def test_schedule_errors():
    with pytest.raises(ConfigError):
        build_schedule(1, 10)
    with pytest.raises(ConfigError):
        build_schedule(4, 10, mode="M2")


def test_real_count_progression():
    assert [real_count_at(t, 15) for t in range(1, 8)] == [8, 10, 12, 14, 15, 15, 15]
    assert real_count_at(3, 15, contaminate=False) == 15
    assert real_count_at(1, 1) == 1


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 40), st.integers(1, 2000))
def test_schedule_invariants(groups, g1):
    sched = build_schedule(groups, g1)
    assert len(sched) == math.ceil(groups / 2)
    predicted = [g for p in sched for g in (p.rnet_predict_group, p.snet_predict_group)
                 if g is not None]
    assert sorted(predicted) == list(range(2, groups + 1))
    consumed = {1}
    last_s = None
    reals = []
    for p in sched:
        assert 1 in p.rnet_train_groups and 1 in p.snet_train_groups
        assert p.real_count + p.contaminated_count == g1
        # training only ever uses groups that already hold labels
        assert set(p.rnet_train_groups) <= consumed
        assert p.rnet_train_groups == ((1,) if last_s is None else (1, last_s))
        for g in (p.rnet_predict_group, p.snet_predict_group):
            assert g is None or g not in consumed
        if p.rnet_predict_group:
            consumed.add(p.rnet_predict_group)
        assert set(p.snet_train_groups) <= consumed
        if p.snet_predict_group:
            consumed.add(p.snet_predict_group)
        last_s = p.snet_predict_group
        reals.append(p.real_count)
    assert reals == sorted(reals) and reals[0] == math.ceil(g1 / 2)


def test_schedule_no3_and_no4_variants():
    base, no3, no4 = (build_schedule(10, 1000, m) for m in ("full", "No3", "No4"))
    assert no3[-1].snet_train_groups == tuple(range(1, 11))
    assert no3.plans[:-1] == base.plans[:-1]
    assert all(p.contaminated_count == 0 and p.real_count == 1000 for p in no4)


# ---------------------------------------------------------------- optimizer policy

def test_learning_rate_policy():
    pol = OptimizerPolicy()
    assert learning_rate(pol, 0, step=1000) == pytest.approx(1e-4)
    assert learning_rate(pol, 10, step=1000) == pytest.approx(1e-5)
    assert learning_rate(pol, 20, step=1000) == pytest.approx(1e-6)
    assert learning_rate(pol, 0, step=250, iteration=1) == pytest.approx(0.5e-4)
    assert learning_rate(pol, 0, step=0, iteration=1) == 0.0
    # warmup belongs to the first iteration only
    assert learning_rate(pol, 0, step=250, iteration=2) == pytest.approx(1e-4)


def test_optimizer_policy_validation():
    with pytest.raises(ConfigError):
        OptimizerPolicy(lr=0)
    with pytest.raises(ConfigError):
        OptimizerPolicy(momentum=1.0)


def test_epoch_loop_orders_pseudo_before_real():
    net = ScriptedNet()
    rng = np.random.default_rng(0)
    pseudo = make_batches([(np.zeros((2, 2)), np.zeros((2, 2)))] * 5, 2, rng, augment=False)
    real = make_batches([(np.ones((2, 2)), np.ones((2, 2)))] * 3, 2, rng, augment=False)
    stats = epoch_loop(net, pseudo, real, OptimizerPolicy(warmup_steps=0), 0)
    assert stats.order == ["pseudo"] * 3 + ["real"] * 2
    assert stats.pseudo_batches == 3 and stats.real_batches == 2
    assert stats.step_end - stats.step_start == 5 == net.steps


def test_epoch_loop_misuse_and_abort():
    with pytest.raises(MisuseError):
        epoch_loop(ScriptedNet(), [], [], OptimizerPolicy(), 0)

    class NaNNet(ScriptedNet):
        def train_step(self, *batch, lr):
            return float("nan")

    with pytest.raises(TrainingAborted, match="non-finite"):
        epoch_loop(NaNNet(), [(np.zeros((1, 2, 2)),)], [], OptimizerPolicy(), 3)


def test_make_batches_shapes_and_determinism():
    pool = [(np.full((3, 3), i, float), np.full((3, 3), -i, float)) for i in range(7)]
    a = make_batches(pool, 3, np.random.default_rng(5))
    b = make_batches(pool, 3, np.random.default_rng(5))
    assert [x[0].shape for x in a] == [(3, 3, 3), (3, 3, 3), (1, 3, 3)]
    assert all(np.array_equal(x, y) for ba, bb in zip(a, b) for x, y in zip(ba, bb))
    # augmentation transforms every array of one sample identically
    for batch in a:
        assert np.array_equal(batch[0], -batch[1])


# ---------------------------------------------------------------- credibility gate

def _gate(state, value, iteration, network="snet"):
    return credibility_gate({"v": value}, network, [object()], state, iteration,
                            lambda params, val: params["v"])


def test_gate_unit_cases():
    state = CredibilityState()
    chosen, state, e = _gate(state, 0.08, 1)
    assert e["decision"] == "init" and chosen == {"v": 0.08}
    chosen, state, e = _gate(state, 0.05, 2)
    assert e["decision"] == "accept" and chosen == {"v": 0.05}
    assert state.best["snet"].mae == 0.05
    chosen, state, e = _gate(state, 0.09, 3)
    assert e["decision"] == "reject" and chosen == {"v": 0.05}
    chosen, state, e = _gate(state, 0.05, 4)
    assert e["decision"] == "reject" and chosen == {"v": 0.05}  # tie keeps the incumbent
    assert state.best["snet"].iteration == 2
    assert state.best_mae_history("snet") == [0.08, 0.05, 0.05, 0.05]


def test_gate_first_iteration_always_accepts_and_networks_are_separate():
    state = CredibilityState()
    _gate(state, 0.5, 1, "rnet")
    _, state, e = _gate(state, 0.9, 1, "snet")
    assert e["decision"] == "init"
    assert state.best["rnet"].mae == 0.5 and state.best["snet"].mae == 0.9


def test_gate_requires_validation_set():
    with pytest.raises(ConfigError):
        credibility_gate({}, "rnet", [], CredibilityState(), 1, lambda p, v: 0.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=20))
def test_gate_best_history_non_increasing(values):
    state = CredibilityState()
    for it, v in enumerate(values, start=1):
        _gate(state, v, it)
    hist = state.best_mae_history("snet")
    assert all(b <= a for a, b in zip(hist, hist[1:]))
    assert hist[-1] == (min(values[1:] + [values[0]]) if len(values) > 1 else values[0])


# ---------------------------------------------------------------- pipeline traces

def _scripted_pipeline(r_script=(0.5,), s_script=(0.5,), mode="full", store=None, **data_kw):
    samples, part, val = tiny_data(**data_kw)
    cfg = tiny_config(mode=mode, num_groups=len(part), num_real=len(part.group(1)))
    rnet, snet = ScriptedNet(r_script, with_coarse=True), ScriptedNet(s_script)
    return Pipeline(cfg, samples, part, val, rnet=rnet, snet=snet, store=store)


def _trace(records):
    return [(r["iteration"], r["phase"], r["network"],
             tuple(r["group"]) if isinstance(r["group"], list) else r["group"], r["action"])
            for r in records]


def test_golden_trace_g4():
    pipe = _scripted_pipeline()
    result = pipe.run()
    assert _trace(result.events) == [
        (1, "train", "rnet", (1,), "start"),
        (1, "train", "rnet", (1,), "epoch"),
        (1, "gate", "rnet", None, "init"),
        (1, "predict", "rnet", 2, "predict"),
        (1, "train", "snet", (1, 2), "start"),
        (1, "train", "snet", (1, 2), "epoch"),
        (1, "gate", "snet", None, "init"),
        (1, "predict", "snet", 3, "predict"),
        (1, "run", None, None, "iteration_done"),
        (2, "train", "rnet", (1, 3), "start"),
        (2, "train", "rnet", (1, 3), "epoch"),
        (2, "gate", "rnet", None, "reject"),
        (2, "predict", "rnet", 4, "predict"),
        (2, "train", "snet", (1, 2, 4), "start"),
        (2, "train", "snet", (1, 2, 4), "epoch"),
        (2, "gate", "snet", None, "reject"),
        (2, "run", None, None, "iteration_done"),
        (None, "run", "snet", None, "final"),
    ]
    assert [r["time"] for r in result.events] == list(range(len(result.events)))
    counts = [r["metric"] for r in result.events if r["action"] == "start"]
    assert counts == [{"real": 5, "contaminated": 5, "pseudo": 0},
                      {"real": 5, "contaminated": 5, "pseudo": 10},
                      {"real": 6, "contaminated": 4, "pseudo": 10},
                      {"real": 6, "contaminated": 4, "pseudo": 20}]
    assert sorted(pipe.pseudo) == sorted(pipe.partition.group(2) + pipe.partition.group(3)
                                         + pipe.partition.group(4))
    assert result.completed_iterations == 2


def test_each_group_labeled_once_by_the_planned_network():
    pipe = _scripted_pipeline(num_groups=6, n=60)
    result = pipe.run()
    predicted = [(r["network"], r["group"]) for r in result.events if r["action"] == "predict"]
    assert predicted == [("rnet", 2), ("snet", 3), ("rnet", 4), ("snet", 5), ("rnet", 6)]


def _val_mae_for_level(pipe, level):
    pipe.rnet.level = np.array([level])
    return pipe.validation_mae("rnet")


def _levels_by_quality(pipe):
    levels = [0.0, 0.4, 0.8, 1.2, 1.6, 2.0]
    return sorted(levels, key=lambda v: _val_mae_for_level(pipe, v))


def test_gate_rejection_keeps_previous_model_and_pseudo_bytes(tmp_path):
    probe = _scripted_pipeline()
    best, *_, worst = _levels_by_quality(probe)
    store = RunStore(tmp_path)
    pipe = _scripted_pipeline(r_script=(best, worst), store=store)
    result = pipe.run()
    gates = [r for r in result.events if r["phase"] == "gate" and r["network"] == "rnet"]
    assert [g["action"] for g in gates] == ["init", "reject"]
    assert gates[1]["metric"]["candidate_mae"] > gates[1]["metric"]["best_mae"]
    pred4 = [r for r in result.events if r["action"] == "predict" and r["group"] == 4][0]
    assert pred4["metric"]["model_iteration"] == 1

    reference = ScriptedNet((best,), with_coarse=True)
    reference.reset_optimizer()
    pipe.rnet = reference
    ids = pipe.partition.group(4)
    maps = pipe._predict_maps("rnet", [pipe.samples[s] for s in ids])
    for sid, m in zip(ids, maps):
        assert to_uint8(pipe.pseudo[sid]).tobytes() == to_uint8(quantize_map(m)).tobytes()
        assert to_uint8(read_gray(store.pseudo_label_path(sid))).tobytes() == \
            to_uint8(quantize_map(m)).tobytes()


def test_gate_accepts_improvement_and_history_non_increasing():
    probe = _scripted_pipeline()
    best, *_, worst = _levels_by_quality(probe)
    pipe = _scripted_pipeline(r_script=(worst, best))
    result = pipe.run()
    gates = [r for r in result.events if r["phase"] == "gate" and r["network"] == "rnet"]
    assert [g["action"] for g in gates] == ["init", "accept"]
    for net in ("rnet", "snet"):
        hist = result.credibility.best_mae_history(net)
        assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_real_network_regression_is_rejected(monkeypatch):
    samples, part, val = tiny_data()
    cfg = tiny_config()
    pipe = Pipeline(cfg, samples, part, val)
    original = Pipeline._train

    def sabotaged(self, net_name, iteration, *a, **kw):
        original(self, net_name, iteration, *a, **kw)
        if net_name == "rnet" and iteration == 2:
            state = self.rnet.get_state()
            rng = np.random.default_rng(0)
            self.rnet.set_state({k: (v + rng.normal(0, 5.0, v.shape)).astype(v.dtype)
                                 if v.dtype.kind == "f" else v for k, v in state.items()})

    monkeypatch.setattr(Pipeline, "_train", sabotaged)
    result = pipe.run()
    gate2 = [r for r in result.events if r["phase"] == "gate" and r["network"] == "rnet"
             and r["iteration"] == 2][0]
    assert gate2["action"] == "reject"
    ref = RefinementNetwork(pipe.rnet.config)
    ref.set_state(result.credibility.best["rnet"].params)
    pipe.rnet = ref
    ids = part.group(4)
    maps = pipe._predict_maps("rnet", [pipe.samples[s] for s in ids])
    assert all(np.array_equal(pipe.pseudo[s], quantize_map(m)) for s, m in zip(ids, maps))


def test_missing_pseudo_labels_is_a_state_error():
    pipe = _scripted_pipeline()
    with pytest.raises(PipelineStateError, match="no pseudo labels"):
        pipe.run_iteration(pipe.schedule()[1])


def test_partition_must_match_samples():
    samples, part, val = tiny_data()
    with pytest.raises(PipelineStateError):
        Pipeline(tiny_config(), samples[:-1], part, val, rnet=ScriptedNet(), snet=ScriptedNet())


def test_nan_loss_aborts_the_run():
    class NaNNet(ScriptedNet):
        def train_step(self, *batch, lr):
            return float("nan")

    samples, part, val = tiny_data()
    pipe = Pipeline(tiny_config(), samples, part, val, rnet=NaNNet(), snet=ScriptedNet())
    with pytest.raises(TrainingAborted):
        pipe.run()


def test_stop_after_and_restore(tmp_path):
    store = RunStore(tmp_path)
    first = _scripted_pipeline(store=store)
    part_result = first.run(stop_after=1)
    assert part_result.completed_iterations == 1 and part_result.final_val_mae is None
    second = _scripted_pipeline(store=store)
    second.events = EventLog(store.events)
    assert second.restore() and second.completed == 1
    assert sorted(second.pseudo) == sorted(first.pseudo)
    done = second.run()
    assert done.completed_iterations == 2 and done.final_val_mae is not None
    assert (store.checkpoints / "snet_final.ckpt").exists()


# ---------------------------------------------------------------- ablation modes

def _starts(events):
    return [r for r in events if r["action"] == "start"]


def test_ablation_m1_coarse_then_real():
    result = _scripted_pipeline(mode="M1").run()
    starts = _starts(result.events)
    assert [(s["network"], s["phase"]) for s in starts] == [("snet", "train"), ("snet", "finetune")]
    assert starts[0]["metric"] == {"coarse": 30} and starts[1]["metric"] == {"real": 10}
    assert not [r for r in result.events if r["network"] == "rnet" or r["phase"] == "gate"]


def test_ablation_m2_trains_on_exactly_the_real_samples():
    rng = np.random.default_rng(0)
    samples = [Sample(f"q{i:04d}", rng.random((4, 4, 3)), (rng.random((4, 4)) > 0.5) * 1.0,
                      LabelKind.REAL if i < 1000 else LabelKind.COARSE) for i in range(2000)]
    part = partition(samples, 10, 1000, 0)
    snet = ScriptedNet()
    cfg = tiny_config(mode="M2", num_groups=10, num_real=1000).replace(
        optimizer={"batch_size": 8}, augment=False)
    result = Pipeline(cfg, samples, part, samples[:4], rnet=ScriptedNet(), snet=snet).run()
    starts = _starts(result.events)
    assert len(starts) == 1 and starts[0]["metric"] == {"real": 1000}
    assert sum(shape[0][0] for shape in snet.batch_shapes) == 1000
    assert not [r for r in result.events if r["network"] == "rnet"]
    assert not [r for r in result.events if r["action"] == "predict"]


def test_ablation_m3_single_refine_pass():
    result = _scripted_pipeline(mode="M3").run()
    starts = _starts(result.events)
    assert [s["phase"] for s in starts] == ["train", "retrain"]
    assert starts[1]["group"] == [1, 2, 3, 4]
    preds = [(r["network"], r["group"]) for r in result.events if r["action"] == "predict"]
    assert preds == [("snet", 2), ("snet", 3), ("snet", 4)]
    assert not [r for r in result.events if r["network"] == "rnet"]


def test_ablation_no1_without_alternation():
    result = _scripted_pipeline(mode="No1").run()
    starts = _starts(result.events)
    assert [s["network"] for s in starts] == ["rnet", "snet"]
    preds = [(r["network"], r["group"]) for r in result.events if r["action"] == "predict"]
    assert preds == [("rnet", 2), ("rnet", 3), ("rnet", 4)]
    assert {r["iteration"] for r in result.events if r["iteration"]} == {1}
    assert not [r for r in result.events if r["phase"] == "gate"]


def test_ablation_no2_gate_disabled():
    full = _scripted_pipeline().run()
    no2 = _scripted_pipeline(mode="No2").run()
    assert not [r for r in no2.events if r["phase"] == "gate"]
    assert [t for t in _trace(full.events) if t[1] != "gate"] == _trace(no2.events)


def test_ablation_no3_final_snet_on_all_groups():
    result = _scripted_pipeline(mode="No3").run()
    last = _starts(result.events)[-1]
    assert last["network"] == "snet" and last["group"] == [1, 2, 3, 4]
    full_last = _starts(_scripted_pipeline().run().events)[-1]
    assert full_last["group"] == [1, 2, 4]


def test_ablation_no4_without_contamination():
    result = _scripted_pipeline(mode="No4").run()
    for s in _starts(result.events):
        assert s["metric"]["contaminated"] == 0 and s["metric"]["real"] == 10


# ---------------------------------------------------------------- determinism

def _real_run(root):
    samples, part, val = tiny_data()
    store = RunStore(root)
    result = Pipeline(tiny_config(), samples, part, val, store=store).run()
    pngs = {p.name: p.read_bytes() for p in sorted(store.pseudo_labels.glob("*.png"))}
    return result, store.events.read_bytes(), pngs


def test_two_runs_with_same_seed_are_identical(tmp_path):
    a, log_a, png_a = _real_run(tmp_path / "a")
    b, log_b, png_b = _real_run(tmp_path / "b")
    assert log_a == log_b
    assert png_a == png_b and len(png_a) == 30
    assert a.final_val_mae == b.final_val_mae
