import numpy as np
import pytest

from qatkit import qat
from qatkit.data import synthetic_clusters
from qatkit.harness import ClassificationTask, train_float, ExperimentConfig
from qatkit.nn import Checkpoint, OptimizerConfig, build_network, make_optimizer
from qatkit.quantizer import (
    DegenerateGroupError,
    QuantizerSpec,
    StepSolverConfig,
    WeightGroup,
    optimize_step,
    quantize,
)


MLP = [
    {"kind": "fc", "in": 6, "out": 8, "name": "fc_in"},
    {"kind": "activation", "fn": "relu"},
    {"kind": "fc", "in": 8, "out": 3, "name": "fc_out"},
    {"kind": "softmax"},
]


def toy_task(seed=0):
    splits = synthetic_clusters(n_samples=300, n_classes=3, dim=6, seed=5, spread=0.6)
    return ClassificationTask(splits, MLP, batch_size=32, seed=seed)


def toy_float_ckpt(seed=0):
    net = build_network(MLP, np.random.default_rng(seed))
    return Checkpoint(layer_cfgs=MLP, params=net.get_params())


# -- schedules ---------------------------------------------------------------

class TestSchedules:
    def test_parse_round_trip(self):
        assert isinstance(qat.parse_schedule("direct"), qat.Direct)
        assert isinstance(qat.parse_schedule("conventional"), qat.ConventionalFixed)
        assert isinstance(qat.parse_schedule("adaptive"), qat.AdaptiveEveryEpoch)
        s = qat.parse_schedule("adaptive_fix2")
        assert isinstance(s, qat.AdaptiveFirstKThenFix) and s.k == 2
        g = qat.parse_schedule("gradual:6-2:3:conventional")
        assert (g.start_bits, g.end_bits, g.epochs_per_stage) == (6, 2, 3)
        assert isinstance(g.inner, qat.ConventionalFixed)
        with pytest.raises(ValueError):
            qat.parse_schedule("bogus")

    def test_adaptive_every_epoch_always_updates(self):
        for e in range(10):
            assert isinstance(qat.apply_schedule(qat.AdaptiveEveryEpoch(), e), qat.UpdateStep)

    def test_first_k_then_fix(self):
        s = qat.AdaptiveFirstKThenFix(k=1)
        decisions = [qat.apply_schedule(s, e) for e in (0, 1, 2)]
        assert isinstance(decisions[0], qat.UpdateStep)
        assert isinstance(decisions[1], qat.FreezeStep)
        assert isinstance(decisions[2], qat.FreezeStep)

    def test_conventional_always_freezes(self):
        for e in range(5):
            assert isinstance(qat.apply_schedule(qat.ConventionalFixed(), e), qat.FreezeStep)

    def test_gradual_bit_sequence(self):
        s = qat.Gradual(start_bits=6, end_bits=2, epochs_per_stage=2)
        bits = [s.bits_at(e) for e in range(10)]
        assert bits == [6, 6, 5, 5, 4, 4, 3, 3, 2, 2]
        drops = [
            d.new_bits
            for e in range(10)
            if isinstance(d := qat.apply_schedule(s, e), qat.DropBit)
        ]
        assert drops == [5, 4, 3, 2]

    def test_gradual_validation(self):
        with pytest.raises(ValueError):
            qat.Gradual(start_bits=2, end_bits=2, epochs_per_stage=1)
        with pytest.raises(ValueError):
            qat.Gradual(start_bits=6, end_bits=1, epochs_per_stage=1)


# -- shadow params -----------------------------------------------------------

class TestInitQuantization:
    def test_grid_master_recovered_exactly(self):
        master = {"a.W": np.array([[1.0, -2.0], [0.0, 2.0]]), "a.b": np.array([0.3])}
        groups = {"a": ["a.W"]}
        shadow = qat.init_quantization(master, groups, bits=3)
        assert shadow.specs["a"].step == pytest.approx(1.0, rel=1e-9)
        np.testing.assert_allclose(shadow.quantized["a.W"], master["a.W"], atol=1e-12)

    def test_symmetric_pair_two_bits(self):
        shadow = qat.init_quantization({"g.W": np.array([-1.0, 1.0])}, {"g": ["g.W"]}, 2)
        assert shadow.specs["g"].step == pytest.approx(1.0)

    def test_matches_direct_optimize_step(self):
        rng = np.random.default_rng(0)
        master = {"l1.W": rng.normal(size=(5, 4)), "l2.W": rng.laplace(size=(4, 3))}
        groups = {"l1": ["l1.W"], "l2": ["l2.W"]}
        shadow = qat.init_quantization(master, groups, bits=4)
        for gid, keys in groups.items():
            step, _ = optimize_step(WeightGroup(master[keys[0]].ravel(), gid), 15)
            assert shadow.specs[gid].step == pytest.approx(step, rel=1e-12)

    def test_degenerate_group_names_group(self):
        with pytest.raises(DegenerateGroupError, match="dead"):
            qat.init_quantization({"dead.W": np.zeros(4)}, {"dead": ["dead.W"]}, 2)

    def test_non_quantizable_shared_by_reference(self):
        master = {"a.W": np.array([1.0, -1.0]), "a.b": np.array([0.5])}
        shadow = qat.init_quantization(master, {"a": ["a.W"]}, 2)
        assert shadow.quantized["a.b"] is master["a.b"]

    def test_grid_membership(self):
        rng = np.random.default_rng(3)
        master = {"a.W": rng.normal(size=50)}
        shadow = qat.init_quantization(master, {"a": ["a.W"]}, 3)
        spec = shadow.specs["a"]
        mult = shadow.quantized["a.W"] / spec.step
        np.testing.assert_allclose(mult, np.round(mult), atol=1e-9)
        assert np.abs(mult).max() <= (spec.points - 1) / 2 + 1e-9


class TestRetrainEpoch:
    def _setup(self, seed=0):
        task = toy_task(seed)
        net = task.build_network(np.random.default_rng(seed))
        master = net.get_params()
        shadow = qat.init_quantization(master, net.quant_group_map(), 2)
        return task, net, shadow

    def test_zero_lr_leaves_shadow_unchanged(self):
        task, net, shadow = self._setup()
        before_master = {k: v.copy() for k, v in shadow.master.items()}
        before_q = {k: v.copy() for k, v in shadow.quantized.items()}
        opt = make_optimizer(OptimizerConfig(kind="sgd_nesterov", learning_rate=1.0))
        qat.retrain_epoch(shadow, net, task.batches("train", 0), opt, 0.0,
                          task.loss, qat.FreezeStep(), StepSolverConfig())
        for k in before_master:
            np.testing.assert_array_equal(shadow.master[k], before_master[k])
            np.testing.assert_array_equal(shadow.quantized[k], before_q[k])

    def test_freeze_keeps_specs(self):
        task, net, shadow = self._setup()
        before = dict(shadow.specs)
        opt = make_optimizer(OptimizerConfig())
        qat.retrain_epoch(shadow, net, task.batches("train", 0), opt, 0.01,
                          task.loss, qat.FreezeStep(), StepSolverConfig())
        assert shadow.specs == before

    def test_update_step_matches_independent_solver(self):
        task, net, shadow = self._setup()
        opt = make_optimizer(OptimizerConfig())
        qat.retrain_epoch(shadow, net, task.batches("train", 0), opt, 0.01,
                          task.loss, qat.UpdateStep(), StepSolverConfig())
        for gid in shadow.groups:
            step, _ = optimize_step(
                WeightGroup(shadow.group_vector(gid), gid), shadow.specs[gid].points
            )
            assert shadow.specs[gid].step == pytest.approx(step, rel=1e-8)
            for k in shadow.groups[gid]:
                np.testing.assert_allclose(
                    shadow.quantized[k],
                    quantize(shadow.master[k], shadow.specs[gid]), atol=0,
                )

    def test_master_never_on_grid_by_construction(self):
        # master receives float updates; quantized is always derived
        task, net, shadow = self._setup()
        opt = make_optimizer(OptimizerConfig())
        qat.retrain_epoch(shadow, net, task.batches("train", 0), opt, 0.01,
                          task.loss, qat.FreezeStep(), StepSolverConfig())
        gid = next(iter(shadow.groups))
        k = shadow.groups[gid][0]
        mult = shadow.master[k] / shadow.specs[gid].step
        assert not np.allclose(mult, np.round(mult))


# -- full runs ---------------------------------------------------------------

def _float_ckpt_for_toy(seed=0):
    cfg = ExperimentConfig(
        task="classification-vector",
        dataset={"kind": "clusters", "n_samples": 300, "classes": 3, "dim": 6,
                 "seed": 5, "spread": 0.6},
        network=MLP,
        float_training={"max_epochs": 15, "batch_size": 32,
                        "optimizer": {"kind": "sgd_nesterov", "learning_rate": 0.05,
                                      "lr_schedule": {"initial_lr": 0.05, "final_lr": 1e-4,
                                                      "decay_factor": 2.0, "patience_evals": 3}}},
        seeds=[seed],
    )
    ckpt, _ = train_float(cfg, seed)
    return ckpt


class TestRun:
    def retrain_cfg(self, schedule, bits=2, max_epochs=4, seed=0):
        return qat.RetrainConfig(
            schedule=schedule, bits=bits, seed=seed, max_epochs=max_epochs,
            optimizer=OptimizerConfig(
                kind="sgd_nesterov", learning_rate=0.02,
                lr_schedule={"initial_lr": 0.02, "final_lr": 1e-5,
                             "decay_factor": 2.0, "patience_evals": 4},
            ),
        )

    def test_direct_runs_zero_epochs(self):
        ckpt = _float_ckpt_for_toy()
        task = toy_task()
        shadow, record = qat.run(self.retrain_cfg("direct"), ckpt, task)
        assert all(r.split != "train" for r in record.rows)
        assert record.final_test_metric is not None
        # direct metric equals evaluating the quantized checkpoint independently
        net = task.build_network(np.random.default_rng(0))
        net.set_params(ckpt.params)
        master = net.get_params()
        indep = qat.init_quantization(master, net.quant_group_map(), 2)
        net.set_params(indep.quantized)
        assert record.final_test_metric == pytest.approx(task.evaluate(net, "test"))

    def test_max_epochs_zero_equals_direct(self):
        ckpt = _float_ckpt_for_toy()
        task = toy_task()
        _, direct = qat.run(self.retrain_cfg("direct"), ckpt, task)
        _, zero = qat.run(self.retrain_cfg("adaptive", max_epochs=0), ckpt, task)
        assert zero.final_test_metric == pytest.approx(direct.final_test_metric)

    def test_conventional_specs_constant(self):
        ckpt = _float_ckpt_for_toy()
        _, record = qat.run(self.retrain_cfg("conventional"), ckpt, toy_task())
        by_group = {}
        for d in record.deltas:
            by_group.setdefault(d.group_id, set()).add(d.delta)
        for gid, deltas in by_group.items():
            assert len(deltas) == 1, gid

    def test_adaptive_fix1_changes_only_first_epoch(self):
        ckpt = _float_ckpt_for_toy()
        _, record = qat.run(self.retrain_cfg("adaptive_fix1"), ckpt, toy_task())
        epochs = sorted({d.epoch for d in record.deltas})
        by_group_epoch = {(d.group_id, d.epoch): d.delta for d in record.deltas}
        groups = {d.group_id for d in record.deltas}
        for g in groups:
            later = [by_group_epoch[(g, e)] for e in epochs]
            assert len(set(later[0:])) <= 2  # epoch-0 update, then frozen
            assert len(set(later[1:])) == 1

    def test_adaptive_consistency_with_saved_master(self):
        ckpt = _float_ckpt_for_toy()
        task = toy_task()
        shadow, record = qat.run(self.retrain_cfg("adaptive", max_epochs=3), ckpt, task)
        last_epoch = max(d.epoch for d in record.deltas)
        for gid in shadow.groups:
            step, _ = optimize_step(
                WeightGroup(shadow.group_vector(gid), gid), shadow.specs[gid].points
            )
            stored = next(d.delta for d in record.deltas
                          if d.epoch == last_epoch and d.group_id == gid)
            assert stored == pytest.approx(step, rel=1e-8)

    def test_gradual_drops_one_bit_per_stage(self):
        ckpt = _float_ckpt_for_toy()
        cfg = self.retrain_cfg("gradual:4-2:2", max_epochs=6)
        shadow, record = qat.run(cfg, ckpt, toy_task())
        assert [e for e in record.events if e.startswith("drop-bit")] == [
            "drop-bit:2:3", "drop-bit:4:2",
        ]
        assert all(s.bits == 2 for s in shadow.specs.values())

    def test_seed_reproducibility(self):
        ckpt = _float_ckpt_for_toy()
        cfg = self.retrain_cfg("adaptive", max_epochs=2)
        _, a = qat.run(cfg, ckpt, toy_task())
        _, b = qat.run(cfg, ckpt, toy_task())
        assert a.to_dict() == b.to_dict()

    def test_delta_rows_positive_and_contiguous(self):
        ckpt = _float_ckpt_for_toy()
        _, record = qat.run(self.retrain_cfg("adaptive", max_epochs=3), ckpt, toy_task())
        epochs = sorted({d.epoch for d in record.deltas})
        assert epochs == list(range(len(epochs)))
        assert all(d.delta > 0 for d in record.deltas)
