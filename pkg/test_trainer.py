import csv
import json
import warnings

import pytest
import torch

from conftest import learning_config, make_config
from core.checkpoint import Checkpoint
from core.datamodel import sample_pair_batch
from core.errors import ArchitectureMismatchError, ConfigError, NonFiniteLossError
from core.evaluation import evaluate_checkpoint
from core.losses import LossBreakdown
from core.networks import build_generator, parameter_checksum
from core.trainer import (CoupledGanTrainer, TrainingMonitor, module_seed, resume, train_cpgan)


def _rows(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def _same_modules(a: Checkpoint, b: Checkpoint, rtol=0.0, atol=0.0):
    assert a.modules.keys() == b.modules.keys()
    for name in a.modules:
        for key, value in a.modules[name].items():
            assert torch.allclose(value, b.modules[name][key], rtol=rtol, atol=atol), f"{name}/{key}"


def test_first_step_is_deterministic(tmp_path, tiny_manifest):
    first = CoupledGanTrainer(tiny_manifest, make_config(tmp_path / "a", tiny_manifest))
    second = CoupledGanTrainer(tiny_manifest, make_config(tmp_path / "b", tiny_manifest))
    a = first.train_step(first.next_batch())
    b = second.train_step(second.next_batch())
    for key, value in a.to_row().items():
        other = b.to_row()[key]
        if value is None:
            assert other is None
        else:
            assert other == pytest.approx(value, rel=1e-6, abs=1e-9)


def test_step_breakdown_is_detached(tmp_path, tiny_manifest):
    trainer = CoupledGanTrainer(tiny_manifest, make_config(tmp_path, tiny_manifest))
    with warnings.catch_warnings():
        warnings.filterwarnings("error", message=".*requires_grad.*")
        breakdown = trainer.train_step(trainer.next_batch())
    assert all(type(v) is float for v in (breakdown.l_cpl, breakdown.l_gan, breakdown.l_p, breakdown.d_pr))


def test_zero_epochs_returns_the_initialization(tmp_path, tiny_manifest):
    config = make_config(tmp_path, tiny_manifest, **{"train.epochs": 0})
    checkpoint = train_cpgan(tiny_manifest, config)
    assert (checkpoint.epoch, checkpoint.step) == (0, 0)
    expected = build_generator(config.model, module_seed(config.train.seed, "g_pr")).state_dict()
    for key, value in expected.items():
        assert torch.equal(checkpoint.modules["g_pr"][key], value)
    assert (tmp_path / "checkpoint.pfck").is_file()


def test_log_and_checkpoints_are_written(tmp_path, tiny_manifest):
    config = make_config(tmp_path, tiny_manifest, **{"train.epochs": 2})
    checkpoint = train_cpgan(tiny_manifest, config)
    rows = _rows(tmp_path / "train_log.csv")
    assert len(rows) == 2 * 2
    assert list(rows[0])[:2] == ["epoch", "step"]
    assert set(LossBreakdown.columns()) <= set(rows[0])
    assert (tmp_path / "checkpoints" / "checkpoint_epoch_001.pfck").is_file()
    assert (tmp_path / "checkpoints" / "checkpoint_epoch_002.pfck").is_file()
    on_disk = Checkpoint.load(tmp_path / "checkpoint.pfck")
    assert on_disk.epoch == checkpoint.epoch == 2
    assert on_disk.config["train"]["test_folds"] == [0]


def test_logged_total_recombines_from_its_parts(tmp_path, tiny_manifest):
    config = make_config(tmp_path, tiny_manifest, **{"losses.lambda2": 0.5})
    trainer = CoupledGanTrainer(tiny_manifest, config)
    trainer.train(1)
    assert trainer.monitor.history
    for row in trainer.monitor.history:
        parts = LossBreakdown(**{k: v for k, v in row.items() if k not in ("epoch", "step")})
        assert parts.recombination_error(config.weights) < 1e-6
        assert parts.l_gan == pytest.approx(parts.l_pr + parts.l_fr)
        assert parts.l_2 == pytest.approx(parts.l2_pr + parts.l2_fr)
        assert parts.l_p == pytest.approx(parts.lp_pr + parts.lp_fr)


def test_split_run_matches_continuous_run(tmp_path, tiny_manifest):
    straight = train_cpgan(tiny_manifest, make_config(tmp_path / "straight", tiny_manifest,
                                                      **{"train.epochs": 2}))
    half = train_cpgan(tiny_manifest, make_config(tmp_path / "split", tiny_manifest))
    resumed = resume(half, tiny_manifest, 1, out_dir=tmp_path / "split")
    assert (resumed.epoch, resumed.step) == (straight.epoch, straight.step)
    _same_modules(straight, resumed, rtol=1e-4, atol=1e-6)

    last_straight = _rows(tmp_path / "straight" / "train_log.csv")[-1]
    split_rows = _rows(tmp_path / "split" / "train_log.csv")
    assert len(split_rows) == 4
    assert float(split_rows[-1]["l_tot"]) == pytest.approx(float(last_straight["l_tot"]), rel=1e-4)


def test_resume_without_epochs_changes_nothing(tmp_path, tiny_manifest):
    checkpoint = train_cpgan(tiny_manifest, make_config(tmp_path, tiny_manifest))
    again = resume(checkpoint, tiny_manifest, 0, out_dir=tmp_path / "again")
    _same_modules(checkpoint, again)


def test_resume_rejects_a_different_architecture(tmp_path, tiny_manifest):
    checkpoint = train_cpgan(tiny_manifest, make_config(tmp_path, tiny_manifest, **{"train.epochs": 0}))
    wider = make_config(tmp_path, tiny_manifest, **{"model.embedding_dim": 16})
    with pytest.raises(ArchitectureMismatchError):
        resume(checkpoint, tiny_manifest, 1, config=wider)


def test_manifest_and_model_sizes_must_agree(tmp_path, tiny_manifest):
    config = make_config(tmp_path, tiny_manifest, **{"model.image_size": 32})
    with pytest.raises(ArchitectureMismatchError):
        CoupledGanTrainer(tiny_manifest, config)


def test_holding_out_every_fold_leaves_nothing_to_train(tmp_path, tiny_manifest):
    config = make_config(tmp_path, tiny_manifest, **{"train.test_folds": (0, 1, 2)})
    with pytest.raises(ConfigError):
        CoupledGanTrainer(tiny_manifest, config)


def test_phase_checks_pass_on_a_real_step(tmp_path, tiny_manifest):
    config = make_config(tmp_path, tiny_manifest, **{"train.verify_phases": True,
                                                      "train.d_steps_per_g_step": 2})
    trainer = CoupledGanTrainer(tiny_manifest, config)
    breakdown = trainer.train_step(trainer.next_batch())
    assert breakdown.d_pr is not None and breakdown.d_fr is not None
    assert breakdown.is_finite()


def test_no_discriminator_updates_without_gan_weight(tmp_path, tiny_manifest):
    config = make_config(tmp_path, tiny_manifest, **{"losses.lambda1": 0.0})
    trainer = CoupledGanTrainer(tiny_manifest, config)
    before = parameter_checksum([trainer.modules["d_pr"], trainer.modules["d_fr"]])
    breakdown = trainer.train_step(trainer.next_batch())
    assert breakdown.d_pr is None
    assert breakdown.l_gan > 0
    assert parameter_checksum([trainer.modules["d_pr"], trainer.modules["d_fr"]]) == before


def test_non_finite_loss_writes_a_snapshot(tmp_path, tiny_manifest):
    trainer = CoupledGanTrainer(tiny_manifest, make_config(tmp_path, tiny_manifest))
    batch = sample_pair_batch(tiny_manifest, trainer.train_folds, 4, trainer.rng)
    with pytest.raises(NonFiniteLossError) as info:
        trainer.ensure_finite(torch.tensor(float("nan")), "generator objective", batch)
    diagnostic = json.loads((tmp_path / "nan_snapshot.json").read_text())
    assert diagnostic["term"] == "generator objective"
    assert len(diagnostic["batch"]) == 4
    assert Checkpoint.load(tmp_path / "nan_snapshot.pfck").model == "cpgan"
    assert info.value.snapshot_path.endswith("nan_snapshot.json")


def test_monitor_alerts():
    monitor = TrainingMonitor(window=3, spike_factor=3.0)
    for step in range(3):
        monitor.record(0, step, LossBreakdown(l_tot=1.0))
    monitor.record(0, 3, LossBreakdown(l_tot=10.0))
    monitor.record(0, 4, LossBreakdown(l_tot=float("inf")))
    kinds = [a["kind"] for a in monitor.alerts]
    assert kinds == ["LOSS_SPIKE", "NON_FINITE"]
    assert monitor.get_summary()["steps"] == 5
    assert monitor.epoch_means(0)["l_tot"] == float("inf")


# ==========================================
#  SEEDED LEARNING RUNS
# ==========================================

@pytest.mark.slow
def test_coupling_alone_pulls_genuine_pairs_together(tmp_path, learning_manifest):
    config = learning_config(tmp_path, learning_manifest, **{
        "losses.lambda1": 0.0, "losses.lambda2": 0.0, "losses.lambda3": 0.0})
    trainer = CoupledGanTrainer(learning_manifest, config)
    trainer.train(5)
    distances = [trainer.monitor.epoch_means(epoch)["genuine_distance"] for epoch in range(5)]
    assert all(later < earlier for earlier, later in zip(distances, distances[1:])), distances


@pytest.mark.slow
def test_full_objective_lifts_held_out_auc(tmp_path, learning_manifest, trained_cpgan):
    untrained = train_cpgan(learning_manifest, learning_config(tmp_path, learning_manifest, **{"train.epochs": 0}))
    at_init = evaluate_checkpoint(untrained, learning_manifest).auc
    trained = evaluate_checkpoint(trained_cpgan, learning_manifest).auc
    assert at_init == pytest.approx(0.5, abs=0.1)
    assert trained >= at_init + 0.35
