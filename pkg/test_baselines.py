import csv
import warnings

import pytest
import torch

from conftest import LEARNING_TEST_FOLDS, learning_config, make_config
from core.baselines import (AddaTrainer, CoupledCnnTrainer, load_stage1, parameter_census, train_adda,
                            train_cpcnn, train_model, trainer_for)
from core.datamodel import Domain
from core.errors import StageDependencyError
from core.evaluation import evaluate_checkpoint
from core.trainer import CoupledGanTrainer, resume


def _rows(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def _adda_config(out_dir, manifest, stage, **extra):
    return make_config(out_dir, manifest, **{"run.model": "adda", "run.stage": stage, **extra})


# ==========================================
#  COUPLED CNN
# ==========================================

def test_cpcnn_owns_encoders_only(tmp_path, tiny_manifest):
    checkpoint = train_cpcnn(tiny_manifest, make_config(tmp_path, tiny_manifest, **{"run.model": "cpcnn"}))
    census = parameter_census(checkpoint)
    assert set(census) == {"enc_pr", "enc_fr"}
    assert all(count > 0 for count in census.values())
    assert checkpoint.model == "cpcnn"


def test_cpcnn_follows_the_zero_weight_cgan(tmp_path, tiny_manifest):
    zero = {"losses.lambda1": 0.0, "losses.lambda2": 0.0, "losses.lambda3": 0.0, "train.epochs": 2}
    cgan = CoupledGanTrainer(tiny_manifest, make_config(tmp_path / "cgan", tiny_manifest, **zero))
    cnn = CoupledCnnTrainer(tiny_manifest, make_config(tmp_path / "cnn", tiny_manifest,
                                                       **{**zero, "run.model": "cpcnn"}))
    cgan.train(2)
    cnn.train(2)
    cgan_cpl = [row["l_cpl"] for row in cgan.monitor.history]
    cnn_cpl = [row["l_cpl"] for row in cnn.monitor.history]
    assert len(cgan_cpl) == len(cnn_cpl) == 4
    for a, b in zip(cgan_cpl, cnn_cpl):
        assert b == pytest.approx(a, rel=1e-5, abs=1e-7)


def test_cpcnn_logs_only_the_coupling_loss(tmp_path, tiny_manifest):
    trainer = CoupledCnnTrainer(tiny_manifest, make_config(tmp_path, tiny_manifest, **{"run.model": "cpcnn"}))
    breakdown = trainer.train_step(trainer.next_batch())
    assert breakdown.l_tot == breakdown.l_cpl
    assert (breakdown.l_gan, breakdown.l_2, breakdown.l_p) == (0.0, 0.0, 0.0)


def test_loss_logging_stays_off_the_graph(tmp_path, tiny_manifest):
    trainer = CoupledCnnTrainer(tiny_manifest, make_config(tmp_path, tiny_manifest, **{"run.model": "cpcnn"}))
    with warnings.catch_warnings():
        warnings.filterwarnings("error", message=".*requires_grad.*")
        breakdown = trainer.train_step(trainer.next_batch())
    assert type(breakdown.l_cpl) is float and type(breakdown.l_cont) is float


# ==========================================
#  DOMAIN ADAPTATION
# ==========================================

def test_stage_two_needs_stage_one(tmp_path, tiny_manifest):
    config = _adda_config(tmp_path, tiny_manifest, "2")
    with pytest.raises(StageDependencyError):
        load_stage1(config)
    with pytest.raises(StageDependencyError):
        train_adda(tiny_manifest, config)


def test_stage_two_rejects_a_non_stage_one_checkpoint(tmp_path, tiny_manifest):
    train_cpcnn(tiny_manifest, make_config(tmp_path / "cnn", tiny_manifest, **{"run.model": "cpcnn"}))
    config = _adda_config(tmp_path, tiny_manifest, "2",
                          **{"paths.stage1_checkpoint": str(tmp_path / "cnn" / "checkpoint.pfck")})
    with pytest.raises(StageDependencyError):
        load_stage1(config)


def test_stage_one_classifies_training_identities(tmp_path, tiny_manifest):
    checkpoint = train_adda(tiny_manifest, _adda_config(tmp_path, tiny_manifest, "1"))
    assert checkpoint.stage == "1"
    assert checkpoint.num_classes == len(tiny_manifest.identities([1, 2]))
    assert set(checkpoint.modules) == {"enc_fr", "classifier"}
    assert 0.0 <= checkpoint.extra["stage1_train_accuracy"] <= 1.0
    assert (tmp_path / "stage1.pfck").is_file()
    assert len(_rows(tmp_path / "train_log_stage1.csv")) == 2


def test_stage_two_freezes_the_source_side(tmp_path, tiny_manifest):
    stage1 = train_adda(tiny_manifest, _adda_config(tmp_path / "s1", tiny_manifest, "1"))
    config = _adda_config(tmp_path / "s2", tiny_manifest, "2", **{
        "paths.stage1_checkpoint": str(tmp_path / "s1" / "stage1.pfck"),
        "train.verify_phases": True,
    })
    stage2 = train_adda(tiny_manifest, config)
    assert stage2.stage == "2"
    for name in ("enc_fr", "classifier"):
        for key, value in stage1.modules[name].items():
            assert torch.equal(stage2.modules[name][key], value), f"{name}/{key}"
    # the target encoder moved away from its source initialization
    moved = any(not torch.equal(stage2.modules["enc_pr"][k], v) for k, v in stage1.modules["enc_fr"].items())
    assert moved
    assert stage2.extra["frozen_checksum"]


def test_stage_two_objective_is_adversarial_plus_contrastive(tmp_path, tiny_manifest):
    checkpoint = train_adda(tiny_manifest, _adda_config(tmp_path, tiny_manifest, "both"))
    assert checkpoint.stage == "2"
    rows = _rows(tmp_path / "train_log_stage2.csv")
    assert rows
    for row in rows:
        assert float(row["l_tot"]) == pytest.approx(float(row["l_adv_g"]) + float(row["l_cont"]), rel=1e-6)
        assert row["l_adv_d"] != ""


def test_adaptation_step_logs_plain_floats(tmp_path, tiny_manifest):
    train_adda(tiny_manifest, _adda_config(tmp_path / "s1", tiny_manifest, "1"))
    config = _adda_config(tmp_path / "s2", tiny_manifest, "2",
                          **{"paths.stage1_checkpoint": str(tmp_path / "s1" / "stage1.pfck")})
    trainer = AddaTrainer(tiny_manifest, config, "2", source=load_stage1(config))
    with warnings.catch_warnings():
        warnings.filterwarnings("error", message=".*requires_grad.*")
        breakdown = trainer.train_step(trainer.next_batch())
    assert all(type(v) is float for v in (breakdown.l_tot, breakdown.l_adv_g, breakdown.l_adv_d))


def test_adda_resume_continues_stage_two(tmp_path, tiny_manifest):
    checkpoint = train_model(tiny_manifest, _adda_config(tmp_path, tiny_manifest, "both"))
    more = resume(checkpoint, tiny_manifest, 1, out_dir=tmp_path / "more")
    assert more.stage == "2"
    assert more.epoch == checkpoint.epoch + 1
    for key, value in checkpoint.modules["enc_fr"].items():
        assert torch.equal(more.modules["enc_fr"][key], value)


def test_stage_one_batches_hold_frontals_of_training_folds(tmp_path, tiny_manifest):
    trainer = AddaTrainer(tiny_manifest, _adda_config(tmp_path, tiny_manifest, "1"), "1")
    batch = trainer.next_batch()
    assert batch.images.shape == (4, 3, 16, 16)
    assert all(0 <= int(k) < trainer.num_classes for k in batch.labels)
    assert all("/FR_" in path for path in batch.paths)


# ==========================================
#  SEEDED LEARNING RUNS
# ==========================================

@pytest.fixture(scope="module")
def trained_adda(tmp_path_factory, learning_manifest):
    out = tmp_path_factory.mktemp("trained_adda")
    config = learning_config(out, learning_manifest, **{"run.model": "adda", "run.stage": "both"})
    return train_adda(learning_manifest, config), config


@pytest.mark.slow
def test_untrained_encoders_verify_at_chance(tmp_path, learning_manifest):
    config = learning_config(tmp_path, learning_manifest, **{"run.model": "cpcnn", "train.epochs": 0})
    report = evaluate_checkpoint(train_cpcnn(learning_manifest, config), learning_manifest)
    assert report.auc == pytest.approx(0.5, abs=0.1)


@pytest.mark.slow
def test_cpcnn_learns_to_verify(tmp_path, learning_manifest):
    config = learning_config(tmp_path, learning_manifest, **{"run.model": "cpcnn"})
    report = evaluate_checkpoint(train_cpcnn(learning_manifest, config), learning_manifest)
    assert report.extra["test_folds"] == list(LEARNING_TEST_FOLDS)
    assert report.auc >= 0.75


@pytest.mark.slow
def test_stage_one_reaches_high_train_accuracy(tmp_path, learning_manifest):
    config = learning_config(tmp_path, learning_manifest, **{
        "train.epochs": 40, "train.test_folds": (), "run.model": "adda", "run.stage": "1"})
    checkpoint = train_adda(learning_manifest, config)
    assert checkpoint.num_classes == 30
    assert checkpoint.extra["stage1_train_accuracy"] >= 0.9


@pytest.mark.slow
def test_adda_learns_to_verify(trained_adda, learning_manifest):
    checkpoint, _ = trained_adda
    assert checkpoint.stage == "2"
    assert evaluate_checkpoint(checkpoint, learning_manifest).auc >= 0.75


@pytest.mark.slow
def test_adapted_embeddings_confuse_the_domain_discriminator(trained_adda, learning_manifest):
    checkpoint, config = trained_adda
    trainer = trainer_for(checkpoint, learning_manifest, config)
    modules = trainer.modules
    for module in modules.values():
        module.eval()
    with torch.no_grad():
        frontals = learning_manifest.tensor(learning_manifest.select(trainer.train_folds, Domain.FRONTAL))
        profiles = learning_manifest.tensor(learning_manifest.select(trainer.train_folds, Domain.PROFILE))
        on_frontal = float(modules["embed_disc"](modules["enc_fr"](frontals).embedding).mean())
        on_profile = float(modules["embed_disc"](modules["enc_pr"](profiles).embedding).mean())
    assert 0.35 <= on_frontal <= 0.65
    assert 0.35 <= on_profile <= 0.65
