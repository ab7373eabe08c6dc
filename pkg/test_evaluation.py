import json

import numpy as np
import pytest

from conftest import learning_config, make_config
from core.baselines import train_adda, train_cpcnn
from core.datamodel import Domain
from core.errors import ConfigError, ProtocolError, StageDependencyError
from core.evaluation import (MetricsReport, ScoreSet, aggregate_reports, cmc_curve, compute_identification,
                             compute_verification, embed_split, evaluate_checkpoint, kfold_evaluate,
                             restore_encoders, run_ablation, run_model_comparison, score_pairs,
                             scores_from_embeddings)
from core.trainer import train_cpgan


# ==========================================
#  VERIFICATION METRICS
# ==========================================

def brute_force_eer(genuine, impostor):
    """Exhaustive sweep: FAR/FRR at every distinct score, interpolated at the crossing"""
    genuine, impostor = np.asarray(genuine), np.asarray(impostor)
    thresholds = np.concatenate([[np.inf], np.unique(np.concatenate([genuine, impostor]))[::-1]])
    far = np.array([(impostor >= t).mean() for t in thresholds])
    frr = np.array([(genuine < t).mean() for t in thresholds])
    for i in range(1, len(thresholds)):
        if far[i] - frr[i] >= 0:
            gap_lo, gap_hi = far[i - 1] - frr[i - 1], far[i] - frr[i]
            alpha = -gap_lo / (gap_hi - gap_lo)
            return far[i - 1] + alpha * (far[i] - far[i - 1])
    return far[-1]


def brute_force_gar(genuine, impostor, budget):
    genuine, impostor = np.asarray(genuine), np.asarray(impostor)
    best = 0.0
    for t in np.concatenate([[np.inf], np.unique(np.concatenate([genuine, impostor]))]):
        if (impostor >= t).mean() <= budget:
            best = max(best, (genuine >= t).mean())
    return best


def test_perfect_separation():
    report = compute_verification(ScoreSet([1.0, 1.0, 1.0], [0.0, 0.0, 0.0]))
    assert report.eer == 0.0
    assert report.auc == pytest.approx(1.0)
    assert report.gar_at_far[0.01] == 1.0
    assert report.accuracy_at_best_threshold == 1.0


def test_hand_computed_eer():
    report = compute_verification(ScoreSet([0.9, 0.8, 0.4], [0.7, 0.3, 0.2]))
    assert report.eer == pytest.approx(1 / 3)


def test_roc_shape():
    rng = np.random.default_rng(0)
    report = compute_verification(ScoreSet(list(rng.normal(1, 1, 50)), list(rng.normal(0, 1, 80))))
    far = [p[0] for p in report.roc]
    gar = [p[1] for p in report.roc]
    assert far[0] == 0.0
    assert (far[-1], gar[-1]) == (1.0, 1.0)
    assert all(np.diff(far) >= 0) and all(np.diff(gar) >= 0)
    assert report.gar_at_far[0.001] <= report.gar_at_far[0.01]
    assert (report.num_genuine, report.num_impostor) == (50, 80)


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    genuine = np.round(rng.normal(0.5, 1.0, size=int(rng.integers(5, 60))), 1).tolist()
    impostor = np.round(rng.normal(0.0, 1.0, size=int(rng.integers(5, 60))), 1).tolist()
    report = compute_verification(ScoreSet(genuine, impostor))
    assert report.eer == pytest.approx(brute_force_eer(genuine, impostor), abs=1e-12)
    for budget in (0.01, 0.1, 0.5):
        expected = brute_force_gar(genuine, impostor, budget)
        far = np.array([p[0] for p in report.roc])
        gar = np.array([p[1] for p in report.roc])
        assert gar[far <= budget].max() == pytest.approx(expected)


def test_invariant_under_increasing_transform():
    rng = np.random.default_rng(3)
    genuine, impostor = rng.normal(1, 1, 40), rng.normal(0, 1, 60)
    plain = compute_verification(ScoreSet(list(genuine), list(impostor)))
    warped = compute_verification(ScoreSet(list(np.exp(genuine)), list(np.exp(impostor))))
    assert warped.eer == pytest.approx(plain.eer)
    assert warped.auc == pytest.approx(plain.auc)


def test_same_distribution_gives_chance_auc():
    rng = np.random.default_rng(11)
    report = compute_verification(ScoreSet(list(rng.normal(size=10_000)), list(rng.normal(size=10_000))))
    assert report.auc == pytest.approx(0.5, abs=0.05)


def test_empty_scores_are_rejected():
    with pytest.raises(ProtocolError):
        compute_verification(ScoreSet([], [0.1]))


def _reject_constant(name):
    raise ValueError(f"non-standard JSON constant {name}")


def test_thresholds_are_finite_and_start_above_every_score():
    report = compute_verification(ScoreSet([0.9, 0.8, 0.4], [0.7, 0.3, 0.2]))
    assert all(np.isfinite(report.thresholds))
    assert report.thresholds[0] > 0.9
    assert tuple(report.roc[0]) == (0.0, 0.0)


def test_report_json_parses_strictly(tmp_path):
    report = compute_verification(ScoreSet([0.9, 0.8, 0.4], [0.7, 0.3, 0.2]))
    text = report.write_json(tmp_path / "report.json").read_text()
    data = json.loads(text, parse_constant=_reject_constant)
    assert data["thresholds"][0] > 0.9
    assert data["auc"] == pytest.approx(report.auc)


def test_unset_metrics_are_written_as_null(tmp_path):
    text = MetricsReport().write_json(tmp_path / "empty.json").read_text()
    data = json.loads(text, parse_constant=_reject_constant)
    assert data["auc"] is None and data["best_threshold"] is None


def test_scores_from_embeddings():
    profile_z = np.array([[0.0, 0.0], [1.0, 0.0]])
    frontal_z = np.array([[0.0, 0.0], [0.0, 2.0], [1.0, 0.0]])
    scores = scores_from_embeddings(profile_z, [0, 1], frontal_z, [0, 1, 1])
    assert len(scores.genuine_scores) + len(scores.impostor_scores) == 2 * 3
    assert sorted(scores.genuine_scores) == pytest.approx([-np.sqrt(5), 0.0, 0.0])
    assert max(scores.genuine_scores + scores.impostor_scores) == 0.0


# ==========================================
#  IDENTIFICATION
# ==========================================

def test_hand_placed_cmc():
    gallery = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    probes = np.array([[1.0, 0.0], [9.0, 0.0], [6.0, 0.0]])  # the last one sits nearer identity 1
    cmc = cmc_curve(probes, [0, 1, 2], gallery, [0, 1, 2])
    assert cmc[0] == pytest.approx(2 / 3)
    assert cmc[-1] == 1.0
    assert all(np.diff(cmc) >= 0)


def test_single_identity_gallery():
    assert cmc_curve(np.ones((3, 2)), [4, 4, 4], np.zeros((1, 2)), [4]) == [1.0]


def test_ties_keep_gallery_order():
    gallery = np.zeros((2, 2))
    assert cmc_curve(np.zeros((1, 2)), [7], gallery, [7, 8])[0] == 1.0
    assert cmc_curve(np.zeros((1, 2)), [8], gallery, [7, 8])[0] == 0.0


def test_gallery_layout_errors():
    with pytest.raises(ProtocolError):
        cmc_curve(np.zeros((1, 2)), [5], np.zeros((1, 2)), [4])
    with pytest.raises(ProtocolError):
        cmc_curve(np.zeros((1, 2)), [4], np.zeros((2, 2)), [4, 4])


# ==========================================
#  CHECKPOINT EVALUATION
# ==========================================

@pytest.fixture
def cpgan_checkpoint(tmp_path, tiny_manifest):
    return train_cpgan(tiny_manifest, make_config(tmp_path / "cpgan", tiny_manifest))


def test_score_pairs_enumerates_every_cross_domain_pair(cpgan_checkpoint, tiny_manifest):
    scores = score_pairs(cpgan_checkpoint, tiny_manifest, [0])
    profiles = len(tiny_manifest.select([0], Domain.PROFILE))
    frontals = len(tiny_manifest.select([0], Domain.FRONTAL))
    assert len(scores.genuine_scores) + len(scores.impostor_scores) == profiles * frontals
    assert all(s <= 0 for s in scores.genuine_scores + scores.impostor_scores)


def test_evaluate_checkpoint_report(cpgan_checkpoint, tiny_manifest, tmp_path):
    report = evaluate_checkpoint(cpgan_checkpoint, tiny_manifest)
    assert report.extra["test_folds"] == [0]
    assert len(report.cmc) == len(tiny_manifest.identities([0]))
    assert report.cmc[-1] == 1.0
    assert 0.0 <= report.auc <= 1.0 and 0.0 <= report.eer <= 1.0
    path = report.write_json(tmp_path / "report.json")
    data = json.loads(path.read_text())
    assert set(data["gar_at_far"]) == {"0.01", "0.001"}
    written = report.write_csv(tmp_path / "report")
    assert [p.name for p in written] == ["report_roc.csv", "report_cmc.csv"]


def test_identification_uses_one_gallery_entry_per_identity(cpgan_checkpoint, tiny_manifest):
    split = embed_split(cpgan_checkpoint, tiny_manifest, [0])
    gallery_ids = [split.frontal_ids[r] for r in split.gallery_rows]
    assert sorted(gallery_ids) == tiny_manifest.identities([0])
    assert compute_identification(cpgan_checkpoint, tiny_manifest, [0])[-1] == 1.0


def test_training_folds_cannot_be_evaluated(cpgan_checkpoint, tiny_manifest):
    with pytest.raises(ProtocolError):
        score_pairs(cpgan_checkpoint, tiny_manifest, [1])


def test_stage_one_checkpoint_has_no_profile_encoder(tmp_path, tiny_manifest):
    config = make_config(tmp_path, tiny_manifest, **{"run.model": "adda", "run.stage": "1"})
    with pytest.raises(StageDependencyError):
        restore_encoders(train_adda(tiny_manifest, config))


def test_every_learner_can_be_evaluated(tmp_path, tiny_manifest):
    cnn = train_cpcnn(tiny_manifest, make_config(tmp_path / "cnn", tiny_manifest, **{"run.model": "cpcnn"}))
    adda = train_adda(tiny_manifest, make_config(tmp_path / "adda", tiny_manifest, **{"run.model": "adda"}))
    for checkpoint in (cnn, adda):
        report = evaluate_checkpoint(checkpoint, tiny_manifest, [0])
        assert report.extra["model"] == checkpoint.model
        assert np.isfinite(report.auc)


# ==========================================
#  HARNESSES
# ==========================================

def _report(auc, rank1=0.5):
    return MetricsReport(auc=auc, eer=1 - auc, gar_at_far={0.01: auc, 0.001: auc},
                         accuracy_at_best_threshold=auc, cmc=[rank1, 1.0])


def test_aggregate_is_mean_and_sample_std():
    summary = aggregate_reports([_report(0.6), _report(0.8), _report(0.7)])
    assert summary["auc"]["mean"] == pytest.approx(0.7, abs=1e-9)
    assert summary["auc"]["std"] == pytest.approx(0.1)
    assert summary["rank1"]["values"] == [0.5, 0.5, 0.5]
    with pytest.raises(ConfigError):
        aggregate_reports([])


def test_ablation_trains_three_variants(tmp_path, tiny_manifest):
    config = make_config(tmp_path, tiny_manifest)
    result = run_ablation(tiny_manifest, config, seeds=[1])
    assert list(result.reports) == ["cpl+l2", "cpl+l2+gan", "full"]
    lambdas = {name: reports[0].extra["weights"] for name, reports in result.reports.items()}
    assert (lambdas["cpl+l2"]["lambda1"], lambdas["cpl+l2"]["lambda2"]) == (0.0, 0.0)
    assert lambdas["cpl+l2+gan"]["lambda2"] == 0.0
    assert (lambdas["full"]["lambda1"], lambdas["full"]["lambda2"]) == (1.0, 0.25)
    summary = json.loads((tmp_path / "ablation_summary.json").read_text(), parse_constant=_reject_constant)
    assert set(summary["variants"]) == set(result.reports)
    assert (tmp_path / "ablation_roc.csv").is_file()


def test_ablation_needs_held_out_folds(tmp_path, tiny_manifest):
    config = make_config(tmp_path, tiny_manifest, **{"train.test_folds": ()})
    with pytest.raises(ConfigError):
        run_ablation(tiny_manifest, config)


def test_model_comparison(tmp_path, tiny_manifest):
    result = run_model_comparison(tiny_manifest, make_config(tmp_path, tiny_manifest),
                                  models=["cpgan", "cpcnn"], seeds=[1])
    assert set(result.reports) == {"cpgan", "cpcnn"}
    summary = json.loads((tmp_path / "comparison_summary.json").read_text(), parse_constant=_reject_constant)
    assert summary["variants"]["cpgan"]["aggregate"]["auc"]["std"] == 0.0


def test_kfold_protocol(tmp_path, tiny_manifest):
    config = make_config(tmp_path, tiny_manifest, **{"run.model": "cpcnn", "train.test_folds": ()})
    result = kfold_evaluate(tiny_manifest, config, 3)
    assert len(result.fold_reports) == 3
    assert result.fold_groups == [[0], [1], [2]]
    aucs = [r.auc for r in result.fold_reports]
    assert result.aggregate["auc"]["mean"] == pytest.approx(float(np.mean(aucs)), abs=1e-9)
    for report, group in zip(result.fold_reports, result.fold_groups):
        assert report.extra["test_folds"] == group
    json.loads((tmp_path / "kfold_summary.json").read_text(), parse_constant=_reject_constant)


def test_kfold_needs_enough_folds(tmp_path, tiny_manifest):
    config = make_config(tmp_path, tiny_manifest)
    with pytest.raises(ConfigError):
        kfold_evaluate(tiny_manifest, config, 4)


# ==========================================
#  SEEDED LEARNING RUNS
# ==========================================

@pytest.mark.slow
def test_full_objective_keeps_up_with_coupling_plus_l2(tmp_path, learning_manifest):
    result = run_ablation(learning_manifest, learning_config(tmp_path, learning_manifest), seeds=[1, 2, 3])
    assert all(len(reports) == 3 for reports in result.reports.values())
    assert result.median_auc("full") >= result.median_auc("cpl+l2") - 0.02
    assert (tmp_path / "ablation_roc.csv").is_file()
