import numpy as np
import pytest

from core.datamodel import (DatasetManifest, Domain, ManifestEntry, SyntheticSpec, assign_folds,
                            generate_synthetic, load_image, load_manifest, sample_pair_batch,
                            save_image, save_manifest, to_uint8)
from core.errors import ConfigError, DataError, ManifestError


def _spec(**changes):
    base = dict(num_identities=4, views_per_domain=2, image_size=(16, 16), num_folds=2, seed=1)
    base.update(changes)
    return SyntheticSpec(**base)


# ==========================================
#  SYNTHETIC GENERATOR
# ==========================================

def test_synthetic_entry_count(tmp_path):
    manifest = generate_synthetic(_spec(num_identities=30, views_per_domain=8, num_folds=5), tmp_path)
    assert len(manifest.entries) == 30 * 8 * 2
    assert manifest.num_identities == 30
    assert (tmp_path / "manifest.csv").is_file()


def test_synthetic_is_byte_identical_across_runs(tmp_path):
    first = generate_synthetic(_spec(), tmp_path / "a")
    generate_synthetic(_spec(), tmp_path / "b")
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()
    for entry in first.entries:
        assert (tmp_path / "a" / entry.path).read_bytes() == (tmp_path / "b" / entry.path).read_bytes()


def test_zero_warp_without_jitter_gives_identical_domains(tmp_path):
    manifest = generate_synthetic(_spec(warp_magnitude=0.0, illumination_jitter=0.0), tmp_path)
    for identity in manifest.identities():
        profiles = [e for e in manifest.entries if e.identity == identity and e.domain is Domain.PROFILE]
        frontals = [e for e in manifest.entries if e.identity == identity and e.domain is Domain.FRONTAL]
        for p, f in zip(profiles, frontals):
            np.testing.assert_array_equal(manifest.pixels(p), manifest.pixels(f))


def test_warp_changes_the_profile(tmp_path):
    manifest = generate_synthetic(_spec(warp_magnitude=1.0, illumination_jitter=0.0), tmp_path)
    p = manifest.select([manifest.entries[0].fold], Domain.PROFILE)[0]
    f = next(e for e in manifest.entries if e.identity == p.identity and e.domain is Domain.FRONTAL)
    assert not np.array_equal(manifest.pixels(p), manifest.pixels(f))


def test_folds_are_identity_disjoint_and_balanced():
    folds = assign_folds(10, 3, seed=7)
    assert sorted(folds.count(k) for k in range(3)) == [3, 3, 4]
    assert folds == assign_folds(10, 3, seed=7)


@pytest.mark.parametrize("changes", [
    {"image_size": (20, 20)},
    {"num_identities": 1, "num_folds": 2},
    {"warp_magnitude": 1.5},
    {"views_per_domain": 0},
])
def test_invalid_spec_is_rejected(changes):
    with pytest.raises(ConfigError):
        _spec(**changes).validate()


def test_unwritable_output_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    with pytest.raises(DataError):
        generate_synthetic(_spec(), blocker)


# ==========================================
#  MANIFEST
# ==========================================

def test_manifest_round_trip(tmp_path, tiny_manifest):
    path = save_manifest(tiny_manifest, tmp_path / "copy.csv")
    loaded = load_manifest(path, check_files=False)
    assert loaded == tiny_manifest


def test_identity_in_two_folds_is_rejected():
    entries = [
        ManifestEntry(0, Domain.PROFILE, 0, "a.png"),
        ManifestEntry(0, Domain.FRONTAL, 1, "b.png"),
    ]
    with pytest.raises(ManifestError):
        DatasetManifest(entries, num_identities=1, num_folds=2).validate()


def test_empty_manifest_is_rejected():
    with pytest.raises(ManifestError):
        DatasetManifest([], num_identities=0).validate()


def test_identity_missing_a_domain_is_rejected():
    entries = [ManifestEntry(0, Domain.PROFILE, 0, "a.png")]
    with pytest.raises(ManifestError):
        DatasetManifest(entries, num_identities=1, num_folds=1).validate()


def test_manifest_with_missing_files(tmp_path, tiny_manifest):
    path = save_manifest(tiny_manifest, tmp_path / "manifest.csv")
    with pytest.raises(ManifestError):
        load_manifest(path, check_files=True)


def test_split_rejects_unknown_fold(tiny_manifest):
    with pytest.raises(ConfigError):
        tiny_manifest.split([7])
    assert tiny_manifest.split([0]) == ([1, 2], [0])


# ==========================================
#  PAIR SAMPLING
# ==========================================

def test_batch_is_balanced(tiny_manifest):
    batch = sample_pair_batch(tiny_manifest, [1, 2], 8, np.random.default_rng(0))
    assert batch.num_genuine == 4
    assert batch.num_impostor == 4
    for pair in batch.pairs:
        assert pair.is_genuine == (pair.profile.identity == pair.frontal.identity)


def test_odd_batch_puts_the_extra_pair_on_impostors(tiny_manifest):
    batch = sample_pair_batch(tiny_manifest, [1, 2], 5, np.random.default_rng(0))
    assert (batch.num_genuine, batch.num_impostor) == (2, 3)


def test_single_identity_fold_cannot_form_impostors(tmp_path):
    manifest = generate_synthetic(_spec(num_identities=3, num_folds=3), tmp_path)
    with pytest.raises(DataError):
        sample_pair_batch(manifest, [0], 4, np.random.default_rng(0))


def test_sampling_is_deterministic(tiny_manifest):
    def draw():
        batch = sample_pair_batch(tiny_manifest, [1, 2], 6, np.random.default_rng(42))
        return [(p.profile.source_path, p.frontal.source_path, p.label_y) for p in batch.pairs]

    assert draw() == draw()


def test_batch_tensors(tiny_manifest):
    profile, frontal, labels = sample_pair_batch(tiny_manifest, [1, 2], 4, np.random.default_rng(1)).to_tensors()
    assert profile.shape == frontal.shape == (4, 3, 16, 16)
    assert sorted(labels.tolist()) == [0.0, 0.0, 1.0, 1.0]


# ==========================================
#  IMAGE IO
# ==========================================

def test_uint8_mapping_clamps():
    np.testing.assert_array_equal(to_uint8(np.array([-1.0, 0.0, 1.0, 2.0, -3.0])), [0, 128, 255, 255, 0])


def test_load_image_checks_shape(tmp_path):
    save_image(np.zeros((8, 8, 3), dtype=np.float32), tmp_path / "small.png")
    with pytest.raises(DataError):
        load_image(tmp_path / "small.png", (16, 16, 3))
    assert load_image(tmp_path / "small.png", (8, 8, 3)).shape == (8, 8, 3)
