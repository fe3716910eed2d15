import json

import numpy as np
import pytest

from hippofusion.data import (
    ROIBank,
    ROISpec,
    SubjectRecord,
    Volume,
    balance_and_augment,
    build_test_sets,
    expand_merged,
    extract_roi,
    gaussian_blur3d,
    ingest_nifti,
    load_stored_sample,
    make_validation_split,
    merge_lr,
    realize_batch,
    realize_sample,
    save_sample,
    select_test_subjects,
)
from hippofusion.errors import BlurSigmaError, ManifestError, MissingFileError, ROIOutOfBoundsError
from hippofusion.models import INPUT_MODES, SampleRecord, SynthConfig
from hippofusion.nifti import write_nifti
from hippofusion.seeding import derive_seeds, stable_key, stream
from hippofusion.synth import check_fits, synth_dataset

from conftest import TINY_CENTERS

TRAIN_SIZES = {"AD": 36, "MCI": 96, "NC": 46}


def cohort(sizes):
    return {dx: [f"{dx}{i:03d}" for i in range(n)] for dx, n in sizes.items()}


def ramp_subject(subject_id="S0", diagnosis="AD", shape=(24, 16, 16)):
    grid = np.arange(np.prod(shape), dtype=np.float32).reshape(shape)
    volumes = {m: Volume(grid + offset, subject_id, m) for m, offset in (("sMRI", 0.0), ("MD-DTI", 0.5))}
    return SubjectRecord(subject_id, diagnosis, volumes)


@pytest.fixture
def bank():
    bank = ROIBank(TINY_CENTERS, max_size=8, margin=2)
    bank.add_subject(ramp_subject())
    return bank


# Seeds and streams

def test_derived_seeds_are_stable_and_distinct():
    seeds = derive_seeds(42)
    assert seeds == derive_seeds(42)
    assert len(set(seeds.values())) == len(seeds)
    assert all(0 <= s < 2 ** 63 for s in seeds.values())
    assert derive_seeds(43)["init"] != seeds["init"]


def test_streams_depend_only_on_keys():
    a = stream(5, 1, 2).random(4)
    stream(5, 9).random(100)
    np.testing.assert_array_equal(a, stream(5, 1, 2).random(4))
    assert not np.array_equal(a, stream(5, 2, 1).random(4))


def test_stable_key_is_process_independent():
    assert stable_key("AD-NC") == stable_key("AD-NC")
    assert stable_key("AD-NC") != stable_key("AD-MCI")
    assert 0 <= stable_key("x") < 2 ** 63


# Balancing augmentation

def test_balancing_reaches_960_per_class():
    plan = balance_and_augment(cohort(TRAIN_SIZES), k=10, seed=1)
    assert plan.target_per_class == 960
    assert plan.generated_counts == {"AD": 924, "MCI": 864, "NC": 914}
    assert {dx: len(s) for dx, s in plan.by_class().items()} == {"AD": 960, "MCI": 960, "NC": 960}


def test_generated_samples_cycle_sources_and_respect_limits():
    plan = balance_and_augment(cohort({"AD": 3, "NC": 5}), k=2, seed=4)
    ad = [s for s in plan.by_class()["AD"] if s.kind == "generated"]
    assert [s.subject_id for s in ad] == ["AD000", "AD001", "AD002", "AD000", "AD001", "AD002", "AD000"]
    for sample in plan.samples:
        assert all(-2 <= v <= 2 for v in sample.shift)
        assert 0.0 <= sample.sigma <= 1.2
    originals = [s for s in plan.samples if s.kind == "original"]
    assert all(s.shift == (0, 0, 0) and s.sigma == 0.0 for s in originals)


def test_balancing_is_reproducible():
    a = balance_and_augment(cohort({"AD": 4, "NC": 6}), k=3, seed=8)
    b = balance_and_augment(cohort({"AD": 4, "NC": 6}), k=3, seed=8)
    c = balance_and_augment(cohort({"AD": 4, "NC": 6}), k=3, seed=9)
    assert a.samples == b.samples
    assert a.samples != c.samples


def test_balancing_does_not_depend_on_other_classes():
    alone = balance_and_augment(cohort({"AD": 4, "NC": 6}), k=2, seed=3)
    together = balance_and_augment(cohort({"AD": 4, "MCI": 6, "NC": 6}), k=2, seed=3)
    assert alone.by_class()["AD"] == together.by_class()["AD"]


def test_balancing_validates_shifts():
    calls = []
    balance_and_augment(cohort({"AD": 2, "NC": 2}), k=2, seed=0, validate=lambda s, shift: calls.append((s, shift)))
    assert len(calls) == 4


def test_balancing_rejects_bad_input():
    with pytest.raises(ManifestError):
        balance_and_augment(cohort({"AD": 2}), k=0, seed=0)
    with pytest.raises(ManifestError):
        balance_and_augment({"AD": [], "NC": ["NC000"]}, k=1, seed=0)


# Test sets and splits

def test_test_sets_hold_12_and_120_per_class():
    sets = build_test_sets(cohort({"AD": 12, "MCI": 12, "NC": 12}), seed=2)
    for name, per_class in (("test0", 12), ("test1", 120), ("test2", 120)):
        for dx in ("AD", "MCI", "NC"):
            assert sum(s.diagnosis == dx for s in sets[name]) == per_class


def test_test1_is_shift_only_and_test2_also_blurs():
    sets = build_test_sets(cohort({"AD": 3, "NC": 3}), seed=2, augmented_per_class=20)
    assert all(s.kind == "original" for s in sets["test0"])
    assert all(s.sigma == 0.0 for s in sets["test1"])
    assert any(s.sigma > 0.0 for s in sets["test2"])
    assert all(-2 <= v <= 2 for s in sets["test2"] for v in s.shift)


def test_test_subject_selection_is_disjoint():
    test, train = select_test_subjects(cohort({"AD": 48, "MCI": 108, "NC": 58}), per_class=12, seed=5)
    assert {dx: len(ids) for dx, ids in train.items()} == TRAIN_SIZES
    for dx in test:
        assert len(test[dx]) == 12
        assert not set(test[dx]) & set(train[dx])
    assert test == select_test_subjects(cohort({"AD": 48, "MCI": 108, "NC": 58}), per_class=12, seed=5)[0]


def test_test_subject_selection_needs_a_remainder():
    with pytest.raises(ManifestError):
        select_test_subjects(cohort({"AD": 12}), per_class=12, seed=0)


def test_validation_split_is_stratified_ten_percent():
    pool = balance_and_augment(cohort({"AD": 36, "NC": 46}), k=10, seed=1).samples
    fit, val = make_validation_split(pool, 0.1, seed=3, epoch_index=0)
    for dx in ("AD", "NC"):
        assert sum(s.diagnosis == dx for s in val) == 46
        assert sum(s.diagnosis == dx for s in fit) == 414
    assert not {s.sample_id for s in fit} & {s.sample_id for s in val}


def test_validation_split_of_960_per_class():
    pool = balance_and_augment(cohort(TRAIN_SIZES), k=10, seed=1).samples
    fit, val = make_validation_split(pool, 0.1, seed=3)
    assert sum(s.diagnosis == "MCI" for s in val) == 96
    assert sum(s.diagnosis == "MCI" for s in fit) == 864


def test_validation_split_changes_with_epoch():
    pool = balance_and_augment(cohort({"AD": 10, "NC": 10}), k=2, seed=1).samples
    _, first = make_validation_split(pool, seed=3, epoch_index=0)
    _, again = make_validation_split(pool, seed=3, epoch_index=0)
    _, second = make_validation_split(pool, seed=3, epoch_index=1)
    assert first == again
    assert first != second


def test_validation_split_needs_ten_samples():
    pool = [SampleRecord(sample_id=f"s{i}", subject_id=f"s{i}", diagnosis="AD") for i in range(9)]
    with pytest.raises(ManifestError):
        make_validation_split(pool)


def test_expand_merged_gives_left_and_right():
    out = expand_merged([SampleRecord(sample_id="a", subject_id="a", diagnosis="AD")])
    assert [(s.sample_id, s.side) for s in out] == [("a-L", "left"), ("a-R", "right")]


# ROI extraction and blur

def test_extract_roi_window_origin():
    volume = ramp_subject().volumes["sMRI"]
    roi = extract_roi(volume, ROISpec("left_hippocampus", (6, 8, 8), 4), shift=(1, 0, -1))
    assert roi.shape == (1, 4, 4, 4)
    np.testing.assert_array_equal(roi[0], volume.grid[5:9, 6:10, 5:9])


def test_extract_roi_out_of_bounds_names_subject():
    volume = ramp_subject().volumes["sMRI"]
    with pytest.raises(ROIOutOfBoundsError) as info:
        extract_roi(volume, ROISpec("left_hippocampus", (2, 8, 8), 8))
    assert info.value.details["subject_id"] == "S0"
    assert info.value.details["axis"] == 0


def test_bank_window_matches_direct_extraction(bank):
    volume = ramp_subject().volumes["sMRI"]
    spec = ROISpec("right_hippocampus", tuple(TINY_CENTERS["right_hippocampus"]), 6)
    for shift in [(0, 0, 0), (2, -2, 1), (-2, 2, -2)]:
        np.testing.assert_array_equal(
            bank.window("S0", "sMRI", "right_hippocampus", 6, shift), extract_roi(volume, spec, shift)
        )


def test_bank_rejects_shift_beyond_margin(bank):
    with pytest.raises(ROIOutOfBoundsError):
        bank.window("S0", "sMRI", "left_hippocampus", 8, (3, 0, 0))


def test_bank_refuses_subject_whose_box_leaves_the_volume():
    bank = ROIBank(TINY_CENTERS, max_size=12, margin=2)
    with pytest.raises(ROIOutOfBoundsError) as info:
        bank.add_subject(ramp_subject())
    assert info.value.details["subject_id"] == "S0"
    assert "axis" in info.value.details


def test_bank_boxes_are_roi_extractions_at_box_size(bank):
    subject = ramp_subject()
    for name, center in TINY_CENTERS.items():
        spec = ROISpec(name, tuple(center), bank.box_size)
        for modality, volume in subject.volumes.items():
            np.testing.assert_array_equal(
                bank.boxes[("S0", modality, name)].grid, extract_roi(volume, spec)[0]
            )


def test_bank_missing_modality_is_manifest_error():
    bank = ROIBank(TINY_CENTERS, max_size=8)
    grid = np.zeros((24, 16, 16), dtype=np.float32)
    bank.add_subject(SubjectRecord("S1", "NC", {"sMRI": Volume(grid, "S1", "sMRI")}))
    assert bank.has("S1", "sMRI") and not bank.has("S1", "MD-DTI")
    with pytest.raises(ManifestError):
        bank.window("S1", "MD-DTI", "left_hippocampus", 8)


def test_blur_preserves_constant_volume_and_mean():
    roi = np.full((1, 6, 6, 6), 3.0)
    np.testing.assert_allclose(gaussian_blur3d(roi, 1.1), 3.0)
    rng = np.random.default_rng(0)
    noise = rng.normal(size=(1, 8, 8, 8))
    assert gaussian_blur3d(noise, 1.0).std() < noise.std()
    np.testing.assert_array_equal(gaussian_blur3d(noise, 0.0), noise)


def test_negative_sigma_is_rejected():
    with pytest.raises(BlurSigmaError):
        gaussian_blur3d(np.zeros((1, 4, 4, 4)), -0.1)


def test_merge_lr_mirrors_right_across_sagittal_axis():
    left = np.zeros((1, 3, 3, 3))
    right = np.zeros((1, 3, 3, 3))
    right[0, 0, 1, 2] = 1.0
    merged = merge_lr(left, right)
    assert merged[1][0, 2, 1, 2] == 1.0
    np.testing.assert_array_equal(merged[0], left)


def test_realize_merged_right_sample_is_flipped(bank):
    pipelines = INPUT_MODES["sMRI_LR+DTI_LR"]
    sample = SampleRecord(sample_id="S0-R", subject_id="S0", diagnosis="AD", side="right")
    tensors = realize_sample(bank, sample, pipelines, 8)
    window = bank.window("S0", "sMRI", "right_hippocampus", 8)
    np.testing.assert_array_equal(tensors[0], window[:, ::-1])
    assert len(tensors) == 2


def test_realize_merged_pair_matches_merge_lr(bank):
    pipelines = INPUT_MODES["sMRI_LR+DTI_LR"]
    shift, sigma = (1, 0, -1), 0.7
    sides = {
        side: realize_sample(
            bank,
            SampleRecord(sample_id=f"S0-{side}", subject_id="S0", diagnosis="AD", side=side, shift=shift, sigma=sigma),
            pipelines,
            6,
        )
        for side in ("left", "right")
    }
    for p, pipe in enumerate(pipelines):
        windows = [
            gaussian_blur3d(bank.window("S0", pipe.modality, f"{side}_hippocampus", 6, shift), sigma)
            for side in ("left", "right")
        ]
        left, right = merge_lr(*windows)
        np.testing.assert_array_equal(sides["left"][p], left)
        np.testing.assert_array_equal(sides["right"][p], right)


def test_realize_merged_needs_side(bank):
    sample = SampleRecord(sample_id="S0", subject_id="S0", diagnosis="AD")
    with pytest.raises(ManifestError):
        realize_sample(bank, sample, INPUT_MODES["sMRI_LR+DTI_LR"], 8)


def test_realize_batch_stacks_per_pipeline(bank):
    samples = [
        SampleRecord(sample_id="a", subject_id="S0", diagnosis="AD"),
        SampleRecord(sample_id="b", subject_id="S0", diagnosis="AD", kind="generated", shift=(1, 1, 1), sigma=0.5),
    ]
    batch = realize_batch(bank, samples, INPUT_MODES["sMRI_L+sMRI_R+DTI_L+DTI_R"], 8)
    assert len(batch) == 4
    assert all(b.shape == (2, 1, 8, 8, 8) and b.dtype == np.float32 for b in batch)
    np.testing.assert_allclose(batch[2][0] - batch[0][0], 0.5)


# Sample store and ingest

def test_sample_store_writes_little_endian_blob_and_sidecar(tmp_path, bank):
    sample = SampleRecord(sample_id="g1", subject_id="S0", diagnosis="AD", kind="generated", shift=(1, 0, 0), sigma=0.3)
    tensors = realize_sample(bank, sample, INPUT_MODES["sMRI_L+sMRI_R"], 8)
    bin_path = save_sample(tmp_path, sample, tensors, ["sMRI:left_hippocampus", "sMRI:right_hippocampus"])
    assert bin_path.stat().st_size == 2 * 8 ** 3 * 4
    sidecar = json.loads((tmp_path / "g1.json").read_text())
    assert sidecar["shapes"] == [[1, 8, 8, 8], [1, 8, 8, 8]]
    assert sidecar["sample"]["shift"] == [1, 0, 0]
    loaded, back = load_stored_sample(tmp_path, "g1")
    assert loaded == sample
    np.testing.assert_array_equal(back[1], tensors[1])


def test_truncated_stored_sample(tmp_path, bank):
    sample = SampleRecord(sample_id="a", subject_id="S0", diagnosis="AD")
    bin_path = save_sample(tmp_path, sample, realize_sample(bank, sample, INPUT_MODES["sMRI_L+sMRI_R"], 8))
    bin_path.write_bytes(bin_path.read_bytes()[:-4])
    with pytest.raises(ManifestError):
        load_stored_sample(tmp_path, "a")
    with pytest.raises(MissingFileError):
        load_stored_sample(tmp_path, "absent")


def test_ingest_checks_declared_shape(tmp_path):
    path = write_nifti(tmp_path / "s.nii", np.ones((4, 5, 6), dtype=np.float32))
    volume = ingest_nifti(path, "S9", "sMRI", expected_shape=(4, 5, 6))
    assert volume.subject_id == "S9"
    with pytest.raises(ManifestError):
        ingest_nifti(path, "S9", "sMRI", expected_shape=(121, 145, 121))


# Synthetic cohort

def test_synth_cohort_is_reproducible_and_separates_classes():
    kwargs = dict(subjects_per_class={"AD": 2, "NC": 2}, centers=TINY_CENTERS, seed=1, roi_sizes=(8,),
                  volume_shape=(24, 16, 16), radius=2.5)
    a = synth_dataset(**kwargs)
    b = synth_dataset(**kwargs)
    assert [r.subject_id for r in a] == ["AD000", "AD001", "NC000", "NC001"]
    np.testing.assert_array_equal(a[0].volumes["sMRI"].grid, b[0].volumes["sMRI"].grid)
    x, y, z = TINY_CENTERS["left_hippocampus"]
    core = (slice(x - 1, x + 2), slice(y - 1, y + 2), slice(z - 1, z + 2))
    assert a[2].volumes["sMRI"].grid[core].mean() > a[0].volumes["sMRI"].grid[core].mean()
    assert a[2].volumes["MD-DTI"].grid[core].mean() < a[0].volumes["MD-DTI"].grid[core].mean()


def test_synth_rejects_centers_that_cannot_hold_the_roi():
    with pytest.raises(ROIOutOfBoundsError):
        check_fits(TINY_CENTERS, SynthConfig(volume_shape=(24, 16, 16)).volume_shape, [12])


def test_large_separation_splits_classes_on_mean_roi_intensity():
    records = synth_dataset(
        subjects_per_class={"AD": 5, "NC": 5}, centers=TINY_CENTERS, separation=3.0, seed=2, roi_sizes=(8,),
        volume_shape=(24, 16, 16), radius=2.5,
    )
    spec = ROISpec("left_hippocampus", tuple(TINY_CENTERS["left_hippocampus"]), 8)
    means = {dx: [extract_roi(r.volumes["sMRI"], spec).mean() for r in records if r.diagnosis == dx] for dx in ("AD", "NC")}
    assert max(means["AD"]) < min(means["NC"])
