import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierseg.data import (CONDITIONS, AugmentParams, DatasetError, DatasetFormatError, FoldConfigError, SynthConfig,
                          SynthConfigError, apply_augmentation, augment, examples_for, kfold_split, load_dataset,
                          pipeline_labels, synth_generate, synth_patient, write_dataset, write_label_masks)
from hierseg.io import write_png
from hierseg.masks import MFP, MTP, MaskFormatError

SMALL = SynthConfig(patients=2, size=32, seed=3)


@pytest.fixture(scope="module")
def records():
    return synth_generate(SMALL)


def test_sixteen_conditions(records):
    assert len(CONDITIONS) == 16
    rec = records[0]
    assert sorted(rec.images) == sorted(CONDITIONS)
    assert rec.images[CONDITIONS[0]].shape == (32, 32, 3)
    assert rec.images[CONDITIONS[0]].dtype == np.uint8
    assert [r.patient_id for r in records] == ["00", "01"]


def test_pipeline_reproduces_ground_truth(records):
    for rec in records:
        derived = pipeline_labels(rec)
        for cond in CONDITIONS:
            np.testing.assert_array_equal(derived[cond], rec.labels[cond])


def test_full_overlap_has_no_mfp():
    rec = synth_patient(SynthConfig(patients=1, size=32, overlap=1.0, seed=1), 0)
    for lab in rec.labels.values():
        assert (lab == MTP).any() and not (lab == MFP).any()


def test_zero_overlap_has_no_mtp():
    rec = synth_patient(SynthConfig(patients=1, size=32, overlap=0.0, seed=1), 0)
    for lab in rec.labels.values():
        assert (lab == MFP).any() and not (lab == MTP).any()


def test_ofr_sessions_differ_only_outside_ap(records):
    for rec in records:
        diff = rec.ofr_test ^ rec.ofr_retest
        for ap in rec.ap.values():
            assert not (diff & ap).any()


def test_generation_is_deterministic():
    a, b = synth_patient(SMALL, 1), synth_patient(SMALL, 1)
    assert a.equals(b)
    assert not a.equals(synth_patient(SynthConfig(patients=2, size=32, seed=4), 1))


@pytest.mark.parametrize("kwargs", [dict(overlap=1.5), dict(overlap=-0.1), dict(size=4),
                                    dict(blob_radius=(0.3, 0.5))])
def test_invalid_synth_configs(kwargs):
    with pytest.raises(SynthConfigError):
        SynthConfig(**kwargs)


def test_write_load_round_trip(tmp_path, records):
    write_dataset(records, tmp_path)
    loaded = load_dataset(tmp_path)
    assert all(a.equals(b, labels=False) for a, b in zip(records, loaded))
    assert loaded[0].labels is None
    for rec in records:
        write_label_masks(rec.patient_id, rec.labels, tmp_path / "masks")
    with_labels = load_dataset(tmp_path, mask_root=tmp_path / "masks", require_labels=True)
    assert all(a.equals(b) for a, b in zip(records, with_labels))


def test_missing_ofr_retest(tmp_path, records):
    write_dataset(records[:1], tmp_path)
    (tmp_path / "patient_00" / "ofr_retest.png").unlink()
    with pytest.raises(DatasetError, match="ofr_retest"):
        load_dataset(tmp_path)


def test_illegal_gray_value_in_label_mask(tmp_path, records):
    write_dataset(records[:1], tmp_path)
    write_label_masks("00", records[0].labels, tmp_path)
    bad = np.zeros((32, 32), np.uint8)
    bad[0, 0] = 37
    write_png(tmp_path / "patient_00" / f"mask_{CONDITIONS[0]}.png", bad)
    with pytest.raises(DatasetFormatError, match="37") as info:
        load_dataset(tmp_path)
    assert isinstance(info.value, MaskFormatError)


def test_missing_labels_required(tmp_path, records):
    write_dataset(records[:1], tmp_path)
    with pytest.raises(DatasetError, match="label mask"):
        load_dataset(tmp_path, require_labels=True)
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nowhere")


def test_examples(records):
    ex = examples_for(records, ["01"])
    assert len(ex) == 16 and all(e.patient_id == "01" for e in ex)
    assert 0.0 <= ex[0].image.min() and ex[0].image.max() <= 1.0


@settings(max_examples=30)
@given(st.integers(4, 30), st.integers(2, 4), st.integers(0, 100))
def test_kfold_partitions_patients(n, k, seed):
    ids = [f"{i:02d}" for i in range(n)]
    folds = kfold_split(ids, k, seed)
    assert sorted(folds) == ids
    sizes = np.bincount(list(folds.values()), minlength=k)
    assert sizes.max() - sizes.min() <= 1 and sizes.min() >= 1
    assert folds == kfold_split(ids, k, seed)


def test_kfold_errors():
    with pytest.raises(FoldConfigError):
        kfold_split(["a", "b"], 3)
    with pytest.raises(FoldConfigError):
        kfold_split(["a", "a", "b"], 2)


def test_augmentation_keeps_labels_categorical():
    rng = np.random.default_rng(0)
    img = rng.random((32, 32, 3))
    lab = rng.integers(0, 3, size=(32, 32)).astype(np.uint8)
    out_img, out_lab = apply_augmentation(img, lab, AugmentParams(True, 12.0, 1.1))
    assert out_img.shape == img.shape and out_lab.shape == lab.shape
    assert set(np.unique(out_lab)) <= {0, 1, 2}
    assert 0.0 <= out_img.min() and out_img.max() <= 1.0


def test_flip_only_is_exact():
    img = np.random.default_rng(0).random((8, 8, 3))
    lab = np.arange(64).reshape(8, 8) % 3
    out_img, out_lab = apply_augmentation(img, lab, AugmentParams(flip=True))
    np.testing.assert_array_equal(out_img, img[:, ::-1])
    np.testing.assert_array_equal(out_lab, lab[:, ::-1])


def test_augment_is_seeded():
    img = np.random.default_rng(0).random((16, 16, 3))
    lab = np.zeros((16, 16), np.uint8)
    a = augment(img, lab, [1, 2, 3])
    b = augment(img, lab, [1, 2, 3])
    np.testing.assert_array_equal(a[0], b[0])
