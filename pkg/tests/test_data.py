import itertools
import os

import numpy as np
import pytest

from tlal.data import (
    CohortSplit,
    PatientScan,
    build_dataset,
    discover_cohort,
    extract_slices,
    generate_synthetic_cohort,
    ingest_patient,
    read_dataset,
    split_cohort,
    write_dataset,
    write_patient,
)
from tlal.errors import ConfigurationError, IngestionError, SamplingError, StratificationError, StructuralError
from tlal.evaluation import auc


def small_scan(pid="P1", grade="HGG", shape=(6, 6, 60), tumor_z=range(5, 45), seed=0):
    rng = np.random.default_rng(seed)
    vols = {m: rng.normal(size=shape).astype(np.float32) for m in ("T1", "T1C", "T2", "FLAIR")}
    mask = np.zeros(shape, bool)
    for z in tumor_z:
        mask[2:4, 2:4, z] = True
    return PatientScan(pid, grade, vols, mask)


def brats_cohort(n_hgg=259, n_lgg=76):
    return [(f"H{i:03d}", "HGG") for i in range(n_hgg)] + [(f"L{i:03d}", "LGG") for i in range(n_lgg)]


# ---------------------------------------------------------------- ingestion

def test_ingest_roundtrip(tmp_path):
    scan = small_scan("BraTS19_X_1", "HGG", shape=(240, 240, 155), tumor_z=range(60, 90))
    write_patient(scan, tmp_path)
    got = ingest_patient(tmp_path / "HGG" / "BraTS19_X_1", "BraTS19_X_1")
    assert got.grade == "HGG"
    assert got.shape == (240, 240, 155)
    assert set(got.volumes) == {"T1", "T1C", "T2", "FLAIR"}
    np.testing.assert_array_equal(got.tumor_mask, scan.tumor_mask)
    np.testing.assert_allclose(got.volumes["T2"], scan.volumes["T2"])


def test_mask_is_union_of_labels(tmp_path):
    import nibabel as nib

    scan = small_scan("P2", "LGG")
    pdir = write_patient(scan, tmp_path)
    seg = np.zeros(scan.shape, np.uint8)
    seg[0, 0, 1], seg[1, 1, 2], seg[2, 2, 4] = 1, 2, 4
    nib.save(nib.Nifti1Image(seg, np.eye(4)), str(pdir / "P2_seg.nii.gz"))
    got = ingest_patient(pdir, "P2")
    assert got.tumor_mask.sum() == 3
    assert list(got.tumor_planes()) == [1, 2, 4]


def test_missing_modality(tmp_path):
    pdir = write_patient(small_scan("P3"), tmp_path)
    os.remove(pdir / "P3_t2.nii.gz")
    with pytest.raises(IngestionError, match="missing modality T2"):
        ingest_patient(pdir, "P3")


def test_empty_mask_and_dimension_mismatch(tmp_path):
    import nibabel as nib

    pdir = write_patient(small_scan("P4"), tmp_path)
    nib.save(nib.Nifti1Image(np.zeros((6, 6, 60), np.uint8), np.eye(4)), str(pdir / "P4_seg.nii.gz"))
    with pytest.raises(StructuralError, match="empty"):
        ingest_patient(pdir, "P4")
    nib.save(nib.Nifti1Image(np.ones((6, 6, 59), np.uint8), np.eye(4)), str(pdir / "P4_seg.nii.gz"))
    with pytest.raises(StructuralError, match="dimension mismatch"):
        ingest_patient(pdir, "P4")


def test_discover_cohort(tmp_path):
    for scan in generate_synthetic_cohort(2, 1, seed=0).values():
        write_patient(scan, tmp_path)
    found = discover_cohort(tmp_path)
    assert [(p, g) for p, g, _ in found] == [("SYN_LGG_000", "LGG"), ("SYN_HGG_000", "HGG"), ("SYN_HGG_001", "HGG")]
    with pytest.raises(IngestionError):
        discover_cohort(tmp_path / "nowhere")


# ---------------------------------------------------------------- slices

def test_extract_slices_contract():
    scan = small_scan(tumor_z=range(0, 60))
    out = extract_slices(scan, 20, seed=5, image_size=32)
    zs = [s.z_index for s in out]
    assert len(set(zs)) == 20 and zs == sorted(zs)
    assert all(scan.tumor_mask[:, :, z].any() for z in zs)
    assert all(s.image.shape == (3, 32, 32) and s.image.dtype == np.float32 for s in out)
    assert all(s.label == 1 for s in out)
    again = extract_slices(scan, 20, seed=5, image_size=32)
    assert [s.sample_id for s in again] == [s.sample_id for s in out]
    assert all(np.array_equal(a.image, b.image) for a, b in zip(out, again))


def test_extract_all_planes_and_shortage():
    scan = small_scan(grade="LGG", tumor_z=range(10, 25))
    out = extract_slices(scan, 15, seed=1, image_size=16)
    assert [s.z_index for s in out] == list(range(10, 25))
    assert all(s.label == 0 for s in out)
    with pytest.raises(SamplingError, match="only 15"):
        extract_slices(scan, 16, seed=1)


def test_default_image_is_224():
    out = extract_slices(small_scan(), 1, seed=0)
    assert out[0].image.shape == (3, 224, 224)


def test_channel_order_is_t1_t1c_t2():
    scan = small_scan(tumor_z=range(0, 60))
    for i, m in enumerate(("T1", "T1C", "T2")):
        scan.volumes[m][:] = 0
        scan.volumes[m][0, 0, :] = i + 1
        scan.volumes[m][1, 1, :] = (i + 1) * 10 if m != "T1C" else 0
    img = extract_slices(scan, 1, seed=0, image_size=6)[0].image
    # min-max then ImageNet standardisation maps a channel's maximum to (1 - mean) / std
    assert img[0, 1, 1] == pytest.approx((1 - 0.485) / 0.229, rel=1e-5)
    assert img[1, 0, 0] == pytest.approx((1 - 0.456) / 0.224, rel=1e-5)


# ---------------------------------------------------------------- splitting

def test_brats_split_allocation():
    split = split_cohort(brats_cohort(), (203, 66, 66), seed=0)
    grades = {pid: pid[0] for pid, _ in brats_cohort()}
    counts = [(sum(grades[p] == "H" for p in ids), sum(grades[p] == "L" for p in ids))
              for ids in (split.train_ids, split.val_ids, split.test_ids)]
    assert counts == [(157, 46), (51, 15), (51, 15)]


def test_157_46_minimises_ratio_error():
    target = 259 / 76
    best = min(range(1, 203), key=lambda l: abs((203 - l) / l - target))
    assert (203 - best, best) == (157, 46)


def test_split_invariants_many_cohorts():
    for n_h, n_l, seed in itertools.product((20, 41, 60), (6, 9, 13), (0, 1)):
        cohort = brats_cohort(n_h, n_l)
        total = n_h + n_l
        sizes = (total - 2 * (total // 5), total // 5, total // 5)
        split = split_cohort(cohort, sizes, seed)
        parts = [set(split.train_ids), set(split.val_ids), set(split.test_ids)]
        assert set().union(*parts) == {p for p, _ in cohort}
        assert sum(map(len, parts)) == total
        for part, size in zip(parts, sizes):
            n_lgg = sum(p.startswith("L") for p in part)
            assert abs(n_lgg - size * n_l / total) < 1.0


def test_split_degenerate_and_deterministic():
    cohort = brats_cohort()
    s = split_cohort(cohort, (335, 0, 0), seed=3)
    assert len(s.train_ids) == 335 and not s.val_ids and not s.test_ids
    assert split_cohort(cohort, (203, 66, 66), 9) == split_cohort(cohort, (203, 66, 66), 9)
    assert split_cohort(cohort, (203, 66, 66), 9) != split_cohort(cohort, (203, 66, 66), 10)


def test_split_errors():
    with pytest.raises(ConfigurationError):
        split_cohort(brats_cohort(), (200, 66, 66), 0)
    with pytest.raises(StratificationError):
        split_cohort(brats_cohort(10, 1), (5, 3, 3), 0)
    with pytest.raises(StratificationError):
        CohortSplit(["a"], ["a"], [], 0)


# ---------------------------------------------------------------- assembly

def fake_scans(cohort):
    z = range(0, 30)
    return {pid: small_scan(pid, g, shape=(4, 4, 30), tumor_z=z, seed=i) for i, (pid, g) in enumerate(cohort)}


def test_dataset_totals_full_cohort():
    cohort = brats_cohort()
    scans = fake_scans(cohort)
    split = split_cohort(cohort, (203, 66, 66), seed=0)
    imb = build_dataset(split, scans, "imbalanced", seed=0, image_size=4)
    bal = build_dataset(split, scans, "balanced", seed=0, image_size=4)
    assert sum(map(len, imb)) == 6700
    assert sum(map(len, bal)) == 4870 == 259 * 10 + 76 * 30
    assert len(imb[0]) == 4060
    train_pids = imb[0].patient_ids
    assert not train_pids & imb[1].patient_ids and not train_pids & imb[2].patient_ids


def test_build_attributes_sampling_errors():
    cohort = [("A", "HGG"), ("B", "LGG")]
    scans = {"A": small_scan("A", "HGG", tumor_z=range(0, 25)), "B": small_scan("B", "LGG", tumor_z=range(0, 25))}
    split = split_cohort(cohort, (2, 0, 0), 0)
    with pytest.raises(SamplingError, match="patient B"):
        build_dataset(split, scans, "balanced", seed=0, image_size=8)


def test_dataset_persistence(tmp_path, tiny_datasets):
    train, val, test = tiny_datasets
    manifest = write_dataset({"train": train, "val": val, "test": test}, tmp_path)
    lines = manifest.read_text().splitlines()
    assert len(lines) == 1 + len(train) + len(val) + len(test)
    back = read_dataset(manifest)
    assert back["train"].sample_ids == train.sample_ids
    assert back["test"].variant == "imbalanced"
    assert all(np.array_equal(a.image, b.image) for a, b in zip(back["val"], val))


# ---------------------------------------------------------------- synthetic

def test_synthetic_counts_and_determinism():
    a = generate_synthetic_cohort(30, 10, seed=7)
    assert len(a) == 40 and sum(s.grade == "HGG" for s in a.values()) == 30
    b = generate_synthetic_cohort(30, 10, seed=7)
    pid = "SYN_LGG_004"
    for m in a[pid].volumes:
        assert np.array_equal(a[pid].volumes[m], b[pid].volumes[m])
    with pytest.raises(ConfigurationError):
        generate_synthetic_cohort(0, 10)


def _centroid_auc(train, test, labels):
    feats = lambda ds: np.stack([s.image[:, ::4, ::4].ravel() for s in ds])  # noqa: E731
    xtr, xte = feats(train), feats(test)
    direction = xtr[labels == 1].mean(0) - xtr[labels == 0].mean(0)
    return auc(xte @ direction, test.labels)


def test_synthetic_is_learnable_beyond_permutation_null():
    cohort = generate_synthetic_cohort(30, 10, seed=7)
    split = split_cohort([(p, s.grade) for p, s in cohort.items()], (24, 8, 8), seed=0)
    train, _, test = build_dataset(split, cohort, "imbalanced", seed=0, image_size=48)
    observed = _centroid_auc(train, test, train.labels)
    rng = np.random.default_rng(0)
    null = [_centroid_auc(train, test, rng.permutation(train.labels)) for _ in range(200)]
    assert observed > 0.5 + 3 * np.std(null)
