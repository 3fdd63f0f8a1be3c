"""Volumes in, labeled 2-D slice datasets out.

Axial planes are the last array axis (the BRATS/NIfTI convention, volume
shape ``(240, 240, 155)``). A slice image stacks the T1, T1C and T2 planes
as channels, is bilinearly resized to ``image_size`` and normalised per
channel: min-max to [0, 1], then standardised with ImageNet statistics.
"""
from __future__ import annotations

import json
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ._util import derive_seed
from .errors import (
    ConfigurationError,
    IngestionError,
    SamplingError,
    StratificationError,
    StructuralError,
)

logger = logging.getLogger(__name__)

MODALITIES = ("T1", "T1C", "T2", "FLAIR")
CHANNELS = ("T1", "T1C", "T2")
FILE_SUFFIX = {"T1": "t1", "T1C": "t1ce", "T2": "t2", "FLAIR": "flair", "SEG": "seg"}
GRADES = ("LGG", "HGG")
LABEL = {"LGG": 0, "HGG": 1}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
SLICES_PER_GRADE = {
    "imbalanced": {"HGG": 20, "LGG": 20},
    "balanced": {"HGG": 10, "LGG": 30},
}


@dataclass
class PatientScan:
    patient_id: str
    grade: str
    volumes: dict[str, np.ndarray]
    tumor_mask: np.ndarray

    def __post_init__(self):
        if self.grade not in GRADES:
            raise StructuralError(f"{self.patient_id}: unknown grade {self.grade!r}")
        shapes = {m: v.shape for m, v in self.volumes.items()}
        shapes["mask"] = self.tumor_mask.shape
        if len(set(shapes.values())) != 1:
            raise StructuralError(f"{self.patient_id}: dimension mismatch {shapes}")
        if self.tumor_mask.ndim != 3:
            raise StructuralError(f"{self.patient_id}: volumes must be 3-D, got {self.tumor_mask.shape}")
        if not self.tumor_mask.any():
            raise StructuralError(f"{self.patient_id}: tumor mask is empty")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tumor_mask.shape

    def tumor_planes(self, min_voxels: int = 1) -> np.ndarray:
        """Axial indices whose mask plane has at least ``min_voxels`` tumor voxels."""
        counts = self.tumor_mask.reshape(-1, self.tumor_mask.shape[-1]).sum(axis=0)
        return np.flatnonzero(counts >= min_voxels)


@dataclass
class SliceSample:
    sample_id: str
    patient_id: str
    z_index: int
    image: np.ndarray  # (3, H, W) float32
    label: int


@dataclass
class CohortSplit:
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    seed: int

    def __post_init__(self):
        a, b, c = set(self.train_ids), set(self.val_ids), set(self.test_ids)
        if a & b or a & c or b & c:
            raise StratificationError("split sets overlap")

    def split_of(self, patient_id: str) -> str:
        for name in ("train", "val", "test"):
            if patient_id in getattr(self, f"{name}_ids"):
                return name
        raise KeyError(patient_id)

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.__dict__, indent=2))
        return path

    @classmethod
    def from_json(cls, path: str | Path) -> "CohortSplit":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class SliceDataset:
    samples: list[SliceSample]
    variant: str
    per_grade_slice_counts: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[SliceSample]:
        return iter(self.samples)

    @property
    def sample_ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def patient_ids(self) -> set[str]:
        return {s.patient_id for s in self.samples}

    def subset(self, ids) -> "SliceDataset":
        """Samples whose id is in ``ids``, in dataset order."""
        wanted = set(ids)
        missing = wanted - set(self.sample_ids)
        if missing:
            raise KeyError(f"{len(missing)} ids not in dataset, e.g. {sorted(missing)[:3]}")
        return SliceDataset([s for s in self.samples if s.sample_id in wanted], self.variant,
                            dict(self.per_grade_slice_counts))


# ---------------------------------------------------------------- ingestion

def _load_nifti(path: Path) -> np.ndarray:
    import nibabel as nib

    return np.asarray(nib.load(str(path)).dataobj)


def _find_file(directory: Path, patient_id: str, key: str) -> Path | None:
    suffix = FILE_SUFFIX[key]
    for ext in (".nii.gz", ".nii"):
        candidate = directory / f"{patient_id}_{suffix}{ext}"
        if candidate.exists():
            return candidate
    return None


def ingest_patient(directory: str | Path, patient_id: str, grade: str | None = None) -> PatientScan:
    """Read one patient's modality volumes and segmentation.

    The grade defaults to the name of the parent directory (``HGG``/``LGG``),
    as in the public release layout. The tumor mask is the union of all
    non-background segmentation labels.
    """
    directory = Path(directory)
    if grade is None:
        grade = directory.parent.name.upper()
        if grade not in GRADES:
            raise IngestionError(f"{patient_id}: cannot infer grade from parent directory {directory.parent}")
    volumes = {}
    for modality in MODALITIES:
        path = _find_file(directory, patient_id, modality)
        if path is None:
            raise IngestionError(f"{patient_id}: missing modality {modality}")
        volumes[modality] = _load_nifti(path).astype(np.float32, copy=False)
    seg_path = _find_file(directory, patient_id, "SEG")
    if seg_path is None:
        raise IngestionError(f"{patient_id}: missing segmentation")
    mask = _load_nifti(seg_path) > 0
    return PatientScan(patient_id, grade, volumes, mask)


def discover_cohort(root: str | Path) -> list[tuple[str, str, Path]]:
    """List ``(patient_id, grade, directory)`` under ``root/HGG`` and ``root/LGG``."""
    root = Path(root)
    found = []
    for grade in GRADES:
        gdir = root / grade
        if not gdir.is_dir():
            continue
        for pdir in sorted(p for p in gdir.iterdir() if p.is_dir()):
            found.append((pdir.name, grade, pdir))
    if not found:
        raise IngestionError(f"no HGG/ or LGG/ patient directories under {root}")
    return found


class LazyCohort(Mapping):
    """patient_id -> PatientScan, loaded from disk on access.

    A full-size cohort does not fit in memory, so scans are read one at a
    time while the dataset is assembled.
    """

    def __init__(self, root: str | Path):
        self._entries = {pid: (grade, path) for pid, grade, path in discover_cohort(root)}

    def __getitem__(self, pid: str) -> PatientScan:
        grade, path = self._entries[pid]
        return ingest_patient(path, pid, grade)

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def grades(self) -> list[tuple[str, str]]:
        return [(pid, g) for pid, (g, _) in self._entries.items()]


def write_patient(scan: PatientScan, root: str | Path) -> Path:
    """Write a scan as NIfTI files in the release layout ``root/<grade>/<id>/``."""
    import nibabel as nib

    pdir = Path(root) / scan.grade / scan.patient_id
    pdir.mkdir(parents=True, exist_ok=True)
    affine = np.eye(4)
    for modality, vol in scan.volumes.items():
        img = nib.Nifti1Image(vol.astype(np.float32), affine)
        nib.save(img, str(pdir / f"{scan.patient_id}_{FILE_SUFFIX[modality]}.nii.gz"))
    nib.save(nib.Nifti1Image(scan.tumor_mask.astype(np.uint8), affine),
             str(pdir / f"{scan.patient_id}_{FILE_SUFFIX['SEG']}.nii.gz"))
    return pdir


# ---------------------------------------------------------------- slices

def prepare_image(planes: Sequence[np.ndarray], image_size: int = 224,
                  mean: Sequence[float] = IMAGENET_MEAN, std: Sequence[float] = IMAGENET_STD) -> np.ndarray:
    """Stack 2-D planes into a normalised ``(C, image_size, image_size)`` float32 array."""
    x = torch.from_numpy(np.stack([np.asarray(p, dtype=np.float32) for p in planes]))[None]
    if x.shape[-2:] != (image_size, image_size):
        x = F.interpolate(x, size=(image_size, image_size), mode="bilinear", align_corners=False)
    x = x[0]
    lo = x.amin(dim=(1, 2), keepdim=True)
    hi = x.amax(dim=(1, 2), keepdim=True)
    x = (x - lo) / torch.clamp(hi - lo, min=1e-8)
    m = torch.tensor(mean, dtype=torch.float32).view(-1, 1, 1)
    s = torch.tensor(std, dtype=torch.float32).view(-1, 1, 1)
    return ((x - m) / s).numpy()


def extract_slices(scan: PatientScan, n_slices: int, seed: int, image_size: int = 224,
                   channels: Sequence[str] = CHANNELS, min_tumor_voxels: int = 1) -> list[SliceSample]:
    """Draw ``n_slices`` distinct tumor-bearing axial planes uniformly at random.

    Returned samples are ordered by z index.
    """
    planes = scan.tumor_planes(min_tumor_voxels)
    if n_slices < 1:
        raise ConfigurationError("n_slices must be >= 1")
    if len(planes) < n_slices:
        raise SamplingError(
            f"{scan.patient_id}: requested {n_slices} slices but only {len(planes)} tumor-bearing planes available"
        )
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(planes, size=n_slices, replace=False))
    label = LABEL[scan.grade]
    out = []
    for z in chosen.tolist():
        image = prepare_image([scan.volumes[c][:, :, z] for c in channels], image_size)
        out.append(SliceSample(f"{scan.patient_id}_z{z:03d}", scan.patient_id, z, image, label))
    return out


# ---------------------------------------------------------------- splitting

def _largest_remainder(total: int, weights: Sequence[int]) -> list[int]:
    """Integer apportionment of ``total`` proportional to ``weights``.

    Remainder ties go to the earlier position.
    """
    denom = sum(weights)
    if denom == 0:
        return [0] * len(weights)
    exact = [(total * w, denom) for w in weights]
    floors = [num // den for num, den in exact]
    rems = [(num % den, -i) for i, (num, den) in enumerate(exact)]
    left = total - sum(floors)
    for _, neg_i in sorted(rems, reverse=True)[:left]:
        floors[-neg_i] += 1
    return floors


def split_cohort(patients: Sequence[tuple[str, str]], sizes: Sequence[int], seed: int) -> CohortSplit:
    """Patient-level split stratified by grade.

    LGG patients are apportioned to the three splits by largest-remainder
    rounding of the cohort ratio; the remaining places take HGG patients.
    """
    if len(sizes) != 3 or any(s < 0 for s in sizes):
        raise ConfigurationError(f"sizes must be three non-negative integers, got {sizes}")
    ids = [pid for pid, _ in patients]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate patient ids in cohort")
    if sum(sizes) != len(patients):
        raise ConfigurationError(f"split sizes {tuple(sizes)} sum to {sum(sizes)}, cohort has {len(patients)}")
    by_grade = {g: sorted(pid for pid, gr in patients if gr == g) for g in GRADES}
    unknown = [gr for _, gr in patients if gr not in GRADES]
    if unknown:
        raise ConfigurationError(f"unknown grades {set(unknown)}")

    n_lgg = _largest_remainder(len(by_grade["LGG"]), sizes)
    n_hgg = [s - k for s, k in zip(sizes, n_lgg)]
    if any(h < 0 for h in n_hgg) or sum(n_hgg) != len(by_grade["HGG"]):
        raise StratificationError(f"cannot stratify sizes {tuple(sizes)} over grades "
                                  f"{ {g: len(v) for g, v in by_grade.items()} }")
    for name, size, h, l in zip(("train", "val", "test"), sizes, n_hgg, n_lgg):
        if size > 0 and (h == 0 or l == 0) and by_grade["HGG"] and by_grade["LGG"]:
            raise StratificationError(
                f"{name} split of {size} patients gets {h} HGG / {l} LGG; a grade stratum is too small"
            )

    rng = np.random.default_rng(seed)
    shuffled = {g: [v[i] for i in rng.permutation(len(v))] for g, v in by_grade.items()}
    parts: list[list[str]] = []
    offsets = {"HGG": 0, "LGG": 0}
    for h, l in zip(n_hgg, n_lgg):
        part = []
        for g, k in (("HGG", h), ("LGG", l)):
            part += shuffled[g][offsets[g]:offsets[g] + k]
            offsets[g] += k
        parts.append(sorted(part))
    return CohortSplit(parts[0], parts[1], parts[2], seed)


# ---------------------------------------------------------------- assembly

def build_dataset(split: CohortSplit, scans: Mapping[str, PatientScan], variant: str, seed: int,
                  image_size: int = 224, channels: Sequence[str] = CHANNELS, min_tumor_voxels: int = 1,
                  slices_per_grade: Mapping[str, int] | None = None,
                  ) -> tuple[SliceDataset, SliceDataset, SliceDataset]:
    """Extract slices for every patient of the split.

    Each patient's draw is seeded from ``(seed, patient_id)``, so a patient's
    slices do not depend on which split it landed in or on cohort order.
    """
    if variant not in SLICES_PER_GRADE:
        raise ConfigurationError(f"unknown variant {variant!r}")
    counts = dict(slices_per_grade or SLICES_PER_GRADE[variant])
    out = []
    for ids in (split.train_ids, split.val_ids, split.test_ids):
        samples: list[SliceSample] = []
        for pid in sorted(ids):
            if pid not in scans:
                raise IngestionError(f"no scan for patient {pid}")
            scan = scans[pid]
            pseed = derive_seed(seed, f"slices:{pid}")
            try:
                samples += extract_slices(scan, counts[scan.grade], pseed, image_size, channels, min_tumor_voxels)
            except SamplingError as exc:
                raise SamplingError(f"patient {pid}: {exc}") from exc
        out.append(SliceDataset(samples, variant, counts))
    return out[0], out[1], out[2]


# ---------------------------------------------------------------- persistence

def write_dataset(datasets: Mapping[str, SliceDataset], out_dir: str | Path) -> Path:
    """Write slice arrays as ``.npy`` files plus a JSON-lines manifest.

    Manifest records: sample_id, patient_id, z_index, label, split, image
    (path relative to the manifest).
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "slices"
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "dataset.jsonl"
    variant = next(iter(datasets.values())).variant
    with manifest.open("w") as fh:
        meta = {"_meta": {"variant": variant,
                          "per_grade_slice_counts": next(iter(datasets.values())).per_grade_slice_counts}}
        fh.write(json.dumps(meta) + "\n")
        for split_name, ds in datasets.items():
            for s in ds:
                rel = Path("slices") / f"{s.sample_id}.npy"
                np.save(out_dir / rel, s.image)
                fh.write(json.dumps({
                    "sample_id": s.sample_id, "patient_id": s.patient_id, "z_index": s.z_index,
                    "label": s.label, "split": split_name, "image": str(rel),
                }) + "\n")
    return manifest


def read_dataset(manifest: str | Path) -> dict[str, SliceDataset]:
    manifest = Path(manifest)
    base = manifest.parent
    samples: dict[str, list[SliceSample]] = {"train": [], "val": [], "test": []}
    variant, counts = "imbalanced", {}
    with manifest.open() as fh:
        for line in fh:
            rec = json.loads(line)
            if "_meta" in rec:
                variant = rec["_meta"]["variant"]
                counts = rec["_meta"]["per_grade_slice_counts"]
                continue
            image = np.load(base / rec["image"])
            samples.setdefault(rec["split"], []).append(
                SliceSample(rec["sample_id"], rec["patient_id"], rec["z_index"], image, rec["label"]))
    return {k: SliceDataset(v, variant, dict(counts)) for k, v in samples.items()}


# ---------------------------------------------------------------- synthetic cohorts

@dataclass
class SyntheticParams:
    """Knobs for the synthetic cohort generator.

    HGG lesions are larger, enhance in T1C and carry a dark necrotic core;
    LGG lesions are smaller, non-enhancing and bright in T2. Per-patient
    contrast is drawn from overlapping grade-specific distributions so the
    task is learnable but not trivial. A fraction of tumor planes mimic the
    other grade, and a fraction are corrupted by acquisition artifacts;
    both act as outliers.
    """

    shape: tuple[int, int, int] = (48, 48, 40)
    noise: float = 0.1
    hgg_radius: tuple[float, float] = (0.22, 0.32)
    lgg_radius: tuple[float, float] = (0.14, 0.24)
    enhancement: dict = field(default_factory=lambda: {"HGG": (1.0, 0.3), "LGG": (0.1, 0.3)})
    t2_brightness: dict = field(default_factory=lambda: {"HGG": (0.5, 0.25), "LGG": (0.8, 0.25)})
    necrosis: dict = field(default_factory=lambda: {"HGG": (0.7, 0.25), "LGG": (0.05, 0.1)})
    mimic_fraction: float = 0.1
    artifact_fraction: float = 0.1
    artifact_strength: float = 4.0  # artifact noise sd, in units of ``noise``
    z_extent: tuple[float, float] = (0.8, 0.95)


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n, dtype=np.float32) for n in shape], indexing="ij")
    d = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return d


def _synth_patient(pid: str, grade: str, p: SyntheticParams, rng: np.random.Generator) -> PatientScan:
    X, Y, Z = p.shape
    brain_d = _ellipsoid(p.shape, (X / 2, Y / 2, Z / 2), (X * 0.45, Y * 0.45, Z * 0.6))
    brain = brain_d <= 1.0

    base = {m: rng.uniform(0.35, 0.6) for m in MODALITIES}
    rad_lo, rad_hi = p.hgg_radius if grade == "HGG" else p.lgg_radius
    r = rng.uniform(rad_lo, rad_hi) * X
    cx, cy = rng.uniform(X * 0.35, X * 0.65), rng.uniform(Y * 0.35, Y * 0.65)
    zr = rng.uniform(*p.z_extent) * Z / 2
    lesion_d = _ellipsoid(p.shape, (cx, cy, Z / 2), (r, r * rng.uniform(0.8, 1.2), zr))
    lesion = (lesion_d <= 1.0) & brain
    if not lesion.any():
        lesion[int(cx), int(cy), Z // 2] = True

    def draw(table):
        mu, sd = table[grade]
        return float(rng.normal(mu, sd))

    enh, t2b, nec = draw(p.enhancement), draw(p.t2_brightness), draw(p.necrosis)
    other = "LGG" if grade == "HGG" else "HGG"
    mimic = rng.random(Z) < p.mimic_fraction
    artifact = rng.random(Z) < p.artifact_fraction

    # per-plane appearance, mimic planes borrow the other grade's means
    enh_z = np.where(mimic, p.enhancement[other][0], enh).astype(np.float32)
    t2_z = np.where(mimic, p.t2_brightness[other][0], t2b).astype(np.float32)
    nec_z = np.where(mimic, p.necrosis[other][0], nec).astype(np.float32)

    rim = lesion & (lesion_d > 0.55)
    core = lesion & (lesion_d <= 0.3)
    vols = {}
    for m in MODALITIES:
        v = np.where(brain, base[m], 0.0).astype(np.float32)
        v += np.where(brain, 0.05 * np.sin(np.arange(X)[:, None, None] / 5.0 + rng.uniform(0, 6)), 0).astype(np.float32)
        if m == "T1":
            v -= (0.15 + 0.4 * nec_z[None, None, :]) * core
            v -= 0.1 * lesion
        elif m == "T1C":
            v += 0.6 * enh_z[None, None, :] * rim
            v -= 0.35 * nec_z[None, None, :] * core
        elif m == "T2":
            v += 0.6 * t2_z[None, None, :] * lesion
        else:
            v += 0.5 * lesion
        v += rng.normal(0, p.noise, size=p.shape).astype(np.float32) * brain
        noisy = artifact[None, None, :] & brain
        v += noisy * rng.normal(0, p.artifact_strength * p.noise, size=p.shape).astype(np.float32)
        vols[m] = v.astype(np.float32)
    return PatientScan(pid, grade, vols, lesion)


def generate_synthetic_cohort(n_hgg: int, n_lgg: int, image_params: SyntheticParams | None = None,
                              seed: int = 0) -> dict[str, PatientScan]:
    """Deterministic synthetic cohort; ids are ``SYN_HGG_000``, ``SYN_LGG_000``, ..."""
    if n_hgg < 1 or n_lgg < 1:
        raise ConfigurationError(f"n_hgg and n_lgg must be >= 1, got {n_hgg}, {n_lgg}")
    params = image_params or SyntheticParams()
    cohort = {}
    for grade, n in (("HGG", n_hgg), ("LGG", n_lgg)):
        for i in range(n):
            pid = f"SYN_{grade}_{i:03d}"
            rng = np.random.default_rng(derive_seed(seed, f"synth:{pid}"))
            cohort[pid] = _synth_patient(pid, grade, params, rng)
    return cohort
