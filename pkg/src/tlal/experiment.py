"""End-to-end orchestration: config, staged pipeline, manifest, replay."""
from __future__ import annotations

import json
import logging
import os
import platform
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import __version__
from ._util import derive_seed
from .backbone import Hyperparams
from .committee import ProbabilityTensor, draw_initial_labeled_subset, score_pool, train_committee
from .data import (
    CHANNELS,
    LazyCohort,
    SyntheticParams,
    build_dataset,
    generate_synthetic_cohort,
    read_dataset,
    split_cohort,
    write_dataset,
)
from .errors import ConfigurationError, ConsistencyError, StageError
from .evaluation import AggregateResult, ResultsLedger, aggregate_runs, group_results, run_strategy
from .selection import SelectionResult, check_proposed_feasible
from .uncertainty import UncertaintyRanking, rank_tensor

logger = logging.getLogger(__name__)

RUN_STRATEGIES = ("baseline", "baseline_scratch", "proposed", "random")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticSource(_Strict):
    kind: Literal["synthetic"] = "synthetic"
    n_hgg: int = Field(30, ge=1)
    n_lgg: int = Field(10, ge=1)
    seed: int | None = None  # defaults to a stage seed derived from the master seed
    params: dict = Field(default_factory=dict)

    @field_validator("params")
    @classmethod
    def _known_params(cls, v):
        known = set(SyntheticParams.__dataclass_fields__)
        unknown = set(v) - known
        if unknown:
            raise ValueError(f"unknown synthetic parameters {sorted(unknown)}; known: {sorted(known)}")
        return v


class DirectorySource(_Strict):
    kind: Literal["directory"] = "directory"
    root: str


class ModelConfig(_Strict):
    arch: Literal["alexnet", "alexnet-tiny"] = "alexnet"
    pretrained: bool = True
    learning_rate: float = Field(0.001, gt=0)
    batch_size: int = Field(16, ge=1)
    max_epochs: int | None = Field(None, ge=1)
    momentum: float = Field(0.8, ge=0, lt=1)
    l2_penalty: float = Field(1e-4, ge=0)

    def hyperparams(self, seed: int = 0) -> Hyperparams:
        return Hyperparams(self.learning_rate, self.batch_size, self.max_epochs, self.momentum,
                           self.l2_penalty, self.pretrained, seed, self.arch)


class CommitteeConfig(_Strict):
    learning_rates: tuple[float, float, float] = (0.001, 0.0005, 0.0001)
    initial_fraction: float = Field(0.30, gt=0, le=1)
    redraw_initial_per_run: bool = False

    @field_validator("learning_rates")
    @classmethod
    def _distinct(cls, v):
        if len(set(v)) != 3 or min(v) <= 0:
            raise ValueError("committee learning rates must be three distinct positive values")
        return v


class SelectionConfig(_Strict):
    discard_pct: float = Field(10, ge=0, lt=50)
    sample_fraction: float = Field(0.30, gt=0, le=1)
    range_windows: list[tuple[float, float]] = Field(default_factory=list)

    @field_validator("range_windows")
    @classmethod
    def _windows(cls, v):
        for lo, hi in v:
            if not 0 <= lo < hi <= 100:
                raise ValueError(f"invalid window ({lo}, {hi})")
        return v


class ExperimentsConfig(_Strict):
    strategies: list[str] = Field(default_factory=lambda: ["baseline", "proposed", "random"])
    sweep_fractions: list[float] = Field(default_factory=list)
    sweep_strategies: list[Literal["uncertainty", "random"]] = Field(
        default_factory=lambda: ["uncertainty", "random"])

    @field_validator("strategies")
    @classmethod
    def _strategies(cls, v):
        bad = set(v) - set(RUN_STRATEGIES)
        if bad:
            raise ValueError(f"unknown strategies {sorted(bad)}; choose from {RUN_STRATEGIES}")
        return v


class ExperimentConfig(_Strict):
    name: str = "experiment"
    source: SyntheticSource | DirectorySource = Field(default_factory=SyntheticSource, discriminator="kind")
    variant: Literal["imbalanced", "balanced"] = "imbalanced"
    split_sizes: tuple[int, int, int] = (24, 8, 8)
    image_size: int = Field(224, ge=8)
    channels: tuple[str, str, str] = CHANNELS
    min_tumor_voxels: int = Field(1, ge=1)
    model: ModelConfig = Field(default_factory=ModelConfig)
    committee: CommitteeConfig = Field(default_factory=CommitteeConfig)
    selection: SelectionConfig = Field(default_factory=SelectionConfig)
    experiments: ExperimentsConfig = Field(default_factory=ExperimentsConfig)
    n_runs: int = Field(10, ge=2)
    seed: int = 0
    output_dir: str = "runs/experiment"
    save_run_checkpoints: bool = False

    @model_validator(mode="after")
    def _cross_checks(self):
        if isinstance(self.source, SyntheticSource):
            total = self.source.n_hgg + self.source.n_lgg
            if sum(self.split_sizes) != total:
                raise ValueError(f"split_sizes {self.split_sizes} sum to {sum(self.split_sizes)}, "
                                 f"synthetic cohort has {total} patients")
        if any(s <= 0 for s in self.split_sizes):
            raise ValueError("train, val and test splits all need patients for training and AUC")
        sel = self.selection
        try:
            if "proposed" in self.experiments.strategies:
                check_proposed_feasible(sel.discard_pct, sel.sample_fraction)
            if "uncertainty" in self.experiments.sweep_strategies:
                for f in self.experiments.sweep_fractions:
                    check_proposed_feasible(sel.discard_pct, f)
        except ConfigurationError as exc:
            raise ValueError(str(exc)) from exc
        for f in self.experiments.sweep_fractions:
            if not 0 < f <= 1:
                raise ValueError(f"sweep fraction {f} outside (0, 1]")
        if bad := set(self.channels) - {"T1", "T1C", "T2", "FLAIR"}:
            raise ValueError(f"unknown channels {sorted(bad)}")
        return self

    @property
    def needs_ranking(self) -> bool:
        e = self.experiments
        return ("proposed" in e.strategies or bool(self.selection.range_windows)
                or "uncertainty" in e.sweep_strategies and bool(e.sweep_fractions))


def validate_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except Exception as exc:
        raise ConfigurationError(f"invalid experiment config: {exc}") from exc


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    """Read a YAML config; ``overrides`` (seed, n_runs, output_dir) win when not None."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: config must be a mapping")
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    return validate_config(data)


def packaged_config(name: str) -> dict:
    """One of the bundled configs (``desk``, ``full_scale_imbalanced``, ``full_scale_balanced``)."""
    entry = resources.files("tlal") / "configs" / f"{name}.yaml"
    if not entry.is_file():
        raise ConfigurationError(f"no bundled config named {name!r}")
    text = entry.read_text()
    return yaml.safe_load(text)


# ---------------------------------------------------------------- manifest

class RunManifest(BaseModel):
    config: dict
    derived_seeds: dict[str, int | list[int]]
    artifacts: dict[str, str | list[str]]
    tool_version: str
    started: str
    finished: str | None = None
    status: str = "running"
    platform: str = ""

    @property
    def root(self) -> Path:
        return Path(self.artifacts["manifest"]).parent

    def path(self, key: str) -> Path:
        return self.root / self.artifacts[key]

    def has(self, key: str) -> bool:
        if key not in self.artifacts:
            return False
        value = self.artifacts[key]
        if isinstance(value, list):
            return bool(value) and all((self.root / v).exists() for v in value)
        return (self.root / value).exists()

    def save(self) -> Path:
        path = Path(self.artifacts["manifest"])
        path.write_text(self.model_dump_json(indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        path = Path(path)
        m = cls.model_validate_json(path.read_text())
        m.artifacts["manifest"] = str(path)
        return m


@contextmanager
def output_lock(out_dir: Path):
    """Exclusive lock file so two orchestrators never share an output directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConsistencyError(f"{out_dir} is locked by another run ({lock}); remove it if stale") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def stage_seeds(cfg: ExperimentConfig) -> dict[str, int | list[int]]:
    m = cfg.seed
    return {
        "cohort": cfg.source.seed if isinstance(cfg.source, SyntheticSource) and cfg.source.seed is not None
        else derive_seed(m, "cohort"),
        "split": derive_seed(m, "split"),
        "slices": derive_seed(m, "slices"),
        "initial_subset": derive_seed(m, "initial_subset"),
        "committee": derive_seed(m, "committee"),
        "runs": [derive_seed(m, "run", r) for r in range(cfg.n_runs)],
    }


def _selection_name(strategy: str, fraction: float, run: int) -> str:
    return f"selections/{strategy}_f{fraction:g}_run{run:02d}.json"


# ---------------------------------------------------------------- pipeline

def run_pipeline(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunManifest:
    """Run every stage and persist its artifacts; returns the completed manifest.

    Stage order: cohort -> split -> dataset -> initial subset -> committee ->
    score -> rank -> runs (select, finetune, evaluate) -> aggregate.
    """
    out = Path(out_dir or cfg.output_dir)
    with output_lock(out):
        return _run_locked(cfg, out.resolve())


def _run_locked(cfg: ExperimentConfig, out: Path) -> RunManifest:
    seeds = stage_seeds(cfg)
    (out / "selections").mkdir(parents=True, exist_ok=True)
    snapshot = cfg.model_dump(mode="json")
    snapshot["output_dir"] = str(out)
    (out / "config.yaml").write_text(yaml.safe_dump(snapshot, sort_keys=False))
    manifest = RunManifest(
        config=snapshot, derived_seeds=seeds, tool_version=__version__, started=_now(),
        platform=f"{platform.python_implementation()} {platform.python_version()} {platform.machine()}",
        artifacts={"manifest": str(out / "manifest.json"), "config": "config.yaml"},
    )
    manifest.save()
    hint = f"fix the cause, then rerun with: tlal run --config {out / 'config.yaml'} --out <new dir>"

    @contextmanager
    def stage(name: str):
        t0 = time.perf_counter()
        logger.info("stage %s", name)
        try:
            yield
        except Exception as exc:
            manifest.status = f"failed:{name}"
            manifest.save()
            raise StageError(name, exc, hint) from exc
        logger.info("stage %s done in %.1fs", name, time.perf_counter() - t0)

    with stage("cohort"):
        if isinstance(cfg.source, SyntheticSource):
            scans = generate_synthetic_cohort(cfg.source.n_hgg, cfg.source.n_lgg,
                                              SyntheticParams(**_synthetic_kwargs(cfg.source.params)),
                                              seed=seeds["cohort"])
            grades = [(pid, s.grade) for pid, s in scans.items()]
        else:
            scans = LazyCohort(cfg.source.root)
            grades = scans.grades()
        (out / "cohort.json").write_text(json.dumps([{"patient_id": p, "grade": g} for p, g in grades], indent=1))
        manifest.artifacts["cohort"] = "cohort.json"

    with stage("split"):
        split = split_cohort(grades, cfg.split_sizes, seeds["split"])
        split.to_json(out / "split.json")
        manifest.artifacts["split"] = "split.json"

    with stage("dataset"):
        train, val, test = build_dataset(split, scans, cfg.variant, seeds["slices"], cfg.image_size,
                                         cfg.channels, cfg.min_tumor_voxels)
        del scans
        write_dataset({"train": train, "val": val, "test": test}, out / "data")
        manifest.artifacts["dataset"] = "data/dataset.jsonl"
        manifest.save()

    hp = cfg.model.hyperparams()
    rankings: dict[int, UncertaintyRanking] = {}
    initials: dict[int, frozenset[str]] = {}
    committee_paths: list[str] = []

    def committee_for(run: int):
        key = run if cfg.committee.redraw_initial_per_run else 0
        if key in rankings:
            return initials[key], rankings[key]
        suffix = f"_run{run:02d}" if cfg.committee.redraw_initial_per_run else ""
        iseed = derive_seed(seeds["initial_subset"], "redraw", run) if suffix else seeds["initial_subset"]
        cseed = derive_seed(seeds["committee"], "redraw", run) if suffix else seeds["committee"]
        with stage("initial_subset"):
            initial = draw_initial_labeled_subset(train, cfg.committee.initial_fraction, iseed)
            (out / f"initial_subset{suffix}.json").write_text(json.dumps(
                {"seed": iseed, "fraction": cfg.committee.initial_fraction, "ids": sorted(initial)}, indent=1))
            manifest.artifacts[f"initial_subset{suffix}"] = f"initial_subset{suffix}.json"
        with stage("committee"):
            committee = train_committee(train, initial, val, hp, cfg.committee.learning_rates, seed=cseed)
            (out / "committee").mkdir(exist_ok=True)
            for i, m in enumerate(committee.members):
                rel = f"committee/member{i}{suffix}.pt"
                m.save(out / rel)
                m.export_log(out / f"committee/member{i}{suffix}_log.csv")
                committee_paths.append(rel)
            manifest.artifacts["committee"] = committee_paths
        with stage("score"):
            tensor = score_pool(committee, train)
            tensor.to_csv(out / f"probs{suffix}.csv")
            manifest.artifacts[f"probs{suffix}"] = f"probs{suffix}.csv"
        with stage("rank"):
            ranking = rank_tensor(tensor.sample_ids, tensor.probs)
            ranking.to_csv(out / f"ranking{suffix}.csv")
            manifest.artifacts[f"ranking{suffix}"] = f"ranking{suffix}.csv"
        manifest.save()
        initials[key], rankings[key] = initial, ranking
        return initial, ranking

    ledger = ResultsLedger(out / "results.csv")
    manifest.artifacts["results"] = "results.csv"
    selections: list[str] = []
    checkpoints: list[str] = []
    split_id = _split_id(split)

    def record(result, sel: SelectionResult, run: int, trained=None):
        rel = _selection_name(result.strategy, result.sample_fraction, run)
        sel.to_json(out / rel)
        selections.append(rel)
        ledger.append(result)
        if trained is not None and cfg.save_run_checkpoints:
            ck = f"checkpoints/{Path(rel).stem}.pt"
            (out / "checkpoints").mkdir(exist_ok=True)
            trained.save(out / ck)
            checkpoints.append(ck)

    sel_cfg = cfg.selection
    for run, run_seed in enumerate(seeds["runs"]):
        initial, ranking = committee_for(run) if cfg.needs_ranking else (None, None)
        with stage(f"run{run:02d}"):
            for strategy in cfg.experiments.strategies:
                result, sel, trained = run_strategy(strategy, train, val, test, ranking, sel_cfg.sample_fraction,
                                                    run_seed, hp, sel_cfg.discard_pct, initial_labeled=initial)
                record(result, sel, run, trained)
            for window in sel_cfg.range_windows:
                result, sel, trained = run_strategy("range", train, val, test, ranking, 0.0, run_seed, hp,
                                                    window=tuple(window), initial_labeled=initial)
                record(result, sel, run, trained)
            for frac in cfg.experiments.sweep_fractions:
                for s in cfg.experiments.sweep_strategies:
                    result, sel, trained = run_strategy("proposed" if s == "uncertainty" else "random", train, val,
                                                        test, ranking, frac, run_seed, hp, sel_cfg.discard_pct,
                                                        initial_labeled=initial)
                    result.strategy = f"sweep_{s}"
                    record(result, sel, run, trained)
        manifest.artifacts["selections"] = selections
        manifest.save()

    with stage("aggregate"):
        if checkpoints:
            manifest.artifacts["checkpoints"] = checkpoints
        summary = summarize(ledger.read(), split_id)
        (out / "summary.json").write_text(json.dumps([a.__dict__ for a in summary], indent=2))
        (out / "summary.txt").write_text(format_summary(summary, len(train)))
        manifest.artifacts["summary"] = "summary.json"
        manifest.artifacts["summary_text"] = "summary.txt"

    manifest.status = "completed"
    manifest.finished = _now()
    manifest.save()
    return manifest


def _synthetic_kwargs(params: dict) -> dict:
    kw = dict(params)
    for k in ("shape", "hgg_radius", "lgg_radius", "z_extent"):
        if k in kw:
            kw[k] = tuple(kw[k])
    for k in ("enhancement", "t2_brightness", "necrosis"):
        if k in kw:
            kw[k] = {g: tuple(v) for g, v in kw[k].items()}
    return kw


def _split_id(split) -> str:
    import hashlib

    blob = json.dumps([split.train_ids, split.val_ids, split.test_ids]).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def summarize(results, split_id: str = "") -> list[AggregateResult]:
    """Aggregate val and test AUC for every (strategy, fraction) group with >= 2 runs."""
    out = []
    for (strategy, _), runs in sorted(group_results(results).items()):
        if len(runs) < 2:
            continue
        for metric in ("val_auc", "test_auc"):
            out.append(aggregate_runs(runs, metric, split_id))
    return out


def format_summary(summary: list[AggregateResult], pool_size: int) -> str:
    lines = [f"{'strategy':<24}{'fraction':>9}{'metric':>10}{'n':>4}  AUC (95% CI)"]
    for a in summary:
        frac = "" if a.sample_fraction is None else f"{a.sample_fraction:g}"
        lines.append(f"{a.strategy:<24}{frac:>9}{a.metric:>10}{a.n_runs:>4}  {a.formatted()}")
    lines.append(f"training pool: {pool_size} slices")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- replay

def replay(manifest_path: str | Path, out_dir: str | Path | None = None, auc_tol: float = 1e-6) -> dict:
    """Re-execute a manifest's config and compare selections and metrics.

    Returns a report dict; raises :class:`ConsistencyError` on any mismatch.
    """
    original = RunManifest.load(manifest_path)
    cfg = validate_config(original.config)
    out = Path(out_dir) if out_dir else original.root / "replay"
    fresh = run_pipeline(cfg, out)

    mismatched_sel = []
    for rel in original.artifacts.get("selections", []):
        a = SelectionResult.from_json(original.root / rel).id_set
        b = SelectionResult.from_json(fresh.root / rel).id_set
        if a != b:
            mismatched_sel.append(rel)
    from .evaluation import read_results

    ra, rb = read_results(original.path("results")), read_results(fresh.path("results"))
    if len(ra) != len(rb):
        raise ConsistencyError(f"replay produced {len(rb)} runs, original has {len(ra)}")
    max_diff = 0.0
    for x, y in zip(ra, rb):
        if (x.strategy, x.sample_fraction, x.seed) != (y.strategy, y.sample_fraction, y.seed):
            raise ConsistencyError(f"run order differs: {x} vs {y}")
        max_diff = max(max_diff, abs(x.val_auc - y.val_auc), abs(x.test_auc - y.test_auc))
    report = {
        "original": str(original.root), "replay": str(fresh.root),
        "selections_compared": len(original.artifacts.get("selections", [])),
        "selection_mismatches": mismatched_sel, "max_auc_difference": max_diff,
    }
    if mismatched_sel or max_diff > auc_tol:
        raise ConsistencyError(f"replay mismatch: {report}")
    return report


def load_run_artifacts(manifest: RunManifest) -> dict:
    """Datasets, ranking and probability tensor of a finished run, as objects."""
    out = {"datasets": read_dataset(manifest.path("dataset"))}
    if manifest.has("ranking"):
        out["ranking"] = UncertaintyRanking.from_csv(manifest.path("ranking"))
    if manifest.has("probs"):
        out["probs"] = ProbabilityTensor.from_csv(manifest.path("probs"))
    return out
