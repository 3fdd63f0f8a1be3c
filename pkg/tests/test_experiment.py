import json
import math

import numpy as np
import pytest
import yaml

from tlal.backbone import Hyperparams
from tlal.errors import ConfigurationError, ConsistencyError, ReportError, StageError, StatisticsError
from tlal.evaluation import read_results, sweep_sample_size
from tlal.experiment import (
    RunManifest,
    load_config,
    output_lock,
    packaged_config,
    run_pipeline,
    stage_seeds,
    validate_config,
)
from tlal.reports import counts_table, emit_reports
from tlal.selection import SelectionResult
from tlal.uncertainty import UncertaintyRanking


def smoke_config(**changes):
    data = packaged_config("desk")
    data["model"]["max_epochs"] = 2
    data["n_runs"] = 2
    data["selection"]["range_windows"] = [[0, 30], [70, 100]]
    data["experiments"]["sweep_fractions"] = [0.1, 0.8]
    data.update(changes)
    return validate_config(data)


@pytest.fixture(scope="module")
def smoke(tmp_path_factory, weights_dir):
    out = tmp_path_factory.mktemp("smoke")
    return run_pipeline(smoke_config(), out / "run")


# ---------------------------------------------------------------- config

def test_packaged_configs_validate():
    for name in ("desk", "full_scale_imbalanced", "full_scale_balanced"):
        cfg = validate_config(packaged_config(name))
        assert cfg.n_runs == 10
    full = validate_config(packaged_config("full_scale_imbalanced"))
    assert full.split_sizes == (203, 66, 66)
    assert full.committee.learning_rates == (0.001, 0.0005, 0.0001)
    hp = full.model.hyperparams()
    assert (hp.learning_rate, hp.batch_size, hp.momentum, hp.l2_penalty, hp.epochs) == (0.001, 16, 0.8, 1e-4, 30)
    assert hp.replace(pretrained=False).epochs == 80
    assert full.image_size == 224 and full.model.arch == "alexnet"
    assert full.experiments.sweep_fractions == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
    assert validate_config(packaged_config("full_scale_balanced")).variant == "balanced"


def test_infeasible_fraction_rejected_before_training(tmp_path):
    data = packaged_config("desk")
    data["selection"]["sample_fraction"] = 0.9
    with pytest.raises(ConfigurationError, match="maximum feasible fraction is 0.8"):
        validate_config(data)
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(data))
    with pytest.raises(ConfigurationError):
        load_config(path)
    assert not (tmp_path / "runs").exists()


@pytest.mark.parametrize("patch", [
    {"unknown_key": 1},
    {"split_sizes": [20, 10, 10, 0]},
    {"split_sizes": [30, 5, 4]},
    {"n_runs": 1},
    {"variant": "other"},
    {"model": {"arch": "resnet"}},
    {"committee": {"learning_rates": [0.1, 0.1, 0.2]}},
    {"source": {"kind": "synthetic", "n_hgg": 30, "n_lgg": 10, "params": {"bogus": 1}}},
])
def test_config_rejections(patch):
    data = packaged_config("desk")
    data.update(patch)
    with pytest.raises(ConfigurationError):
        validate_config(data)


def test_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(packaged_config("desk")))
    cfg = load_config(path, seed=5, n_runs=3, output_dir=str(tmp_path / "o"))
    assert (cfg.seed, cfg.n_runs, cfg.output_dir) == (5, 3, str(tmp_path / "o"))


def test_stage_seeds_stable_under_more_runs():
    a = stage_seeds(smoke_config(n_runs=2))
    b = stage_seeds(smoke_config(n_runs=5))
    assert b["runs"][:2] == a["runs"]
    assert {k: v for k, v in a.items() if k != "runs"} == {k: v for k, v in b.items() if k != "runs"}


# ---------------------------------------------------------------- pipeline

def test_manifest_complete(smoke):
    m = RunManifest.load(smoke.path("manifest"))
    assert m.status == "completed" and m.finished
    for key in ("config", "cohort", "split", "dataset", "initial_subset", "committee", "probs", "ranking",
                "selections", "results", "summary", "summary_text"):
        assert m.has(key), key
    assert len(m.artifacts["committee"]) == 3
    assert m.tool_version and m.started <= m.finished
    assert set(m.derived_seeds) >= {"cohort", "split", "slices", "initial_subset", "committee", "runs"}
    results = read_results(m.path("results"))
    # 3 strategies + 2 range windows + 2 fractions x 2 sweep strategies, per run
    assert len(results) == 2 * (3 + 2 + 4)
    assert all(math.isfinite(r.val_auc) and math.isfinite(r.test_auc) for r in results)


def test_selections_respect_contract(smoke):
    ranking = UncertaintyRanking.from_csv(smoke.path("ranking"))
    n = len(ranking)
    initial = set(json.loads(smoke.path("initial_subset").read_text())["ids"])
    for rel in smoke.artifacts["selections"]:
        sel = SelectionResult.from_json(smoke.root / rel)
        assert sel.pool_size == n
        if sel.strategy == "proposed" and "sweep" not in rel:
            assert len(sel.selected_ids) == round(0.3 * n)
            assert 0.30 - 1e-9 <= sel.total_label_fraction <= 0.60 + 1e-9
            assert sel.newly_labeled_count == len(sel.id_set - initial)
    assert len(initial) == round(0.3 * n)


def test_lock_blocks_second_orchestrator(tmp_path):
    with output_lock(tmp_path):
        with pytest.raises(ConsistencyError, match="locked"):
            run_pipeline(smoke_config(), tmp_path)
    assert not (tmp_path / ".lock").exists()


def test_stage_failure_keeps_partial_artifacts(tmp_path):
    cfg = smoke_config(min_tumor_voxels=10**6)
    with pytest.raises(StageError) as info:
        run_pipeline(cfg, tmp_path / "r")
    assert info.value.stage == "dataset"
    assert "tlal run --config" in str(info.value)
    m = RunManifest.load(tmp_path / "r" / "manifest.json")
    assert m.status == "failed:dataset"
    assert m.has("split") and m.has("cohort")


# ---------------------------------------------------------------- reports

def test_reports_all_kinds(smoke, tmp_path):
    paths = emit_reports(smoke, {"distribution", "range", "comparison", "sweep", "tables"}, tmp_path)
    names = {p.name for p in paths}
    for stem in ("distribution_unsorted", "distribution_sorted", "range_sweep", "comparison", "sample_size"):
        assert {f"{stem}.svg", f"{stem}.png"} <= names
    assert {"table_counts.txt", "table_counts.csv", "table_proposed_vs_baseline.txt"} <= names
    assert all(p.stat().st_size > 0 for p in paths)


def test_distribution_from_ranking_only(smoke, tmp_path):
    m = RunManifest.load(smoke.path("manifest"))
    m.artifacts = {k: v for k, v in m.artifacts.items() if k in ("manifest", "ranking")}
    paths = emit_reports(m, {"distribution"}, tmp_path)
    assert sorted({p.stem for p in paths}) == ["distribution_sorted", "distribution_unsorted"]
    with pytest.raises(ReportError, match="runs"):
        emit_reports(m, {"sweep"}, tmp_path)


def test_sweep_report_needs_sweep_runs(smoke, tmp_path):
    from tlal.reports import plot_sample_size

    results = [r for r in read_results(smoke.path("results")) if not r.strategy.startswith("sweep_")]
    with pytest.raises(ReportError, match="sweep"):
        plot_sample_size(results, tmp_path)


def test_counts_row():
    assert counts_table(4060) == [406, 812, 1218, 1624, 2030, 2436, 2842, 3248]


def test_unknown_report_kind(smoke):
    with pytest.raises(ReportError):
        emit_reports(smoke, {"heatmap"})


# ---------------------------------------------------------------- sweep

def test_sweep_learning_curve(tiny_datasets):
    train, val, test = tiny_datasets
    hp = Hyperparams(learning_rate=0.01, max_epochs=2, arch="alexnet-tiny")
    seeds = list(range(10))
    aggs = sweep_sample_size(train, val, test, None, [0.1, 0.8], ["random"], 10, seeds, hp)
    assert [a.sample_fraction for a in aggs] == [0.1, 0.8]
    assert aggs[1].mean_auc >= aggs[0].mean_auc - 0.02


def test_sweep_rejections(tiny_datasets):
    train, val, test = tiny_datasets
    hp = Hyperparams(max_epochs=1, arch="alexnet-tiny")
    with pytest.raises(ConfigurationError):
        sweep_sample_size(train, val, test, None, [0.9], ["uncertainty"], 2, [0, 1], hp)
    with pytest.raises(StatisticsError):
        sweep_sample_size(train, val, test, None, [0.3], ["random"], 1, [0], hp)


def test_counts_on_full_scale_pool():
    from tlal._util import fraction_count

    assert [fraction_count(f / 10, 4060) for f in range(1, 9)] == [406, 812, 1218, 1624, 2030, 2436, 2842, 3248]
    assert np.isclose(fraction_count(0.3, 4060) / 4060, 0.3, atol=1e-3)
