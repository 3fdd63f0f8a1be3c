"""Command-line interface.

``tlal run`` executes a whole experiment from a config file. The other
subcommands run one stage each against a work directory, reading the
artifacts earlier stages left there and recording their own in the
directory's ``manifest.json``::

    tlal synth --out cohort/ --n-hgg 30 --n-lgg 10
    tlal ingest --data-root cohort/ --work w/
    tlal split --work w/ --sizes 24 8 8
    tlal build --work w/ --image-size 48
    tlal committee --work w/ --arch alexnet-tiny --lrs 0.01 0.005 0.001 --max-epochs 5
    tlal score --work w/
    tlal rank --work w/
    tlal select --work w/ --strategy proposed --fraction 0.3
    tlal train --work w/ --selection w/selections/proposed_f0.3_run00.json
    tlal evaluate --work w/ --checkpoint w/checkpoints/proposed_f0.3_run00.pt
    tlal report --manifest w/manifest.json --kinds distribution tables
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

from . import __version__
from .errors import TlalError

logger = logging.getLogger("tlal")


# ---------------------------------------------------------------- work directory

class Workspace:
    """A work directory plus its manifest, shared by the single-stage commands."""

    def __init__(self, root: str | Path):
        from .experiment import RunManifest, _now

        self.root = Path(root).resolve()
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / "manifest.json"
        if path.exists():
            self.manifest = RunManifest.load(path)
        else:
            self.manifest = RunManifest(
                config={"stages": {}}, derived_seeds={}, tool_version=__version__, started=_now(),
                platform=f"{platform.python_implementation()} {platform.python_version()}",
                artifacts={"manifest": str(path)}, status="partial")
        self.manifest.config.setdefault("stages", {})

    def require(self, key: str, stage: str) -> Path:
        if not self.manifest.has(key):
            raise TlalError(f"{self.root}: missing '{key}' artifact; run 'tlal {stage}' first")
        value = self.manifest.artifacts[key]
        return self.root if isinstance(value, list) else self.manifest.path(key)

    def record(self, stage: str, params: dict, artifacts: dict, seed: int | None = None) -> None:
        self.manifest.config["stages"][stage] = params
        if seed is not None:
            self.manifest.derived_seeds[stage] = seed
        self.manifest.artifacts.update(artifacts)
        self.manifest.save()

    def params(self, stage: str) -> dict:
        return self.manifest.config["stages"].get(stage, {})

    def datasets(self):
        from .data import read_dataset

        return read_dataset(self.require("dataset", "build"))

    def hyperparams(self, **overrides):
        from .backbone import Hyperparams

        hp = dict(self.params("committee").get("hyperparams", {}))
        hp.update({k: v for k, v in overrides.items() if v is not None})
        return Hyperparams(**hp)


def _lock(ws: Workspace):
    from .experiment import output_lock

    return output_lock(ws.root)


def _hp_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", choices=["alexnet", "alexnet-tiny"])
    p.add_argument("--scratch", action="store_true", help="random init instead of pretrained weights")
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--l2-penalty", type=float)


def _hp_overrides(args) -> dict:
    out = {"arch": args.arch, "learning_rate": args.learning_rate, "batch_size": args.batch_size,
           "max_epochs": args.max_epochs, "momentum": args.momentum, "l2_penalty": args.l2_penalty}
    if args.scratch:
        out["pretrained"] = False
    return out


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from .data import SyntheticParams, generate_synthetic_cohort, write_patient

    cohort = generate_synthetic_cohort(args.n_hgg, args.n_lgg, SyntheticParams(), seed=args.seed)
    for scan in cohort.values():
        write_patient(scan, args.out)
    print(f"wrote {len(cohort)} synthetic patients to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    from .data import discover_cohort, ingest_patient

    ws = Workspace(args.work)
    entries = discover_cohort(args.data_root)
    cohort = []
    for pid, grade, path in entries:
        if args.check:
            ingest_patient(path, pid, grade)
        cohort.append({"patient_id": pid, "grade": grade, "path": str(Path(path).resolve())})
    (ws.root / "cohort.json").write_text(json.dumps(cohort, indent=1))
    ws.record("ingest", {"data_root": str(Path(args.data_root).resolve())}, {"cohort": "cohort.json"})
    n_h = sum(c["grade"] == "HGG" for c in cohort)
    print(f"{len(cohort)} patients ({n_h} HGG, {len(cohort) - n_h} LGG)")
    return 0


def cmd_split(args) -> int:
    from ._util import derive_seed
    from .data import split_cohort

    ws = Workspace(args.work)
    cohort = json.loads(ws.require("cohort", "ingest").read_text())
    seed = derive_seed(args.seed, "split")
    split = split_cohort([(c["patient_id"], c["grade"]) for c in cohort], args.sizes, seed)
    split.to_json(ws.root / "split.json")
    ws.record("split", {"sizes": list(args.sizes), "master_seed": args.seed}, {"split": "split.json"}, seed)
    print(f"train/val/test patients: {len(split.train_ids)}/{len(split.val_ids)}/{len(split.test_ids)}")
    return 0


def cmd_build(args) -> int:
    from ._util import derive_seed
    from .data import CohortSplit, build_dataset, ingest_patient, write_dataset

    ws = Workspace(args.work)
    cohort = {c["patient_id"]: c for c in json.loads(ws.require("cohort", "ingest").read_text())}
    split = CohortSplit.from_json(ws.require("split", "split"))

    class _Scans(dict):
        def __missing__(self, pid):
            c = cohort[pid]
            return ingest_patient(c["path"], pid, c["grade"])

        def __contains__(self, pid):
            return pid in cohort

    seed = derive_seed(args.seed, "slices")
    channels = tuple(args.channels)
    train, val, test = build_dataset(split, _Scans(), args.variant, seed, args.image_size, channels,
                                     args.min_tumor_voxels)
    write_dataset({"train": train, "val": val, "test": test}, ws.root / "data")
    ws.record("build", {"variant": args.variant, "image_size": args.image_size, "channels": list(channels),
                        "min_tumor_voxels": args.min_tumor_voxels, "master_seed": args.seed},
              {"dataset": "data/dataset.jsonl"}, seed)
    print(f"slices train/val/test: {len(train)}/{len(val)}/{len(test)}")
    return 0


def cmd_committee(args) -> int:
    from ._util import derive_seed
    from .backbone import Hyperparams
    from .committee import draw_initial_labeled_subset, train_committee

    ws = Workspace(args.work)
    ds = ws.datasets()
    overrides = {k: v for k, v in _hp_overrides(args).items() if v is not None}
    hp = Hyperparams(**overrides)
    iseed, cseed = derive_seed(args.seed, "initial_subset"), derive_seed(args.seed, "committee")
    with _lock(ws):
        initial = draw_initial_labeled_subset(ds["train"], args.initial_fraction, iseed)
        (ws.root / "initial_subset.json").write_text(json.dumps(
            {"seed": iseed, "fraction": args.initial_fraction, "ids": sorted(initial)}, indent=1))
        committee = train_committee(ds["train"], initial, ds["val"], hp, tuple(args.lrs), seed=cseed)
        (ws.root / "committee").mkdir(exist_ok=True)
        paths = []
        for i, m in enumerate(committee.members):
            m.save(ws.root / f"committee/member{i}.pt")
            m.export_log(ws.root / f"committee/member{i}_log.csv")
            paths.append(f"committee/member{i}.pt")
            print(f"member {i}: lr={m.hyperparams.learning_rate:g} best val AUC {m.best_val_auc:.4f} "
                  f"(epoch {m.best_epoch})")
    ws.manifest.derived_seeds["initial_subset"] = iseed
    ws.record("committee", {"hyperparams": hp.__dict__, "learning_rates": list(args.lrs),
                            "initial_fraction": args.initial_fraction, "master_seed": args.seed},
              {"initial_subset": "initial_subset.json", "committee": paths}, cseed)
    return 0


def _load_committee(ws: Workspace):
    from .backbone import TrainedModel
    from .committee import Committee

    ws.require("committee", "committee")
    members = [TrainedModel.load(ws.root / p) for p in ws.manifest.artifacts["committee"]]
    initial = json.loads(ws.require("initial_subset", "committee").read_text())
    return Committee(members, frozenset(initial["ids"]), ws.manifest.derived_seeds.get("committee", 0))


def cmd_score(args) -> int:
    from .committee import score_pool

    ws = Workspace(args.work)
    tensor = score_pool(_load_committee(ws), ws.datasets()["train"])
    tensor.to_csv(ws.root / "probs.csv")
    ws.record("score", {}, {"probs": "probs.csv"})
    print(f"scored {len(tensor.sample_ids)} pool samples -> {ws.root / 'probs.csv'}")
    return 0


def cmd_rank(args) -> int:
    from .committee import ProbabilityTensor
    from .uncertainty import rank_tensor

    ws = Workspace(args.work)
    tensor = ProbabilityTensor.from_csv(ws.require("probs", "score"))
    ranking = rank_tensor(tensor.sample_ids, tensor.probs)
    ranking.to_csv(ws.root / "ranking.csv")
    ws.record("rank", {}, {"ranking": "ranking.csv"})
    top = ranking.records[0]
    print(f"ranked {len(ranking)} samples; top {top.sample_id} score {top.score:.6f}")
    return 0


def _selection_path(ws: Workspace, strategy: str, fraction: float, run: int) -> Path:
    from .experiment import _selection_name

    path = ws.root / _selection_name(strategy, fraction, run)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_select(args) -> int:
    from .selection import select_all, select_proposed, select_random, select_range
    from .uncertainty import UncertaintyRanking

    ws = Workspace(args.work)
    initial = None
    if ws.manifest.has("initial_subset") and not args.ignore_initial:
        initial = json.loads(ws.manifest.path("initial_subset").read_text())["ids"]
    fraction = args.fraction
    if args.strategy == "baseline":
        sel, fraction = select_all(ws.datasets()["train"].sample_ids), 1.0
    elif args.strategy == "random":
        sel = select_random(ws.datasets()["train"].sample_ids, fraction, args.seed, initial)
    else:
        ranking = UncertaintyRanking.from_csv(ws.require("ranking", "rank"))
        if args.strategy == "proposed":
            sel = select_proposed(ranking, args.discard_pct, fraction, args.seed, initial)
        else:
            if not args.window:
                raise TlalError("--strategy range needs --window LO HI")
            sel = select_range(ranking, *args.window, initial_labeled=initial)
            fraction = len(sel.selected_ids) / sel.pool_size
    name = args.strategy if args.strategy != "range" else f"range_{args.window[0]:g}_{args.window[1]:g}"
    path = _selection_path(ws, name, fraction, args.run)
    sel.to_json(path)
    rel = str(path.relative_to(ws.root))
    sels = list(ws.manifest.artifacts.get("selections", []))
    if rel not in sels:
        sels.append(rel)
    ws.record("select", {"last": rel}, {"selections": sels})
    print(f"{len(sel.selected_ids)} selected ({sel.newly_labeled_count} newly labeled, "
          f"labeling cost {sel.total_label_fraction:.4f}) -> {path}")
    return 0


def cmd_train(args) -> int:
    from .backbone import build_model, finetune
    from .selection import SelectionResult

    ws = Workspace(args.work)
    ds = ws.datasets()
    sel = SelectionResult.from_json(args.selection)
    hp = ws.hyperparams(seed=args.seed, **_hp_overrides(args))
    with _lock(ws):
        model = build_model(hp.pretrained, args.seed, hp.arch)
        trained = finetune(model, ds["train"].subset(sel.selected_ids), ds["val"], hp)
        out = ws.root / "checkpoints" / f"{Path(args.selection).stem}.pt"
        out.parent.mkdir(exist_ok=True)
        trained.save(out)
    cks = list(ws.manifest.artifacts.get("checkpoints", []))
    rel = str(out.relative_to(ws.root))
    if rel not in cks:
        cks.append(rel)
    ws.record("train", {"last": rel}, {"checkpoints": cks})
    print(f"best val AUC {trained.best_val_auc:.4f} at epoch {trained.best_epoch} -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .backbone import TrainedModel, predict_probs
    from .evaluation import ResultsLedger, RunResult, auc
    from .selection import SelectionResult

    ws = Workspace(args.work)
    test = ws.datasets()["test"]
    trained = TrainedModel.load(args.checkpoint)
    test_auc = auc(predict_probs(trained, list(test))[:, 1], test.labels)
    stem = Path(args.checkpoint).stem
    sel_path = ws.root / "selections" / f"{stem}.json"
    strategy, fraction = stem, 1.0
    if sel_path.exists():
        sel = SelectionResult.from_json(sel_path)
        strategy = stem.split("_f")[0]
        fraction = len(sel.selected_ids) / sel.pool_size
    result = RunResult(strategy, fraction, trained.hyperparams.seed, trained.best_val_auc, test_auc)
    ResultsLedger(ws.root / "results.csv").append(result)
    ws.record("evaluate", {}, {"results": "results.csv"})
    print(f"{strategy}: val AUC {result.val_auc:.4f}  test AUC {test_auc:.4f}")
    return 0


def cmd_sweep(args) -> int:
    from ._util import derive_seed
    from .evaluation import ResultsLedger, sweep_sample_size
    from .uncertainty import UncertaintyRanking

    ws = Workspace(args.work)
    ds = ws.datasets()
    ranking = UncertaintyRanking.from_csv(ws.require("ranking", "rank")) if "uncertainty" in args.strategies else None
    hp = ws.hyperparams(**_hp_overrides(args))
    seeds = [derive_seed(args.seed, "run", r) for r in range(args.runs)]
    ledger = ResultsLedger(ws.root / "results.csv")
    sels = list(ws.manifest.artifacts.get("selections", []))

    def on_run(result, sel):
        result.strategy = f"sweep_{result.strategy}"
        ledger.append(result)
        path = _selection_path(ws, result.strategy, result.sample_fraction, seeds.index(result.seed))
        sel.to_json(path)
        sels.append(str(path.relative_to(ws.root)))

    with _lock(ws):
        aggs = sweep_sample_size(ds["train"], ds["val"], ds["test"], ranking, args.fractions, args.strategies,
                                 args.runs, seeds, hp, args.discard_pct, on_run=on_run)
    ws.record("sweep", {"fractions": args.fractions, "strategies": args.strategies, "runs": args.runs},
              {"results": "results.csv", "selections": sels})
    for a in aggs:
        print(f"{a.strategy:<12} {a.sample_fraction:>5g}  {a.formatted()}")
    return 0


def cmd_report(args) -> int:
    from .errors import ReportError
    from .experiment import RunManifest
    from .reports import KINDS, emit_reports

    manifest = RunManifest.load(args.manifest)
    if args.kinds:
        paths = emit_reports(manifest, args.kinds, args.out)
    else:
        # explicit kinds fail loudly; the default just skips what cannot be drawn yet
        paths = []
        for kind in KINDS:
            try:
                paths += emit_reports(manifest, [kind], args.out)
            except ReportError as exc:
                print(f"skipped {kind}: {exc}", file=sys.stderr)
    for p in paths:
        print(p)
    return 0


def cmd_replay(args) -> int:
    from .experiment import replay

    report = replay(args.manifest, args.out, args.tolerance)
    print(json.dumps(report, indent=2))
    print("replay: selections identical, AUCs within tolerance")
    return 0


def cmd_pretrain(args) -> int:
    from .backbone import _weights_dir
    from .pretrain import load_or_build_tiny, tiny_weights_path

    target = Path(args.weights_dir) if args.weights_dir else _weights_dir()
    load_or_build_tiny(target)
    print(tiny_weights_path(target))
    return 0


def cmd_run(args) -> int:
    from .experiment import load_config, packaged_config, run_pipeline, validate_config

    overrides = {"seed": args.seed, "n_runs": args.runs, "output_dir": args.out}
    if args.config:
        cfg = load_config(args.config, **overrides)
    else:
        data = packaged_config("full_scale_" + (args.variant or "imbalanced") if args.full_scale else "desk")
        data.update({k: v for k, v in overrides.items() if v is not None})
        cfg = validate_config(data)
    if args.data_root or args.variant:
        data = cfg.model_dump(mode="json")
        if args.data_root:
            data["source"] = {"kind": "directory", "root": args.data_root}
        if args.variant:
            data["variant"] = args.variant
        cfg = validate_config(data)
    t0 = time.perf_counter()
    manifest = run_pipeline(cfg)
    print(manifest.path("summary_text").read_text(), end="")
    print(f"manifest: {manifest.path('manifest')}  ({time.perf_counter() - t0:.0f}s)")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tlal", description="Uncertainty-guided sample selection "
                                     "for brain tumor grading with a transfer-learned committee.")
    parser.add_argument("--version", action="version", version=f"tlal {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a full experiment from a config")
    p.add_argument("--config", help="YAML config (default: bundled desk config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--runs", type=int)
    p.add_argument("--full-scale", action="store_true", help="use the bundled full-scale config")
    p.add_argument("--data-root", help="cohort root with HGG/ and LGG/ patient directories")
    p.add_argument("--variant", choices=["imbalanced", "balanced"])
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("synth", help="write a synthetic cohort as NIfTI files")
    p.add_argument("--out", required=True)
    p.add_argument("--n-hgg", type=int, default=30)
    p.add_argument("--n-lgg", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="index a cohort directory")
    p.add_argument("--data-root", required=True)
    p.add_argument("--work", required=True)
    p.add_argument("--check", action="store_true", help="load every volume to validate it")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="stratified patient-level split")
    p.add_argument("--work", required=True)
    p.add_argument("--sizes", type=int, nargs=3, required=True, metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("build", help="extract slices into a dataset")
    p.add_argument("--work", required=True)
    p.add_argument("--variant", choices=["imbalanced", "balanced"], default="imbalanced")
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--channels", nargs=3, default=["T1", "T1C", "T2"])
    p.add_argument("--min-tumor-voxels", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("committee", help="train the three-member committee")
    p.add_argument("--work", required=True)
    p.add_argument("--lrs", type=float, nargs=3, default=[0.001, 0.0005, 0.0001])
    p.add_argument("--initial-fraction", type=float, default=0.30)
    p.add_argument("--seed", type=int, default=0)
    _hp_args(p)
    p.set_defaults(func=cmd_committee)

    p = sub.add_parser("score", help="committee probabilities over the pool")
    p.add_argument("--work", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("rank", help="uncertainty scores and ranking")
    p.add_argument("--work", required=True)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("select", help="pick a training subset")
    p.add_argument("--work", required=True)
    p.add_argument("--strategy", choices=["proposed", "range", "random", "baseline"], default="proposed")
    p.add_argument("--fraction", type=float, default=0.30)
    p.add_argument("--discard-pct", type=float, default=10)
    p.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--run", type=int, default=0, help="run index used in the output name")
    p.add_argument("--ignore-initial", action="store_true", help="do not count the committee's subset as labeled")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("train", help="finetune on a selection")
    p.add_argument("--work", required=True)
    p.add_argument("--selection", required=True)
    p.add_argument("--seed", type=int, default=0)
    _hp_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="test AUC of a checkpoint, appended to results.csv")
    p.add_argument("--work", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="sample-size sweep")
    p.add_argument("--work", required=True)
    p.add_argument("--fractions", type=float, nargs="+", default=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
    p.add_argument("--strategies", nargs="+", choices=["uncertainty", "random"], default=["uncertainty", "random"])
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--discard-pct", type=float, default=10)
    p.add_argument("--seed", type=int, default=0)
    _hp_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="figures and tables from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kinds", nargs="+", choices=["distribution", "range", "comparison", "sweep", "tables"],
                   help="default: every kind the manifest has inputs for")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("replay", help="re-run a manifest and verify it reproduces")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("pretrain", help="build the cached source-pretrained weights for alexnet-tiny")
    p.add_argument("--weights-dir")
    p.set_defaults(func=cmd_pretrain)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (TlalError, OSError) as exc:
        print(f"tlal {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
