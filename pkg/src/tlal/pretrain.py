"""Source-domain pretraining for the small backbone.

ImageNet weights only exist for the full-size network. For CPU runs the
small backbone is pretrained instead on a synthetic source cohort whose
acquisition statistics differ from the default target generator
(balanced grades, higher noise, no artifacts or mimic planes). The recipe
is deterministic and its output is cached in the weights directory.
"""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import torch

logger = logging.getLogger(__name__)

SOURCE_RECIPE = {
    "n_per_grade": 60,
    "split": (100, 10, 10),
    "params": {"noise": 0.15, "artifact_fraction": 0.0, "mimic_fraction": 0.0},
    "image_size": 48,
    "seed": 999,
    "epochs": 8,
    "learning_rate": 0.02,
}


def recipe_key(recipe: dict = SOURCE_RECIPE) -> str:
    return hashlib.sha256(json.dumps(recipe, sort_keys=True).encode()).hexdigest()[:10]


def tiny_weights_path(weights_dir: Path, recipe: dict = SOURCE_RECIPE) -> Path:
    return Path(weights_dir) / f"alexnet-tiny-synthetic-{recipe_key(recipe)}.pt"


def pretrain_tiny(recipe: dict = SOURCE_RECIPE) -> dict[str, torch.Tensor]:
    from .backbone import Hyperparams, build_model, finetune
    from .data import SyntheticParams, build_dataset, generate_synthetic_cohort, split_cohort

    n = recipe["n_per_grade"]
    cohort = generate_synthetic_cohort(n, n, SyntheticParams(**recipe["params"]), seed=recipe["seed"])
    split = split_cohort([(p, s.grade) for p, s in cohort.items()], recipe["split"], seed=recipe["seed"])
    train, val, _ = build_dataset(split, cohort, "imbalanced", seed=recipe["seed"],
                                  image_size=recipe["image_size"])
    hp = Hyperparams(learning_rate=recipe["learning_rate"], max_epochs=recipe["epochs"], pretrained=False,
                     seed=recipe["seed"], arch="alexnet-tiny")
    trained = finetune(build_model(False, recipe["seed"], "alexnet-tiny"), train, val, hp)
    logger.info("source pretraining: best val AUC %.3f at epoch %d", trained.best_val_auc, trained.best_epoch)
    return trained.model.state_dict()


def load_or_build_tiny(weights_dir: Path, recipe: dict = SOURCE_RECIPE) -> dict[str, torch.Tensor]:
    path = tiny_weights_path(weights_dir, recipe)
    if path.exists():
        return torch.load(path, map_location="cpu", weights_only=True)
    logger.info("building source-pretrained weights at %s", path)
    state = pretrain_tiny(recipe)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    torch.save(state, tmp)
    tmp.replace(path)
    return state
