"""AlexNet-style classifier, finetuning loop and probability prediction.

The network is assembled from a layer table (:class:`BackboneSpec`). Module
indices mirror the reference AlexNet so that ImageNet weights load
directly into ``features.*`` and ``classifier.*``.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, DivergenceError, ResourceError, ShapeError, UndefinedMetricError
from .evaluation import auc

logger = logging.getLogger(__name__)

ALEXNET_WEIGHTS_URL = "https://download.pytorch.org/models/alexnet-owt-7be5be79.pth"
WEIGHTS_DIR_ENV = "TLAL_WEIGHTS_DIR"
OFFLINE_ENV = "TLAL_OFFLINE"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" | "maxpool" | "fc"
    out: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    pool_grid: int  # adaptive average pool output before the classifier
    n_classes: int = 2
    dropout: float = 0.5
    input_size: int = 224

    @property
    def convs(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "conv"]

    @property
    def fcs(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "fc"]

    def output_shapes(self, input_size: int | None = None) -> dict[str, tuple[int, ...]]:
        """Activation shape per layer, computed arithmetically (no forward pass)."""
        h = input_size or self.input_size
        c = 3
        shapes = {}
        for l in self.layers:
            if l.kind in ("conv", "maxpool"):
                h = (h + 2 * l.padding - l.kernel) // l.stride + 1
                if l.kind == "conv":
                    c = l.out
                shapes[l.name] = (c, h, h)
            else:
                shapes[l.name] = (l.out,)
        return shapes


def _alexnet_layers(widths, fc_width, n_classes, k1=11, s1=4, p1=2, k2=5) -> tuple[LayerSpec, ...]:
    c1, c2, c3, c4, c5 = widths
    return (
        LayerSpec("conv1", "conv", c1, k1, s1, p1),
        LayerSpec("maxpool1", "maxpool", kernel=3, stride=2),
        LayerSpec("conv2", "conv", c2, k2, 1, k2 // 2),
        LayerSpec("maxpool2", "maxpool", kernel=3, stride=2),
        LayerSpec("conv3", "conv", c3, 3, 1, 1),
        LayerSpec("conv4", "conv", c4, 3, 1, 1),
        LayerSpec("conv5", "conv", c5, 3, 1, 1),
        LayerSpec("maxpool3", "maxpool", kernel=3, stride=2),
        LayerSpec("fc1", "fc", fc_width),
        LayerSpec("fc2", "fc", fc_width),
        LayerSpec("fc3", "fc", n_classes),
    )


# Canonical topology. Conv2 runs at stride 1 so the 27x27 grid survives and
# maxpool2 yields 13x13, the only layout the pretrained weights fit.
ALEXNET = BackboneSpec("alexnet", _alexnet_layers((64, 192, 384, 256, 256), 4096, 2), pool_grid=6)

# Same five-conv / three-pool / three-FC shape, narrowed for CPU runs on
# small images (e.g. 32 or 48 pixels).
ALEXNET_TINY = BackboneSpec(
    "alexnet-tiny",
    _alexnet_layers((16, 32, 48, 32, 32), 64, 2, k1=5, s1=2, p1=2, k2=3),
    pool_grid=2,
    dropout=0.3,
    input_size=48,
)

ARCHITECTURES = {s.name: s for s in (ALEXNET, ALEXNET_TINY)}

# Nominal per-layer output sizes. The maxpool2 entry (14x14, following a
# stride-2 conv2) contradicts its neighbours and is not what the model computes.
TABLE_OUTPUT_SIZES = {
    "conv1": (64, 55, 55), "maxpool1": (64, 27, 27), "conv2": (192, 27, 27), "maxpool2": (192, 14, 14),
    "conv3": (384, 13, 13), "conv4": (256, 13, 13), "conv5": (256, 13, 13), "maxpool3": (256, 6, 6),
    "fc1": (4096,), "fc2": (4096,), "fc3": (2,),
}


class AlexNetClassifier(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        feats: list[nn.Module] = []
        in_ch = 3
        for l in spec.layers:
            if l.kind == "conv":
                feats += [nn.Conv2d(in_ch, l.out, l.kernel, l.stride, l.padding), nn.ReLU(inplace=True)]
                in_ch = l.out
            elif l.kind == "maxpool":
                feats.append(nn.MaxPool2d(l.kernel, l.stride))
        self.features = nn.Sequential(*feats)
        self.avgpool = nn.AdaptiveAvgPool2d((spec.pool_grid, spec.pool_grid))
        fc1, fc2, fc3 = (l.out for l in spec.fcs)
        flat = in_ch * spec.pool_grid ** 2
        self.classifier = nn.Sequential(
            nn.Dropout(spec.dropout), nn.Linear(flat, fc1), nn.ReLU(inplace=True),
            nn.Dropout(spec.dropout), nn.Linear(fc1, fc2), nn.ReLU(inplace=True),
            nn.Linear(fc2, fc3),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.avgpool(self.features(x))
        return self.classifier(torch.flatten(x, 1))

    def named_activations(self, x: torch.Tensor) -> dict[str, tuple[int, ...]]:
        """Per-layer activation shapes (without batch dim) from an actual forward pass."""
        shapes = {}
        h = x
        layer_names = [l.name for l in self.spec.layers if l.kind != "fc"]
        i = 0
        with torch.no_grad():
            for mod in self.features:
                h = mod(h)
                if isinstance(mod, (nn.Conv2d, nn.MaxPool2d)):
                    shapes[layer_names[i]] = tuple(h.shape[1:])
                    i += 1
            h = torch.flatten(self.avgpool(h), 1)
            fc_names = [l.name for l in self.spec.fcs]
            j = 0
            for mod in self.classifier:
                h = mod(h)
                if isinstance(mod, nn.Linear):
                    shapes[fc_names[j]] = tuple(h.shape[1:])
                    j += 1
        return shapes


def _weights_dir() -> Path:
    env = os.environ.get(WEIGHTS_DIR_ENV)
    return Path(env) if env else Path(torch.hub.get_dir()) / "checkpoints"


def load_pretrained_state(allow_download: bool | None = None) -> dict[str, torch.Tensor]:
    """ImageNet AlexNet weights from the local cache, fetching them if allowed."""
    if allow_download is None:
        allow_download = os.environ.get(OFFLINE_ENV, "").lower() not in ("1", "true", "yes")
    cache = _weights_dir()
    local = cache / Path(ALEXNET_WEIGHTS_URL).name
    if local.exists():
        return torch.load(local, map_location="cpu", weights_only=True)
    if not allow_download:
        raise ResourceError(f"pretrained weights not found at {local} and network fetching is disabled "
                            f"(set {WEIGHTS_DIR_ENV} to a directory holding {local.name})")
    try:
        return torch.hub.load_state_dict_from_url(ALEXNET_WEIGHTS_URL, model_dir=str(cache),
                                                  map_location="cpu", check_hash=True, progress=False)
    except Exception as exc:
        raise ResourceError(f"could not fetch pretrained weights: {exc}") from exc


def build_model(pretrained: bool, seed: int, arch: str = "alexnet",
                allow_download: bool | None = None) -> AlexNetClassifier:
    """Construct the classifier.

    With ``pretrained`` the feature extractor and first two FC layers take
    pretrained weights (ImageNet for ``alexnet``, the synthetic source
    recipe in :mod:`tlal.pretrain` for ``alexnet-tiny``) and the final layer
    is freshly initialised for two classes from ``seed``. Otherwise every
    weight is initialised from ``seed``.
    """
    if arch not in ARCHITECTURES:
        raise ConfigurationError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    spec = ARCHITECTURES[arch]
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = AlexNetClassifier(spec)
    finally:
        torch.random.set_rng_state(gen_state)
    if pretrained:
        if arch == "alexnet":
            state = load_pretrained_state(allow_download)
        else:
            from .pretrain import load_or_build_tiny

            state = load_or_build_tiny(_weights_dir())
        state = {k: v for k, v in state.items() if not k.startswith("classifier.6.")}
        missing, unexpected = model.load_state_dict(state, strict=False)
        if unexpected or set(missing) != {"classifier.6.weight", "classifier.6.bias"}:
            raise ResourceError(f"pretrained weights do not match topology: "
                                f"missing={missing} unexpected={unexpected}")
    return model


@dataclass
class Hyperparams:
    learning_rate: float = 0.001
    batch_size: int = 16
    max_epochs: int | None = None  # None -> 30 finetuning, 80 from scratch
    momentum: float = 0.8
    l2_penalty: float = 1e-4
    pretrained: bool = True
    seed: int = 0
    arch: str = "alexnet"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.max_epochs is not None and self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.l2_penalty < 0:
            raise ConfigurationError("l2_penalty must be non-negative")

    @property
    def epochs(self) -> int:
        if self.max_epochs is not None:
            return self.max_epochs
        return 30 if self.pretrained else 80

    def replace(self, **changes) -> "Hyperparams":
        d = asdict(self)
        d.update(changes)
        return Hyperparams(**d)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_auc: float


@dataclass
class TrainedModel:
    model: AlexNetClassifier
    best_val_auc: float
    best_epoch: int
    hyperparams: Hyperparams
    log: list[EpochLog] = field(default_factory=list)

    def save(self, path: str | Path) -> Path:
        """Checkpoint archive: weights, hyperparameters and the epoch log."""
        path = Path(path)
        torch.save({
            "state_dict": self.model.state_dict(),
            "arch": self.model.spec.name,
            "best_val_auc": self.best_val_auc,
            "best_epoch": self.best_epoch,
            "hyperparams": asdict(self.hyperparams),
            "log": [asdict(e) for e in self.log],
        }, path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "TrainedModel":
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
        model = AlexNetClassifier(ARCHITECTURES[blob["arch"]])
        model.load_state_dict(blob["state_dict"])
        model.eval()
        return cls(model, blob["best_val_auc"], blob["best_epoch"], Hyperparams(**blob["hyperparams"]),
                   [EpochLog(**e) for e in blob["log"]])

    def export_log(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_auc"])
            for e in self.log:
                w.writerow([e.epoch, repr(e.train_loss), repr(e.val_auc)])
        return path


def _stack(samples: Sequence, image_shape: tuple[int, ...] | None = None) -> torch.Tensor:
    images = [s.image for s in samples]
    if not images:
        raise ShapeError("no samples")
    shape = image_shape or images[0].shape
    for s, im in zip(samples, images):
        if im.ndim != 3 or im.shape[0] != 3 or im.shape != shape:
            raise ShapeError(f"sample {s.sample_id}: image shape {im.shape}, expected {shape}")
    return torch.from_numpy(np.stack(images).astype(np.float32, copy=False))


def _forward_probs(model: nn.Module, x: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(torch.softmax(model(x[i:i + batch_size]), dim=1))
    return torch.cat(out).numpy()


def finetune(model: AlexNetClassifier, train, val, hp: Hyperparams) -> TrainedModel:
    """SGD with momentum and L2 penalty, keeping the best-validation-AUC epoch.

    Validation AUC is computed slice-wise after every epoch. Ties between
    epochs keep the earliest.
    """
    if len(train) == 0 or len(val) == 0:
        raise ConfigurationError("train and val datasets must be non-empty")
    y = np.array([s.label for s in train], dtype=np.int64)
    yv = np.array([s.label for s in val], dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise UndefinedMetricError("training set holds a single class")
    if len(np.unique(yv)) < 2:
        raise UndefinedMetricError("validation set holds a single class; AUC undefined")
    overlap = {s.patient_id for s in train} & {s.patient_id for s in val}
    if overlap:
        raise ConfigurationError(f"train and val share patients: {sorted(overlap)[:3]}")

    x = _stack(list(train))
    xv = _stack(list(val), tuple(x.shape[1:]))
    yt = torch.from_numpy(y)
    epochs = hp.epochs

    torch.manual_seed(hp.seed)
    order_gen = torch.Generator().manual_seed(hp.seed)
    opt = torch.optim.SGD(model.parameters(), lr=hp.learning_rate, momentum=hp.momentum,
                          weight_decay=hp.l2_penalty)
    loss_fn = nn.CrossEntropyLoss()
    best_auc, best_epoch, best_state = -1.0, 0, None
    log: list[EpochLog] = []
    for epoch in range(1, epochs + 1):
        model.train()
        perm = torch.randperm(len(x), generator=order_gen)
        total, seen = 0.0, 0
        for i in range(0, len(x), hp.batch_size):
            idx = perm[i:i + hp.batch_size]
            opt.zero_grad()
            loss = loss_fn(model(x[idx]), yt[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(epoch)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        val_auc = auc(_forward_probs(model, xv)[:, 1], yv)
        log.append(EpochLog(epoch, total / seen, val_auc))
        logger.debug("epoch %d loss %.4f val_auc %.4f", epoch, total / seen, val_auc)
        if val_auc > best_auc:
            best_auc, best_epoch = val_auc, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return TrainedModel(model, best_auc, best_epoch, hp, log)


def predict_probs(model: TrainedModel | nn.Module, samples: Sequence) -> np.ndarray:
    """Softmax ``(p_LGG, p_HGG)`` rows in evaluation mode.

    Only ``sample.image`` (and ``sample_id`` for error messages) is read.
    """
    net = model.model if isinstance(model, TrainedModel) else model
    x = _stack(list(samples))
    return _forward_probs(net, x)


def weight_norm(model: nn.Module) -> float:
    return math.sqrt(sum(float((p.detach() ** 2).sum()) for p in model.parameters()))
