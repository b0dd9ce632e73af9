"""CAM-compatible classifier: conv blocks, global average pooling, linear head.

The GAP+linear head gives every class a weight per last-conv channel, so that
``logit_c = sum_k W[c, k] * mean(f_k) + b[c]`` holds exactly.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datasets import Dataset
from .tensorfile import CheckpointError, read_tensor_file, write_tensor_file

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "cam_classifier"


class TrainingDivergedError(RuntimeError):
    pass


class CamClassifier(nn.Module):
    def __init__(self, in_channels: int = 3, num_classes: int = 4,
                 widths=(32, 64, 128, 128), image_size: int = 32, pool: str = "max"):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        down = 2 ** (len(widths) - 1)
        if image_size % down:
            raise ValueError(f"image_size {image_size} not divisible by {down}")
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.widths = widths
        self.image_size = image_size
        self.pool = pool

        layers: list[nn.Module] = []
        prev = in_channels
        for i, w in enumerate(widths):
            if i > 0:
                layers.append(nn.MaxPool2d(2) if pool == "max" else nn.AvgPool2d(2))
            layers += [nn.Conv2d(prev, w, 3, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU()]
            prev = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(prev, num_classes)

    @property
    def arch(self) -> dict[str, Any]:
        s = self.image_size // 2 ** (len(self.widths) - 1)
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "widths": list(self.widths),
            "image_size": self.image_size,
            "pool": self.pool,
            "blocks": len(self.widths),
            "K": self.widths[-1],
            "feature_size": [s, s],
        }

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.dim() != 4 or x.shape[1] != self.in_channels or x.shape[-2:] != (self.image_size,) * 2:
            raise ValueError(
                f"expected input (N, {self.in_channels}, {self.image_size}, {self.image_size}), "
                f"got {tuple(x.shape)}"
            )
        feats = self.features(x)
        # head accumulates in float64 so the GAP identity holds to output rounding
        pooled = feats.double().mean(dim=(2, 3))
        logits = F.linear(pooled, self.head.weight.double(), self.head.bias.double())
        return logits.to(feats.dtype), feats


def predict(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """argmax of the logits; ties go to the lowest class index."""
    with torch.no_grad():
        logits, _ = model(x)
    return logits_argmax(logits)


def logits_argmax(logits: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index on CPU
    return torch.argmax(logits, dim=1)


def class_weights(model: CamClassifier) -> tuple[torch.Tensor, torch.Tensor]:
    return model.head.weight, model.head.bias


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainHyper:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    val_fraction: float = 0.1
    seed: int = 0
    widths: tuple[int, ...] = (32, 64, 128, 128)
    pool: str = "max"


@dataclass
class ClassifierCheckpoint:
    model: CamClassifier
    config: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    metrics: dict[str, float] = field(default_factory=dict)

    @property
    def checksum(self) -> str:
        return parameter_checksum(self.model)


def _accuracy(model, x, y, batch_size=256) -> float:
    model.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            correct += int((predict(model, x[i:i + batch_size]) == y[i:i + batch_size]).sum())
    return correct / len(x)


def train_classifier(train: Dataset, hyper: TrainHyper | None = None,
                     val: Dataset | None = None) -> ClassifierCheckpoint:
    """Train a CamClassifier with SGD + cosine schedule.

    When ``val`` is omitted a ``hyper.val_fraction`` slice of ``train`` is
    held out (seeded).
    """
    hyper = hyper or TrainHyper()
    if val is None:
        from .datasets import split

        train, val = split(train, (1 - hyper.val_fraction, hyper.val_fraction), seed=hyper.seed)

    torch.manual_seed(hyper.seed)
    model = CamClassifier(train.channels, train.num_classes, hyper.widths, train.image_size, hyper.pool)
    x, y = train.tensors()
    xv, yv = val.tensors()
    opt = torch.optim.SGD(model.parameters(), lr=hyper.lr, momentum=hyper.momentum,
                          weight_decay=hyper.weight_decay)
    steps_per_epoch = math.ceil(len(x) / hyper.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, hyper.epochs * steps_per_epoch))
    gen = torch.Generator().manual_seed(hyper.seed)

    history = []
    for epoch in range(hyper.epochs):
        model.train()
        perm = torch.randperm(len(x), generator=gen)
        total = 0.0
        for i in range(0, len(x), hyper.batch_size):
            idx = perm[i:i + hyper.batch_size]
            logits, _ = model(x[idx])
            loss = F.cross_entropy(logits, y[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch {i // hyper.batch_size}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        val_acc = _accuracy(model, xv, yv)
        history.append({"epoch": epoch, "loss": total / len(x), "val_acc": val_acc})
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, total / len(x), val_acc)

    model.eval()
    metrics = {"train_acc": _accuracy(model, x, y), "val_acc": _accuracy(model, xv, yv)}
    config = asdict(hyper)
    config["widths"] = list(hyper.widths)
    config["history"] = history
    return ClassifierCheckpoint(model, config, hyper.seed, metrics)


def save_classifier(ckpt: ClassifierCheckpoint, path) -> None:
    meta = {
        "arch": ckpt.model.arch,
        "config": ckpt.config,
        "seed": ckpt.seed,
        "metrics": ckpt.metrics,
    }
    write_tensor_file(path, CHECKPOINT_KIND, meta, ckpt.model.state_dict())


def build_classifier(arch: dict[str, Any]) -> CamClassifier:
    return CamClassifier(arch["in_channels"], arch["num_classes"], arch["widths"], arch["image_size"],
                         arch.get("pool", "max"))


def load_classifier(path) -> ClassifierCheckpoint:
    meta, tensors = read_tensor_file(path, CHECKPOINT_KIND)
    model = build_classifier(meta["arch"])
    try:
        model.load_state_dict(tensors)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match architecture: {exc}") from exc
    model.eval()
    return ClassifierCheckpoint(model, meta["config"], meta["seed"], meta["metrics"])

