"""Residual encoder-decoder denoiser, image discriminator, losses and training.

Training alternates, per batch: craft adversarial examples against the frozen
classifier, take one discriminator step on the relativistic loss, then one
denoiser step on ``lambda_caf * L_caf + lambda_adv * L_adv``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attacks import AttackConfig, cafa
from .backbone import ClassifierCheckpoint, CamClassifier, freeze, logits_argmax, parameter_checksum
from .cam import caf_distance, class_activation_features, l2_distance
from .datasets import Dataset
from .tensorfile import CheckpointError, read_tensor_file, write_tensor_file

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "cafd_denoiser"
LOSS_VARIANTS = ("phi", "feat_weight", "mse")


class TrainingDivergedError(RuntimeError):
    pass


def conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU())


class DenoiserNet(nn.Module):
    """U-shaped net predicting the adversarial residual; output = clamp(x - r(x), 0, 1).

    The output convolution starts at zero, so an untrained net is the identity.
    """

    def __init__(self, channels: int = 3, widths=(32, 64, 128)):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        self.channels = channels
        self.widths = widths
        self.down = nn.ModuleList()
        prev = channels
        for w in widths:
            self.down.append(nn.Sequential(conv_block(prev, w), conv_block(w, w)))
            prev = w
        self.up = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(conv_block(prev + w, w))
            prev = w
        self.out = nn.Conv2d(prev, channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @property
    def arch(self) -> dict[str, Any]:
        return {"channels": self.channels, "widths": list(self.widths)}

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        h = x
        for i, block in enumerate(self.down):
            if i > 0:
                h = F.avg_pool2d(h, 2)
            h = block(h)
            skips.append(h)
        for block, skip in zip(self.up, reversed(skips[:-1])):
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = block(torch.cat([h, skip], dim=1))
        return self.out(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.clamp(x - self.residual(x), 0.0, 1.0)


class Discriminator(nn.Module):
    """Three strided conv/BN/LeakyReLU blocks and a linear scoring head."""

    def __init__(self, channels: int = 3, image_size: int = 32, widths=(32, 64, 128)):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        self.channels, self.image_size, self.widths = channels, image_size, widths
        layers, prev = [], channels
        for w in widths:
            layers += [nn.Conv2d(prev, w, 3, stride=2, padding=1, bias=False),
                       nn.BatchNorm2d(w), nn.LeakyReLU(0.2)]
            prev = w
        self.features = nn.Sequential(*layers)
        side = image_size // 2 ** len(widths)
        self.fc = nn.Linear(prev * side * side, 1)

    @property
    def arch(self) -> dict[str, Any]:
        return {"channels": self.channels, "image_size": self.image_size, "widths": list(self.widths)}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x).flatten(1))[:, 0]


# --- losses ---------------------------------------------------------------

def relativistic_loss(pos_scores: torch.Tensor, neg_scores: torch.Tensor) -> torch.Tensor:
    """mean(-log sigmoid(pos - neg)), computed as softplus(neg - pos)."""
    return F.softplus(neg_scores - pos_scores).mean()


def loss_disc(disc: nn.Module, x: torch.Tensor, restored: torch.Tensor) -> torch.Tensor:
    return relativistic_loss(disc(x), disc(restored))


def loss_adv(disc: nn.Module, x: torch.Tensor, restored: torch.Tensor) -> torch.Tensor:
    return relativistic_loss(disc(restored), disc(x))


def loss_caf_phi(classifier: CamClassifier, x: torch.Tensor, restored: torch.Tensor,
                 classes: torch.Tensor | None = None) -> torch.Tensor:
    """Batch mean of Δ(Φ_x, Φ_restored), both under the natural example's class."""
    with torch.no_grad():
        ref = class_activation_features(classifier, x, "self" if classes is None else classes)
    return caf_distance(classifier, ref.phi, restored, ref.class_index).mean()


def loss_caf_featweight(classifier: CamClassifier, x: torch.Tensor, restored: torch.Tensor,
                        return_terms: bool = False):
    """Batch mean of δ(F_x, F_r) + δ(W_x, W_r).

    Each W is the weight row of that example's own predicted class; the row
    selection is piecewise constant, so only the feature term carries gradient.
    """
    with torch.no_grad():
        logits_x, feats_x = classifier(x)
    logits_r, feats_r = classifier(restored)
    w = classifier.head.weight.detach()
    w_x = w[logits_argmax(logits_x)]
    w_r = w[logits_argmax(logits_r.detach())]
    feat_term = l2_distance(feats_x, feats_r).mean()
    weight_term = l2_distance(w_x, w_r).mean()
    if return_terms:
        return feat_term + weight_term, feat_term, weight_term
    return feat_term + weight_term


def mse_loss(x: torch.Tensor, restored: torch.Tensor) -> torch.Tensor:
    return ((restored - x) ** 2).mean()


@dataclass
class CafdTrainConfig:
    loss_variant: str = "phi"
    lambda_caf: float = 1e2
    lambda_adv: float = 5e-3
    use_caf: bool = True
    use_adv: bool = True
    attack: AttackConfig = field(default_factory=AttackConfig)
    lr: float = 1e-3
    lr_final: float = 2.7e-5
    betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = 10
    batch_size: int = 32
    patience: int = 5
    min_improvement: float = 0.01
    val_size: int = 200
    widths: tuple[int, ...] = (32, 64, 128)
    disc_widths: tuple[int, ...] = (32, 64, 128)
    seed: int = 0
    expected_classifier_checksum: Optional[str] = None

    def __post_init__(self):
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.lambda_caf < 0 or self.lambda_adv < 0:
            raise ValueError("lambda_caf and lambda_adv must be >= 0")
        if not (self.use_caf or self.use_adv):
            raise ValueError("at least one of use_caf/use_adv must be enabled")
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["widths"] = list(self.widths)
        d["disc_widths"] = list(self.disc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CafdTrainConfig":
        d = dict(d)
        for key in ("betas", "widths", "disc_widths"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def loss_total(cfg: CafdTrainConfig, l_caf: torch.Tensor, l_adv: torch.Tensor) -> torch.Tensor:
    """λ1·L_caf + λ2·L_adv; a term switched off by the ablation flags is dropped."""
    total = torch.zeros(())
    if cfg.use_caf:
        total = total + cfg.lambda_caf * l_caf
    if cfg.use_adv:
        total = total + cfg.lambda_adv * l_adv
    return total


@dataclass
class DenoiserCheckpoint:
    denoiser: DenoiserNet
    discriminator: Optional[Discriminator]
    config: dict[str, Any]
    classifier_checksum: str
    curves: list[dict[str, float]] = field(default_factory=list)
    provenance: dict[str, Any] = field(default_factory=dict)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return denoise(self, x)


def denoise(ckpt, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    net = ckpt.denoiser if isinstance(ckpt, DenoiserCheckpoint) else ckpt
    if x.dim() != 4 or x.shape[1] != net.channels:
        raise ValueError(f"denoiser expects (N, {net.channels}, H, W), got {tuple(x.shape)}")
    net.eval()
    with torch.no_grad():
        return torch.cat([net(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def _caf_term(cfg: CafdTrainConfig, classifier, x, restored, classes):
    if cfg.loss_variant == "phi":
        return loss_caf_phi(classifier, x, restored, classes)
    if cfg.loss_variant == "feat_weight":
        return loss_caf_featweight(classifier, x, restored)
    return mse_loss(x, restored)


def mean_restored_distance(classifier, denoiser, x, x_adv, batch_size: int = 200) -> float:
    """Mean Δ(x, C(x_adv)) with the natural class row, inference mode."""
    denoiser.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            xb, ab = x[i:i + batch_size], x_adv[i:i + batch_size]
            ref = class_activation_features(classifier, xb)
            total += float(caf_distance(classifier, ref.phi, denoiser(ab), ref.class_index).sum())
    return total / len(x)


def train_cafd(train: Dataset, classifier: ClassifierCheckpoint, cfg: CafdTrainConfig | None = None,
               val: Dataset | None = None) -> DenoiserCheckpoint:
    """Self-supervised training of the denoiser (and discriminator) against a frozen classifier.

    Stops after ``cfg.epochs`` or when the validation Δ has not improved by
    ``cfg.min_improvement`` (relative) for ``cfg.patience`` epochs.
    """
    cfg = cfg or CafdTrainConfig()
    model = freeze(classifier.model)
    checksum = parameter_checksum(model)
    if cfg.expected_classifier_checksum and cfg.expected_classifier_checksum != checksum:
        raise CheckpointError(
            f"classifier checksum {checksum[:12]} does not match configured "
            f"{cfg.expected_classifier_checksum[:12]}"
        )

    torch.manual_seed(cfg.seed)
    net = DenoiserNet(train.channels, cfg.widths)
    disc = Discriminator(train.channels, train.image_size, cfg.disc_widths)
    opt_c = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=cfg.betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=cfg.betas)
    gamma = (cfg.lr_final / cfg.lr) ** (1.0 / max(1, cfg.epochs - 1))
    scheds = [torch.optim.lr_scheduler.ExponentialLR(o, gamma) for o in (opt_c, opt_d)]

    x_all, _ = train.tensors()
    gen = torch.Generator().manual_seed(cfg.seed)

    x_val = xa_val = None
    if val is not None:
        x_val, _ = val.tensors()
        x_val = x_val[: cfg.val_size]
        # the classifier is frozen, so the validation attack set is fixed
        xa_val = cafa(model, x_val, replace(cfg.attack, seed=cfg.attack.seed + 10**6)).x_adv

    curves: list[dict[str, float]] = []
    best, stale, step = math.inf, 0, 0
    for epoch in range(cfg.epochs):
        net.train()
        disc.train()
        perm = torch.randperm(len(x_all), generator=gen)
        for b, i in enumerate(range(0, len(x_all), cfg.batch_size)):
            x = x_all[perm[i:i + cfg.batch_size]]
            if len(x) < 2:
                continue
            atk = cafa(model, x, replace(cfg.attack, seed=cfg.attack.seed + step))
            x_adv, classes = atk.x_adv, atk.clean_pred
            step += 1

            l_d = torch.tensor(float("nan"))
            if cfg.use_adv:
                with torch.no_grad():
                    restored = net(x_adv)
                scores = disc(torch.cat([x, restored]))
                l_d = relativistic_loss(scores[: len(x)], scores[len(x):])
                opt_d.zero_grad()
                l_d.backward()
                opt_d.step()

            restored = net(x_adv)
            l_caf = _caf_term(cfg, model, x, restored, classes)
            if cfg.use_adv:
                scores = disc(torch.cat([x, restored]))
                l_adv = relativistic_loss(scores[len(x):], scores[: len(x)].detach())
            else:
                l_adv = torch.zeros(())
            l_total = loss_total(cfg, l_caf, l_adv)
            if not torch.isfinite(l_total) or (cfg.use_adv and not torch.isfinite(l_d)):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {b}: "
                    f"L_caf={l_caf.item()}, L_adv={l_adv.item()}, L_D={l_d.item()}"
                )
            opt_c.zero_grad()
            l_total.backward()
            opt_c.step()
            curves.append({"epoch": epoch, "batch": b, "L_caf": l_caf.item(),
                           "L_adv": l_adv.item(), "L_D": l_d.item(), "val_delta": float("nan")})

        scheds[0].step()
        if cfg.use_adv:
            scheds[1].step()
        if x_val is not None:
            val_delta = mean_restored_distance(model, net, x_val, xa_val)
            curves[-1]["val_delta"] = val_delta
            log.info("epoch %d  L_caf %.4f  val Δ %.4f", epoch, curves[-1]["L_caf"], val_delta)
            if val_delta < best * (1 - cfg.min_improvement):
                best, stale = val_delta, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop at epoch %d", epoch)
                    break

    net.eval()
    disc.eval()
    provenance = {
        "classifier_checksum": checksum,
        "train_checksum": train.checksum(),
        "train_size": len(train),
        "torch": torch.__version__,
    }
    if parameter_checksum(model) != checksum:
        raise RuntimeError("classifier parameters changed during denoiser training")
    return DenoiserCheckpoint(net, disc if cfg.use_adv else None, cfg.to_dict(), checksum, curves, provenance)


def write_curves_csv(ckpt: DenoiserCheckpoint, path) -> None:
    fields = ["epoch", "batch", "L_caf", "L_adv", "L_D", "val_delta"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(ckpt.curves)


def save_denoiser(ckpt: DenoiserCheckpoint, path) -> None:
    tensors = {f"denoiser.{k}": v for k, v in ckpt.denoiser.state_dict().items()}
    meta = {
        "denoiser_arch": ckpt.denoiser.arch,
        "config": ckpt.config,
        "classifier_checksum": ckpt.classifier_checksum,
        "curves": ckpt.curves,
        "provenance": ckpt.provenance,
    }
    if ckpt.discriminator is not None:
        meta["discriminator_arch"] = ckpt.discriminator.arch
        tensors.update({f"discriminator.{k}": v for k, v in ckpt.discriminator.state_dict().items()})
    write_tensor_file(path, CHECKPOINT_KIND, meta, tensors)


def load_denoiser(path) -> DenoiserCheckpoint:
    meta, tensors = read_tensor_file(path, CHECKPOINT_KIND)

    def part(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    net = DenoiserNet(**meta["denoiser_arch"])
    disc = None
    try:
        net.load_state_dict(part("denoiser."))
        if "discriminator_arch" in meta:
            disc = Discriminator(**meta["discriminator_arch"])
            disc.load_state_dict(part("discriminator."))
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match architecture: {exc}") from exc
    net.eval()
    if disc is not None:
        disc.eval()
    return DenoiserCheckpoint(net, disc, meta["config"], meta["classifier_checksum"],
                              meta["curves"], meta["provenance"])
