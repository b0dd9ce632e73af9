"""L∞ attacks: the class-activation-feature attack plus baselines.

Every iterative attack shares one update rule::

    x_{t+1} = clamp(clip(x_t + alpha * sign(g_t), x - eps, x + eps), 0, 1)

with ``sign(0) = 0``. Only the gradient ``g_t`` differs between kinds.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import CamClassifier, logits_argmax
from .cam import caf_distance, class_activation_features

KINDS = ("cafa", "pgd_ce", "fgsm", "random_sign", "bpda", "whitebox_adaptive")
ITERATIVE = ("cafa", "pgd_ce", "bpda", "whitebox_adaptive")


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "cafa"
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    iterations: int = 10
    targeted: bool = False
    target: Optional[int] = None  # fixed target class; None -> (label + 1) mod classes
    random_start: Optional[bool] = None  # None -> kind default (on for cafa only)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; choose from {KINDS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.kind in ITERATIVE and self.step_size <= 0:
            raise ValueError("step_size must be > 0 for iterative attacks")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.targeted and self.kind not in ("pgd_ce", "fgsm"):
            raise ValueError("targeted mode is only defined for pgd_ce/fgsm")

    @property
    def uses_random_start(self) -> bool:
        if self.random_start is None:
            return self.kind == "cafa"
        return self.random_start

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    x_adv: torch.Tensor
    delta: torch.Tensor  # per-example Δ(x, x_adv) under the attacked classifier
    fooled: torch.Tensor  # bool per example
    linf: torch.Tensor  # per-example max |x_adv - x|
    clean_pred: torch.Tensor
    adv_pred: torch.Tensor
    config: AttackConfig

    @property
    def max_linf(self) -> float:
        return float(self.linf.max()) if len(self.linf) else 0.0

    @property
    def fooling_rate(self) -> float:
        return float(self.fooled.float().mean())

    def audit(self, x: torch.Tensor, tol: float = 1e-6) -> None:
        """Raise if the budget or the [0, 1] range is violated."""
        if self.max_linf > self.config.epsilon + tol:
            raise AttackError(f"L∞ audit failed: {self.max_linf:.3g} > {self.config.epsilon:.3g}")
        if self.x_adv.min() < 0 or self.x_adv.max() > 1:
            raise AttackError("adversarial batch leaves [0, 1]")


class Composite(nn.Module):
    """Classifier applied after a preprocessing defense; same (logits, features) interface."""

    def __init__(self, classifier: CamClassifier, defense: nn.Module):
        super().__init__()
        self.classifier = classifier
        self.defense = defense

    def forward(self, x):
        return self.classifier(self.defense(x))


def _logits(model, x):
    return model(x)[0]


def _predict(model, x):
    with torch.no_grad():
        return logits_argmax(_logits(model, x))


def project(x_adv: torch.Tensor, x: torch.Tensor, eps: float) -> torch.Tensor:
    return torch.clamp(torch.min(torch.max(x_adv, x - eps), x + eps), 0.0, 1.0)


def _start(x: torch.Tensor, cfg: AttackConfig) -> torch.Tensor:
    if not cfg.uses_random_start or cfg.epsilon == 0:
        return x.clone()
    gen = torch.Generator().manual_seed(cfg.seed)
    noise = (torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2 - 1) * cfg.epsilon
    return project(x + noise, x, cfg.epsilon)


def sign_iterate(x: torch.Tensor, cfg: AttackConfig,
                 grad_fn: Callable[[torch.Tensor], torch.Tensor]) -> torch.Tensor:
    x = x.detach()
    x_adv = _start(x, cfg)
    for _ in range(cfg.iterations):
        g = grad_fn(x_adv)
        if not torch.isfinite(g).all():
            raise AttackError(f"{cfg.kind}: non-finite gradient")
        x_adv = project(x_adv + cfg.step_size * torch.sign(g), x, cfg.epsilon)
    return x_adv


def _finish(model, x, x_adv, cfg, clean_pred=None, target=None, pipeline=None) -> AttackResult:
    """Collect Δ, fooled flags and the L∞ audit.

    ``pipeline`` is what the attacker faced (classifier or defense+classifier);
    fooling is judged on it. Δ is always measured on the bare classifier.
    """
    pipeline = pipeline or model
    with torch.no_grad():
        ref = class_activation_features(model, x)
        delta = caf_distance(model, ref.phi, x_adv, ref.class_index)
        if clean_pred is None:
            clean_pred = _predict(pipeline, x)
        adv_pred = _predict(pipeline, x_adv)
        fooled = adv_pred == target if target is not None else adv_pred != clean_pred
        linf = (x_adv - x).abs().reshape(len(x), -1).max(dim=1).values
    result = AttackResult(x_adv.detach(), delta, fooled, linf, clean_pred, adv_pred, cfg)
    result.audit(x)
    return result


def cafa(model: CamClassifier, x: torch.Tensor, cfg: AttackConfig | None = None) -> AttackResult:
    """Maximize the class-activation-feature distance to ``x`` inside the ε-ball.

    Φ of the natural batch and its predicted classes are fixed once; the
    iterate is scored under those same classes.
    """
    cfg = cfg or AttackConfig()
    with torch.no_grad():
        ref = class_activation_features(model, x)

    def grad_fn(x_adv):
        xv = x_adv.detach().requires_grad_(True)
        delta = caf_distance(model, ref.phi, xv, ref.class_index)
        (g,) = torch.autograd.grad(delta.mean(), xv)
        return g

    x_adv = sign_iterate(x, cfg, grad_fn)
    return _finish(model, x, x_adv, cfg, clean_pred=ref.class_index)


def _ce_targets(model, x, labels, cfg):
    """Return (labels for CE, target classes or None)."""
    num_classes = _logits(model, x[:1]).shape[1]
    if labels is None:
        labels = _predict(model, x)
    if not cfg.targeted:
        return labels, None
    if cfg.target is not None:
        if not 0 <= cfg.target < num_classes:
            raise ValueError(f"target class {cfg.target} out of range")
        target = torch.full_like(labels, cfg.target)
    else:
        target = (labels + 1) % num_classes
    return target, target


def _ce_grad(model, labels, targeted):
    sgn = -1.0 if targeted else 1.0

    def grad_fn(x_adv):
        xv = x_adv.detach().requires_grad_(True)
        loss = F.cross_entropy(_logits(model, xv), labels, reduction="sum")
        (g,) = torch.autograd.grad(sgn * loss, xv)
        return g

    return grad_fn


def pgd_ce(model: nn.Module, x: torch.Tensor, labels: torch.Tensor | None = None,
           cfg: AttackConfig | None = None, *, delta_model: CamClassifier | None = None) -> AttackResult:
    """Cross-entropy PGD; non-targeted ascends CE(labels), targeted descends CE(target).

    ``labels`` default to the clean predictions. ``delta_model`` is the bare
    classifier used for Δ; a composite's own classifier by default.
    """
    cfg = cfg or AttackConfig(kind="pgd_ce")
    ce_labels, target = _ce_targets(model, x, labels, cfg)
    x_adv = sign_iterate(x, cfg, _ce_grad(model, ce_labels, cfg.targeted))
    if delta_model is None:
        delta_model = model.classifier if isinstance(model, Composite) else model
    return _finish(delta_model, x, x_adv, cfg, target=target, pipeline=model)


def fgsm(model: nn.Module, x: torch.Tensor, labels: torch.Tensor | None = None,
         cfg: AttackConfig | None = None) -> AttackResult:
    cfg = cfg or AttackConfig(kind="fgsm")
    one_step = replace(cfg, iterations=1, step_size=max(cfg.epsilon, 1e-12), random_start=False)
    ce_labels, target = _ce_targets(model, x, labels, one_step)
    x_adv = sign_iterate(x, one_step, _ce_grad(model, ce_labels, cfg.targeted))
    return _finish(model, x, x_adv, cfg, target=target)


def random_sign(x: torch.Tensor, cfg: AttackConfig | None = None,
                model: CamClassifier | None = None) -> AttackResult:
    """x + ε·(random ±1), clamped to [0, 1]. Needs ``model`` only for Δ and fooling."""
    cfg = cfg or AttackConfig(kind="random_sign")
    gen = torch.Generator().manual_seed(cfg.seed)
    signs = torch.randint(0, 2, x.shape, generator=gen).to(x.dtype) * 2 - 1
    x_adv = torch.clamp(x + cfg.epsilon * signs, 0.0, 1.0)
    if model is None:
        n = len(x)
        linf = (x_adv - x).abs().reshape(n, -1).max(dim=1).values
        empty = torch.zeros(n, dtype=torch.long)
        result = AttackResult(x_adv, torch.full((n,), float("nan")), torch.zeros(n, dtype=torch.bool),
                              linf, empty, empty, cfg)
        result.audit(x)
        return result
    return _finish(model, x, x_adv, cfg)


def bpda_attack(model: CamClassifier, denoiser: nn.Module, x: torch.Tensor,
                labels: torch.Tensor | None = None, cfg: AttackConfig | None = None) -> AttackResult:
    """CE PGD through a defense whose backward pass is replaced by the identity."""
    cfg = cfg or AttackConfig(kind="bpda")
    pipeline = Composite(model, denoiser)
    if labels is None:
        labels = _predict(pipeline, x)

    def grad_fn(x_adv):
        with torch.no_grad():
            u = denoiser(x_adv.detach())
        u.requires_grad_(True)
        loss = F.cross_entropy(_logits(model, u), labels, reduction="sum")
        (g,) = torch.autograd.grad(loss, u)
        return g

    x_adv = sign_iterate(x, cfg, grad_fn)
    return _finish(model, x, x_adv, cfg, pipeline=pipeline)


def whitebox_adaptive(model: CamClassifier, denoiser: nn.Module, x: torch.Tensor,
                      labels: torch.Tensor | None = None, cfg: AttackConfig | None = None) -> AttackResult:
    """CE PGD against defense+classifier with full gradient flow."""
    cfg = cfg or AttackConfig(kind="whitebox_adaptive")
    return pgd_ce(Composite(model, denoiser), x, labels, cfg, delta_model=model)


def run_attack(model: CamClassifier, x: torch.Tensor, cfg: AttackConfig,
               labels: torch.Tensor | None = None, denoiser: nn.Module | None = None) -> AttackResult:
    if cfg.kind == "cafa":
        return cafa(model, x, cfg)
    if cfg.kind == "pgd_ce":
        return pgd_ce(model, x, labels, cfg)
    if cfg.kind == "fgsm":
        return fgsm(model, x, labels, cfg)
    if cfg.kind == "random_sign":
        return random_sign(x, cfg, model)
    if denoiser is None:
        raise ValueError(f"{cfg.kind} needs a denoiser")
    if cfg.kind == "bpda":
        return bpda_attack(model, denoiser, x, labels, cfg)
    return whitebox_adaptive(model, denoiser, x, labels, cfg)
