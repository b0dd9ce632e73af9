"""Class activation features, class activation maps and the feature distance.

For an example with last-conv features ``F`` (K, H', W') and a selected class
``c``, the class activation features are ``phi[k] = F[k] * W[c, k]``. Their
channel sum is the class activation map, whose spatial mean equals
``logit_c - b[c]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import CamClassifier, logits_argmax

# Δ below this is treated as an exact zero (gradient defined as 0 there)
SINGULAR_EPS = 1e-12
GAP_TOL = 1e-5

ClassSelect = Union[str, int, torch.Tensor]


class CamIdentityError(AssertionError):
    pass


@dataclass
class ClassActivationFeatures:
    phi: torch.Tensor  # (N, K, H', W')
    class_index: torch.Tensor  # (N,)
    source: str = "natural"

    def __len__(self) -> int:
        return self.phi.shape[0]


def _resolve_classes(class_select: ClassSelect, logits: torch.Tensor) -> torch.Tensor:
    n, num_classes = logits.shape
    if isinstance(class_select, str):
        if class_select != "self":
            raise ValueError(f"unknown class selection {class_select!r}")
        return logits_argmax(logits.detach())
    classes = torch.as_tensor(class_select, dtype=torch.long)
    if classes.dim() == 0:
        classes = classes.expand(n)
    if classes.shape != (n,):
        raise ValueError(f"need {n} class indices, got shape {tuple(classes.shape)}")
    if classes.min() < 0 or classes.max() >= num_classes:
        raise ValueError(f"class index out of range [0, {num_classes})")
    return classes


def weighted_features(model: CamClassifier, feats: torch.Tensor, classes: torch.Tensor) -> torch.Tensor:
    w = model.head.weight[classes]  # (N, K)
    return feats * w[:, :, None, None]


def check_gap_identity(model: CamClassifier, logits, feats, classes=None, tol: float = GAP_TOL) -> float:
    """Assert spatial mean of the CAM equals logit - bias; returns the max error."""
    with torch.no_grad():
        if classes is None:
            classes = torch.arange(logits.shape[1]).expand(logits.shape[0], -1)
        else:
            classes = classes.view(-1, 1)
        w = model.head.weight.double()[classes]  # (N, C', K)
        gap = feats.double().mean(dim=(2, 3))  # (N, K)
        cam_mean = (w * gap[:, None, :]).sum(-1)
        target = logits.double().gather(1, classes) - model.head.bias.double()[classes]
        err = float((cam_mean - target).abs().max())
    if not err <= tol:
        raise CamIdentityError(f"CAM spatial mean deviates from logit - bias by {err:.3g}")
    return err


def class_activation_features(model: CamClassifier, x: torch.Tensor,
                              class_select: ClassSelect = "self",
                              source: str = "natural") -> ClassActivationFeatures:
    """Φ for a batch; gradients flow to ``x`` if it requires them."""
    logits, feats = model(x)
    classes = _resolve_classes(class_select, logits)
    check_gap_identity(model, logits, feats, classes)
    return ClassActivationFeatures(weighted_features(model, feats, classes), classes, source)


def cam_map(caf: ClassActivationFeatures) -> torch.Tensor:
    """Class activation map Σ_k φ^k, shape (N, H', W'), summed in float64."""
    return caf.phi.double().sum(dim=1)


def normalize_map(m: torch.Tensor) -> torch.Tensor:
    """Per-map min-max scaling to [0, 1]; a constant map becomes all zeros."""
    flat = m.reshape(m.shape[0], -1)
    lo = flat.min(dim=1, keepdim=True).values
    hi = flat.max(dim=1, keepdim=True).values
    rng = hi - lo
    out = torch.where(rng > 0, (flat - lo) / torch.where(rng > 0, rng, torch.ones_like(rng)),
                      torch.zeros_like(flat))
    return out.reshape(m.shape)


def cam_overlay(caf: ClassActivationFeatures, size: int) -> torch.Tensor:
    """Normalized CAM bilinearly upsampled to ``size``; values in [0, 1]."""
    m = cam_map(caf).detach()[:, None]
    up = F.interpolate(m, size=(size, size), mode="bilinear", align_corners=False)[:, 0]
    return normalize_map(up)


def _safe_norm(sq: torch.Tensor) -> torch.Tensor:
    # sqrt with a zero (not NaN) gradient at the singular point
    ok = sq > SINGULAR_EPS**2
    return torch.where(ok, torch.sqrt(torch.where(ok, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def l2_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-example L2 distance over all non-batch dimensions, accumulated in float64."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    d = (a.double() - b.double()).reshape(a.shape[0], -1)
    return _safe_norm((d * d).sum(dim=1))


def feature_distance(a: ClassActivationFeatures, b: ClassActivationFeatures) -> torch.Tensor:
    """Δ = ||Φ_a - Φ_b||_2 per example, shape (N,)."""
    return l2_distance(a.phi, b.phi)


def caf_distance(model: CamClassifier, phi_ref: torch.Tensor, x: torch.Tensor,
                 classes: torch.Tensor) -> torch.Tensor:
    """Differentiable per-example Δ between fixed ``phi_ref`` and Φ(x) under ``classes``."""
    logits, feats = model(x)
    check_gap_identity(model, logits, feats, classes)
    return l2_distance(phi_ref, weighted_features(model, feats, classes))


def feature_distance_grad(model: CamClassifier, x_ref: torch.Tensor, x_var: torch.Tensor,
                          class_select: ClassSelect = "self") -> torch.Tensor:
    """∂Δ/∂x_var with Φ(x_ref) held constant.

    ``class_select="self"`` selects the class predicted for ``x_ref`` for both
    operands. Examples are independent, so the result is the per-example
    gradient for every row.
    """
    with torch.no_grad():
        ref = class_activation_features(model, x_ref, class_select)
    xv = x_var.detach().clone().requires_grad_(True)
    delta = caf_distance(model, ref.phi, xv, ref.class_index)
    (grad,) = torch.autograd.grad(delta.sum(), xv)
    if not torch.isfinite(grad).all():
        raise FloatingPointError("non-finite feature-distance gradient")
    return grad


def to_png(image: np.ndarray, path) -> None:
    """Write an (H, W) or (H, W, 3) array in [0, 1] (or uint8) as PNG."""
    from PIL import Image

    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def heat_overlay(image: torch.Tensor, heat: torch.Tensor, alpha: float = 0.5) -> np.ndarray:
    """Blend a (C, H, W) image with a [0, 1] heatmap in jet colors; (H, W, 3) in [0, 1]."""
    from matplotlib import colormaps

    img = image.detach().cpu().numpy()
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    colored = colormaps["jet"](heat.detach().cpu().numpy())[..., :3]
    return np.clip((1 - alpha) * img.transpose(1, 2, 0) + alpha * colored, 0.0, 1.0)
