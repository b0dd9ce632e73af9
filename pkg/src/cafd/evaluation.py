"""Evaluation scenarios: error-rate reports, distance/fooling sweeps, budget
sweeps, loss ablations, cross-model transfer and CAM grids."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import torch

from .attacks import AttackConfig, run_attack
from .backbone import CamClassifier, ClassifierCheckpoint, logits_argmax
from .cam import cam_overlay, caf_distance, class_activation_features, heat_overlay, to_png
from .datasets import Dataset
from .denoiser import CafdTrainConfig, DenoiserCheckpoint, denoise, train_cafd

BUDGET_TOL = 1e-6


@dataclass
class EvalReport:
    scenario: dict[str, Any]
    error_rate: float
    fooling_rate: float
    clean_error: float
    mean_delta: float
    max_delta: float
    mean_delta_restored: float
    mean_linf: float
    max_linf: float
    n: int
    seed: int

    @property
    def accuracy(self) -> float:
        return 1.0 - self.error_rate

    def row(self) -> dict[str, Any]:
        atk = self.scenario.get("attack") or {}
        return {
            "target": self.scenario.get("target"),
            "defense": self.scenario.get("defense") or "none",
            "attack": atk.get("kind", "none") + ("_T" if atk.get("targeted") else ""),
            "epsilon": atk.get("epsilon", 0.0),
            "iterations": atk.get("iterations", 0),
            **{k: v for k, v in asdict(self).items() if k != "scenario"},
        }

    def summary(self) -> str:
        r = self.row()
        return (f"{r['target']:>10} | defense={r['defense']:<10} attack={r['attack']:<18} "
                f"eps={r['epsilon'] * 255:5.2f}/255  error={self.error_rate:.4f}  "
                f"fooling={self.fooling_rate:.4f}  clean_error={self.clean_error:.4f}  "
                f"meanΔ={self.mean_delta:.4f}  N={self.n}")


def _pipeline_predict(model, defense, x):
    with torch.no_grad():
        if defense is not None:
            x = denoise(defense, x)
        return logits_argmax(model(x)[0])


def _net(d):
    if d is None:
        return None
    return d.denoiser if isinstance(d, DenoiserCheckpoint) else d


def evaluate(model: CamClassifier, ds: Dataset, attack: AttackConfig | None = None,
             denoiser=None, *, attack_denoiser=None, batch_size: int = 200,
             target_id: str = "target", defense_id: str | None = None) -> EvalReport:
    """Error of ``model`` (behind ``denoiser`` if given) on ``ds`` under ``attack``.

    Standard attacks are crafted against the bare classifier. ``bpda`` and
    ``whitebox_adaptive`` see ``attack_denoiser`` (default: the deployed
    denoiser); passing a different one gives the gray-box setting.
    """
    defense = _net(denoiser)
    attack_defense = _net(attack_denoiser) or defense
    if defense is not None and defense.channels != ds.channels:
        raise ValueError(f"denoiser expects {defense.channels} channels, dataset has {ds.channels}")
    if model.in_channels != ds.channels or model.image_size != ds.image_size:
        raise ValueError("classifier input shape does not match dataset")
    if attack is not None and attack.kind in ("bpda", "whitebox_adaptive") and attack_defense is None:
        raise ValueError(f"{attack.kind} needs a denoiser to attack")
    if attack_defense is not None:
        attack_defense.eval()

    x_all, y_all = ds.tensors()
    errors = fooled = clean_errors = 0
    deltas, restored_deltas, linfs = [], [], []
    for b, i in enumerate(range(0, len(x_all), batch_size)):
        x, y = x_all[i:i + batch_size], y_all[i:i + batch_size]
        clean_pred = _pipeline_predict(model, defense, x)
        if attack is None:
            x_adv = x
            deltas.append(torch.zeros(len(x)))
            linfs.append(torch.zeros(len(x)))
        else:
            res = run_attack(model, x, replace(attack, seed=attack.seed + b), labels=y,
                             denoiser=attack_defense)
            res.audit(x, BUDGET_TOL)
            x_adv = res.x_adv
            deltas.append(res.delta)
            linfs.append(res.linf)
        pred = _pipeline_predict(model, defense, x_adv)
        if defense is not None:
            with torch.no_grad():
                ref = class_activation_features(model, x)
                restored_deltas.append(
                    caf_distance(model, ref.phi, denoise(defense, x_adv), ref.class_index))
        errors += int((pred != y).sum())
        clean_errors += int((clean_pred != y).sum())
        fooled += int((pred != clean_pred).sum())

    n = len(x_all)
    delta = torch.cat(deltas)
    linf = torch.cat(linfs)
    report = EvalReport(
        scenario={
            "target": target_id,
            "attack": attack.to_dict() if attack else None,
            "defense": defense_id if defense is not None and defense_id else ("cafd" if defense is not None else None),
            "attack_defense": "separate" if attack_denoiser is not None else None,
        },
        error_rate=errors / n,
        fooling_rate=fooled / n,
        clean_error=clean_errors / n,
        mean_delta=float(delta.mean()),
        max_delta=float(delta.max()),
        mean_delta_restored=float(torch.cat(restored_deltas).mean()) if restored_deltas else math.nan,
        mean_linf=float(linf.mean()),
        max_linf=float(linf.max()),
        n=n,
        seed=attack.seed if attack else 0,
    )
    # prediction changes bound any increase in error over the clean pipeline
    if report.fooling_rate < report.error_rate - report.clean_error - 1e-12:
        raise RuntimeError(f"inconsistent report: {report.summary()}")
    return report


# --- distance vs fooling --------------------------------------------------

def distance_fooling_experiment(model: CamClassifier, ds: Dataset, base: AttackConfig,
                                strengths: Sequence[float], axis: str = "iterations",
                                batch_size: int = 200) -> list[dict[str, float]]:
    """Mean Δ and fooling rate per attack strength, sorted by strength.

    ``axis`` is ``"iterations"`` (strength = T) or ``"epsilon"``; strength 0
    means no perturbation.
    """
    if len(strengths) < 3:
        raise ValueError("need at least 3 strength points")
    if axis not in ("iterations", "epsilon"):
        raise ValueError("axis must be 'iterations' or 'epsilon'")
    rows = []
    for s in sorted(strengths):
        if s == 0:
            rep = evaluate(model, ds, None, batch_size=batch_size)
        else:
            cfg = replace(base, iterations=int(s)) if axis == "iterations" else replace(base, epsilon=float(s))
            rep = evaluate(model, ds, cfg, batch_size=batch_size)
        rows.append({"strength": float(s), "mean_delta": rep.mean_delta,
                     "fooling_rate": rep.fooling_rate, "error_rate": rep.error_rate})
    return rows


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Rank correlation; NaN when either side is constant."""
    from scipy.stats import spearmanr

    if len(set(a)) < 2 or len(set(b)) < 2:
        return math.nan
    return float(spearmanr(a, b).statistic)


# --- budget sweep ---------------------------------------------------------

def default_sweep_attacks() -> dict[str, AttackConfig]:
    return {
        "PGD_N": AttackConfig(kind="pgd_ce"),
        "PGD_T": AttackConfig(kind="pgd_ce", targeted=True),
        "CAFA": AttackConfig(kind="cafa"),
    }


def budget_sweep(model: CamClassifier, denoiser, ds: Dataset,
                 attacks: Mapping[str, AttackConfig] | None = None,
                 eps_grid: Iterable[float] = tuple(e / 255 for e in (6, 8, 10, 12, 14, 16)),
                 batch_size: int = 200) -> list[dict[str, Any]]:
    """Defended accuracy for every (attack, ε) pair."""
    attacks = attacks or default_sweep_attacks()
    rows = []
    for name, cfg in attacks.items():
        for eps in eps_grid:
            rep = evaluate(model, ds, replace(cfg, epsilon=float(eps)), denoiser, batch_size=batch_size)
            rows.append({"attack": name, "epsilon": float(eps), "accuracy": rep.accuracy,
                         "error_rate": rep.error_rate})
    return rows


# --- ablation -------------------------------------------------------------

ABLATION_VARIANTS = ("full", "no_adv", "no_caf", "msed")


def ablation_config(base: CafdTrainConfig, variant: str) -> CafdTrainConfig:
    if variant == "full":
        return base
    if variant == "no_adv":
        return replace(base, use_adv=False, use_caf=True)
    if variant == "no_caf":
        return replace(base, use_caf=False, use_adv=True)
    if variant == "msed":
        return replace(base, loss_variant="mse", use_caf=True, use_adv=True)
    raise ValueError(f"unknown ablation variant {variant!r}")


def ablation_run(train: Dataset, classifier: ClassifierCheckpoint, test: Dataset,
                 base: CafdTrainConfig | None = None, variants=ABLATION_VARIANTS,
                 attacks: Mapping[str, AttackConfig] | None = None, val: Dataset | None = None,
                 trained: Mapping[str, DenoiserCheckpoint] | None = None) -> dict[str, dict[str, Any]]:
    """Train one denoiser per variant (shared seeds) and evaluate each under ``attacks``.

    ``trained`` may supply already-trained checkpoints for some variants.
    """
    base = base or CafdTrainConfig()
    attacks = attacks or {"CAFA": AttackConfig(kind="cafa"), "PGD_N": AttackConfig(kind="pgd_ce")}
    trained = dict(trained or {})
    out = {}
    for v in variants:
        ckpt = trained.get(v) or train_cafd(train, classifier, ablation_config(base, v), val=val)
        reports = {name: evaluate(classifier.model, test, cfg, ckpt, defense_id=v)
                   for name, cfg in attacks.items()}
        out[v] = {"checkpoint": ckpt, "reports": reports}
    return out


# --- cross-model ----------------------------------------------------------

def cross_model_eval(denoiser, targets: Mapping[str, CamClassifier], ds: Dataset,
                     attacks: Mapping[str, AttackConfig], batch_size: int = 200) -> list[EvalReport]:
    """Undefended and defended reports for every (target, attack) pair."""
    reports = []
    for tid, model in targets.items():
        if model.in_channels != ds.channels or model.image_size != ds.image_size:
            raise ValueError(f"target {tid!r} input shape does not match dataset")
        for cfg in attacks.values():
            reports.append(evaluate(model, ds, cfg, None, target_id=tid, batch_size=batch_size))
            reports.append(evaluate(model, ds, cfg, denoiser, target_id=tid, batch_size=batch_size))
    return reports


# --- artifacts ------------------------------------------------------------

def write_rows_csv(rows: Sequence[Mapping[str, Any]], path) -> None:
    rows = list(rows)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def write_reports(reports: Sequence[EvalReport], csv_path, txt_path=None) -> None:
    write_rows_csv([r.row() for r in reports], csv_path)
    if txt_path is not None:
        Path(txt_path).write_text("\n".join(r.summary() for r in reports) + "\n")


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_distance_fooling(rows, path) -> None:
    plt = _plt()
    fig, ax1 = plt.subplots(figsize=(5, 3.5))
    s = [r["strength"] for r in rows]
    ax1.plot(s, [r["mean_delta"] for r in rows], "o-", color="tab:blue")
    ax1.set_xlabel("attack strength")
    ax1.set_ylabel("mean feature distance", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(s, [100 * r["fooling_rate"] for r in rows], "s--", color="tab:red")
    ax2.set_ylabel("fooling rate (%)", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_budget_sweep(rows, path) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name in dict.fromkeys(r["attack"] for r in rows):
        pts = [r for r in rows if r["attack"] == name]
        ax.plot([255 * r["epsilon"] for r in pts], [100 * r["accuracy"] for r in pts], "o-", label=name)
    ax.set_xlabel("ε (×1/255)")
    ax.set_ylabel("defended accuracy (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_ablation(results: Mapping[str, Mapping[str, Any]], path) -> None:
    plt = _plt()
    variants = list(results)
    attacks = list(next(iter(results.values()))["reports"])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / len(variants)
    for j, v in enumerate(variants):
        acc = [100 * results[v]["reports"][a].accuracy for a in attacks]
        ax.bar(np.arange(len(attacks)) + j * width, acc, width, label=v)
    ax.set_xticks(np.arange(len(attacks)) + 0.4 - width / 2)
    ax.set_xticklabels(attacks)
    ax.set_ylabel("defended accuracy (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cam_grid(model: CamClassifier, natural: torch.Tensor, adversarial: torch.Tensor,
             restored: torch.Tensor, path=None, scale: int = 4) -> np.ndarray:
    """3 x n uint8 grid: adversarial, restored, CAM overlay of restored (own class)."""
    if not (len(natural) == len(adversarial) == len(restored)) or len(natural) == 0:
        raise ValueError("natural/adversarial/restored must be aligned, non-empty batches")
    size = restored.shape[-1]
    with torch.no_grad():
        heat = cam_overlay(class_activation_features(model, restored, source="restored"), size)

    def rgb(img):
        a = img.detach().cpu().numpy()
        a = np.repeat(a, 3, axis=0) if a.shape[0] == 1 else a
        return a.transpose(1, 2, 0)

    rows = [
        [rgb(a) for a in adversarial],
        [rgb(r) for r in restored],
        [heat_overlay(r, h) for r, h in zip(restored, heat)],
    ]
    grid = np.concatenate([np.concatenate(row, axis=1) for row in rows], axis=0)
    grid = np.clip(np.rint(grid * 255), 0, 255).astype(np.uint8)
    grid = grid.repeat(scale, axis=0).repeat(scale, axis=1)
    if path is not None:
        to_png(grid, path)
    return grid
