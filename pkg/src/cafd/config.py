"""Run configuration: YAML sections, dotted ``key=value`` overrides, strict keys."""

from __future__ import annotations

import copy
from fractions import Fraction
from pathlib import Path
from typing import Any

import yaml

from .attacks import AttackConfig
from .backbone import TrainHyper
from .datasets import ShapeGenConfig
from .denoiser import CafdTrainConfig

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "runs/default",
    "dataset": {
        "num_classes": 4,
        "image_size": 32,
        "channels": 3,
        "noise_std": 0.08,
        "seed": 1,
        "sizes": [2000, 200, 400],  # train, val, test
    },
    "classifier": {
        "epochs": 20,
        "batch_size": 64,
        "lr": 0.05,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "widths": [32, 64, 128, 128],
        "pool": "max",
    },
    "attack": {
        "kind": "cafa",
        "epsilon": "8/255",
        "step_size": "2/255",
        "iterations": 10,
        "targeted": False,
        "target": None,
        "random_start": None,
    },
    "denoiser": {
        "loss_variant": "phi",
        "lambda_caf": 100.0,
        "lambda_adv": 0.005,
        "use_caf": True,
        "use_adv": True,
        "lr": 0.001,
        "lr_final": 2.7e-5,
        "epochs": 6,
        "batch_size": 32,
        "patience": 5,
        "min_improvement": 0.01,
        "val_size": 200,
        "widths": [32, 64, 128],
        "attack_epsilon": "8/255",
        "attack_step_size": "2/255",
        "attack_iterations": 10,
    },
    "eval": {
        "attacks": ["none", "cafa", "pgd_n", "pgd_t", "fgsm", "random_sign", "bpda", "whitebox"],
        "eps_grid": ["6/255", "8/255", "10/255", "12/255", "14/255", "16/255"],
        "dist_kind": "pgd_ce",
        "dist_axis": "iterations",
        "dist_strengths": [0, 1, 2, 5, 10, 20],
        "dist_step_size": "0.4/255",
        "ablation_variants": ["full", "no_adv", "no_caf", "msed"],
        "batch_size": 200,
        "viz_count": 8,
    },
    "paths": {
        "data": None,
        "classifier": None,
        "denoiser": None,
    },
}

NAMED_ATTACKS = {
    "cafa": {"kind": "cafa"},
    "pgd_n": {"kind": "pgd_ce"},
    "pgd_t": {"kind": "pgd_ce", "targeted": True},
    "fgsm": {"kind": "fgsm"},
    "random_sign": {"kind": "random_sign"},
    "bpda": {"kind": "bpda"},
    "whitebox": {"kind": "whitebox_adaptive"},
}


class ConfigError(ValueError):
    pass


def number(value) -> float:
    """Accept ints, floats and fraction strings such as ``"8/255"``."""
    if isinstance(value, bool):
        raise ConfigError(f"expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    try:
        return float(Fraction(str(value).strip()))
    except (ValueError, ZeroDivisionError) as exc:
        # Fraction rejects decimals inside fractions, e.g. "0.4/255"
        num, sep, den = str(value).partition("/")
        try:
            return float(num) / float(den) if sep else float(num)
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"not a number: {value!r}") from exc


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path} must be a section")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def resolve(path=None, overrides=(), seed: int | None = None, out: str | None = None) -> dict[str, Any]:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, loaded)
    for text in overrides:
        keys, value = parse_override(text)
        nested: Any = value
        for k in reversed(keys):
            nested = {k: nested}
        _merge(cfg, nested)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    validate(cfg)
    return cfg


def validate(cfg: dict[str, Any]) -> None:
    try:
        shape_config(cfg)
        train_hyper(cfg)
        attack_config(cfg)
        cafd_config(cfg)
        for name in cfg["eval"]["attacks"]:
            if name != "none" and name not in NAMED_ATTACKS:
                raise ConfigError(f"eval.attacks: unknown attack {name!r}")
        [number(e) for e in cfg["eval"]["eps_grid"]]
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def split_fractions(cfg) -> tuple[float, ...]:
    sizes = cfg["dataset"]["sizes"]
    total = sum(sizes)
    return tuple(s / total for s in sizes)


def shape_config(cfg) -> ShapeGenConfig:
    d = cfg["dataset"]
    total = sum(d["sizes"])
    if len(d["sizes"]) != 3 or total % d["num_classes"]:
        raise ConfigError("dataset.sizes must list 3 sizes whose sum is divisible by num_classes")
    c = ShapeGenConfig(d["num_classes"], total // d["num_classes"], d["image_size"], d["channels"],
                       number(d["noise_std"]), d["seed"])
    c.validate()
    return c


def train_hyper(cfg) -> TrainHyper:
    c = cfg["classifier"]
    return TrainHyper(epochs=c["epochs"], batch_size=c["batch_size"], lr=number(c["lr"]),
                      momentum=number(c["momentum"]), weight_decay=number(c["weight_decay"]),
                      val_fraction=0.1, seed=cfg["seed"], widths=tuple(c["widths"]), pool=c["pool"])


def attack_config(cfg, **changes) -> AttackConfig:
    a = dict(cfg["attack"], **changes)
    return AttackConfig(kind=a["kind"], epsilon=number(a["epsilon"]), step_size=number(a["step_size"]),
                        iterations=int(a["iterations"]), targeted=bool(a["targeted"]),
                        target=a["target"], random_start=a["random_start"], seed=cfg["seed"])


def named_attack(cfg, name: str) -> AttackConfig:
    return attack_config(cfg, **{"targeted": False, "random_start": None, **NAMED_ATTACKS[name]})


def cafd_config(cfg) -> CafdTrainConfig:
    d = cfg["denoiser"]
    inner = AttackConfig(kind="cafa", epsilon=number(d["attack_epsilon"]),
                         step_size=number(d["attack_step_size"]), iterations=int(d["attack_iterations"]),
                         seed=cfg["seed"])
    return CafdTrainConfig(
        loss_variant=d["loss_variant"], lambda_caf=number(d["lambda_caf"]),
        lambda_adv=number(d["lambda_adv"]), use_caf=bool(d["use_caf"]), use_adv=bool(d["use_adv"]),
        attack=inner, lr=number(d["lr"]), lr_final=number(d["lr_final"]), epochs=int(d["epochs"]),
        batch_size=int(d["batch_size"]), patience=int(d["patience"]),
        min_improvement=number(d["min_improvement"]), val_size=int(d["val_size"]),
        widths=tuple(d["widths"]), seed=cfg["seed"],
    )


def dump(cfg: dict[str, Any]) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)
