"""Command-line entry point.

Every subcommand takes ``--config PATH``, repeatable ``--set key=value``
overrides, ``--seed N`` and ``--out DIR``. A run directory holds::

    config.yaml  data/  checkpoints/  reports/  plots/  logs/

Set ``CAFD_NUM_THREADS`` to cap torch's intra-op threads.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from . import config as config_mod
from .attacks import run_attack
from .backbone import load_classifier, save_classifier, train_classifier
from .config import ConfigError
from .datasets import Dataset, DatasetError, generate_synthetic, load_dataset, save_dataset, split, to_uint8
from .denoiser import TrainingDivergedError, denoise, load_denoiser, save_denoiser, train_cafd, write_curves_csv
from .evaluation import (
    ablation_run,
    budget_sweep,
    cam_grid,
    distance_fooling_experiment,
    evaluate,
    plot_ablation,
    plot_budget_sweep,
    plot_distance_fooling,
    spearman,
    write_reports,
    write_rows_csv,
)
from .tensorfile import CheckpointError

log = logging.getLogger("cafd")

SUBDIRS = ("data", "checkpoints", "reports", "plots", "logs")


class Run:
    def __init__(self, cfg: dict, command: str):
        self.cfg = cfg
        self.dir = Path(cfg["out"])
        for sub in SUBDIRS:
            (self.dir / sub).mkdir(parents=True, exist_ok=True)
        (self.dir / "config.yaml").write_text(config_mod.dump(cfg))
        handler = logging.FileHandler(self.dir / "logs" / f"{command}.log", mode="w")
        handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
        logging.getLogger().addHandler(handler)
        self._handler = handler

    def close(self):
        logging.getLogger().removeHandler(self._handler)
        self._handler.close()

    def path(self, *parts) -> Path:
        return self.dir.joinpath(*parts)

    def data_dir(self) -> Path:
        return Path(self.cfg["paths"]["data"] or self.path("data"))

    def dataset(self, part: str) -> Dataset:
        return load_dataset(self.data_dir() / part)

    def classifier_path(self) -> Path:
        return Path(self.cfg["paths"]["classifier"] or self.path("checkpoints", "classifier.ckpt"))

    def denoiser_path(self) -> Path:
        return Path(self.cfg["paths"]["denoiser"] or self.path("checkpoints", "denoiser.ckpt"))


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def cmd_gen_data(run: Run) -> None:
    ds = generate_synthetic(config_mod.shape_config(run.cfg), name="shapes")
    parts = split(ds, config_mod.split_fractions(run.cfg), seed=run.cfg["dataset"]["seed"])
    for name, part in zip(("train", "val", "test"), parts):
        save_dataset(part, run.data_dir() / name)
        log.info("wrote %s split: %d images", name, len(part))


def cmd_train_clf(run: Run) -> None:
    ckpt = train_classifier(run.dataset("train"), config_mod.train_hyper(run.cfg), val=run.dataset("val"))
    save_classifier(ckpt, run.classifier_path())
    log.info("classifier metrics %s", ckpt.metrics)
    print(f"train_acc={ckpt.metrics['train_acc']:.4f} val_acc={ckpt.metrics['val_acc']:.4f}")


def cmd_train_denoiser(run: Run) -> None:
    clf = load_classifier(_require(run.classifier_path(), "classifier checkpoint"))
    ckpt = train_cafd(run.dataset("train"), clf, config_mod.cafd_config(run.cfg), val=run.dataset("val"))
    save_denoiser(ckpt, run.denoiser_path())
    write_curves_csv(ckpt, run.path("reports", "loss_curves.csv"))


def _maybe_denoiser(run: Run):
    p = run.denoiser_path()
    return load_denoiser(p) if p.exists() else None


def cmd_attack(run: Run) -> None:
    clf = load_classifier(_require(run.classifier_path(), "classifier checkpoint"))
    test = run.dataset("test")
    cfg = config_mod.attack_config(run.cfg)
    den = _maybe_denoiser(run) if cfg.kind in ("bpda", "whitebox_adaptive") else None
    x, y = test.tensors()
    res = run_attack(clf.model, x, cfg, labels=y, denoiser=den.denoiser if den else None)
    adv = Dataset(to_uint8(res.x_adv), test.labels, test.num_classes,
                  {"name": f"adversarial-{cfg.kind}", "seed": cfg.seed, "attack": cfg.to_dict()})
    save_dataset(adv, run.path("data", f"adversarial_{cfg.kind}"))
    report = evaluate(clf.model, test, cfg, den, batch_size=run.cfg["eval"]["batch_size"])
    write_reports([report], run.path("reports", "attack.csv"), run.path("reports", "attack.txt"))
    print(report.summary())


def _eval_attacks(run: Run, with_denoiser: bool):
    out = {}
    for name in run.cfg["eval"]["attacks"]:
        if name == "none":
            out[name] = None
        elif name in ("bpda", "whitebox") and not with_denoiser:
            continue
        else:
            out[name] = config_mod.named_attack(run.cfg, name)
    return out


def cmd_eval(run: Run) -> None:
    clf = load_classifier(_require(run.classifier_path(), "classifier checkpoint"))
    test = run.dataset("test")
    den = _maybe_denoiser(run)
    bs = run.cfg["eval"]["batch_size"]
    reports = []
    for name, cfg in _eval_attacks(run, den is not None).items():
        if cfg is None or cfg.kind not in ("bpda", "whitebox_adaptive"):
            reports.append(evaluate(clf.model, test, cfg, None, batch_size=bs))
        if den is not None:
            reports.append(evaluate(clf.model, test, cfg, den, batch_size=bs))
    write_reports(reports, run.path("reports", "eval.csv"), run.path("reports", "eval.txt"))
    for r in reports:
        print(r.summary())


def cmd_sweep(run: Run) -> None:
    clf = load_classifier(_require(run.classifier_path(), "classifier checkpoint"))
    test = run.dataset("test")
    ev = run.cfg["eval"]
    base = config_mod.attack_config(run.cfg, kind=ev["dist_kind"], step_size=ev["dist_step_size"],
                                    targeted=False, random_start=None)
    rows = distance_fooling_experiment(clf.model, test, base, ev["dist_strengths"], ev["dist_axis"],
                                       batch_size=ev["batch_size"])
    write_rows_csv(rows, run.path("reports", "distance_fooling.csv"))
    plot_distance_fooling(rows, run.path("plots", "distance_fooling.png"))
    rho = spearman([r["mean_delta"] for r in rows], [r["fooling_rate"] for r in rows])
    print(f"distance/fooling spearman = {rho:.3f}")

    den = _maybe_denoiser(run)
    if den is not None:
        eps = [config_mod.number(e) for e in ev["eps_grid"]]
        attacks = {n.upper(): config_mod.named_attack(run.cfg, n) for n in ("pgd_n", "pgd_t", "cafa")}
        brow = budget_sweep(clf.model, den, test, attacks, eps, batch_size=ev["batch_size"])
        write_rows_csv(brow, run.path("reports", "budget_sweep.csv"))
        plot_budget_sweep(brow, run.path("plots", "budget_sweep.png"))


def cmd_ablate(run: Run) -> None:
    clf = load_classifier(_require(run.classifier_path(), "classifier checkpoint"))
    attacks = {n.upper(): config_mod.named_attack(run.cfg, n) for n in ("cafa", "pgd_n", "pgd_t")}
    base = config_mod.cafd_config(run.cfg)
    results = ablation_run(run.dataset("train"), clf, run.dataset("test"), base,
                           run.cfg["eval"]["ablation_variants"], attacks, val=run.dataset("val"))
    rows = []
    for variant, res in results.items():
        save_denoiser(res["checkpoint"], run.path("checkpoints", f"denoiser_{variant}.ckpt"))
        for name, rep in res["reports"].items():
            rows.append({"variant": variant, "attack": name, "accuracy": rep.accuracy,
                         "error_rate": rep.error_rate})
            print(f"{variant:>7} {name:>6} accuracy={rep.accuracy:.4f}")
    write_rows_csv(rows, run.path("reports", "ablation.csv"))
    plot_ablation(results, run.path("plots", "ablation.png"))


def cmd_viz(run: Run) -> None:
    clf = load_classifier(_require(run.classifier_path(), "classifier checkpoint"))
    den = load_denoiser(_require(run.denoiser_path(), "denoiser checkpoint"))
    test = run.dataset("test")
    x, y = test.tensors()
    x = x[: run.cfg["eval"]["viz_count"]]
    adv = run_attack(clf.model, x, config_mod.attack_config(run.cfg), labels=y[: len(x)]).x_adv
    cam_grid(clf.model, x, adv, denoise(den, adv), run.path("plots", "cam_grid.png"))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-clf": cmd_train_clf,
    "train-denoiser": cmd_train_denoiser,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "viz": cmd_viz,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cafd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="YAML run config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, e.g. attack.epsilon=4/255 (repeatable)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="run directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    logging.getLogger("cafd").setLevel(logging.INFO)
    if os.environ.get("CAFD_NUM_THREADS"):
        torch.set_num_threads(int(os.environ["CAFD_NUM_THREADS"]))
    try:
        cfg = config_mod.resolve(args.config, args.overrides, args.seed, args.out)
    except (ConfigError, OSError) as exc:
        print(f"cafd: config error: {exc}", file=sys.stderr)
        return 2
    torch.manual_seed(cfg["seed"])
    run = Run(cfg, args.command)
    try:
        COMMANDS[args.command](run)
    except (FileNotFoundError, DatasetError, CheckpointError, TrainingDivergedError, ValueError) as exc:
        log.error("%s failed: %s", args.command, exc)
        print(f"cafd {args.command}: {exc}", file=sys.stderr)
        return 1
    finally:
        run.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
