import csv
import math

import numpy as np
import pytest
import torch
from PIL import Image

from conftest import FIXTURES, make_tiny
from cafd.attacks import AttackConfig
from cafd.backbone import CamClassifier, load_classifier, predict
from cafd.datasets import ShapeGenConfig, generate_synthetic
from cafd.denoiser import CafdTrainConfig, DenoiserCheckpoint, DenoiserNet
from cafd.evaluation import (
    ABLATION_VARIANTS,
    ablation_config,
    ablation_run,
    budget_sweep,
    cam_grid,
    cross_model_eval,
    distance_fooling_experiment,
    evaluate,
    plot_ablation,
    plot_budget_sweep,
    plot_distance_fooling,
    spearman,
    write_reports,
)

PGD = AttackConfig(kind="pgd_ce", iterations=3)


@pytest.fixture(scope="module")
def setup(toy_trained):
    model = toy_trained[0]
    ds = generate_synthetic(ShapeGenConfig(num_classes=4, samples_per_class=8, seed=11))
    ident = DenoiserCheckpoint(DenoiserNet(widths=(4, 8)).eval(), None, {}, "x")
    return model, ds, ident


def test_clean_report(setup):
    model, ds, _ = setup
    rep = evaluate(model, ds)
    x, y = ds.tensors()
    assert rep.error_rate == pytest.approx(float((predict(model, x) != y).float().mean()))
    assert rep.fooling_rate == 0.0 and rep.mean_delta == 0.0 and rep.max_linf == 0.0
    assert rep.n == len(ds) and rep.error_rate == rep.clean_error


def test_attack_report_fields(setup):
    model, ds, _ = setup
    rep = evaluate(model, ds, PGD, batch_size=7)
    assert 0 <= rep.error_rate <= 1 and 0 <= rep.fooling_rate <= 1
    assert rep.max_linf <= PGD.epsilon + 1e-6
    assert rep.fooling_rate >= rep.error_rate - rep.clean_error
    assert rep.scenario["attack"]["kind"] == "pgd_ce"
    assert "error=" in rep.summary()


def test_identity_defense_matches_undefended(setup):
    model, ds, ident = setup
    a = evaluate(model, ds, PGD)
    b = evaluate(model, ds, PGD, ident)
    assert a.error_rate == b.error_rate
    assert b.mean_delta_restored == pytest.approx(b.mean_delta, abs=1e-6)


def test_zero_budget_attack_is_clean(setup):
    model, ds, _ = setup
    rep = evaluate(model, ds, AttackConfig(kind="cafa", epsilon=0.0))
    assert rep.fooling_rate == 0.0 and rep.error_rate == rep.clean_error


def test_adaptive_attacks_need_denoiser(setup):
    model, ds, _ = setup
    with pytest.raises(ValueError):
        evaluate(model, ds, AttackConfig(kind="bpda"))


def test_incompatible_shapes(setup):
    _, ds, _ = setup
    with pytest.raises(ValueError):
        evaluate(make_tiny(), ds)


def test_reports_are_deterministic(setup):
    model, ds, ident = setup
    for cfg in (AttackConfig(), PGD, AttackConfig(kind="random_sign")):
        assert evaluate(model, ds, cfg, ident) == evaluate(model, ds, cfg, ident)


def test_distance_fooling_rows(setup):
    model, ds, _ = setup
    rows = distance_fooling_experiment(model, ds, PGD, [5, 0, 1])
    assert [r["strength"] for r in rows] == [0, 1, 5]
    assert rows[0]["mean_delta"] == 0.0 and rows[0]["fooling_rate"] == 0.0
    eps_rows = distance_fooling_experiment(model, ds, PGD, [0, 2 / 255, 8 / 255], axis="epsilon")
    assert eps_rows[2]["mean_delta"] > eps_rows[1]["mean_delta"]


@pytest.mark.parametrize("grid", [[5], [1, 5]])
def test_distance_fooling_needs_three_points(setup, grid):
    model, ds, _ = setup
    with pytest.raises(ValueError):
        distance_fooling_experiment(model, ds, PGD, grid)


def test_spearman():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    assert math.isnan(spearman([1, 2, 3], [0, 0, 0]))


def test_budget_sweep_grid_and_zero_point(setup):
    model, ds, ident = setup
    attacks = {"PGD_N": PGD, "CAFA": AttackConfig(iterations=2)}
    grid = (0.0, 4 / 255, 8 / 255)
    rows = budget_sweep(model, ident, ds, attacks, grid)
    assert {(r["attack"], r["epsilon"]) for r in rows} == {(a, e) for a in attacks for e in grid}
    clean = evaluate(model, ds, None, ident).accuracy
    for r in rows:
        if r["epsilon"] == 0.0:
            assert r["accuracy"] == clean


def test_ablation_configs():
    base = CafdTrainConfig()
    assert ablation_config(base, "full") == base
    assert not ablation_config(base, "no_adv").use_adv
    assert not ablation_config(base, "no_caf").use_caf
    assert ablation_config(base, "msed").loss_variant == "mse"
    with pytest.raises(ValueError):
        ablation_config(base, "no_both")


def test_ablation_run_with_pretrained(setup, tmp_path):
    model, ds, ident = setup
    from cafd.backbone import ClassifierCheckpoint

    trained = {v: ident for v in ABLATION_VARIANTS}
    out = ablation_run(ds, ClassifierCheckpoint(model), ds, trained=trained,
                       attacks={"PGD_N": PGD})
    assert list(out) == list(ABLATION_VARIANTS)
    accs = {v: out[v]["reports"]["PGD_N"].accuracy for v in out}
    assert len(set(accs.values())) == 1
    plot_ablation(out, tmp_path / "a.png")
    assert (tmp_path / "a.png").stat().st_size > 0


def test_cross_model_identity_transfer(setup):
    model, ds, ident = setup
    reports = cross_model_eval(ident, {"a": model}, ds, {"PGD_N": PGD})
    assert reports[0] == evaluate(model, ds, PGD, None, target_id="a")
    assert reports[1] == evaluate(model, ds, PGD, ident, target_id="a")
    assert all(r.max_linf > 0 for r in reports)


def test_cross_model_shape_mismatch(setup):
    _, ds, ident = setup
    with pytest.raises(ValueError):
        cross_model_eval(ident, {"small": make_tiny()}, ds, {"PGD_N": PGD})


def test_gray_box_uses_other_denoiser(setup):
    model, ds, ident = setup
    torch.manual_seed(0)
    other = DenoiserNet(widths=(4, 8))
    torch.nn.init.normal_(other.out.weight, std=0.05)
    rep = evaluate(model, ds, AttackConfig(kind="bpda", iterations=2), ident, attack_denoiser=other)
    assert rep.scenario["attack_defense"] == "separate"


def test_write_reports_and_plots(setup, tmp_path):
    model, ds, ident = setup
    reports = [evaluate(model, ds), evaluate(model, ds, PGD, ident)]
    write_reports(reports, tmp_path / "r.csv", tmp_path / "r.txt")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [r["attack"] for r in rows] == ["none", "pgd_ce"]
    assert len((tmp_path / "r.txt").read_text().splitlines()) == 2
    plot_distance_fooling([{"strength": s, "mean_delta": s, "fooling_rate": s / 10} for s in (0, 1, 2)],
                          tmp_path / "f.png")
    plot_budget_sweep([{"attack": "A", "epsilon": e, "accuracy": 1 - e} for e in (0.1, 0.2)],
                      tmp_path / "b.png")
    assert (tmp_path / "f.png").exists() and (tmp_path / "b.png").exists()


def test_cam_grid_dimensions(tiny, images):
    one = cam_grid(tiny, images[:1], images[:1], images[:1], scale=1)
    assert one.shape == (3 * 8, 8, 3) and one.dtype == np.uint8
    five = cam_grid(tiny, images[:5], images[:5], images[:5], scale=2)
    assert five.shape == (3 * 16, 5 * 16, 3)


def test_cam_grid_mismatched_counts(tiny, images):
    with pytest.raises(ValueError):
        cam_grid(tiny, images[:2], images[:3], images[:2])


def test_cam_grid_golden(tmp_path):
    from fixtures.make_fixtures import grid_inputs

    model = load_classifier(FIXTURES / "tiny_classifier.ckpt").model
    grid = cam_grid(model, *grid_inputs(), path=tmp_path / "g.png")
    golden = np.asarray(Image.open(FIXTURES / "golden_cam_grid.png"))
    assert grid.shape == golden.shape
    assert np.abs(grid.astype(int) - golden.astype(int)).max() <= 1
    assert np.array_equal(np.asarray(Image.open(tmp_path / "g.png")), grid)


def test_second_architecture_runs(setup):
    _, ds, ident = setup
    torch.manual_seed(0)
    other = CamClassifier(3, 4, (8, 16, 16), 32, pool="avg").eval()
    reports = cross_model_eval(ident, {"avg": other}, ds, {"PGD_N": PGD})
    assert len(reports) == 2 and reports[0].scenario["target"] == "avg"
