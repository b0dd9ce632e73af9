import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_tiny
from oracles import cam_loop, central_diff, l2_loop, phi_loop, probe_positions, rel_err
from cafd.cam import (
    CamIdentityError,
    ClassActivationFeatures,
    cam_map,
    cam_overlay,
    check_gap_identity,
    class_activation_features,
    feature_distance,
    feature_distance_grad,
    normalize_map,
)


def caf(phi, cls=0):
    phi = torch.as_tensor(phi, dtype=torch.float64)
    return ClassActivationFeatures(phi[None], torch.tensor([cls]))


def test_toy_phi_and_cam():
    # K=1 toy: features [[1, 3]], w=2, b=0.5
    feats = torch.tensor([[[[1.0, 3.0]]]])
    w = torch.tensor([[2.0]])
    phi = feats * w[:, :, None, None]
    assert phi.tolist() == [[[[2.0, 6.0]]]]
    c = ClassActivationFeatures(phi, torch.tensor([0]))
    assert cam_map(c).tolist() == [[[2.0, 6.0]]]
    assert cam_map(c).mean().item() == pytest.approx(4.5 - 0.5)


def test_zero_weight_row_gives_zero_phi(tiny, images):
    tiny.head.weight.data[1].zero_()
    out = class_activation_features(tiny, images, 1)
    assert torch.all(out.phi == 0)


@pytest.mark.parametrize("seed", range(5))
def test_phi_matches_loop_oracle(seed):
    m = make_tiny(seed=seed)
    x = torch.rand(3, 3, 8, 8, generator=torch.Generator().manual_seed(seed))
    out = class_activation_features(m, x)
    with torch.no_grad():
        logits, feats = m(x)
    assert torch.equal(out.class_index, logits.argmax(1))
    w = m.head.weight.detach().numpy()
    for n in range(len(x)):
        ref = phi_loop(feats[n].numpy(), w[out.class_index[n]])
        assert np.abs(out.phi[n].detach().numpy() - ref).max() <= 1e-6
        assert np.abs(cam_map(out)[n].detach().numpy() - cam_loop(ref)).max() <= 1e-6


def test_fixed_class_selection(tiny, images):
    out = class_activation_features(tiny, images, 2)
    assert torch.all(out.class_index == 2)
    with pytest.raises(ValueError):
        class_activation_features(tiny, images, 3)


def test_cam_mean_identity(tiny, images):
    out = class_activation_features(tiny, images)
    with torch.no_grad():
        logits, _ = tiny(images)
    c = out.class_index
    lhs = cam_map(out).mean(dim=(1, 2)).double()
    rhs = logits.gather(1, c[:, None])[:, 0].double() - tiny.head.bias[c].double()
    assert (lhs - rhs).abs().max() <= 1e-5


def test_identity_check_detects_violation(tiny, images):
    logits, feats = tiny(images)
    with pytest.raises(CamIdentityError):
        check_gap_identity(tiny, logits + 1.0, feats)


def test_two_channel_cam_sum():
    rng = np.random.default_rng(3)
    phi = rng.normal(size=(2, 3, 3))
    assert np.abs(cam_map(caf(phi))[0].numpy() - cam_loop(phi)).max() <= 1e-12


def test_constant_overlay_is_zero():
    out = cam_overlay(caf(np.full((2, 4, 4), 3.0)), 16)
    assert out.shape == (1, 16, 16) and torch.all(out == 0)


def test_overlay_range(tiny, images):
    out = cam_overlay(class_activation_features(tiny, images), 8)
    assert out.shape == (6, 8, 8)
    assert out.min() >= 0 and out.max() <= 1
    assert torch.allclose(out.amax(dim=(1, 2)), torch.ones(6, dtype=out.dtype))


def test_normalize_map():
    m = torch.tensor([[[1.0, 3.0]]])
    assert normalize_map(m).tolist() == [[[0.0, 1.0]]]


def test_distance_examples():
    assert feature_distance(caf(np.ones((2, 1, 2))), caf(np.ones((2, 1, 2)))).item() == 0.0
    assert feature_distance(caf(np.zeros((2, 1, 2))), caf(np.ones((2, 1, 2)))).item() == pytest.approx(2.0)


def test_distance_shape_mismatch():
    with pytest.raises(ValueError):
        feature_distance(caf(np.zeros((2, 1, 2))), caf(np.zeros((1, 1, 2))))


@pytest.mark.parametrize("seed", range(5))
def test_distance_matches_loop_oracle(seed):
    m = make_tiny(seed=seed)
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 3, 8, 8, generator=g)
    xa = (x + 0.05 * torch.randn(x.shape, generator=g)).clamp(0, 1)
    a = class_activation_features(m, x)
    b = class_activation_features(m, xa, a.class_index)
    d = feature_distance(a, b)
    for n in range(2):
        assert abs(d[n].item() - l2_loop(a.phi[n].detach(), b.phi[n].detach())) <= 1e-6


finite = st.floats(-10, 10, allow_nan=False, width=64)
phis = arrays(np.float64, (3, 2, 2), elements=finite)


@settings(max_examples=60, deadline=None)
@given(phis, phis, phis)
def test_distance_metric_properties(a, b, c):
    A, B, C = caf(a), caf(b), caf(c)
    dab = feature_distance(A, B).item()
    assert dab >= 0
    assert dab == pytest.approx(feature_distance(B, A).item())
    assert feature_distance(A, A).item() == 0.0
    assert dab <= feature_distance(A, C).item() + feature_distance(C, B).item() + 1e-6


@settings(max_examples=30, deadline=None)
@given(phis, phis, st.permutations(range(3)))
def test_distance_channel_permutation_invariant(a, b, perm):
    d0 = feature_distance(caf(a), caf(b)).item()
    d1 = feature_distance(caf(a[list(perm)]), caf(b[list(perm)])).item()
    assert d1 == pytest.approx(d0, rel=1e-12, abs=1e-12)


def test_grad_zero_at_singular_point(tiny64):
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    g = feature_distance_grad(tiny64, x, x)
    assert torch.all(g == 0)


@pytest.mark.parametrize("probe", range(3))
def test_grad_matches_finite_differences(probe):
    m = make_tiny(seed=probe, dtype=torch.float64)
    rng = np.random.default_rng(probe)
    x = torch.tensor(rng.uniform(0, 1, (2, 3, 8, 8)))
    xv = np.clip(x.numpy() + rng.normal(0, 0.1, x.shape), 0, 1)
    with torch.no_grad():
        ref = class_activation_features(m, x)

    def f(arr):
        with torch.no_grad():
            b = class_activation_features(m, torch.tensor(arr), ref.class_index)
            return float(feature_distance(ref, b).sum())

    g = feature_distance_grad(m, x, torch.tensor(xv))
    pos = probe_positions(xv.shape, rng)
    fd = central_diff(f, xv, pos, h=1e-4)
    analytic = np.array([g[p].item() for p in pos])
    assert rel_err(analytic, fd).max() <= 1e-4


def test_grad_scales_linearly(tiny64):
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    xv = (x + 0.1).clamp(0, 1)
    xt = xv.clone().requires_grad_(True)
    from cafd.cam import caf_distance

    ref = class_activation_features(tiny64, x)
    (g2,) = torch.autograd.grad(2 * caf_distance(tiny64, ref.phi.detach(), xt, ref.class_index).sum(), xt)
    g1 = feature_distance_grad(tiny64, x, xv)
    assert torch.allclose(g2, 2 * g1)
