import numpy as np

from oracles import central_diff, straddles_kink


def relu_sum(a):
    return float(np.maximum(a, 0).sum())


def test_kink_inside_stencil_is_flagged():
    x = np.array([3e-5, 0.5])
    assert straddles_kink(relu_sum, x, [(0,)])
    assert not straddles_kink(relu_sum, x, [(1,)])


def test_smooth_curve_is_not_flagged():
    x = np.array([0.3, -1.2, 2.0])
    norm = lambda a: float(np.sqrt((a ** 2).sum()))
    assert not straddles_kink(norm, x, [(0,), (1,), (2,)])
    assert np.allclose(central_diff(norm, x, [(0,)]), x[0] / np.linalg.norm(x))
