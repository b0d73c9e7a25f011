import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nftlab.mixture import GaussianMixture
from nftlab.rewards import build_reward, halfspace_reward, indicator_reward, radial_reward, weighted_sum

MIX = GaussianMixture([0.5, 0.5], [[-2.0, 0.0], [2.0, 0.0]], [[0.25, 0.25], [0.25, 0.25]])
points = arrays(np.float64, (6, 2), elements=st.floats(-5, 5))


def test_indicator_examples():
    assert indicator_reward(np.array([[2.0, 0.0]]), 1, MIX)[0] == 1.0
    assert indicator_reward(np.array([[-2.0, 0.0]]), 1, MIX)[0] == 0.0
    tie = np.array([[0.0, 0.7]])
    assert indicator_reward(tie, 0, MIX)[0] == 1.0 and indicator_reward(tie, 1, MIX)[0] == 0.0
    with pytest.raises(ValueError):
        indicator_reward(tie, 2, MIX)


def test_radial_examples():
    c = np.array([1.0, -1.0])
    assert radial_reward(c[None], c, 0.5)[0] == 1.0
    assert radial_reward(np.array([[1.0 + np.sqrt(0.5), -1.0]]), c, 0.5)[0] == pytest.approx(np.exp(-1.0))
    d = np.linspace(0, 3, 20)
    r = radial_reward(np.column_stack([c[0] + d, np.full(20, c[1])]), c, 0.5)
    assert np.all(np.diff(r) < 0)
    with pytest.raises(ValueError):
        radial_reward(c[None], c, 0.0)


def test_halfspace_examples():
    n = np.array([1.0, 1.0])
    assert halfspace_reward(np.array([[0.5, 0.5]]), n, 1.0)[0] == 1.0
    assert halfspace_reward(np.array([[5.0, 5.0]]), n, 1.0)[0] == 1.0
    assert halfspace_reward(np.array([[-1.0, 0.0]]), n, 1.0)[0] == 0.0
    with pytest.raises(ValueError):
        halfspace_reward(np.zeros((1, 2)), np.zeros(2), 0.0)


@settings(max_examples=50, deadline=None)
@given(points, st.floats(0, 1))
def test_rewards_are_pure_and_bounded(x, w):
    fns = [
        lambda p: indicator_reward(p, 1, MIX),
        lambda p: radial_reward(p, [0.0, 0.0], 2.0),
        lambda p: halfspace_reward(p, [1.0, 0.0], 0.0),
    ]
    for f in fns:
        a, b = f(x), f(x.copy())
        assert np.array_equal(a, b) and np.all((a >= 0) & (a <= 1))
    combo = weighted_sum(fns[:2], [w, 1 - w])(x)
    assert np.all((combo >= -1e-15) & (combo <= 1 + 1e-15))


def test_weighted_sum_rejects_bad_weights():
    with pytest.raises(ValueError):
        weighted_sum([lambda p: p], [0.7, 0.7])


def test_build_reward():
    x = np.array([[2.0, 0.0], [-2.0, 0.0]])
    np.testing.assert_array_equal(build_reward({"kind": "indicator", "target": 1}, MIX)(x), [1.0, 0.0])
    np.testing.assert_array_equal(build_reward({"kind": "halfspace", "normal": [-1, 0], "offset": 0}, MIX)(x), [0.0, 1.0])
    spec = {"kind": "sum", "weights": [0.5, 0.5], "parts": [{"kind": "indicator", "target": 0}, {"kind": "radial", "center": [2, 0], "tau": 1}]}
    np.testing.assert_allclose(build_reward(spec, MIX)(x), [0.5, 0.5 + 0.5 * np.exp(-16)])
    for bad in ({"kind": "ocr"}, {"kind": "radial", "center": [0, 0]}, {"kind": "indicator", "target": 5}, {"kind": "radial", "center": [0, 0], "tau": -1}):
        with pytest.raises(ValueError):
            build_reward(bad, MIX)
