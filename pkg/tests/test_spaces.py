import numpy as np
import pytest

from aimgate.spaces import (ContinuousSpace, DiscreteSpace, deviates,
                            space_from_json, symmetric_box)

BOX2 = symmetric_box(2)


def test_deviates_boundary_is_not_deviation():
    # squared distance exactly eps: strict inequality says no deviation
    assert deviates(np.array([0.3, 0.0]), np.array([0.1, 0.0]), 0.04, BOX2) is False


def test_deviates_above_threshold():
    assert deviates(np.array([0.5, 0.0]), np.array([0.1, 0.0]), 0.04, BOX2) is True


def test_deviates_discrete():
    sp = DiscreteSpace(4)
    assert deviates(2, 2, 0.0, sp) is False
    assert deviates(1, 2, 0.0, sp) is True


def test_deviates_symmetric_continuous():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = rng.uniform(-1, 1, 2)
        b = rng.uniform(-1, 1, 2)
        eps = float(rng.uniform(0, 0.5))
        assert deviates(a, b, eps, BOX2) == deviates(b, a, eps, BOX2)


def test_deviates_identical_action_never_deviates():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a = rng.uniform(-1, 1, 2)
        assert deviates(a, a, float(rng.uniform(0, 1)), BOX2) is False
    sp = DiscreteSpace(5)
    for i in range(5):
        assert deviates(i, i, 0.0, sp) is False


def test_deviates_dimension_mismatch():
    with pytest.raises(ValueError):
        deviates(np.array([0.1]), np.array([0.1, 0.2]), 0.04, BOX2)


def test_space_validation():
    with pytest.raises(ValueError):
        ContinuousSpace(np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        DiscreteSpace(1)


def test_space_json_roundtrip():
    for sp in (BOX2, DiscreteSpace(4)):
        assert space_from_json(sp.to_json()) == sp


def test_clamp():
    a = BOX2.clamp(np.array([2.0, -3.0]))
    assert np.allclose(a, [1.0, -1.0])
