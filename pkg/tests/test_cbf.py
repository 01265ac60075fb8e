import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fasm.cbf import (SafetySpec, bounding_radius, cbfsc_residual, clearance, evaluate, is_safe, safe_radius,
                      surplus_distance)

POINT_A = np.array([0.62, 0.368, 0.17])
SMALL_START = np.array([0.60, -0.40, 0.16])

coords = st.floats(-2, 2, allow_nan=False)
vec3 = st.tuples(coords, coords, coords).map(np.array)


@pytest.mark.parametrize("dims, radius", [((0.22, 0.32, 0.06), 0.19647), ((0.1, 0.1, 0.1), 0.08660), ((0, 0, 0), 0.0)])
def test_bounding_radius(dims, radius):
    assert bounding_radius(dims) == pytest.approx(radius, abs=5e-6)


def test_bounding_radius_rejects_negative():
    with pytest.raises(ValueError):
        bounding_radius((-1, 0, 0))


@pytest.mark.parametrize("args, r", [((0.001, 0.0866, 0.0), 0.0876), ((0, 0, 0), 0.0), ((0.05, 0.1965, 0.01), 0.2565)])
def test_safe_radius(args, r):
    assert safe_radius(*args) == pytest.approx(r, abs=1e-12)
    assert SafetySpec(*args).r_safe == pytest.approx(r, abs=1e-12)


def test_negative_distances_rejected():
    with pytest.raises(ValueError):
        SafetySpec(-0.1, 0.1)


class TestSurplus:
    def test_offset(self):
        o = np.array([0.3, -0.2, 0.5])
        assert surplus_distance(o + [1.5, 0, 0], o, 0.5) == pytest.approx(1.0)

    def test_centre(self):
        assert surplus_distance(np.zeros(3), np.zeros(3), 0.3) == pytest.approx(-0.3)

    def test_table_point(self):
        # ||(0.02, 0.768, 0.01)|| = sqrt(0.590324) = 0.7683254
        assert surplus_distance(POINT_A, SMALL_START, 0.0876) == pytest.approx(0.6807254, abs=5e-7)


class TestSafe:
    def test_boundary_is_safe(self):
        assert is_safe(np.array([0.0876, 0, 0]), np.zeros(3), 0.001, 0.0866)

    def test_centre_unsafe(self):
        assert not is_safe(np.zeros(3), np.zeros(3), 0.001, 0.0866)

    def test_table_point(self):
        assert np.linalg.norm(POINT_A - SMALL_START) == pytest.approx(0.7683254, abs=5e-7)
        assert is_safe(POINT_A, SMALL_START, 0.001, 0.0866)


class TestResidual:
    def test_unit_gamma_is_next_step_surplus(self):
        x0, x1, o0, o1 = np.zeros(3), np.ones(3), np.array([2.0, 0, 0]), np.array([2.5, 0, 0])
        assert cbfsc_residual(x0, x1, o0, o1, 0.2, 1.0) == surplus_distance(x1, o1, 0.2)

    def test_standing_still(self):
        x, o = np.zeros(3), np.array([1.0, 0, 0])
        assert cbfsc_residual(x, x, o, o, 0.3, 0.25) == pytest.approx(0.25 * 0.7)

    def test_sign_flip_against_substitution(self):
        # obstacle approaching a fixed point along x, H_k = 1 - 0.2 = 0.8, gamma = 0.1:
        # the criterion holds iff the next distance is at least 0.2 + 0.9 * 0.8 = 0.92
        x, o_k, gamma = np.zeros(3), np.array([1.0, 0, 0]), 0.1
        for d_next in np.linspace(0.85, 0.99, 29):
            res = cbfsc_residual(x, x, o_k, np.array([d_next, 0, 0]), 0.2, gamma)
            direct = (d_next - 0.2) - 0.9 * 0.8
            assert res == pytest.approx(direct, abs=1e-15)
            if abs(d_next - 0.92) > 1e-9:
                assert (res >= 0) == (d_next > 0.92)

    @pytest.mark.parametrize("gamma", [0.0, -0.1, 1.5])
    def test_gamma_range(self, gamma):
        with pytest.raises(ValueError):
            cbfsc_residual(np.zeros(3), np.zeros(3), np.ones(3), np.ones(3), 0.1, gamma)


@settings(max_examples=300, deadline=None)
@given(vec3, vec3, vec3, vec3, st.floats(0, 0.5), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_residual_monotone_in_gamma_when_safe(x0, x1, o0, o1, r, g1, g2):
    if surplus_distance(x0, o0, r) < 0:
        return
    lo, hi = sorted((g1, g2))
    assert cbfsc_residual(x0, x1, o0, o1, r, lo) <= cbfsc_residual(x0, x1, o0, o1, r, hi) + 1e-12


@settings(max_examples=300, deadline=None)
@given(vec3, vec3, st.floats(0, 0.1), st.floats(0, 0.3), st.floats(0, 0.05))
def test_surplus_is_clearance_minus_rd(x, o, d_min, R_o, r_d):
    spec = SafetySpec(d_min, R_o, r_d)
    assert spec.surplus(x, o) == pytest.approx(clearance(x, o, d_min, R_o) - r_d, abs=1e-12)
    ev = evaluate("ee", x, o, spec)
    assert ev.H == pytest.approx(ev.h - r_d, abs=1e-12)


def test_criterion_chain_keeps_true_clearance(rng):
    """Steps that satisfy the criterion against an estimate off by at most r_d never breach the true set."""
    spec = SafetySpec(0.001, 0.0866, 0.02)
    for _ in range(200):
        o = rng.uniform(-1, 1, 3)
        x = o + rng.normal(size=3)
        x = o + (x - o) * (spec.r_safe + rng.uniform(0, 0.3)) / np.linalg.norm(x - o)
        H_prev = spec.surplus(x, o)
        for _ in range(50):
            gamma = rng.uniform(1e-4, 1.0)
            o_next = o + rng.normal(scale=0.02, size=3)
            err = rng.normal(size=3)
            o_hat = o_next + err * spec.r_d / np.linalg.norm(err)  # worst-case magnitude
            # put the next point exactly on the criterion boundary, in a random direction from o_hat
            d = rng.normal(size=3)
            x_next = o_hat + d / np.linalg.norm(d) * (spec.r_safe + (1 - gamma) * H_prev)
            assert spec.residual(x, x_next, o, o_hat, gamma) >= -1e-12
            assert spec.clearance(x_next, o_next) >= -1e-12
            x, o = x_next, o_next
            H_prev = spec.surplus(x, o)
            if H_prev < 0:
                break
