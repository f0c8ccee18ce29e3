import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dyadlab.haar import LatticeFunction
from dyadlab.weight import (
    WeightProfile,
    a2,
    ainfty,
    carleson_constant,
    carleson_embed_check,
    checkerboard_weight,
    dual_weight,
    joint_a2,
    load_weight_csv,
    lognormal_weight,
    power_weight,
    save_weight_csv,
)


def test_constant_weight_characteristics(unit6):
    system, _ = unit6
    w = WeightProfile.from_values(np.full(64, 3.0), system)
    assert a2(w) == pytest.approx(1.0)
    assert ainfty(w) == pytest.approx(1.0)
    assert joint_a2(w, w) == pytest.approx(9.0)


@given(seed=st.integers(0, 10_000), c=st.floats(0.1, 10.0))
def test_scaling_laws(unit6, seed, c):
    system, _ = unit6
    rng = np.random.default_rng(seed)
    w = lognormal_weight(system, 1.0, rng)
    s = lognormal_weight(system, 1.0, rng)
    assert joint_a2(w.scaled(c), s) == pytest.approx(c * joint_a2(w, s), rel=1e-12)
    assert ainfty(w.scaled(c)) == pytest.approx(ainfty(w), rel=1e-12)
    assert a2(w) >= 1.0 - 1e-12
    assert ainfty(w) >= 1.0 - 1e-12


def test_power_weight_growth(unit6):
    system, _ = unit6
    values = [a2(power_weight(system, alpha, 0.0)) for alpha in (0.0, 0.5, 1.0, 1.5)]
    assert values[0] == pytest.approx(1.0)
    assert all(b > a for a, b in zip(values, values[1:]))
    w = power_weight(system, 0.5, 0.0)
    # cell averages of |x|^a are exact: total mass equals 1/(1+a)
    assert w.values.sum() * system.lattice.cell_measure == pytest.approx(1 / 1.5)


def test_dual_weight_is_reciprocal(unit6, rng):
    system, _ = unit6
    w = lognormal_weight(system, 0.7, rng)
    assert np.allclose(dual_weight(w).values, w.reciprocal().values)
    with pytest.raises(ValueError):
        dual_weight(w, 1.0)


def test_checkerboard_a2(unit6):
    system, _ = unit6
    w = checkerboard_weight(system, 1.0, 4.0, 3)
    # a parent of two cubes with values 1 and 4 is the worst case
    assert a2(w) == pytest.approx((1 + 4) / 2 * (1 + 0.25) / 2)


def test_carleson_constant_and_embedding(unit6, rng):
    system, _ = unit6
    sigma = lognormal_weight(system, 0.5, rng)
    masses = sigma.masses()
    coeffs = {k: 0.5 * masses[k] for k in masses if k >= 3}
    found, _ = carleson_constant(coeffs, sigma)
    assert found <= 0.5 * (system.N - 3 + 1) + 1e-12
    f = LatticeFunction(system.lattice, rng.standard_normal(64))
    lhs, rhs, A = carleson_embed_check(coeffs, sigma, f)
    assert lhs <= 4 * A * rhs
    with pytest.raises(ValueError):
        carleson_embed_check(coeffs, sigma, f, A=found / 2)


def test_weight_csv_roundtrip(unit6, tmp_path, rng):
    system, _ = unit6
    w = lognormal_weight(system, 1.0, rng)
    save_weight_csv(w, tmp_path / "w.csv")
    assert np.array_equal(load_weight_csv(tmp_path / "w.csv", system).values, w.values)


def test_negative_weight_rejected(unit6):
    system, _ = unit6
    with pytest.raises(ValueError):
        WeightProfile.from_values(-np.ones(64), system)
