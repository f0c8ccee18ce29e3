import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dyadlab import twoweight as tw
from dyadlab.shift import random_shift
from dyadlab.twoweight import (
    WEIGHTED_LEVEL_SET_CONSTANT,
    CubeCatalog,
    build_splitting_forest,
    contained_cubes_identity_gap,
    cube_differences,
    disjoint_block_check,
    level_set_decay,
    martingale_differences,
    matrix_vanishing_violations,
    projection_matrix,
    shift_cell_matrix,
    two_weight_bound_check,
    weighted_inner,
    weighted_norm,
)
from dyadlab.weight import WeightProfile, dual_weight, lognormal_weight, power_weight


@pytest.fixture(scope="module")
def catalog(unit6):
    system, _ = unit6
    return CubeCatalog(system)


def _weights(system, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return lognormal_weight(system, scale, rng), lognormal_weight(system, scale, rng)


def test_catalog_tree_relations(catalog):
    assert catalog.size == 127
    for n in range(1, catalog.size):
        p = int(catalog.parent[n])
        assert catalog.contains(p, n) and catalog.level[p] == catalog.level[n] - 1
    assert len(catalog.descendants(0)) == catalog.size
    assert catalog.ancestor(catalog.size - 1, 6) == 0


def test_weighted_differences_telescope(unit6, catalog, rng):
    system, _ = unit6
    sigma, _ = _weights(system, 1)
    f = rng.standard_normal(64)
    diffs = martingale_differences(f, sigma)
    total = diffs["top"] + sum(v for k, v in diffs.items() if k != "top")
    assert np.allclose(total.reshape(-1), f)
    rows = cube_differences(catalog, f, sigma)
    assert np.allclose(rows.sum(axis=0) + diffs["top"].reshape(-1), f)
    proj = projection_matrix(catalog, sigma, 3)
    assert np.allclose(proj @ f, rows[3])
    # differences of distinct cubes are sigma-orthogonal
    assert weighted_inner(rows[1], rows[2], sigma) == pytest.approx(0.0, abs=1e-12)


@given(seed=st.integers(0, 5000), i=st.integers(0, 2), j=st.integers(0, 2))
def test_norm_dominates_testing_constants(unit6, catalog, seed, i, j):
    system, basis = unit6
    w, sigma = _weights(system, seed)
    shift = random_shift(basis, i, j, seed)
    rep = two_weight_bound_check(shift, w, sigma, catalog)
    assert rep.lower_bound_ok
    assert rep.norm <= rep.rhs * 10


def test_svd_and_power_norms_agree(unit6):
    system, basis = unit6
    w, sigma = _weights(system, 4)
    s_mat = shift_cell_matrix(random_shift(basis, 2, 1, 3))
    assert weighted_norm(s_mat, w, sigma, "svd") == pytest.approx(weighted_norm(s_mat, w, sigma, "power"), rel=1e-8)


def test_testing_constants_scale(unit6, catalog):
    system, basis = unit6
    w, sigma = _weights(system, 7)
    s_mat = shift_cell_matrix(random_shift(basis, 1, 1, 2))
    base = tw.testing_constants(s_mat, w, sigma, catalog)
    scaled = tw.testing_constants(s_mat, w.scaled(9.0), sigma, catalog)
    assert scaled.value == pytest.approx(3.0 * base.value, rel=1e-12)
    assert scaled.value_star == pytest.approx(3.0 * base.value_star, rel=1e-12)


def test_testing_bound_ratios_finite(unit6, catalog):
    system, basis = unit6
    w = power_weight(system, 0.7, 0.0)
    rep = tw.testing_bound_verify(random_shift(basis, 1, 2, 9), w, dual_weight(w), catalog)
    assert 0 < rep.ratio < 10 and 0 < rep.ratio_dual < 10
    assert rep.ainfty_sigma >= 1 and rep.ainfty_w >= 1


def test_structural_identities(unit6, catalog, rng):
    system, basis = unit6
    w, sigma = _weights(system, 11, 0.5)
    shift = random_shift(basis, 1, 1, 5)
    f, g = rng.standard_normal(64), rng.standard_normal(64)
    assert matrix_vanishing_violations(shift, w, sigma, catalog, f, g) == 0
    lhs, rhs = disjoint_block_check(shift, w, sigma, catalog, f, g)
    assert lhs <= rhs * (1 + 1e-9)
    assert contained_cubes_identity_gap(shift, w, sigma, catalog) < 1e-12


@pytest.mark.parametrize("seed", range(4))
def test_forest_invariants(unit6, catalog, seed):
    system, basis = unit6
    w, sigma = _weights(system, seed, 1.5)
    forest = build_splitting_forest(2, w, sigma, 0, catalog)
    inv = forest.invariants()
    assert all(inv.values()), inv
    doc = json.loads(forest.to_json())
    assert len(doc["cubes"]) == catalog.size


def test_forest_skips_null_cubes(unit6, catalog):
    system, _ = unit6
    values = np.ones(64)
    values[:16] = 0.0
    w = WeightProfile.from_values(values, system)
    forest = build_splitting_forest(1, w, w, 0, catalog)
    assert forest.excluded.any()
    assert all(forest.invariants().values())


def test_level_set_decay_report(unit6, catalog):
    system, basis = unit6
    w, sigma = _weights(system, 3)
    shift = random_shift(basis, 2, 1, 3)
    forest = build_splitting_forest(shift.kappa, w, sigma, 0, catalog)
    best = None
    for k, a in forest.classes():
        for p in forest.principal_cubes(k, a):
            for b in np.unique(forest.b[forest.principal_of == p]):
                size = len(forest.subcollection(p, b))
                if best is None or size > best[0]:
                    best = (size, p, b, k)
    _, p, b, k = best
    sub = shift.restrict_levels([lv for lv in range(system.N) if lv % (shift.kappa + 1) == forest.k[p]])
    rep = level_set_decay(sub, forest, p, int(b), w, sigma)
    if not rep.vacuous:
        assert rep.support_ok
        # halving past the first level set
        assert np.all(rep.halving_ratios[1:] <= 0.5 + 1e-12)
        assert rep.weighted_constant <= WEIGHTED_LEVEL_SET_CONSTANT
        json.dumps({k: (float(v) if isinstance(v, np.floating) else v) for k, v in rep.as_dict().items()})
    assert math.isfinite(rep.threshold_constant)
