import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dyadlab.grid import (
    Cube,
    GoodnessConfig,
    Lattice,
    ModulusOfContinuity,
    ShiftedDyadicSystem,
    bad_probability_bound,
    estimate_bad_probability,
    independence_pvalue,
)


def _random_system(seed, d=1, N=5):
    return ShiftedDyadicSystem.random(Lattice.padded(d, N, 0), np.random.default_rng(seed))


def test_modulus_parse_and_dini():
    phi = ModulusOfContinuity.parse("power:0.5")
    assert str(phi) == "power:0.5"
    assert phi.dini(0.25) == pytest.approx(1.0)
    root = ModulusOfContinuity.custom(np.sqrt, "root")
    assert root.dini(0.25) == pytest.approx(1.0, rel=1e-8)
    log = ModulusOfContinuity.logpower(2.0)
    assert log.dini(0.1) == pytest.approx(2.0 / (1.0 + math.log(10.0) / 2.0))
    with pytest.raises(ValueError):
        ModulusOfContinuity.parse("cubic:3")
    with pytest.raises(ValueError):
        ModulusOfContinuity.power(1.5)


def test_goodness_config_validation():
    with pytest.raises(ValueError):
        GoodnessConfig(ModulusOfContinuity.power(1.0), 4)
    with pytest.raises(ValueError):
        GoodnessConfig(ModulusOfContinuity.power(0.5), 2)
    thr = GoodnessConfig(ModulusOfContinuity.power(0.5), 6, horizon=10).thresholds()
    assert (thr[:6] < 0).all()
    assert thr[8] == pytest.approx(16.0)


@given(seed=st.integers(0, 10_000), level=st.integers(1, 5), pos=st.integers(0, 31))
def test_parent_contains_child(seed, level, pos):
    system = _random_system(seed)
    cube = system.cube_of_cell((pos % (1 << 5),), level)
    parent = system.parent(cube)
    assert cube in system.children(parent)
    plo, phi_ = system.cube_box(parent)
    lo, hi = system.cube_box(cube)
    assert (plo <= lo).all() and (hi <= phi_).all()
    assert system.contains(parent, cube)


@given(seed=st.integers(0, 10_000))
def test_children_tile_parent(seed):
    system = _random_system(seed, d=2, N=4)
    cube = system.cube_of_cell((3, 5), 2)
    kids = system.children(cube)
    assert len(kids) == 4
    assert sum(system.cube_cells(k) ** 2 for k in kids) == system.cube_cells(cube) ** 2
    assert all(system.parent(k) == cube for k in kids)


def test_join_and_distance():
    system = ShiftedDyadicSystem.standard(Lattice.unit(1, 4))
    a, b = Cube(4, (0,)), Cube(4, (15,))
    assert system.join(a, b) == Cube(0, (0,))
    assert system.distance(a, b) == 14
    assert system.distance(a, Cube(4, (1,))) == 0


def test_bad_mask_matches_scalar():
    cfg = GoodnessConfig(ModulusOfContinuity.power(0.5), 4, horizon=8)
    for seed in range(5):
        system = _random_system(seed, N=6)
        cubes = [system.cube_of_cell((c,), k) for k in range(0, 7) for c in range(0, 64, 5)]
        levels = np.array([c.level for c in cubes])
        idx = np.array([c.index for c in cubes])
        mask = system.bad_mask(levels, idx, cfg)
        assert list(mask) == [system.is_bad(c, cfg) for c in cubes]


def test_bad_probability_matches_bound_shape():
    cfg = GoodnessConfig(ModulusOfContinuity.power(0.5), 10)
    assert bad_probability_bound(cfg, 1) == pytest.approx(0.5)
    p, se = estimate_bad_probability(cfg, 1, 20_000, 3)
    assert 0 < p <= 0.5 + 3 * se
    again = estimate_bad_probability(cfg, 1, 20_000, 3)
    assert again == (p, se)


def test_bad_probability_decreases_with_r():
    estimates = [estimate_bad_probability(GoodnessConfig(ModulusOfContinuity.power(0.5), r), 1, 40_000, 1)[0]
                 for r in (6, 8, 10)]
    assert estimates[0] > estimates[1] > estimates[2]
    # geometric decay close to 2**(-r/2)
    assert estimates[0] / estimates[2] == pytest.approx(4.0, rel=0.25)


@pytest.mark.parametrize("d", [1, 2])
def test_independence_pvalue_in_range(d):
    cfg = GoodnessConfig(ModulusOfContinuity.power(0.5), 6)
    p = independence_pvalue(cfg, d, 20_000, 2)
    assert 0.0 <= p <= 1.0


def test_padded_lattice_contains_top_cubes():
    lat = Lattice.padded(1, 5, 0)
    for seed in range(10):
        system = ShiftedDyadicSystem.random(lat, np.random.default_rng(seed))
        lo, hi = system.top_box()
        assert lo[0] >= lat.domain_lo[0] and hi[0] <= lat.domain_lo[0] + lat.domain_shape[0]
        assert math.isclose(lat.h, 2.0**-5)
