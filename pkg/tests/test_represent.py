import math

import numpy as np
import pytest

from dyadlab.grid import GoodnessConfig, Lattice, ModulusOfContinuity, ShiftedDyadicSystem
from dyadlab.operator import DiscretizedOperator, KernelSpec
from dyadlab.represent import (
    CLASS_NAMES,
    SystemExpansion,
    TauTable,
    class_prefactors,
    classify_pairs,
    good_expansion_check,
    classification_violations,
    normalization_slack,
    random_systems,
    ratio_estimate,
    reassemble,
    tau,
    tau_tail,
)

SQRT = ModulusOfContinuity.power(0.5)
LINEAR = ModulusOfContinuity.power(1.0)


@pytest.fixture(scope="module")
def setting():
    lat = Lattice.padded(1, 6, 0)
    op = DiscretizedOperator(KernelSpec.hilbert(), lat)
    cfg = GoodnessConfig(SQRT, 4)
    rng = np.random.default_rng(3)
    f = np.zeros(lat.domain_shape)
    g = np.zeros(lat.domain_shape)
    sl = lat.support_slices()
    f[sl] = rng.standard_normal(lat.support_shape)
    g[sl] = rng.standard_normal(lat.support_shape)
    return lat, op, cfg, f, g


def test_tau_values():
    assert tau(0, 0, SQRT, LINEAR, 1) == pytest.approx(1.0)
    # phi = t^(1/2), psi = t: tau(m, m) = 2^(m/2) 2^(-m/2) = 1 for m > 0
    assert tau(3, 3, SQRT, LINEAR, 1) == pytest.approx(1.0)
    assert tau(4, 0, SQRT, LINEAR, 1) == pytest.approx(2.0**-2)
    with pytest.raises(ValueError):
        tau(-1, 0, SQRT, LINEAR, 1)


def test_tau_tail_convergence():
    # this pairing has non-summable diagonal terms
    assert math.isinf(tau_tail(SQRT, LINEAR, 1, 4))
    fast = ModulusOfContinuity.power(0.25)
    tail = tau_tail(fast, LINEAR, 1, 4)
    assert math.isfinite(tail) and tail > 0
    assert tau_tail(fast, LINEAR, 1, 6) < tail
    table = TauTable(fast, LINEAR, 1, 4)
    assert table.total == pytest.approx(table.entries.sum() + tail)
    assert table.polynomial_bound_constant(0.75, 1.0) > 0


def test_classification_properties(setting):
    lat, _, cfg, _, _ = setting
    totals = {}
    for system in random_systems(lat, 10, 5):
        pc = classify_pairs(system, cfg)
        for key, v in classification_violations(pc, cfg).items():
            totals[key] = totals.get(key, 0) + v
        counts = pc.counts()
        assert set(counts) == set(CLASS_NAMES.values())
    assert totals and all(v == 0 for v in totals.values())


def test_unfiltered_expansion_is_exact(setting):
    lat, op, cfg, f, g = setting
    lhs = float(op.pair(g, f))
    for system in random_systems(lat, 3, 9):
        exp = SystemExpansion(op, system, cfg)
        assert exp.unfiltered_sum(f, g) == pytest.approx(lhs, rel=1e-10)
        assert reassemble(exp.pieces(f, g, filtered=False)) == pytest.approx(lhs, rel=1e-10)


def test_shift_synthesis_matches_pieces(setting):
    lat, op, cfg, f, g = setting
    system = next(random_systems(lat, 1, 2))
    exp = SystemExpansion(op, system, cfg)
    for filtered in (False, True):
        shifts, sym_star, sym = exp.extract_shifts(lat.N, filtered=filtered)
        total = exp.synthesis_sum(shifts, sym_star, sym, f, g)
        assert total == pytest.approx(reassemble(exp.pieces(f, g, filtered=filtered)), rel=1e-9)


def test_normalization_slack_is_finite(setting):
    lat, op, cfg, _, _ = setting
    system = next(random_systems(lat, 1, 4))
    exp = SystemExpansion(op, system, cfg)
    shifts, _, _ = exp.extract_shifts(3)
    pre = class_prefactors(op.kernel.c0, op.kernel.c_psi, op.wbp_constant(), lambda i, j: tau(i, j, SQRT, LINEAR, 1))
    slack = normalization_slack(shifts, pre)
    assert slack and all(np.isfinite(v) for v in slack.values())
    assert max(v for (name, _, _), v in slack.items() if name == "out") <= 1.0


def test_good_filtered_identity_small(setting):
    _, op, cfg, f, g = setting
    lhs, est, se = good_expansion_check(op, f, g, cfg, 120, 11, pi_samples=200_000)
    assert abs(est - lhs) <= 4 * se


def test_ratio_estimate_delta_method():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    est, se = ratio_estimate(x, 0.5, 0.0)
    assert est == pytest.approx(5.0)
    assert se == pytest.approx(np.std(x, ddof=1) / 2 / 0.5)
    assert ratio_estimate(x, 0.5, 0.01)[1] > se


def test_standard_system_has_no_bits():
    lat = Lattice.unit(1, 4)
    system = ShiftedDyadicSystem.standard(lat)
    assert not system.bits.any()
