import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dyadlab.grid import Lattice
from dyadlab.operator import (
    DiscretizedOperator,
    KernelSpec,
    beurling_apply_array,
    beurling_kernel,
    estimate_cz_norms,
    fit_growth_exponent,
    gaussian_cross_check,
    hilbert_cell_pair,
    quad_cell_pair,
    standard_estimate_quotients,
)


def test_hilbert_form_is_antisymmetric_toeplitz():
    op = DiscretizedOperator(KernelSpec.hilbert(), Lattice.unit(1, 5))
    assert np.allclose(op.form, -op.form.T)
    assert np.allclose(np.diag(op.form), 0.0)
    assert np.allclose(op.form[3, 7], op.form[10, 14])


def test_hilbert_cell_pair_matches_quadrature():
    kernel = KernelSpec.hilbert()
    h = 1.0 / 16
    for a, b in ((0, 2), (3, 9), (5, 1)):
        exact = hilbert_cell_pair(h, a, b)
        approx = quad_cell_pair(kernel, a * h, (a + 1) * h, b * h, (b + 1) * h)
        assert exact == pytest.approx(approx, rel=1e-6)


def test_hilbert_norm_bounded_by_pi():
    op = DiscretizedOperator(KernelSpec.hilbert(), Lattice.unit(1, 7))
    norm = op.l2_norm().value
    assert 2.0 < norm <= math.pi + 1e-9


def test_transpose_pairing(rng):
    op = DiscretizedOperator(KernelSpec.hilbert(), Lattice.unit(1, 4))
    f, g = rng.standard_normal(16), rng.standard_normal(16)
    assert op.pair(g, f) == pytest.approx(op.transpose().pair(f, g))
    assert np.sum(g * op.apply_array(f)) == pytest.approx(np.sum(op.apply_adjoint_array(g) * f))


def test_declared_hilbert_constants_dominate_samples():
    kernel = KernelSpec.hilbert(1.0)
    c0, cpsi = standard_estimate_quotients(kernel, 4000, 1)
    assert c0 <= kernel.c0 * (1 + 1e-12)
    assert cpsi <= kernel.c_psi * (1 + 1e-12)


@given(n=st.integers(-8, 8).filter(lambda k: k != 0), seed=st.integers(0, 1000))
def test_beurling_multiplier_isometry(n, seed):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((32, 32)) + 1j * rng.standard_normal((32, 32))
    f -= f.mean()
    out = beurling_apply_array(n, f)
    assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(f), rel=1e-12)
    assert np.allclose(beurling_apply_array(-n, out), f)


def test_beurling_kernel_size_constant():
    z = np.exp(1j * np.linspace(0, 2 * np.pi, 17))
    for n in (1, 4, -3):
        assert np.allclose(np.abs(beurling_kernel(n, 2 * z)) * 4, abs(n) / math.pi)
        c0, _ = estimate_cz_norms(abs(n), 0.5)
        assert c0 == pytest.approx(abs(n) / math.pi, rel=1e-12)


def test_growth_fit_recovers_power():
    ns = np.arange(1, 17)
    assert fit_growth_exponent(ns, 3 * ns**1.5) == pytest.approx(1.5)


def test_cross_check_improves_with_resolution():
    errs = [gaussian_cross_check(2, s)["discrepancy"] for s in (16, 32, 64)]
    assert errs[0] > errs[1] > errs[2]
