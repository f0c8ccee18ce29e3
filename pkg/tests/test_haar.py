import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dyadlab.grid import Cube, Lattice, ShiftedDyadicSystem
from dyadlab.haar import (
    HaarBasis,
    HaarIndex,
    LatticeFunction,
    analyze,
    conditional_expectation,
    haar_function,
    load_lattice_function,
    save_lattice_function,
    synthesize,
)


@given(seed=st.integers(0, 2**31), d=st.sampled_from([1, 2]), shifted=st.booleans())
def test_roundtrip_and_parseval(seed, d, shifted):
    N = 5 if d == 1 else 3
    rng = np.random.default_rng(seed)
    lat = Lattice.padded(d, N, 0)
    system = ShiftedDyadicSystem.random(lat, rng) if shifted else ShiftedDyadicSystem.standard(Lattice.unit(d, N))
    basis = HaarBasis(system)
    f = rng.standard_normal(system.lattice.domain_shape) * basis.tree.covered
    c = basis.analyze_array(f)
    assert np.abs(basis.synthesize_array(c) - f).max() < 1e-12
    assert np.sum(c**2) == pytest.approx(np.sum(f**2) * system.lattice.cell_measure, rel=1e-12)


@pytest.mark.parametrize("d,N", [(1, 6), (2, 3)])
def test_gram_identity(d, N):
    basis = HaarBasis(ShiftedDyadicSystem.standard(Lattice.unit(d, N)))
    m = basis.matrix()
    gram = m @ m.T * basis.lattice.cell_measure
    assert np.abs(gram - np.eye(basis.size)).max() < 1e-12


def test_cancellative_rows_have_mean_zero(unit6):
    _, basis = unit6
    m = basis.matrix()
    canc = basis.geometry["cancellative"]
    assert np.abs(m[canc].sum(axis=1)).max() < 1e-10
    assert (~canc).sum() == basis.tree.T


def test_haar_function_matches_matrix_row(unit6):
    system, basis = unit6
    idx = HaarIndex(Cube(3, (5,)), (1,))
    h = haar_function(idx, system)
    row = basis.row(idx)
    assert np.allclose(basis.matrix([row])[0], h.values.ravel())
    assert h.norm() == pytest.approx(1.0)


def test_typed_api_and_conditional_expectation(unit6, rng):
    system, basis = unit6
    f = LatticeFunction(system.lattice, rng.standard_normal(system.lattice.domain_shape))
    coeffs = analyze(f, basis)
    assert np.allclose(synthesize(coeffs).values, f.values)
    e2 = conditional_expectation(f, system, 2)
    assert np.allclose(e2.values.reshape(4, -1).std(axis=1), 0.0)
    assert e2.integral() == pytest.approx(f.integral())


def test_cube_averages(unit6, rng):
    system, basis = unit6
    f = rng.standard_normal(system.lattice.domain_shape)
    avg = basis.cube_averages(f)
    g = basis.geometry
    for r in (0, 7, basis.size - 1):
        lo = int(g["lo"][r][0])
        assert avg[r] == pytest.approx(f[lo:lo + int(g["cells"][r])].mean())


def test_lattice_function_csv_roundtrip(tmp_path, rng):
    lat = Lattice.padded(2, 3, 0)
    for values in (rng.standard_normal(lat.domain_shape), rng.standard_normal(lat.domain_shape) * (1 + 2j)):
        f = LatticeFunction(lat, values)
        path = tmp_path / "f.csv"
        save_lattice_function(f, path)
        g = load_lattice_function(path)
        assert g.lattice == lat
        assert np.array_equal(g.values, f.values)
