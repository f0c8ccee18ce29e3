"""Dyadic weights and their characteristics."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import Cube, Lattice, ShiftedDyadicSystem
from .haar import CubeTree, LatticeFunction, _split


@dataclass
class WeightProfile:
    """Nonnegative density on a lattice, with cube masses over a system's tree."""

    density: LatticeFunction
    system: ShiftedDyadicSystem
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.density.is_complex:
            raise ValueError("weights are real")
        if np.any(self.density.values < 0):
            raise ValueError("weights are nonnegative")
        if self.density.lattice != self.system.lattice:
            raise ValueError("lattice mismatch")

    @classmethod
    def from_values(cls, values, system: ShiftedDyadicSystem) -> "WeightProfile":
        return cls(LatticeFunction(system.lattice, np.asarray(values, dtype=float)), system)

    @property
    def values(self) -> np.ndarray:
        return self.density.values

    @property
    def tree(self) -> CubeTree:
        if "tree" not in self._cache:
            self._cache["tree"] = CubeTree(self.system)
        return self._cache["tree"]

    def masses(self) -> dict[int, np.ndarray]:
        """``w(Q)`` for every tree cube, keyed by level."""
        if "masses" not in self._cache:
            self._cache["masses"] = self.tree.masses(self.values)
        return self._cache["masses"]

    def averages(self) -> dict[int, np.ndarray]:
        return {k: m / 2.0 ** (-k * self.system.d) for k, m in self.masses().items()}

    def mass(self, cube: Cube) -> float:
        lo, hi = self.system.cube_box(cube)
        dl = np.array(self.system.lattice.domain_lo)
        return float(self.values[tuple(slice(int(a), int(b)) for a, b in zip(lo - dl, hi - dl))].sum()
                     * self.system.lattice.cell_measure)

    def scaled(self, c: float) -> "WeightProfile":
        return WeightProfile(self.density * c, self.system)

    def reciprocal(self) -> "WeightProfile":
        if np.any(self.values[self.tree.covered] <= 0):
            raise ValueError("reciprocal weight needs strictly positive cells")
        out = np.zeros_like(self.values)
        out[self.tree.covered] = 1.0 / self.values[self.tree.covered]
        return WeightProfile.from_values(out, self.system)


def _same(w: WeightProfile, s: WeightProfile):
    if w.density.lattice != s.density.lattice:
        raise ValueError("lattice mismatch")


def joint_a2(w: WeightProfile, sigma: WeightProfile, max_level: int | None = None) -> float:
    """``sup_Q w(Q) sigma(Q) / |Q|^2`` over the dyadic cubes of the system.

    ``max_level`` restricts the family to cubes no finer than that level.
    """
    _same(w, sigma)
    mw, ms = w.masses(), sigma.masses()
    d = w.system.d
    best = 0.0
    for k in mw:
        if max_level is not None and k > max_level:
            continue
        best = max(best, float((mw[k] * ms[k]).max()) / 2.0 ** (-2 * k * d))
    return best


def a2(w: WeightProfile, max_level: int | None = None) -> float:
    return joint_a2(w, w.reciprocal(), max_level)


def dual_weight(w: WeightProfile, p: float = 2.0) -> WeightProfile:
    """``sigma = w**(1 - p')`` cellwise."""
    if not p > 1:
        raise ValueError("p must exceed 1")
    vals = w.values[w.tree.covered]
    if np.any(vals <= 0):
        raise ValueError("dual weight needs strictly positive cells")
    pp = p / (p - 1.0)
    out = np.zeros_like(w.values)
    out[w.tree.covered] = vals ** (1.0 - pp)
    return WeightProfile.from_values(out, w.system)


def maximal_restricted(sigma: WeightProfile, level: int) -> np.ndarray:
    """For every cube ``Q`` at ``level``, cellwise ``M(sigma 1_Q)`` on ``Q``.

    Returns finest-level blocks (T, n, ..., n): the cell value is the largest
    average over cubes between the cell and its level-``level`` ancestor.
    """
    tree = sigma.tree
    avgs = sigma.averages()
    best = tree.spread(avgs[level], level)
    for k in range(level + 1, tree.N + 1):
        best = np.maximum(best, tree.spread(avgs[k], k))
    return best


def dyadic_maximal(sigma: WeightProfile, cube: Cube) -> LatticeFunction:
    """``M(sigma 1_Q)`` restricted to ``Q`` (zero elsewhere)."""
    tree = sigma.tree
    full = tree.insert(maximal_restricted(sigma, cube.level))
    mask = LatticeFunction.indicator(sigma.system.lattice, *sigma.system.cube_box(cube)).values
    return LatticeFunction(sigma.system.lattice, full * mask)


def ainfty(sigma: WeightProfile) -> float:
    """``sup_Q sigma(Q)^-1 int_Q M(sigma 1_Q)``, skipping zero-mass cubes."""
    tree = sigma.tree
    masses = sigma.masses()
    if all(float(m.max()) == 0.0 for m in masses.values()):
        raise ValueError("identically zero weight")
    h = sigma.system.lattice.cell_measure
    d = sigma.system.d
    best = 0.0
    for level in range(tree.k_top, tree.N + 1):
        mx = maximal_restricted(sigma, level)
        integral = mx
        for _ in range(tree.N - level):
            integral = _split(integral, d).sum(axis=-1)
            m = round(integral.shape[-1] ** (1.0 / d))
            integral = integral.reshape(integral.shape[:-1] + (m,) * d)
        integral = integral * h
        ms = masses[level]
        pos = ms > 0
        if pos.any():
            best = max(best, float((integral[pos] / ms[pos]).max()))
    return best


def carleson_constant(coeffs: dict[int, np.ndarray], sigma: WeightProfile) -> tuple[float, tuple[int, tuple]]:
    """Smallest ``A`` with ``sum_{R in P} c_R <= A sigma(P)`` and the attaining cube.

    ``coeffs`` holds one array per level shaped like the tree level.
    """
    tree = sigma.tree
    masses = sigma.masses()
    d = sigma.system.d
    below = None
    best, where = 0.0, (tree.N, ())
    for level in range(tree.N, tree.k_top - 1, -1):
        total = np.array(coeffs.get(level, np.zeros(tree.level_shape(level))), dtype=float)
        if below is not None:
            total = total + _split(below, d).sum(axis=-1).reshape(total.shape)
        ms = masses[level]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(ms > 0, total / np.where(ms > 0, ms, 1.0), np.where(total > 0, np.inf, 0.0))
        pos = np.unravel_index(int(np.argmax(ratio)), ratio.shape)
        if ratio[pos] > best:
            best, where = float(ratio[pos]), (level, tuple(int(v) for v in pos))
        below = total
    return best, where


def carleson_embed_check(
    coeffs: dict[int, np.ndarray], sigma: WeightProfile, f: LatticeFunction, A: float | None = None
) -> tuple[float, float, float]:
    """Return ``(lhs, rhs, A)``: ``sum_R c_R (<f>^sigma_R)^2`` and ``||f||^2_{L2(sigma)}``.

    If ``A`` is given it must be a Carleson constant of ``coeffs``; a violation
    raises with the offending cube.  The embedding gives ``lhs <= 4 A rhs``.
    """
    found, where = carleson_constant(coeffs, sigma)
    if A is None:
        A = found
    elif found > A * (1 + 1e-12):
        raise ValueError(f"coefficients are not Carleson with constant {A}: cube {where} needs {found}")
    tree = sigma.tree
    num = tree.masses(f.values * sigma.values)
    den = sigma.masses()
    lhs = 0.0
    for level, c in coeffs.items():
        c = np.asarray(c, dtype=float)
        m = den[level]
        with np.errstate(divide="ignore", invalid="ignore"):
            avg = np.where(m > 0, num[level] / np.where(m > 0, m, 1.0), 0.0)
        lhs += float((c * avg**2).sum())
    rhs = float((np.abs(f.values) ** 2 * sigma.values).sum() * sigma.system.lattice.cell_measure)
    return lhs, rhs, A


# ---------------------------------------------------------------------------
# generators and files


def power_weight(system: ShiftedDyadicSystem, alpha: float, x0: float | tuple = 0.0) -> WeightProfile:
    """``|x - x0|**alpha`` (l-infinity distance) averaged over each cell exactly in d = 1.

    In higher dimension cell centres are used.
    """
    lat = system.lattice
    if lat.d == 1:
        h = lat.h
        edges = (lat.domain_lo[0] + np.arange(lat.domain_shape[0] + 1)) * h - float(np.atleast_1d(x0)[0])
        if alpha <= -1:
            raise ValueError("power weight needs alpha > -1 for local integrability")
        prim = np.sign(edges) * np.abs(edges) ** (alpha + 1) / (alpha + 1)
        vals = np.diff(prim) / h
    else:
        centers = np.meshgrid(*lat.cell_centers(), indexing="ij")
        x0 = np.broadcast_to(np.asarray(x0, dtype=float), (lat.d,))
        dist = np.max([np.abs(c - x0[a]) for a, c in enumerate(centers)], axis=0)
        vals = dist**alpha
    tree = CubeTree(system)
    return WeightProfile.from_values(np.where(tree.covered, vals, 0.0), system)


def lognormal_weight(system: ShiftedDyadicSystem, scale: float, rng: np.random.Generator) -> WeightProfile:
    """Cellwise ``exp(scale * Z)`` with ``Z`` standard normal."""
    tree = CubeTree(system)
    vals = np.exp(scale * rng.standard_normal(system.lattice.domain_shape))
    return WeightProfile.from_values(np.where(tree.covered, vals, 0.0), system)


def checkerboard_weight(system: ShiftedDyadicSystem, a: float, b: float, level: int) -> WeightProfile:
    """Alternate values ``a`` and ``b`` on the level cubes."""
    lat = system.lattice
    side = 1 << (lat.N - level)
    grids = np.meshgrid(*[(lat.domain_lo[k] + np.arange(lat.domain_shape[k])) // side for k in range(lat.d)], indexing="ij")
    parity = sum(grids) % 2
    tree = CubeTree(system)
    return WeightProfile.from_values(np.where(tree.covered, np.where(parity == 0, a, b), 0.0), system)


def save_weight_csv(w: WeightProfile, path) -> None:
    buf = io.StringIO()
    np.savetxt(buf, w.values.ravel(), fmt="%.17g")
    lat = w.system.lattice
    Path(path).write_text(f"# dyadlab-weight v1 d={lat.d} N={lat.N} shape={','.join(map(str, lat.domain_shape))}\n" + buf.getvalue())


def load_weight_csv(path, system: ShiftedDyadicSystem) -> WeightProfile:
    vals = np.loadtxt(path, comments="#", ndmin=1)
    return WeightProfile.from_values(vals.reshape(system.lattice.domain_shape), system)


def standard_unit_system(d: int, N: int) -> ShiftedDyadicSystem:
    return ShiftedDyadicSystem.standard(Lattice.unit(d, N))
