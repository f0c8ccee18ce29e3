"""Dyadic shifts, paraproducts, Calderon-Zygmund decomposition and weak-type checks."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

from .grid import Cube, ShiftedDyadicSystem
from .haar import CubeTree, HaarBasis, LatticeFunction, _split
from .linalg import NormEstimate, matrix_power_norm, spectral_norm

DENSE_CELL_CAP = 4096
SEED_OFFSET = 1 << 40


def _eta_bits(code: np.ndarray, d: int) -> np.ndarray:
    code = np.asarray(code, dtype=np.int64)
    return (code[..., None] >> np.arange(d - 1, -1, -1)) & 1


def _eta_code(bits) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64)
    d = bits.shape[-1]
    return (bits << np.arange(d - 1, -1, -1)).sum(axis=-1)


@dataclass
class DyadicShift:
    """Sparse shift of type ``(i, j)`` acting on the Haar coefficients of ``basis``.

    Entry ``n`` maps the coefficient at row ``cols[n]`` (the ``I`` side) to row
    ``rows[n]`` (the ``J`` side) with weight ``values[n]``; ``k_level`` and
    ``k_lo`` identify the averaging cube ``K``.
    """

    basis: HaarBasis
    i: int
    j: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    k_level: np.ndarray
    k_lo: np.ndarray
    cancellative: bool = True
    validate: bool = True
    _matrix: sparse.csr_matrix | None = field(default=None, repr=False)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.values = np.asarray(self.values)
        self.k_level = np.asarray(self.k_level, dtype=np.int64)
        self.k_lo = np.asarray(self.k_lo, dtype=np.int64).reshape(-1, self.basis.d)
        n = len(self.rows)
        if not (len(self.cols) == len(self.values) == len(self.k_level) == len(self.k_lo) == n):
            raise ValueError("entry arrays must have equal length")
        if self.validate and n:
            slack = self.normalization_slack()
            if slack > 1 + 1e-12:
                raise ValueError(f"coefficient exceeds the averaging normalization by factor {slack}")
            self._check_geometry()

    @property
    def kappa(self) -> int:
        return max(self.i, self.j)

    @property
    def size(self) -> int:
        return len(self.values)

    def _check_geometry(self):
        g = self.basis.geometry
        for side, depth in ((self.cols, self.i), (self.rows, self.j)):
            if np.any(g["level"][side] != self.k_level + depth):
                raise ValueError("entry level does not match the shift type")
            cells = g["cells"][side][:, None]
            kc = np.left_shift(1, self.basis.N - self.k_level)[:, None]
            lo = g["lo"][side]
            if np.any((lo < self.k_lo) | (lo + cells > self.k_lo + kc)):
                raise ValueError("entry cube not contained in its averaging cube")

    def bound(self) -> np.ndarray:
        """``sqrt(|I||J|)/|K|`` per entry."""
        return 2.0 ** (-(self.i + self.j) * self.basis.d / 2.0) * np.ones(self.size)

    def normalization_slack(self) -> float:
        if not self.size:
            return 0.0
        return float(np.max(np.abs(self.values) / self.bound()))

    # -- linear algebra
    @property
    def matrix(self) -> sparse.csr_matrix:
        """Coefficient-space matrix (rows = output Haar rows)."""
        if self._matrix is None:
            n = self.basis.size
            self._matrix = sparse.csr_matrix((self.values, (self.rows, self.cols)), shape=(n, n))
        return self._matrix

    def apply_array(self, values: np.ndarray) -> np.ndarray:
        c = self.basis.analyze_array(values)
        out = (self.matrix @ c.reshape(-1, self.basis.size).T).T.reshape(c.shape)
        return self.basis.synthesize_array(out)

    def apply(self, f: LatticeFunction) -> LatticeFunction:
        return LatticeFunction(f.lattice, self.apply_array(f.values))

    def adjoint(self) -> "DyadicShift":
        return DyadicShift(
            self.basis, self.j, self.i, self.cols, self.rows, np.conj(self.values), self.k_level, self.k_lo,
            self.cancellative, self.validate,
        )

    def restrict(self, cubes) -> "DyadicShift":
        """Keep the blocks whose averaging cube lies in ``cubes`` (iterable of :class:`Cube`)."""
        sys = self.basis.system
        keep_keys = {(c.level, tuple(int(v) for v in sys.cube_lo(c))) for c in cubes}
        mask = np.array(
            [(int(lv), tuple(int(v) for v in lo)) in keep_keys for lv, lo in zip(self.k_level, self.k_lo)], dtype=bool
        )
        return self.select(mask)

    def select(self, mask: np.ndarray) -> "DyadicShift":
        mask = np.asarray(mask, dtype=bool)
        return DyadicShift(
            self.basis, self.i, self.j, self.rows[mask], self.cols[mask], self.values[mask],
            self.k_level[mask], self.k_lo[mask], self.cancellative, self.validate,
        )

    def restrict_levels(self, levels) -> "DyadicShift":
        return self.select(np.isin(self.k_level, list(levels)))

    def is_scale_separated(self) -> bool:
        if not self.size:
            return True
        return len(np.unique(self.k_level % (self.kappa + 1))) == 1

    def coefficient_norm(self) -> float:
        """Exact operator norm on L2 (the Haar basis is orthonormal)."""
        if not self.size:
            return 0.0
        used = np.unique(np.concatenate([self.rows, self.cols]))
        pos = {int(r): n for n, r in enumerate(used)}
        a = np.zeros((len(used), len(used)), dtype=self.values.dtype)
        np.add.at(a, ([pos[int(r)] for r in self.rows], [pos[int(c)] for c in self.cols]), self.values)
        return spectral_norm(a)

    def power_norm(self, **kw) -> NormEstimate:
        m = self.matrix
        return matrix_power_norm(m, **kw) if self.size else NormEstimate(0.0, 0, True)

    def dense_matrix(self) -> np.ndarray:
        """Matrix on domain cells: ``(S f)[c'] = sum_c M[c', c] f[c]``."""
        lat = self.basis.lattice
        if lat.n_cells > DENSE_CELL_CAP:
            raise ValueError(f"dense materialization needs {lat.n_cells} cells > cap {DENSE_CELL_CAP}")
        hm = self.basis.matrix()
        return (hm.T @ (self.matrix @ hm)) * lat.cell_measure

    # -- blocks
    def blocks(self) -> dict[Cube, "AveragingBlock"]:
        sys = self.basis.system
        out: dict[Cube, AveragingBlock] = {}
        keys = [(int(lv), tuple(int(v) for v in lo)) for lv, lo in zip(self.k_level, self.k_lo)]
        groups: dict[tuple, list[int]] = {}
        for n, key in enumerate(keys):
            groups.setdefault(key, []).append(n)
        for (lv, lo), idx in groups.items():
            cube = sys.cube_of_cell(lo, lv)
            idx = np.array(idx)
            out[cube] = AveragingBlock(
                self.basis, cube, self.i, self.j, self.rows[idx], self.cols[idx], self.values[idx]
            )
        return out


@dataclass
class AveragingBlock:
    """Averaging operator on one cube ``K``."""

    basis: HaarBasis
    cube: Cube
    i: int
    j: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def apply_array(self, values: np.ndarray) -> np.ndarray:
        c = self.basis.analyze_array(values)
        out = np.zeros_like(c)
        np.add.at(out, (Ellipsis, self.rows), self.values * c[..., self.cols])
        return self.basis.synthesize_array(out)

    def as_shift(self) -> DyadicShift:
        lo = self.basis.system.cube_lo(self.cube)
        n = len(self.rows)
        return DyadicShift(
            self.basis, self.i, self.j, self.rows, self.cols, self.values,
            np.full(n, self.cube.level), np.tile(lo, (n, 1)),
        )


def apply_block(block: AveragingBlock, f: LatticeFunction) -> LatticeFunction:
    if f.lattice != block.basis.lattice:
        raise ValueError("lattice mismatch")
    return LatticeFunction(f.lattice, block.apply_array(f.values))


def apply_shift(shift: DyadicShift, f: LatticeFunction) -> LatticeFunction:
    if f.lattice != shift.basis.lattice:
        raise ValueError("lattice mismatch")
    return shift.apply(f)


# ---------------------------------------------------------------------------
# random shifts


def _descendant_offsets(depth: int, d: int, side: int) -> np.ndarray:
    """Lower-corner offsets of the ``2**(depth d)`` descendants, C order."""
    grid = np.stack(np.meshgrid(*[np.arange(1 << depth)] * d, indexing="ij"), axis=-1)
    return grid.reshape(-1, d) * side


def random_shift(
    basis: HaarBasis,
    i: int,
    j: int,
    seed: int,
    *,
    maximal: bool = False,
    scale_class: int | None = None,
    full_eta: bool = False,
    density: float = 1.0,
) -> DyadicShift:
    """Random cancellative shift of type ``(i, j)``.

    Each averaging cube ``K`` draws its coefficients from a generator seeded by
    ``(seed, i, j, level, corner)``, so the same ``K`` gets the same block on any
    lattice containing it.  ``scale_class`` keeps only the levels congruent to it
    modulo ``max(i, j) + 1``.  ``full_eta`` couples every signature pair; the
    magnitudes are then divided by ``2**d - 1`` so every block stays a contraction.
    ``density`` is the probability that a block is kept.
    """
    if i < 0 or j < 0:
        raise ValueError("shift parameters must be non-negative")
    sys = basis.system
    tree = basis.tree
    d, N = basis.d, basis.N
    kappa = max(i, j)
    n_eta = basis.n_eta
    rows, cols, vals, klev, klo = [], [], [], [], []
    for level in range(basis.k_top, N - kappa):
        if scale_class is not None and (level - scale_class) % (kappa + 1):
            continue
        side_k = 1 << (N - level)
        k_corners = tree.level_lo(level).reshape(-1, d)
        off_i = _descendant_offsets(i, d, side_k >> i)
        off_j = _descendant_offsets(j, d, side_k >> j)
        bound = 2.0 ** (-(i + j) * d / 2.0)
        for corner in k_corners:
            rng = np.random.default_rng([seed + SEED_OFFSET, i, j, level + SEED_OFFSET, *(int(v) + SEED_OFFSET for v in corner)])
            if density < 1.0 and rng.random() >= density:
                continue
            lo_i = corner + off_i
            lo_j = corner + off_j
            ii, jj = np.meshgrid(np.arange(len(lo_i)), np.arange(len(lo_j)), indexing="ij")
            ii, jj = ii.ravel(), jj.ravel()
            if full_eta:
                ei, ej = np.meshgrid(np.arange(1, n_eta + 1), np.arange(1, n_eta + 1), indexing="ij")
                reps = n_eta * n_eta
                ii = np.repeat(ii, reps)
                jj = np.repeat(jj, reps)
                ei = np.tile(ei.ravel(), len(ii) // reps)
                ej = np.tile(ej.ravel(), len(jj) // reps)
                scale = bound / n_eta
            else:
                ei = rng.integers(1, n_eta + 1, size=len(ii))
                ej = rng.integers(1, n_eta + 1, size=len(ii))
                scale = bound
            if maximal:
                u = rng.choice((-1.0, 1.0), size=len(ii))
            else:
                u = rng.uniform(-1.0, 1.0, size=len(ii))
            cols.append(basis.rows_at(level + i, lo_i[ii], ei))
            rows.append(basis.rows_at(level + j, lo_j[jj], ej))
            vals.append(u * scale)
            klev.append(np.full(len(ii), level))
            klo.append(np.tile(corner, (len(ii), 1)))
    if not vals:
        empty = np.zeros(0, dtype=np.int64)
        return DyadicShift(basis, i, j, empty, empty, np.zeros(0), empty, np.zeros((0, d), dtype=np.int64))
    return DyadicShift(
        basis, i, j, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals),
        np.concatenate(klev), np.concatenate(klo),
    )


def zero_shift(basis: HaarBasis, i: int = 0, j: int = 0) -> DyadicShift:
    empty = np.zeros(0, dtype=np.int64)
    return DyadicShift(basis, i, j, empty, empty, np.zeros(0), empty, np.zeros((0, basis.d), dtype=np.int64))


def save_shift(shift: DyadicShift, path) -> None:
    """Text records ``K_level K_index | I_level I_index I_eta | J_level J_index J_eta | a``.

    Indices are system indices; signatures are bit strings.
    """
    g = shift.basis.geometry
    sys = shift.basis.system
    lines = [f"# dyadlab-shift v1 i={shift.i} j={shift.j} d={shift.basis.d}"]
    for r, c, a, lv, lo in zip(shift.rows, shift.cols, shift.values, shift.k_level, shift.k_lo):
        kidx = sys.cube_of_cell(lo, int(lv)).index
        fmt = lambda row: "{} {} {}".format(  # noqa: E731
            int(g["level"][row]), ",".join(map(str, g["index"][row])), "".join(map(str, g["eta"][row]))
        )
        lines.append(f"{int(lv)} {','.join(map(str, kidx))} | {fmt(c)} | {fmt(r)} | {float(a):.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_shift(path, basis: HaarBasis) -> DyadicShift:
    from .haar import HaarIndex

    text = Path(path).read_text().splitlines()
    head = dict(tok.split("=") for tok in text[0].split() if "=" in tok)
    sys = basis.system
    rows, cols, vals, klev, klo = [], [], [], [], []
    for line in text[1:]:
        if not line.strip():
            continue
        k, ipart, jpart, a = (p.strip() for p in line.split("|"))
        lv, kidx = k.split()
        cube = Cube(int(lv), tuple(int(v) for v in kidx.split(",")))

        def parse(part):
            l, idx, eta = part.split()
            return basis.row(HaarIndex(Cube(int(l), tuple(int(v) for v in idx.split(","))), tuple(int(ch) for ch in eta)))

        cols.append(parse(ipart))
        rows.append(parse(jpart))
        vals.append(float(a))
        klev.append(cube.level)
        klo.append(sys.cube_lo(cube))
    return DyadicShift(
        basis, int(head["i"]), int(head["j"]), np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64),
        np.array(vals), np.array(klev, dtype=np.int64), np.array(klo, dtype=np.int64).reshape(-1, basis.d),
    )


# ---------------------------------------------------------------------------
# paraproducts


@dataclass
class ParaproductSymbol:
    """Symbol ``b`` given by its cancellative Haar coefficients (top rows are ignored)."""

    basis: HaarBasis
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.shape != (self.basis.size,):
            raise ValueError("symbol must be a coefficient vector of the basis")
        c[~self.basis.geometry["cancellative"]] = 0.0
        self.coeffs = c

    @classmethod
    def from_function(cls, b: LatticeFunction, basis: HaarBasis) -> "ParaproductSymbol":
        return cls(basis, basis.analyze_array(b.values))

    def _cube_energy(self) -> dict[int, np.ndarray]:
        """Per level, the sum over signatures of squared coefficients, shaped like the tree level."""
        basis, tree = self.basis, self.basis.tree
        out = {}
        for level in range(basis.k_top, basis.N):
            start = basis.level_offsets[level]
            cnt = tree.T * (1 << ((level - basis.k_top) * basis.d)) * basis.n_eta
            e = (self.coeffs[start:start + cnt] ** 2).reshape(-1, basis.n_eta).sum(axis=1)
            out[level] = e.reshape(tree.level_shape(level))
        return out

    def bmo_norm(self) -> float:
        """Dyadic BMO norm: sup over cubes of ``(|Q|^-1 sum_{I in Q} b_I^2)^{1/2}``."""
        basis = self.basis
        energy = self._cube_energy()
        best = 0.0
        below = None
        for level in range(basis.N - 1, basis.k_top - 1, -1):
            total = energy[level].copy()
            if below is not None:
                total += _split(below, basis.d).sum(axis=-1).reshape(total.shape)
            best = max(best, float(total.max()) / 2.0 ** (-level * basis.d))
            below = total
        return math.sqrt(best)

    def apply_array(self, values: np.ndarray) -> np.ndarray:
        return self.basis.synthesize_array(self.coeffs * self.basis.cube_averages(values))

    def apply(self, f: LatticeFunction) -> LatticeFunction:
        return LatticeFunction(f.lattice, self.apply_array(f.values))

    def adjoint_apply_array(self, values: np.ndarray) -> np.ndarray:
        """``sum_K b_K <g, h_K> 1_K / |K|``."""
        basis, tree = self.basis, self.basis.tree
        c = basis.analyze_array(values) * self.coeffs
        lead = c.shape[:-1]
        acc = np.zeros(lead + (tree.T,) + (tree.top_cells,) * basis.d)
        for level in range(basis.k_top, basis.N):
            start = basis.level_offsets[level]
            cnt = tree.T * (1 << ((level - basis.k_top) * basis.d)) * basis.n_eta
            per_cube = c[..., start:start + cnt].reshape(lead + (-1, basis.n_eta)).sum(axis=-1)
            per_cube = per_cube.reshape(lead + tree.level_shape(level)) / 2.0 ** (-level * basis.d)
            acc += tree.spread(per_cube, level)
        return tree.insert(acc)

    def dense_matrix(self) -> np.ndarray:
        lat = self.basis.lattice
        if lat.n_cells > DENSE_CELL_CAP:
            raise ValueError("dense materialization above the cell cap")
        eye = np.eye(lat.n_cells).reshape((lat.n_cells,) + tuple(lat.domain_shape))
        cols = self.apply_array(eye * self.basis.tree.covered).reshape(lat.n_cells, -1)
        return cols.T


def paraproduct_apply(b: ParaproductSymbol, f: LatticeFunction) -> LatticeFunction:
    if f.lattice != b.basis.lattice:
        raise ValueError("lattice mismatch")
    return b.apply(f)


# ---------------------------------------------------------------------------
# Calderon-Zygmund decomposition and weak type


@dataclass
class CZDecomposition:
    lam: float
    f: LatticeFunction
    good: LatticeFunction
    cubes: list[Cube]
    bad: list[LatticeFunction]
    system: ShiftedDyadicSystem

    def invariants(self) -> dict[str, bool]:
        d = self.system.d
        total = self.good.values.copy()
        for b in self.bad:
            total = total + b.values
        sizes = [2.0 ** (-c.level * d) for c in self.cubes]
        avgs = []
        for c in self.cubes:
            lo, hi = self.system.cube_box(c)
            sl = tuple(slice(int(lo[a] - self.f.lattice.domain_lo[a]), int(hi[a] - self.f.lattice.domain_lo[a])) for a in range(d))
            avgs.append(float(np.abs(self.f.values[sl]).mean()))
        tol = 1e-12 * max(1.0, float(np.abs(self.f.values).max()))
        return {
            "sum": bool(np.abs(total - self.f.values).max() <= tol),
            "mean_zero": all(abs(b.integral()) <= tol for b in self.bad),
            "good_bounded": bool(np.abs(self.good.values).max() <= (1 << d) * self.lam * (1 + 1e-12)),
            "packing": sum(sizes) <= self.f.l1() / self.lam * (1 + 1e-12),
            "stopping_averages": all(self.lam < a <= (1 << d) * self.lam * (1 + 1e-12) for a in avgs),
        }


def cz_decompose(f: LatticeFunction, lam: float, system: ShiftedDyadicSystem) -> CZDecomposition:
    """Maximal cubes of ``system`` (below its top level) with ``<|f|>_L > lam``."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    tree = CubeTree(system)
    tree.check_supported(f.values)
    avg = tree.pyramid(np.abs(f.values), "mean")
    if float(avg[system.k_top].max()) > lam:
        raise ValueError("lambda is below a top-cube average; the stopping cubes would leave the window")
    taken = np.zeros((tree.T,) + (tree.top_cells,) * system.d, dtype=bool)
    cubes: list[Cube] = []
    bad: list[LatticeFunction] = []
    for level in range(system.k_top + 1, system.N + 1):
        fresh = (avg[level] > lam) & ~_coarsen_any(taken, tree.N - level, system.d)
        lo = tree.level_lo(level)
        for pos in zip(*np.nonzero(fresh)):
            cube = system.cube_of_cell(lo[pos], level)
            box_lo, box_hi = system.cube_box(cube)
            sl = tuple(
                slice(int(box_lo[a] - f.lattice.domain_lo[a]), int(box_hi[a] - f.lattice.domain_lo[a]))
                for a in range(system.d)
            )
            b = LatticeFunction.zeros(f.lattice)
            b.values[sl] = f.values[sl] - f.values[sl].mean()
            cubes.append(cube)
            bad.append(b)
        taken |= tree.spread(fresh, level)
    good = LatticeFunction(f.lattice, f.values.astype(float).copy())
    for b in bad:
        good = good - b
    return CZDecomposition(lam, f, good, cubes, bad, system)


def _coarsen_any(mask: np.ndarray, factor_log: int, d: int) -> np.ndarray:
    x = mask
    for _ in range(factor_log):
        x = _split(x, d).any(axis=-1)
        m = round(x.shape[-1] ** (1.0 / d))
        x = x.reshape(x.shape[:-1] + (m,) * d)
    return x


def weak_type_ratio(sf: np.ndarray, f_l1: float, cell_measure: float) -> float:
    """``sup_lambda lambda |{|Sf| > lambda}| / ||f||_1`` by sorting.

    For ``lambda`` just below the k-th largest value of ``|Sf|`` the level set has
    at least ``k`` cells, so the supremum is ``max_k v_(k) k |cell|``.
    """
    if f_l1 <= 0:
        raise ValueError("f must be nonzero")
    v = np.sort(np.abs(np.asarray(sf)).ravel())[::-1]
    if not v.size or v[0] == 0:
        return 0.0
    k = np.arange(1, v.size + 1)
    return float(np.max(v * k) * cell_measure / f_l1)


def weak_type_ratio_counting(sf: np.ndarray, f_l1: float, cell_measure: float) -> float:
    """Counting oracle for :func:`weak_type_ratio`: level sets at each distinct value."""
    a = np.abs(np.asarray(sf)).ravel()
    best = 0.0
    for lam in np.unique(a):
        if lam <= 0:
            continue
        # sup over lambda' < lam approaches lam * #{|Sf| >= lam}
        best = max(best, lam * np.count_nonzero(a >= lam) * cell_measure / f_l1)
    return best


def spiky_inputs(lattice, count: int, rng: np.random.Generator, max_spikes: int = 4) -> np.ndarray:
    """Sparse inputs with a few heavy-tailed spikes, shape (count, *domain)."""
    out = np.zeros((count,) + tuple(lattice.domain_shape))
    flat = out.reshape(count, -1)
    for n in range(count):
        k = int(rng.integers(1, max_spikes + 1))
        cells = rng.choice(flat.shape[1], size=k, replace=False)
        flat[n, cells] = rng.standard_cauchy(k)
    return out


def weak11_constant(
    shift: DyadicShift, trials: int, seed: int, inputs: np.ndarray | None = None
) -> float:
    """Empirical weak-type (1,1) constant over spiky inputs (and any given ones)."""
    if not shift.is_scale_separated():
        raise ValueError("weak-type certification expects a scale-separated shift")
    lat = shift.basis.lattice
    rng = np.random.default_rng(seed)
    batch = spiky_inputs(lat, trials, rng) if trials else np.zeros((0,) + tuple(lat.domain_shape))
    if inputs is not None:
        batch = np.concatenate([batch, np.asarray(inputs).reshape((-1,) + tuple(lat.domain_shape))])
    if not shift.size or not len(batch):
        return 0.0
    batch = batch * shift.basis.tree.covered
    out = shift.apply_array(batch)
    best = 0.0
    for f, sf in zip(batch, out):
        l1 = np.abs(f).sum() * lat.cell_measure
        if l1 > 0:
            best = max(best, weak_type_ratio(sf, l1, lat.cell_measure))
    return best


def weak11_bound(d: int) -> float:
    return 4.0 * 2**d + 5.0
