"""Haar analysis on shifted dyadic systems.

Below its top level every system is a standard dyadic subdivision of its top
cubes, so analysis runs as a vectorized pyramid transform per top cube.  Each
top cube carries an explicit ``h^0`` coefficient which closes the expansion on a
bounded window.
"""

from __future__ import annotations

import io
import itertools
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .grid import Cube, Lattice, ShiftedDyadicSystem

FORMAT_TAG = "dyadlab-lattice-function"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# lattice functions


@dataclass
class LatticeFunction:
    """Piecewise constant function on the finest cells of a lattice domain."""

    lattice: Lattice
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != tuple(self.lattice.domain_shape):
            raise ValueError(f"values shape {self.values.shape} != domain {self.lattice.domain_shape}")

    @classmethod
    def zeros(cls, lattice: Lattice, dtype=float) -> "LatticeFunction":
        return cls(lattice, np.zeros(lattice.domain_shape, dtype=dtype))

    @classmethod
    def indicator(cls, lattice: Lattice, lo, hi) -> "LatticeFunction":
        """Indicator of the integer box ``[lo, hi)`` in finest-cell units."""
        f = cls.zeros(lattice)
        sl = tuple(
            slice(max(0, int(lo[a]) - lattice.domain_lo[a]), max(0, int(hi[a]) - lattice.domain_lo[a]))
            for a in range(lattice.d)
        )
        f.values[sl] = 1.0
        return f

    @classmethod
    def window(cls, lattice: Lattice) -> "LatticeFunction":
        f = cls.zeros(lattice)
        f.values[lattice.support_slices()] = 1.0
        return f

    @classmethod
    def from_callable(cls, lattice: Lattice, fn) -> "LatticeFunction":
        """Sample ``fn`` at cell centres (``fn`` receives one array per axis)."""
        grids = np.meshgrid(*lattice.cell_centers(), indexing="ij")
        return cls(lattice, np.asarray(fn(*grids)))

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.values)

    def integral(self):
        return self.values.sum() * self.lattice.cell_measure

    def inner(self, other: "LatticeFunction"):
        """``<self, other>`` with the conjugate on ``self``."""
        self._check(other)
        return np.vdot(self.values, other.values) * self.lattice.cell_measure

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.values) ** 2) * self.lattice.cell_measure))

    def l1(self) -> float:
        return float(np.abs(self.values).sum() * self.lattice.cell_measure)

    def _check(self, other):
        if other.lattice != self.lattice:
            raise ValueError("lattice mismatch")

    def __add__(self, other):
        self._check(other)
        return LatticeFunction(self.lattice, self.values + other.values)

    def __sub__(self, other):
        self._check(other)
        return LatticeFunction(self.lattice, self.values - other.values)

    def __mul__(self, scalar):
        if isinstance(scalar, LatticeFunction):
            self._check(scalar)
            return LatticeFunction(self.lattice, self.values * scalar.values)
        return LatticeFunction(self.lattice, self.values * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return LatticeFunction(self.lattice, -self.values)


def save_lattice_function(f: LatticeFunction, path) -> None:
    """Write a versioned CSV: header comment lines, then one cell value per line in C order."""
    lat = f.lattice
    kind = "complex" if f.is_complex else "real"
    header = [
        f"# {FORMAT_TAG} v{FORMAT_VERSION}",
        f"# d={lat.d} N={lat.N}",
        f"# domain_lo={','.join(map(str, lat.domain_lo))} domain_shape={','.join(map(str, lat.domain_shape))}",
        f"# support_lo={','.join(map(str, lat.support_lo))} support_shape={','.join(map(str, lat.support_shape))}",
        f"# field={kind}",
    ]
    flat = f.values.ravel()
    buf = io.StringIO()
    if kind == "complex":
        np.savetxt(buf, np.column_stack([flat.real, flat.imag]), fmt="%.17g", delimiter=",")
    else:
        np.savetxt(buf, flat, fmt="%.17g")
    Path(path).write_text("\n".join(header) + "\n" + buf.getvalue())


def load_lattice_function(path) -> LatticeFunction:
    text = Path(path).read_text().splitlines()
    meta = {}
    body = []
    for line in text:
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
                elif tok.startswith("v") and tok[1:].isdigit():
                    meta["version"] = int(tok[1:])
        elif line.strip():
            body.append(line)
    if meta.get("version") != FORMAT_VERSION:
        raise ValueError("unsupported lattice function format version")
    tup = lambda s: tuple(int(v) for v in s.split(","))  # noqa: E731
    lat = Lattice(
        int(meta["d"]), int(meta["N"]), tup(meta["domain_lo"]), tup(meta["domain_shape"]),
        tup(meta["support_lo"]), tup(meta["support_shape"]),
    )
    data = np.loadtxt(io.StringIO("\n".join(body)), delimiter="," if meta["field"] == "complex" else None, ndmin=1)
    if meta["field"] == "complex":
        data = np.atleast_2d(data)
        data = data[:, 0] + 1j * data[:, 1]
    return LatticeFunction(lat, data.reshape(lat.domain_shape))


# ---------------------------------------------------------------------------
# cube pyramids


def _split(x: np.ndarray, d: int) -> np.ndarray:
    """(..., 2m, ..., 2m) -> (..., m**d, 2**d) grouping sibling cells."""
    lead = x.shape[: x.ndim - d]
    m = x.shape[-1] // 2
    y = x.reshape(lead + (m, 2) * d)
    nb = len(lead)
    order = list(range(nb)) + [nb + 2 * a for a in range(d)] + [nb + 2 * a + 1 for a in range(d)]
    return y.transpose(order).reshape(lead + (m**d, 2**d))


def _merge(y: np.ndarray, d: int) -> np.ndarray:
    """Inverse of :func:`_split`."""
    lead = y.shape[:-2]
    m = round(y.shape[-2] ** (1.0 / d))
    x = y.reshape(lead + (m,) * d + (2,) * d)
    nb = len(lead)
    order = list(range(nb))
    for a in range(d):
        order += [nb + a, nb + d + a]
    return x.transpose(order).reshape(lead + (2 * m,) * d)


def sign_matrix(d: int) -> np.ndarray:
    """Row ``eta`` (C order over {0,1}^d), column child ``c``: prod (-1)**(eta_i c_i)."""
    pts = np.array(list(itertools.product((0, 1), repeat=d)), dtype=np.int64)
    return np.where((pts @ pts.T) % 2 == 0, 1.0, -1.0)


class CubeTree:
    """All cubes of a system between ``k_top`` and ``N`` inside the top cubes.

    Per-level data has shape ``(..., T, 2**g, ..., 2**g)`` with ``g = level - k_top``
    and ``T`` the number of top cubes.
    """

    def __init__(self, system: ShiftedDyadicSystem):
        self.system = system
        self.lattice = system.lattice
        self.d = system.d
        self.N = system.N
        self.k_top = system.k_top
        self.depth = self.N - self.k_top
        self.tops = system.top_cubes()
        self.T = len(self.tops)
        dom_lo = np.array(self.lattice.domain_lo)
        self.top_lo = np.array([system.cube_lo(c) for c in self.tops], dtype=np.int64)
        self._top_rel = self.top_lo - dom_lo
        n = 1 << self.depth
        self.top_cells = n
        covered = np.zeros(self.lattice.domain_shape, dtype=bool)
        for lo in self._top_rel:
            covered[tuple(slice(int(v), int(v) + n) for v in lo)] = True
        self.covered = covered
        self.top_origin = self.top_lo.min(axis=0) if self.T else np.zeros(self.d, dtype=np.int64)
        self.top_grid = tuple(int(len(np.unique(self.top_lo[:, a]))) for a in range(self.d))
        self.levels = list(range(self.k_top, self.N + 1))

    # -- geometry of a level
    def level_shape(self, level: int) -> tuple[int, ...]:
        return (self.T,) + (1 << (level - self.k_top),) * self.d

    def level_lo(self, level: int) -> np.ndarray:
        """Lower corners (finest units) of level cubes, shape level_shape + (d,)."""
        g = level - self.k_top
        side = 1 << (self.N - level)
        rel = np.stack(np.meshgrid(*[np.arange(1 << g)] * self.d, indexing="ij"), axis=-1) * side
        return self.top_lo[(slice(None),) + (None,) * self.d] + rel[None]

    def level_index(self, level: int) -> np.ndarray:
        """System indices of level cubes, shape level_shape + (d,)."""
        lo = self.level_lo(level)
        return np.floor_divide(lo - self.system.offset(level), 1 << (self.N - level))

    # -- data movement
    def extract(self, values: np.ndarray) -> np.ndarray:
        """Domain array (..., *domain) -> finest-level blocks (..., T, n, ..., n)."""
        values = np.asarray(values)
        lead = values.shape[: values.ndim - self.d]
        n = self.top_cells
        out = np.empty(lead + (self.T,) + (n,) * self.d, dtype=values.dtype)
        for t, lo in enumerate(self._top_rel):
            out[(Ellipsis, t) + (slice(None),) * self.d] = values[
                (Ellipsis,) + tuple(slice(int(v), int(v) + n) for v in lo)
            ]
        return out

    def insert(self, blocks: np.ndarray) -> np.ndarray:
        lead = blocks.shape[: blocks.ndim - self.d - 1]
        out = np.zeros(lead + tuple(self.lattice.domain_shape), dtype=blocks.dtype)
        n = self.top_cells
        for t, lo in enumerate(self._top_rel):
            out[(Ellipsis,) + tuple(slice(int(v), int(v) + n) for v in lo)] = blocks[
                (Ellipsis, t) + (slice(None),) * self.d
            ]
        return out

    def check_supported(self, values: np.ndarray) -> None:
        mask = ~self.covered
        if mask.any():
            v = np.asarray(values)
            flat = v.reshape(v.shape[: v.ndim - self.d] + (-1,))[..., mask.ravel()]
            if np.any(flat != 0):
                raise ValueError("function is not supported in the system's top cubes")

    def pyramid(self, values: np.ndarray, reduce: str = "mean") -> dict[int, np.ndarray]:
        """Per-level sums or means of a domain array, keyed by level."""
        x = self.extract(values)
        out = {self.N: x}
        for level in range(self.N - 1, self.k_top - 1, -1):
            kids = _split(x, self.d)
            x = kids.sum(axis=-1) if reduce == "sum" else kids.mean(axis=-1)
            x = x.reshape(kids.shape[:-2] + (1 << (level - self.k_top),) * self.d)
            out[level] = x
        return out

    def masses(self, values: np.ndarray) -> dict[int, np.ndarray]:
        """Per-level integrals of a density."""
        h = self.lattice.cell_measure
        return {k: v * h for k, v in self.pyramid(values, "sum").items()}

    def spread(self, level_values: np.ndarray, level: int) -> np.ndarray:
        """Finest-level blocks where every cell carries the value of its level cube."""
        rep = 1 << (self.N - level)
        x = level_values
        for a in range(self.d):
            x = np.repeat(x, rep, axis=x.ndim - self.d + a)
        return x

    def cube_measure(self, level: int) -> float:
        return 2.0 ** (-level * self.d)


# ---------------------------------------------------------------------------
# Haar basis


@dataclass(frozen=True)
class HaarIndex:
    cube: Cube
    eta: tuple[int, ...]

    @property
    def cancellative(self) -> bool:
        return any(self.eta)


class HaarBasis:
    """Haar basis of a system: top ``h^0`` functions followed by cancellative ones.

    Row layout: ``T`` top rows, then for each level from ``k_top`` to ``N-1`` the
    block ``(T, 2**(g d), 2**d - 1)`` in C order (signature in lexicographic
    order with the zero signature removed).
    """

    def __init__(self, system: ShiftedDyadicSystem):
        self.system = system
        self.tree = CubeTree(system)
        self.lattice = system.lattice
        self.d = system.d
        self.N = system.N
        self.k_top = system.k_top
        self.signs = sign_matrix(self.d)
        self.n_eta = (1 << self.d) - 1
        offsets = {}
        pos = self.tree.T
        for level in range(self.k_top, self.N):
            offsets[level] = pos
            pos += self.tree.T * (1 << ((level - self.k_top) * self.d)) * self.n_eta
        self.level_offsets = offsets
        self.size = pos

    # -- row geometry
    @cached_property
    def geometry(self) -> dict[str, np.ndarray]:
        """Per-row arrays: level, index (d), lo (d), cells (side in finest units), eta (d), top."""
        T, d = self.tree.T, self.d
        etas = np.array(list(itertools.product((0, 1), repeat=d))[1:], dtype=np.int64)
        level = [np.full(T, self.k_top)]
        index = [np.array([c.index for c in self.tree.tops], dtype=np.int64).reshape(T, d)]
        lo = [self.tree.top_lo]
        eta = [np.zeros((T, d), dtype=np.int64)]
        top = [np.arange(T)]
        for k in range(self.k_top, self.N):
            cnt = T * (1 << ((k - self.k_top) * d))
            lo_k = self.tree.level_lo(k).reshape(cnt, d)
            idx_k = self.tree.level_index(k).reshape(cnt, d)
            top_k = np.repeat(np.arange(T), cnt // T)
            level.append(np.full(cnt * self.n_eta, k))
            index.append(np.repeat(idx_k, self.n_eta, axis=0))
            lo.append(np.repeat(lo_k, self.n_eta, axis=0))
            eta.append(np.tile(etas, (cnt, 1)))
            top.append(np.repeat(top_k, self.n_eta))
        level = np.concatenate(level)
        geo = {
            "level": level,
            "index": np.concatenate(index),
            "lo": np.concatenate(lo),
            "eta": np.concatenate(eta),
            "top": np.concatenate(top),
        }
        geo["cells"] = np.left_shift(1, self.N - level).astype(np.int64)
        geo["cancellative"] = geo["eta"].any(axis=1)
        for v in geo.values():
            v.setflags(write=False)
        return geo

    @cached_property
    def _lookup(self) -> dict:
        g = self.geometry
        return {
            (int(lv), tuple(int(v) for v in idx), tuple(int(v) for v in e)): row
            for row, (lv, idx, e) in enumerate(zip(g["level"], g["index"], g["eta"]))
        }

    def row(self, idx: HaarIndex) -> int:
        try:
            return self._lookup[(idx.cube.level, idx.cube.index, tuple(idx.eta))]
        except KeyError:
            raise KeyError(f"{idx} is not a basis element of this system") from None

    def rows_at(self, level, lo, eta_code) -> np.ndarray:
        """Vectorized row lookup from cube level, lower corner (finest units) and signature code.

        ``eta_code`` packs the signature bits in C order; code 0 is only valid at
        the top level.
        """
        level = np.broadcast_to(np.asarray(level, dtype=np.int64), np.shape(eta_code))
        lo = np.asarray(lo, dtype=np.int64).reshape(-1, self.d)
        code = np.asarray(eta_code, dtype=np.int64).ravel()
        level = level.ravel()
        tree = self.tree
        tm = (lo - tree.top_origin) // tree.top_cells
        t = np.ravel_multi_index(tuple(tm.T), tree.top_grid)
        out = np.empty(len(code), dtype=np.int64)
        top = code == 0
        if np.any(top & (level != self.k_top)):
            raise ValueError("h^0 rows exist only at the top level")
        out[top] = t[top]
        canc = ~top
        if np.any(canc & ((level < self.k_top) | (level >= self.N))):
            raise ValueError("cancellative rows need k_top <= level < N")
        for lv in np.unique(level[canc]):
            sel = canc & (level == lv)
            g = int(lv) - self.k_top
            side = 1 << (self.N - int(lv))
            rel = (lo[sel] - tree.top_lo[t[sel]]) // side
            lin = np.ravel_multi_index(tuple(rel.T), (1 << g,) * self.d)
            out[sel] = self.level_offsets[int(lv)] + ((t[sel] << (g * self.d)) + lin) * self.n_eta + code[sel] - 1
        return out

    def index(self, row: int) -> HaarIndex:
        g = self.geometry
        return HaarIndex(Cube(int(g["level"][row]), tuple(g["index"][row])), tuple(int(v) for v in g["eta"][row]))

    def support_rows(self) -> np.ndarray:
        """Rows whose cube meets the lattice support window."""
        g = self.geometry
        s_lo = np.array(self.lattice.support_lo)
        s_hi = s_lo + np.array(self.lattice.support_shape)
        hi = g["lo"] + g["cells"][:, None]
        return np.nonzero(((g["lo"] < s_hi) & (hi > s_lo)).all(axis=1))[0]

    # -- transforms on raw arrays
    def analyze_array(self, values: np.ndarray) -> np.ndarray:
        """(..., *domain) -> (..., size)."""
        values = np.asarray(values)
        self.tree.check_supported(values)
        x = self.tree.extract(values)
        lead = x.shape[: x.ndim - self.d - 1]
        T = self.tree.T
        blocks = {}
        for level in range(self.N - 1, self.k_top - 1, -1):
            kids = _split(x, self.d)
            scale = 2.0 ** (-level * self.d / 2) / (1 << self.d)
            blocks[level] = (kids @ self.signs[1:].T) * scale
            x = kids.mean(axis=-1).reshape(kids.shape[:-2] + (1 << (level - self.k_top),) * self.d)
        top = x.reshape(lead + (T,)) * 2.0 ** (-self.k_top * self.d / 2)
        parts = [top] + [blocks[k].reshape(lead + (-1,)) for k in range(self.k_top, self.N)]
        return np.concatenate(parts, axis=-1)

    def synthesize_array(self, coeffs: np.ndarray) -> np.ndarray:
        """(..., size) -> (..., *domain)."""
        coeffs = np.asarray(coeffs)
        if coeffs.shape[-1] != self.size:
            raise ValueError("coefficient vector does not match this basis")
        lead = coeffs.shape[:-1]
        T = self.tree.T
        x = (coeffs[..., :T] * 2.0 ** (self.k_top * self.d / 2)).reshape(lead + (T,) + (1,) * self.d)
        for level in range(self.k_top, self.N):
            g = level - self.k_top
            start = self.level_offsets[level]
            cnt = T * (1 << (g * self.d)) * self.n_eta
            c = coeffs[..., start:start + cnt].reshape(lead + (T, 1 << (g * self.d), self.n_eta))
            parent = x.reshape(lead + (T, 1 << (g * self.d)))
            kids = parent[..., None] + (c @ self.signs[1:]) * 2.0 ** (level * self.d / 2)
            x = _merge(kids, self.d)
        return self.tree.insert(x)

    def cube_averages(self, values: np.ndarray) -> np.ndarray:
        """Per row, the average of ``values`` over that row's cube: (..., *domain) -> (..., size)."""
        pyr = self.tree.pyramid(values, "mean")
        lead = np.asarray(values).shape[: np.asarray(values).ndim - self.d]
        parts = [pyr[self.k_top].reshape(lead + (-1,))]
        for k in range(self.k_top, self.N):
            parts.append(np.repeat(pyr[k].reshape(lead + (-1,)), self.n_eta, axis=-1))
        return np.concatenate(parts, axis=-1)

    def matrix(self, rows=None) -> np.ndarray:
        """Values of the selected Haar functions on domain cells, shape (len(rows), n_cells)."""
        rows = np.arange(self.size) if rows is None else np.asarray(rows)
        eye = np.zeros((len(rows), self.size))
        eye[np.arange(len(rows)), rows] = 1.0
        return self.synthesize_array(eye).reshape(len(rows), -1)

    # -- typed API
    def analyze(self, f: LatticeFunction) -> "HaarCoefficients":
        if f.lattice != self.lattice:
            raise ValueError("lattice mismatch")
        return HaarCoefficients(self, self.analyze_array(f.values))

    def synthesize(self, c: "HaarCoefficients") -> LatticeFunction:
        if c.basis is not self:
            raise ValueError("coefficients belong to another basis")
        return LatticeFunction(self.lattice, self.synthesize_array(c.vector))


@dataclass
class HaarCoefficients:
    """Coefficient vector in the row layout of ``basis``."""

    basis: HaarBasis
    vector: np.ndarray

    def __getitem__(self, idx: HaarIndex):
        return self.vector[self.basis.row(idx)]

    def as_dict(self, tol: float = 0.0) -> dict[tuple, float]:
        """Sparse view keyed by ``(level, index, eta)``."""
        g = self.basis.geometry
        nz = np.nonzero(np.abs(self.vector) > tol)[0]
        return {
            (int(g["level"][r]), tuple(int(v) for v in g["index"][r]), tuple(int(v) for v in g["eta"][r])): self.vector[r]
            for r in nz
        }

    def top_averages(self) -> np.ndarray:
        T = self.basis.tree.T
        return self.vector[:T] * 2.0 ** (self.basis.k_top * self.basis.d / 2)

    def energy(self) -> float:
        return float(np.sum(np.abs(self.vector) ** 2))


def analyze(f: LatticeFunction, system: ShiftedDyadicSystem | HaarBasis) -> HaarCoefficients:
    basis = system if isinstance(system, HaarBasis) else HaarBasis(system)
    return basis.analyze(f)


def synthesize(c: HaarCoefficients) -> LatticeFunction:
    return c.basis.synthesize(c)


def haar_function(idx: HaarIndex, system: ShiftedDyadicSystem) -> LatticeFunction:
    """``h_I^eta`` sampled on the lattice of ``system``."""
    lat = system.lattice
    side = system.cube_cells(idx.cube)
    if idx.cancellative and side < 2:
        raise ValueError("cube is finer than the lattice resolution allows")
    lo = system.cube_lo(idx.cube)
    rel = lo - np.array(lat.domain_lo)
    if (rel < 0).any() or (rel + side > np.array(lat.domain_shape)).any():
        raise ValueError("cube leaves the lattice domain")
    f = LatticeFunction.zeros(lat)
    vol = 2.0 ** (-idx.cube.level * lat.d)
    block = np.full((side,) * lat.d, vol**-0.5)
    for a, e in enumerate(idx.eta):
        if e:
            shape = [1] * lat.d
            shape[a] = side
            half = np.where(np.arange(side) < side // 2, 1.0, -1.0).reshape(shape)
            block = block * half
    f.values[tuple(slice(int(v), int(v) + side) for v in rel)] = block
    return f


def conditional_expectation(f: LatticeFunction, system: ShiftedDyadicSystem, level: int) -> LatticeFunction:
    """Replace ``f`` by its averages over the level cubes (within the top cubes)."""
    tree = CubeTree(system)
    tree.check_supported(f.values)
    avg = tree.pyramid(f.values, "mean")[level]
    return LatticeFunction(f.lattice, tree.insert(tree.spread(avg, level)))
