"""Shifted dyadic systems with exact integer cube arithmetic, plus goodness tests.

Coordinates are measured in units of the finest cell side ``h = 2**-N``.  A cube
at level ``k`` with index ``m`` in a system with shift bits ``omega`` occupies the
integer box ``[2**(N-k) * m + S_k, 2**(N-k) * (m + 1) + S_k)`` where
``S_k = sum_{k < j <= N} 2**(N-j) * omega_j``.  The finest level is never shifted
relative to the reference cells, so lattice functions live on one fixed grid
for every random system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import integrate, stats


# ---------------------------------------------------------------------------
# moduli of continuity


@dataclass(frozen=True)
class ModulusOfContinuity:
    """Named modulus of continuity.

    ``power``: ``t**gamma`` with ``0 < gamma <= 1``.
    ``logpower``: ``(1 + log(1/t)/gamma)**(-gamma)`` with ``gamma > 1``.
    ``custom``: any callable, Dini integral by adaptive quadrature.
    """

    family: str
    gamma: float = 0.5
    func: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)
    name: str = ""

    def __post_init__(self):
        if self.family == "power":
            if not 0 < self.gamma <= 1:
                raise ValueError("power modulus needs 0 < gamma <= 1")
        elif self.family == "logpower":
            if not self.gamma > 1:
                raise ValueError("log-power modulus needs gamma > 1")
        elif self.family == "custom":
            if self.func is None:
                raise ValueError("custom modulus needs a callable")
        else:
            raise ValueError(f"unknown modulus family {self.family!r}")

    @classmethod
    def power(cls, gamma: float) -> "ModulusOfContinuity":
        return cls("power", float(gamma))

    @classmethod
    def logpower(cls, gamma: float) -> "ModulusOfContinuity":
        return cls("logpower", float(gamma))

    @classmethod
    def custom(cls, func, name: str = "custom") -> "ModulusOfContinuity":
        return cls("custom", 0.0, func, name)

    @classmethod
    def parse(cls, text: str) -> "ModulusOfContinuity":
        """Parse ``power:0.5`` or ``logpower:2``."""
        family, _, value = text.partition(":")
        if family not in ("power", "logpower") or not value:
            raise ValueError(f"cannot parse modulus {text!r}")
        return cls(family, float(value))

    def __str__(self) -> str:
        if self.family == "custom":
            return self.name
        return f"{self.family}:{self.gamma:g}"

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.family == "power":
            return t**self.gamma
        if self.family == "logpower":
            with np.errstate(divide="ignore"):
                logs = np.where(t > 0, -np.log(np.where(t > 0, t, 1.0)), np.inf)
            return np.where(t > 0, (1.0 + logs / self.gamma) ** (-self.gamma), 0.0)
        return np.asarray(self.func(t), dtype=float)

    def dini(self, s: float) -> float:
        """Integral of ``phi(t)/t`` over ``(0, s]``."""
        if s < 0:
            raise ValueError("upper limit must be non-negative")
        if s == 0:
            return 0.0
        if self.family == "power":
            return s**self.gamma / self.gamma
        if self.family == "logpower":
            g = self.gamma
            return g / (g - 1.0) * (1.0 + math.log(1.0 / s) / g) ** (1.0 - g)
        return quad_dini(self, s)

    def is_goodness_modulus(self) -> bool:
        """A modulus usable for badness must satisfy phi(t) > t near zero."""
        return not (self.family == "power" and self.gamma >= 1.0)


def quad_dini(phi: ModulusOfContinuity, s: float) -> float:
    """Dini integral by quadrature in the variable u = log t."""
    value, err = integrate.quad(
        lambda u: float(phi(math.exp(u))), -np.inf, math.log(s), epsabs=1e-13, epsrel=1e-11, limit=400
    )
    if not math.isfinite(value) or err > 1e-9 * max(1.0, abs(value)):
        raise ValueError("modulus is not Dini-integrable to the requested accuracy")
    return value


# ---------------------------------------------------------------------------
# goodness


@dataclass(frozen=True)
class GoodnessConfig:
    """Modulus ``phi`` and separation ``r``.

    ``horizon`` caps how many ancestor generations are inspected.  Gaps larger
    than the horizon are ignored, which keeps the probability of being good the
    same for every cube of a finite lattice.
    """

    phi: ModulusOfContinuity
    r: int
    horizon: int = 32

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("r must be a positive integer")
        if self.horizon < 1 or self.horizon > 60:
            raise ValueError("horizon must lie in [1, 60]")
        if not self.phi.is_goodness_modulus():
            raise ValueError("phi(t) = t gives no room for good cubes")
        if 4.0 * float(self.phi(2.0 ** -self.r)) > 1.0:
            raise ValueError("standing assumption 4*phi(2**-r) <= 1 violated")

    def thresholds(self) -> np.ndarray:
        """Badness thresholds in units of the small cube, indexed by gap 0..horizon.

        A cube at gap ``m`` below an ancestor is bad when its distance to the
        ancestor boundary, in small-cube units, is at most ``phi(2**-m) * 2**m``.
        Gaps below ``r`` get ``-1`` (never bad).
        """
        gaps = np.arange(self.horizon + 1)
        thr = self.phi(2.0 ** (-gaps.astype(float))) * 2.0**gaps
        thr[gaps < self.r] = -1.0
        return thr


def bad_probability_bound(cfg: GoodnessConfig, d: int) -> float:
    """Closed-form upper bound ``8 d * int_0^{2^-r} phi(t) dt/t``."""
    if 4.0 * float(cfg.phi(2.0 ** -cfg.r)) > 1.0:
        raise ValueError("standing assumption violated")
    return 8.0 * d * cfg.phi.dini(2.0 ** -cfg.r)


def chain_badness(m: np.ndarray, bits: np.ndarray, cfg: GoodnessConfig) -> np.ndarray:
    """Vectorized badness from ancestor bits.

    ``m`` has shape (n, d): cube indices at some level k.  ``bits`` has shape
    (n, H, d) where ``bits[:, t-1]`` is the shift bit used to pass from gap t-1 to
    gap t (that is, omega at level k - t + 1).  Gaps up to ``min(H, horizon)`` are
    checked.
    """
    m = np.asarray(m, dtype=np.int64)
    bits = np.asarray(bits, dtype=np.int64)
    thr = cfg.thresholds()
    n = m.shape[0]
    bad = np.zeros(n, dtype=bool)
    idx = m.copy()
    acc = np.zeros_like(m)
    for t in range(1, min(bits.shape[1], cfg.horizon) + 1):
        b = bits[:, t - 1]
        idx = np.floor_divide(idx - b, 2)
        acc = acc + (b << (t - 1))
        if t < cfg.r:
            continue
        pos = m - (idx << t) - acc
        edge = np.minimum(pos, (1 << t) - 1 - pos).min(axis=1)
        bad |= edge <= thr[t]
    return bad


# ---------------------------------------------------------------------------
# lattice and systems


@dataclass(frozen=True)
class Lattice:
    """Finest-level cell grid on a box, with a support window inside it.

    All boxes are given by lower corner and shape in finest-cell units.
    """

    d: int
    N: int
    domain_lo: tuple[int, ...]
    domain_shape: tuple[int, ...]
    support_lo: tuple[int, ...]
    support_shape: tuple[int, ...]

    def __post_init__(self):
        for tup in (self.domain_lo, self.domain_shape, self.support_lo, self.support_shape):
            if len(tup) != self.d:
                raise ValueError("box dimension mismatch")
        for a in range(self.d):
            if self.support_lo[a] < self.domain_lo[a] or (
                self.support_lo[a] + self.support_shape[a] > self.domain_lo[a] + self.domain_shape[a]
            ):
                raise ValueError("support window must lie inside the domain")

    @classmethod
    def unit(cls, d: int, N: int) -> "Lattice":
        """The cube ``[0, 1)^d`` at resolution ``2**-N``."""
        n = 1 << N
        return cls(d, N, (0,) * d, (n,) * d, (0,) * d, (n,) * d)

    @classmethod
    def padded(cls, d: int, N: int, k_top: int = 0) -> "Lattice":
        """Unit support window inside a domain padded by one top-level cube per side.

        Every shifted system with top level ``k_top`` has its top cubes meeting
        ``[0,1)^d`` contained in this domain.
        """
        if k_top > N:
            raise ValueError("top level finer than the lattice")
        n = 1 << N
        pad = 1 << (N - k_top)
        return cls(d, N, (-pad,) * d, (n + 2 * pad,) * d, (0,) * d, (n,) * d)

    @property
    def h(self) -> float:
        return 2.0 ** -self.N

    @property
    def cell_measure(self) -> float:
        return 2.0 ** (-self.N * self.d)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.domain_shape))

    def cell_centers(self) -> list[np.ndarray]:
        """Per-axis cell centres in real coordinates."""
        return [(self.domain_lo[a] + np.arange(self.domain_shape[a]) + 0.5) * self.h for a in range(self.d)]

    def support_slices(self) -> tuple[slice, ...]:
        return tuple(
            slice(self.support_lo[a] - self.domain_lo[a], self.support_lo[a] - self.domain_lo[a] + self.support_shape[a])
            for a in range(self.d)
        )


@dataclass(frozen=True)
class Cube:
    level: int
    index: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "index", tuple(int(v) for v in self.index))

    @property
    def side(self) -> float:
        return 2.0 ** -self.level


class ShiftedDyadicSystem:
    """A dyadic system translated by shift bits ``omega_j`` for ``k_min < j <= N``.

    ``k_top`` is the coarsest level used for Haar analysis; the levels between
    ``k_min`` and ``k_top`` exist only to answer join and badness queries.
    """

    def __init__(self, lattice: Lattice, bits: np.ndarray, k_min: int, k_top: int = 0):
        bits = np.asarray(bits, dtype=np.int64)
        if bits.shape != (lattice.N - k_min, lattice.d):
            raise ValueError(f"expected shift bits of shape {(lattice.N - k_min, lattice.d)}")
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("shift bits must be 0 or 1")
        if not k_min <= k_top <= lattice.N:
            raise ValueError("need k_min <= k_top <= N")
        self.lattice = lattice
        self.d = lattice.d
        self.N = lattice.N
        self.k_min = k_min
        self.k_top = k_top
        self.bits = bits
        self.bits.setflags(write=False)
        # offsets[k - k_min] = S_k (integer vector), for k in [k_min, N]
        offsets = np.zeros((self.N - k_min + 1, self.d), dtype=np.int64)
        for k in range(self.N - 1, k_min - 1, -1):
            j = k + 1
            offsets[k - k_min] = offsets[j - k_min] + (self.omega(j) << (self.N - j))
        self._offsets = offsets
        self._check_tops()

    # -- construction helpers
    @classmethod
    def standard(cls, lattice: Lattice, k_top: int = 0, depth_above: int = 32) -> "ShiftedDyadicSystem":
        k_min = k_top - depth_above
        return cls(lattice, np.zeros((lattice.N - k_min, lattice.d), dtype=np.int64), k_min, k_top)

    @classmethod
    def random(
        cls, lattice: Lattice, rng: np.random.Generator, k_top: int = 0, depth_above: int = 32
    ) -> "ShiftedDyadicSystem":
        k_min = k_top - depth_above
        bits = rng.integers(0, 2, size=(lattice.N - k_min, lattice.d), dtype=np.int64)
        return cls(lattice, bits, k_min, k_top)

    def with_bits(self, bits: np.ndarray) -> "ShiftedDyadicSystem":
        return ShiftedDyadicSystem(self.lattice, bits, self.k_min, self.k_top)

    def _check_tops(self):
        lo, hi = self.top_box()
        dlo = np.array(self.lattice.domain_lo)
        dhi = dlo + np.array(self.lattice.domain_shape)
        if (lo < dlo).any() or (hi > dhi).any():
            raise ValueError("top cubes meeting the support window leave the lattice domain")

    # -- bits and offsets
    def omega(self, j: int) -> np.ndarray:
        if not self.k_min < j <= self.N:
            raise ValueError(f"shift bit level {j} outside ({self.k_min}, {self.N}]")
        return self.bits[j - self.k_min - 1]

    def offset(self, k: int) -> np.ndarray:
        self._check_level(k)
        return self._offsets[k - self.k_min]

    def offsets_table(self) -> np.ndarray:
        return self._offsets

    def _check_level(self, k: int):
        if not self.k_min <= k <= self.N:
            raise ValueError(f"level {k} outside [{self.k_min}, {self.N}]")

    # -- geometry
    def cube_lo(self, cube: Cube) -> np.ndarray:
        """Lower corner in finest-cell units."""
        self._check_level(cube.level)
        return (np.array(cube.index, dtype=np.int64) << (self.N - cube.level)) + self.offset(cube.level)

    def cube_cells(self, cube: Cube) -> int:
        return 1 << (self.N - cube.level)

    def cube_box(self, cube: Cube) -> tuple[np.ndarray, np.ndarray]:
        lo = self.cube_lo(cube)
        return lo, lo + self.cube_cells(cube)

    def real_box(self, cube: Cube) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.cube_box(cube)
        return lo * self.lattice.h, hi * self.lattice.h

    def locate(self, x: Sequence, k: int) -> Cube:
        """The level-``k`` cube containing the point ``x`` (exact rational arithmetic)."""
        self._check_level(k)
        pts = [Fraction(v) for v in np.atleast_1d(np.asarray(x, dtype=object))]
        if len(pts) != self.d:
            raise ValueError("point dimension mismatch")
        scale = 1 << self.N
        side = 1 << (self.N - k)
        idx = []
        for a, p in enumerate(pts):
            u = p * scale
            lo, n = self.lattice.domain_lo[a], self.lattice.domain_shape[a]
            if not lo <= u < lo + n:
                raise ValueError("point outside the lattice domain")
            idx.append(math.floor((u - int(self.offset(k)[a])) / side))
        return Cube(k, tuple(idx))

    def cube_of_cell(self, cell: Sequence[int], k: int) -> Cube:
        self._check_level(k)
        c = np.asarray(cell, dtype=np.int64)
        return Cube(k, tuple(np.floor_divide(c - self.offset(k), 1 << (self.N - k))))

    def parent(self, cube: Cube) -> Cube:
        if cube.level - 1 < self.k_min:
            raise ValueError("parent coarser than k_min")
        w = self.omega(cube.level)
        return Cube(cube.level - 1, tuple(np.floor_divide(np.array(cube.index) - w, 2)))

    def ancestor(self, cube: Cube, m: int) -> Cube:
        if m < 0:
            raise ValueError("ancestor order must be non-negative")
        if cube.level - m < self.k_min:
            raise ValueError("ancestor coarser than k_min")
        for _ in range(m):
            cube = self.parent(cube)
        return cube

    def children(self, cube: Cube) -> list[Cube]:
        if cube.level >= self.N:
            raise ValueError("finest cells have no children")
        w = self.omega(cube.level + 1)
        base = 2 * np.array(cube.index) + w
        out = []
        for c in np.ndindex(*(2,) * self.d):
            out.append(Cube(cube.level + 1, tuple(base + np.array(c))))
        return out

    def contains(self, big: Cube, small: Cube) -> bool:
        if small.level < big.level:
            return False
        return self.ancestor(small, small.level - big.level) == big

    def join(self, a: Cube, b: Cube) -> Cube:
        """Smallest cube of the system containing both."""
        if a.level > b.level:
            a, b = b, a
        b = self.ancestor(b, b.level - a.level)
        while a != b:
            if a.level - 1 < self.k_min:
                raise ValueError("no common ancestor inside the level range")
            a, b = self.parent(a), self.parent(b)
        return a

    def distance(self, a: Cube, b: Cube) -> int:
        """l-infinity gap between two cubes, in finest-cell units."""
        alo, ahi = self.cube_box(a)
        blo, bhi = self.cube_box(b)
        return int(np.maximum(0, np.maximum(blo - ahi, alo - bhi)).max())

    # -- badness
    def badness(self, cube: Cube, cfg: GoodnessConfig) -> tuple[bool, bool]:
        """Return ``(bad, truncated)``.

        Only ancestors are inspected: a same-size neighbour of an ancestor has
        boundary distance at least the ancestor's own boundary distance.
        ``truncated`` is set when fewer than ``cfg.horizon`` ancestor generations
        exist above the cube.
        """
        self._check_level(cube.level)
        avail = cube.level - self.k_min
        H = min(avail, cfg.horizon)
        levels = cube.level - np.arange(H)
        bits = self.bits[levels - self.k_min - 1][None] if H else np.zeros((1, 0, self.d), dtype=np.int64)
        bad = bool(chain_badness(np.array([cube.index]), bits, cfg)[0])
        return bad, avail < cfg.horizon

    def is_bad(self, cube: Cube, cfg: GoodnessConfig) -> bool:
        bad, truncated = self.badness(cube, cfg)
        if truncated:
            raise ValueError("badness verdict truncated by the level range")
        return bad

    def bad_mask(self, levels: np.ndarray, indices: np.ndarray, cfg: GoodnessConfig) -> np.ndarray:
        """Vectorized ``is_bad`` for many cubes given as (levels, indices)."""
        levels = np.asarray(levels, dtype=np.int64)
        if levels.size and (levels - cfg.horizon < self.k_min).any():
            raise ValueError("badness verdict truncated by the level range")
        gaps = np.arange(cfg.horizon)
        rows = levels[:, None] - gaps[None, :] - self.k_min - 1
        return chain_badness(indices, self.bits[rows], cfg)

    # -- enumeration
    def top_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer box covered by the top cubes meeting the support window."""
        lat = self.lattice
        s_lo = np.array(lat.support_lo)
        s_hi = s_lo + np.array(lat.support_shape) - 1
        first = self.cube_of_cell(s_lo, self.k_top)
        last = self.cube_of_cell(s_hi, self.k_top)
        lo = self.cube_lo(first)
        hi = self.cube_lo(last) + self.cube_cells(last)
        return lo, hi

    def top_cubes(self) -> list[Cube]:
        lat = self.lattice
        s_lo = np.array(lat.support_lo)
        s_hi = s_lo + np.array(lat.support_shape) - 1
        first = np.array(self.cube_of_cell(s_lo, self.k_top).index)
        last = np.array(self.cube_of_cell(s_hi, self.k_top).index)
        ranges = [range(int(first[a]), int(last[a]) + 1) for a in range(self.d)]
        return [Cube(self.k_top, idx) for idx in _product(ranges)]

    def cubes(self, level: int) -> Iterator[Cube]:
        """All level-``level`` cubes inside the top cubes, in C order per top cube."""
        if not self.k_top <= level <= self.N:
            raise ValueError("level outside [k_top, N]")
        for top in self.top_cubes():
            g = level - self.k_top
            base = (np.array(top.index) << g) - self._sub_offset(level)
            for rel in np.ndindex(*(1 << g,) * self.d):
                yield Cube(level, tuple(base + np.array(rel)))

    def _sub_offset(self, level: int) -> np.ndarray:
        """Index shift so that cubes at ``level`` below a top cube start at 2**g * top."""
        diff = self.offset(level) - self.offset(self.k_top)
        return -(diff >> (self.N - level)) if level < self.N else -diff

    def all_cubes(self) -> list[Cube]:
        return [c for k in range(self.k_top, self.N + 1) for c in self.cubes(k)]


def _product(ranges):
    if not ranges:
        yield ()
        return
    for v in ranges[0]:
        for rest in _product(ranges[1:]):
            yield (v,) + rest


# ---------------------------------------------------------------------------
# Monte Carlo badness


def _sample_badness(cfg: GoodnessConfig, d: int, n: int, rng: np.random.Generator, index, position_bits: int):
    """Sample ``n`` random systems and return (bad flags, position classes).

    The translated cube has index ``index`` at level 0 of every sampled system.
    Its badness reads the bits at levels <= 0; its position relative to the
    reference grid is governed by the bits at levels > 0.  The position class
    packs the first ``position_bits`` finer bits of every axis into an integer.
    """
    bits = rng.integers(0, 2, size=(n, cfg.horizon + position_bits, d), dtype=np.int64)
    fine = bits[:, :position_bits].reshape(n, -1)
    classes = (fine << np.arange(fine.shape[1])).sum(axis=1)
    m = np.broadcast_to(np.asarray(index, dtype=np.int64), (n, d))
    return chain_badness(m, bits[:, position_bits:], cfg), classes


def _chunks(samples: int, size: int = 1 << 16):
    start = 0
    chunk = 0
    while start < samples:
        n = min(size, samples - start)
        yield chunk, n
        start += n
        chunk += 1


def estimate_bad_probability(
    cfg: GoodnessConfig, d: int, samples: int, seed: int, index: Sequence[int] | None = None
) -> tuple[float, float]:
    """Monte Carlo estimate of the probability that a fixed cube is bad.

    Returns ``(estimate, stderr)``.  Chunks use seeds derived from ``(seed,
    chunk)`` so the result does not depend on evaluation order.
    """
    if samples < 1:
        raise ValueError("samples must be positive")
    idx = (0,) * d if index is None else tuple(index)
    count = 0
    for chunk, n in _chunks(samples):
        rng = np.random.default_rng([seed, chunk])
        bad, _ = _sample_badness(cfg, d, n, rng, idx, 0)
        count += int(bad.sum())
    p = count / samples
    return p, math.sqrt(max(p * (1 - p), 0.0) / samples)


def independence_pvalue(cfg: GoodnessConfig, d: int, samples: int, seed: int, position_bits: int = 2) -> float:
    """Chi-square p-value for independence of badness from the fine-bit position class."""
    table = np.zeros((1 << (position_bits * d), 2), dtype=np.int64)
    for chunk, n in _chunks(samples):
        rng = np.random.default_rng([seed, chunk, 1])
        bad, cls = _sample_badness(cfg, d, n, rng, (0,) * d, position_bits)
        np.add.at(table, (cls, bad.astype(int)), 1)
    table = table[table.sum(axis=1) > 0]
    if (table.sum(axis=0) == 0).any():
        return 1.0
    return float(stats.chi2_contingency(table, correction=False)[1])
