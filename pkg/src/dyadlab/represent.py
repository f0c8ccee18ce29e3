"""Dyadic representation of a discretized singular integral.

For a fixed shifted system the bilinear form is expanded in the Haar basis,
every pair of Haar functions is classified by the relative position of its
cubes, and the pieces are regrouped into dyadic shifts of type ``(i, j)`` plus
two paraproducts.  Averaging the good-filtered expansion over random systems
recovers the form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import GoodnessConfig, Lattice, ModulusOfContinuity, ShiftedDyadicSystem, estimate_bad_probability
from .haar import HaarBasis
from .operator import DiscretizedOperator
from .shift import DyadicShift, ParaproductSymbol

OUT, IN, EQUAL, NEAR = 0, 1, 2, 3
CLASS_NAMES = {OUT: "out", IN: "in", EQUAL: "equal", NEAR: "near"}


# ---------------------------------------------------------------------------
# tau coefficients


def tau(i: int, j: int, phi: ModulusOfContinuity, psi: ModulusOfContinuity, d: int) -> float:
    """Decay coefficient of the shifts of type ``(i, j)``."""
    if i < 0 or j < 0:
        raise ValueError("i, j must be non-negative")
    m = max(i, j)
    t = 2.0**-m
    pt = float(phi(t))
    u = t / pt
    if min(i, j) > 0:
        return pt**-d * float(psi(u))
    return psi.dini(u)


def _tau_shell(m: int, phi, psi, d) -> float:
    """Sum of tau over the pairs with ``max(i, j) == m``."""
    if m == 0:
        return tau(0, 0, phi, psi, d)
    return (2 * m - 1) * tau(m, m, phi, psi, d) + 2 * tau(m, 0, phi, psi, d)


def tau_tail(phi, psi, d: int, cutoff: int, max_terms: int = 900) -> float:
    """``sum_{max(i,j) > cutoff} tau(i, j)``; ``inf`` when the series does not converge."""
    total = 0.0
    m = cutoff + 1
    prev = _tau_shell(m, phi, psi, d)
    total += prev
    while m < min(cutoff + max_terms, 1000):
        m += 1
        cur = _tau_shell(m, phi, psi, d)
        total += cur
        if cur == 0.0:
            return total
        q = cur / prev
        if q < 1.0 and cur / (1.0 - q) <= 1e-15 * total:
            return total + cur * q / (1.0 - q)
        prev = cur
    return math.inf


@dataclass
class TauTable:
    phi: ModulusOfContinuity
    psi: ModulusOfContinuity
    d: int
    cutoff: int
    entries: np.ndarray = field(init=False)
    tail: float = field(init=False)

    def __post_init__(self):
        n = self.cutoff + 1
        self.entries = np.array([[tau(i, j, self.phi, self.psi, self.d) for j in range(n)] for i in range(n)])
        self.tail = tau_tail(self.phi, self.psi, self.d, self.cutoff)

    @property
    def total(self) -> float:
        return float(self.entries.sum()) + self.tail

    def polynomial_bound_constant(self, alpha: float, gamma: float) -> float:
        """Smallest ``C`` with ``tau(i,j) <= C (1+m)^(gamma(d+alpha)) 2^(-alpha m)``, ``m = max(i,j)``."""
        n = self.cutoff + 1
        m = np.maximum.outer(np.arange(n), np.arange(n))
        ref = (1.0 + m) ** (gamma * (self.d + alpha)) * 2.0 ** (-alpha * m)
        return float((self.entries / ref).max())


# ---------------------------------------------------------------------------
# per-system expansion


@dataclass
class PairClassification:
    """Classification of all ordered pairs ``(J, I)`` of relevant Haar rows.

    Arrays are indexed ``[J, I]``; the smaller cube of the pair is ``I`` when
    ``half_a`` is set (``l(I) <= l(J)``) and ``J`` otherwise.
    """

    rows: np.ndarray
    level: np.ndarray
    lo: np.ndarray
    cells: np.ndarray
    half_a: np.ndarray
    cls: np.ndarray
    i: np.ndarray
    j: np.ndarray
    join_level: np.ndarray
    dist: np.ndarray
    good: np.ndarray | None

    def counts(self) -> dict[str, int]:
        return {name: int((self.cls == c).sum()) for c, name in CLASS_NAMES.items()}


def _classify_rows(sys: ShiftedDyadicSystem, rows, L, lo, cells, phi) -> PairClassification:
    LJ, LI = L[:, None], L[None, :]
    loJ, loI = lo[:, None, :], lo[None, :, :]
    cJ, cI = cells[:, None, None], cells[None, :, None]
    half_a = LI >= LJ
    hiJ, hiI = loJ + cJ, loI + cI
    overlap = ((loI < hiJ) & (loJ < hiI)).all(axis=2)
    same = (LI == LJ) & (loI == loJ).all(axis=2)
    gap = np.maximum(0, np.maximum(loJ - hiI, loI - hiJ)).max(axis=2)
    small_cells = np.where(half_a, cells[None, :], cells[:, None]).astype(float)
    large_cells = np.where(half_a, cells[:, None], cells[None, :]).astype(float)
    thr = large_cells * phi(small_cells / large_cells)
    cls = np.full(gap.shape, NEAR, dtype=np.int8)
    cls[~overlap & (gap > thr)] = OUT
    cls[overlap & ~same] = IN
    cls[same] = EQUAL
    # join level: the finest level where both rows share an ancestor
    n = len(L)
    join = np.full((n, n), sys.k_min - 1, dtype=np.int64)
    top = int(L.max()) if n else sys.k_min - 1
    for lev in range(sys.k_min, top + 1):
        anc = np.floor_divide(lo - sys.offset(lev), 1 << (sys.N - lev))
        valid = L >= lev
        eq = (anc[:, None, :] == anc[None, :, :]).all(axis=2) & valid[:, None] & valid[None, :]
        join[eq] = lev
    if np.any(join < sys.k_min):
        raise ValueError("some pairs have no common ancestor inside the level range")
    i = LI - join
    j = LJ - join
    # inside pairs: the large cube is the averaging cube
    i = np.where(cls == IN, np.where(half_a, LI - LJ, 0), i)
    j = np.where(cls == IN, np.where(half_a, 0, LJ - LI), j)
    i = np.where(cls == EQUAL, 0, i)
    j = np.where(cls == EQUAL, 0, j)
    return PairClassification(rows, L, lo, cells, half_a, cls, i.astype(np.int64), j.astype(np.int64), join, gap, None)


def classify_pairs(system: ShiftedDyadicSystem, cfg: GoodnessConfig) -> PairClassification:
    """Classify all pairs of Haar rows meeting the support window, with goodness of each row."""
    basis = HaarBasis(system)
    rows = basis.support_rows()
    geo = basis.geometry
    pc = _classify_rows(system, rows, geo["level"][rows], geo["lo"][rows], geo["cells"][rows], cfg.phi)
    pc.good = ~system.bad_mask(pc.level, geo["index"][rows], cfg)
    return pc


def classification_violations(pc: PairClassification, cfg: GoodnessConfig) -> dict[str, int]:
    """Count pairs with a good smaller cube that break the geometric bounds.

    ``near`` pairs need the size gap below ``r`` and the join at most ``r``
    levels above the small cube; ``out`` pairs need
    ``l(K) phi(l(small)/l(K)) <= 2^r dist``.
    """
    if pc.good is None:
        raise ValueError("classification carries no goodness flags")
    small_level = np.where(pc.half_a, pc.level[None, :], pc.level[:, None])
    large_level = np.where(pc.half_a, pc.level[:, None], pc.level[None, :])
    small_good = np.where(pc.half_a, pc.good[None, :], pc.good[:, None])
    near = (pc.cls == NEAR) & small_good
    out = (pc.cls == OUT) & small_good
    side_small = np.where(pc.half_a, pc.cells[None, :], pc.cells[:, None]).astype(float)
    side_k = side_small * 2.0 ** (small_level - pc.join_level)
    out_lhs = side_k * cfg.phi(side_small / side_k)
    return {
        "near_size_gap": int((near & (small_level - large_level >= cfg.r)).sum()),
        "near_join_height": int((near & (small_level - pc.join_level > cfg.r)).sum()),
        "out_distance": int((out & (out_lhs > 2.0**cfg.r * pc.dist * (1 + 1e-12))).sum()),
    }


class SystemExpansion:
    """Haar expansion of a discretized operator on one shifted system."""

    def __init__(self, op: DiscretizedOperator, system: ShiftedDyadicSystem, cfg: GoodnessConfig | None = None):
        if op.lattice != system.lattice:
            raise ValueError("operator and system live on different lattices")
        self.op = op
        self.system = system
        self.cfg = cfg
        self.basis = HaarBasis(system)
        basis = self.basis
        rows = basis.support_rows()
        self.rows = rows
        geo = basis.geometry
        self.level = geo["level"][rows]
        self.lo = geo["lo"][rows]
        self.cells = geo["cells"][rows]
        self.cancellative = geo["cancellative"][rows]
        lat = system.lattice
        hm = basis.matrix(rows)
        self.hm = hm
        form = op.form
        ones = np.ones(lat.n_cells)
        self.m = hm @ form @ hm.T
        self.t_one = hm @ (form @ ones)
        self.t_star_one = (ones @ form) @ hm.T
        rel = self.lo - np.array(lat.domain_lo)
        cell_index = np.ravel_multi_index(tuple(rel.T), lat.domain_shape)
        # value of h_row on the cube of column: valid when the column cube is below a child of the row cube
        self.value_on = hm[:, cell_index]
        phi = cfg.phi if cfg is not None else ModulusOfContinuity.power(0.5)
        self.classification = _classify_rows(system, rows, self.level, self.lo, self.cells, phi)
        if cfg is not None:
            if np.any(self.level - cfg.horizon < system.k_min):
                raise ValueError("badness verdicts would be truncated; deepen the system")
            self.good = ~system.bad_mask(self.level, geo["index"][rows], cfg)
            self.classification.good = self.good
        else:
            self.good = None

    # -- coefficients
    def coefficients(self) -> np.ndarray:
        """Pair coefficients: ``<h_J, T h_I>``, with the paraproduct part removed for inside pairs."""
        c = self.classification
        coef = self.m.copy()
        ins = c.cls == IN
        a = ins & c.half_a
        b = ins & ~c.half_a
        # half A: h_J is constant on I
        coef[a] -= (self.value_on * self.t_star_one[None, :])[a]
        # half B: h_I is constant on J
        coef[b] -= (self.value_on.T * self.t_one[:, None])[b]
        return coef

    def weights(self, filtered: bool) -> np.ndarray:
        n = len(self.rows)
        if not filtered:
            return np.ones((n, n))
        if self.good is None:
            raise ValueError("goodness configuration required for filtering")
        g = self.good.astype(float)
        return np.where(self.classification.half_a, g[None, :], g[:, None])

    def paraproduct_symbols(self, filtered: bool) -> tuple[np.ndarray, np.ndarray]:
        """Symbols on relevant rows: (for ``T*1`` acting on ``f``, for ``T1`` acting on ``g``)."""
        below_top = self.level > self.system.k_top
        g = self.good.astype(float) if filtered else np.ones(len(self.rows))
        return g * below_top * self.t_star_one, g * below_top * self.t_one

    def pieces(self, f: np.ndarray, g: np.ndarray, filtered: bool) -> dict:
        """Contributions to ``<g, T f>`` grouped by ``(class, i, j)`` plus the two paraproducts."""
        a = self.basis.analyze_array(f)[self.rows]
        b = self.basis.analyze_array(g)[self.rows]
        avg_f = self.basis.cube_averages(f)[self.rows]
        avg_g = self.basis.cube_averages(g)[self.rows]
        c = self.classification
        contrib = self.weights(filtered) * self.coefficients() * b[:, None] * a[None, :]
        key = (c.cls.astype(np.int64) * 4096 + c.i) * 4096 + c.j
        uniq, inv = np.unique(key.ravel(), return_inverse=True)
        sums = np.bincount(inv, weights=contrib.ravel(), minlength=len(uniq))
        out = {}
        for k, s in zip(uniq, sums):
            cl, rest = divmod(int(k), 4096 * 4096)
            ii, jj = divmod(rest, 4096)
            out[(CLASS_NAMES[cl], ii, jj)] = float(s)
        sym_star, sym = self.paraproduct_symbols(filtered)
        out[("para_adjoint", 0, 0)] = float(np.sum(sym_star * avg_g * a))
        out[("para", 0, 0)] = float(np.sum(sym * avg_f * b))
        return out

    def unfiltered_sum(self, f: np.ndarray, g: np.ndarray) -> float:
        a = self.basis.analyze_array(f)[self.rows]
        b = self.basis.analyze_array(g)[self.rows]
        return float(b @ self.m @ a)

    def filtered_sum(self, f: np.ndarray, g: np.ndarray) -> float:
        a = self.basis.analyze_array(f)[self.rows]
        b = self.basis.analyze_array(g)[self.rows]
        return float(b @ (self.weights(True) * self.m) @ a)

    # -- shift extraction
    def extract_shifts(self, cutoff: int, prefactors: dict | None = None, filtered: bool = True):
        """Shifts per ``(class, i, j)`` with ``max(i, j) <= cutoff`` and the paraproduct symbols.

        Coefficients are divided by the class prefactor ``prefactors[name](i, j)``
        (default 1); the
        resulting normalization slack of each shift is available through
        :meth:`DyadicShift.normalization_slack`.
        """
        prefactors = prefactors or {}
        c = self.classification
        coef = self.coefficients() * self.weights(filtered and self.good is not None)
        sys = self.system
        shifts: dict[tuple[str, int, int], DyadicShift] = {}
        for cl, name in CLASS_NAMES.items():
            mask = (c.cls == cl) & (np.maximum(c.i, c.j) <= cutoff) & (coef != 0)
            if not mask.any():
                continue
            J, I = np.nonzero(mask)
            for ii, jj in sorted(set(zip(c.i[J, I].tolist(), c.j[J, I].tolist()))):
                sel = (c.i[J, I] == ii) & (c.j[J, I] == jj)
                Js, Is = J[sel], I[sel]
                k_level = np.minimum(c.level[Js], c.level[Is]) if cl in (IN, EQUAL) else c.join_level[Js, Is]
                lo_k = np.empty((len(Is), sys.d), dtype=np.int64)
                for kl in np.unique(k_level):
                    s = k_level == kl
                    side = 1 << (sys.N - int(kl))
                    off = sys.offset(int(kl))
                    lo_k[s] = np.floor_divide(self.lo[Is[s]] - off, side) * side + off
                scale = prefactors[name](ii, jj) if name in prefactors else 1.0
                vals = coef[Js, Is] / scale
                shifts[(name, ii, jj)] = DyadicShift(
                    self.basis, ii, jj, self.rows[Js], self.rows[Is], vals, k_level, lo_k,
                    cancellative=True, validate=False,
                )
        sym_star, sym = self.paraproduct_symbols(filtered and self.good is not None)
        full_star = np.zeros(self.basis.size)
        full = np.zeros(self.basis.size)
        full_star[self.rows] = sym_star
        full[self.rows] = sym
        return shifts, full_star, full

    def paraproducts(self, filtered: bool = False) -> tuple[ParaproductSymbol, ParaproductSymbol]:
        """Paraproducts with symbols ``T*1`` (acting on ``g``) and ``T1`` (acting on ``f``)."""
        _, sym_star, sym = self.extract_shifts(-1, filtered=filtered)
        return ParaproductSymbol(self.basis, sym_star), ParaproductSymbol(self.basis, sym)

    def synthesis_sum(self, shifts: dict, sym_star: np.ndarray, sym: np.ndarray, f: np.ndarray, g: np.ndarray,
                      prefactors: dict | None = None) -> float:
        """``sum prefactor * <g, S f>`` over the shifts plus both paraproduct pairings."""
        prefactors = prefactors or {}
        total = 0.0
        for (name, i, j), sh in shifts.items():
            scale = prefactors[name](i, j) if name in prefactors else 1.0
            total += scale * float(np.vdot(g, sh.apply_array(f)).real)
        star = ParaproductSymbol(self.basis, sym_star)
        plain = ParaproductSymbol(self.basis, sym)
        total += float(np.vdot(star.apply_array(g), f).real)
        total += float(np.vdot(g, plain.apply_array(f)).real)
        return total * self.system.lattice.cell_measure


def reassemble(pieces: dict, cutoff: int | None = None) -> float:
    """Sum pieces with ``max(i, j) <= cutoff`` (all when ``None``); paraproducts always count."""
    total = 0.0
    for (name, i, j), v in pieces.items():
        if name.startswith("para") or cutoff is None or max(i, j) <= cutoff:
            total += v
    return total


def class_prefactors(kernel_c0: float, kernel_cpsi: float, wbp: float, tau_fn) -> dict:
    """Normalization prefactors per class, as functions of ``(i, j)``."""
    return {
        "out": lambda i, j: (kernel_c0 + kernel_cpsi) * tau_fn(i, j),
        "in": lambda i, j: (kernel_c0 + kernel_cpsi) * tau_fn(i, j),
        "equal": lambda i, j: kernel_c0 + wbp if kernel_c0 + wbp > 0 else 1.0,
        "near": lambda i, j: kernel_c0 if kernel_c0 > 0 else 1.0,
    }


def normalization_slack(shifts: dict, prefactor_fns: dict) -> dict[tuple, float]:
    """Per extracted shift, the factor by which coefficients over prefactor exceed ``sqrt(|I||J|)/|K|``."""
    out = {}
    for (name, i, j), s in shifts.items():
        if not s.size:
            continue
        out[(name, i, j)] = s.normalization_slack() / prefactor_fns[name](i, j)
    return out


# ---------------------------------------------------------------------------
# Monte Carlo over systems


def random_systems(lattice: Lattice, count: int, seed: int, horizon: int = 32):
    """Independent random systems with top level 0, seeded by ``(seed, n)``."""
    for n in range(count):
        rng = np.random.default_rng([seed, n])
        yield ShiftedDyadicSystem.random(lattice, rng, k_top=0, depth_above=horizon)


@dataclass
class ReconstructionReport:
    kernel: str
    N: int
    r: int
    phi: str
    psi: str
    cutoff: int | None
    samples: int
    lhs: float
    estimate: float
    stderr: float
    residual: float
    tau_tail: float

    def as_dict(self) -> dict:
        return {
            "kernel": self.kernel, "N": self.N, "r": self.r, "phi": self.phi, "psi": self.psi,
            "cutoff": self.cutoff, "samples": self.samples, "lhs": self.lhs, "estimate": self.estimate,
            "stderr": self.stderr, "residual": self.residual, "tau_tail": self.tau_tail,
        }


def ratio_estimate(x: np.ndarray, p: float, p_err: float) -> tuple[float, float]:
    """``mean(x)/p`` with delta-method standard error."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    mean = float(x.mean())
    var_mean = float(x.var(ddof=1)) / n if n > 1 else 0.0
    est = mean / p
    se = math.sqrt(var_mean / p**2 + (mean * p_err / p**2) ** 2)
    return est, se


def good_expansion_samples(op, f, g, cfg, samples, seed, cutoffs=(None,)):
    """Per-system good-filtered sums, one column per cutoff."""
    lat = op.lattice
    out = np.zeros((samples, len(cutoffs)))
    for n, sys in enumerate(random_systems(lat, samples, seed, cfg.horizon)):
        exp = SystemExpansion(op, sys, cfg)
        pieces = exp.pieces(f, g, filtered=True)
        for k, c in enumerate(cutoffs):
            out[n, k] = reassemble(pieces, c)
    return out


def good_probability(cfg: GoodnessConfig, d: int, samples: int, seed: int) -> tuple[float, float]:
    bad, err = estimate_bad_probability(cfg, d, samples, seed)
    return 1.0 - bad, err


def good_expansion_check(op, f, g, cfg, samples, seed, pi_samples: int = 1_000_000):
    """Return ``(lhs, estimate, stderr)`` for the good-filtered Monte Carlo identity."""
    lhs = float(op.pair(g, f))
    x = good_expansion_samples(op, f, g, cfg, samples, seed)[:, 0]
    p, p_err = good_probability(cfg, op.lattice.d, pi_samples, seed + 7919)
    est, se = ratio_estimate(x, p, p_err)
    return lhs, est, se


def reconstruct(op, f, g, cfg, psi, cutoffs, samples, seed, pi_samples: int = 1_000_000) -> list[ReconstructionReport]:
    """Monte Carlo average of truncated shift expansions, one report per cutoff."""
    lhs = float(op.pair(g, f))
    x = good_expansion_samples(op, f, g, cfg, samples, seed, tuple(cutoffs))
    p, p_err = good_probability(cfg, op.lattice.d, pi_samples, seed + 7919)
    reports = []
    for k, c in enumerate(cutoffs):
        est, se = ratio_estimate(x[:, k], p, p_err)
        tail = tau_tail(cfg.phi, psi, op.lattice.d, c) if c is not None else 0.0
        reports.append(
            ReconstructionReport(
                op.kernel.name, op.lattice.N, cfg.r, str(cfg.phi), str(psi), c, samples, lhs, est, se, abs(est - lhs), tail
            )
        )
    return reports
