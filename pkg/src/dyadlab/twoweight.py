"""Two-weight estimates for dyadic shifts on finite lattices.

Everything here is exact finite linear algebra: weighted martingale
projections, testing constants, the weighted operator norm of ``S(sigma .)``,
and the stopping-time forest used to bound the testing constants.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import ShiftedDyadicSystem
from .haar import CubeTree
from .linalg import matrix_power_norm, spectral_norm
from .shift import DyadicShift
from .weight import WeightProfile, ainfty, joint_a2


# ---------------------------------------------------------------------------
# cube catalog


class CubeCatalog:
    """Flat enumeration of the tree cubes of a system, coarse levels first."""

    def __init__(self, system: ShiftedDyadicSystem):
        self.system = system
        self.tree = tree = CubeTree(system)
        d = system.d
        levels, los, tops, pos = [], [], [], []
        self.level_start = {}
        count = 0
        for L in tree.levels:
            lo = tree.level_lo(L).reshape(-1, d)
            shape = tree.level_shape(L)
            grid = np.stack(np.unravel_index(np.arange(int(np.prod(shape))), shape), axis=-1)
            self.level_start[L] = count
            count += len(lo)
            levels.append(np.full(len(lo), L))
            los.append(lo)
            tops.append(grid[:, 0])
            pos.append(grid[:, 1:])
        self.level = np.concatenate(levels)
        self.lo = np.concatenate(los)
        self.top = np.concatenate(tops)
        self.pos = np.concatenate(pos)
        self.cells = np.left_shift(1, system.N - self.level)
        self.size = count
        self.parent = np.full(count, -1, dtype=np.int64)
        for L in tree.levels[1:]:
            s = self.level_start[L]
            n = self._level_count(L)
            idx = np.arange(s, s + n)
            self.parent[idx] = self.index(L - 1, self.top[idx], self.pos[idx] >> 1)
        self._masks = None
        self._key = {(int(lv), tuple(int(v) for v in lo)): n for n, (lv, lo) in enumerate(zip(self.level, self.lo))}

    def _level_count(self, L: int) -> int:
        return self.tree.T << ((L - self.tree.k_top) * self.system.d)

    def index(self, level: int, top, pos) -> np.ndarray:
        """Flat indices of cubes given their top cube and in-top position."""
        shape = self.tree.level_shape(level)
        pos = np.asarray(pos).reshape(-1, self.system.d)
        flat = np.ravel_multi_index((np.asarray(top).ravel(),) + tuple(pos.T), shape)
        return self.level_start[level] + flat

    def lookup(self, level: int, lo) -> int:
        return self._key[(int(level), tuple(int(v) for v in lo))]

    def flatten(self, per_level: dict[int, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(per_level[L]).reshape(-1) for L in self.tree.levels])

    @property
    def masks(self) -> np.ndarray:
        """Boolean indicator of every cube on the flattened domain, shape (cubes, cells)."""
        if self._masks is None:
            lat = self.system.lattice
            rel = self.lo - np.array(lat.domain_lo)
            m = np.zeros((self.size,) + tuple(lat.domain_shape), dtype=bool)
            for n in range(self.size):
                m[(n,) + tuple(slice(int(a), int(a) + int(self.cells[n])) for a in rel[n])] = True
            self._masks = m.reshape(self.size, -1)
        return self._masks

    def contains(self, big: int, small: int) -> bool:
        return bool(
            self.level[big] <= self.level[small]
            and np.all(self.lo[big] <= self.lo[small])
            and np.all(self.lo[small] + self.cells[small] <= self.lo[big] + self.cells[big])
        )

    def ancestor(self, n: int, m: int) -> int:
        for _ in range(m):
            n = int(self.parent[n])
            if n < 0:
                return -1
        return n

    def descendants(self, n: int, include_self: bool = True) -> np.ndarray:
        lo, hi = self.lo[n], self.lo[n] + self.cells[n]
        inside = np.all((self.lo >= lo) & (self.lo + self.cells[:, None] <= hi), axis=1) & (self.level >= self.level[n])
        if not include_self:
            inside[n] = False
        return np.nonzero(inside)[0]


# ---------------------------------------------------------------------------
# weighted projections


def _flat(profile: WeightProfile) -> np.ndarray:
    return profile.values.reshape(-1)


def weighted_expectation(values: np.ndarray, sigma: WeightProfile, level: int) -> np.ndarray:
    """``E^sigma_level f``: on every level cube, the sigma-average (zero on sigma-null cubes)."""
    tree = sigma.tree
    num = tree.masses(np.asarray(values) * sigma.values)[level]
    den = sigma.masses()[level]
    with np.errstate(divide="ignore", invalid="ignore"):
        avg = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return tree.insert(tree.spread(avg, level))


def projection_matrix(catalog: CubeCatalog, sigma: WeightProfile, cube: int) -> np.ndarray:
    """Matrix of ``D^sigma_Q`` on domain cells (dense; for checks at small sizes)."""
    s = _flat(sigma)
    q = catalog.masks[cube]
    n = q.size
    out = np.zeros((n, n))
    lv = catalog.level[cube]
    if lv >= catalog.system.N:
        return out
    kids = [c for c in np.nonzero(catalog.parent == cube)[0]]
    for c in kids:
        m = catalog.masks[c]
        mass = s[m].sum()
        if mass > 0:
            out[np.ix_(m, m)] += s[m][None, :] / mass
    mass = s[q].sum()
    if mass > 0:
        out[np.ix_(q, q)] -= s[q][None, :] / mass
    return out


def martingale_differences(values: np.ndarray, sigma: WeightProfile) -> dict[int, np.ndarray]:
    """``sum_{l(Q) = level} D^sigma_Q f`` for every level, plus the top term under key ``'top'``."""
    tree = sigma.tree
    out: dict = {"top": weighted_expectation(values, sigma, tree.k_top)}
    prev = out["top"]
    for L in range(tree.k_top, tree.N):
        nxt = weighted_expectation(values, sigma, L + 1)
        out[L] = nxt - prev
        prev = nxt
    return out


def cube_differences(catalog: CubeCatalog, values: np.ndarray, sigma: WeightProfile) -> np.ndarray:
    """Rows ``D^sigma_Q f`` (flattened) for every catalog cube; finest cells give zero rows."""
    diffs = martingale_differences(values, sigma)
    n_cells = catalog.masks.shape[1]
    out = np.zeros((catalog.size, n_cells))
    for n in range(catalog.size):
        L = int(catalog.level[n])
        if L < catalog.system.N:
            out[n] = np.where(catalog.masks[n], diffs[L].reshape(-1), 0.0)
    return out


def aggregated_difference(catalog: CubeCatalog, values: np.ndarray, sigma: WeightProfile, cube: int, depth: int):
    """``D^{sigma,i}_K f``: the differences of the cubes ``depth`` levels below ``K``, summed."""
    L = int(catalog.level[cube]) + depth
    if L >= catalog.system.N:
        return np.zeros(catalog.masks.shape[1])
    diffs = martingale_differences(values, sigma)
    return np.where(catalog.masks[cube], diffs[L].reshape(-1), 0.0)


def weighted_inner(x: np.ndarray, y: np.ndarray, weight: WeightProfile) -> float:
    h = weight.system.lattice.cell_measure
    return float(np.sum(np.asarray(x).reshape(-1) * np.asarray(y).reshape(-1) * _flat(weight)) * h)


# ---------------------------------------------------------------------------
# norms and testing constants


def shift_cell_matrix(shift: DyadicShift) -> np.ndarray:
    return shift.dense_matrix()


def weighted_operator_matrix(s_mat: np.ndarray, w: WeightProfile, sigma: WeightProfile) -> np.ndarray:
    """``diag(sqrt w) S diag(sqrt sigma)``: its spectral norm is ``||S(sigma .)||_{L2(sigma) -> L2(w)}``."""
    return np.sqrt(_flat(w))[:, None] * s_mat * np.sqrt(_flat(sigma))[None, :]


def weighted_norm(s_mat: np.ndarray, w: WeightProfile, sigma: WeightProfile, method: str = "svd") -> float:
    a = weighted_operator_matrix(s_mat, w, sigma)
    if method == "svd":
        return spectral_norm(a)
    est = matrix_power_norm(a, tol=1e-13, maxiter=50000)
    return est.value


@dataclass
class TestingConstants:
    value: float
    value_star: float
    cube: int
    cube_star: int

    def as_dict(self) -> dict:
        return {"testing": self.value, "testing_dual": self.value_star, "cube": self.cube, "cube_dual": self.cube_star}


def _testing(s_mat, catalog, w, sigma) -> tuple[float, int]:
    masks = catalog.masks.astype(float)
    s, wv = _flat(sigma), _flat(w)
    h = catalog.system.lattice.cell_measure
    images = (masks * s[None, :]) @ s_mat.T
    local = images * masks
    num = (local**2 * wv[None, :]).sum(axis=1) * h
    den = (masks * s[None, :]).sum(axis=1) * h
    ok = den > 0
    ratio = np.zeros(catalog.size)
    ratio[ok] = np.sqrt(num[ok] / den[ok])
    best = int(np.argmax(ratio))
    return float(ratio[best]), best


def testing_constants(s_mat: np.ndarray, w: WeightProfile, sigma: WeightProfile, catalog: CubeCatalog | None = None):
    """Exact maxima of ``||1_Q S(sigma 1_Q)||_{L2(w)} / sigma(Q)^{1/2}`` and its dual over all tree cubes."""
    catalog = catalog or CubeCatalog(w.system)
    val, q = _testing(s_mat, catalog, w, sigma)
    val_star, q_star = _testing(s_mat.T, catalog, sigma, w)
    return TestingConstants(val, val_star, q, q_star)


@dataclass
class TwoWeightReport:
    norm: float
    testing: float
    testing_dual: float
    a2: float
    kappa: int
    rhs: float
    ratio: float
    lower_bound_ok: bool

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def two_weight_bound_check(shift: DyadicShift, w: WeightProfile, sigma: WeightProfile, catalog=None) -> TwoWeightReport:
    """Exact ``||S(sigma .)||`` against ``(1+k)(T + T*) + (1+k)^2 [w,sigma]^{1/2}``."""
    catalog = catalog or CubeCatalog(w.system)
    s_mat = shift_cell_matrix(shift)
    if _flat(w).sum() == 0 or _flat(sigma).sum() == 0:
        raise ValueError("degenerate measures")
    norm = weighted_norm(s_mat, w, sigma)
    tc = testing_constants(s_mat, w, sigma, catalog)
    a2 = joint_a2(w, sigma)
    k = shift.kappa
    rhs = (1 + k) * (tc.value + tc.value_star) + (1 + k) ** 2 * math.sqrt(a2)
    ratio = norm / rhs if rhs > 0 else (0.0 if norm == 0 else math.inf)
    ok = norm >= max(tc.value, tc.value_star) * (1 - 1e-9)
    return TwoWeightReport(norm, tc.value, tc.value_star, a2, k, rhs, ratio, ok)


@dataclass
class TestingBoundReport:
    testing: float
    testing_dual: float
    a2: float
    ainfty_sigma: float
    ainfty_w: float
    kappa: int
    ratio: float
    ratio_dual: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def testing_bound_verify(shift: DyadicShift, w: WeightProfile, sigma: WeightProfile, catalog=None) -> TestingBoundReport:
    """Empirical constants in ``T <= C (1+k) [w,sigma]^{1/2} [sigma]_{Ainf}^{1/2}`` and its dual."""
    catalog = catalog or CubeCatalog(w.system)
    tc = testing_constants(shift_cell_matrix(shift), w, sigma, catalog)
    a2 = joint_a2(w, sigma)
    ai_s, ai_w = ainfty(sigma), ainfty(w)
    k = shift.kappa
    r = tc.value / ((1 + k) * math.sqrt(a2 * ai_s))
    r_star = tc.value_star / ((1 + k) * math.sqrt(a2 * ai_w))
    return TestingBoundReport(tc.value, tc.value_star, a2, ai_s, ai_w, k, r, r_star)


# ---------------------------------------------------------------------------
# structural checks from the two-weight expansion


def _shift_cube_keys(shift: DyadicShift) -> set:
    return {(int(lv), tuple(int(v) for v in lo)) for lv, lo in zip(shift.k_level, shift.k_lo)}


def allowed_pair(catalog: CubeCatalog, shift: DyadicShift, q: int, r: int) -> bool:
    """Whether some averaging cube ``K`` of the shift links ``Q`` (input side) and ``R`` (output side)."""
    def side_ok(c, kn, depth):
        lk, lc = int(catalog.level[kn]), int(catalog.level[c])
        inside = catalog.contains(kn, c) and lk < lc <= lk + depth
        return inside or catalog.contains(c, kn)

    for key in _shift_cube_keys(shift):
        kn = catalog._key.get(key)
        if kn is None:
            continue
        if side_ok(q, kn, shift.i) and side_ok(r, kn, shift.j):
            return True
    return False


def pair_matrix(shift: DyadicShift, w: WeightProfile, sigma: WeightProfile, catalog: CubeCatalog, f, g) -> np.ndarray:
    """``<D^w_R g, S(sigma D^sigma_Q f)>_w`` for all cube pairs, indexed ``[R, Q]``."""
    s_mat = shift_cell_matrix(shift)
    dq = cube_differences(catalog, f, sigma)
    dr = cube_differences(catalog, g, w)
    h = catalog.system.lattice.cell_measure
    return (dr * _flat(w)[None, :]) @ s_mat @ (dq * _flat(sigma)[None, :]).T * h


def matrix_vanishing_violations(shift, w, sigma, catalog, f, g, tol: float = 1e-12) -> int:
    """Count pairs outside the allowed containment relations with a nonzero matrix entry."""
    m = pair_matrix(shift, w, sigma, catalog, f, g)
    scale = max(float(np.abs(m).max()), 1e-300)
    bad = 0
    for r, q in zip(*np.nonzero(np.abs(m) > tol * scale)):
        if not allowed_pair(catalog, shift, int(q), int(r)):
            bad += 1
    return bad


def disjoint_block_check(shift, w, sigma, catalog, f, g) -> tuple[float, float]:
    """``(sum over disjoint Q, R of |matrix entry|, i j [w,sigma]^{1/2} ||g||_w ||f||_sigma)``."""
    m = pair_matrix(shift, w, sigma, catalog, f, g)
    masks = catalog.masks
    overlap = (masks.astype(np.int32) @ masks.T.astype(np.int32)) > 0
    lhs = float(np.abs(m[~overlap]).sum())
    rhs = shift.i * shift.j * math.sqrt(joint_a2(w, sigma))
    rhs *= math.sqrt(weighted_inner(g, g, w) * weighted_inner(f, f, sigma))
    return lhs, rhs


def contained_cubes_identity_gap(shift, w, sigma, catalog) -> float:
    """Largest ``|D^sigma_Q S*(w 1_{Q^(i)}) - D^sigma_Q S*(w 1_P)|`` over ``P`` containing ``Q^(i)``."""
    s_star = shift_cell_matrix(shift).T
    wv = _flat(w)
    images = (catalog.masks * wv[None, :]) @ s_star.T
    worst = 0.0
    for q in range(catalog.size):
        anc = catalog.ancestor(q, shift.i)
        if anc < 0 or catalog.level[q] >= catalog.system.N:
            continue
        base = cube_differences_row(catalog, images[anc], sigma, q)
        p = int(catalog.parent[anc])
        while p >= 0:
            other = cube_differences_row(catalog, images[p], sigma, q)
            worst = max(worst, float(np.abs(other - base).max()))
            p = int(catalog.parent[p])
    return worst


def cube_differences_row(catalog: CubeCatalog, values: np.ndarray, sigma: WeightProfile, cube: int) -> np.ndarray:
    """``D^sigma_Q f`` for one cube, flattened."""
    L = int(catalog.level[cube])
    v = np.asarray(values).reshape(catalog.system.lattice.domain_shape)
    diff = weighted_expectation(v, sigma, L + 1) - weighted_expectation(v, sigma, L)
    return np.where(catalog.masks[cube], diff.reshape(-1), 0.0)


# ---------------------------------------------------------------------------
# splitting forest


@dataclass
class SplittingForest:
    """Stopping-time decomposition of the cubes below ``Q``.

    Arrays are indexed by position in ``cubes`` (catalog indices of all cubes
    contained in ``Q``).  ``a`` is ``None``-like (``excluded``) for cubes with
    ``w(K) sigma(K) = 0``.
    """

    catalog: CubeCatalog
    q: int
    kappa: int
    cubes: np.ndarray
    k: np.ndarray
    a: np.ndarray
    excluded: np.ndarray
    principal: np.ndarray
    generation: np.ndarray
    stopping_parent: np.ndarray
    principal_of: np.ndarray
    b: np.ndarray
    sigma_avg: np.ndarray
    w_avg: np.ndarray
    sigma_mass: np.ndarray
    w_mass: np.ndarray
    a2: float
    ainfty_sigma: float
    maximal_integral: float
    _local: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._local.update({int(c): n for n, c in enumerate(self.cubes)})

    def local(self, catalog_index: int) -> int:
        return self._local[int(catalog_index)]

    def classes(self) -> list[tuple[int, int]]:
        keep = ~self.excluded
        return sorted(set(zip(self.k[keep].tolist(), self.a[keep].tolist())))

    def principal_cubes(self, k: int, a: int) -> np.ndarray:
        return np.nonzero(self.principal & (self.k == k) & (self.a == a) & ~self.excluded)[0]

    def subcollection(self, p_local: int, b: int) -> np.ndarray:
        """Local indices of ``K`` with ``Pi(K) = P`` and ratio class ``b``."""
        return np.nonzero((self.principal_of == p_local) & (self.b == b) & ~self.excluded)[0]

    def carleson_sums(self) -> dict[tuple[int, int], float]:
        return {(k, a): float(self.sigma_mass[self.principal_cubes(k, a)].sum()) for k, a in self.classes()}

    def carleson_bound(self) -> float:
        """``2 [sigma]_{Ainf} sigma(Q)``."""
        return 2.0 * self.ainfty_sigma * float(self.sigma_mass[self.local(self.q)])

    def invariants(self) -> dict[str, bool]:
        cat = self.catalog
        keep = ~self.excluded
        idx = np.nonzero(keep)[0]
        a_max = math.ceil(math.log2(self.a2)) if self.a2 > 0 else 0
        partition = bool(
            np.all((self.k[idx] >= 0) & (self.k[idx] <= self.kappa))
            and np.all(self.a[idx] <= a_max)
            and np.all(self.principal_of[idx] >= 0)
            and np.all(self.b[idx] >= 0)
        )
        # every cube lies in exactly one (k, a, P, b) cell: labels are single-valued, so count them
        labels = set(zip(self.k[idx].tolist(), self.a[idx].tolist(), self.principal_of[idx].tolist(), self.b[idx].tolist()))
        counted = sum(len(np.nonzero((self.k == k) & (self.a == a) & (self.principal_of == p) & (self.b == b) & keep)[0])
                      for k, a, p, b in labels)
        partition = partition and counted == len(idx)
        contain = all(
            cat.contains(int(self.cubes[self.principal_of[n]]), int(self.cubes[n]))
            and self.k[self.principal_of[n]] == self.k[n]
            and self.a[self.principal_of[n]] == self.a[n]
            for n in idx
        )
        ratio = self.sigma_avg[idx] / self.sigma_avg[self.principal_of[idx]]
        freeze = bool(np.all(ratio <= 2.0 * (1 + 1e-12)))
        b_ok = bool(np.all((2.0 ** -self.b[idx] < ratio * (1 + 1e-12)) & (ratio <= 2.0 ** (1 - self.b[idx]) * (1 + 1e-12))))
        stop = True
        for n in np.nonzero(self.principal & keep)[0]:
            par = self.stopping_parent[n]
            if par < 0:
                # maximal in its class: no strict ancestor inside Q in the same class
                anc = int(cat.parent[int(self.cubes[n])])
                while anc in self._local:
                    m = self._local[anc]
                    if not self.excluded[m] and self.k[m] == self.k[n] and self.a[m] == self.a[n]:
                        stop = False
                    anc = int(cat.parent[anc])
            else:
                stop = stop and self.sigma_avg[n] > 2.0 * self.sigma_avg[par]
        sums = self.carleson_sums()
        bound = self.carleson_bound()
        carleson = all(v <= bound * (1 + 1e-12) for v in sums.values())
        maximal = all(v <= 2.0 * self.maximal_integral * (1 + 1e-12) for v in sums.values())
        return {
            "partition": partition,
            "containment": bool(contain),
            "freeze": freeze,
            "ratio_classes": b_ok,
            "stopping_rule": bool(stop),
            "carleson": carleson,
            "carleson_maximal": maximal,
        }

    def to_json(self) -> str:
        rows = []
        for n, c in enumerate(self.cubes):
            rows.append({
                "level": int(self.catalog.level[c]),
                "lo": [int(v) for v in self.catalog.lo[c]],
                "k": int(self.k[n]),
                "a": None if self.excluded[n] else int(self.a[n]),
                "principal": bool(self.principal[n]),
                "pi": int(self.principal_of[n]),
                "b": int(self.b[n]),
            })
        return json.dumps({"q": int(self.q), "kappa": self.kappa, "cubes": rows}, sort_keys=True)


def _ratio_class(ratio: np.ndarray) -> np.ndarray:
    b = 1 - np.ceil(np.log2(ratio)).astype(np.int64)
    # repair rounding at exact powers of two
    b = np.where(ratio <= 2.0 ** (-b), b + 1, b)
    b = np.where(ratio > 2.0 ** (1 - b), b - 1, b)
    return b


def build_splitting_forest(
    kappa: int, w: WeightProfile, sigma: WeightProfile, q: int, catalog: CubeCatalog | None = None
) -> SplittingForest:
    """Scale classes, A2 classes, principal cubes and ratio classes below the catalog cube ``q``."""
    catalog = catalog or CubeCatalog(w.system)
    d = catalog.system.d
    cubes = catalog.descendants(q)
    cubes = cubes[np.argsort(catalog.level[cubes], kind="stable")]
    n = len(cubes)
    local = {int(c): m for m, c in enumerate(cubes)}
    wm = catalog.flatten(w.masses())[cubes]
    sm = catalog.flatten(sigma.masses())[cubes]
    vol = 2.0 ** (-catalog.level[cubes] * d)
    k = catalog.level[cubes] % (kappa + 1)
    prod = wm * sm / vol**2
    excluded = prod <= 0
    with np.errstate(divide="ignore"):
        a = np.where(excluded, 0, np.ceil(np.log2(np.where(excluded, 1.0, prod)))).astype(np.int64)
    # repair rounding: need 2^(a-1) < prod <= 2^a
    a = np.where(~excluded & (prod > 2.0**a), a + 1, a)
    a = np.where(~excluded & (prod <= 2.0 ** (a - 1)), a - 1, a)
    s_avg = sm / vol
    principal = np.zeros(n, dtype=bool)
    generation = np.full(n, -1, dtype=np.int64)
    stop_parent = np.full(n, -1, dtype=np.int64)
    pi = np.full(n, -1, dtype=np.int64)
    # pointer per (cube, class): nearest principal ancestor-or-self of that class
    pointers: list[dict] = [dict() for _ in range(n)]
    for m, c in enumerate(cubes):
        par = int(catalog.parent[c])
        inherited = dict(pointers[local[par]]) if par in local else {}
        if not excluded[m]:
            key = (int(k[m]), int(a[m]))
            ptr = inherited.get(key, -1)
            if ptr < 0:
                principal[m], generation[m] = True, 0
            elif s_avg[m] > 2.0 * s_avg[ptr]:
                principal[m], generation[m], stop_parent[m] = True, generation[ptr] + 1, ptr
            if principal[m]:
                inherited[key] = m
            pi[m] = inherited[key]
        pointers[m] = inherited
    b = np.zeros(n, dtype=np.int64)
    keep = ~excluded
    b[keep] = _ratio_class(s_avg[keep] / s_avg[pi[keep]])
    a2 = joint_a2(w, sigma)
    ai = ainfty(sigma)
    maximal_integral = _maximal_integral(catalog, sigma, q)
    forest = SplittingForest(
        catalog, q, kappa, cubes, k, a, excluded, principal, generation, stop_parent, pi, b,
        s_avg, wm / vol, sm, wm, a2, ai, maximal_integral,
    )
    return forest


def _maximal_integral(catalog: CubeCatalog, sigma: WeightProfile, q: int) -> float:
    """``int_Q M(sigma 1_Q)`` with the dyadic maximal function over cubes inside ``Q``."""
    cubes = catalog.descendants(q)
    avgs = catalog.flatten(sigma.averages())
    best = np.zeros(catalog.masks.shape[1])
    for c in cubes:
        best = np.where(catalog.masks[c], np.maximum(best, avgs[c]), best)
    return float(best[catalog.masks[q]].sum() * catalog.system.lattice.cell_measure)


# ---------------------------------------------------------------------------
# level sets


def subshift(shift: DyadicShift, catalog: CubeCatalog, cube_indices) -> DyadicShift:
    keys = {(int(catalog.level[c]), tuple(int(v) for v in catalog.lo[c])) for c in cube_indices}
    mask = np.array([(int(lv), tuple(int(v) for v in lo)) in keys for lv, lo in zip(shift.k_level, shift.k_lo)], dtype=bool)
    return shift.select(mask)


@dataclass
class LevelSetReport:
    threshold_constant: float
    lam: float
    lebesgue: np.ndarray
    weighted: np.ndarray
    halving_ratios: np.ndarray
    support_ok: bool
    maximal_lebesgue: float
    maximal_weighted: float
    weighted_constant: float
    vacuous: bool

    def as_dict(self) -> dict:
        return {
            "C": self.threshold_constant, "lambda": self.lam, "lebesgue": self.lebesgue.tolist(),
            "weighted": self.weighted.tolist(), "halving": self.halving_ratios.tolist(), "support_ok": self.support_ok,
            "maximal_lebesgue": self.maximal_lebesgue, "maximal_weighted": self.maximal_weighted,
            "weighted_constant": self.weighted_constant, "vacuous": self.vacuous,
        }


# derived bound on w-level sets: 4 from freezing, 3/2 from the two-thirds set, 2 from the index shift
WEIGHTED_LEVEL_SET_CONSTANT = 12.0


def level_set_decay(
    shift: DyadicShift, forest: SplittingForest, p_local: int, b: int, w: WeightProfile, sigma: WeightProfile,
    n_max: int = 12,
) -> LevelSetReport:
    """Level sets of ``S_sub(sigma 1_Q)`` for the subcollection ``(Pi = P, b)``.

    The threshold multiplier ``C`` is the smallest power of two for which every
    cube ``L`` of the subcollection satisfies ``||A_L(sigma 1_Q)||_inf <= lam/3``
    and ``|{|S_{K subset L}(sigma 1_Q)| > lam/3}| <= |L|/3``, with
    ``lam = C 2^-b <sigma>_P``.
    """
    cat = forest.catalog
    members = forest.subcollection(p_local, b)
    h = cat.system.lattice.cell_measure
    shape = cat.system.lattice.domain_shape
    q_mask = cat.masks[forest.q].reshape(shape)
    f = sigma.values * q_mask
    wv = _flat(w)
    member_cubes = forest.cubes[members]
    sub = subshift(shift, cat, member_cubes)
    empty = LevelSetReport(0.0, 0.0, np.zeros(n_max + 1), np.zeros(n_max + 1), np.zeros(0), True, 0.0, 0.0, 0.0, True)
    if sub.size == 0:
        return empty
    values = np.abs(sub.apply_array(f)).reshape(-1)
    base = 2.0 ** (-b) * forest.sigma_avg[p_local]
    need = 0.0
    for c in member_cubes:
        block = subshift(sub, cat, [c])
        inner_cubes = [x for x in member_cubes if cat.contains(int(c), int(x))]
        inner = subshift(sub, cat, inner_cubes)
        sup_block = float(np.abs(block.apply_array(f)).max()) if block.size else 0.0
        g = np.sort(np.abs(inner.apply_array(f)).reshape(-1)[cat.masks[c]])[::-1]
        allowed = int(cat.cells[c] ** cat.system.d // 3)
        kth = float(g[allowed]) if allowed < len(g) else 0.0
        need = max(need, 3.0 * sup_block, 3.0 * kth)
    c_min = need / base
    C = 1.0 if c_min <= 1.0 else 2.0 ** math.ceil(math.log2(c_min))
    while C * base < need:
        C *= 2.0
    lam = C * base
    leb = np.array([np.count_nonzero(values > n * lam) * h for n in range(n_max + 1)])
    wgt = np.array([float(wv[values > n * lam].sum()) * h for n in range(n_max + 1)])
    with np.errstate(divide="ignore", invalid="ignore"):
        halving = np.where(leb[:-1] > 0, leb[1:] / np.where(leb[:-1] > 0, leb[:-1], 1.0), 0.0)
    # maximal cubes of the subcollection
    maximal = [c for c in member_cubes if not any(cat.contains(int(o), int(c)) and o != c for o in member_cubes)]
    union = np.zeros(values.size, dtype=bool)
    for c in maximal:
        union |= cat.masks[c]
    support_ok = bool(np.all(union[values > 0]))
    max_leb = float(union.sum() * h)
    max_w = float(wv[union].sum() * h)
    wc = float(np.max(wgt * 2.0 ** np.arange(n_max + 1)) / max_w) if max_w > 0 else 0.0
    return LevelSetReport(C, lam, leb, wgt, halving, support_ok, max_leb, max_w, wc, False)
