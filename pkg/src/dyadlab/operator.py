"""Singular integral kernels, their exact lattice bilinear forms, and the Beurling multiplier."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, signal
from scipy.linalg import toeplitz

from .grid import Lattice, ModulusOfContinuity, ShiftedDyadicSystem
from .haar import CubeTree, LatticeFunction
from .linalg import NormEstimate, matrix_power_norm

DENSE_CELL_CAP = 4096


# ---------------------------------------------------------------------------
# kernels


@dataclass(frozen=True)
class KernelSpec:
    """A standard kernel with declared size and smoothness constants.

    ``func`` evaluates ``K(x, y)``; for convolution kernels ``conv`` evaluates
    ``K`` at ``x - y``.  Points are arrays whose last axis has length ``d`` (or
    plain arrays when ``d == 1``); complex kernels return complex values.
    """

    name: str
    d: int
    psi: ModulusOfContinuity
    c0: float
    c_psi: float
    conv: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)
    func: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = field(default=None, compare=False)
    order: int = 0
    antisymmetric: bool = False

    def __call__(self, x, y):
        if self.func is not None:
            return self.func(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        return self.conv(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))

    @property
    def is_convolution(self) -> bool:
        return self.conv is not None

    @classmethod
    def hilbert(cls, alpha: float = 1.0) -> "KernelSpec":
        """``1/(x - y)``; ``C0 = 1`` and ``C_psi = 2**alpha`` for ``psi = t**alpha``."""
        with np.errstate(divide="ignore"):
            conv = lambda u: np.where(u != 0, 1.0 / np.where(u != 0, u, 1.0), 0.0)  # noqa: E731
        return cls("hilbert", 1, ModulusOfContinuity.power(alpha), 1.0, 2.0**alpha, conv=conv, antisymmetric=True)

    @classmethod
    def zero(cls, d: int = 1) -> "KernelSpec":
        return cls(
            "zero", d, ModulusOfContinuity.power(1.0), 0.0, 0.0,
            conv=lambda u: np.zeros(np.shape(u) if d == 1 else np.shape(u)[:-1]),
        )

    @classmethod
    def beurling(cls, n: int, alpha: float = 0.5) -> "KernelSpec":
        """``K_n(z) = (-1)**n |n|/pi (conj(z)/z)**n |z|**-2`` with Euclidean norms.

        Declared smoothness constant for ``psi = t**alpha``: with ``c = |n|/pi``,
        ``(16 c sqrt(1+n**2))**alpha * (5c)**(1-alpha)``, from interpolating the
        gradient bound and the size bound on the admissible region.
        """
        if n == 0:
            raise ValueError("n must be nonzero")
        c = abs(n) / math.pi
        c_psi = (16 * c * math.sqrt(1 + n * n)) ** alpha * (5 * c) ** (1 - alpha)
        return cls(
            f"beurling{n}", 2, ModulusOfContinuity.power(alpha), c, c_psi, conv=lambda z: beurling_kernel(n, z), order=n
        )

    @classmethod
    def custom(cls, name, d, func, psi, c0, c_psi, antisymmetric=False) -> "KernelSpec":
        return cls(name, d, psi, float(c0), float(c_psi), func=func, antisymmetric=antisymmetric)


def beurling_kernel(n: int, z: np.ndarray) -> np.ndarray:
    """Kernel of the ``n``-th Beurling power at points ``z`` (complex, or real pairs in the last axis)."""
    z = np.asarray(z)
    if not np.iscomplexobj(z):
        z = z[..., 0] + 1j * z[..., 1]
    r2 = np.abs(z) ** 2
    safe = np.where(r2 > 0, z, 1.0)
    unit = np.conj(safe) / safe
    val = (-1) ** n * abs(n) / math.pi * unit**n / np.where(r2 > 0, r2, 1.0)
    return np.where(r2 > 0, val, 0.0)


def standard_estimate_quotients(kernel: KernelSpec, samples: int, seed: int) -> tuple[float, float]:
    """Largest observed ``|K| |x-y|^d`` and smoothness quotient over random admissible triples.

    Both variables are perturbed (``x -> x'`` and ``y -> y'``).
    """
    rng = np.random.default_rng(seed)
    d = kernel.d
    shape = (samples, d) if d > 1 else (samples,)
    x = rng.uniform(-1, 1, shape)
    y = rng.uniform(-1, 1, shape)
    diff = x - y
    dist = np.linalg.norm(diff.reshape(samples, -1), axis=1)
    keep = dist > 1e-6
    x, y, dist = x[keep], y[keep], dist[keep]
    m = len(dist)
    frac = rng.uniform(0, 0.5, m) ** 2 * 2  # ratio |x - x'| / |x - y| in (0, 1/2)
    frac = np.minimum(frac, 0.499)
    direction = rng.standard_normal((m, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    step = (direction * (frac * dist)[:, None]).reshape(x.shape)
    size = np.abs(kernel(x, y)) * dist**d
    smooth_x = np.abs(kernel(x, y) - kernel(x + step, y)) * dist**d / kernel.psi(frac)
    smooth_y = np.abs(kernel(x, y) - kernel(x, y + step)) * dist**d / kernel.psi(frac)
    return float(size.max()), float(max(smooth_x.max(), smooth_y.max()))


# ---------------------------------------------------------------------------
# Hilbert closed form


def _xlogx(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    a = np.abs(u)
    return np.where(a > 0, u * np.log(np.where(a > 0, a, 1.0)), 0.0)


def hilbert_offset_form(offsets: np.ndarray, h: float) -> np.ndarray:
    """``int_c int_c' dy dx / (x - y)`` for cells whose indices differ by ``offsets``.

    The second difference of ``u log|u|`` gives the value; for large offsets the
    expression is rewritten with ``log1p`` to avoid cancellation.  The self-pair is
    the principal value 0.
    """
    n = np.asarray(offsets, dtype=np.int64)
    a = np.abs(n).astype(float)
    out = np.zeros(n.shape)
    one = a == 1
    out[one] = 2.0 * math.log(2.0)
    big = a >= 2
    ab = a[big]
    out[big] = ab * np.log1p(-1.0 / ab**2) + np.log1p(2.0 / (ab - 1.0))
    return h * np.sign(n) * out


def hilbert_cell_pair(h: float, a: int, b: int) -> float:
    """Form value for output cell ``a`` and input cell ``b`` (integer indices)."""
    return float(hilbert_offset_form(np.array([a - b]), h)[0])


def quad_cell_pair(kernel: KernelSpec, x_lo: float, x_hi: float, y_lo: float, y_hi: float) -> float:
    """Adaptive quadrature oracle for one-dimensional separated cell pairs."""
    val, _ = integrate.dblquad(
        lambda y, x: float(np.real(kernel(np.array(x), np.array(y)))), x_lo, x_hi, y_lo, y_hi, epsabs=1e-14, epsrel=1e-12
    )
    return val


# ---------------------------------------------------------------------------
# discretized operators


class DiscretizedOperator:
    """Exact bilinear form ``F[c, c'] = int_c int_c' K(x, y) dy dx`` on lattice cells.

    ``<g, T f> = sum g[c] F[c, c'] f[c']`` for piecewise constant ``f`` and ``g``.
    The diagonal (self-pair) is the principal value: 0 for odd kernels, excluded
    for general kernels.
    """

    def __init__(self, kernel: KernelSpec, lattice: Lattice, form: np.ndarray | None = None, gauss_order: int = 12):
        if kernel.d != lattice.d:
            raise ValueError("kernel and lattice dimensions differ")
        if lattice.n_cells > DENSE_CELL_CAP:
            raise ValueError(f"dense form needs {lattice.n_cells} cells > cap {DENSE_CELL_CAP}")
        self.kernel = kernel
        self.lattice = lattice
        self.diagonal_convention = "principal value (odd kernel)" if kernel.antisymmetric else "self-pairs excluded"
        if form is not None:
            self.form = np.asarray(form)
        elif kernel.name == "hilbert":
            n = lattice.n_cells
            col = hilbert_offset_form(np.arange(n), lattice.h)
            self.form = toeplitz(col, -col)
        elif kernel.name == "zero":
            self.form = np.zeros((lattice.n_cells, lattice.n_cells))
        else:
            self.form = _gauss_form(kernel, lattice, gauss_order)
        self._norm: NormEstimate | None = None

    def transpose(self) -> "DiscretizedOperator":
        return DiscretizedOperator(self.kernel, self.lattice, self.form.T)

    def pair(self, g: np.ndarray, f: np.ndarray):
        """``<g, T f>`` for raw cell arrays (no conjugation)."""
        return np.asarray(g).ravel() @ self.form @ np.asarray(f).ravel()

    def apply_array(self, f: np.ndarray) -> np.ndarray:
        out = self.form @ np.asarray(f).reshape(self.lattice.n_cells, -1)
        return (out / self.lattice.cell_measure).reshape(np.shape(f))

    def apply(self, f: LatticeFunction) -> LatticeFunction:
        return LatticeFunction(self.lattice, self.apply_array(f.values))

    def apply_adjoint_array(self, g: np.ndarray) -> np.ndarray:
        out = self.form.T @ np.asarray(g).reshape(self.lattice.n_cells, -1)
        return (out / self.lattice.cell_measure).reshape(np.shape(g))

    def t_one(self) -> LatticeFunction:
        """``T 1`` with ``1`` the indicator of the lattice domain."""
        return self.apply(LatticeFunction(self.lattice, np.ones(self.lattice.domain_shape)))

    def t_star_one(self) -> LatticeFunction:
        return LatticeFunction(self.lattice, self.apply_adjoint_array(np.ones(self.lattice.domain_shape)))

    def matrix_element(self, h_j: LatticeFunction, h_i: LatticeFunction):
        """``<h_J, T h_I>``."""
        return self.pair(h_j.values, h_i.values)

    def l2_norm(self, tol: float = 1e-8) -> NormEstimate:
        if self._norm is None:
            est = matrix_power_norm(self.form, tol=tol, maxiter=20000)
            if not est.converged:
                raise RuntimeError("power iteration did not converge")
            self._norm = NormEstimate(est.value / self.lattice.cell_measure, est.iterations, True)
        return self._norm

    def wbp_constant(self, system: ShiftedDyadicSystem | None = None) -> float:
        """``max_Q |<1_Q, T 1_Q>| / |Q|`` over the cubes of ``system`` (default: unshifted)."""
        if system is None:
            system = ShiftedDyadicSystem.standard(self.lattice, depth_above=0)
        tree = CubeTree(system)
        best = 0.0
        shape = self.lattice.domain_shape
        for level in tree.levels:
            lo = tree.level_lo(level).reshape(-1, self.lattice.d)
            side = 1 << (self.lattice.N - level)
            for corner in lo:
                ind = np.zeros(shape)
                rel = corner - np.array(self.lattice.domain_lo)
                ind[tuple(slice(int(v), int(v) + side) for v in rel)] = 1.0
                best = max(best, abs(self.pair(ind, ind)) / 2.0 ** (-level * self.lattice.d))
        return best


def _gauss_form(kernel: KernelSpec, lattice: Lattice, order: int) -> np.ndarray:
    """Tensor Gauss-Legendre form for general kernels, self-pairs excluded."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    nodes = (nodes + 1) / 2
    weights = weights / 2
    d = lattice.d
    cells = np.stack(np.meshgrid(*[lattice.domain_lo[a] + np.arange(lattice.domain_shape[a]) for a in range(d)], indexing="ij"), -1)
    cells = cells.reshape(-1, d).astype(float)
    qp = np.stack(np.meshgrid(*[nodes] * d, indexing="ij"), -1).reshape(-1, d)
    qw = np.prod(np.stack(np.meshgrid(*[weights] * d, indexing="ij"), -1).reshape(-1, d), axis=1)
    h = lattice.h
    pts = (cells[:, None, :] + qp[None]) * h  # (cells, q, d)
    vol = lattice.cell_measure
    n = len(cells)
    form = np.zeros((n, n), dtype=complex if kernel.d == 2 and kernel.order else float)
    for a in range(n):
        x = pts[a][:, None, None, :]  # (q,1,1,d)
        y = pts[None, :, :, :]  # (1,n,q,d)
        xa = x if d > 1 else x[..., 0]
        ya = y if d > 1 else y[..., 0]
        vals = kernel(xa, ya)  # (q, n, q)
        form[a] = np.einsum("i,inj,j->n", qw, vals, qw) * vol * vol
        form[a, a] = 0.0
    return form if np.iscomplexobj(form) and np.abs(form.imag).max() > 0 else form.real


# ---------------------------------------------------------------------------
# Beurling powers


def beurling_multiplier(size: int, n: int) -> np.ndarray:
    """``(conj(xi)/xi)**n`` on integer frequencies of a ``size x size`` grid, 0 at the origin."""
    if n == 0:
        raise ValueError("n must be nonzero")
    k = np.fft.fftfreq(size) * size
    xi = k[:, None] + 1j * k[None, :]
    safe = np.where(xi == 0, 1.0, xi)
    m = (np.conj(safe) / safe) ** n
    m[0, 0] = 0.0
    return m


def beurling_apply_array(n: int, f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=complex)
    if f.ndim != 2 or f.shape[0] != f.shape[1]:
        raise ValueError("Beurling multiplier needs a square two-dimensional grid")
    return np.fft.ifft2(beurling_multiplier(f.shape[0], n) * np.fft.fft2(f))


def beurling_apply(n: int, f: LatticeFunction) -> LatticeFunction:
    return LatticeFunction(f.lattice, beurling_apply_array(n, f.values))


def _tent(u: np.ndarray) -> np.ndarray:
    return np.clip(1.0 - np.abs(u), 0.0, None)


def _near_offset_integral(n: int, delta: tuple[int, int]) -> complex:
    """``int_{[-1,1]^2} K_n(u + delta) A(u) du`` for ``|delta|_inf <= 1``, as a principal value.

    Polar coordinates about the singular point ``v = 0`` with ``v = u + delta``.
    The angular mean of ``exp(-2 i n theta)`` vanishes, which removes the
    logarithmic divergence.
    """
    c = (-1) ** n * abs(n) / math.pi
    d1, d2 = delta
    a0 = _tent(-d1) * _tent(-d2)

    def radius(theta):
        ct, st = math.cos(theta), math.sin(theta)
        r = math.inf
        for comp, lo, hi in ((ct, d1 - 1, d1 + 1), (st, d2 - 1, d2 + 1)):
            if comp > 1e-15:
                r = min(r, hi / comp)
            elif comp < -1e-15:
                r = min(r, lo / comp)
        return max(r, 0.0)

    def radial(theta):
        R = radius(theta)
        if R <= 0:
            return 0.0
        ct, st = math.cos(theta), math.sin(theta)
        brk = [t for t in ((d1 / ct) if abs(ct) > 1e-15 else -1, (d2 / st) if abs(st) > 1e-15 else -1) if 0 < t < R]
        g = lambda r: (_tent(r * ct - d1) * _tent(r * st - d2) - a0) / r  # noqa: E731
        val, _ = integrate.quad(g, 0.0, R, points=brk or None, epsabs=1e-13, epsrel=1e-11, limit=200)
        return val + (a0 * math.log(R) if a0 else 0.0)

    corners = sorted(
        {math.atan2(sy + d2, sx + d1) % (2 * math.pi) for sx in (-1, 1) for sy in (-1, 1) if (sx + d1, sy + d2) != (0, 0)}
        | {0.0, math.pi / 2, math.pi, 3 * math.pi / 2}
    )
    total = 0.0 + 0.0j
    edges = corners + [2 * math.pi]
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi - lo < 1e-14:
            continue
        re, _ = integrate.quad(lambda t: math.cos(2 * n * t) * radial(t), lo, hi, epsabs=1e-12, epsrel=1e-10, limit=200)
        im, _ = integrate.quad(lambda t: -math.sin(2 * n * t) * radial(t), lo, hi, epsabs=1e-12, epsrel=1e-10, limit=200)
        total += re + 1j * im
    return c * total


def beurling_offset_table(n: int, radius: int, tol: float = 1e-8) -> np.ndarray:
    """Scale-free table ``I(p, q) = int_{[-1,1]^2} K_n(u + (p, q)) A(u) du`` for ``|p|,|q| <= radius``.

    ``A(u) = (1-|u1|)(1-|u2|)`` is the overlap area of two unit cells at offset
    ``u``; homogeneity of ``K_n`` makes the table independent of the cell size.
    Far offsets use Gauss-Legendre on the four smooth quadrants with order
    doubling until the change is below ``tol``.
    """
    size = 2 * radius + 1
    p = np.arange(-radius, radius + 1)
    P, Q = np.meshgrid(p, p, indexing="ij")
    table = np.zeros((size, size), dtype=complex)
    far = np.maximum(np.abs(P), np.abs(Q)) >= 2
    dp, dq = P[far].astype(float), Q[far].astype(float)

    def gauss(order):
        x, w = np.polynomial.legendre.leggauss(order)
        acc = np.zeros(len(dp), dtype=complex)
        for s1 in (-1, 1):
            for s2 in (-1, 1):
                u1 = s1 * (x + 1) / 2
                u2 = s2 * (x + 1) / 2
                w1 = w / 2
                U1, U2 = np.meshgrid(u1, u2, indexing="ij")
                Wt = np.outer(w1, w1) * _tent(U1) * _tent(U2)
                z = (U1[None] + dp[:, None, None]) + 1j * (U2[None] + dq[:, None, None])
                acc += (beurling_kernel(n, z) * Wt[None]).sum(axis=(1, 2))
        return acc

    order = 8
    prev = gauss(order)
    while True:
        order *= 2
        cur = gauss(order)
        if np.abs(cur - prev).max() <= tol * max(1e-300, float(np.abs(cur).max())) or order >= 256:
            break
        prev = cur
    table[far] = cur
    for a in range(-1, 2):
        for b in range(-1, 2):
            if abs(a) <= radius and abs(b) <= radius:
                if (a, b) == (0, 0) and n % 2:
                    table[radius, radius] = 0.0
                else:
                    table[radius + a, radius + b] = _near_offset_integral(n, (a, b))
    return table


def beurling_quadrature_apply(n: int, f: np.ndarray, table: np.ndarray | None = None) -> np.ndarray:
    """Cell averages of ``B^n f`` for piecewise constant ``f`` on a square grid, plane (non-periodic)."""
    f = np.asarray(f, dtype=complex)
    m = f.shape[0]
    if table is None:
        table = beurling_offset_table(n, m - 1)
    full = signal.fftconvolve(f, table, mode="full")
    r = (table.shape[0] - 1) // 2
    return full[r:r + m, r:r + m]


def gaussian_cross_check(n: int, size: int, width: float = 0.08) -> dict:
    """Compare multiplier and kernel-quadrature application of ``B^n`` on ``size x size`` cells of ``[-1/2, 1/2)^2``.

    The input is ``f = dbar^n u`` for a Gaussian ``u`` sampled at cell centres;
    the continuum answer is ``d^n u``, which decays fast, so the periodic
    multiplier and the plane quadrature both approximate it.  Returns the
    relative discrepancy after fitting a unimodular phase.
    """
    h = 1.0 / size
    c = (np.arange(size) + 0.5) * h - 0.5
    X, Y = np.meshgrid(c, c, indexing="ij")
    z = X + 1j * Y
    s2 = width**2
    u = np.exp(-np.abs(z) ** 2 / (2 * s2))
    if n > 0:
        f = (-z / (2 * s2)) ** n * u
        truth = (-np.conj(z) / (2 * s2)) ** n * u
    else:
        f = (-np.conj(z) / (2 * s2)) ** (-n) * u
        truth = (-z / (2 * s2)) ** (-n) * u
    a = beurling_apply_array(n, f)
    b = beurling_quadrature_apply(n, f)
    inner = np.vdot(b, a)
    phase = inner / abs(inner) if abs(inner) > 0 else 1.0
    disc = float(np.linalg.norm(a - phase * b) / np.linalg.norm(a))
    return {
        "n": n,
        "size": size,
        "discrepancy": disc,
        "phase": complex(phase),
        "multiplier_error": float(np.linalg.norm(a - truth) / np.linalg.norm(truth)),
        "quadrature_error": float(np.linalg.norm(b - truth) / np.linalg.norm(truth)),
    }


def estimate_cz_norms(n: int, alpha: float, n_angles: int = 48, n_radii: int = 64) -> tuple[float, float]:
    """Sampled suprema ``(C0, C_alpha)`` for the Beurling kernel ``K_n``.

    Homogeneity reduces to ``|z| = 1``; steps ``delta`` with ``|delta| < 1/2``
    are sampled on a deterministic polar grid (log-spaced radii).
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    theta = 2 * math.pi * (np.arange(n_angles) + 0.5) / n_angles
    z = np.exp(1j * theta)
    c0 = float((np.abs(beurling_kernel(n, z)) * np.abs(z) ** 2).max())
    rho = np.geomspace(1e-3, 0.499, n_radii)
    beta = 2 * math.pi * np.arange(n_angles) / n_angles
    step = rho[:, None] * np.exp(1j * beta[None, :])
    k0 = beurling_kernel(n, z)[:, None, None]
    k1 = beurling_kernel(n, z[:, None, None] + step[None])
    quot = np.abs(k0 - k1) / rho[None, :, None] ** alpha
    return c0, float(quot.max())


def fit_growth_exponent(ns, values) -> float:
    """Least-squares slope of ``log values`` against ``log |n|``."""
    x = np.log(np.abs(np.asarray(ns, dtype=float)))
    y = np.log(np.asarray(values, dtype=float))
    return float(np.polyfit(x, y, 1)[0])
