"""Heat kernel on the flat torus and the functionals built from it.

Conventions: standard Brownian motion, p_t(x) = exp(-|x|^2 / 2t) / (2 pi t) in
the plane, wrapped onto [-N/2, N/2)^2.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

EULER_GAMMA = 0.5772156649015329
_TAIL_LOG = math.log(1e14)
_FOURIER_LOG = math.log(1e16)


class QuadratureError(ArithmeticError):
    """Time quadrature failed to reach the requested agreement."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class TorusSpec:
    side: float
    image_cutoff: int = 1
    fourier_threshold: float | None = None

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError("torus side must be positive")
        if self.image_cutoff < 1:
            raise ValueError("image_cutoff must be >= 1")

    @property
    def t_switch(self) -> float:
        if self.fourier_threshold is not None:
            return self.fourier_threshold
        return self.side**2 / (2.0 * math.pi)


@dataclass(frozen=True)
class PairMeasure:
    """Finite atomic measure on pairs (y, z) of torus points."""

    y: np.ndarray
    z: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("pair-measure weights must be nonnegative and sum to 1")

    @classmethod
    def from_atoms(cls, atoms):
        """``atoms``: iterable of (y, z, weight)."""
        ys, zs, ws = zip(*atoms)
        return cls(np.asarray(ys, dtype=float).reshape(-1, 2),
                   np.asarray(zs, dtype=float).reshape(-1, 2), np.asarray(ws, dtype=float))


# --------------------------------------------------------------------------
# 1D wrapped Gaussian and the 2D kernel

def image_cutoff(t: float, side: float, minimum: int = 1) -> int:
    """Images per side so the discarded Gaussian tail is below 1e-14."""
    k = math.ceil(math.sqrt(2.0 * t * (_TAIL_LOG + 2.0)) / side + 0.5) + 1
    return max(minimum, k)


def fourier_cutoff(t: float, side: float) -> int:
    return max(1, math.ceil(math.sqrt(_FOURIER_LOG * side**2 / (2.0 * math.pi**2 * t))) + 1)


def wrapped_images(t: float, x, side: float, min_images: int = 1) -> np.ndarray:
    # |x| keeps the sum bitwise even in x
    x = np.abs(np.asarray(x, dtype=float))
    kmax = image_cutoff(t, side, min_images)
    shifts = side * np.arange(-kmax, kmax + 1)
    d = x[..., None] + shifts
    return np.exp(-d * d / (2.0 * t)).sum(axis=-1) / math.sqrt(2.0 * math.pi * t)


def wrapped_fourier(t: float, x, side: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    m = np.arange(1, fourier_cutoff(t, side) + 1)
    decay = np.exp(-2.0 * math.pi**2 * m * m * t / side**2)
    terms = decay * np.cos(2.0 * math.pi * m * x[..., None] / side)
    return (1.0 + 2.0 * terms.sum(axis=-1)) / side


def wrapped_1d(t: float, x, spec: TorusSpec) -> np.ndarray:
    if t <= 0:
        raise ValueError(f"heat kernel needs t > 0, got {t}")
    if t <= spec.t_switch:
        return wrapped_images(t, x, spec.side, spec.image_cutoff)
    return wrapped_fourier(t, x, spec.side)


def reduce_torus(z, side: float) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    # reduce |z| and restore the sign so that reduce(-z) == -reduce(z) bitwise
    a = np.abs(z)
    return np.copysign(a - side * np.floor(a / side + 0.5), z)


def heat_kernel(t: float, z, spec: TorusSpec) -> np.ndarray:
    """p_t^{(N)}(z) for z of shape (..., 2)."""
    z = reduce_torus(z, spec.side)
    return wrapped_1d(t, z[..., 0], spec) * wrapped_1d(t, z[..., 1], spec)


# --------------------------------------------------------------------------
# Brownian-bridge occupation density

def _gauss_legendre(q):
    x, w = np.polynomial.legendre.leggauss(q)
    return 0.5 * (x + 1.0), 0.5 * w


def _half_nodes(half: float, r_min: float, q: int):
    """Nodes/weights on [0, half], graded geometrically toward 0.

    Panels [half/2^(j+1), half/2^j] down to a level where p_s at distance
    r_min is negligible; the innermost panel uses s = a * sigma^2.
    """
    u, w = _gauss_legendre(q)
    floor = max(r_min * r_min / 80.0, half * 2.0**-60)
    levels = max(0, math.ceil(math.log2(half / floor)))
    nodes, weights = [], []
    hi = half
    for _ in range(levels):
        lo = hi / 2.0
        nodes.append(lo + (hi - lo) * u)
        weights.append((hi - lo) * w)
        hi = lo
    # innermost panel [0, hi]: s = hi * sigma^2, ds = 2 hi sigma dsigma
    nodes.append(hi * u * u)
    weights.append(2.0 * hi * u * w)
    return np.concatenate(nodes), np.concatenate(weights)


def bridge_nodes(eps: float, r_start: float, r_end: float, q: int):
    """Time nodes on [0, eps] graded toward both endpoints.

    Returns (s, eps - s, weights); the complement is carried separately so
    nodes next to eps keep full relative precision.
    """
    s_left, w_left = _half_nodes(eps / 2.0, r_start, q)
    s_right, w_right = _half_nodes(eps / 2.0, r_end, q)
    s = np.concatenate([s_left, eps - s_right])
    rest = np.concatenate([eps - s_left, s_right])
    return s, rest, np.concatenate([w_left, w_right])


def _bridge_on_axes(x1, x2, y, z, eps, spec, q):
    """phi_eps(y - x, z - x) on the tensor grid x1 x x2 for fixed node density q."""
    pts = np.stack(np.meshgrid(x1, x2, indexing="ij"), axis=-1)
    r_y = np.sqrt(np.min(np.sum(reduce_torus(pts - y, spec.side) ** 2, axis=-1)))
    r_z = np.sqrt(np.min(np.sum(reduce_torus(pts - z, spec.side) ** 2, axis=-1)))
    s, rest, w = bridge_nodes(eps, max(r_y, 1e-12), max(r_z, 1e-12), q)
    a1 = np.stack([wrapped_1d(si, x1 - y[0], spec) * wrapped_1d(ri, z[0] - x1, spec)
                   for si, ri in zip(s, rest)])
    a2 = np.stack([wrapped_1d(si, x2 - y[1], spec) * wrapped_1d(ri, z[1] - x2, spec)
                   for si, ri in zip(s, rest)])
    num = (a1 * w[:, None]).T @ a2
    return num / float(heat_kernel(eps, np.asarray(z) - np.asarray(y), spec))


def bridge_occupation_grid(x1, x2, y, z, eps: float, spec: TorusSpec, rtol: float = 1e-6,
                           q0: int = 16, q_max: int = 256):
    """phi_eps(y - x, z - x) for every x on the tensor grid ``x1 x x2``.

    The time integral uses Gauss-Legendre panels graded toward both ends; the
    node count per panel doubles until successive values agree to ``rtol``.
    Grid points that coincide with y or z get +inf.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    prev = _bridge_on_axes(x1, x2, y, z, eps, spec, q0)
    q = q0
    while True:
        q *= 2
        cur = _bridge_on_axes(x1, x2, y, z, eps, spec, q)
        diff = np.abs(cur - prev)
        tol = rtol * np.abs(cur) + 1e-12 * eps / spec.side**2
        if np.all(diff <= tol):
            break
        if q >= q_max:
            worst = float(np.max(diff / (np.abs(cur) + 1e-300)))
            raise QuadratureError(
                f"bridge quadrature not converged at {q} nodes per panel "
                f"(worst relative change {worst:.3g})",
                {"q": q, "worst_relative_change": worst, "eps": eps},
            )
        prev = cur
    pts_y = reduce_torus(np.stack(np.meshgrid(x1, x2, indexing="ij"), -1) - y, spec.side)
    pts_z = reduce_torus(np.stack(np.meshgrid(x1, x2, indexing="ij"), -1) - z, spec.side)
    hit = np.all(pts_y == 0, axis=-1) | np.all(pts_z == 0, axis=-1)
    cur[hit] = np.inf
    return np.maximum(cur, 0.0)


def bridge_occupation(y, z, eps: float, spec: TorusSpec, rtol: float = 1e-6) -> float:
    """phi_eps(y, z): expected occupation density at 0 of a bridge from y to z in time eps."""
    y = reduce_torus(y, spec.side)
    z = reduce_torus(z, spec.side)
    if not np.any(y) or not np.any(z):
        return float("inf")
    # phi_eps(y, z) = value at x = 0 of phi_eps(y - x, z - x)
    return float(bridge_occupation_grid([0.0], [0.0], y, z, eps, spec, rtol)[0, 0])


def cell_centres(resolution: int, side: float) -> np.ndarray:
    h = side / resolution
    return -side / 2.0 + h * (np.arange(resolution) + 0.5)


def _log_singularity(x1, x2, centre, delta, side):
    """(1/2pi) * sum over images of E1(|x - centre|^2 / 2 delta); torus integral = delta."""
    from scipy.special import exp1

    pts = np.stack(np.meshgrid(x1, x2, indexing="ij"), axis=-1) - centre
    out = np.zeros(pts.shape[:2])
    k = image_cutoff(delta, side)
    for i in range(-k, k + 1):
        for j in range(-k, k + 1):
            d2 = (pts[..., 0] + i * side) ** 2 + (pts[..., 1] + j * side) ** 2
            out += exp1(d2 / (2.0 * delta))
    return out / (2.0 * math.pi)


def bridge_mass(y, z, eps: float, spec: TorusSpec, resolution: int | None = None,
                delta: float | None = None) -> float:
    """Torus integral over x of phi_eps(y - x, z - x).

    The two logarithmic singularities (at x = y and x = z) are subtracted
    with exactly integrable E1 terms before the cell-centred Riemann sum.
    The default grid keeps at least 64 cells per unit length.
    """
    if resolution is None:
        resolution = max(256, 64 * math.ceil(spec.side))
    delta = eps / 2.0 if delta is None else delta
    x = cell_centres(resolution, spec.side)
    h = spec.side / resolution
    phi = bridge_occupation_grid(x, x, y, z, eps, spec)
    sing = _log_singularity(x, x, np.asarray(y, float), delta, spec.side) + \
        _log_singularity(x, x, np.asarray(z, float), delta, spec.side)
    return float(h * h * np.sum(phi - sing) + 2.0 * delta)


def phi_functional(mu1: PairMeasure, mu2: PairMeasure, eta: float, eps: float,
                   spec: TorusSpec, resolution: int = 128) -> float:
    """Phi_eta(mu1, mu2) by a cell-centred Riemann sum over the torus."""
    if eta <= 0 or eps <= 0:
        raise ValueError("eta and eps must be positive")
    x = cell_centres(resolution, spec.side)
    h = spec.side / resolution
    factors = []
    for mu in (mu1, mu2):
        occ = np.zeros((resolution, resolution))
        for y, z, w in zip(mu.y, mu.z, mu.weights):
            if w > 0:
                occ += w * bridge_occupation_grid(x, x, y, z, eps, spec)
        factors.append(-np.expm1(-eta * 2.0 * math.pi * occ))
    return float(h * h * np.sum(factors[0] * factors[1]))


# --------------------------------------------------------------------------
# exponential integral and the planar hitting asymptotic

def exp1(a: float) -> float:
    """E1(a) = int_a^inf e^{-u}/u du for a > 0.

    Power series below 1, modified Lentz continued fraction at and above 1.
    """
    a = float(a)
    if a <= 0:
        raise ValueError("E1 needs a positive argument")
    if a < 1.0:
        total = 0.0
        term = 1.0
        k = 1
        while True:
            term *= -a / k
            contrib = term / k
            total += contrib
            if abs(contrib) < 1e-17 * abs(total) or k > 200:
                break
            k += 1
        return -EULER_GAMMA - math.log(a) - total
    tiny = 1e-300
    b = a + 1.0
    c = 1.0 / tiny
    d = 1.0 / b
    f = d
    for i in range(1, 10000):
        an = -float(i * i)
        b += 2.0
        d = 1.0 / (an * d + b)
        c = b + an / c
        delta = c * d
        f *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return f * math.exp(-a)


def hitting_prob_asymptotic(x, n: int, covariance=None) -> float:
    """E1(|x|^2 / 2n) / log n, the leading-order P_0(H_x < n) for a planar walk.

    With a non-identity ``covariance`` the squared norm is taken in the
    whitened metric x^T Sigma^{-1} x.
    """
    x = np.asarray(x, dtype=float)
    if covariance is None:
        r2 = float(x @ x)
    else:
        r2 = float(x @ np.linalg.solve(np.asarray(covariance, dtype=float), x))
    if r2 == 0.0:
        raise ValueError("x = 0: the walk starts at the target; the formula diverges")
    if n < 2:
        raise ValueError("n must be >= 2")
    if r2 > n:
        warnings.warn(f"|x|^2 = {r2:g} exceeds n = {n}; asymptotic outside its window",
                      stacklevel=2)
    return exp1(r2 / (2.0 * n)) / math.log(n)
