"""Constrained Dirichlet-energy minimisation for the intersection rate functions.

The rate at threshold c is the infimum of the Dirichlet energy of phi over
unit-mass profiles whose intersection volume

    G(phi) = integral of (1 - exp(-alpha * phi^2))^2,   alpha = 2*pi,

is at least c. Two routes are provided: a 2D periodic grid solved by an
augmented Lagrangian around a preconditioned projected gradient descent, and
a radial reduction on a log-spaced 1D grid handed to SLSQP.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy import optimize

TWO_PI = 2.0 * math.pi


class Status(str, Enum):
    CONVERGED = "converged"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


# --------------------------------------------------------------------------
# grids

@dataclass(frozen=True, eq=False)
class FieldGrid:
    """Samples of phi on a uniform grid.

    ``domain`` is ``("torus", N)`` (periodic, side N) or ``("box", L)`` (zero
    outside the box). Derived quantities are computed from ``values`` on access.
    """

    values: np.ndarray
    spacing: float
    domain: tuple
    alpha: float = TWO_PI

    @property
    def periodic(self) -> bool:
        return self.domain[0] == "torus"

    @property
    def energy(self) -> float:
        return dirichlet_energy(self)

    @property
    def mass(self) -> float:
        return float(self.spacing**2 * np.sum(self.values**2))

    @property
    def constraint(self) -> float:
        return constraint_functional(self)

    @classmethod
    def torus(cls, values, side: float, alpha: float = TWO_PI):
        values = np.asarray(values, dtype=float)
        if values.shape[0] != values.shape[1]:
            raise ValueError("torus grids must be square")
        return cls(values=values, spacing=side / values.shape[0], domain=("torus", float(side)),
                   alpha=alpha)

    @classmethod
    def box(cls, values, side: float, alpha: float = TWO_PI):
        values = np.asarray(values, dtype=float)
        return cls(values=values, spacing=side / values.shape[0], domain=("box", float(side)),
                   alpha=alpha)


def torus_coords(npts: int, side: float) -> np.ndarray:
    """Cell-centre-free node coordinates -N/2 + i*h, i = 0..npts-1."""
    h = side / npts
    return -side / 2.0 + h * np.arange(npts)


def _face_differences(v: np.ndarray, periodic: bool):
    if periodic:
        return np.roll(v, -1, axis=0) - v, np.roll(v, -1, axis=1) - v
    p = np.pad(v, 1)
    return np.diff(p, axis=0)[:, 1:-1], np.diff(p, axis=1)[1:-1, :]


def dirichlet_energy(phi: FieldGrid) -> float:
    """Sum over grid faces of h^2 * ((phi_b - phi_a) / h)^2.

    The difference across each face is the central difference at the face
    midpoint; faces to the zero exterior are included for box domains.
    """
    v = np.asarray(phi.values, dtype=float)
    if min(v.shape) < 3:
        raise ValueError("grid needs at least 3 points per axis")
    gx, gy = _face_differences(v, phi.periodic)
    return float(np.sum(gx**2) + np.sum(gy**2))


def constraint_functional(phi: FieldGrid) -> float:
    """Riemann sum of (1 - exp(-alpha * phi^2))^2."""
    v = np.asarray(phi.values, dtype=float)
    return float(phi.spacing**2 * np.sum(np.expm1(-phi.alpha * v**2) ** 2))


# --------------------------------------------------------------------------
# feasibility

def _plateau_ratio(u):
    return np.expm1(-u) ** 2 / u


def plateau_optimum() -> tuple[float, float]:
    """(u*, max_u (1 - e^{-u})^2 / u)."""
    res = optimize.minimize_scalar(lambda u: -_plateau_ratio(u), bracket=(0.5, 1.2, 3.0),
                                   tol=1e-12)
    return float(res.x), float(-res.fun)


def feasibility_sup(domain=None, alpha: float = TWO_PI) -> float:
    """Supremum of G over unit-mass profiles.

    ``domain`` may be None (the plane), ``("torus", N)`` (plateau area capped at
    N^2), or a FieldGrid-like ``("grid", npts, h)`` where plateaus consist of a
    whole number of cells.
    """
    u_star, ratio = plateau_optimum()
    if domain is None or domain[0] == "plane":
        return alpha * ratio
    if domain[0] == "torus":
        area = float(domain[1]) ** 2
        u = max(u_star, alpha / area)
        return alpha * float(_plateau_ratio(u))
    if domain[0] == "grid":
        npts, h = int(domain[1]), float(domain[2])
        cell = h * h
        k_best = alpha / (u_star * cell)
        ks = np.unique(np.clip(np.array([math.floor(k_best), math.ceil(k_best)]), 1, npts * npts))
        areas = ks * cell
        return float(np.max(areas * (-np.expm1(-alpha / areas)) ** 2))
    raise ValueError(f"unknown domain {domain!r}")


def plateau_grid(npts: int, side: float, alpha: float = TWO_PI) -> FieldGrid:
    """Unit-mass indicator-like profile whose level maximises G, centred on the grid."""
    u_star, _ = plateau_optimum()
    h = side / npts
    k = max(1, int(round(alpha / (u_star * h * h))))
    x = torus_coords(npts, side)
    r2 = x[:, None] ** 2 + x[None, :] ** 2
    order = np.argsort(r2, axis=None, kind="stable")
    v = np.zeros(npts * npts)
    v[order[:k]] = 1.0
    v = v.reshape(npts, npts)
    v /= math.sqrt(h * h * np.sum(v**2))
    return FieldGrid.torus(v, side, alpha)


# --------------------------------------------------------------------------
# 2D torus route

@dataclass(frozen=True)
class SolveOptions:
    grid_sizes: tuple[int, ...] = (64, 128)
    penalty_init: float = 10.0
    penalty_growth: float = 4.0
    kkt_tol: float = 1e-6
    value_rtol: float = 1e-8
    constraint_tol: float = 1e-7
    max_outer: int = 40
    max_inner: int = 4000
    stall_window: int = 50
    init: str = "gaussian"
    margin: float = 0.0
    plane_rtol: float = 5e-3
    plane_sides: tuple[float, ...] = (8.0, 16.0, 32.0, 64.0)
    plane_spacing: float | None = None
    radial_points: int = 300

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.grid_sizes, self.grid_sizes[1:])):
            raise ValueError("grid_sizes must be strictly increasing")


@dataclass
class RateResult:
    c: float
    value: float
    minimizer: FieldGrid | None
    status: Status
    kkt_residual: float
    grid_history: list = field(default_factory=list)
    constraint_value: float = float("nan")
    multiplier: float = 0.0
    sup_measured: float = float("nan")
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "c": self.c,
            "value": self.value,
            "status": self.status.value,
            "kkt_residual": self.kkt_residual,
            "grid_history": [list(map(float, p)) for p in self.grid_history],
            "constraint_value": self.constraint_value,
            "multiplier": self.multiplier,
            "sup_measured": self.sup_measured,
            **{k: v for k, v in self.extra.items()},
        }


def _laplacian_periodic(v):
    return (np.roll(v, 1, 0) + np.roll(v, -1, 0) + np.roll(v, 1, 1) + np.roll(v, -1, 1) - 4.0 * v)


def energy_grad(v, periodic=True):
    """(E, dE/dv) for E = sum of squared face differences."""
    if periodic:
        gx, gy = _face_differences(v, True)
        return float(np.sum(gx**2) + np.sum(gy**2)), -2.0 * _laplacian_periodic(v)
    p = np.pad(v, 1)
    lap = p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * v
    gx, gy = _face_differences(v, False)
    return float(np.sum(gx**2) + np.sum(gy**2)), -2.0 * lap


def constraint_grad(v, h, alpha=TWO_PI):
    """(G, dG/dv)."""
    e = np.exp(-alpha * v * v)
    one_m = -np.expm1(-alpha * v * v)
    return float(h * h * np.sum(one_m**2)), 4.0 * alpha * h * h * v * e * one_m


def augmented_lagrangian(v, h, c, lam, mu, alpha=TWO_PI, periodic=True):
    """PHR augmented Lagrangian for the constraint G >= c and its gradient.

    L = E + (max(0, lam + mu*(c - G))^2 - lam^2) / (2*mu)
    """
    e, ge = energy_grad(v, periodic)
    g, gg = constraint_grad(v, h, alpha)
    shifted = max(0.0, lam + mu * (c - g))
    val = e + (shifted**2 - lam**2) / (2.0 * mu)
    return val, ge - shifted * gg


class _Preconditioner:
    """Inverse of the shifted periodic 5-point operator, applied by FFT."""

    def __init__(self, npts, shift):
        k = np.fft.fftfreq(npts) * TWO_PI
        sym = 2.0 - 2.0 * np.cos(k)
        self.inv = 1.0 / (2.0 * (sym[:, None] + sym[None, :]) + shift)

    def __call__(self, g):
        return np.real(np.fft.ifft2(np.fft.fft2(g) * self.inv))


def _normalize(v, h):
    return v / math.sqrt(h * h * np.sum(v * v))


def _gaussian_init(npts, side, c, alpha):
    x = torus_coords(npts, side)
    r2 = x[:, None] ** 2 + x[None, :] ** 2
    h = side / npts

    def bump(s):
        return _normalize(np.exp(-r2 / (4.0 * s * s)), h)

    def g_of(s):
        return constraint_grad(bump(s), h, alpha)[0]

    widths = np.geomspace(0.5 * h, side / 2.0, 80)
    gs = np.array([g_of(s) for s in widths])
    i_max = int(np.argmax(gs))
    if gs[i_max] <= c:
        return bump(widths[i_max])
    # widest bump still meeting the constraint
    above = np.nonzero(gs[i_max:] >= c)[0]
    j = i_max + above[-1]
    if j + 1 < len(widths):
        s = optimize.brentq(lambda s: g_of(s) - c, widths[j], widths[j + 1], xtol=1e-10 * side)
    else:
        s = widths[j]
    return bump(s)


def _recentre(v):
    """Roll the field so its maximum sits at the grid centre."""
    npts = v.shape[0]
    i, j = np.unravel_index(np.argmax(v), v.shape)
    return np.roll(np.roll(v, npts // 2 - i, axis=0), npts // 2 - j, axis=1)


def _gradient_floor(npts, side, prec):
    """Preconditioned gradient norm of the unit-mass lowest Fourier mode, times 1e-2.

    Keeps relative stationarity tests meaningful when the optimum is flat
    (tiny c, where E and its gradient both vanish).
    """
    h = side / npts
    mode = _normalize(np.cos(TWO_PI * torus_coords(npts, side) / side)[:, None]
                      + np.zeros((1, npts)), h)
    ge = energy_grad(mode)[1]
    return 1e-2 * math.sqrt(float(np.sum(ge * prec(ge))))


def _kkt(v, h, c, lam, alpha, prec, floor=0.0):
    """Relative tangent-gradient norm of E - lam*G plus constraint slack terms."""
    _, ge = energy_grad(v)
    g, gg = constraint_grad(v, h, alpha)
    grad = ge - lam * gg
    # project out the mass direction
    grad_t = grad - (np.sum(grad * v) / np.sum(v * v)) * v
    scale = (math.sqrt(np.sum(ge * prec(ge))) + lam * math.sqrt(np.sum(gg * prec(gg)))
             + floor + 1e-300)
    stat = math.sqrt(max(np.sum(grad_t * prec(grad_t)), 0.0)) / scale
    viol = max(0.0, c - g) / max(c, 1e-300)
    comp = abs(lam * (g - c)) / max(c * lam, 1e-300) if lam > 0 else 0.0
    return max(stat, viol, comp if g - c > 1e-8 * c else 0.0)


def _inner(v, h, c, lam, mu, alpha, opts, prec, floor=0.0):
    """Preconditioned projected gradient descent on the unit-mass sphere.

    Stops once the tangent gradient is small relative to the full gradient
    (both in the preconditioner metric), or after ``opts.max_inner`` steps.
    Returns the field, the iteration count and the value trace.
    """
    val, grad = augmented_lagrangian(v, h, c, lam, mu, alpha)
    step = 1.0
    history = [val]
    it = 0
    for it in range(1, opts.max_inner + 1):
        pg = prec(grad)
        pv = prec(v)
        d = pg - (np.sum(v * pg) / np.sum(v * pv)) * pv
        slope = float(np.sum(grad * d))
        ref = max(math.sqrt(max(np.sum(grad * pg), 0.0)), floor, 1e-300)
        if slope <= 0.0 or math.sqrt(slope) / ref < 0.1 * opts.kkt_tol:
            break
        while True:
            trial = _normalize(v - step * d, h)
            tval, tgrad = augmented_lagrangian(trial, h, c, lam, mu, alpha)
            if tval <= val - 1e-4 * step * slope or step < 1e-12:
                break
            step *= 0.5
        v, val, grad = trial, tval, tgrad
        history.append(val)
        step = min(step * 2.0, 1e3)
    return v, it, history


def _solve_on_grid(npts, side, c, opts, alpha, v0=None):
    h = side / npts
    prec = _Preconditioner(npts, shift=(TWO_PI * h / side) ** 2)
    floor = _gradient_floor(npts, side, prec)
    e_floor = 1e-6 * (TWO_PI / side) ** 2  # lowest-mode energy scale
    v = _gaussian_init(npts, side, c, alpha) if v0 is None else _normalize(v0, h)
    lam, mu = 0.0, opts.penalty_init
    g_prev = constraint_grad(v, h, alpha)[0]
    viol_prev = max(0.0, c - g_prev)
    status = Status.MAX_ITER
    kkt = float("inf")
    inner_total = 0
    trace = []
    for _ in range(opts.max_outer):
        v, its, hist = _inner(v, h, c, lam, mu, alpha, opts, prec, floor)
        inner_total += its
        trace.extend(hist)
        g = constraint_grad(v, h, alpha)[0]
        lam = max(0.0, lam + mu * (c - g))
        viol = max(0.0, c - g)
        kkt = _kkt(v, h, c, lam, alpha, prec, floor)
        window = trace[-opts.stall_window - 1:]
        flat = abs(window[0] - window[-1]) <= opts.value_rtol * max(abs(window[-1]), e_floor)
        feasible = viol <= opts.constraint_tol * max(c, 1.0)
        if kkt < opts.kkt_tol and feasible and flat:
            status = Status.CONVERGED
            break
        if not feasible and viol > 0.25 * viol_prev:
            mu *= opts.penalty_growth
        viol_prev = viol
    v = _recentre(v)
    phi = FieldGrid.torus(v, side, alpha)
    return phi, status, kkt, lam, inner_total


def solve_rate_torus(side: float, c: float, opts: SolveOptions | None = None,
                     alpha: float = TWO_PI) -> RateResult:
    """I_N(c) on the torus of side N, refined along ``opts.grid_sizes``."""
    opts = opts or SolveOptions()
    if c <= 0:
        raise ValueError("c must be positive")
    history = []
    v_prev = None
    result = None
    for npts in opts.grid_sizes:
        h = side / npts
        sup = feasibility_sup(("grid", npts, h), alpha)
        if c > sup - opts.margin:
            return RateResult(c=c, value=float("inf"), minimizer=None, status=Status.INFEASIBLE,
                              kkt_residual=float("nan"), grid_history=history,
                              sup_measured=sup)
        v0 = None if v_prev is None else _resample(v_prev, npts)
        phi, status, kkt, lam, its = _solve_on_grid(npts, side, c, opts, alpha, v0)
        value = phi.energy
        history.append((h, value))
        v_prev = phi.values
        result = RateResult(c=c, value=value, minimizer=phi, status=status, kkt_residual=kkt,
                            grid_history=list(history), constraint_value=phi.constraint,
                            multiplier=lam, sup_measured=sup,
                            extra={"side": side, "inner_iterations": its})
    return result


def _resample(v, npts):
    """Spectral (Fourier) interpolation of a periodic field onto npts^2 nodes."""
    m = v.shape[0]
    if m == npts:
        return v.copy()
    f = np.fft.fftshift(np.fft.fft2(v))
    out = np.zeros((npts, npts), dtype=complex)
    k = min(m, npts)
    a0, b0 = (m - k) // 2, (npts - k) // 2
    out[b0:b0 + k, b0:b0 + k] = f[a0:a0 + k, a0:a0 + k]
    res = np.real(np.fft.ifft2(np.fft.ifftshift(out))) * (npts / m) ** 2
    return np.maximum(res, 0.0)


# --------------------------------------------------------------------------
# radial route

@dataclass(frozen=True)
class RadialGrid:
    r: np.ndarray
    weights: np.ndarray  # cell areas / (2*pi)
    face_r: np.ndarray  # midpoints between nodes, and the outer boundary
    face_dr: np.ndarray

    @classmethod
    def logspaced(cls, r_min, r_max, m):
        r = np.concatenate([[0.0], np.geomspace(r_min, r_max, m - 1)])
        mid = 0.5 * (r[1:] + r[:-1])
        edges = np.concatenate([[0.0], mid, [r_max]])
        weights = 0.5 * (edges[1:] ** 2 - edges[:-1] ** 2)
        # faces between consecutive nodes plus the face to the zero boundary at r_max*(1+q)
        q = r[-1] / r[-2]
        r_out = r[-1] * q
        nodes = np.concatenate([r, [r_out]])
        face_dr = np.diff(nodes)
        face_r = 0.5 * (nodes[1:] + nodes[:-1])
        return cls(r=r, weights=weights, face_r=face_r, face_dr=face_dr)


def radial_functionals(phi, grid: RadialGrid, alpha=TWO_PI):
    """(energy, mass, G) and their gradients for a radial profile."""
    ext = np.append(phi, 0.0)
    d = np.diff(ext)
    coef = TWO_PI * grid.face_r / grid.face_dr
    e = float(np.sum(coef * d * d))
    ge = np.zeros_like(phi)
    ge -= 2.0 * coef * d
    ge[1:] += 2.0 * coef[:-1] * d[:-1]
    w = TWO_PI * grid.weights
    m = float(np.sum(w * phi * phi))
    gm = 2.0 * w * phi
    one_m = -np.expm1(-alpha * phi * phi)
    g = float(np.sum(w * one_m**2))
    gg = 4.0 * alpha * w * phi * np.exp(-alpha * phi * phi) * one_m
    return (e, ge), (m, gm), (g, gg)


def _radial_init(grid, c, alpha):
    def profile(s):
        p = np.exp(-grid.r**2 / (4 * s * s))
        return p / math.sqrt(np.sum(TWO_PI * grid.weights * p * p))

    def g_of(s):
        return radial_functionals(profile(s), grid, alpha)[2][0]

    widths = np.geomspace(grid.r[1], grid.r[-1] / 6.0, 120)
    gs = np.array([g_of(s) for s in widths])
    i_max = int(np.argmax(gs))
    above = np.nonzero(gs[i_max:] >= c)[0]
    if len(above) == 0:
        return profile(widths[i_max])
    return profile(widths[i_max + above[-1]])


def solve_rate_radial(c: float, r_max: float | None = None, m: int = 300,
                      alpha: float = TWO_PI, tail_tol: float = 1e-8, max_doublings: int = 8):
    """Radially symmetric route for I_2(c), far-field cutoff doubled until the tail is negligible."""
    if c <= 0:
        raise ValueError("c must be positive")
    cstar = feasibility_sup(None, alpha)
    if c >= cstar:
        return RateResult(c=c, value=float("inf"), minimizer=None, status=Status.INFEASIBLE,
                          kkt_residual=float("nan"), sup_measured=cstar)
    if r_max is None:
        # width of the small-c profile grows like c^{-1/2}
        r_max = max(8.0, 40.0 / math.sqrt(c))
    history = []
    res = None
    for _ in range(max_doublings):
        grid = RadialGrid.logspaced(1e-3 * min(1.0, r_max / 100), r_max, m)
        res = _radial_slsqp(grid, c, alpha)
        phi = res.extra["profile"]
        w = TWO_PI * grid.weights
        tail = float(np.sum((w * phi * phi)[grid.r > r_max / 2]))
        history.append((r_max, res.value))
        res.extra["tail_mass"] = tail
        res.extra["r_max"] = r_max
        if tail < tail_tol:
            break
        r_max *= 2.0
    res.grid_history = history
    return res


def _radial_slsqp(grid, c, alpha):
    x0 = _radial_init(grid, c, alpha)
    scale = 1.0

    def fun(x):
        (e, ge), _, _ = radial_functionals(x, grid, alpha)
        return e * scale, ge * scale

    cons = [
        {"type": "eq", "fun": lambda x: radial_functionals(x, grid, alpha)[1][0] - 1.0,
         "jac": lambda x: radial_functionals(x, grid, alpha)[1][1]},
        {"type": "ineq", "fun": lambda x: radial_functionals(x, grid, alpha)[2][0] - c,
         "jac": lambda x: radial_functionals(x, grid, alpha)[2][1]},
    ]
    sol = optimize.minimize(fun, x0, jac=True, method="SLSQP", constraints=cons,
                            bounds=[(0.0, None)] * len(x0),
                            options={"maxiter": 2000, "ftol": 1e-14})
    x = sol.x
    (e, ge), (m, gm), (g, gg) = radial_functionals(x, grid, alpha)
    # multipliers from least squares on the stationarity condition
    a = np.stack([gm, gg], axis=1)
    coef, *_ = np.linalg.lstsq(a, ge, rcond=None)
    lam = max(coef[1], 0.0)
    resid = np.linalg.norm(ge - a @ coef) / max(np.linalg.norm(ge), 1e-300)
    ok = sol.success and abs(m - 1.0) < 1e-8 and g >= c - 1e-6
    status = Status.CONVERGED if ok else Status.MAX_ITER
    return RateResult(c=c, value=e, minimizer=None, status=status, kkt_residual=float(resid),
                      constraint_value=g, multiplier=float(lam),
                      extra={"profile": x, "r": grid.r, "message": str(sol.message)})


# --------------------------------------------------------------------------
# plane: both routes

def solve_rate_plane(c: float, opts: SolveOptions | None = None, alpha: float = TWO_PI,
                     torus_route: bool = True) -> RateResult:
    """I_2(c): the radial value, with the growing-torus sequence as a cross-check."""
    opts = opts or SolveOptions()
    cstar = feasibility_sup(None, alpha)
    if c >= cstar - opts.margin:
        return RateResult(c=c, value=float("inf"), minimizer=None, status=Status.INFEASIBLE,
                          kkt_residual=float("nan"), sup_measured=cstar)
    radial = solve_rate_radial(c, m=opts.radial_points, alpha=alpha)
    radial.extra.pop("profile", None)
    radial.extra.pop("r", None)
    radial.extra["route"] = "radial"
    if not torus_route:
        return radial
    sequence = []
    prev = None
    torus_value = float("nan")
    for side in opts.plane_sides:
        h = opts.plane_spacing or _default_spacing(c, cstar)
        npts = int(2 ** math.ceil(math.log2(side / h)))
        t = solve_rate_torus(side, c, replace(opts, grid_sizes=(npts,)), alpha)
        sequence.append((side, t.value, t.status.value))
        if t.status is Status.CONVERGED and prev is not None and \
                abs(t.value - prev) <= opts.plane_rtol * abs(t.value):
            torus_value = t.value
            break
        prev = t.value if t.status is Status.CONVERGED else None
    else:
        torus_value = sequence[-1][1] if sequence else float("nan")
    radial.extra["torus_sequence"] = sequence
    radial.extra["torus_value"] = torus_value
    if not math.isfinite(torus_value) or \
            abs(torus_value - radial.value) > 0.05 * abs(radial.value):
        radial.status = Status.MAX_ITER
    return radial


def _default_spacing(c, cstar):
    # sharper profiles near c* need finer grids
    return 0.25 if c < 0.3 * cstar else (0.1 if c < 0.7 * cstar else 0.05)
