"""Tail-probability estimation for J_n and the upper-bound diagnostics.

Every replica is driven by a seed derived from (seed_root, replica index), so
estimates do not depend on how replicas are spread across workers.
"""
from __future__ import annotations

import dataclasses
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import stats

from . import _kernels as K
from .lattice import (IncrementLaw, Scales, get_law, derive_seed, increments_for, RangeSet,
                      TorusPath, scales_for, torus_side_sites, unpack_keys, walk_streams)

Z95 = float(stats.norm.ppf(0.975))
Z95_ONE_SIDED = float(stats.norm.ppf(0.95))
BLOCK = 512


class Method(str, Enum):
    NAIVE = "naive"
    SPLITTING = "splitting"


class DegenerateStageError(RuntimeError):
    pass


@dataclass(frozen=True)
class TailEstimate:
    c: float
    n: int
    p_hat: float
    ci_low: float
    ci_high: float
    replicas: int
    method: Method
    seed_root: int
    successes: int | None = None
    resolution_floor: bool = False
    partial: bool = False
    law: str = "diagonal"
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.ci_low <= self.p_hat <= self.ci_high <= 1.0):
            raise ValueError(f"inconsistent interval {self.ci_low} <= {self.p_hat} <= {self.ci_high}")
        if self.replicas < 1:
            raise ValueError("replicas must be >= 1")

    @property
    def tau(self) -> float:
        return math.log(self.n)

    def to_dict(self) -> dict:
        d = {
            "c": self.c, "n": self.n, "p_hat": self.p_hat, "ci_low": self.ci_low,
            "ci_high": self.ci_high, "replicas": self.replicas, "method": self.method.value,
            "seed_root": self.seed_root, "successes": self.successes,
            "resolution_floor": self.resolution_floor, "partial": self.partial, "law": self.law,
        }
        if self.diagnostics:
            d["diagnostics"] = self.diagnostics
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TailEstimate":
        names = {f.name for f in dataclasses.fields(cls)}
        d = {k: v for k, v in d.items() if k in names}
        d["method"] = Method(d["method"])
        return cls(**d)


def wilson_interval(k: int, m: int, z: float = Z95) -> tuple[float, float]:
    if m <= 0:
        raise ValueError("need at least one trial")
    p = k / m
    denom = 1.0 + z * z / m
    centre = (p + z * z / (2 * m)) / denom
    half = z * math.sqrt(p * (1 - p) / m + z * z / (4 * m * m)) / denom
    # clamp so rounding never pushes a bound past the point estimate
    return max(0.0, min(centre - half, p)), min(1.0, max(centre + half, p))


def wilson_upper_one_sided(m: int, z: float = Z95_ONE_SIDED) -> float:
    """Upper 95% Wilson bound when no successes were seen."""
    return z * z / (m + z * z)


# --------------------------------------------------------------------------
# replica farm

def _threshold_count(c: float, scales: Scales) -> int:
    """Smallest integer J with J >= c * T_tau."""
    return max(0, math.ceil(c * scales.t_tau - 1e-9))


def replica_seed(seed_root: int, replica: int) -> int:
    return derive_seed(seed_root, replica)


def _block_hits(law_name, n, need, seed_root, start, stop):
    """Number of replicas in [start, stop) with J_n >= need."""
    law = get_law(law_name)
    dx, dy = law.dx, law.dy
    cap = K.table_capacity(n)
    t1 = np.zeros(cap, dtype=np.int64)
    t2 = np.zeros(cap, dtype=np.int64)
    hits = 0
    for r in range(start, stop):
        if need == 0:
            hits += 1
            continue
        g1, g2 = walk_streams(replica_seed(seed_root, r))
        t1[:] = 0
        if not K.walk_range_reaches(t1, law.sample(g1, n), dx, dy, need):
            continue  # J_n <= #R1, walk 2 is never needed
        t2[:] = 0
        _, j = K.walk_intersections_with(t1, t2, law.sample(g2, n), dx, dy)
        if j >= need:
            hits += 1
    return hits


def _block_values(law_name, n, seed_root, start, stop):
    """J_n for replicas in [start, stop)."""
    law = get_law(law_name)
    cap = K.table_capacity(n)
    t1 = np.zeros(cap, dtype=np.int64)
    t2 = np.zeros(cap, dtype=np.int64)
    out = np.empty(stop - start, dtype=np.int64)
    for i, r in enumerate(range(start, stop)):
        d1, d2 = increments_for(law, n, replica_seed(seed_root, r))
        t1[:] = 0
        t2[:] = 0
        K.walk_range_size(t1, d1, law.dx, law.dy)
        out[i] = K.walk_intersections_with(t1, t2, d2, law.dx, law.dy)[1]
    return out


def _blocks(replicas):
    return [(s, min(s + BLOCK, replicas)) for s in range(0, replicas, BLOCK)]


def _farm(fn, args_list, workers):
    if workers is None:
        workers = os.cpu_count() or 1
    if workers <= 1 or len(args_list) <= 1:
        return [fn(*a) for a in args_list]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*args_list)))


def sample_intersections(law, n: int, replicas: int, seed_root: int, workers: int = 1):
    """J_n for each replica, in replica order."""
    law = get_law(law)
    parts = _farm(_block_values, [(law.name.value, n, seed_root, a, b)
                                  for a, b in _blocks(replicas)], workers)
    return np.concatenate(parts)


def estimate_tail_naive(law, n: int, c: float, replicas: int, seed_root: int,
                        workers: int = 1, min_replicas: int = 100) -> TailEstimate:
    """Fraction of independent replicas with J_n >= c * T_tau, Wilson 95% interval."""
    law = get_law(law)
    if replicas < min_replicas:
        raise ValueError(f"replicas must be >= {min_replicas}")
    if c < 0:
        raise ValueError("c must be >= 0")
    scales = scales_for(n)
    need = _threshold_count(c, scales)
    hits = sum(_farm(_block_hits, [(law.name.value, n, need, seed_root, a, b)
                                   for a, b in _blocks(replicas)], workers))
    if hits == 0:
        return TailEstimate(c=c, n=n, p_hat=0.0, ci_low=0.0,
                            ci_high=wilson_upper_one_sided(replicas), replicas=replicas,
                            method=Method.NAIVE, seed_root=seed_root, successes=0,
                            resolution_floor=True, law=law.name.value)
    lo, hi = wilson_interval(hits, replicas)
    p = hits / replicas
    return TailEstimate(c=c, n=n, p_hat=p, ci_low=min(lo, p), ci_high=max(hi, p),
                        replicas=replicas, method=Method.NAIVE, seed_root=seed_root,
                        successes=hits, law=law.name.value)


# --------------------------------------------------------------------------
# adaptive multilevel splitting

@dataclass(frozen=True)
class SplittingConfig:
    """``levels`` is the fraction of replicas kept at each stage."""

    levels: float = 0.1
    max_stages: int = 20
    replicas_per_stage: int = 200
    checkpoint_times: tuple[int, ...] = ()
    runs: int = 8
    bootstrap: int = 2000

    def __post_init__(self):
        if not 0.0 < self.levels < 1.0:
            raise ValueError("levels (kept fraction) must lie in (0, 1)")
        cps = self.checkpoint_times
        if any(b <= a for a, b in zip(cps, cps[1:])):
            raise ValueError("checkpoint_times must be strictly increasing")
        if self.runs < 1 or self.max_stages < 1:
            raise ValueError("runs and max_stages must be >= 1")

    def validate_for(self, n: int):
        if self.checkpoint_times and self.checkpoint_times[-1] != n:
            raise ValueError(f"final checkpoint must equal n={n}")
        if self.replicas_per_stage < 2:
            raise DegenerateStageError(
                "degenerate stage: a single replica per stage cannot be split")

    @staticmethod
    def geometric_checkpoints(n: int, count: int = 6) -> tuple[int, ...]:
        """n * 2^(k - K) for k = 0..K, deduplicated and >= 1."""
        pts = sorted({max(1, n >> (count - 1 - k)) for k in range(count)})
        return tuple(pts)


@dataclass
class _Replica:
    segments: list  # [(start_time, seed)]
    j: int
    j_checkpoints: np.ndarray


class _PairRunner:
    """Replays replica lineages; one pair of hash tables reused throughout."""

    def __init__(self, law: IncrementLaw, n: int, checkpoints):
        self.law = law
        self.n = n
        cap = K.table_capacity(n)
        self.t1 = np.zeros(cap, dtype=np.int64)
        self.t2 = np.zeros(cap, dtype=np.int64)
        self.cps = np.asarray(checkpoints, dtype=np.int64)
        self.never = np.iinfo(np.int64).max

    def _streams(self, start, seed):
        return increments_for(self.law, self.n - start, seed)

    def run(self, segments, level=None, tail_seed=None):
        """Replay ``segments``; if ``level`` is given stop once J > level and
        finish the walk on a fresh segment seeded by ``tail_seed``."""
        self.t1[:] = 0
        self.t2[:] = 0
        state = np.zeros(K.STATE_LEN, dtype=np.int64)
        jcp = np.zeros(len(self.cps), dtype=np.int64)
        lvl = self.never if level is None else level
        kept = []
        stopped = False
        for idx, (start, seed) in enumerate(segments):
            end = segments[idx + 1][0] if idx + 1 < len(segments) else self.n
            d1, d2 = self._streams(start, seed)
            kept.append((start, seed))
            stopped = K.advance_pair(state, self.t1, self.t2, d1, d2, self.law.dx, self.law.dy,
                                     start, end, lvl, self.cps, jcp)
            if stopped:
                break
        if level is not None:
            if not stopped:
                raise RuntimeError("parent lineage never exceeded the splitting level")
            t_branch = int(state[K.T])
            if t_branch < self.n:
                kept.append((t_branch, tail_seed))
                d1, d2 = self._streams(t_branch, tail_seed)
                K.advance_pair(state, self.t1, self.t2, d1, d2, self.law.dx, self.law.dy,
                               t_branch, self.n, self.never, self.cps, jcp)
        return _Replica(segments=kept, j=int(state[K.J]), j_checkpoints=jcp)


def _splitting_run(law_name, n, need, cfg: SplittingConfig, seed_root, run_index):
    """One AMS run. Returns (estimate, stages, partial, diagnostics)."""
    law = get_law(law_name)
    cps = cfg.checkpoint_times or SplittingConfig.geometric_checkpoints(n)
    runner = _PairRunner(law, n, cps)
    m = cfg.replicas_per_stage
    reps = [runner.run([(0, derive_seed(seed_root, run_index, 0, i))]) for i in range(m)]
    weight = 1.0
    levels = []
    select = np.random.Generator(np.random.PCG64(derive_seed(seed_root, run_index, 1 << 20)))
    stage = 0
    partial = False
    while True:
        js = np.array([r.j for r in reps])
        frac_target = float(np.mean(js >= need))
        keep = max(1, int(math.floor(cfg.levels * m)))
        kth = np.sort(js)[m - keep]  # smallest value among the kept top fraction
        if frac_target >= cfg.levels or kth >= need:
            break
        if stage >= cfg.max_stages:
            partial = True
            break
        if js.min() == js.max():
            raise DegenerateStageError(
                f"degenerate stage {stage}: all {m} replicas have J = {js[0]}")
        # kill everything at or below the level; level below the max keeps survivors
        level = int(kth) - 1 if kth == js.max() else int(kth)
        level = min(level, int(js.max()) - 1)
        alive = np.nonzero(js > level)[0]
        dead = np.nonzero(js <= level)[0]
        weight *= len(alive) / m
        levels.append(level)
        parents = select.choice(alive, size=len(dead), replace=True)
        for i, p in zip(dead, parents):
            parent = reps[p]
            tail_seed = derive_seed(parent.segments[-1][1], stage + 1, int(i))
            reps[i] = runner.run(parent.segments, level=level, tail_seed=tail_seed)
        stage += 1
    js = np.array([r.j for r in reps])
    estimate = weight * float(np.mean(js >= need))
    diag = {
        "levels": levels,
        "stage_weight": weight,
        "final_fraction": float(np.mean(js >= need)),
        "checkpoints": list(map(int, cps)),
        "median_j_at_checkpoints": [float(v) for v in
                                    np.median(np.stack([r.j_checkpoints for r in reps]), axis=0)],
    }
    return estimate, stage, partial, diag


def estimate_tail_splitting(law, n: int, c: float, cfg: SplittingConfig, seed_root: int,
                            workers: int = 1) -> TailEstimate:
    """Adaptive multilevel splitting on the running intersection count.

    Each run keeps the top ``cfg.levels`` fraction of replicas by J, clones
    survivors at the step where their J first exceeded the stage level, and
    multiplies the per-stage survival fractions. The reported value is the
    mean over ``cfg.runs`` independent runs with a percentile-bootstrap interval.
    """
    law = get_law(law)
    if c <= 0:
        raise ValueError("c must be positive")
    cfg.validate_for(n)
    scales = scales_for(n)
    need = _threshold_count(c, scales)
    results = _farm(_splitting_run, [(law.name.value, n, need, cfg, seed_root, r)
                                     for r in range(cfg.runs)], workers)
    ests = np.array([r[0] for r in results])
    p_hat = float(ests.mean())
    partial = any(r[2] for r in results)
    if cfg.runs >= 2 and np.ptp(ests) > 0:
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed_root, 1 << 30)))
        r = len(ests)
        boots = ests[rng.integers(0, r, size=(cfg.bootstrap, r))].mean(axis=1)
        # expanded percentile bootstrap: widen for the small number of runs
        alpha = 2 * stats.norm.cdf(-math.sqrt(r / (r - 1)) * stats.t.ppf(0.975, r - 1))
        lo, hi = np.quantile(boots, [alpha / 2, 1 - alpha / 2])
    else:
        # single run or identical runs: binomial-style interval on the final stage
        m = cfg.replicas_per_stage * cfg.runs
        stages = max(r[1] for r in results)
        w = results[0][3]["stage_weight"]
        frac = p_hat / w if w > 0 else 0.0
        k = int(round(frac * m))
        flo, fhi = wilson_interval(k, m) if m > 0 else (0.0, 1.0)
        lo, hi = w * flo, w * fhi
        if stages:
            rel = math.sqrt(stages * (1 - cfg.levels) / (cfg.levels * m))
            lo, hi = lo * math.exp(-Z95 * rel), hi * math.exp(Z95 * rel)
    lo = float(min(max(lo, 0.0), p_hat))
    hi = float(max(min(hi, 1.0), p_hat))
    diagnostics = {
        "run_estimates": [float(e) for e in ests],
        "stages": [int(r[1]) for r in results],
        "runs": [r[3] for r in results],
    }
    return TailEstimate(c=c, n=n, p_hat=p_hat, ci_low=lo, ci_high=hi,
                        replicas=cfg.replicas_per_stage * cfg.runs, method=Method.SPLITTING,
                        seed_root=seed_root, resolution_floor=p_hat == 0.0, partial=partial,
                        law=law.name.value, diagnostics=diagnostics)


# --------------------------------------------------------------------------
# hitting probabilities

def _block_first_hits(law_name, n, targets, seed_root, start, stop):
    law = get_law(law_name)
    counts = np.zeros(len(targets), dtype=np.int64)
    for r in range(start, stop):
        g = np.random.Generator(np.random.PCG64(replica_seed(seed_root, r)))
        dirs = law.sample(g, n - 1)
        counts += K.first_hits(dirs, law.dx, law.dy, targets) > 0
    return counts


def estimate_hitting(law, n: int, targets, replicas: int, seed_root: int, workers: int = 1):
    """Monte Carlo P_0(H_x < n) for each lattice target x; returns (p, (lo, hi)) pairs."""
    law = get_law(law)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1, 2)
    parts = _farm(_block_first_hits, [(law.name.value, n, targets, seed_root, a, b)
                                      for a, b in _blocks(replicas)], workers)
    counts = np.sum(parts, axis=0)
    return [(k / replicas, wilson_interval(int(k), replicas)) for k in counts]


# --------------------------------------------------------------------------
# diagnostics

@dataclass(frozen=True)
class CrossingStat:
    eta: float
    count_per_direction: tuple[int, int]

    @property
    def total(self) -> int:
        return int(sum(self.count_per_direction))


def _lattice_path(path, scales: Scales) -> np.ndarray:
    if isinstance(path, TorusPath):
        return path.sites
    arr = np.asarray(path)
    if np.issubdtype(arr.dtype, np.integer):
        return arr.reshape(-1, 2).astype(np.int64)
    return np.rint(arr.reshape(-1, 2) * math.sqrt(scales.t_tau)).astype(np.int64)


def plane_index(coord: np.ndarray, eta: float, scales: Scales):
    """Index a of the hyperplane at eta*(a + 1/2) through each lattice coordinate, or None.

    Plane positions are rounded to the lattice: round(eta*(a + 1/2)*sqrt(T_tau)).
    """
    unit = eta * math.sqrt(scales.t_tau)
    coord = np.asarray(coord, dtype=np.int64)
    a = np.rint(coord / unit - 0.5).astype(np.int64)
    on = np.rint(unit * (a + 0.5)).astype(np.int64) == coord
    return a, on


def crossing_count(path, eta: float, scales: Scales) -> CrossingStat:
    """Successive hyperplane hits per direction for one path or a list of paths.

    A hit counts when the walk sits on a plane of the family and that plane
    differs from the plane of the previous counted hit; the first hit always counts.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    paths = path if isinstance(path, (list, tuple)) else [path]
    counts = [0, 0]
    for p in paths:
        lat = _lattice_path(p, scales)
        for k in range(2):
            a, on = plane_index(lat[:, k], eta, scales)
            seq = a[on]
            if len(seq) == 0:
                continue
            counts[k] += 1 + int(np.count_nonzero(seq[1:] != seq[:-1]))
    return CrossingStat(eta=eta, count_per_direction=(counts[0], counts[1]))


def confinement_check(paths, tau: float) -> bool:
    """True iff every position of every path satisfies |S_s| <= tau^2."""
    bound = tau * tau
    for p in paths:
        p = np.asarray(p, dtype=float).reshape(-1, 2)
        if len(p) and float(np.max(np.hypot(p[:, 0], p[:, 1]))) > bound:
            return False
    return True


def slab_count(box_side: float, eta: float) -> tuple[int, float]:
    """(m, eta') with m = N/eta rounded to the nearest positive integer and eta' = N/m."""
    m = max(1, int(round(box_side / eta)))
    return m, box_side / m


def slab_memberships(sites, box_side: float, eta: float, scales: Scales) -> np.ndarray:
    """Number of translated face-neighbourhoods Q^j containing each lattice site.

    The 2m sets are the eta/2-neighbourhoods of the vertical box faces shifted
    by j*eta (j < m) and likewise for the horizontal faces. Exact integer
    arithmetic on the lattice (side L sites per box).
    """
    m, _ = slab_count(box_side, eta)
    side = torus_side_sites(box_side, scales)
    sites = np.asarray(sites, dtype=np.int64).reshape(-1, 2)
    period = 2 * m * side
    total = np.zeros(len(sites), dtype=np.int64)
    for k in range(2):
        x2 = 2 * m * sites[:, k]
        for j in range(m):
            # face at L/2 -> m*L in doubled units; half-width eta/2 -> L
            rel = np.mod(x2 - m * side - 2 * j * side + side, period)
            total += rel < 2 * side
    return total


@dataclass(frozen=True)
class BoxOccupancy:
    box_side: float
    epsilon: float
    heavy_boxes: tuple[tuple[int, int], ...]
    per_box_range: dict

    def totals(self) -> tuple[int, int, int]:
        arr = np.array(list(self.per_box_range.values()) or [(0, 0, 0)])
        return tuple(int(v) for v in arr.sum(axis=0))


def box_index(sites, box_side: float, scales: Scales, shift=(0, 0)) -> np.ndarray:
    """Index z of the N-box Delta_N + N z containing each lattice site."""
    side = torus_side_sites(box_side, scales)
    sites = np.asarray(sites, dtype=np.int64).reshape(-1, 2) - np.asarray(shift, dtype=np.int64)
    return np.floor_divide(sites + side // 2, side)


def box_occupancy(r1: RangeSet, r2: RangeSet, box_side: float, epsilon: float,
                  scales: Scales, shift=(0, 0)) -> BoxOccupancy:
    """Per-box ranges and intersections; heavy boxes have a range above epsilon*T_tau."""
    if box_side <= 0 or epsilon <= 0:
        raise ValueError("box_side and epsilon must be positive")
    tally: dict = {}
    common = np.intersect1d(r1.keys, r2.keys, assume_unique=True)
    for slot, keys in ((0, r1.keys), (1, r2.keys), (2, common)):
        if len(keys) == 0:
            continue
        z = box_index(unpack_keys(keys), box_side, scales, shift)
        uniq, cnt = np.unique(z, axis=0, return_counts=True)
        for (a, b), c in zip(uniq, cnt):
            entry = tally.setdefault((int(a), int(b)), [0, 0, 0])
            entry[slot] = int(c)
    limit = epsilon * scales.t_tau
    heavy = tuple(sorted(z for z, (a, b, _) in tally.items() if a > limit or b > limit))
    return BoxOccupancy(box_side=box_side, epsilon=epsilon, heavy_boxes=heavy,
                        per_box_range={z: tuple(v) for z, v in sorted(tally.items())})


# --------------------------------------------------------------------------
# rate trend

@dataclass(frozen=True)
class TrendReport:
    slope: float
    slope_ci: tuple[float, float]
    intercept: float
    points: tuple  # (n, tau, -log p / tau)
    excluded: tuple  # n values dropped for p_hat == 0
    weighted: bool

    def to_dict(self) -> dict:
        return {"slope": self.slope, "slope_ci": list(self.slope_ci), "intercept": self.intercept,
                "points": [list(p) for p in self.points], "excluded": list(self.excluded),
                "weighted": self.weighted}


def rate_trend(estimates) -> TrendReport:
    """Weighted least-squares slope of -log p_hat against tau.

    Weights come from the log-width of each interval; the slope interval is
    +-1.96 standard errors.
    """
    usable = [e for e in estimates if e.p_hat > 0]
    excluded = tuple(e.n for e in estimates if e.p_hat <= 0)
    if len(usable) < 3:
        raise ValueError(f"need >= 3 estimates with p_hat > 0, got {len(usable)}")
    tau = np.array([math.log(e.n) for e in usable])
    y = np.array([-math.log(e.p_hat) for e in usable])
    with np.errstate(divide="ignore"):
        sig = np.array([(math.log(e.ci_high) - math.log(e.ci_low)) / (2 * Z95)
                        if e.ci_low > 0 else np.inf for e in usable])
    weighted = bool(np.all(np.isfinite(sig)) and np.all(sig > 0))
    w = 1.0 / sig**2 if weighted else np.ones_like(tau)
    sw = w.sum()
    tbar = (w * tau).sum() / sw
    ybar = (w * y).sum() / sw
    sxx = (w * (tau - tbar) ** 2).sum()
    slope = float((w * (tau - tbar) * (y - ybar)).sum() / sxx)
    intercept = float(ybar - slope * tbar)
    if weighted:
        se = math.sqrt(1.0 / sxx)
    else:
        resid = y - (intercept + slope * tau)
        dof = max(len(tau) - 2, 1)
        se = math.sqrt((resid**2).sum() / dof / sxx)
    points = tuple((e.n, t, v / t) for e, t, v in zip(usable, tau, y))
    return TrendReport(slope=slope, slope_ci=(slope - Z95 * se, slope + Z95 * se),
                       intercept=intercept, points=points, excluded=excluded, weighted=weighted)
