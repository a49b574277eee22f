"""Planar lattice walks, their ranges, and the intersection count J_n."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _kernels as K


class LawName(str, Enum):
    DIAGONAL = "diagonal"
    SIMPLE = "simple"


@dataclass(frozen=True)
class IncrementLaw:
    """Step distribution on Z^2.

    ``density`` is the number of reachable lattice sites per unit area after
    whitening by the covariance (the diagonal law reaches one parity class of
    Z^2 and has identity covariance, so 1/2; the simple walk reaches all of Z^2
    with covariance I/2, so also 1/2). Intersection counts scale with it, so a
    threshold c for this law corresponds to c / density in the identity-
    covariance, full-lattice rate function.
    """

    name: LawName
    support: tuple[tuple[tuple[int, int], float], ...]
    covariance: tuple[tuple[float, float], tuple[float, float]]
    moment_note: str
    density: float

    def __post_init__(self):
        probs = np.array([p for _, p in self.support], dtype=float)
        vecs = np.array([v for v, _ in self.support], dtype=float)
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"{self.name}: probabilities must be >= 0 and sum to 1")
        if np.any(probs @ vecs != 0.0):
            raise ValueError(f"{self.name}: increments must have zero mean")
        cov = (vecs * probs[:, None]).T @ vecs
        if np.max(np.abs(cov - np.asarray(self.covariance))) > 1e-12:
            raise ValueError(f"{self.name}: covariance field disagrees with support")

    @property
    def dx(self) -> np.ndarray:
        return np.array([v[0] for v, _ in self.support], dtype=np.int64)

    @property
    def dy(self) -> np.ndarray:
        return np.array([v[1] for v, _ in self.support], dtype=np.int64)

    @property
    def variance(self) -> float:
        """Per-coordinate variance (both shipped laws are isotropic)."""
        return float(self.covariance[0][0])

    def mahalanobis_sq(self, x) -> float:
        """x^T Sigma^{-1} x, the squared displacement in whitened units."""
        x = np.asarray(x, dtype=float)
        return float(x @ np.linalg.solve(np.asarray(self.covariance), x))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw ``size`` support indices as uint8."""
        probs = [p for _, p in self.support]
        m = len(probs)
        if m & (m - 1) == 0 and all(p == probs[0] for p in probs):
            return rng.integers(0, m, size=size, dtype=np.uint8)
        return rng.choice(m, size=size, p=probs).astype(np.uint8)


_BOUNDED = "bounded increments: E[H(|X|)] < inf for every admissible H"

DIAGONAL = IncrementLaw(
    name=LawName.DIAGONAL,
    support=(((1, 1), 0.25), ((1, -1), 0.25), ((-1, 1), 0.25), ((-1, -1), 0.25)),
    covariance=((1.0, 0.0), (0.0, 1.0)),
    moment_note=_BOUNDED,
    density=0.5,
)

SIMPLE = IncrementLaw(
    name=LawName.SIMPLE,
    support=(((1, 0), 0.25), ((-1, 0), 0.25), ((0, 1), 0.25), ((0, -1), 0.25)),
    covariance=((0.5, 0.0), (0.0, 0.5)),
    moment_note=_BOUNDED,
    density=0.5,
)

LAWS = {LawName.DIAGONAL.value: DIAGONAL, LawName.SIMPLE.value: SIMPLE}


def get_law(name) -> IncrementLaw:
    if isinstance(name, IncrementLaw):
        return name
    try:
        return LAWS[LawName(name).value]
    except ValueError:
        raise ValueError(f"unknown increment law {name!r}; choose from {sorted(LAWS)}") from None


@dataclass(frozen=True)
class Scales:
    n: int
    tau: float
    t_tau: float


def scales_for(n: int) -> Scales:
    """tau = log n and T_tau = n / log n."""
    if n < 2:
        raise ValueError(
            f"n={n}: tau would be <= ln 2; scale undefined for the asymptotic regime"
        )
    tau = math.log(n)
    return Scales(n=int(n), tau=tau, t_tau=n / tau)


# --------------------------------------------------------------------------
# seeds and substreams

def derive_seed(root: int, *keys: int) -> int:
    """Deterministic 64-bit child seed of ``root`` at spawn path ``keys``."""
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def walk_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Two disjoint generators for walk 1 and walk 2."""
    ss = np.random.SeedSequence(int(seed))
    a, b = ss.spawn(2)
    return np.random.Generator(np.random.PCG64(a)), np.random.Generator(np.random.PCG64(b))


def increments_for(law: IncrementLaw, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Support-index streams of length n for both walks of ``seed``."""
    g1, g2 = walk_streams(seed)
    return law.sample(g1, n), law.sample(g2, n)


# --------------------------------------------------------------------------
# ranges

@dataclass(frozen=True, eq=False)
class RangeSet:
    """Visited sites of one walk, stored as packed int64 keys (sorted, unique).

    ``lattice`` tags the lattice the sites live on: ``("plane",)`` for Z^2 or
    ``("torus", L)`` for the periodic lattice of side L sites.
    """

    keys: np.ndarray
    walk_id: int
    steps_consumed: int
    lattice: tuple = ("plane",)

    def __post_init__(self):
        self.keys.setflags(write=False)

    def __len__(self) -> int:
        return int(self.keys.shape[0])

    def __contains__(self, site) -> bool:
        k = pack_sites(np.asarray([site]))[0]
        i = np.searchsorted(self.keys, k)
        return bool(i < len(self.keys) and self.keys[i] == k)

    @property
    def sites(self) -> np.ndarray:
        return unpack_keys(self.keys)

    def as_set(self) -> set[tuple[int, int]]:
        return {(int(x), int(y)) for x, y in self.sites}

    @classmethod
    def from_sites(cls, sites, walk_id=1, steps_consumed=None, lattice=("plane",)):
        sites = np.asarray(sites, dtype=np.int64).reshape(-1, 2)
        keys = np.unique(pack_sites(sites))
        steps = len(sites) if steps_consumed is None else steps_consumed
        return cls(keys=keys, walk_id=walk_id, steps_consumed=steps, lattice=lattice)


def pack_sites(sites: np.ndarray) -> np.ndarray:
    sites = np.asarray(sites, dtype=np.int64).reshape(-1, 2)
    return ((sites[:, 0] + (1 << 31)) << 32) | (sites[:, 1] + (1 << 31))


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    # keys use the sign bit, so shift logically
    x = (keys.view(np.uint64) >> np.uint64(32)).astype(np.int64) - (1 << 31)
    y = (keys & 0xFFFFFFFF) - (1 << 31)
    return np.stack([x, y], axis=1)


@dataclass(frozen=True)
class IntersectionStat:
    j_n: int
    n: int
    per_checkpoint: tuple[tuple[int, int], ...] = field(default_factory=tuple)


def intersection_count(r1: RangeSet, r2: RangeSet) -> int:
    """#(R1 ∩ R2), probing the smaller set against a hash table of the larger."""
    if r1.lattice != r2.lattice:
        raise ValueError(f"ranges live on different lattices: {r1.lattice} vs {r2.lattice}")
    small, big = (r1, r2) if len(r1) <= len(r2) else (r2, r1)
    if len(small) == 0:
        return 0
    table = K.build_set(big.keys, K.table_capacity(len(big)))
    return int(K.count_common(small.keys, table))


def _pair_from_dirs(law, dirs1, dirs2, checkpoints=()):
    n = len(dirs1)
    cap = K.table_capacity(n)
    t1 = np.zeros(cap, dtype=np.int64)
    t2 = np.zeros(cap, dtype=np.int64)
    state = np.zeros(K.STATE_LEN, dtype=np.int64)
    cps = np.asarray(sorted(checkpoints), dtype=np.int64)
    jcp = np.zeros(len(cps), dtype=np.int64)
    K.advance_pair(state, t1, t2, dirs1, dirs2, law.dx, law.dy, 0, n,
                   np.iinfo(np.int64).max, cps, jcp)
    return state, t1, t2, cps, jcp


def simulate_from_increments(law: IncrementLaw, dirs1, dirs2, checkpoints=()):
    """Ranges and J_n for two walks driven by explicit support-index streams."""
    law = get_law(law)
    dirs1 = np.ascontiguousarray(dirs1, dtype=np.uint8)
    dirs2 = np.ascontiguousarray(dirs2, dtype=np.uint8)
    if dirs1.shape != dirs2.shape:
        raise ValueError("increment streams must have equal length")
    n = len(dirs1)
    state, t1, t2, cps, jcp = _pair_from_dirs(law, dirs1, dirs2, checkpoints)
    r1 = RangeSet(np.sort(K.table_keys(t1)), 1, n)
    r2 = RangeSet(np.sort(K.table_keys(t2)), 2, n)
    stat = IntersectionStat(
        j_n=int(state[K.J]), n=n,
        per_checkpoint=tuple((int(c), int(j)) for c, j in zip(cps, jcp)),
    )
    return r1, r2, stat


def simulate_pair(law, n: int, seed: int, checkpoints=()):
    """Run two independent walks of n steps from the origin.

    Walk i is driven by the i-th spawned child of ``seed``; the output is a
    pure function of (law, n, seed).
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    law = get_law(law)
    d1, d2 = increments_for(law, n, seed)
    return simulate_from_increments(law, d1, d2, checkpoints)


def walk_paths(law, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Positions S_1..S_n of both walks for ``seed`` (same streams as simulate_pair)."""
    law = get_law(law)
    d1, d2 = increments_for(law, n, seed)
    return K.cumulative_path(d1, law.dx, law.dy), K.cumulative_path(d2, law.dx, law.dy)


def path_from_increments(law, dirs) -> np.ndarray:
    law = get_law(law)
    return K.cumulative_path(np.ascontiguousarray(dirs, dtype=np.uint8), law.dx, law.dy)


# --------------------------------------------------------------------------
# torus projection

@dataclass(frozen=True)
class TorusPath:
    """Path projected onto the discrete torus.

    ``sites`` are integer lattice coordinates reduced into
    [-L/2, L/2)^2 with L = round(N * sqrt(T_tau)); ``coords`` are the same
    points in continuum units (divided by sqrt(T_tau)).
    """

    sites: np.ndarray
    coords: np.ndarray
    side_sites: int
    box_side: float
    spacing: float

    @property
    def lattice(self) -> tuple:
        return ("torus", self.side_sites)

    def range_set(self, walk_id=1) -> RangeSet:
        return RangeSet.from_sites(self.sites, walk_id=walk_id,
                                   steps_consumed=len(self.sites), lattice=self.lattice)


def torus_side_sites(box_side: float, scales: Scales) -> int:
    side = int(round(box_side * math.sqrt(scales.t_tau)))
    if side < 1:
        raise ValueError("torus has fewer than one site per side")
    return side


def wrap_sites(sites, side_sites: int) -> np.ndarray:
    sites = np.asarray(sites, dtype=np.int64)
    half = side_sites // 2
    return np.mod(sites + half, side_sites) - half


def project_torus(path, box_side: float, scales: Scales) -> TorusPath:
    """Project lattice positions onto the torus of continuum side ``box_side``."""
    if box_side <= 0:
        raise ValueError("box_side must be positive")
    side = torus_side_sites(box_side, scales)
    spacing = 1.0 / math.sqrt(scales.t_tau)
    sites = wrap_sites(np.asarray(path, dtype=np.int64).reshape(-1, 2), side)
    return TorusPath(sites=sites, coords=sites * spacing, side_sites=side,
                     box_side=side * spacing, spacing=spacing)


def project_range(r: RangeSet, box_side: float, scales: Scales) -> RangeSet:
    """Image of a planar range on the torus."""
    side = torus_side_sites(box_side, scales)
    return RangeSet.from_sites(wrap_sites(r.sites, side), walk_id=r.walk_id,
                               steps_consumed=r.steps_consumed, lattice=("torus", side))
