import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rangeint import lattice as L
from rangeint import mc, rate


def oracle_j(law, n, seed):
    """J_n by numpy cumulative sums and sorted-set intersection over the same substreams."""
    law = L.get_law(law)
    vec = np.array([v for v, _ in law.support], dtype=np.int64)
    sites = []
    for g in L.walk_streams(seed):
        pos = np.cumsum(vec[law.sample(g, n)], axis=0)
        sites.append(np.unique(pos[:, 0] * (1 << 24) + pos[:, 1]))
    return len(np.intersect1d(sites[0], sites[1], assume_unique=True))


# ---------------------------------------------------------------- wilson / estimate type

def test_wilson_matches_closed_form():
    lo, hi = mc.wilson_interval(30, 100)
    p, z, m = 0.3, mc.Z95, 100
    centre = (p + z * z / (2 * m)) / (1 + z * z / m)
    half = z * math.sqrt(p * (1 - p) / m + z * z / (4 * m * m)) / (1 + z * z / m)
    assert lo == pytest.approx(centre - half, rel=1e-14)
    assert hi == pytest.approx(centre + half, rel=1e-14)


@given(st.integers(1, 10**6), st.data())
def test_wilson_contains_estimate(m, data):
    k = data.draw(st.integers(0, m))
    lo, hi = mc.wilson_interval(k, m)
    assert 0 <= lo <= k / m <= hi <= 1


def test_tail_estimate_invariants():
    with pytest.raises(ValueError):
        mc.TailEstimate(c=1, n=10, p_hat=0.5, ci_low=0.6, ci_high=0.7, replicas=10,
                        method=mc.Method.NAIVE, seed_root=0)
    with pytest.raises(ValueError):
        mc.TailEstimate(c=1, n=10, p_hat=0.5, ci_low=0.4, ci_high=0.7, replicas=0,
                        method=mc.Method.NAIVE, seed_root=0)


# ---------------------------------------------------------------- naive

def test_naive_c_zero():
    e = mc.estimate_tail_naive("diagonal", 256, 0.0, 100, 1)
    assert e.p_hat == 1.0


def test_naive_above_cstar_hits_floor():
    e = mc.estimate_tail_naive("diagonal", 4096, 1.1 * rate.feasibility_sup(), 2000, 1)
    assert e.p_hat == 0.0 and e.resolution_floor
    assert e.ci_low == 0.0 and 0 < e.ci_high < 2e-3


def test_naive_preconditions():
    with pytest.raises(ValueError):
        mc.estimate_tail_naive("diagonal", 256, 0.1, 99, 1)
    with pytest.raises(ValueError):
        mc.estimate_tail_naive("diagonal", 256, -0.1, 200, 1)


def test_naive_matches_independent_recount():
    n, c, reps, root = 4096, 0.05, 10**4, 31337
    e = mc.estimate_tail_naive("diagonal", n, c, reps, root)
    need = c * L.scales_for(n).t_tau
    # the fast path skips walk 2 when walk 1 is too small; the oracle never does
    hits = sum(oracle_j("diagonal", n, L.derive_seed(root, r)) >= need for r in range(reps))
    assert e.successes == hits
    assert e.p_hat == hits / reps


def test_sample_intersections_matches_simulate_pair():
    js = mc.sample_intersections("simple", 700, 20, 5)
    ref = [L.simulate_pair("simple", 700, mc.replica_seed(5, r))[2].j_n for r in range(20)]
    assert list(js) == ref


def test_naive_worker_independence():
    a = mc.estimate_tail_naive("diagonal", 512, 0.3, 1500, 8, workers=1)
    b = mc.estimate_tail_naive("diagonal", 512, 0.3, 1500, 8, workers=4)
    c = mc.estimate_tail_naive("diagonal", 512, 0.3, 1500, 8, workers=16)
    assert a == b == c


def test_naive_monotone_in_c():
    ps = [mc.estimate_tail_naive("diagonal", 512, c, 600, 4).p_hat
          for c in (0.0, 0.1, 0.2, 0.4, 0.8, 1.6)]
    assert all(a >= b for a, b in zip(ps, ps[1:]))


# ---------------------------------------------------------------- splitting

def test_splitting_config_validation():
    with pytest.raises(ValueError):
        mc.SplittingConfig(levels=1.0)
    with pytest.raises(ValueError):
        mc.SplittingConfig(checkpoint_times=(4, 4, 8))
    with pytest.raises(ValueError):
        mc.SplittingConfig(checkpoint_times=(4, 8)).validate_for(16)
    assert mc.SplittingConfig.geometric_checkpoints(1024, 4) == (128, 256, 512, 1024)


def test_splitting_single_replica_is_degenerate():
    cfg = mc.SplittingConfig(replicas_per_stage=1)
    with pytest.raises(mc.DegenerateStageError, match="degenerate stage"):
        mc.estimate_tail_splitting("diagonal", 256, 0.5, cfg, 1)


def test_splitting_degenerate_all_equal():
    # at n = 2 the diagonal walks rarely meet; every replica has J = 0
    cfg = mc.SplittingConfig(replicas_per_stage=4, runs=1)
    with pytest.raises(mc.DegenerateStageError):
        mc.estimate_tail_splitting("diagonal", 3, 5.0, cfg, 0)


def test_splitting_no_stage_when_not_rare():
    n, c = 1024, 0.05
    cfg = mc.SplittingConfig(replicas_per_stage=500, runs=4)
    s = mc.estimate_tail_splitting("diagonal", n, c, cfg, 3)
    assert s.diagnostics["stages"] == [0, 0, 0, 0]
    e = mc.estimate_tail_naive("diagonal", n, c, 2000, 3)
    assert s.ci_low <= e.ci_high and e.ci_low <= s.ci_high


def test_splitting_against_large_naive():
    n, c = 1024, 1.2
    cfg = mc.SplittingConfig(levels=0.2, replicas_per_stage=100, runs=8)
    s = mc.estimate_tail_splitting("diagonal", n, c, cfg, 21)
    assert max(s.diagnostics["stages"]) >= 1
    e = mc.estimate_tail_naive("diagonal", n, c, 100 * cfg.replicas_per_stage, 22)
    assert s.ci_low <= e.ci_high and e.ci_low <= s.ci_high


def test_splitting_paired_overlap_rate():
    # naive resolves ~100+ successes; count overlaps across 20 paired trials
    n, c = 256, 1.0
    overlaps = 0
    for trial in range(20):
        e = mc.estimate_tail_naive("diagonal", n, c, 6000, 1000 + trial)
        assert e.successes >= 100
        cfg = mc.SplittingConfig(levels=0.2, replicas_per_stage=100, runs=8)
        s = mc.estimate_tail_splitting("diagonal", n, c, cfg, 5000 + trial)
        overlaps += s.ci_low <= e.ci_high and e.ci_low <= s.ci_high
    assert overlaps >= 19


def test_splitting_partial_flag():
    cfg = mc.SplittingConfig(levels=0.5, replicas_per_stage=50, runs=2, max_stages=1)
    s = mc.estimate_tail_splitting("diagonal", 512, 2.0, cfg, 9)
    assert s.partial


def test_splitting_worker_independence():
    cfg = mc.SplittingConfig(levels=0.2, replicas_per_stage=40, runs=3)
    a = mc.estimate_tail_splitting("diagonal", 512, 1.0, cfg, 4, workers=1)
    b = mc.estimate_tail_splitting("diagonal", 512, 1.0, cfg, 4, workers=3)
    assert a == b


def test_clone_replays_parent_prefix():
    law = L.DIAGONAL
    runner = mc._PairRunner(law, 600, (150, 300, 600))
    parent = runner.run([(0, 11)])
    level = parent.j // 2
    child = runner.run(parent.segments, level=level, tail_seed=99)
    t_branch = child.segments[-1][0]
    assert child.segments[0] == (0, 11) and child.segments[-1][1] == 99
    assert 0 < t_branch <= 600
    # replaying parent increments up to the branch, then the fresh segment, reproduces the child
    p1, p2 = L.increments_for(law, 600, 11)
    c1, c2 = L.increments_for(law, 600 - t_branch, 99)
    replay = L.simulate_from_increments(law, np.concatenate([p1[:t_branch], c1]),
                                        np.concatenate([p2[:t_branch], c2]))
    assert replay[2].j_n == child.j > level
    assert L.simulate_from_increments(law, p1, p2)[2].j_n == parent.j


# ---------------------------------------------------------------- hitting

def test_hitting_matches_direct_scan():
    targets = [(2, 0), (4, 4)]
    res = mc.estimate_hitting("diagonal", 200, targets, 300, 17)
    law = L.DIAGONAL
    hits = np.zeros(2)
    for r in range(300):
        g = np.random.Generator(np.random.PCG64(mc.replica_seed(17, r)))
        path = set(map(tuple, L.path_from_increments(law, law.sample(g, 199))))
        hits += [t in path for t in targets]
    assert [p for p, _ in res] == list(hits / 300)


# ---------------------------------------------------------------- crossings

def _straight(m_steps):
    return np.stack([np.arange(1, m_steps + 1), np.zeros(m_steps, dtype=np.int64)], axis=1)


def test_crossing_straight_path():
    s = L.scales_for(10**4)
    eta = 0.5
    unit = eta * math.sqrt(s.t_tau)
    m = 5
    # walk right until just past the m-th plane at round(unit * (a + 1/2))
    end = int(round(unit * (m - 1 + 0.5))) + 1
    stat = mc.crossing_count(_straight(end), eta, s)
    assert stat.count_per_direction == (m, 0)
    assert stat.total == m


def test_crossing_oscillation_counts_once():
    s = L.scales_for(10**4)
    eta = 0.5
    p = int(round(eta * math.sqrt(s.t_tau) * 0.5))
    xs = [p - 1, p, p + 1, p, p - 1, p, p + 1, p]
    path = np.array([[x, 0] for x in xs])
    assert mc.crossing_count(path, eta, s).count_per_direction == (1, 0)


def brute_crossings(path, eta, scales):
    unit = eta * math.sqrt(scales.t_tau)
    counts = []
    for k in range(2):
        last = None
        c = 0
        for pt in path:
            v = int(pt[k])
            a = round(v / unit - 0.5)
            hit = None
            for cand in (a - 1, a, a + 1):
                if round(unit * (cand + 0.5)) == v:
                    hit = cand
            if hit is not None and hit != last:
                c += 1
                last = hit
        counts.append(c)
    return tuple(counts)


def test_crossing_random_walk_brute_force():
    s = L.scales_for(10**4)
    p1, _ = L.walk_paths("diagonal", 10**4, 4)
    for eta in (0.05, 0.2, 0.7):
        assert mc.crossing_count(p1, eta, s).count_per_direction == brute_crossings(p1, eta, s)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**63), st.integers(2, 800), st.floats(0.02, 1.0))
def test_crossing_subadditive(seed, cut, eta):
    s = L.scales_for(1000)
    p, _ = L.walk_paths("simple", 1000, seed)
    cut = min(cut, 999)
    whole = mc.crossing_count(p, eta, s).count_per_direction
    a = mc.crossing_count(p[:cut], eta, s).count_per_direction
    b = mc.crossing_count(p[cut:], eta, s).count_per_direction
    assert all(w <= x + y + 1 for w, x, y in zip(whole, a, b))


def test_crossing_accepts_torus_and_scaled_paths():
    s = L.scales_for(2000)
    p, _ = L.walk_paths("diagonal", 2000, 8)
    ref = mc.crossing_count(p, 0.3, s)
    scaled = p / math.sqrt(s.t_tau)
    assert mc.crossing_count(scaled, 0.3, s) == ref
    with pytest.raises(ValueError):
        mc.crossing_count(p, 0.0, s)


# ---------------------------------------------------------------- confinement

def test_confinement_cases():
    tau = math.log(1000)
    assert mc.confinement_check([np.zeros((0, 2)), np.zeros((0, 2))], tau)
    far = tau * tau + 1
    assert not mc.confinement_check([np.array([[0.0, 0.0], [far, 0.0]]), np.zeros((0, 2))], tau)
    assert mc.confinement_check([np.array([[tau * tau, 0.0]])], tau)


def test_confinement_scan_oracle():
    n = 1000
    tau = L.scales_for(n).tau
    for seed in range(20):
        p1, p2 = L.walk_paths("diagonal", n, seed)
        worst = max(math.hypot(*pt) for pt in np.concatenate([p1, p2]).tolist())
        assert mc.confinement_check([p1, p2], tau) == (worst <= tau * tau)


# ---------------------------------------------------------------- slabs and boxes

@settings(max_examples=30, deadline=None)
@given(st.floats(0.5, 6.0), st.floats(0.05, 2.0), st.integers(0, 2**32))
def test_each_site_in_exactly_two_slabs(box, eta, seed):
    s = L.scales_for(5000)
    rng = np.random.default_rng(seed)
    sites = rng.integers(-10**4, 10**4, size=(200, 2))
    assert np.all(mc.slab_memberships(sites, box, eta, s) == 2)


def test_slab_count_rounds_to_divisor():
    m, eta = mc.slab_count(4.0, 0.3)
    assert m == 13 and eta == pytest.approx(4.0 / 13)


def test_box_occupancy_empty():
    s = L.scales_for(1000)
    e = L.RangeSet.from_sites(np.zeros((0, 2)))
    occ = mc.box_occupancy(e, e, 2.0, 0.1, s)
    assert occ.heavy_boxes == () and occ.totals() == (0, 0, 0)


def test_box_occupancy_single_heavy_box():
    s = L.scales_for(10**4)
    side = L.torus_side_sites(2.0, s)
    half = side // 2 - 1
    pts = [(x, y) for x in range(-half, half) for y in range(-half, half)]
    r1 = L.RangeSet.from_sites(pts)
    assert len(r1) > 0.01 * s.t_tau
    occ = mc.box_occupancy(r1, L.RangeSet.from_sites(np.zeros((0, 2))), 2.0, 0.01, s)
    assert occ.heavy_boxes == ((0, 0),)


def test_box_occupancy_binning_oracle():
    n = 5000
    s = L.scales_for(n)
    r1, r2, stat = L.simulate_pair("diagonal", n, 12)
    occ = mc.box_occupancy(r1, r2, 0.5, 0.05, s)
    side = L.torus_side_sites(0.5, s)
    tally = {}
    s1, s2 = r1.as_set(), r2.as_set()
    for slot, pts in enumerate((s1, s2, s1 & s2)):
        for x, y in pts:
            z = ((x + side // 2) // side, (y + side // 2) // side)
            tally.setdefault(z, [0, 0, 0])[slot] += 1
    assert occ.per_box_range == {z: tuple(v) for z, v in tally.items()}
    limit = 0.05 * s.t_tau
    assert set(occ.heavy_boxes) == {z for z, v in tally.items() if v[0] > limit or v[1] > limit}
    assert all(v[2] <= min(v[0], v[1]) for v in occ.per_box_range.values())
    assert occ.totals() == (len(r1), len(r2), stat.j_n)


# ---------------------------------------------------------------- rate trend

def _est(n, p, width=0.1):
    return mc.TailEstimate(c=0.1, n=n, p_hat=p, ci_low=p * (1 - width), ci_high=min(1, p * (1 + width)),
                           replicas=1000, method=mc.Method.NAIVE, seed_root=0)


def test_trend_exact_slope():
    ests = [_est(n, math.exp(-2 * math.log(n))) for n in (2**4, 2**6, 2**8, 2**10)]
    tr = mc.rate_trend(ests)
    assert tr.slope == pytest.approx(2.0, rel=1e-12)
    assert all(v == pytest.approx(2.0) for _, _, v in tr.points)


def test_trend_excludes_zero():
    ests = [_est(n, math.exp(-0.5 * math.log(n))) for n in (2**4, 2**6, 2**8)]
    ests.append(mc.TailEstimate(c=0.1, n=2**10, p_hat=0.0, ci_low=0.0, ci_high=0.01,
                                replicas=1000, method=mc.Method.NAIVE, seed_root=0))
    tr = mc.rate_trend(ests)
    assert tr.excluded == (2**10,)
    assert len(tr.points) == 3


def test_trend_needs_three_points():
    with pytest.raises(ValueError):
        mc.rate_trend([_est(16, 0.5), _est(64, 0.4)])


def test_trend_matches_regression_oracle():
    ests = [mc.estimate_tail_naive("diagonal", n, 0.1, 3000, 77) for n in (2**8, 2**10, 2**12, 2**13)]
    tr = mc.rate_trend(ests)
    tau = np.array([math.log(e.n) for e in ests])
    y = np.array([-math.log(e.p_hat) for e in ests])
    sig = np.array([(math.log(e.ci_high) - math.log(e.ci_low)) / (2 * mc.Z95) for e in ests])
    slope_np = np.polyfit(tau, y, 1, w=1 / sig)[0]
    assert tr.slope_ci[0] <= slope_np <= tr.slope_ci[1]
    assert tr.slope == pytest.approx(slope_np, rel=1e-9)
