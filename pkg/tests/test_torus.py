import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from rangeint import torus as T


# ---------------------------------------------------------------- heat kernel

def test_heat_kernel_equilibrium():
    spec = T.TorusSpec(3.0)
    z = np.random.default_rng(0).uniform(-1.5, 1.5, size=(50, 2))
    assert np.max(np.abs(T.heat_kernel(100 * 9.0, z, spec) - 1 / 9.0)) < 1e-10


@given(st.floats(1e-3, 50.0), st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
def test_heat_kernel_even(t, a, b):
    spec = T.TorusSpec(4.0)
    z = np.array([a, b])
    assert T.heat_kernel(t, z, spec) == T.heat_kernel(t, -z, spec)


def test_heat_kernel_free_limit():
    side = 5.0
    t = 0.01 * side**2
    z = np.array([0.1 * side, 0.0])
    free = math.exp(-(z @ z) / (2 * t)) / (2 * math.pi * t)
    assert abs(float(T.heat_kernel(t, z, T.TorusSpec(side))) - free) < 1e-8


def test_heat_kernel_rejects_nonpositive_time():
    with pytest.raises(ValueError):
        T.heat_kernel(0.0, np.zeros(2), T.TorusSpec(1.0))


def test_branches_agree_at_switch():
    for side in (1.0, 4.0, 9.0):
        spec = T.TorusSpec(side)
        x = np.linspace(-side / 2, side / 2, 101)
        a = T.wrapped_images(spec.t_switch, x, side)
        b = T.wrapped_fourier(spec.t_switch, x, side)
        assert np.max(np.abs(a - b) / b) < 1e-10


def test_spec_validation():
    with pytest.raises(ValueError):
        T.TorusSpec(0.0)
    with pytest.raises(ValueError):
        T.TorusSpec(1.0, image_cutoff=0)


# ---------------------------------------------------------------- bridge occupation

def test_bridge_swap_symmetry():
    spec = T.TorusSpec(4.0)
    for y, z in [((0.3, 0.0), (0.0, 0.4)), ((1.1, -0.2), (0.5, 0.9)), ((-1.7, 1.9), (0.2, 0.1))]:
        a = T.bridge_occupation(np.array(y), np.array(z), 0.25, spec)
        b = T.bridge_occupation(np.array(z), np.array(y), 0.25, spec)
        assert abs(a - b) <= 1e-10 * abs(a)


def test_bridge_spot_value_dense_trapezoid():
    spec = T.TorusSpec(4.0)
    y, z, eps = np.array([0.3, 0.0]), np.array([0.0, 0.4]), 0.25
    got = T.bridge_occupation(y, z, eps, spec)
    s = np.linspace(0.0, eps, 400001)[1:-1]
    # free separable kernels: images are below 1e-30 at these times
    k = lambda t, x: np.exp(-x * x / (2 * t)) / np.sqrt(2 * np.pi * t)
    num = k(s, y[0]) * k(s, y[1]) * k(eps - s, z[0]) * k(eps - s, z[1])
    ref = np.trapezoid(np.concatenate([[0.0], num, [0.0]]), np.linspace(0.0, eps, 400001))
    ref /= float(T.heat_kernel(eps, z - y, spec))
    assert got == pytest.approx(ref, rel=1e-8)
    assert got == pytest.approx(0.30507404292717644, rel=1e-9)


def test_bridge_occupation_nonnegative_grid():
    spec = T.TorusSpec(3.0)
    x = T.cell_centres(24, 3.0)
    phi = T.bridge_occupation_grid(x, x, np.array([0.2, 0.1]), np.array([-0.4, 0.6]), 0.3, spec)
    assert np.all(phi >= 0)


def test_bridge_quadrature_failure_raises():
    spec = T.TorusSpec(4.0)
    with pytest.raises(T.QuadratureError) as exc:
        T.bridge_occupation_grid([0.0], [0.0], np.array([0.3, 0.0]), np.array([0.0, 0.4]),
                                 0.25, spec, rtol=1e-14, q0=2, q_max=4)
    assert "q" in exc.value.diagnostics


def test_bridge_mass_identity_small():
    spec = T.TorusSpec(2.0)
    m = T.bridge_mass(np.array([0.3, -0.2]), np.array([-0.5, 0.4]), 0.2, spec)
    assert m == pytest.approx(0.2, rel=1e-4)


def test_log_singularity_integral():
    # the subtracted E1 term integrates to delta over the torus
    side, delta = 2.0, 0.1
    x = T.cell_centres(512, side)
    val = T._log_singularity(x, x, np.array([0.0001, 0.0003]), delta, side)
    assert (side / 512) ** 2 * val.sum() == pytest.approx(delta, rel=1e-3)


# ---------------------------------------------------------------- phi functional

def test_pair_measure_weights():
    with pytest.raises(ValueError):
        T.PairMeasure.from_atoms([((0, 0), (0.1, 0), 0.7)])


def test_phi_empty_mass_is_zero():
    spec = T.TorusSpec(4.0)
    mu = T.PairMeasure.from_atoms([((0.5, 0.5), (0.6, 0.5), 1.0)])
    # eta tiny: both factors ~ 0
    assert T.phi_functional(mu, mu, 1e-12, 0.05, spec, resolution=32) < 1e-9


def test_phi_saturates_at_area():
    spec = T.TorusSpec(1.0)
    atoms = [((a, b), (a + 0.05, b), 1 / 16) for a in np.linspace(-0.375, 0.375, 4)
             for b in np.linspace(-0.375, 0.375, 4)]
    mu = T.PairMeasure.from_atoms(atoms)
    assert T.phi_functional(mu, mu, 1e6, 1.0, spec, resolution=32) == pytest.approx(1.0, rel=1e-6)


def test_phi_monotone_in_eta():
    spec = T.TorusSpec(4.0)
    mu1 = T.PairMeasure.from_atoms([((0.3, 0.0), (0.0, 0.4), 1.0)])
    mu2 = T.PairMeasure.from_atoms([((-0.2, 0.1), (0.4, 0.3), 0.5), ((1.0, 1.0), (1.2, 0.9), 0.5)])
    vals = [T.phi_functional(mu1, mu2, eta, 0.25, spec, resolution=48) for eta in (0.1, 0.5, 1, 4)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert all(0 <= v <= 16 for v in vals)


def test_phi_two_atoms_richardson():
    spec = T.TorusSpec(4.0)
    mu1 = T.PairMeasure.from_atoms([((0.3, 0.0), (0.0, 0.4), 1.0)])
    mu2 = T.PairMeasure.from_atoms([((-0.3, 0.2), (0.1, -0.2), 1.0)])
    coarse = T.phi_functional(mu1, mu2, 1.0, 0.25, spec, resolution=128)
    fine = T.phi_functional(mu1, mu2, 1.0, 0.25, spec, resolution=256)
    finer = T.phi_functional(mu1, mu2, 1.0, 0.25, spec, resolution=512)
    # refinements settle: successive differences shrink
    assert abs(finer - fine) < abs(fine - coarse) + 1e-12
    assert abs(finer - fine) < 1e-3 * finer


# ---------------------------------------------------------------- E1 and hitting

@pytest.mark.parametrize("a", [1e-8, 1e-3, 0.1, 0.5, 0.999, 1.0, 1.001, 2.0, 10.0, 50.0])
def test_exp1_against_scipy(a):
    assert T.exp1(a) == pytest.approx(special.exp1(a), rel=1e-12)


def test_exp1_branches_meet():
    below = T.exp1(1.0 - 1e-12)
    above = T.exp1(1.0)
    assert abs(below - above) < 1e-11
    # series oracle at exactly 1
    series = -T.EULER_GAMMA - sum((-1) ** k / (k * math.factorial(k)) for k in range(1, 40))
    assert T.exp1(1.0) == pytest.approx(series, rel=1e-12)


def test_hitting_unit_argument():
    n = 5000
    x = np.array([100.0, 0.0])  # |x|^2 / 2n = 1
    with pytest.warns(UserWarning):
        val = T.hitting_prob_asymptotic(x, n)
    assert val == pytest.approx(special.exp1(1.0) / math.log(n), rel=1e-12)


def test_hitting_monotone_in_distance():
    vals = [T.hitting_prob_asymptotic((r, 0), 10**5) for r in range(1, 300, 7)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_hitting_domain_errors():
    with pytest.raises(ValueError):
        T.hitting_prob_asymptotic((0, 0), 100)
    with pytest.raises(ValueError):
        T.hitting_prob_asymptotic((1, 0), 1)


def test_hitting_covariance_whitening():
    a = T.hitting_prob_asymptotic((6, 0), 10**4, covariance=((0.5, 0), (0, 0.5)))
    b = T.hitting_prob_asymptotic((6 * math.sqrt(2), 0), 10**4)
    assert a == pytest.approx(b, rel=1e-12)


def test_exp1_time_integral_representation():
    # E1(a) = int_0^1 u^{-1} exp(-a/u) du, the time-integral form of the hitting asymptotic
    a = 0.5
    val, _ = integrate.quad(lambda u: math.exp(-a / u) / u, 0.0, 1.0, epsabs=1e-14, epsrel=1e-13)
    assert abs(val - T.exp1(a)) < 1e-8
