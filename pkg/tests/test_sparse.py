"""Sparse bump potentials: propagation, envelopes, thresholds, stability."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jacobilab.core import single_step, solve_forward
from jacobilab.errors import (
    InsufficientDataError,
    InvalidArgumentError,
    UnsupportedModelError,
)
from jacobilab.sparse import (
    SparseSpec,
    beta_lower_bound,
    block_log_lnorms,
    block_matrices,
    deterministic_comparison_exponent,
    envelope_exponents,
    eta_upper_bound,
    find_subordinate_angle,
    perturbed_sparse_experiment,
    s_threshold,
    sparse_propagate,
)
from jacobilab.subordinacy import l_norm, solve_pair


# ---------------------------------------------------------------------------
# SparseSpec
# ---------------------------------------------------------------------------

def test_bump_sites_exact_integers():
    s = SparseSpec(v=0.2, gamma=8, j_max=42)
    assert s.bump_sites[0] == 8
    assert s.bump_sites[-1] == 8 ** 42  # exact, no rounding
    for a, b in zip(s.bump_sites, s.bump_sites[1:]):
        assert b == 8 * a


def test_potential_exact_membership():
    s = SparseSpec(v=0.5, gamma=8, j_max=5)
    for j in range(1, 6):
        assert s.b(8 ** j) == 0.5
        assert s.b(8 ** j - 1) == 0.0
        assert s.b(8 ** j + 1) == 0.0
    assert s.b(16) == 0.0       # multiple of gamma but not a pure power
    assert s.b(8 ** 6) == 0.0   # beyond the last bump


def test_sparse_spec_validation():
    with pytest.raises(InvalidArgumentError):
        SparseSpec(gamma=1)
    with pytest.raises(InvalidArgumentError):
        SparseSpec(gamma=8, j_max=50)  # 8^50 >= 2^127


# ---------------------------------------------------------------------------
# propagation
# ---------------------------------------------------------------------------

def test_free_block_rejects_hyperbolic():
    s = SparseSpec(v=0.2, gamma=4, j_max=4)
    with pytest.raises(UnsupportedModelError):
        block_matrices(s, 2.5)


def test_propagation_matches_naive():
    s = SparseSpec(v=0.2, gamma=4, j_max=6)
    E, theta = 0.6, 0.4
    prop = sparse_propagate(s, E, theta)
    spec = s.to_operator_spec()
    # naive oracle over 4^6 = 4096 sites: pre-bump state (phi(n_j), phi(n_j-1))
    phi = solve_forward(spec, E, -math.sin(theta), math.cos(theta),
                        s.bump_sites[-1] + 1)
    for j, nj in enumerate(s.bump_sites):
        naive_amp = math.hypot(phi.values[nj], phi.values[nj - 1])
        assert prop.amp1[j] == pytest.approx(naive_amp, rel=1e-9)


def test_wronskian_preserved_across_fast_blocks():
    s = SparseSpec(v=0.2, gamma=8, j_max=20)
    prop = sparse_propagate(s, 0.6, 0.3)
    assert np.all(np.abs(prop.wronskian - 1.0) < 1e-8)


def test_free_case_amplitude_bound():
    # v = 0: free rotation conserves the Pruefer radius; the amplitude in
    # (phi(n), phi(n-1)) coordinates oscillates within the ellipse bound
    # max/min <= (1 + |cos k|) / |sin k| with E = 2 cos k
    s = SparseSpec(v=0.0, gamma=8, j_max=15)
    for E in (0.3, 0.6, 1.2):
        k = math.acos(E / 2.0)
        bound = (1.0 + abs(math.cos(k))) / abs(math.sin(k))
        prop = sparse_propagate(s, E, 0.25)
        ratio = float(np.max(prop.amp1) / np.min(prop.amp1))
        assert ratio <= bound + 1e-9


def test_single_bump_jump_bounded():
    s = SparseSpec(v=0.7, gamma=8, j_max=10)
    E = 0.6
    bump = single_step(E, s.v, 1.0, 1.0)
    prop = sparse_propagate(s, E, 0.1)
    k = math.acos(E / 2.0)
    free_swing = (1.0 + abs(math.cos(k))) / abs(math.sin(k))
    for j in range(1, len(prop.amp1)):
        jump = prop.amp1[j] / prop.amp1[j - 1]
        assert jump <= bump.norm() * free_swing + 1e-9


# ---------------------------------------------------------------------------
# envelopes
# ---------------------------------------------------------------------------

def test_envelope_exact_power_law():
    sites = [8 ** j for j in range(1, 20)]
    amps = np.array([float(n) ** 0.3 for n in sites])
    fit = envelope_exponents(sites, amps)
    assert fit.beta1_hat == pytest.approx(0.3, abs=1e-6)
    assert fit.beta2_hat == pytest.approx(0.3, abs=1e-6)
    assert fit.residual < 1e-9


def test_envelope_free_case_flat():
    s = SparseSpec(v=0.0, gamma=8, j_max=20)
    prop = sparse_propagate(s, 0.6, 0.25)
    fit = envelope_exponents(prop.bump_sites, prop.amp1)
    assert abs(fit.beta1_hat) <= 0.02
    assert abs(fit.beta2_hat) <= 0.02


def test_envelope_scale_invariance():
    s = SparseSpec(v=0.2, gamma=8, j_max=20)
    prop = sparse_propagate(s, 0.6, 0.25)
    fit = envelope_exponents(prop.bump_sites, prop.amp2)
    fit_scaled = envelope_exponents(prop.bump_sites, 37.5 * prop.amp2)
    assert fit_scaled.beta1_hat == pytest.approx(fit.beta1_hat, abs=1e-12)
    assert fit_scaled.beta2_hat == pytest.approx(fit.beta2_hat, abs=1e-12)


def test_envelope_needs_enough_points():
    with pytest.raises(InsufficientDataError):
        envelope_exponents([8, 64, 512], np.ones(3))


def test_envelope_ordering_invariant():
    rng = np.random.default_rng(15)
    sites = [8 ** j for j in range(1, 18)]
    for _ in range(20):
        amps = np.exp(rng.standard_normal(len(sites)))
        fit = envelope_exponents(sites, amps)
        assert fit.beta1_hat <= fit.beta2_hat


def test_envelope_stable_under_doubling_window():
    E = 0.6
    f10 = envelope_exponents(*(lambda p: (p.bump_sites, p.amp2))(
        sparse_propagate(SparseSpec(v=0.2, gamma=8, j_max=15), E, 0.25)))
    f20 = envelope_exponents(*(lambda p: (p.bump_sites, p.amp2))(
        sparse_propagate(SparseSpec(v=0.2, gamma=8, j_max=30), E, 0.25)))
    assert abs(f20.beta2_hat - f10.beta2_hat) <= 0.05
    assert f20.beta2_hat < 0.5


# ---------------------------------------------------------------------------
# thresholds
# ---------------------------------------------------------------------------

def test_s_threshold_examples():
    assert s_threshold(0.0, 0.0) == pytest.approx(0.5)
    assert s_threshold(0.1, 0.25) == pytest.approx(2.3)
    with pytest.raises(InvalidArgumentError):
        s_threshold(0.1, 0.5)
    with pytest.raises(InvalidArgumentError):
        s_threshold(0.3, 0.2)


def test_bounds_at_quarter():
    assert beta_lower_bound(0.25) == pytest.approx(1.0 / 3.0)
    assert eta_upper_bound(0.25) == pytest.approx(2.0)


@given(st.floats(0.0, 0.45), st.floats(0.0, 0.45))
def test_threshold_identity_vs_eta_bound(b1, b2):
    b1, b2 = min(b1, b2), max(b1, b2)
    # s_threshold = eta_upper_bound + 1/2 - 2 beta1, exactly
    assert s_threshold(b1, b2) == pytest.approx(
        eta_upper_bound(b2) + 0.5 - 2.0 * b1, abs=1e-12)
    assert deterministic_comparison_exponent(b1, b2) == pytest.approx(
        s_threshold(b1, b2) + 0.5, abs=1e-12)


# ---------------------------------------------------------------------------
# block L-norms
# ---------------------------------------------------------------------------

def test_block_lnorms_match_dense():
    s = SparseSpec(v=0.2, gamma=4, j_max=5)  # 1024 sites, dense feasible
    E, theta = 0.6, 0.3
    prop = sparse_propagate(s, E, theta)
    blk = block_log_lnorms(prop.bump_sites, prop.amp1)
    phi1, _ = solve_pair(s.to_operator_spec(), E, theta, s.bump_sites[-1] + 1)
    for j, nj in enumerate(prop.bump_sites):
        dense = math.log(l_norm(phi1, float(nj)))
        assert abs(blk[j] - dense) <= 0.25  # block approximation


def test_block_lnorms_shift_under_scaling():
    sites = [8 ** j for j in range(1, 10)]
    amps = np.linspace(1.0, 2.0, 9)
    a = block_log_lnorms(sites, amps)
    b = block_log_lnorms(sites, 10.0 * amps)
    assert np.allclose(b - a, math.log(10.0))


# ---------------------------------------------------------------------------
# subordinate angle and the stability experiment
# ---------------------------------------------------------------------------

def test_find_subordinate_angle_minimizes_terminal_amp():
    s = SparseSpec(v=0.2, gamma=8, j_max=12)
    E = 0.6
    theta = find_subordinate_angle(s, E)
    amp_star = sparse_propagate(s, E, theta).amp1[-1]
    for dt in (-0.4, 0.2, 0.7):
        other = sparse_propagate(s, E, theta + dt).amp1[-1]
        assert amp_star <= other + 1e-9


def test_perturbed_experiment_far_above_threshold():
    s = SparseSpec(v=0.2, gamma=8, j_max=14)
    rep = perturbed_sparse_experiment(s, 10.0, range(5), 0.6, n_cut=3000)
    # s = 10 decay: the noise is numerically negligible
    assert rep.max_median_diff <= 0.05
    assert rep.fit_unpert.beta1_hat <= rep.fit_unpert.beta2_hat
    assert rep.tail_bound < 1e-10
    assert rep.n_seeds == 5


def test_perturbed_experiment_validation():
    s = SparseSpec(v=0.2, gamma=8, j_max=12)
    with pytest.raises(InvalidArgumentError):
        perturbed_sparse_experiment(s, -1.0, range(2), 0.6)
