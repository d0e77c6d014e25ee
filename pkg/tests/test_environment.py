import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rwrelab import (
    BadMixingRange,
    InfeasibleDisorder,
    KappaOutOfRange,
    WindowExhausted,
    direction_vectors,
    directions,
    disorder_of,
    environment_from_csv,
    environment_to_csv,
    imbalance_of,
    law_from_config,
    law_to_config,
    make_iid_law,
    make_mixing_law,
    sample_environment,
    site_kernels,
    validate_environment,
)
from rwrelab import rng
from rwrelab.environment import direction_index


def small_window(d, r=4):
    return (-np.full(d, r, dtype=np.int64), np.full(d, r, dtype=np.int64))


# -- direction bookkeeping -------------------------------------------------


def test_direction_order_alternates_sign_per_axis():
    ds = directions(2)
    vecs = direction_vectors(2)
    assert len(ds) == 4
    assert vecs.tolist() == [[1, 0], [-1, 0], [0, 1], [0, -1]]
    for i, dd in enumerate(ds):
        assert dd.index == i
        assert direction_index(2, vecs[i]) == i


def test_direction_index_rejects_non_unit_steps():
    with pytest.raises(ValueError):
        direction_index(2, [1, 1])


# -- law construction ------------------------------------------------------


def test_loadings_cancel_against_mean_and_peak_at_one():
    law = make_iid_law(1, 0.2, (0.6, 0.4), "two-point", 0.2)
    assert float(law.mean @ law.loadings) == 0.0
    assert np.abs(law.loadings).max() == 1.0
    # heavier side carries the smaller loading
    assert abs(law.loadings[0]) < abs(law.loadings[1])


def test_disorder_equals_delta_exactly():
    for family in ("two-point", "uniform-interval"):
        law = make_iid_law(2, 0.1, (0.3, 0.2, 0.2, 0.3), family, 0.17)
        assert disorder_of(law) == 0.17


def test_kappa_outside_open_interval_rejected():
    with pytest.raises(KappaOutOfRange):
        make_iid_law(1, 0.5, (0.5, 0.5), "two-point", 0.1)
    with pytest.raises(KappaOutOfRange):
        make_iid_law(2, 0.25, (0.25, 0.25, 0.25, 0.25), "two-point", 0.1)
    with pytest.raises(KappaOutOfRange):
        make_iid_law(1, 0.0, (0.5, 0.5), "two-point", 0.1)


def test_disorder_pushing_entries_below_kappa_rejected():
    # min entry 0.4 * (1 - delta); delta = 0.6 drives it to 0.16 < 0.2
    with pytest.raises(InfeasibleDisorder):
        make_iid_law(1, 0.2, (0.6, 0.4), "two-point", 0.6)


def test_mean_kernel_validation():
    with pytest.raises(ValueError):
        make_iid_law(1, 0.2, (0.6, -0.1), "two-point", 0.0)
    with pytest.raises(ValueError):
        make_iid_law(1, 0.2, (0.6, 0.4, 0.3), "two-point", 0.0)
    with pytest.raises(ValueError):
        make_iid_law(1, 0.2, (6.0, 4.0), "two-point", 0.0)


def test_latent_moments_closed_forms():
    two = make_iid_law(1, 0.2, (0.5, 0.5), "two-point", 0.1)
    assert two.latent_moment(1) == 0.0
    assert two.latent_moment(2) == 1.0
    assert two.latent_moment(3) == 0.0
    uni = make_iid_law(1, 0.2, (0.5, 0.5), "uniform-interval", 0.1)
    assert uni.latent_moment(1) == 0.0
    assert abs(uni.latent_moment(2) - 1.0 / 3.0) < 1e-15
    assert abs(uni.latent_moment(4) - 1.0 / 5.0) < 1e-15
    fin = make_iid_law(
        1, 0.2, (0.5, 0.5), "finite-support", 0.1,
        latent_support=((-1.0, 0.25), (0.0, 0.5), (1.0, 0.25)),
    )
    assert abs(fin.latent_moment(1)) < 1e-15
    assert abs(fin.latent_moment(2) - 0.5) < 1e-15


def test_site_moment_matches_brute_force_two_point():
    law = make_iid_law(1, 0.2, (0.6, 0.4), "two-point", 0.2)
    c = law.loadings
    m = law.mean
    dogs = law.delta

    def omega(v):
        return m * (1.0 + dogs * c * v)

    # E[w_+^2 w_-] at one site, V = +-1 equally likely
    brute = 0.5 * sum(omega(v)[0] ** 2 * omega(v)[1] for v in (-1.0, 1.0))
    got = law.site_moment(np.array([2, 1]))
    assert abs(got - brute) < 1e-15
    # extra_dir multiplies one more factor of that direction
    brute2 = 0.5 * sum(omega(v)[0] ** 3 * omega(v)[1] for v in (-1.0, 1.0))
    got2 = law.site_moment(np.array([2, 1]), extra_dir=0)
    assert abs(got2 - brute2) < 1e-15


@given(
    st.integers(1, 2),
    st.floats(0.0, 0.45),
    st.integers(0, 10_000),
)
@settings(max_examples=60, deadline=None)
def test_sampled_kernels_are_elliptic_rows(d, delta, seed):
    mean = (0.6, 0.4) if d == 1 else (0.3, 0.2, 0.2, 0.3)
    kappa = 0.1 if d == 1 else 0.05
    law = make_iid_law(d, kappa, mean, "uniform-interval", delta)
    env = sample_environment(law, small_window(d, 3), seed)
    rows = env.kernels.reshape(-1, 2 * d)
    assert np.allclose(rows.sum(axis=1), 1.0, atol=1e-12)
    assert rows.min() >= kappa - 1e-15
    assert env.clamp_count == 0


def test_same_site_same_kernel_across_windows():
    law = make_iid_law(2, 0.1, (0.3, 0.2, 0.2, 0.3), "uniform-interval", 0.3)
    a = sample_environment(law, (np.array([-4, -4]), np.array([4, 4])), 123)
    b = sample_environment(law, (np.array([0, 0]), np.array([9, 9])), 123)
    for x in ([0, 0], [2, 3], [4, 1]):
        xa = a.kernel_at(np.array(x))
        xb = b.kernel_at(np.array(x))
        assert np.array_equal(xa, xb)


def test_site_kernels_pure_in_seed_and_sensitive_to_it():
    law = make_iid_law(1, 0.2, (0.5, 0.5), "two-point", 0.2)
    coords = np.arange(-5, 6).reshape(-1, 1)
    k1 = site_kernels(law, coords, 7)
    k2 = site_kernels(law, coords, 7)
    k3 = site_kernels(law, coords, 8)
    assert np.array_equal(k1, k2)
    assert not np.array_equal(k1, k3)


# -- mixing ----------------------------------------------------------------


def test_mixing_latents_independent_beyond_range():
    law = make_mixing_law(1, 0.2, (0.5, 0.5), "two-point", 0.3, L0=4, g=0.8, C=2.0)
    off = law.mixing.offsets[:, 0]
    w = law.mixing.weights
    # latent covariance at lag ell is sum of overlapping weight products;
    # beyond L0 the supports cannot overlap, so it vanishes identically
    for lag in range(law.mixing.L0, law.mixing.L0 + 4):
        cov = sum(
            w[i] * w[j]
            for i in range(off.size)
            for j in range(off.size)
            if off[i] == off[j] + lag
        )
        assert cov == 0.0


def test_mixing_autocorrelation_bound_holds():
    law = make_mixing_law(1, 0.2, (0.5, 0.5), "two-point", 0.3, L0=6, g=0.5, C=1.5)
    off = law.mixing.offsets[:, 0]
    w = law.mixing.weights
    var = float(np.sum(w * w))
    for lag in range(1, law.mixing.L0):
        cov = sum(
            w[i] * w[j]
            for i in range(off.size)
            for j in range(off.size)
            if off[i] == off[j] + lag
        )
        assert cov / var <= 1.5 * math.exp(-0.5 * lag) + 1e-12


def test_mixing_window_too_small_raises():
    law = make_mixing_law(1, 0.2, (0.5, 0.5), "two-point", 0.3, L0=8, g=0.5, C=1.5)
    with pytest.raises(BadMixingRange):
        sample_environment(law, (np.array([-2]), np.array([2])), 5)


def test_mixing_parameter_guards():
    with pytest.raises(BadMixingRange):
        make_mixing_law(1, 0.2, (0.5, 0.5), "two-point", 0.3, L0=0)
    with pytest.raises(BadMixingRange):
        make_mixing_law(1, 0.2, (0.5, 0.5), "two-point", 0.3, L0=4, g=-1.0)
    with pytest.raises(BadMixingRange):
        make_mixing_law(1, 0.2, (0.5, 0.5), "two-point", 0.3, L0=4, C=0.0)


# -- environment container -------------------------------------------------


def test_kernel_field_policies():
    law = make_iid_law(1, 0.2, (0.6, 0.4), "two-point", 0.2)
    env = sample_environment(law, (np.array([-2]), np.array([2])), 9, boundary="strict")
    with pytest.raises(WindowExhausted):
        env.kernel_field(np.array([-3]), np.array([3]))
    fill = sample_environment(law, (np.array([-2]), np.array([2])), 9, boundary="mean-fill")
    wide = fill.kernel_field(np.array([-3]), np.array([3]))
    assert np.array_equal(wide[0], law.mean)
    assert np.array_equal(wide[-1], law.mean)
    assert np.array_equal(wide[1:-1], env.kernels)


def test_periodic_shift_covariance_of_the_field():
    law = make_iid_law(1, 0.2, (0.6, 0.4), "two-point", 0.2)
    env = sample_environment(law, (np.array([-3]), np.array([3])), 11, boundary="periodic")
    sh = env.shifted(np.array([2]))
    # shifted field at x equals original at x + 2 (mod window)
    assert np.array_equal(sh.kernel_at(np.array([0])), env.kernel_at(np.array([2])))
    assert np.array_equal(sh.kernel_at(np.array([3])), env.kernel_at(np.array([-2])))


def test_validate_environment_reports_green():
    law = make_iid_law(2, 0.1, (0.3, 0.2, 0.2, 0.3), "two-point", 0.2)
    env = sample_environment(law, small_window(2, 3), 13)
    rep = validate_environment(env)
    assert rep["ok"]
    assert rep["normalization"] == [] and rep["ellipticity"] == []
    assert rep["clamp_count"] == 0 and rep["sites"] == 49


def test_imbalance_zero_when_axial_sums_cancel():
    # mean (0.3, 0.2, 0.2, 0.3): the (1,-1)-directed pair carries opposite
    # loadings of equal weight, so axial sums are disorder-free
    law = make_iid_law(2, 0.15, (0.3, 0.2, 0.2, 0.3), "two-point", 0.1)
    assert abs(imbalance_of(law, np.array([1, -1]))) < 1e-15
    assert imbalance_of(law, np.array([1, 1])) > 0.0


# -- serialization ---------------------------------------------------------


def test_law_config_roundtrip_bitwise():
    law = make_iid_law(2, 0.12, (0.31, 0.19, 0.2, 0.3), "uniform-interval", 0.21)
    back = law_from_config(law_to_config(law))
    assert back.d == law.d and back.kappa == law.kappa and back.delta == law.delta
    assert np.array_equal(back.mean, law.mean)
    assert np.array_equal(back.loadings, law.loadings)
    assert back.family == law.family


def test_environment_csv_roundtrip_bitwise():
    law = make_iid_law(2, 0.1, (0.3, 0.2, 0.2, 0.3), "two-point", 0.2)
    env = sample_environment(law, small_window(2, 2), 17)
    buf = io.StringIO()
    environment_to_csv(env, buf)
    buf.seek(0)
    back = environment_from_csv(buf)
    assert np.array_equal(back.kernels, env.kernels)
    assert np.array_equal(back.lo, env.lo) and np.array_equal(back.hi, env.hi)


# -- keyed rng -------------------------------------------------------------


def test_site_hash_purity_and_tag_separation():
    coords = np.array([[0, 0], [1, -2], [5, 5]])
    h1 = rng.site_hashes(42, rng.TAG_ENV, coords)
    h2 = rng.site_hashes(42, rng.TAG_ENV, coords)
    h3 = rng.site_hashes(42, rng.TAG_WALK, coords)
    assert np.array_equal(h1, h2)
    assert not np.array_equal(h1, h3)


def test_stream_reproducible_and_indexed():
    a = rng.stream(1, rng.TAG_WALK, 0).random(4)
    b = rng.stream(1, rng.TAG_WALK, 0).random(4)
    c = rng.stream(1, rng.TAG_WALK, 1).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
