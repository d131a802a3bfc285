import numpy as np
import pytest
from scipy import stats

from helpers import DomainError, ParameterError
from rand_core import (
    FIELD_PRIME,
    HashRows,
    KWiseHash,
    Seed,
    StableParams,
    derive_seed,
    inverse_exponential_cdf,
    salted_bits,
    sample_exponential,
    sample_p_stable,
    sample_sign,
    stable_column,
    stable_entries,
    stable_uniforms,
)


def test_seed_parse_accepts_hex_and_decimal():
    assert Seed.parse("0x10").value == 16
    assert Seed.parse("16").value == 16
    with pytest.raises(ParameterError):
        Seed.parse("sixteen")


def test_derive_seed_is_deterministic_and_label_sensitive(master_seed):
    a = derive_seed(master_seed, "tracker0")
    assert a == derive_seed(master_seed, "tracker0")
    assert a.value != derive_seed(master_seed, "tracker1").value
    assert a.label == "tracker0"
    assert derive_seed(a, "k1.0").label == "tracker0/k1.0"


def test_derive_seed_rejects_non_ascii_labels(master_seed):
    with pytest.raises(ParameterError):
        derive_seed(master_seed, "zweiß")


def test_kwise_hash_values_in_field(master_seed):
    h = KWiseHash.from_seed(master_seed, k=4)
    values = h.evaluate(np.arange(1000))
    assert values.min() >= 0
    assert values.max() < FIELD_PRIME


def test_kwise_hash_rejects_low_degree(master_seed):
    with pytest.raises(ParameterError):
        KWiseHash.from_seed(master_seed, k=1)


def test_sample_sign_checks_universe(master_seed):
    h = KWiseHash.from_seed(master_seed, k=4, universe=10)
    assert sample_sign(h, 3) in (-1, 1)
    with pytest.raises(DomainError):
        sample_sign(h, 10)


def test_sign_mean_is_near_zero(master_seed):
    h = KWiseHash.from_seed(master_seed, k=4)
    assert abs(h.signs(np.arange(20000)).mean()) < 0.03


def test_salted_signs_are_fair_over_an_odd_field(master_seed):
    rows = HashRows.from_seed(master_seed, rows=4000, k=2, prime=3)
    parity = 1 - 2 * (rows.evaluate(1) & 1)
    # values are uniform on {0, 1, 2}, so bare parity leans to +1 by 1/3
    assert parity.mean() > 0.25
    assert abs(rows.signs(1).mean()) < 0.06


def test_salted_bits_are_balanced_for_a_fixed_item(master_seed):
    salts = HashRows.from_seed(master_seed, rows=20000).salts
    assert abs(salted_bits(salts, 12345).mean() - 0.5) < 0.02


def test_hash_rows_evaluate_matches_evaluate_many(master_seed):
    rows = HashRows.from_seed(master_seed, rows=5)
    many = rows.evaluate_many([7, 11])
    assert np.array_equal(many[:, 0], rows.evaluate(7))
    assert np.array_equal(many[:, 1], rows.evaluate(11))
    assert np.array_equal(rows.signs_many([7, 11])[:, 1], rows.signs(11))
    picked = rows.select([0, 2])
    assert picked.rows == 2
    assert np.array_equal(picked.signs(7), rows.signs(7)[[0, 2]])


def test_stacked_rows_keep_their_hashes(master_seed):
    a = HashRows.from_seed(master_seed, rows=3)
    b = HashRows.from_seed(derive_seed(master_seed, "b"), rows=2)
    both = HashRows.stack([a, b])
    assert both.rows == 5
    assert np.array_equal(both.signs(9), np.concatenate([a.signs(9), b.signs(9)]))


def test_stable_uniforms_depend_only_on_item(master_seed):
    theta_a, r_a = stable_uniforms(master_seed, 5, 100)
    theta_b, r_b = stable_uniforms(master_seed, 5, 100)
    assert np.array_equal(theta_a, theta_b) and np.array_equal(r_a, r_b)
    theta_c, _ = stable_uniforms(master_seed, 6, 100)
    assert not np.array_equal(theta_a, theta_c)
    assert np.all(np.abs(theta_a) <= np.pi / 2)


def test_stable_params_validation():
    with pytest.raises(ParameterError):
        StableParams(2.5)
    with pytest.raises(ParameterError):
        StableParams(1.0, truncation=-1.0)


def test_one_stable_draws_are_cauchy(master_seed):
    theta, r = stable_uniforms(master_seed, 0, 5000)
    x = sample_p_stable(StableParams(1.0), theta, r)
    assert stats.kstest(x, "cauchy").pvalue > 1e-3


def test_two_stable_draws_are_gaussian_with_variance_two(master_seed):
    theta, r = stable_uniforms(master_seed, 1, 5000)
    x = sample_p_stable(StableParams(2.0), theta, r)
    assert stats.kstest(x, "norm", args=(0.0, np.sqrt(2.0))).pvalue > 1e-3


def test_truncation_caps_magnitudes(master_seed):
    theta, r = stable_uniforms(master_seed, 2, 2000)
    x = sample_p_stable(StableParams(0.5, truncation=10.0), theta, r)
    assert np.abs(x).max() <= 10.0


def test_stable_column_is_cached_and_read_only(master_seed):
    col = stable_column(master_seed, 3, 30, 1.5)
    assert col is stable_column(master_seed, 3, 30, 1.5)
    with pytest.raises(ValueError):
        col[0] = 1.0


def test_long_stable_columns_bypass_the_cache(master_seed):
    a = stable_column(master_seed, 3, 6000, 1.5)
    b = stable_column(master_seed, 3, 6000, 1.5)
    assert a is not b
    assert np.array_equal(a, b)
    index = np.array([0, 17, 5999])
    assert np.allclose(stable_entries(master_seed, 3, 6000, 1.5, index), a[index])


def test_exponentials_have_unit_mean(master_seed):
    draws = sample_exponential(master_seed.generator(), 20000, cap=None)
    assert abs(draws.mean() - 1.0) < 0.05
    assert inverse_exponential_cdf(0.0) == 0.0


def test_exponential_cap(master_seed):
    draws = sample_exponential(master_seed.generator(), 5000, cap=2.0)
    assert draws.max() <= 2.0
