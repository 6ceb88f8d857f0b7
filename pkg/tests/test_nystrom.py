"""Column sampling and low-rank eigensystem extension."""

import numpy as np
import pytest

from ntkfilter import (
    ConfigError,
    NystromFactors,
    nystrom_factorize,
    sample_columns,
)


def spd_kernel(d: int, seed: int, rank: int | None = None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    k = rank or d
    a = rng.standard_normal((d, k))
    return a @ a.T / k


# ------------------------------------------------------------- column sampling


def test_sample_columns_full_fraction_is_identity():
    np.testing.assert_array_equal(sample_columns(24, (4, 6), 1.0), np.arange(24))


def test_sample_columns_count_and_distinctness():
    idx = sample_columns(256, (16, 16), 0.1, seed=3)
    assert idx.size == 26  # round(0.1 * 256)
    assert np.unique(idx).size == idx.size
    assert idx.min() >= 0 and idx.max() < 256
    assert np.all(np.diff(idx) > 0)  # sorted
    tiny = sample_columns(64, (8, 8), 0.001, seed=0)
    assert tiny.size == 1  # never returns an empty set


def test_sample_columns_deterministic_per_seed():
    a = sample_columns(256, (16, 16), 0.08, seed=5)
    b = sample_columns(256, (16, 16), 0.08, seed=5)
    c = sample_columns(256, (16, 16), 0.08, seed=6)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sample_columns_cover_every_quadrant():
    h = w = 16
    m = round(0.08 * 256)  # 20 samples, quota 5 per quadrant
    floor = m // 4
    for seed in range(100):
        idx = sample_columns(256, (h, w), 0.08, seed=seed)
        ys, xs = idx // w, idx % w
        for y_half in (ys < h // 2, ys >= h // 2):
            for x_half in (xs < w // 2, xs >= w // 2):
                assert int(np.sum(y_half & x_half)) >= floor - 1


def test_sample_columns_validation():
    with pytest.raises(ConfigError):
        sample_columns(20, (4, 6), 0.5)
    with pytest.raises(ConfigError):
        sample_columns(24, (4, 6), 0.0)
    with pytest.raises(ConfigError):
        sample_columns(24, (4, 6), 1.5)


# --------------------------------------------------------------- factorization


def test_factorize_all_columns_is_exact():
    theta = spd_kernel(30, seed=1)
    idx = np.arange(30)
    factors = nystrom_factorize(theta, idx)
    # reconstruction returns the rescaled matrix: undo the top-eigenvalue scale
    np.testing.assert_allclose(factors.reconstruct() / factors.eigenvalue_scale, theta, atol=1e-10)
    want = np.linalg.eigvalsh(theta)[::-1]
    np.testing.assert_allclose(factors.eigenvalues / factors.eigenvalue_scale, want, atol=1e-10)


def test_factorize_rank_one_from_few_columns():
    rng = np.random.default_rng(7)
    v = rng.standard_normal(12)
    theta = np.outer(v, v)
    idx = np.array([1, 5, 9])
    factors = nystrom_factorize(theta[:, idx], idx)
    assert factors.rank == 1
    np.testing.assert_allclose(
        factors.reconstruct() / factors.eigenvalue_scale, theta, atol=1e-10
    )


def test_factorize_exact_on_matching_rank():
    # a rank-5 kernel is recovered exactly from any 8 spanning columns
    theta = spd_kernel(20, seed=2, rank=5)
    idx = np.array([0, 2, 5, 8, 11, 14, 17, 19])
    factors = nystrom_factorize(theta[:, idx], idx)
    np.testing.assert_allclose(
        factors.reconstruct() / factors.eigenvalue_scale, theta, atol=1e-8
    )


def test_factorize_reproduces_the_sampled_block():
    theta = spd_kernel(40, seed=3)
    idx = np.array([1, 7, 13, 22, 30, 38])
    factors = nystrom_factorize(theta[:, idx], idx)
    approx = factors.reconstruct() / factors.eigenvalue_scale
    np.testing.assert_allclose(approx[np.ix_(idx, idx)], theta[np.ix_(idx, idx)], atol=1e-8)


def test_factorize_normalization_and_order():
    theta = spd_kernel(25, seed=4)
    idx = sample_columns(25, (5, 5), 0.4, seed=0)
    factors = nystrom_factorize(theta[:, idx], idx)
    assert factors.eigenvalues[0] == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.diff(factors.eigenvalues) <= 0)
    assert factors.dim == 25
    assert factors.rank <= idx.size


def test_factorize_counts_clipped_negatives():
    # the sampled block [[0, 1], [1, 0]] has eigenvalues +1 and -1
    theta_dm = np.array([[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]])
    factors = nystrom_factorize(theta_dm, np.array([0, 1]))
    assert factors.clipped == 1
    assert factors.rank == 1


def test_factorize_drops_floor_components():
    theta = spd_kernel(16, seed=5, rank=3)
    idx = np.arange(16)
    factors = nystrom_factorize(theta, idx)
    assert factors.rank == 3


def test_factorize_validation():
    theta = spd_kernel(10, seed=6)
    with pytest.raises(ConfigError):
        nystrom_factorize(theta[:, :3], np.array([0, 1]))
    with pytest.raises(ConfigError):
        nystrom_factorize(theta[:, :3], np.array([0, 1, 10]))
    with pytest.raises(ConfigError):
        nystrom_factorize(np.zeros((5, 2)), np.array([0, 1]))


def test_factors_save_load_roundtrip(tmp_path):
    theta = spd_kernel(18, seed=8)
    idx = np.array([0, 4, 9, 13, 17])
    factors = nystrom_factorize(theta[:, idx], idx)
    prefix = str(tmp_path / "f")
    factors.save(prefix)
    loaded = NystromFactors.load(prefix)
    np.testing.assert_array_equal(loaded.sample_indices, factors.sample_indices)
    np.testing.assert_array_equal(loaded.eigenvalues, factors.eigenvalues)
    np.testing.assert_array_equal(loaded.eigenimages, factors.eigenimages)
    assert loaded.eigenvalue_scale == factors.eigenvalue_scale
    assert loaded.clipped == factors.clipped


def test_eigenimage_orthonormality_is_loose_at_small_m(house32):
    # eigenimages are extended without re-orthogonalization, and at small
    # m/d the deviation from orthonormality is genuinely large; this pins the
    # documented behavior rather than an aspirational bound
    from ntkfilter import NoiseModel, add_gaussian_noise, kernel_columns, vanilla_arch

    img = add_gaussian_noise(house32, NoiseModel(sigma=25.0, seed=0))
    arch = vanilla_arch(32, 32)
    idx = sample_columns(1024, (32, 32), 0.02, seed=0)
    factors = nystrom_factorize(kernel_columns(arch, img, idx), idx)
    gram = factors.eigenimages.T @ factors.eigenimages
    deviation = float(np.max(np.abs(gram - np.eye(factors.rank))))
    assert deviation <= 1.0  # measured about 0.88 at this configuration


def test_factors_validation():
    with pytest.raises(ConfigError):
        NystromFactors(
            sample_indices=np.array([0]),
            eigenvalues=np.array([0.5, 1.0]),  # ascending
            eigenimages=np.zeros((4, 2)),
            eigenvalue_scale=1.0,
        )
    with pytest.raises(ConfigError):
        NystromFactors(
            sample_indices=np.array([0]),
            eigenvalues=np.array([1.0]),
            eigenimages=np.zeros((4, 2)),  # column count mismatch
            eigenvalue_scale=1.0,
        )
