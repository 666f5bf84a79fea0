import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenekit import FeatureError
from scenekit.dataset import AudioClip
from scenekit.features import (
    LOG_FLOOR,
    FeatureMatrix,
    Recipe,
    apply_normalization,
    apply_pca,
    build_mel_filterbank,
    delta_features,
    extract,
    extract_all,
    fit_normalization,
    fit_pca,
    hz_to_mel,
    lpc,
    mfcc,
    read_feature_cache,
    spectral_centroid,
    spectral_rolloff,
    subband_energies,
    write_feature_cache,
    zero_crossing_rate,
)


def brute_sign_changes(x):
    count = 0
    for a, b in zip(x[:-1], x[1:]):
        if (a >= 0) != (b >= 0):
            count += 1
    return count


def dct2_matrix(n):
    """Orthonormal DCT-II written out from its definition."""
    m = np.empty((n, n))
    for k in range(n):
        scale = math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n)
        for i in range(n):
            m[k, i] = scale * math.cos(math.pi * k * (2 * i + 1) / (2 * n))
    return m


def naive_dft_power(x):
    n = len(x)
    out = []
    for k in range(n // 2 + 1):
        re = sum(x[t] * math.cos(2 * math.pi * k * t / n) for t in range(n))
        im = -sum(x[t] * math.sin(2 * math.pi * k * t / n) for t in range(n))
        out.append(re * re + im * im)
    return np.array(out)


# -- zero crossing rate ----------------------------------------------------------------


def test_zcr_constant_and_alternating():
    assert zero_crossing_rate([0.5, 0.5, 0.5]) == 0.0
    assert zero_crossing_rate([1, -1, 1, -1]) == 1.0


def test_zcr_sine_period_matches_brute_force():
    n = np.arange(1000)
    x = np.sin(2 * np.pi * n / 1000 + 0.3)
    assert brute_sign_changes(x) == 2
    assert zero_crossing_rate(x) == pytest.approx(2 / 999, abs=1e-15)


def test_zcr_zero_counts_nonnegative():
    assert zero_crossing_rate([0.0, 1.0, 0.0]) == 0.0
    assert zero_crossing_rate([-1.0, 0.0]) == 1.0


def test_zcr_vectorised_over_frames(rng):
    frames = rng.standard_normal((7, 50))
    np.testing.assert_array_equal(
        zero_crossing_rate(frames), [brute_sign_changes(f) / 49 for f in frames]
    )


# -- centroid / rolloff ------------------------------------------------------------------


def test_centroid_single_bin():
    sr, n = 8000, 800  # bin spacing 10 Hz, 440 Hz is bin 44
    x = np.cos(2 * np.pi * 440 * np.arange(n) / sr)
    assert spectral_centroid(x, sr) == pytest.approx(440.0, abs=1e-6)


def test_centroid_two_equal_bins():
    sr, n = 8000, 800
    t = np.arange(n) / sr
    x = np.cos(2 * np.pi * 100 * t) + np.cos(2 * np.pi * 300 * t)
    assert spectral_centroid(x, sr) == pytest.approx(200.0, abs=1e-6)


def test_centroid_white_noise_near_mid_nyquist(rng):
    sr, n = 16000, 512
    # flat expected spectrum: mean of the one-sided bin frequencies
    bins = [k * sr / n for k in range(n // 2 + 1)]
    oracle = sum(bins) / len(bins)
    assert oracle == pytest.approx(sr / 4)
    vals = spectral_centroid(rng.standard_normal((400, n)), sr)
    assert np.mean(vals) == pytest.approx(oracle, rel=0.03)


def test_centroid_silent_frame_is_zero():
    assert spectral_centroid(np.zeros(64), 8000) == 0.0


def test_rolloff_mass_in_bin_zero():
    assert spectral_rolloff(np.ones(64), 8000) == 0.0


def test_rolloff_uniform_spectrum_brute_force():
    n, sr = 256, 8000
    impulse = np.zeros(n)
    impulse[0] = 1.0  # flat magnitude over all n/2+1 bins
    bins = n // 2 + 1
    cum, target = 0.0, 0.85 * bins
    for k in range(bins):
        cum += 1.0
        if cum >= target:
            break
    assert k == math.ceil(0.85 * bins) - 1
    assert spectral_rolloff(impulse, sr, 0.85) == pytest.approx(k * sr / n)


def test_rolloff_two_equal_bins_half():
    sr, n = 8000, 800
    t = np.arange(n) / sr
    x = np.cos(2 * np.pi * 1000 * t) + np.cos(2 * np.pi * 2000 * t)
    assert spectral_rolloff(x, sr, 0.5, n_fft=n) == pytest.approx(1000.0)


def test_rolloff_threshold_validation():
    with pytest.raises(FeatureError):
        spectral_rolloff(np.ones(8), 8000, 1.0)


# -- subbands ---------------------------------------------------------------------------


def test_subband_tone_in_second_band():
    sr, n = 8000, 400
    x = np.hanning(n) * np.sin(2 * np.pi * 1500 * np.arange(n) / sr)
    edges = [0, 1000, 2000, 3000, 4000]
    got = subband_energies(x, sr, edges)
    power = naive_dft_power(x)
    freqs = np.arange(len(power)) * sr / n
    oracle = []
    for b in range(4):
        lo, hi = edges[b], edges[b + 1]
        mask = (freqs >= lo) & ((freqs < hi) if b < 3 else (freqs <= hi))
        oracle.append(power[mask].sum())
    oracle = np.array(oracle) / sum(oracle)
    np.testing.assert_allclose(got.ratios, oracle, atol=1e-9)
    np.testing.assert_allclose(got.ratios, [0, 1, 0, 0], atol=1e-3)


def test_subband_single_full_band():
    got = subband_energies(np.random.default_rng(0).standard_normal(128), 8000, [0, 4000])
    np.testing.assert_allclose(got.ratios, [1.0])


def test_subband_silent_and_validation():
    got = subband_energies(np.zeros(64), 8000, [0, 2000, 4000])
    assert got.silent and np.all(got.ratios == 0)
    with pytest.raises(FeatureError):
        subband_energies(np.ones(64), 8000, [0, 0, 4000])
    with pytest.raises(FeatureError):
        subband_energies(np.ones(64), 8000, [0, 5000])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), nb=st.integers(1, 6))
def test_subband_ratios_sum_to_one(seed, nb):
    x = np.random.default_rng(seed).standard_normal(256)
    edges = np.linspace(0, 4000, nb + 1)
    assert subband_energies(x, 8000, edges).ratios.sum() == pytest.approx(1.0, abs=1e-9)


# -- mel / MFCC ----------------------------------------------------------------------------


def test_mel_scale_points():
    assert hz_to_mel(0.0) == 0.0
    oracle = 2595.0 * math.log10(1.0 + 1000.0 / 700.0)
    assert hz_to_mel(1000.0) == pytest.approx(oracle, abs=1e-12)
    assert oracle == pytest.approx(999.99, abs=0.01)


def test_filterbank_shape():
    bank = build_mel_filterbank(26, 1024, 16000)
    assert bank.weights.shape == (26, 513)
    assert np.all(bank.weights >= 0)
    assert np.all(np.diff(hz_to_mel(bank.centers)) > 0)
    for row in bank.weights:
        nz = np.flatnonzero(row)
        seg = row[nz[0] : nz[-1] + 1]
        peak = int(np.argmax(seg))
        assert np.all(np.diff(seg[: peak + 1]) >= 0)
        assert np.all(np.diff(seg[peak:]) <= 0)


def test_filterbank_adjacent_overlap_at_centres():
    bank = build_mel_filterbank(10, 4096, 8000)
    freqs = np.fft.rfftfreq(4096, 1 / 8000)
    for j in range(1, 9):
        # filter j vanishes at the centres of its neighbours
        left = np.searchsorted(freqs, bank.centers[j - 1], side="right") - 1
        right = np.searchsorted(freqs, bank.centers[j + 1], side="left")
        assert bank.weights[j, left] == 0 or freqs[left] >= bank.centers[j - 1]
        assert bank.weights[j, min(right, len(freqs) - 1)] == 0


def test_filterbank_errors():
    with pytest.raises(FeatureError):
        build_mel_filterbank(1, 512, 16000)
    with pytest.raises(FeatureError):
        build_mel_filterbank(26, 500, 16000)
    with pytest.raises(FeatureError, match="too many"):
        build_mel_filterbank(200, 64, 16000)


def test_mfcc_silent_frame():
    bank = build_mel_filterbank(26, 1024, 16000)
    c = mfcc(np.zeros(800), bank, 13)
    expected0 = (dct2_matrix(26) @ np.full(26, math.log(LOG_FLOOR)))[0]
    assert c[0] == pytest.approx(expected0, rel=1e-12)
    np.testing.assert_allclose(c[1:], 0, atol=1e-9)


def test_mfcc_gain_changes_only_coefficient_zero(rng):
    bank = build_mel_filterbank(26, 1024, 16000)
    x = rng.standard_normal(800)
    g = 3.7
    image = dct2_matrix(26) @ np.full(26, math.log(g))
    diff = mfcc(g * x, bank, 13) - mfcc(x, bank, 13)
    np.testing.assert_allclose(diff, image[:13], atol=1e-6)
    assert abs(diff[1:]).max() < 1e-6


def test_mfcc_white_noise(rng):
    bank = build_mel_filterbank(26, 1024, 16000)
    c = mfcc(rng.standard_normal(800), bank, 13)
    assert c.shape == (13,)
    assert np.all(np.isfinite(c))
    assert abs(c[0]) > np.abs(c[1:]).max()


def test_mfcc_coefficient_count_validation():
    bank = build_mel_filterbank(26, 1024, 16000)
    with pytest.raises(FeatureError):
        mfcc(np.ones(800), bank, 27)


# -- LPC -------------------------------------------------------------------------------------


def _residual_energy(x, a):
    e = np.convolve(x, np.concatenate([[1.0], -np.asarray(a)]))
    return float(e @ e) / len(x)


def test_lpc_ar1(rng):
    n = 20000
    x = np.zeros(n)
    noise = rng.standard_normal(n)
    for t in range(1, n):
        x[t] = 0.9 * x[t - 1] + noise[t]
    res = lpc(x, 1)
    assert res.coefficients[0] == pytest.approx(0.9, abs=0.05)
    # oracle: normal equations of the autocorrelation method, solved directly
    r = [sum(x[i] * x[i + k] for i in range(n - k)) / n for k in range(2)]
    assert res.coefficients[0] == pytest.approx(r[1] / r[0], abs=1e-12)


def test_lpc_matches_toeplitz_solve(rng):
    x = rng.standard_normal(300)
    x = np.convolve(x, [1, 0.5, -0.3])[:300]
    p = 6
    r = np.array([np.dot(x[: len(x) - k], x[k:]) / len(x) for k in range(p + 1)])
    toeplitz = np.array([[r[abs(i - j)] for j in range(p)] for i in range(p)])
    a = np.linalg.solve(toeplitz, r[1:])
    res = lpc(x, p)
    np.testing.assert_allclose(res.coefficients, a, atol=1e-10)
    assert res.error == pytest.approx(_residual_energy(x, a), rel=1e-9)


def test_lpc_white_noise_small(rng):
    res = lpc(rng.standard_normal(50000), 4)
    assert np.abs(res.coefficients).max() < 0.02


def test_lpc_optimality_against_random_coefficients(rng):
    x = np.convolve(rng.standard_normal(400), [1, -0.6, 0.2])[:400]
    res = lpc(x, 4)
    assert res.error <= float(x @ x) / len(x)
    assert res.error == pytest.approx(_residual_energy(x, res.coefficients), rel=1e-9)
    for _ in range(100):
        assert res.error <= _residual_energy(x, rng.normal(0, 0.5, 4)) + 1e-12


def test_lpc_silent_and_validation():
    res = lpc(np.zeros(32), 4)
    assert res.silent and res.error == 0 and np.all(res.coefficients == 0)
    with pytest.raises(FeatureError):
        lpc(np.ones(4), 4)
    with pytest.raises(FeatureError):
        lpc(np.ones(8), 0)


# -- deltas / normalization / PCA ---------------------------------------------------------------


def test_deltas():
    const = FeatureMatrix(np.ones((5, 3)), ("a", "b", "c"))
    assert np.all(delta_features(const).values == 0)
    v = np.array([1.0, -2.0])
    ramp = FeatureMatrix(np.arange(6)[:, None] * v, ("a", "b"))
    d = delta_features(ramp)
    assert d.layout == ("d_a", "d_b")
    assert np.all(d.values[0] == 0)
    np.testing.assert_array_equal(d.values[1:], np.tile(v, (5, 1)))
    single = delta_features(FeatureMatrix(np.array([[3.0, 4.0]]), ("a", "b")))
    np.testing.assert_array_equal(single.values, [[0.0, 0.0]])


def test_normalization_zero_mean_unit_std(rng):
    mats = [FeatureMatrix(rng.normal(5, 3, (40, 4)), tuple("abcd"), f"c{i}") for i in range(3)]
    stats = fit_normalization(mats)
    pooled = np.concatenate([apply_normalization(m, stats).values for m in mats])
    np.testing.assert_allclose(pooled.mean(axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(pooled.std(axis=0), 1, atol=1e-9)
    at_mean = apply_normalization(FeatureMatrix(stats.mean[None, :], tuple("abcd")), stats)
    assert np.all(at_mean.values == 0)


def test_normalization_constant_column_and_pooling(rng):
    x = np.column_stack([np.full(10, 2.0), rng.standard_normal(10)])
    m = FeatureMatrix(x, ("k", "r"))
    stats = fit_normalization([m])
    assert stats.std[0] == pytest.approx(1e-8)
    assert np.all(apply_normalization(m, stats).values[:, 0] == 0)
    twice = fit_normalization([m, m])
    dup = fit_normalization([FeatureMatrix(np.concatenate([x, x]), ("k", "r"))])
    np.testing.assert_allclose(twice.mean, dup.mean)
    np.testing.assert_allclose(twice.std, dup.std)


def test_normalization_not_idempotent_and_layout_checks(rng):
    m = FeatureMatrix(rng.normal(3, 2, (20, 2)), ("a", "b"))
    stats = fit_normalization([m])
    once = apply_normalization(m, stats)
    twice = apply_normalization(once, stats)
    assert not np.allclose(once.values, twice.values)
    with pytest.raises(FeatureError):
        fit_normalization([m, FeatureMatrix(np.ones((2, 2)), ("a", "c"))])
    with pytest.raises(FeatureError):
        apply_normalization(FeatureMatrix(np.ones((2, 2)), ("x", "y")), stats)


def test_pca_rank_one_data(rng):
    t = rng.standard_normal(200)
    pca = fit_pca(np.column_stack([t, 2 * t]), 2)
    frac = pca.explained_variance[0] / pca.explained_variance.sum()
    assert frac == pytest.approx(1.0, abs=1e-9)


def test_pca_full_rank_reconstruction(rng):
    x = rng.standard_normal((100, 4)) @ rng.standard_normal((4, 4))
    pca = fit_pca(x, 4)
    m = FeatureMatrix(x, pca.layout)
    y = apply_pca(m, pca).values
    np.testing.assert_allclose(pca.mean + y @ pca.basis.T, x, atol=1e-8)


def test_pca_matches_dense_eigensolver(rng):
    x = rng.multivariate_normal(np.zeros(5), np.diag([5, 4, 3, 2, 1]) + 0.3, size=500)
    pca = fit_pca(x, 2)
    oracle = np.sort(np.linalg.eigvals(np.cov(x, rowvar=False)).real)[::-1][:2]
    np.testing.assert_allclose(pca.explained_variance, oracle, atol=1e-8)
    np.testing.assert_allclose(pca.basis.T @ pca.basis, np.eye(2), atol=1e-9)


def test_pca_reconstruction_error_non_increasing(rng):
    x = rng.standard_normal((80, 6)) @ rng.standard_normal((6, 6))
    errors = []
    for r in range(1, 7):
        pca = fit_pca(x, r)
        y = (x - pca.mean) @ pca.basis
        errors.append(float(((pca.mean + y @ pca.basis.T - x) ** 2).sum()))
        assert np.all(np.diff(pca.explained_variance) <= 0)
    assert all(b <= a + 1e-9 for a, b in zip(errors, errors[1:]))


def test_pca_rank_too_large(rng):
    with pytest.raises(FeatureError):
        fit_pca(rng.standard_normal((10, 3)), 4)


# -- extraction --------------------------------------------------------------------------------


def _clip(rng, seconds=0.5, sr=16000, cid="clip"):
    return AudioClip(0.1 * rng.standard_normal(int(seconds * sr)), sr, cid)


def test_recipe_dimensions(rng):
    clip = _clip(rng)
    fm = extract(clip, Recipe.parse("mfcc:13,deltas"))
    assert fm.dim == 26
    assert fm.layout[3] == "mfcc_03" and fm.layout[16] == "d_mfcc_03"
    assert extract(clip, Recipe.parse("zcr,centroid,rolloff")).dim == 3
    with pytest.raises(FeatureError):
        Recipe.parse("")
    with pytest.raises(FeatureError):
        Recipe.parse("mfcc,chroma")


def test_extract_all_features_finite_on_silence():
    recipe = Recipe.parse("mfcc:13,zcr,centroid,rolloff,subbands:4,lpc:8,deltas")
    fm = extract(AudioClip(np.zeros(8000), 16000, "s"), recipe)
    assert fm.dim == recipe.frame_dim()
    assert np.all(np.isfinite(fm.values))
    assert fm.silent.all()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.sampled_from([0.0, 1e-9, 1e-3, 1.0, 1e3]))
def test_all_features_finite(seed, scale):
    x = scale * np.random.default_rng(seed).standard_normal(2000)
    fm = extract(AudioClip(x, 8000, "x"), Recipe.parse("mfcc:13,zcr,centroid,rolloff,subbands:3,lpc:6"))
    assert np.all(np.isfinite(fm.values))


def test_extract_deterministic(rng):
    clip = _clip(rng)
    recipe = Recipe.parse("mfcc:13,zcr,subbands:4,lpc:4,deltas")
    a, b = extract(clip, recipe), extract(clip, recipe)
    assert a.values.tobytes() == b.values.tobytes()


def test_extract_rate_mismatch(rng):
    bank = build_mel_filterbank(26, 1024, 16000)
    with pytest.raises(FeatureError, match="sample rate"):
        extract(_clip(rng, sr=8000), Recipe(), bank=bank)
    with pytest.raises(FeatureError, match="mixed sample rates"):
        extract_all([_clip(rng, sr=8000, cid="a"), _clip(rng, sr=16000, cid="b")], Recipe())


def test_feature_cache_round_trip(tmp_path, rng):
    recipe = Recipe.parse("mfcc:13,deltas")
    fm = extract(_clip(rng), recipe)
    write_feature_cache(tmp_path / "x.feat", fm, recipe, {"source_sha256": "abc"})
    back, header = read_feature_cache(tmp_path / "x.feat")
    assert back.values.tobytes() == fm.values.tobytes()
    assert back.layout == fm.layout
    assert header["cols"] == 26 and header["source_sha256"] == "abc"
    assert header["recipe_fingerprint"] == recipe.fingerprint()
    assert Recipe.from_dict(header["recipe"]) == recipe
