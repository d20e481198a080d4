import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from cohsense import analytics as an
from cohsense.bridge import pack_records, parse
from cohsense.core import pdl_matrix, random_unitary, rotation_matrix, stokes_from_rows
from cohsense.errors import AlignmentError, NoRidge, TooShort


def series(values, rate=1.0, label="x", valid=None):
    values = np.asarray(values)
    return an.SensingSeries(np.arange(len(values)) / rate, values, rate, label, valid)


def diag_phase(delta):
    d = np.zeros(np.shape(delta) + (2, 2), np.complex128)
    d[..., 0, 0] = 1
    d[..., 1, 1] = np.exp(1j * np.asarray(delta))
    return d


# --------------------------------------------------------------------------
# taps -> channel estimate
# --------------------------------------------------------------------------


def test_centre_spike_taps_give_identity():
    taps = np.zeros((4, 17), np.complex128)
    taps[0, 8] = taps[3, 8] = 1
    assert np.array_equal(an.jones_from_tap_array(taps), np.eye(2))


@pytest.mark.parametrize("k", [0, 5, 16])
def test_pure_delay_has_unit_magnitude_response(k):
    taps = np.zeros((4, 17), np.complex128)
    taps[0, k] = taps[3, k] = 1
    for f in (0.0, 1e7, 2.3e8):
        h = an.jones_from_tap_array(taps, f, 1e9)
        # oracle: a delay of k half-symbols is exp(-i 2 pi f k T/2)
        expect = np.exp(-1j * 2 * np.pi * f * k * 0.5e-9)
        assert np.allclose(h, expect * np.eye(2), atol=1e-12)


def test_taps_complex_scales_codes():
    taps = np.zeros((1, 4, 17, 2), np.int16)
    taps[0, 0, 8] = [128, -64]
    rec = pack_records([0], [0], taps, [0.0], [0.0])
    z = an.taps_complex(rec)
    assert z.shape == (1, 4, 17) and z[0, 0, 8] == 1 - 0.5j
    assert an.jones_from_taps(parse(rec.tobytes())).array[0, 0] == 1 - 0.5j


def test_channel_estimate_inverts_and_restores_phases():
    rng = np.random.default_rng(0)
    j = pdl_matrix(1.5, (0, 1, 0)) @ random_unitary(rng, 20)
    px, py = rng.uniform(-3, 3, (2, 20))
    # CPE derotates output p by e^{-i p_p}, so taps that undo J carry e^{+i p_p} per row
    h = np.exp(1j * np.stack([px, py], -1))[..., None] * np.linalg.inv(j)
    est, ok = an.channel_estimate(h, px, py)
    assert ok.all()
    assert np.allclose(est, j, atol=1e-12)
    raw, _ = an.channel_estimate(h, px, py, compensate=False)
    assert np.allclose(raw, np.linalg.inv(h), atol=1e-12)


def test_channel_estimate_flags_singular():
    h = np.array([[[1, 1], [1, 1]], [[1, 0], [0, 1]]], np.complex128)
    est, ok = an.channel_estimate(h, [0, 0], [0, 0])
    assert ok.tolist() == [False, True]
    assert np.isnan(est[0]).all()


def test_permutation_matrix():
    m = an.permutation_matrix((1, 0), (0, 1))
    assert np.array_equal(m, [[0, 1], [1j, 0]])


# --------------------------------------------------------------------------
# PDL stripping, SOP, correlation
# --------------------------------------------------------------------------


def test_strip_pdl_passes_unitaries_through():
    u = random_unitary(np.random.default_rng(1), 50)
    out = an.strip_pdl(np.arange(50.0), u, 1.0)
    assert np.allclose(out.unitary, u, atol=1e-12)
    assert np.max(np.abs(out.pdl.values)) < 1e-9


def test_static_pdl_does_not_leak_into_unitary():
    rng = np.random.default_rng(2)
    u = random_unitary(rng, 50)
    out = an.strip_pdl(np.arange(50.0), pdl_matrix(1.7, (0.3, -0.5, 0.8)) @ u, 1.0)
    assert np.max(np.abs(out.unitary - u)) < 1e-9
    assert np.allclose(out.pdl.values, 1.7, atol=1e-9)


def test_strip_pdl_marks_singular_samples():
    j = np.stack([np.eye(2), np.zeros((2, 2)), np.full((2, 2), np.nan)]).astype(np.complex128)
    out = an.strip_pdl(np.arange(3.0), j, 1.0)
    assert out.pdl.valid.tolist() == [True, False, False]
    assert out.pdl.n_gaps == 2


def test_sop_constant_input_projects_to_zero():
    u = np.broadcast_to(random_unitary(np.random.default_rng(3)), (40, 2, 2))
    sop = an.sop_series(np.arange(40.0), u, 1.0)
    assert np.max(np.abs(sop.p1.values)) < 1e-12 and np.max(np.abs(sop.p2.values)) < 1e-12
    s = np.stack([sop.s1.values, sop.s2.values, sop.s3.values], -1)
    assert np.allclose(s @ sop.rotation.T, [0, 0, 1], atol=1e-12)
    assert np.allclose(sop.rotation @ sop.rotation.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(sop.rotation) == pytest.approx(1.0)


def rodrigues(s, k, theta):
    c, sn = np.cos(theta)[:, None], np.sin(theta)[:, None]
    return s * c + np.cross(k, s) * sn + k * (s @ k)[:, None] * (1 - c)


@pytest.mark.parametrize("row", ["first", "second"])
def test_sop_small_rotation_amplitude(row):
    """Right-multiplying by exp(-i theta/2 n.sigma) turns a row's Stokes
    vector by theta about (n1, n2, -n3); for small theta the projected
    excursion is |theta| |k x s0|."""
    rng = np.random.default_rng(4)
    u0 = random_unitary(rng)
    n = 400
    axis = np.array([0.3, 0.9, -0.2]) / np.linalg.norm([0.3, 0.9, -0.2])
    theta = 0.05 * np.sin(2 * np.pi * np.arange(n) / 50)
    u = u0 @ rotation_matrix(theta, axis)
    sop = an.sop_series(np.arange(n, dtype=float), u, 1.0, row=row, align_fraction=1.0)
    r = 0 if row == "first" else 1
    k = axis * [1, 1, -1]
    s0, _ = stokes_from_rows(u0[r, 0], u0[r, 1])
    expect = rodrigues(np.broadcast_to(s0, (n, 3)), k, theta)
    got = np.stack([sop.s1.values, sop.s2.values, sop.s3.values], -1)
    assert np.max(np.abs(got - expect)) < 1e-12
    mag = np.hypot(sop.p1.values, sop.p2.values)
    lever = np.linalg.norm(np.cross(k, s0))
    assert np.allclose(mag, np.abs(theta) * lever, atol=2e-3)


def test_sop_blind_to_global_phase():
    rng = np.random.default_rng(5)
    u = random_unitary(rng, 100)
    ph = np.exp(1j * rng.uniform(0, 2 * np.pi, 100))[:, None, None]
    a = an.sop_series(np.arange(100.0), u, 1.0)
    b = an.sop_series(np.arange(100.0), u * ph, 1.0)
    for x, y in ((a.p1, b.p1), (a.p2, b.p2), (a.s3, b.s3)):
        assert np.max(np.abs(x.values - y.values)) < 1e-12


def test_sop_needs_valid_alignment_window():
    u = np.full((10, 2, 2), np.nan, np.complex128)
    with pytest.raises(TooShort):
        an.sop_series(np.arange(10.0), u, 1.0)


def test_correlation_of_constant_is_one():
    u = np.broadcast_to(random_unitary(np.random.default_rng(6)), (30, 2, 2))
    c = an.correlation_series(np.arange(30.0), u, 1.0)
    assert np.allclose(c.values, 1, atol=1e-12)


def test_correlation_sees_inter_polarization_phase():
    u0 = random_unitary(np.random.default_rng(7))
    delta = np.linspace(0, 0.4, 41)
    c = an.correlation_series(np.arange(41.0), diag_phase(delta) @ u0, 1.0)
    mag, arg = an.correlation_parts(c)
    assert np.allclose(mag.values, np.abs(np.cos(delta / 2)), atol=1e-12)
    assert np.allclose(arg.values, delta / 2, atol=1e-12)
    assert mag.label == "corr_abs" and arg.label == "corr_arg"


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_correlation_invariant_to_static_frame_rotations(seed):
    rng = np.random.default_rng(seed)
    u = random_unitary(rng, 20)
    v, w = random_unitary(rng), random_unitary(rng)
    a = an.correlation_series(np.arange(20.0), u, 1.0)
    b = an.correlation_series(np.arange(20.0), v @ u @ w, 1.0)
    assert np.max(np.abs(a.values - b.values)) <= 1e-10


def test_sliding_correlation():
    u0 = random_unitary(np.random.default_rng(8))
    delta = 0.01 * np.arange(10)
    c = an.correlation_series(np.arange(10.0), diag_phase(delta) @ u0, 1.0, "sliding", lag=2)
    assert c.valid.tolist() == [False] * 2 + [True] * 8
    assert np.allclose(np.abs(c.values[2:]), np.cos(0.01), atol=1e-12)
    with pytest.raises(ValueError):
        an.correlation_series(np.arange(10.0), diag_phase(delta), 1.0, "sliding", lag=0)


# --------------------------------------------------------------------------
# interferometric phase
# --------------------------------------------------------------------------


def test_reconstruct_phase_zero_input():
    z = series(np.zeros(10))
    u = np.broadcast_to(np.eye(2, dtype=np.complex128), (10, 2, 2))
    common, diff = an.reconstruct_phase(z, z, u)
    assert np.array_equal(common.values, np.zeros(10)) and np.array_equal(diff.values, np.zeros(10))


def test_reconstruct_phase_ramp_and_det_term():
    n = 200
    ramp = np.linspace(0, 20, n)  # 0.1 rad per step, far below the slip limit
    u = np.exp(1j * 0.5 * ramp)[:, None, None] * np.eye(2)
    common, diff = an.reconstruct_phase(series(ramp), series(ramp - 0.3), u)
    # det(e^{i a} I) = e^{2 i a}: the det term adds a after halving
    assert np.allclose(common.values, (ramp + ramp - 0.3) / 2 + 0.5 * ramp, atol=1e-12)
    assert np.allclose(diff.values, 0.3)
    assert common.valid.all()


def test_reconstruct_phase_flags_cycle_slips():
    x = np.zeros(20)
    x[10:] = np.pi / 2
    u = np.broadcast_to(np.eye(2, dtype=np.complex128), (20, 2, 2))
    common, diff = an.reconstruct_phase(series(x), series(np.zeros(20)), u)
    assert common.valid.tolist() == [True] * 10 + [False] + [True] * 9


def test_reconstruct_phase_grid_mismatch():
    u = np.broadcast_to(np.eye(2, dtype=np.complex128), (10, 2, 2))
    with pytest.raises(AlignmentError):
        an.reconstruct_phase(series(np.zeros(10)), series(np.zeros(10), rate=2.0), u)
    with pytest.raises(AlignmentError):
        an.reconstruct_phase(series(np.zeros(10)), series(np.zeros(10)), u[:5])


def test_series_length_mismatch():
    with pytest.raises(AlignmentError):
        an.SensingSeries(np.arange(3.0), np.zeros(4), 1.0, "x")


# --------------------------------------------------------------------------
# spectrogram
# --------------------------------------------------------------------------


def test_tone_lands_in_its_bin():
    fs, f0, n = 2.0, 0.08, 4096
    t = np.arange(8 * n) / fs
    g = an.spectrogram(series(np.sin(2 * np.pi * f0 * t), fs), segment_len=n)
    peak = g.freqs[np.argmax(g.power_db.mean(axis=1))]
    assert abs(peak - f0) <= g.resolution_hz
    assert g.resolution_hz == fs / n
    assert g.freqs[-1] == fs / 2


def test_white_noise_is_flat():
    fs, sigma = 10.0, 0.7
    x = sigma * np.random.default_rng(9).standard_normal(256 * 400)
    g = an.spectrogram(series(x, fs), segment_len=256)
    mean = 10 * np.log10(np.mean(10 ** (g.power_db[1:-1] / 10), axis=1))
    # one-sided density of white noise: 2 sigma^2 / fs
    expect = 10 * np.log10(2 * sigma**2 / fs)
    assert np.all(np.abs(mean - expect) < 3.0)
    assert abs(np.mean(mean) - expect) < 0.3


def test_constant_series_sits_at_floor():
    g = an.spectrogram(series(np.full(1024, 0.3)), segment_len=256)
    assert np.all(g.power_db <= -250)


def test_parseval_per_segment():
    """Summed one-sided density equals the window-weighted mean square of the
    detrended segment (an identity of the discrete Fourier transform)."""
    rng = np.random.default_rng(10)
    fs, n = 4.0, 256
    x = rng.standard_normal(n) + np.sin(np.arange(n))
    g = an.spectrogram(series(x, fs), segment_len=n)
    w = signal.get_window("hann", n)
    seg = x - x.mean()
    expect = np.sum((w * seg) ** 2) / np.sum(w**2)
    got = np.sum(10 ** (g.power_db[:, 0] / 10)) * fs / n
    assert got == pytest.approx(expect, rel=1e-9)
    # and within 1% of the signal variance for a long white record
    y = rng.standard_normal(n * 200)
    gy = an.spectrogram(series(y, fs), segment_len=n, overlap=0.0)
    total = np.mean(np.sum(10 ** (gy.power_db / 10), axis=0) * fs / n)
    assert total == pytest.approx(np.var(y), rel=0.01)


def test_gap_segments_are_nan():
    x = np.random.default_rng(11).standard_normal(1024)
    valid = np.ones(1024, bool)
    valid[600] = False
    g = an.spectrogram(series(x, valid=valid), segment_len=256, overlap=0.5)
    bad = np.isnan(g.power_db).all(axis=0)
    starts = np.arange(g.times.size) * 128
    assert bad.tolist() == [(s <= 600 < s + 256) for s in starts]


def test_spectrogram_too_short():
    with pytest.raises(TooShort):
        an.spectrogram(series(np.zeros(100)), segment_len=256)


def test_mean_grid_is_power_average():
    x = np.random.default_rng(12).standard_normal((2, 1024))
    a = an.spectrogram(series(x[0]), 128)
    b = an.spectrogram(series(x[1]), 128)
    m = an.mean_grid(a, b)
    assert np.allclose(10 ** (m.power_db / 10), (10 ** (a.power_db / 10) + 10 ** (b.power_db / 10)) / 2)
    with pytest.raises(AlignmentError):
        an.mean_grid(a, an.spectrogram(series(x[1]), 64))


# --------------------------------------------------------------------------
# ridges and peaks
# --------------------------------------------------------------------------


def chirp_series(f0=0.06, f1=0.10, dur=600.0, fs=2.0, noise=0.05, seed=13):
    t = np.arange(int(dur * fs)) / fs
    k = (f1 - f0) / dur
    x = np.sin(2 * np.pi * (f0 * t + 0.5 * k * t**2))
    x = x + noise * np.random.default_rng(seed).standard_normal(t.size)
    return series(x, fs), k


def test_chirp_slope_recovered():
    s, k = chirp_series()
    assert k == pytest.approx(6.667e-5, rel=1e-3)
    g = an.spectrogram(s, segment_len=128, overlap=0.75)
    r = an.ridge(g, (0.05, 0.12))
    assert r.slope_hz_per_s == pytest.approx(k, rel=0.1)
    assert np.all((r.freqs >= 0.05) & (r.freqs <= 0.12))


def test_stationary_tone_has_zero_slope():
    t = np.arange(1200) / 2.0
    g = an.spectrogram(series(np.sin(2 * np.pi * 0.08 * t), 2.0), segment_len=128, overlap=0.75)
    assert abs(an.estimate_chirp_slope(g, (0.05, 0.12))) < 1e-6


def test_noise_has_no_ridge():
    x = np.random.default_rng(14).standard_normal(1200)
    g = an.spectrogram(series(x, 2.0), segment_len=128, overlap=0.75)
    with pytest.raises(NoRidge):
        an.estimate_chirp_slope(g, (0.05, 0.12))


def test_ridge_band_validation():
    s, _ = chirp_series()
    g = an.spectrogram(s, segment_len=128)
    with pytest.raises(ValueError):
        an.ridge(g, (0.2, 0.1))
    with pytest.raises(ValueError):
        an.ridge(g, (0.5, 2.0))


def test_peaks_at_fundamental_and_harmonic():
    fs = 64.0
    t = np.arange(int(60 * fs)) / fs
    x = 0.1 * np.sin(2 * np.pi * t) + 0.05 * np.sin(4 * np.pi * t)
    x = x + 0.01 * np.random.default_rng(15).standard_normal(t.size)
    g = an.spectrogram(series(x, fs), 512)
    peaks = an.spectral_peaks(g, 10.0)
    assert [round(f, 3) for f, _ in peaks] == [1.0, 2.0]
    assert all(h >= 10 for _, h in peaks)


def test_red_noise_has_no_peaks():
    x = np.cumsum(np.random.default_rng(16).standard_normal(256 * 20))
    g = an.spectrogram(series(x), 256)
    assert an.spectral_peaks(g, 10.0) == []


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def test_series_csv_round_trip(tmp_path):
    rng = np.random.default_rng(17)
    a = series(rng.normal(size=50), 3.0, "a")
    c = series(rng.normal(size=50) + 1j * rng.normal(size=50), 3.0, "c")
    valid = np.ones(50, bool)
    valid[7] = False
    b = series(np.where(valid, rng.normal(size=50), np.nan), 3.0, "b", valid)
    path = tmp_path / "s.csv"
    an.series_to_csv(path, [a, b, c])
    back = an.series_from_csv(path)
    assert list(back) == ["t", "a", "b", "c_re", "c_im", "valid"]
    assert np.array_equal(back["t"], a.t)
    assert np.array_equal(back["a"], a.values)
    assert np.array_equal(back["b"], b.values, equal_nan=True)
    assert np.array_equal(back["c_re"] + 1j * back["c_im"], c.values)
    assert back["valid"].tolist() == valid.astype(float).tolist()


def test_series_csv_rejects_mixed_grids(tmp_path):
    with pytest.raises(AlignmentError):
        an.series_to_csv(tmp_path / "x.csv", [series(np.zeros(5)), series(np.zeros(5), 2.0)])


def test_spectrogram_csv_round_trip(tmp_path):
    x = np.random.default_rng(18).standard_normal(2048)
    g = an.spectrogram(series(x, 8.0), 256)
    path = tmp_path / "g.csv"
    an.spectrogram_to_csv(path, g)
    times, freqs, power = an.spectrogram_from_csv(path)
    assert np.array_equal(times, g.times) and np.array_equal(freqs, g.freqs)
    assert np.array_equal(power, g.power_db)
    header = path.read_text().splitlines()[0].split(",")
    assert header[0] == "freq_hz" and len(header) == g.times.size + 1
