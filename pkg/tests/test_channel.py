import math

import numpy as np
import pytest
from scipy import signal

from cohsense.channel import (
    ChannelState,
    EventSpec,
    GroundTruth,
    event_components,
    jones_at,
    jones_series,
    propagate,
    synth_event,
)
from cohsense.core import JonesMatrix2, polar_decompose_array, random_unitary, stokes_from_row
from cohsense.errors import ConfigError
from cohsense.txsim import TxConfig, matched_filter, modulate


def rodrigues(v, n, theta):
    n = np.asarray(n, float) / np.linalg.norm(n)
    return v * np.cos(theta) + np.cross(n, v) * np.sin(theta) + n * np.dot(n, v) * (1 - np.cos(theta))


def row_stokes(j, row):
    return stokes_from_row(j[row, 0], j[row, 1]).array


def test_quiet_channel_is_identity():
    st = ChannelState(snr_db=math.inf, phase_linewidth_hz=0)
    for t in (0.0, 0.3, 17.0):
        np.testing.assert_array_equal(jones_at(st, t).array, np.eye(2))


def test_sop_step_rotates_row_stokes():
    ev = synth_event("sop_step", t_start=1.0, t_end=1e9, amplitude=np.pi / 2, axis=(0, 0, 1))
    st = ChannelState(events=(ev,))
    before = row_stokes(jones_at(st, 0.5).array, 0)
    after = row_stokes(jones_at(st, 1.5).array, 0)
    np.testing.assert_allclose(before, [1, 0, 0], atol=1e-15)
    # a row of J transforms with J^T, which mirrors the s3 component of
    # the rotation axis
    np.testing.assert_allclose(after, rodrigues(before, (0, 0, -1), np.pi / 2), atol=1e-12)
    assert abs(after[2]) < 1e-12
    assert np.arccos(np.clip(before @ after, -1, 1)) == pytest.approx(np.pi / 2)


def test_sop_step_general_axis_rodrigues():
    rng = np.random.default_rng(0)
    for _ in range(10):
        n = rng.standard_normal(3)
        n /= np.linalg.norm(n)
        theta = rng.uniform(-3, 3)
        ev = synth_event("sop_step", t_start=1.0, t_end=2.0, amplitude=theta, axis=n)
        st = ChannelState(events=(ev,))
        for row in (0, 1):
            s0 = row_stokes(jones_at(st, 0.0).array, row)
            s1 = row_stokes(jones_at(st, 1.5).array, row)
            np.testing.assert_allclose(s1, rodrigues(s0, n * [1, 1, -1], theta), atol=1e-12)
        # step ends at t_end
        np.testing.assert_array_equal(jones_at(st, 2.5).array, np.eye(2))


def rotation_ref(theta, n):
    """Independent su(2) rotation built from the matrix exponential."""
    from scipy.linalg import expm

    sig = [np.diag([1, -1]), np.array([[0, 1], [1, 0]]), np.array([[0, -1j], [1j, 0]])]
    return expm(-0.5j * theta * sum(k * s for k, s in zip(n, sig)))


def test_rotation_matches_matrix_exponential():
    rng = np.random.default_rng(1)
    n = rng.standard_normal(3)
    n /= np.linalg.norm(n)
    ev = synth_event("sop_step", t_start=0.0, t_end=1.0, amplitude=0.7, axis=n)
    j = jones_at(ChannelState(events=(ev,)), 0.5).array
    np.testing.assert_allclose(j, rotation_ref(0.7, n), atol=1e-13)


def test_phase_diff_is_stokes_blind():
    rng = np.random.default_rng(2)
    base = random_unitary(rng)
    ev = synth_event("phase_diff", t_start=0.0, t_end=10.0, amplitude=0.4)
    st = ChannelState(events=(ev,), base_rotation=base)
    j = jones_at(st, 5.0).array  # flat top of the envelope
    np.testing.assert_allclose(j, np.diag([1, np.exp(0.4j)]) @ base, atol=1e-14)
    for row in (0, 1):
        np.testing.assert_allclose(row_stokes(j, row), row_stokes(base, row), atol=1e-12)


def test_zero_amplitude_event_is_inert():
    rng = np.random.default_rng(3)
    base = random_unitary(rng)
    quiet = ChannelState(base_rotation=base, pdl_db=1.0)
    for kind, extra in [("swell_chirp", dict(f0=0.06, f1=0.1)), ("resonance", dict(f0=1.0)),
                        ("phase_diff", {}), ("sop_step", {}), ("phase_ramp", {})]:
        ev = synth_event(kind, t_start=0.0, t_end=100.0, amplitude=0.0, axis=(0, 1, 0), **extra)
        loud = ChannelState(base_rotation=base, pdl_db=1.0, events=(ev,))
        for t in (1.0, 33.3, 50.0):
            np.testing.assert_array_equal(jones_at(loud, t).array, jones_at(quiet, t).array)


def test_unitary_part_stays_unitary_and_exact():
    rng = np.random.default_rng(4)
    evs = (
        synth_event("swell_chirp", t_start=0, t_end=600, amplitude=0.3, f0=0.06, f1=0.1, axis=(1, 1, 0)),
        synth_event("resonance", t_start=100, t_end=400, amplitude=0.2, f0=1.0, axis=(0, 1, 1)),
        synth_event("phase_diff", t_start=50, t_end=500, amplitude=0.4),
        synth_event("phase_ramp", t_start=0, t_end=600, amplitude=3.0),
    )
    st = ChannelState(base_rotation=random_unitary(rng), pdl_db=2.0, pdl_axis=(0.3, -0.2, 0.9), events=evs)
    t = np.linspace(0, 600, 2001)
    j, phi = jones_series(st, t)
    p, u, ok = polar_decompose_array(j)
    assert ok.all()
    err = np.linalg.norm(np.conj(np.swapaxes(u, 1, 2)) @ u - np.eye(2), axis=(1, 2))
    assert err.max() < 1e-12
    rot, delta, phi_ev = event_components(evs, t)
    d = np.zeros_like(rot)
    d[:, 0, 0] = 1
    d[:, 1, 1] = np.exp(1j * delta)
    expected_u = d @ rot @ st.base_rotation * np.exp(1j * phi_ev)[:, None, None]
    np.testing.assert_allclose(u, expected_u, atol=1e-12)
    np.testing.assert_allclose(p, np.broadcast_to(st.pdl_factor(), p.shape), atol=1e-12)


def _tx(n=20_000):
    return modulate(TxConfig(), n)


def test_propagate_identity_noiseless_is_bit_exact():
    w = _tx(4096)
    out, truth = propagate(w, ChannelState(snr_db=math.inf, phase_linewidth_hz=0))
    assert np.array_equal(out.x, w.x) and np.array_equal(out.y, w.y)
    np.testing.assert_array_equal(truth.jones, np.broadcast_to(np.eye(2), truth.jones.shape))


def test_propagate_energy_conserved_without_pdl():
    w = _tx(8192)
    ev = synth_event("resonance", t_start=0, t_end=1, amplitude=0.5, f0=1e5, axis=(1, 0, 0))
    st = ChannelState(snr_db=math.inf, phase_linewidth_hz=1e5, events=(ev,),
                      base_rotation=random_unitary(np.random.default_rng(0)))
    out, _ = propagate(w, st)
    pin = np.abs(w.x) ** 2 + np.abs(w.y) ** 2
    pout = np.abs(out.x) ** 2 + np.abs(out.y) ** 2
    assert np.abs(pout - pin).max() <= 1e-12


def test_propagate_snr_matches_matched_filter_oracle():
    cfg = TxConfig()
    w = modulate(cfg, 200_000)
    base = random_unitary(np.random.default_rng(7))
    clean, _ = propagate(w, ChannelState(snr_db=math.inf, phase_linewidth_hz=0, base_rotation=base))
    noisy, _ = propagate(w, ChannelState(snr_db=10.0, phase_linewidth_hz=0, base_rotation=base, seed=3))
    for pol in ("x", "y"):
        sig = matched_filter(getattr(clean, pol), cfg)[::2]
        noise = matched_filter(getattr(noisy, pol) - getattr(clean, pol), cfg)[::2]
        esn0 = 10 * np.log10(np.mean(np.abs(sig) ** 2) / np.mean(np.abs(noise) ** 2))
        assert esn0 == pytest.approx(10.0, abs=0.1)


def test_propagate_deterministic():
    w = _tx(4096)
    st = ChannelState(seed=11, pdl_db=1.0, events=(synth_event("phase_ramp", t_start=0, t_end=1e-6, amplitude=1),))
    a, ta = propagate(w, st)
    b, tb = propagate(w, st)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert np.array_equal(ta.jones, tb.jones) and np.array_equal(ta.common_phase, tb.common_phase)


def _rotation_angle(j, axis):
    """theta from J = cos(theta/2) I - i sin(theta/2) n.sigma."""
    sig = [np.diag([1, -1]), np.array([[0, 1], [1, 0]]), np.array([[0, -1j], [1j, 0]])]
    ns = sum(k * s for k, s in zip(axis, sig))
    c = np.trace(j, axis1=1, axis2=2).real / 2
    s = -np.einsum("nij,ji->n", j, ns).imag / 2
    return 2 * np.arctan2(s, c)


def test_swell_chirp_instantaneous_frequency():
    # compressed: 600 physical seconds in 600k symbols at 2 Hz sensing
    ev = synth_event("swell_chirp", t_start=0.0, t_end=600.0, amplitude=0.2, f0=0.06, f1=0.10, axis=(0, 1, 0))
    sps_rate = 2e9
    n_sym = 38_400
    scale = 600.0 / (2 * n_sym / sps_rate)
    st = ChannelState(events=(ev,), snr_db=math.inf, phase_linewidth_hz=0, time_scale=scale, hold_symbols=16)
    w = modulate(TxConfig(), n_sym)
    _, truth = propagate(w, st)
    theta = _rotation_angle(truth.jones, (0, 1, 0))
    fs = 1 / np.diff(truth.times).mean()
    inst = np.diff(np.unwrap(np.angle(signal.hilbert(theta)))) * fs / (2 * np.pi)
    tmid = truth.times[:-1] + 0.5 / fs
    sel = (tmid > 150) & (tmid < 450)
    programmed = 0.06 + ev.slope * tmid[sel]
    assert np.max(np.abs(inst[sel] / programmed - 1)) < 0.05


def test_resonance_has_only_fundamental_and_harmonic():
    ev = synth_event("resonance", t_start=0.0, t_end=400.0, amplitude=0.1, f0=1.0, axis=(1, 0, 0))
    fs = 20.0
    t = np.arange(0, 400, 1 / fs)
    theta = ev.angle(t)
    spec = np.abs(np.fft.rfft(theta)) ** 2
    f = np.fft.rfftfreq(t.size, 1 / fs)
    near = (np.abs(f - 1.0) < 0.1) | (np.abs(f - 2.0) < 0.1)
    assert spec[near].sum() / spec.sum() > 0.999
    top2 = sorted(f[np.argsort(spec)[-1:]].tolist() + [f[np.argmax(np.where(np.abs(f - 2) < 0.5, spec, 0))]])
    assert top2 == pytest.approx([1.0, 2.0], abs=1 / 400)


def test_swell_ridge_slope_spectrogram_oracle():
    ev = synth_event("swell_chirp", t_start=0.0, t_end=600.0, amplitude=0.1, f0=0.06, f1=0.10)
    assert ev.slope == pytest.approx(0.04 / 600)
    fs = 2.0
    t = np.arange(0, 600, 1 / fs)
    f, tt, z = signal.stft(ev.angle(t), fs=fs, nperseg=128, noverlap=120, nfft=8192)
    keep = (tt > 120) & (tt < 480)
    peaks = f[np.argmax(np.abs(z[:, keep]), axis=0)]
    slope = np.polyfit(tt[keep], peaks, 1)[0]
    assert slope == pytest.approx(ev.slope, rel=0.1)


def test_event_validation():
    with pytest.raises(ConfigError):
        synth_event("swell_chirp", t_start=0, t_end=10, amplitude=1, f0=0.1, f1=0.06)
    with pytest.raises(ConfigError):
        synth_event("sop_step", t_start=5, t_end=1, amplitude=1)
    with pytest.raises(ConfigError):
        synth_event("bogus", t_start=0, t_end=1, amplitude=1)
    with pytest.raises(ConfigError):
        synth_event("resonance", t_start=0, t_end=1, amplitude=1)
    with pytest.raises(ConfigError):
        EventSpec("sop_step", 0, 1, 1.0, axis=(1, 1, 0))
    with pytest.raises(ConfigError):
        ChannelState(pdl_db=-1)
    ev = synth_event("sop_step", t_start=0, t_end=1, amplitude=1, axis=(3, 0, 4))
    assert ev.axis == pytest.approx((0.6, 0, 0.8))


def test_ground_truth_csv_roundtrip(tmp_path):
    w = _tx(2048)
    ev = synth_event("swell_chirp", t_start=0, t_end=2e-6, amplitude=0.3, f0=1e5, f1=1e6, axis=(1, 0, 0))
    _, truth = propagate(w, ChannelState(events=(ev,), pdl_db=1.0, seed=1))
    path = tmp_path / "truth.csv"
    truth.to_csv(path)
    back = GroundTruth.from_csv(path)
    np.testing.assert_array_equal(back.times, truth.times)
    np.testing.assert_array_equal(back.jones, truth.jones)
    np.testing.assert_array_equal(back.common_phase, truth.common_phase)
    assert path.read_text().splitlines()[0].startswith("t,xx_re,xx_im")
