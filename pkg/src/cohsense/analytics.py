"""Sensing observables from tap/phase snapshot streams.

The equalizer converges to the inverse of the channel up to a per-output
phase and an output permutation.  The phase registers of the tracker undo
the per-output phase, so the channel estimate used throughout is

    J_est(t) = H(0; t)^-1 @ diag(exp(1j*cum_phase_x), exp(1j*cum_phase_y))

which equals the channel up to a *constant* right factor (permutation and
quarter turns).  Correlation magnitudes and aligned Stokes traces are blind
to that factor; ground-truth comparisons remove it with the alignment found
by the receiver.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy import signal

from .core import pdl_db_array, polar_decompose_array, stokes_from_rows, unitary_correlation_array
from .errors import AlignmentError, NoRidge, TooShort

DB_FLOOR = -300.0
SLIP_LIMIT = np.pi / 4


@dataclass
class SensingSeries:
    """Uniformly sampled series; invalid samples are NaN and ``valid`` False."""

    t: np.ndarray
    values: np.ndarray
    rate_hz: float
    label: str
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.values = np.asarray(self.values)
        if self.values.shape[:1] != self.t.shape:
            raise AlignmentError(f"{self.label}: {self.values.shape[0]} values for {self.t.size} times")
        if self.valid is None:
            self.valid = np.isfinite(self.values) if self.values.ndim == 1 else np.ones(self.t.size, bool)
        self.valid = np.asarray(self.valid, bool)

    def __len__(self) -> int:
        return self.t.size

    @property
    def n_gaps(self) -> int:
        return int(np.count_nonzero(~self.valid))


@dataclass
class SpectrogramGrid:
    times: np.ndarray  # segment centres, s
    freqs: np.ndarray  # Hz, 0 .. rate/2
    power_db: np.ndarray  # (n_freqs, n_times), PSD in dB re unit^2/Hz
    window: str
    overlap: float
    segment_len: int
    rate_hz: float
    label: str = ""

    def __post_init__(self):
        if self.power_db.shape != (self.freqs.size, self.times.size):
            raise ValueError("grid shape does not match axes")

    @property
    def resolution_hz(self) -> float:
        return self.rate_hz / self.segment_len


# --------------------------------------------------------------------------
# taps -> matrices
# --------------------------------------------------------------------------


def taps_complex(records: np.ndarray, tap_frac_bits: int = 7) -> np.ndarray:
    """``(n, 4, n_taps)`` complex taps from structured ``.snap`` records."""
    t = records["taps"].astype(np.float64) * 2.0**-tap_frac_bits
    return t[..., 0] + 1j * t[..., 1]


def jones_from_tap_array(taps: np.ndarray, freq_offset_hz: float = 0.0, symbol_rate: float = 1e9) -> np.ndarray:
    """Equalizer response ``H(w)`` per snapshot, shape ``(n, 2, 2)``.

    ``H_pq = sum_k w_pq[k] exp(-1j w k T/2)``; at ``w = 0`` this is the
    plain tap sum.
    """
    taps = np.asarray(taps)
    k = np.arange(taps.shape[-1])
    if freq_offset_hz == 0:
        h = taps.sum(axis=-1)
    else:
        ph = np.exp(-1j * 2 * np.pi * freq_offset_hz * k / (2 * symbol_rate))
        h = taps @ ph
    return h.reshape(h.shape[:-1] + (2, 2))


def jones_from_taps(snapshot, freq_offset_hz: float = 0.0, symbol_rate: float = 1e9, tap_frac_bits: int = 7):
    from .core import JonesMatrix2

    taps = snapshot.complex_taps * 2.0**-tap_frac_bits
    return JonesMatrix2.from_array(jones_from_tap_array(taps, freq_offset_hz, symbol_rate))


def _safe_inv(h: np.ndarray, rtol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    det = h[..., 0, 0] * h[..., 1, 1] - h[..., 0, 1] * h[..., 1, 0]
    scale = np.sum(np.abs(h) ** 2, axis=(-2, -1))
    ok = np.abs(det) > rtol * scale
    d = np.where(ok, det, 1.0)
    inv = np.empty_like(h)
    inv[..., 0, 0] = h[..., 1, 1]
    inv[..., 1, 1] = h[..., 0, 0]
    inv[..., 0, 1] = -h[..., 0, 1]
    inv[..., 1, 0] = -h[..., 1, 0]
    inv /= d[..., None, None]
    inv[~ok] = np.nan
    return inv, ok


def channel_estimate(h: np.ndarray, phase_x, phase_y, compensate: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """``H^-1`` with the tracked phases folded back in (see module doc).

    Returns ``(J_est, ok)``; singular samples are NaN with ``ok`` False.
    """
    inv, ok = _safe_inv(h)
    if compensate:
        inv = inv * np.exp(1j * np.stack([np.asarray(phase_x), np.asarray(phase_y)], axis=-1))[..., None, :]
    return inv, ok


def permutation_matrix(source, quarter) -> np.ndarray:
    """``Pi`` with ``Pi[p, source[p]] = 1j**quarter[p]``: maps transmitted
    symbols to receiver outputs.  ``J_est @ Pi`` is the channel itself."""
    m = np.zeros((2, 2), np.complex128)
    for p in range(2):
        m[p, source[p]] = 1j ** quarter[p]
    return m


# --------------------------------------------------------------------------
# series operations
# --------------------------------------------------------------------------


@dataclass
class PdlStripped:
    unitary: np.ndarray  # (n, 2, 2), NaN at gaps
    pdl: SensingSeries


def strip_pdl(t, jones: np.ndarray, rate_hz: float, valid=None) -> PdlStripped:
    """Per-sample polar decomposition; singular samples become gaps."""
    jones = np.asarray(jones, dtype=np.complex128)
    good = np.all(np.isfinite(jones), axis=(-2, -1))
    if valid is not None:
        good &= np.asarray(valid, bool)
    filled = np.where(good[:, None, None], jones, np.eye(2))
    p, u, ok = polar_decompose_array(filled)
    ok &= good
    u = np.where(ok[:, None, None], u, np.nan)
    pdl = np.where(ok, pdl_db_array(p), np.nan)
    return PdlStripped(u, SensingSeries(t, pdl, rate_hz, "pdl_db", ok))


def _align_rotation(m: np.ndarray) -> np.ndarray:
    """Proper rotation taking unit vector ``m`` to (0, 0, 1)."""
    z = np.array([0.0, 0.0, 1.0])
    v = np.cross(m, z)
    s = np.linalg.norm(v)
    c = float(np.dot(m, z))
    if s < 1e-12:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx * ((1 - c) / s**2)


@dataclass
class SopSeries:
    s1: SensingSeries
    s2: SensingSeries
    s3: SensingSeries
    p1: SensingSeries  # S1 after rotating the mean to S3 = 1
    p2: SensingSeries
    rotation: np.ndarray  # 3x3 applied to every Stokes vector


def sop_series(t, unitary: np.ndarray, rate_hz: float, row: Literal["first", "second"] = "first",
               align_fraction: float = 0.1, valid=None) -> SopSeries:
    if len(unitary) == 0:
        raise TooShort("empty unitary series")
    r = {"first": 0, "second": 1}[row]
    a = unitary[:, r, 0]
    b = unitary[:, r, 1]
    good = np.isfinite(a) & np.isfinite(b)
    if valid is not None:
        good &= np.asarray(valid, bool)
    s, s0 = stokes_from_rows(np.where(good, a, 1.0), np.where(good, b, 0.0))
    good &= s0 > 1e-20
    s[~good] = np.nan
    n_align = max(1, int(round(align_fraction * len(s))))
    win = s[:n_align][good[:n_align]]
    if win.size == 0:
        raise TooShort("no valid samples in the alignment window")
    mean = win.mean(axis=0)
    norm = np.linalg.norm(mean)
    rot = _align_rotation(mean / norm) if norm > 0 else np.eye(3)
    proj = s @ rot.T
    mk = lambda v, lbl: SensingSeries(t, v, rate_hz, lbl, good)
    return SopSeries(mk(s[:, 0], "s1"), mk(s[:, 1], "s2"), mk(s[:, 2], "s3"),
                     mk(proj[:, 0], "s1_projected"), mk(proj[:, 1], "s2_projected"), rot)


def correlation_series(t, unitary: np.ndarray, rate_hz: float,
                       reference: Literal["first_sample", "sliding"] = "first_sample", lag: int = 1,
                       valid=None) -> SensingSeries:
    """``C_t = Tr(U_ref^H U_t) / 2`` against the first valid sample or the
    sample ``lag`` steps earlier."""
    unitary = np.asarray(unitary)
    good = np.all(np.isfinite(unitary), axis=(-2, -1))
    if valid is not None:
        good &= np.asarray(valid, bool)
    if reference == "first_sample":
        idx = np.flatnonzero(good)
        if idx.size == 0:
            raise TooShort("no valid samples")
        c = unitary_correlation_array(unitary, unitary[idx[0]])
    elif reference == "sliding":
        if lag < 1:
            raise ValueError("lag must be >= 1")
        c = np.full(len(unitary), np.nan + 0j)
        c[lag:] = unitary_correlation_array(unitary[lag:], unitary[:-lag])
        good = good.copy()
        good[lag:] &= good[:-lag]
        good[:lag] = False
    else:
        raise ValueError(f"unknown reference {reference!r}")
    c = np.where(good, c, np.nan)
    return SensingSeries(t, c, rate_hz, "correlation", good)


def correlation_parts(c: SensingSeries) -> tuple[SensingSeries, SensingSeries]:
    return (
        SensingSeries(c.t, np.abs(c.values), c.rate_hz, "corr_abs", c.valid),
        SensingSeries(c.t, np.angle(c.values), c.rate_hz, "corr_arg", c.valid),
    )


def _unwrap_valid(x: np.ndarray, good: np.ndarray) -> np.ndarray:
    out = np.full_like(x, np.nan)
    out[good] = np.unwrap(x[good])
    return out


def reconstruct_phase(phase_x: SensingSeries, phase_y: SensingSeries, raw_unitary: np.ndarray,
                      ) -> tuple[SensingSeries, SensingSeries]:
    """Interferometric phases.

    ``common = (cum_x + cum_y)/2 + unwrap(arg det U)/2`` with ``U`` the
    unitary part of the *uncompensated* ``H(0)^-1``; ``differential =
    cum_x - cum_y``.  Steps larger than pi/4 between consecutive samples
    are flagged as cycle slips (gaps).
    """
    if phase_x.t.shape != phase_y.t.shape or not np.array_equal(phase_x.t, phase_y.t):
        raise AlignmentError("phase series are on different time grids")
    if len(raw_unitary) != len(phase_x):
        raise AlignmentError("unitary series does not match the phase series")
    good = phase_x.valid & phase_y.valid & np.all(np.isfinite(raw_unitary), axis=(-2, -1))
    det = raw_unitary[:, 0, 0] * raw_unitary[:, 1, 1] - raw_unitary[:, 0, 1] * raw_unitary[:, 1, 0]
    arg = _unwrap_valid(np.angle(det), good)
    common = 0.5 * (phase_x.values + phase_y.values) + 0.5 * arg
    diff = phase_x.values - phase_y.values
    slip = np.zeros(len(common), bool)
    gi = np.flatnonzero(good)
    if gi.size > 1:
        jump = (np.abs(np.diff(common[gi])) > SLIP_LIMIT) | (np.abs(np.diff(diff[gi])) > SLIP_LIMIT)
        slip[gi[1:][jump]] = True
    good = good & ~slip
    common = np.where(good, common, np.nan)
    diff = np.where(good, diff, np.nan)
    return (
        SensingSeries(phase_x.t, common, phase_x.rate_hz, "phase_common", good),
        SensingSeries(phase_x.t, diff, phase_x.rate_hz, "phase_differential", good),
    )


# --------------------------------------------------------------------------
# spectral analysis
# --------------------------------------------------------------------------


def spectrogram(series: SensingSeries, segment_len: int = 256, overlap: float = 0.5,
                window: str = "hann") -> SpectrogramGrid:
    """One-sided PSD per segment in dB, mean removed per segment.

    Segments touching a gap are NaN columns rather than bridged.
    """
    x = np.asarray(series.values, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("spectrogram needs a real 1-D series")
    if segment_len < 2 or len(x) < segment_len:
        raise TooShort(f"series of {len(x)} samples is shorter than segment_len={segment_len}")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must be in [0, 1)")
    good = series.valid & np.isfinite(x)
    fill = np.where(good, x, np.nanmean(x[good]) if good.any() else 0.0)
    noverlap = int(round(overlap * segment_len))
    f, tt, p = signal.spectrogram(fill, fs=series.rate_hz, window=window, nperseg=segment_len,
                                  noverlap=noverlap, detrend="constant", scaling="density", mode="psd")
    step = segment_len - noverlap
    bad = ~good
    if bad.any():
        cb = np.concatenate([[0], np.cumsum(bad)])
        starts = np.arange(tt.size) * step
        hit = cb[starts + segment_len] - cb[starts] > 0
        p[:, hit] = np.nan
    with np.errstate(divide="ignore", invalid="ignore"):
        db = 10 * np.log10(p)
    db = np.where(np.isnan(p), np.nan, np.maximum(db, DB_FLOOR))
    t0 = series.t[0] if len(series.t) else 0.0
    return SpectrogramGrid(tt + t0, f, db, window, noverlap / segment_len, segment_len, series.rate_hz, series.label)


def mean_grid(a: SpectrogramGrid, b: SpectrogramGrid, label: str = "mean") -> SpectrogramGrid:
    """Power average of two grids on the same axes (the S1/S2 aggregate)."""
    if a.power_db.shape != b.power_db.shape or not np.array_equal(a.times, b.times):
        raise AlignmentError("grids differ in shape")
    p = 0.5 * (10 ** (a.power_db / 10) + 10 ** (b.power_db / 10))
    with np.errstate(divide="ignore"):
        db = np.maximum(10 * np.log10(p), DB_FLOOR)
    return SpectrogramGrid(a.times, a.freqs, db, a.window, a.overlap, a.segment_len, a.rate_hz, label)


@dataclass
class Ridge:
    slope_hz_per_s: float
    intercept_hz: float
    times: np.ndarray
    freqs: np.ndarray
    prominence_db: np.ndarray


def ridge(grid: SpectrogramGrid, band: Sequence[float], threshold_db: float = 12.0,
          min_fraction: float = 0.25) -> Ridge:
    """Per-slice in-band peak (parabolic interpolation) with prominence over
    the slice median; slices below ``threshold_db`` are discarded."""
    lo, hi = band
    if lo >= hi:
        raise ValueError("band must satisfy f_lo < f_hi")
    if lo < grid.freqs[0] - 1e-12 or hi > grid.freqs[-1] + 1e-12:
        raise ValueError(f"band {band} outside the grid 0..{grid.freqs[-1]} Hz")
    sel = np.flatnonzero((grid.freqs >= lo) & (grid.freqs <= hi))
    if sel.size == 0:
        raise NoRidge("no frequency bins in band")
    cols = np.flatnonzero(np.all(np.isfinite(grid.power_db), axis=0))
    if cols.size == 0:
        raise NoRidge("no valid slices")
    g = grid.power_db[:, cols]
    sub = g[sel]
    k = sub.argmax(axis=0)
    peak = sub[k, np.arange(cols.size)]
    prom = peak - np.median(g, axis=0)
    # parabolic refinement on the dB values
    idx = sel[k]
    frac = np.zeros(cols.size)
    inner = (idx > 0) & (idx < grid.freqs.size - 1)
    a = g[idx[inner] - 1, np.flatnonzero(inner)]
    b = g[idx[inner], np.flatnonzero(inner)]
    c = g[idx[inner] + 1, np.flatnonzero(inner)]
    den = a - 2 * b + c
    frac[inner] = np.where(den < 0, 0.5 * (a - c) / np.where(den < 0, den, 1.0), 0.0)
    df = grid.freqs[1] - grid.freqs[0]
    f = grid.freqs[idx] + np.clip(frac, -0.5, 0.5) * df
    keep = prom >= threshold_db
    if keep.sum() < max(3, int(np.ceil(min_fraction * cols.size))):
        raise NoRidge(f"only {int(keep.sum())} of {cols.size} slices exceed {threshold_db} dB prominence")
    tt = grid.times[cols][keep]
    ff = f[keep]
    w = prom[keep]
    slope, intercept = np.polyfit(tt, ff, 1, w=np.sqrt(w))
    return Ridge(float(slope), float(intercept), tt, ff, w)


def estimate_chirp_slope(grid: SpectrogramGrid, band: Sequence[float], threshold_db: float = 12.0,
                         min_fraction: float = 0.25) -> float:
    """Hz/s slope of the spectral ridge inside ``band``; raises NoRidge."""
    return ridge(grid, band, threshold_db, min_fraction).slope_hz_per_s


def spectral_peaks(grid: SpectrogramGrid, min_height_db: float = 10.0, fmin: float = 0.0,
                   min_prominence_db: float = 6.0) -> list[tuple[float, float]]:
    """Peaks of the time-averaged spectrum standing ``min_height_db`` above
    its median bin and ``min_prominence_db`` above the local background
    (so ripple on a red spectrum does not count).  Returns
    ``(freq_hz, height_db)`` sorted by frequency."""
    cols = np.all(np.isfinite(grid.power_db), axis=0)
    if not cols.any():
        return []
    mean_db = 10 * np.log10(np.mean(10 ** (grid.power_db[:, cols] / 10), axis=1))
    base = np.median(mean_db)
    # DC is excluded, so the first AC bin has no left neighbour and a red
    # spectrum cannot masquerade as a peak there
    idx, _ = signal.find_peaks(mean_db[1:], height=base + min_height_db, prominence=min_prominence_db)
    idx = idx + 1
    return [(float(grid.freqs[i]), float(mean_db[i] - base)) for i in idx if grid.freqs[i] >= fmin]


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def series_to_csv(path: str | Path, series: Sequence[SensingSeries]) -> None:
    """One column per series on a shared time axis, plus a ``valid`` column
    (all series valid)."""
    if not series:
        raise ValueError("nothing to write")
    t = series[0].t
    for s in series[1:]:
        if not np.array_equal(s.t, t):
            raise AlignmentError(f"{s.label} is on a different time grid")
    cols, names = [t], ["t"]
    for s in series:
        if np.iscomplexobj(s.values):
            cols += [s.values.real, s.values.imag]
            names += [f"{s.label}_re", f"{s.label}_im"]
        else:
            cols.append(s.values)
            names.append(s.label)
    valid = np.logical_and.reduce([s.valid for s in series])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["valid"])
        for i in range(t.size):
            w.writerow([repr(float(c[i])) for c in cols] + [int(valid[i])])


def series_from_csv(path: str | Path) -> dict[str, np.ndarray]:
    data = np.genfromtxt(path, delimiter=",", names=True)
    return {n: np.atleast_1d(data[n]) for n in data.dtype.names}


def spectrogram_to_csv(path: str | Path, grid: SpectrogramGrid) -> None:
    """Frequency rows by time columns; the header row holds the times."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["freq_hz"] + [repr(float(t)) for t in grid.times])
        for f, row in zip(grid.freqs, grid.power_db):
            w.writerow([repr(float(f))] + [repr(float(v)) for v in row])


def spectrogram_from_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    raw = np.genfromtxt(path, delimiter=",")
    return raw[0, 1:], raw[1:, 0], raw[1:, 1:]
