"""End-to-end glue: transmit -> channel -> receiver -> snapshot records, and
records -> sensing products."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import analytics as an
from .bridge import Gap, SnapshotBridge, StreamConfig, decimate_records, records_to_snapshots, snapshots_to_records
from .channel import ChannelState, GroundTruth, propagate
from .errors import NoRidge, TooShort
from .rxdsp import RxConfig, RxResult, run_receiver
from .txsim import TxConfig, transmit


@dataclass
class Simulation:
    truth: GroundTruth
    rx: RxResult
    tx_symbols: np.ndarray = field(repr=False)

    @property
    def records(self) -> np.ndarray:
        return self.rx.snapshots

    def converged_snapshot(self, interval: int) -> int:
        """Index of the first snapshot taken after the equalizer settled."""
        return -(-self.rx.report.converged_at // interval)


def simulate(tx: TxConfig, channel: ChannelState, rx: RxConfig, n_symbols: int) -> Simulation:
    frame = transmit(tx, n_symbols)
    wave, truth = propagate(frame.wave, channel, tx.samples_per_symbol)
    del frame.wave
    result = run_receiver(wave, rx, tx)
    return Simulation(truth, result, frame.symbols)


def through_bridge(records: np.ndarray, cfg: StreamConfig) -> tuple[np.ndarray, list[Gap]]:
    """Stream records through a :class:`SnapshotBridge`, draining it once
    per ``capacity`` pushes (an offline consumer that keeps up)."""
    b = SnapshotBridge(cfg)
    out = []
    for snap in records_to_snapshots(records):
        b.push(snap)
        if len(b) >= cfg.capacity:
            out += b.poll()
    out += b.poll()
    return snapshots_to_records(out), list(b.gaps)


@dataclass(frozen=True)
class AnalysisConfig:
    row: str = "first"
    align_fraction: float = 0.1
    correlation_reference: str = "first_sample"
    correlation_lag: int = 1
    segment_len: int = 256
    overlap: float = 0.5
    window: str = "hann"
    time_scale: float = 1.0
    symbol_rate: float = 1e9
    tap_frac_bits: int = 7
    decimation: int = 1
    decimation_mode: str = "subsample"
    skip_snapshots: int = 0  # leading native-rate snapshots to drop (equalizer still converging)
    peak_min_db: float = 10.0
    ridge_threshold_db: float = 12.0
    chirp_bands: tuple = ((0.05, 0.12),)


@dataclass
class SensingProducts:
    t: np.ndarray
    rate_hz: float
    jones: np.ndarray  # compensated channel estimate per snapshot
    unitary: np.ndarray
    pdl: an.SensingSeries
    sop: an.SopSeries
    correlation: an.SensingSeries
    corr_abs: an.SensingSeries
    corr_arg: an.SensingSeries
    common: an.SensingSeries
    differential: an.SensingSeries
    spectrograms: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    def series(self) -> list[an.SensingSeries]:
        return [self.sop.s1, self.sop.s2, self.sop.s3, self.sop.p1, self.sop.p2, self.pdl,
                self.corr_abs, self.corr_arg, self.common, self.differential]


def record_times(records: np.ndarray, time_scale: float = 1.0) -> tuple[np.ndarray, float]:
    t = records["t_ns"].astype(np.float64) * 1e-9 * time_scale
    if t.size < 2:
        raise TooShort("need at least two snapshots")
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise an.AlignmentError("snapshot times must increase")
    return t, float(1.0 / np.median(dt))


def analyze_records(records: np.ndarray, cfg: AnalysisConfig = AnalysisConfig()) -> SensingProducts:
    records = records[cfg.skip_snapshots :]
    if cfg.decimation > 1:
        records = decimate_records(records, StreamConfig(decimation=cfg.decimation, mode=cfg.decimation_mode))
    t, rate = record_times(records, cfg.time_scale)
    taps = an.taps_complex(records, cfg.tap_frac_bits)
    h = an.jones_from_tap_array(taps)
    cx = records["cum_phase_x"].astype(np.float64)
    cy = records["cum_phase_y"].astype(np.float64)
    j_est, ok = an.channel_estimate(h, cx, cy)
    j_raw, _ = an.channel_estimate(h, cx, cy, compensate=False)

    stripped = an.strip_pdl(t, j_est, rate, ok)
    raw_u = an.strip_pdl(t, j_raw, rate, ok).unitary
    sop = an.sop_series(t, stripped.unitary, rate, cfg.row, cfg.align_fraction, stripped.pdl.valid)
    corr = an.correlation_series(t, stripped.unitary, rate, cfg.correlation_reference, cfg.correlation_lag,
                                 stripped.pdl.valid)
    c_abs, c_arg = an.correlation_parts(corr)
    px = an.SensingSeries(t, cx, rate, "cum_phase_x", ok)
    py = an.SensingSeries(t, cy, rate, "cum_phase_y", ok)
    common, diff = an.reconstruct_phase(px, py, raw_u)

    prod = SensingProducts(t, rate, j_est, stripped.unitary, stripped.pdl, sop, corr, c_abs, c_arg, common, diff)
    report: dict = {
        "n_snapshots": int(t.size),
        "rate_hz": rate,
        "duration_s": float(t[-1] - t[0]),
        "gaps": {s.label: s.n_gaps for s in prod.series()},
        "pdl_db_mean": float(np.nanmean(stripped.pdl.values)) if stripped.pdl.valid.any() else None,
        "corr_abs_min": float(np.nanmin(c_abs.values)) if c_abs.valid.any() else None,
        "sop_projected_rms": float(np.sqrt(np.nanmean(sop.p1.values**2 + sop.p2.values**2) / 2)),
        "spectrograms": {},
    }
    seg = min(cfg.segment_len, t.size)
    if seg >= 16:
        grids = {}
        for s in (sop.p1, sop.p2, common, diff, c_abs):
            try:
                grids[s.label] = an.spectrogram(s, seg, cfg.overlap, cfg.window)
            except TooShort:
                continue
        if "s1_projected" in grids and "s2_projected" in grids:
            grids["sop_mean"] = an.mean_grid(grids["s1_projected"], grids["s2_projected"], "sop_mean")
        prod.spectrograms = grids
        nyq = rate / 2
        for name, g in grids.items():
            entry = {"peaks": [{"freq_hz": f, "height_db": h} for f, h in
                               an.spectral_peaks(g, cfg.peak_min_db, fmin=g.resolution_hz)]}
            slopes = []
            for lo, hi in cfg.chirp_bands:
                if hi > nyq or lo < g.freqs[0]:
                    continue
                try:
                    r = an.ridge(g, (lo, hi), cfg.ridge_threshold_db)
                    slopes.append({"band_hz": [lo, hi], "slope_hz_per_s": r.slope_hz_per_s,
                                   "freq_min_hz": float(r.freqs.min()), "freq_max_hz": float(r.freqs.max()),
                                   "n_slices": int(r.times.size)})
                except NoRidge:
                    slopes.append({"band_hz": [lo, hi], "slope_hz_per_s": None})
            entry["ridges"] = slopes
            report["spectrograms"][name] = entry
    prod.report = report
    return prod
