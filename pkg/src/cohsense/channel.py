"""Lumped time-varying Jones channel with ASE noise and injectable events.

The link is ``J(t) = P_pdl . D(t) . R(t) . B . exp(i phi_c(t))`` where ``B`` is
the static birefringence, ``R(t)`` the product of all rotation events,
``D(t) = diag(1, exp(i delta(t)))`` the inter-polarization phase events and
``phi_c`` the common phase (phase_ramp events plus residual Wiener phase
noise).  PDL is the left-most Hermitian factor so the unitary part of
``J(t)`` is exactly ``D R B exp(i phi_c)``.

Event parameters are given in *physical* seconds and Hz.  ``time_scale``
maps simulated time to physical time (``t_phys = t_sim * time_scale``) so
microseism-band phenomena fit into milliseconds of 1 GBd signal.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .core import JonesMatrix2, pdl_matrix, rotation_matrix
from .errors import ConfigError
from .txsim import DualPolWaveform

EventKind = Literal["swell_chirp", "resonance", "phase_diff", "sop_step", "phase_ramp"]
EVENT_KINDS = ("swell_chirp", "resonance", "phase_diff", "sop_step", "phase_ramp")
ROTATION_KINDS = ("swell_chirp", "resonance", "sop_step")

# fraction of the event window covered by the two cosine tapers together
ENVELOPE_TAPER = 0.5

_NOISE_CHUNK = 1 << 18


@dataclass(frozen=True)
class EventSpec:
    kind: EventKind
    t_start: float
    t_end: float
    amplitude: float
    f0: float = 0.0
    f1: float = 0.0
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    slope: float = 0.0

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ConfigError(f"unknown event kind {self.kind!r}")
        if not self.t_start < self.t_end:
            raise ConfigError(f"{self.kind}: t_start must be < t_end")
        if not self.f0 <= self.f1:
            raise ConfigError(f"{self.kind}: f0 must be <= f1")
        if not math.isfinite(self.amplitude):
            raise ConfigError(f"{self.kind}: amplitude must be finite")
        norm = math.sqrt(sum(a * a for a in self.axis))
        if abs(norm - 1.0) > 1e-9:
            raise ConfigError(f"{self.kind}: axis must be a unit Stokes vector, |axis|={norm}")

    def envelope(self, t: np.ndarray) -> np.ndarray:
        """Tukey (raised-cosine tapered) window over ``[t_start, t_end]``."""
        t = np.asarray(t, dtype=np.float64)
        dur = self.t_end - self.t_start
        u = (t - self.t_start) / dur
        w = np.zeros_like(u)
        inside = (u >= 0) & (u <= 1)
        edge = ENVELOPE_TAPER / 2
        ramp = np.minimum(u, 1 - u)
        w[inside] = np.where(
            ramp[inside] >= edge, 1.0, 0.5 * (1 - np.cos(np.pi * ramp[inside] / edge))
        )
        return w

    def angle(self, t) -> np.ndarray:
        """Rotation angle (rotation events), inter-pol phase (phase_diff) or
        common phase (phase_ramp) at physical times ``t``."""
        t = np.asarray(t, dtype=np.float64)
        tau = t - self.t_start
        a = self.amplitude
        if self.kind == "swell_chirp":
            phase = 2 * np.pi * (self.f0 * tau + 0.5 * self.slope * tau**2)
            return a * self.envelope(t) * np.sin(phase)
        if self.kind == "resonance":
            osc = np.sin(2 * np.pi * self.f0 * tau) + 0.5 * np.sin(2 * np.pi * 2 * self.f0 * tau)
            return a * self.envelope(t) * osc
        if self.kind == "phase_diff":
            return a * self.envelope(t)
        if self.kind == "sop_step":
            return np.where((t >= self.t_start) & (t < self.t_end), a, 0.0)
        # phase_ramp: linear rise over the window, held afterwards
        return a * np.clip(tau / (self.t_end - self.t_start), 0.0, 1.0)


def synth_event(kind: EventKind, **params) -> EventSpec:
    """Build a validated :class:`EventSpec`.

    ``swell_chirp`` derives its slope from the band edges and window (low
    frequencies arrive first); ``resonance`` adds a half-amplitude second
    harmonic of ``f0``.  ``axis`` is normalized.
    """
    if kind not in EVENT_KINDS:
        raise ConfigError(f"unknown event kind {kind!r}")
    params = dict(params)
    unknown = set(params) - {"t_start", "t_end", "amplitude", "f0", "f1", "axis", "slope"}
    if unknown:
        raise ConfigError(f"unknown event parameters {sorted(unknown)}")
    for req in ("t_start", "t_end", "amplitude"):
        if req not in params:
            raise ConfigError(f"{kind}: missing parameter {req!r}")
    if "axis" in params:
        axis = np.asarray(params["axis"], dtype=np.float64)
        if axis.shape != (3,) or not np.linalg.norm(axis) > 0:
            raise ConfigError(f"{kind}: axis must be a nonzero 3-vector")
        norm = np.linalg.norm(axis)
        # already-unit axes are kept as given so config round trips are exact
        if abs(norm - 1.0) > 1e-12:
            axis = axis / norm
        params["axis"] = tuple(float(v) for v in axis)
    if kind == "swell_chirp":
        f0, f1 = params.get("f0", 0.0), params.get("f1", 0.0)
        if not 0 < f0 <= f1:
            raise ConfigError("swell_chirp needs 0 < f0 <= f1 (low frequencies first)")
        dur = params["t_end"] - params["t_start"]
        if dur <= 0:
            raise ConfigError("swell_chirp: t_start must be < t_end")
        slope = (f1 - f0) / dur
        if "slope" in params and not math.isclose(params["slope"], slope, rel_tol=1e-9, abs_tol=1e-15):
            raise ConfigError(f"swell_chirp slope {params['slope']} inconsistent with band/window ({slope})")
        params["slope"] = slope
    elif kind == "resonance":
        if not params.get("f0", 0.0) > 0:
            raise ConfigError("resonance needs f0 > 0")
        params.setdefault("f1", 2 * params["f0"])
    return EventSpec(kind=kind, **params)


@dataclass(frozen=True)
class ChannelState:
    base_rotation: np.ndarray = field(default_factory=lambda: np.eye(2, dtype=np.complex128))
    pdl_db: float = 0.0
    pdl_axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    events: tuple[EventSpec, ...] = ()
    phase_linewidth_hz: float = 1e3
    snr_db: float = 10.0
    seed: int = 0
    hold_symbols: int = 64
    time_scale: float = 1.0

    def __post_init__(self):
        b = np.asarray(self.base_rotation, dtype=np.complex128)
        if b.shape != (2, 2) or np.linalg.norm(b.conj().T @ b - np.eye(2)) > 1e-9:
            raise ConfigError("base_rotation must be a 2x2 unitary matrix")
        object.__setattr__(self, "base_rotation", b)
        object.__setattr__(self, "events", tuple(self.events))
        if not self.pdl_db >= 0:
            raise ConfigError("pdl_db must be >= 0")
        if np.isnan(self.snr_db):
            raise ConfigError("snr_db must not be NaN")
        if self.phase_linewidth_hz < 0:
            raise ConfigError("phase_linewidth_hz must be >= 0")
        if self.hold_symbols < 1:
            raise ConfigError("hold_symbols must be >= 1")
        if not self.time_scale > 0:
            raise ConfigError("time_scale must be positive")

    def pdl_factor(self) -> np.ndarray:
        return pdl_matrix(self.pdl_db, self.pdl_axis)


@dataclass
class GroundTruth:
    times: np.ndarray  # physical seconds
    jones: np.ndarray  # (n, 2, 2)
    common_phase: np.ndarray

    def __post_init__(self):
        if not (len(self.times) == len(self.jones) == len(self.common_phase)):
            raise ValueError("ground-truth arrays must have equal length")

    def to_csv(self, path: str | Path) -> None:
        header = ["t"] + [f"{e}_{p}" for e in ("xx", "xy", "yx", "yy") for p in ("re", "im")]
        header.append("common_phase")
        flat = self.jones.reshape(-1, 4)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, row, ph in zip(self.times, flat, self.common_phase):
                vals = [repr(float(t))]
                for z in row:
                    vals += [repr(float(z.real)), repr(float(z.imag))]
                vals.append(repr(float(ph)))
                w.writerow(vals)

    @classmethod
    def from_csv(cls, path: str | Path) -> "GroundTruth":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        jones = (data[:, 1:9:2] + 1j * data[:, 2:9:2]).reshape(-1, 2, 2)
        return cls(data[:, 0], jones, data[:, 9])


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def event_components(events: Sequence[EventSpec], t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(R, delta, phi)`` for physical times ``t``: the composed rotation
    stack, inter-polarization phase and common phase from events."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    rot = np.broadcast_to(np.eye(2, dtype=np.complex128), t.shape + (2, 2)).copy()
    delta = np.zeros_like(t)
    phi = np.zeros_like(t)
    for ev in events:
        a = ev.angle(t)
        if ev.kind in ROTATION_KINDS:
            rot = rotation_matrix(a, ev.axis) @ rot
        elif ev.kind == "phase_diff":
            delta += a
        else:
            phi += a
    return rot, delta, phi


def jones_series(state: ChannelState, t, extra_phase=None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized channel matrices at physical times ``t``.

    Returns ``(J, common_phase)``; ``extra_phase`` (e.g. Wiener phase noise
    sampled at ``t``) is added to the common phase.
    """
    rot, delta, phi = event_components(state.events, t)
    if extra_phase is not None:
        phi = phi + extra_phase
    d = np.zeros(rot.shape, dtype=np.complex128)
    d[..., 0, 0] = 1.0
    d[..., 1, 1] = np.exp(1j * delta)
    j = state.pdl_factor() @ d @ rot @ state.base_rotation
    j = j * np.exp(1j * phi)[..., None, None]
    return j, phi


def jones_at(state: ChannelState, t: float) -> JonesMatrix2:
    """Deterministic channel matrix at physical time ``t`` (events, PDL and
    birefringence; the random Wiener phase is applied by :func:`propagate`)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    j, _ = jones_series(state, [t])
    return JonesMatrix2.from_array(j[0])


def _chunked_normal(seed: int, stream: int, n: int) -> np.ndarray:
    """Standard normals seeded per fixed-size chunk so any segment can be
    regenerated independently."""
    out = np.empty(n, dtype=np.float64)
    for k, start in enumerate(range(0, n, _NOISE_CHUNK)):
        stop = min(start + _NOISE_CHUNK, n)
        rng = np.random.default_rng([seed, stream, k])
        out[start:stop] = rng.standard_normal(stop - start)
    return out


def wiener_phase(state: ChannelState, n: int, sample_rate: float) -> np.ndarray:
    if state.phase_linewidth_hz == 0 or n == 0:
        return np.zeros(n)
    sigma = math.sqrt(2 * math.pi * state.phase_linewidth_hz / sample_rate)
    return np.cumsum(sigma * _chunked_normal(state.seed, 0, n))


def propagate(
    wave: DualPolWaveform, state: ChannelState, samples_per_symbol: int = 2
) -> tuple[DualPolWaveform, GroundTruth]:
    """Apply ``J(t)`` (held constant over ``hold_symbols``) plus per-sample
    Wiener phase and AWGN at the configured in-band Es/N0."""
    n = len(wave)
    if n == 0:
        raise ValueError("waveform is empty")
    fs = wave.sample_rate
    hold = state.hold_symbols * samples_per_symbol
    nb = -(-n // hold)
    starts = np.arange(nb) * hold
    t_phys = (wave.t0 + starts / fs) * state.time_scale

    wph = wiener_phase(state, n, fs)
    j_blocks, _ = jones_series(state, t_phys)

    pad = nb * hold - n
    xb = np.pad(wave.x, (0, pad)).reshape(nb, hold)
    yb = np.pad(wave.y, (0, pad)).reshape(nb, hold)
    out_x = (j_blocks[:, 0, 0, None] * xb + j_blocks[:, 0, 1, None] * yb).ravel()[:n]
    out_y = (j_blocks[:, 1, 0, None] * xb + j_blocks[:, 1, 1, None] * yb).ravel()[:n]
    del xb, yb
    if state.phase_linewidth_hz > 0:
        rot = np.exp(1j * wph)
        out_x *= rot
        out_y *= rot
        del rot

    if math.isfinite(state.snr_db):
        ps = 0.5 * (np.mean(np.abs(out_x) ** 2) + np.mean(np.abs(out_y) ** 2))
        sigma = math.sqrt(samples_per_symbol * ps / 10 ** (state.snr_db / 10) / 2)
        out_x += sigma * (_chunked_normal(state.seed, 1, n) + 1j * _chunked_normal(state.seed, 2, n))
        out_y += sigma * (_chunked_normal(state.seed, 3, n) + 1j * _chunked_normal(state.seed, 4, n))

    truth_j, truth_phase = jones_series(state, t_phys, extra_phase=wph[starts])
    truth = GroundTruth(t_phys, truth_j, truth_phase)
    return DualPolWaveform(out_x, out_y, fs, wave.t0), truth
