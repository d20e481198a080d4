"""Bit-accurate receiver: ADC, fixed-point CMA equalizer, block PCA phase
tracker, decisions and BER.

Equalizer conventions
---------------------
* Filters are stored in the order xx, xy, yx, yy.  Output ``p`` is
  ``sum_k w_pX[k] x_win[k] + w_pY[k] y_win[k]``.
* Windows are in convolution order: ``x_win[k] = x[2n + c - k]`` with
  ``c = (n_taps - 1) // 2``, so the centre tap touches the sample at the
  symbol instant ``2n`` and tap 0 is the newest sample.
* Tap codes use ``tap_spec`` (default signed 9 bit, 7 fractional bits).  The
  integrator behind each tap keeps ``acc_frac_bits`` fractional bits; the
  visible coefficient is the integrator rounded to the tap spec.  Without
  the wider integrator a step of 2**-10 never moves a 2**-7 LSB.
* Updates are applied once per vector of ``parallel`` symbols using the
  gradient averaged over the vector, mirroring the 8-symbol parallel
  datapath (``parallel`` must be a power of two so the average is a shift).  With
  ``parallel=1`` the kernel reproduces :func:`cma_step` exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from . import bridge
from .core import FixedSpec, quantize, stokes_from_rows
from .errors import AlignmentError, ConfigError, DegenerateBlock
from .txsim import DualPolWaveform, TxConfig, matched_filter, qpsk_demap, qpsk_map_array, tx_bits

TAP_SPEC = FixedSpec(9, 7)
ERR_SPEC = FixedSpec(9, 7)
FILTER_NAMES = ("xx", "xy", "yx", "yy")


# --------------------------------------------------------------------------
# ADC
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AdcSpec:
    bits: int = 8
    full_scale: float = 1.0
    sample_rate: float = 2e9

    def __post_init__(self):
        if not self.full_scale > 0:
            raise ConfigError(f"ADC full_scale must be positive, got {self.full_scale}")
        if not 2 <= self.bits <= 16:
            raise ConfigError(f"ADC bits must be in [2, 16], got {self.bits}")

    @property
    def max_code(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @property
    def lsb(self) -> float:
        return self.full_scale / self.max_code

    @property
    def fixed(self) -> FixedSpec:
        return FixedSpec(self.bits, 0)


def adc_codes(wave: DualPolWaveform, spec: AdcSpec) -> np.ndarray:
    """Integer codes, shape ``(2, n, 2)``: pol, sample, (I, Q).

    Mid-tread: ``+full_scale`` maps to the top code ``2**(bits-1) - 1``;
    inputs beyond the range saturate at ``-2**(bits-1)`` / ``2**(bits-1)-1``.
    """
    s = wave.stacked / spec.lsb
    return quantize(np.stack([s.real, s.imag], axis=-1), spec.fixed).astype(np.int16)


def adc_quantize(wave: DualPolWaveform, spec: AdcSpec) -> DualPolWaveform:
    c = adc_codes(wave, spec).astype(np.float64) * spec.lsb
    z = c[..., 0] + 1j * c[..., 1]
    return DualPolWaveform(z[0], z[1], wave.sample_rate, wave.t0)


def auto_full_scale(wave: DualPolWaveform, headroom: float) -> float:
    """AGC: full scale at ``headroom`` times the per-quadrature RMS."""
    rms = math.sqrt(0.25 * (np.mean(np.abs(wave.x) ** 2) + np.mean(np.abs(wave.y) ** 2)))
    if rms == 0:
        return 1.0
    return headroom * rms


# --------------------------------------------------------------------------
# equalizer
# --------------------------------------------------------------------------


@dataclass
class EqualizerState:
    """Fixed-point 2x2 butterfly.

    ``tap_codes`` / ``acc`` are int64 arrays of shape ``(4, n_taps, 2)``
    (filter, tap, I/Q).  ``acc`` holds the integrator with
    ``acc_frac_bits`` fractional bits.
    """

    tap_codes: np.ndarray
    acc: np.ndarray
    mu: float = 2.0**-10
    cma_radius: float = 1.0
    tap_spec: FixedSpec = TAP_SPEC
    err_spec: FixedSpec = ERR_SPEC
    acc_frac_bits: int = 20
    last_reinit: int = 0  # symbol index of the last singularity-guard reset

    def __post_init__(self):
        if self.acc_frac_bits < self.tap_spec.frac_bits:
            raise ConfigError("acc_frac_bits must be >= tap frac_bits")
        if self.mu <= 0:
            raise ConfigError("mu must be positive")
        if self.tap_codes.shape != self.acc.shape or self.tap_codes.shape[0] != 4:
            raise ConfigError("tap_codes and acc must both have shape (4, n_taps, 2)")

    @classmethod
    def initial(cls, n_taps: int = 17, **kw) -> "EqualizerState":
        """Single-spike start: centre tap of xx and yy at 1.0."""
        if n_taps < 1 or n_taps % 2 == 0:
            raise ConfigError(f"n_taps must be odd and positive, got {n_taps}")
        state = cls(np.zeros((4, n_taps, 2), np.int64), np.zeros((4, n_taps, 2), np.int64), **kw)
        c = (n_taps - 1) // 2
        one = int(quantize(1.0, state.tap_spec))
        state.tap_codes[0, c, 0] = one
        state.tap_codes[3, c, 0] = one
        state.acc[:] = state.tap_codes << state.acc_shift
        return state

    @property
    def n_taps(self) -> int:
        return self.tap_codes.shape[1]

    @property
    def acc_shift(self) -> int:
        return self.acc_frac_bits - self.tap_spec.frac_bits

    @property
    def taps(self) -> np.ndarray:
        """Dequantized complex taps, shape ``(4, n_taps)``."""
        c = self.tap_codes.astype(np.float64) * self.tap_spec.lsb
        return c[..., 0] + 1j * c[..., 1]

    def copy(self) -> "EqualizerState":
        return replace(self, tap_codes=self.tap_codes.copy(), acc=self.acc.copy())


def _acc_limits(state: EqualizerState) -> tuple[int, int]:
    s = state.acc_shift
    return state.tap_spec.min_code << s, state.tap_spec.max_code << s


def cma_step(eq: EqualizerState, x_win, y_win) -> tuple[complex, complex, EqualizerState]:
    """One symbol of the reference fixed-point CMA (vector length 1)."""
    x_win = np.asarray(x_win, dtype=np.complex128)
    y_win = np.asarray(y_win, dtype=np.complex128)
    if x_win.shape != (eq.n_taps,) or y_win.shape != (eq.n_taps,):
        raise ValueError(f"windows must hold {eq.n_taps} samples")
    lsb = eq.tap_spec.lsb
    w = eq.tap_codes[..., 0] + 1j * eq.tap_codes[..., 1]
    outs = []
    grads = np.zeros((4, eq.n_taps), np.complex128)
    for p in range(2):
        y = 0j
        for k in range(eq.n_taps):
            y += w[2 * p, k] * lsb * x_win[k] + w[2 * p + 1, k] * lsb * y_win[k]
        e_code = quantize(eq.cma_radius**2 - (y.real * y.real + y.imag * y.imag), eq.err_spec)
        e = float(e_code) * eq.err_spec.lsb
        for k in range(eq.n_taps):
            grads[2 * p, k] += e * y * np.conj(x_win[k])
            grads[2 * p + 1, k] += e * y * np.conj(y_win[k])
        outs.append(y)
    new = eq.copy()
    scale = eq.mu * 2.0**eq.acc_frac_bits
    inc = np.stack([np.rint(grads.real * scale), np.rint(grads.imag * scale)], axis=-1).astype(np.int64)
    lo, hi = _acc_limits(eq)
    new.acc = np.clip(eq.acc + inc, lo, hi)
    new.tap_codes = np.rint(new.acc * 2.0**-eq.acc_shift).astype(np.int64)
    assert eq.tap_spec.contains(new.tap_codes)
    return outs[0], outs[1], new


@numba.njit(cache=True)
def _rint(v):
    return np.rint(v)


@numba.njit(cache=True)
def _cma_kernel(xp, yp, n_sym, tap, acc, mu_scale, radius2, lsb, err_scale, err_lo, err_hi,
                acc_lo, acc_hi, acc_shift_scale, acc_unit, tap_lo, tap_hi, parallel, snap_every, guard_every, guard_start,
                guard_until, guard_thresh, y_out, e_out, snaps):
    n_taps = tap.shape[1]
    c = (n_taps - 1) // 2
    w = np.empty((4, n_taps), np.complex128)
    grad = np.zeros((4, n_taps), np.complex128)
    for f in range(4):
        for k in range(n_taps):
            w[f, k] = complex(tap[f, k, 0] * lsb, tap[f, k, 1] * lsb)
    n_snap = 0
    reinits = 0
    last_reinit = 0
    n = 0
    while n < n_sym:
        n_end = min(n + parallel, n_sym)
        for f in range(4):
            for k in range(n_taps):
                grad[f, k] = 0j
        for m in range(n, n_end):
            base = 2 * m + 2 * c
            for p in range(2):
                y = 0j
                for k in range(n_taps):
                    y += w[2 * p, k] * xp[base - k] + w[2 * p + 1, k] * yp[base - k]
                ec = _rint((radius2 - (y.real * y.real + y.imag * y.imag)) * err_scale)
                if ec < err_lo:
                    ec = err_lo
                elif ec > err_hi:
                    ec = err_hi
                e = ec / err_scale
                ey = e * y
                for k in range(n_taps):
                    grad[2 * p, k] += ey * xp[base - k].conjugate()
                    grad[2 * p + 1, k] += ey * yp[base - k].conjugate()
                y_out[p, m] = y
                e_out[p, m] = ec
        for f in range(4):
            for k in range(n_taps):
                g = grad[f, k]
                a0 = acc[f, k, 0] + np.int64(_rint(g.real * mu_scale))
                a1 = acc[f, k, 1] + np.int64(_rint(g.imag * mu_scale))
                a0 = min(max(a0, acc_lo), acc_hi)
                a1 = min(max(a1, acc_lo), acc_hi)
                acc[f, k, 0] = a0
                acc[f, k, 1] = a1
                tap[f, k, 0] = np.int64(_rint(a0 * acc_shift_scale))
                tap[f, k, 1] = np.int64(_rint(a1 * acc_shift_scale))
                w[f, k] = complex(tap[f, k, 0] * lsb, tap[f, k, 1] * lsb)
        n = n_end
        if guard_every > 0 and n >= guard_start and n <= guard_until and n % guard_every == 0:
            # DC row responses; parallel rows mean both outputs lock to one source
            hxx = 0j
            hxy = 0j
            hyx = 0j
            hyy = 0j
            for k in range(n_taps):
                hxx += w[0, k]
                hxy += w[1, k]
                hyx += w[2, k]
                hyy += w[3, k]
            p1 = abs(hxx) ** 2 + abs(hxy) ** 2
            p2 = abs(hyx) ** 2 + abs(hyy) ** 2
            if p1 > 0 and p2 > 0:
                c1 = hxx * hxy.conjugate()
                c2 = hyx * hyy.conjugate()
                dot = ((abs(hxx) ** 2 - abs(hxy) ** 2) * (abs(hyx) ** 2 - abs(hyy) ** 2)
                       + 4.0 * (c1.real * c2.real + c1.imag * c2.imag)) / (p1 * p2)
                if dot > guard_thresh:
                    reinits += 1
                    last_reinit = n
                    for k in range(n_taps):
                        r = n_taps - 1 - k
                        # y row := (-conj(w_xy), conj(w_xx)), time reversed
                        tap[2, k, 0] = min(max(-tap[1, r, 0], tap_lo), tap_hi)
                        tap[2, k, 1] = tap[1, r, 1]
                        tap[3, k, 0] = tap[0, r, 0]
                        tap[3, k, 1] = min(max(-tap[0, r, 1], tap_lo), tap_hi)
                    for f in range(2, 4):
                        for k in range(n_taps):
                            acc[f, k, 0] = tap[f, k, 0] * acc_unit
                            acc[f, k, 1] = tap[f, k, 1] * acc_unit
                            w[f, k] = complex(tap[f, k, 0] * lsb, tap[f, k, 1] * lsb)
        if snap_every > 0 and n % snap_every == 0 and n_snap < snaps.shape[0]:
            for f in range(4):
                for k in range(n_taps):
                    snaps[n_snap, f, k, 0] = tap[f, k, 0]
                    snaps[n_snap, f, k, 1] = tap[f, k, 1]
            n_snap += 1
    return n_snap, reinits, last_reinit


def _pad_windows(x: np.ndarray, n_taps: int) -> np.ndarray:
    c = (n_taps - 1) // 2
    return np.concatenate([np.zeros(c, np.complex128), x, np.zeros(c + 2, np.complex128)])


def run_equalizer(
    x: np.ndarray,
    y: np.ndarray,
    eq: EqualizerState,
    parallel: int = 8,
    snapshot_interval: int = 0,
    guard_interval: int = 0,
    guard_start: int = 0,
    guard_until: int = 1 << 62,
    guard_threshold: float = 0.99,
):
    """Run the fixed-point CMA over T/2 sample streams ``x``, ``y``.

    Returns ``(outputs (2, n_sym), error codes (2, n_sym), snapshot tap codes
    (n_snap, 4, n_taps, 2), guard re-initialisations, final state)``.  The
    symbol index of the last re-initialisation is kept on the returned
    state as ``last_reinit``.
    Snapshots are taken after the update of the vector ending at every
    multiple of ``snapshot_interval`` symbols.
    """
    if parallel < 1 or parallel & (parallel - 1):
        raise ConfigError("parallel must be a power of two")
    if snapshot_interval and snapshot_interval % parallel:
        raise ConfigError("snapshot_interval must be a multiple of the vector length")
    if guard_interval and guard_interval % parallel:
        raise ConfigError("guard_interval must be a multiple of the vector length")
    n_sym = x.size // 2
    eq = eq.copy()
    xp = _pad_windows(np.asarray(x, np.complex128), eq.n_taps)
    yp = _pad_windows(np.asarray(y, np.complex128), eq.n_taps)
    y_out = np.zeros((2, n_sym), np.complex128)
    e_out = np.zeros((2, n_sym), np.int16)
    n_snap = n_sym // snapshot_interval if snapshot_interval else 0
    snaps = np.zeros((n_snap, 4, eq.n_taps, 2), np.int16)
    acc_lo, acc_hi = _acc_limits(eq)
    got, reinits, last_reinit = _cma_kernel(
        xp, yp, n_sym, eq.tap_codes, eq.acc,
        eq.mu * 2.0**eq.acc_frac_bits / parallel, eq.cma_radius**2, eq.tap_spec.lsb,
        1.0 / eq.err_spec.lsb, eq.err_spec.min_code, eq.err_spec.max_code,
        acc_lo, acc_hi, 2.0**-eq.acc_shift, 1 << eq.acc_shift,
        eq.tap_spec.min_code, eq.tap_spec.max_code,
        parallel, snapshot_interval, guard_interval, guard_start, guard_until, guard_threshold,
        y_out, e_out, snaps,
    )
    assert eq.tap_spec.contains(eq.tap_codes)
    eq.last_reinit = int(last_reinit)
    return y_out, e_out, snaps[:got], int(reinits), eq


# --------------------------------------------------------------------------
# carrier phase
# --------------------------------------------------------------------------


@dataclass
class CpeState:
    """Per-polarization phase registers.  Angles are integer codes with step
    ``(pi/2) / 2**angle_bits``; ``cum_code`` is the unwrapped accumulator."""

    block_size: int = 64
    angle_bits: int = 7
    cum_code: np.ndarray = field(default_factory=lambda: np.zeros(2, np.int64))
    last_code: np.ndarray = field(default_factory=lambda: np.zeros(2, np.int64))
    degenerate_threshold: float = 0.1

    @property
    def step(self) -> float:
        return angle_step(self.angle_bits)

    @property
    def cum_phase_x(self) -> float:
        return float(self.cum_code[0]) * self.step

    @property
    def cum_phase_y(self) -> float:
        return float(self.cum_code[1]) * self.step

    @property
    def last_angle_x(self) -> int:
        return int(self.last_code[0])

    @property
    def last_angle_y(self) -> int:
        return int(self.last_code[1])

    def copy(self) -> "CpeState":
        return replace(self, cum_code=self.cum_code.copy(), last_code=self.last_code.copy())


def angle_step(angle_bits: int) -> float:
    return (np.pi / 2) / (1 << angle_bits)


def pca_angle(symbols: np.ndarray, threshold: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Float PCA phase estimate along the last axis.

    Returns ``(phi, ok)`` with ``phi`` in ``[-pi/4, pi/4)``; ``ok`` is False
    where the squared-symbol cloud is isotropic (anisotropy below
    ``threshold``) or empty.
    """
    z = np.asarray(symbols) ** 2
    mxx = np.mean(z.real**2, axis=-1)
    myy = np.mean(z.imag**2, axis=-1)
    mxy = np.mean(z.real * z.imag, axis=-1)
    tr = mxx + myy
    spread = np.hypot(mxx - myy, 2 * mxy)
    with np.errstate(invalid="ignore", divide="ignore"):
        ok = (tr > 0) & (spread / np.where(tr > 0, tr, 1.0) >= threshold)
    alpha = np.mod(0.5 * np.arctan2(2 * mxy, mxx - myy), np.pi)
    # QPSK squared sits on the imaginary axis (alpha = pi/2) at zero phase
    phi = (alpha - np.pi / 2) / 2
    return np.where(phi >= np.pi / 4, phi - np.pi / 2, phi), ok


def quantize_angle(phi, angle_bits: int) -> np.ndarray:
    half = 1 << (angle_bits - 1)
    code = np.rint(np.asarray(phi) / angle_step(angle_bits)).astype(np.int64)
    return np.where(code >= half, code - 2 * half, code)


def cpe_block(symbols, state: CpeState, pol: int = 0) -> tuple[float, np.ndarray, CpeState]:
    """Estimate, unwrap and remove the carrier phase of one block.

    Returns the quantized wrapped estimate (radians), the block derotated by
    the unwrapped register, and the updated state.  Raises DegenerateBlock
    without touching the state when the block carries no phase information.
    """
    symbols = np.asarray(symbols, dtype=np.complex128)
    if symbols.shape != (state.block_size,):
        raise ValueError(f"expected exactly {state.block_size} symbols")
    phi, ok = pca_angle(symbols, state.degenerate_threshold)
    if not ok:
        raise DegenerateBlock("squared-symbol second moment is isotropic")
    code = int(quantize_angle(phi, state.angle_bits))
    half = 1 << (state.angle_bits - 1)
    d = (code - int(state.last_code[pol]) + half) % (2 * half) - half
    new = state.copy()
    new.cum_code[pol] += d
    new.last_code[pol] = code
    cum = float(new.cum_code[pol]) * state.step
    return code * state.step, symbols * np.exp(-1j * cum), new


def cpe_run(symbols: np.ndarray, state: CpeState, pol: int = 0):
    """Block-vectorized :func:`cpe_block` over a whole stream.

    Degenerate blocks hold the phase.  Trailing symbols that do not fill a
    block are left untouched (and excluded from decisions downstream).
    Returns ``(codes, cum_codes, degenerate mask, derotated, state')`` with
    one entry per block.
    """
    b = state.block_size
    nb = symbols.size // b
    blocks = np.asarray(symbols[: nb * b], np.complex128).reshape(nb, b)
    phi, ok = pca_angle(blocks, state.degenerate_threshold)
    codes = quantize_angle(phi, state.angle_bits)
    # degenerate blocks repeat the previous valid code, so they add nothing
    idx = np.where(ok, np.arange(nb), -1)
    np.maximum.accumulate(idx, out=idx)
    prev_valid = np.concatenate([[int(state.last_code[pol])], codes])
    held = prev_valid[idx + 1]
    half = 1 << (state.angle_bits - 1)
    d = np.diff(np.concatenate([[int(state.last_code[pol])], held]))
    d = (d + half) % (2 * half) - half
    cum = state.cum_code[pol] + np.cumsum(d)
    derot = (blocks * np.exp(-1j * cum * state.step)[:, None]).ravel()
    out = np.array(symbols, np.complex128, copy=True)
    out[: nb * b] = derot
    new = state.copy()
    if nb:
        new.cum_code[pol] = cum[-1]
        new.last_code[pol] = held[-1]
    return codes, cum, ~ok, out, new


# --------------------------------------------------------------------------
# receiver
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RxConfig:
    adc_bits: int = 8
    adc_full_scale: float = 0.0  # 0 selects AGC
    adc_headroom: float = 4.0
    front_end: str = "rrc"  # "rrc" (matched filter ahead of the ADC) | "none"
    n_taps: int = 17
    tap_bits: int = 9
    tap_frac_bits: int = 7
    err_bits: int = 9
    err_frac_bits: int = 7
    acc_frac_bits: int = 20
    mu: float = 2.0**-10
    cma_radius: float = 1.0
    parallel: int = 8
    cpe_block: int = 64
    angle_bits: int = 7
    degenerate_threshold: float = 0.1
    snapshot_interval: int = 1024  # symbols
    guard_interval: int = 1024
    guard_start: int = 4096
    guard_until: int = 1 << 62
    guard_threshold: float = 0.99
    max_lag: int = 4
    ber_skip: int = 0  # 0 selects the detected convergence point

    def __post_init__(self):
        if self.front_end not in ("none", "rrc"):
            raise ConfigError(f"front_end must be 'none' or 'rrc', got {self.front_end!r}")
        if self.mu <= 0 or math.log2(self.mu) != round(math.log2(self.mu)):
            raise ConfigError(f"mu must be a positive power of two, got {self.mu}")
        if self.cpe_block % self.parallel:
            raise ConfigError("cpe_block must be a multiple of parallel")
        if self.snapshot_interval % self.cpe_block:
            raise ConfigError("snapshot_interval must be a multiple of cpe_block")
        if self.guard_interval % self.parallel:
            raise ConfigError("guard_interval must be a multiple of parallel")
        if self.adc_full_scale < 0 or self.adc_headroom <= 0:
            raise ConfigError("ADC scaling must be positive")
        FixedSpec(self.tap_bits, self.tap_frac_bits)
        FixedSpec(self.err_bits, self.err_frac_bits)

    @property
    def tap_spec(self) -> FixedSpec:
        return FixedSpec(self.tap_bits, self.tap_frac_bits)

    @property
    def err_spec(self) -> FixedSpec:
        return FixedSpec(self.err_bits, self.err_frac_bits)

    def equalizer(self) -> EqualizerState:
        return EqualizerState.initial(
            self.n_taps, mu=self.mu, cma_radius=self.cma_radius, tap_spec=self.tap_spec,
            err_spec=self.err_spec, acc_frac_bits=self.acc_frac_bits,
        )


@dataclass(frozen=True)
class Alignment:
    """Output ``p`` carries source ``source[p]`` rotated by ``1j**quarter[p]``
    and advanced by ``lag[p]`` symbols: ``z_p[n] ~ 1j**k s_q[n + lag]``."""

    source: tuple[int, int]
    quarter: tuple[int, int]
    lag: tuple[int, int]
    peak: tuple[float, float]


@dataclass
class RxReport:
    ber: float
    n_bits: int
    n_errors: int
    converged_at: int
    snr_est_db: float
    guard_reinits: int = 0
    alignment: Alignment | None = None

    def summary(self) -> str:
        return (
            f"BER {self.ber:.3e} ({self.n_errors}/{self.n_bits} bits), converged at symbol "
            f"{self.converged_at}, SNR estimate {self.snr_est_db:.2f} dB"
        )


@dataclass
class RxResult:
    symbols: np.ndarray  # (2, n) derotated equalizer outputs
    decisions: np.ndarray  # (2, n, 2) hard bits, in output order
    snapshots: np.ndarray  # structured .snap records
    phase_codes: np.ndarray  # (2, n_blocks) unwrapped cum codes
    phase_step: float
    error_codes: np.ndarray = field(repr=False)
    equalizer: EqualizerState = field(repr=False)
    report: RxReport = None
    adc_full_scale: float = 0.0

    @property
    def cum_phase(self) -> np.ndarray:
        return self.phase_codes * self.phase_step


def detect_convergence(e_codes: np.ndarray, err_lsb: float, block: int = 1024) -> int:
    """First block start from which the block-mean |e| stays within 10 %
    (plus 0.02 absolute) of its settled level."""
    n = e_codes.shape[-1] // block
    if n < 2:
        return 0
    lvl = np.abs(e_codes[:, : n * block].astype(np.float64)).reshape(2, n, block).mean(axis=(0, 2)) * err_lsb
    settled = np.median(lvl[n // 2 :])
    above = np.flatnonzero(lvl > settled * 1.1 + 0.02)
    if above.size == 0:
        return 0
    return int(min(above[-1] + 1, n - 1) * block)


def align_outputs(z: np.ndarray, ref: np.ndarray, start: int = 0, max_lag: int = 4, length: int = 16384) -> Alignment:
    """Resolve the CMA permutation, quarter-turn and lag per output by
    correlating against both reference symbol streams."""
    n = z.shape[1]
    lo = max(start, max_lag)
    hi = min(n - max_lag, lo + length)
    if hi - lo < 256:
        raise AlignmentError("too few converged symbols to align outputs")
    seg = np.arange(lo, hi)
    src, quarter, lags, peaks = [], [], [], []
    for p in range(2):
        best = (-1.0, 0, 0, 0j)
        for q in range(2):
            for lag in range(-max_lag, max_lag + 1):
                c = np.vdot(ref[q, seg + lag], z[p, seg]) / seg.size
                if abs(c) > best[0]:
                    best = (abs(c), q, lag, c)
        mag, q, lag, c = best
        src.append(q)
        lags.append(lag)
        quarter.append(int(np.rint(np.angle(c) / (np.pi / 2))) % 4)
        peaks.append(float(mag))
    if src[0] == src[1]:
        raise AlignmentError(f"both outputs lock to source {src[0]}")
    return Alignment(tuple(src), tuple(quarter), tuple(lags), tuple(peaks))


def _snr_estimate(z: np.ndarray, ref_aligned: np.ndarray | None) -> float:
    if ref_aligned is None:
        d = (np.sign(z.real) + 1j * np.sign(z.imag)) / np.sqrt(2)
    else:
        d = ref_aligned
    gain = np.vdot(d, z).real / np.vdot(d, d).real
    err = np.mean(np.abs(z - gain * d) ** 2)
    if err == 0:
        return float("inf")
    return float(10 * np.log10(gain**2 * np.mean(np.abs(d) ** 2) / err))


def run_receiver(
    wave: DualPolWaveform,
    cfg: RxConfig = RxConfig(),
    tx: TxConfig | None = TxConfig(),
    symbol_rate: float | None = None,
) -> RxResult:
    """Full chain ADC -> CMA -> CPE -> decisions.

    With ``tx`` given, the transmitted PRBS is regenerated, outputs are
    aligned to it and BER is counted after convergence.
    """
    if symbol_rate is None:
        symbol_rate = wave.sample_rate / 2
    if abs(wave.sample_rate - 2 * symbol_rate) > 1e-6 * wave.sample_rate:
        raise ConfigError("waveform must be sampled at 2 samples per symbol")
    if tx is not None and tx.symbol_rate != symbol_rate:
        raise ConfigError("tx symbol rate does not match the waveform")
    front = wave
    if cfg.front_end == "rrc":
        shape_cfg = tx if tx is not None else TxConfig(symbol_rate=symbol_rate)
        mf = matched_filter(wave.stacked, shape_cfg)
        front = DualPolWaveform(mf[0], mf[1], wave.sample_rate, wave.t0)
    fs = cfg.adc_full_scale or auto_full_scale(front, cfg.adc_headroom)
    q = adc_quantize(front, AdcSpec(cfg.adc_bits, fs, wave.sample_rate))

    y_out, e_out, snap_taps, reinits, eq = run_equalizer(
        q.x, q.y, cfg.equalizer(), cfg.parallel, cfg.snapshot_interval,
        cfg.guard_interval, cfg.guard_start, cfg.guard_until, cfg.guard_threshold,
    )
    n_sym = y_out.shape[1]

    cpe = CpeState(cfg.cpe_block, cfg.angle_bits, degenerate_threshold=cfg.degenerate_threshold)
    z = np.empty_like(y_out)
    cum = []
    for p in range(2):
        _, cum_p, _, z[p], cpe = cpe_run(y_out[p], cpe, p)
        cum.append(cum_p)
    cum = np.array(cum).reshape(2, -1)
    step = angle_step(cfg.angle_bits)

    # snapshot k is taken after symbol (k+1)*interval - 1, i.e. at the end of
    # CPE block (k+1)*interval/cpe_block - 1
    n_snap = snap_taps.shape[0]
    blk = (np.arange(1, n_snap + 1) * cfg.snapshot_interval) // cfg.cpe_block - 1
    t_ns = np.rint(np.arange(1, n_snap + 1) * cfg.snapshot_interval / symbol_rate * 1e9).astype(np.uint64)
    snaps = bridge.pack_records(np.arange(n_snap), t_ns, snap_taps, cum[0, blk] * step, cum[1, blk] * step)

    n_dec = (n_sym // cfg.cpe_block) * cfg.cpe_block
    decisions = qpsk_demap(z)
    # only the stretch after the last guard reset can count as converged
    lr = eq.last_reinit
    converged = lr + detect_convergence(e_out[:, lr:n_dec], cfg.err_spec.lsb)
    start = cfg.ber_skip or min(converged + 1024, n_dec)

    report = RxReport(float("nan"), 0, 0, converged, _snr_estimate(z[:, start:n_dec].ravel(), None), reinits)
    if tx is not None:
        bits = tx_bits(tx, n_sym)
        ref = np.stack([qpsk_map_array(bits[0]), qpsk_map_array(bits[1])])
        al = align_outputs(z[:, :n_dec], ref, start, cfg.max_lag)
        n_err = 0
        n_bits = 0
        aligned = []
        refs = []
        for p in range(2):
            q_, k, lag = al.source[p], al.quarter[p], al.lag[p]
            lo = max(start, -lag)
            hi = min(n_dec, n_sym - lag)
            zc = z[p, lo:hi] * (1j) ** (-k)
            got = qpsk_demap(zc)
            n_err += int(np.count_nonzero(got != bits[q_, lo + lag : hi + lag]))
            n_bits += got.size
            aligned.append(zc)
            refs.append(ref[q_, lo + lag : hi + lag])
        ber = n_err / n_bits if n_bits else float("nan")
        snr = _snr_estimate(np.concatenate(aligned), np.concatenate(refs))
        report = RxReport(ber, n_bits, n_err, converged, snr, reinits, al)

    return RxResult(z, decisions, snaps, cum, step, e_out, eq, report, fs)
