"""Dual-polarization QPSK transmitter driven by PRBS15 generators.

Bit order of the LFSR: the register is read out MSB first.  With the
default polynomial x^15 + x^14 + 1 the first 15 output bits are therefore
the seed itself, bit 14 down to bit 0, and an all-ones seed starts with
fifteen ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .errors import ConfigError

PRBS15_PERIOD = (1 << 15) - 1
POLY_X = (15, 14)  # x^15 + x^14 + 1
POLY_Y = (15, 1)  # reciprocal polynomial x^15 + x + 1

_SQRT_HALF = np.sqrt(0.5)


@dataclass
class PrbsState:
    register: int = 0x7FFF
    taps: tuple[int, ...] = POLY_X

    def __post_init__(self):
        self.register &= PRBS15_PERIOD
        if self.register == 0:
            raise ConfigError("PRBS15 register must be nonzero")
        if max(self.taps) != 15 or min(self.taps) < 1:
            raise ConfigError(f"invalid PRBS15 taps {self.taps}")


def prbs15_next(state: PrbsState) -> int:
    """Emit the next bit (register MSB) and advance the Fibonacci LFSR."""
    r = state.register
    out = (r >> 14) & 1
    fb = 0
    for t in state.taps:
        fb ^= (r >> (t - 1)) & 1
    state.register = ((r << 1) | fb) & PRBS15_PERIOD
    return out


def prbs15_period(seed: int, taps=POLY_X) -> np.ndarray:
    state = PrbsState(seed, tuple(taps))
    return np.fromiter((prbs15_next(state) for _ in range(PRBS15_PERIOD)), np.uint8, PRBS15_PERIOD)


def prbs15_bits(seed: int, n: int, taps=POLY_X, delay: int = 0) -> np.ndarray:
    """``n`` bits of the sequence started at ``seed``, skipping ``delay`` bits."""
    period = prbs15_period(seed, taps)
    idx = (np.arange(n, dtype=np.int64) + delay) % PRBS15_PERIOD
    return period[idx]


def qpsk_map(b0: int, b1: int) -> complex:
    """Gray QPSK: ``b0`` selects the sign of I, ``b1`` the sign of Q."""
    return complex((1 - 2 * b0) * _SQRT_HALF, (1 - 2 * b1) * _SQRT_HALF)


def qpsk_map_array(bits: np.ndarray) -> np.ndarray:
    """Map an ``(n, 2)`` bit array to ``n`` unit-energy QPSK symbols."""
    bits = np.asarray(bits, dtype=np.float64)
    return ((1.0 - 2.0 * bits[:, 0]) + 1j * (1.0 - 2.0 * bits[:, 1])) * _SQRT_HALF


def qpsk_demap(symbols: np.ndarray) -> np.ndarray:
    """Hard Gray decisions, inverse of :func:`qpsk_map_array`."""
    symbols = np.asarray(symbols)
    return np.stack([symbols.real < 0, symbols.imag < 0], axis=-1).astype(np.uint8)


@dataclass(frozen=True)
class TxConfig:
    symbol_rate: float = 1e9
    samples_per_symbol: int = 2
    rrc_rolloff: float = 0.1
    # 0 selects exact (untruncated, circular) frequency-domain shaping
    rrc_span: int = 0
    seed_x: int = 0x7FFF
    seed_y: int = 0x7FFF
    decorrelation_delay: int = 1000
    poly_x: tuple[int, ...] = POLY_X
    poly_y: tuple[int, ...] = POLY_Y

    def __post_init__(self):
        if not 0 < self.rrc_rolloff <= 1:
            raise ConfigError(f"rrc_rolloff must be in (0, 1], got {self.rrc_rolloff}")
        if self.rrc_span < 0 or (self.rrc_span and self.rrc_span % 2):
            raise ConfigError(f"rrc_span must be 0 or a positive even integer, got {self.rrc_span}")
        if self.samples_per_symbol != 2:
            raise ConfigError("the receiver is T/2-spaced: samples_per_symbol must be 2")
        if self.symbol_rate <= 0:
            raise ConfigError("symbol_rate must be positive")
        if self.decorrelation_delay < 0:
            raise ConfigError("decorrelation_delay must be >= 0")
        for s in (self.seed_x, self.seed_y):
            if not 0 < s <= PRBS15_PERIOD:
                raise ConfigError(f"PRBS15 seed must be in [1, 32767], got {s}")
        if (tuple(self.poly_x), self.seed_x, 0) == (tuple(self.poly_y), self.seed_y, self.decorrelation_delay):
            raise ConfigError("x and y PRBS trajectories are identical")

    @property
    def sample_rate(self) -> float:
        return self.symbol_rate * self.samples_per_symbol


@dataclass
class DualPolWaveform:
    x: np.ndarray
    y: np.ndarray
    sample_rate: float
    t0: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.complex128)
        self.y = np.asarray(self.y, dtype=np.complex128)
        if self.x.shape != self.y.shape or self.x.ndim != 1:
            raise ValueError("x and y must be 1-D and of equal length")

    def __len__(self) -> int:
        return self.x.size

    @property
    def stacked(self) -> np.ndarray:
        return np.stack([self.x, self.y])


@dataclass
class TxFrame:
    """Transmitted bits, symbols and waveform for one run."""

    bits: np.ndarray  # (2, n, 2) uint8: pol, symbol, (b0, b1)
    symbols: np.ndarray  # (2, n) complex
    wave: DualPolWaveform = field(repr=False)


def tx_bits(cfg: TxConfig, n_symbols: int) -> np.ndarray:
    bx = prbs15_bits(cfg.seed_x, 2 * n_symbols, cfg.poly_x)
    by = prbs15_bits(cfg.seed_y, 2 * n_symbols, cfg.poly_y, delay=cfg.decorrelation_delay)
    return np.stack([bx.reshape(n_symbols, 2), by.reshape(n_symbols, 2)])


# --------------------------------------------------------------------------
# pulse shaping
# --------------------------------------------------------------------------


def rrc_taps(rolloff: float, span: int, sps: int) -> np.ndarray:
    """Truncated RRC impulse response, ``span * sps + 1`` taps, sum of
    squares equal to ``sps``."""
    t = np.arange(-span * sps // 2, span * sps // 2 + 1) / sps
    b = rolloff
    h = np.empty_like(t)
    center = np.isclose(t, 0.0)
    edge = np.isclose(np.abs(4 * b * t), 1.0)
    rest = ~(center | edge)
    h[center] = 1 - b + 4 * b / np.pi
    h[edge] = b / np.sqrt(2) * (
        (1 + 2 / np.pi) * np.sin(np.pi / (4 * b)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b))
    )
    tr = t[rest]
    h[rest] = (np.sin(np.pi * tr * (1 - b)) + 4 * b * tr * np.cos(np.pi * tr * (1 + b))) / (
        np.pi * tr * (1 - (4 * b * tr) ** 2)
    )
    return h * np.sqrt(sps / np.sum(h**2))


def rrc_response(n: int, rolloff: float, sps: int) -> np.ndarray:
    """Exact RRC amplitude response on the ``n``-point FFT grid.

    Peak gain ``sps`` so that a pulse has energy ``sps`` and the
    raised-cosine cascade has value ``sps`` at t=0.
    """
    f = np.abs(np.fft.fftfreq(n)) * sps  # in units of the symbol rate
    lo, hi = (1 - rolloff) / 2, (1 + rolloff) / 2
    rc = np.where(f <= lo, 1.0, 0.0)
    band = (f > lo) & (f < hi)
    rc[band] = 0.5 * (1 + np.cos(np.pi / rolloff * (f[band] - lo)))
    return sps * np.sqrt(rc)


def _shape(upsampled: np.ndarray, cfg: TxConfig) -> np.ndarray:
    sps = cfg.samples_per_symbol
    if cfg.rrc_span == 0:
        spec = np.fft.fft(upsampled, axis=-1)
        return np.fft.ifft(spec * rrc_response(upsampled.shape[-1], cfg.rrc_rolloff, sps), axis=-1)
    g = rrc_taps(cfg.rrc_rolloff, cfg.rrc_span, sps)
    g = g.reshape((1,) * (upsampled.ndim - 1) + (-1,))
    full = signal.oaconvolve(upsampled, g, axes=-1)
    g = g.ravel()
    half = (g.size - 1) // 2
    return full[..., half : half + upsampled.shape[-1]]


def matched_filter(samples: np.ndarray, cfg: TxConfig) -> np.ndarray:
    """Receive-side RRC matched filter scaled so that sampling at
    ``sps * k`` returns the transmitted symbols."""
    return _shape(np.asarray(samples, dtype=np.complex128), cfg) / cfg.samples_per_symbol


def modulate_symbols(symbols: np.ndarray, cfg: TxConfig) -> DualPolWaveform:
    symbols = np.asarray(symbols, dtype=np.complex128)
    n = symbols.shape[-1]
    if n < max(cfg.rrc_span, 1):
        raise ConfigError(f"need at least rrc_span={cfg.rrc_span} symbols, got {n}")
    sps = cfg.samples_per_symbol
    up = np.zeros((2, n * sps), dtype=np.complex128)
    up[:, ::sps] = symbols
    shaped = _shape(up, cfg)
    return DualPolWaveform(shaped[0], shaped[1], cfg.sample_rate)


def transmit(cfg: TxConfig, n_symbols: int) -> TxFrame:
    bits = tx_bits(cfg, n_symbols)
    symbols = np.stack([qpsk_map_array(bits[0]), qpsk_map_array(bits[1])])
    return TxFrame(bits, symbols, modulate_symbols(symbols, cfg))


def modulate(cfg: TxConfig, n_symbols: int) -> DualPolWaveform:
    """Pulse-shaped dual-pol waveform at 2 samples/symbol, unit mean power
    per polarization."""
    return transmit(cfg, n_symbols).wave
