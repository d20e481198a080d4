"""Clock-domain bridge between the DSP pipeline and the sensing consumer.

Two pieces live here:

* the ``.snap`` record format (see ``docs/FORMAT.md``), handled either one
  :class:`TapSnapshot` at a time or in bulk as numpy structured arrays whose
  dtype *is* the wire layout;
* :class:`SnapshotBridge`, a single-producer/single-consumer ring that
  decimates on the producer side and never blocks the producer.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import BadCrc, BadMagic, ConfigError, Overflow, TruncatedRecord, UnsupportedVersion

MAGIC = b"SNAP"
VERSION = 1
N_FILTERS = 4
DEFAULT_N_TAPS = 17
HEADER_BYTES = 26  # magic .. n_taps
# flags
FLAG_GAP_BEFORE = 0x0001  # windows were dropped right before this record

_HEADER_DTYPE = np.dtype(
    [("magic", "S4"), ("version", "<u2"), ("flags", "<u2"), ("seq", "<u8"), ("t_ns", "<u8"), ("n_taps", "<u2")]
)


def record_dtype(n_taps: int = DEFAULT_N_TAPS) -> np.dtype:
    return np.dtype(
        _HEADER_DTYPE.descr
        + [
            ("taps", "<i2", (N_FILTERS, n_taps, 2)),
            ("cum_phase_x", "<f8"),
            ("cum_phase_y", "<f8"),
            ("crc", "<u4"),
        ]
    )


def record_size(n_taps: int = DEFAULT_N_TAPS) -> int:
    return record_dtype(n_taps).itemsize


@dataclass(eq=False)
class TapSnapshot:
    """One readout: all equalizer tap codes plus tracked phase per pol.

    ``taps`` has shape ``(4, n_taps, 2)``: filter (xx, xy, yx, yy), tap
    index, (I, Q) code.
    """

    seq: int
    t_ns: int
    taps: np.ndarray
    cum_phase_x: float
    cum_phase_y: float
    flags: int = 0

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.int16)
        if self.taps.ndim != 3 or self.taps.shape[0] != N_FILTERS or self.taps.shape[2] != 2:
            raise ValueError(f"taps must have shape (4, n_taps, 2), got {self.taps.shape}")

    @property
    def n_taps(self) -> int:
        return self.taps.shape[1]

    @property
    def complex_taps(self) -> np.ndarray:
        return self.taps[..., 0].astype(np.float64) + 1j * self.taps[..., 1]

    def __eq__(self, other):
        if not isinstance(other, TapSnapshot):
            return NotImplemented
        return (
            self.seq == other.seq
            and self.t_ns == other.t_ns
            and self.flags == other.flags
            and np.array_equal(self.taps, other.taps)
            and np.float64(self.cum_phase_x).tobytes() == np.float64(other.cum_phase_x).tobytes()
            and np.float64(self.cum_phase_y).tobytes() == np.float64(other.cum_phase_y).tobytes()
        )


# --------------------------------------------------------------------------
# bulk records
# --------------------------------------------------------------------------


def _crc_of(raw: bytes) -> int:
    return zlib.crc32(raw[4:-4]) & 0xFFFFFFFF


def pack_records(seq, t_ns, taps, cum_phase_x, cum_phase_y, flags=0) -> np.ndarray:
    """Build a structured record array (CRC filled in) from column data."""
    taps = np.asarray(taps)
    n = taps.shape[0]
    rec = np.zeros(n, dtype=record_dtype(taps.shape[2]))
    rec["magic"] = MAGIC
    rec["version"] = VERSION
    rec["flags"] = flags
    rec["seq"] = seq
    rec["t_ns"] = t_ns
    rec["n_taps"] = taps.shape[2]
    rec["taps"] = taps
    rec["cum_phase_x"] = cum_phase_x
    rec["cum_phase_y"] = cum_phase_y
    fill_crc(rec)
    return rec


def fill_crc(rec: np.ndarray) -> None:
    raw = rec.view(np.uint8).reshape(rec.size, rec.dtype.itemsize)
    rec["crc"] = [zlib.crc32(row[4:-4]) for row in raw]


def records_to_snapshots(rec: np.ndarray) -> list[TapSnapshot]:
    return [
        TapSnapshot(int(r["seq"]), int(r["t_ns"]), r["taps"].copy(), float(r["cum_phase_x"]),
                    float(r["cum_phase_y"]), int(r["flags"]))
        for r in rec
    ]


def snapshots_to_records(snaps) -> np.ndarray:
    snaps = list(snaps)
    if not snaps:
        return np.zeros(0, dtype=record_dtype())
    return pack_records(
        [s.seq for s in snaps],
        [s.t_ns for s in snaps],
        np.stack([s.taps for s in snaps]),
        [s.cum_phase_x for s in snaps],
        [s.cum_phase_y for s in snaps],
        [s.flags for s in snaps],
    )


def serialize(snapshot: TapSnapshot) -> bytes:
    return snapshots_to_records([snapshot]).tobytes()


def parse(data: bytes, offset: int = 0) -> TapSnapshot:
    rec = parse_records(data, base_offset=offset)
    if rec.size != 1:
        raise TruncatedRecord(f"expected exactly one record, found {rec.size}", offset)
    return records_to_snapshots(rec)[0]


def parse_records(data: bytes, base_offset: int = 0) -> np.ndarray:
    """Validate and view a byte string of back-to-back records.

    All records must share the first record's ``n_taps``.  Errors carry the
    byte offset of the offending record.
    """
    buf = memoryview(data)
    if len(buf) == 0:
        return np.zeros(0, dtype=record_dtype())
    if len(buf) < HEADER_BYTES:
        raise TruncatedRecord("stream ends inside a record header", base_offset)
    head = np.frombuffer(buf[:HEADER_BYTES], dtype=_HEADER_DTYPE)[0]
    _check_header(head, base_offset)
    dt = record_dtype(int(head["n_taps"]))
    size = dt.itemsize
    n_full, rest = divmod(len(buf), size)
    rec = np.frombuffer(buf[: n_full * size], dtype=dt)
    bad_magic = np.flatnonzero(rec["magic"] != MAGIC)
    bad_ver = np.flatnonzero(rec["version"] != VERSION)
    bad_taps = np.flatnonzero(rec["n_taps"] != head["n_taps"])
    for idx, exc, msg in ((bad_magic, BadMagic, "bad magic"), (bad_ver, UnsupportedVersion, "unsupported version"),
                          (bad_taps, TruncatedRecord, "n_taps changes mid-stream")):
        if idx.size:
            raise exc(msg, base_offset + int(idx[0]) * size)
    raw = np.frombuffer(buf[: n_full * size], dtype=np.uint8).reshape(n_full, size)
    for i in range(n_full):
        if zlib.crc32(raw[i, 4:-4]) != rec["crc"][i]:
            raise BadCrc("CRC mismatch", base_offset + i * size)
    if rest:
        raise TruncatedRecord(f"trailing {rest} bytes do not form a full record", base_offset + n_full * size)
    return rec


def _check_header(head, offset: int) -> None:
    if bytes(head["magic"]) != MAGIC:
        raise BadMagic(f"bad magic {bytes(head['magic'])!r}", offset)
    if int(head["version"]) != VERSION:
        raise UnsupportedVersion(f"unsupported version {int(head['version'])}", offset)
    if int(head["n_taps"]) < 1:
        raise TruncatedRecord("n_taps must be >= 1", offset)


def write_stream(path: str | Path, records: np.ndarray, append: bool = False) -> None:
    with open(path, "ab" if append else "wb") as fh:
        fh.write(np.ascontiguousarray(records).tobytes())


def read_stream(path: str | Path) -> np.ndarray:
    return parse_records(Path(path).read_bytes())


# --------------------------------------------------------------------------
# decimating SPSC bridge
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StreamConfig:
    native_rate_hz: float = 976_562.5  # one readout per 1024 symbols at 1 GBd
    decimation: int = 1
    mode: Literal["subsample", "boxcar_average"] = "subsample"
    capacity: int = 4096

    def __post_init__(self):
        if not self.native_rate_hz > 0:
            raise ConfigError("native_rate_hz must be positive")
        if int(self.decimation) != self.decimation or self.decimation < 1:
            raise ConfigError(f"decimation must be an integer >= 1, got {self.decimation}")
        if self.mode not in ("subsample", "boxcar_average"):
            raise ConfigError(f"unknown decimation mode {self.mode!r}")
        if self.capacity < 1:
            raise ConfigError("capacity must be >= 1")

    @property
    def effective_rate_hz(self) -> float:
        return self.native_rate_hz / self.decimation


@dataclass(frozen=True)
class Gap:
    first_seq: int  # seq of the first dropped output window
    windows: int  # number of consecutive dropped windows


@dataclass
class _Window:
    count: int = 0
    taps: np.ndarray | None = None
    first_x: float = 0.0
    first_y: float = 0.0
    phase_x: float = 0.0
    phase_y: float = 0.0


def _average(snap_sum: np.ndarray, n: int) -> np.ndarray:
    return np.rint(snap_sum / n).astype(np.int16)


class SnapshotBridge:
    """SPSC decimating ring buffer.

    ``push`` is called from exactly one producer context and ``poll`` from
    exactly one consumer context.  The producer owns ``_head`` and the
    consumer owns ``_tail``; each slot is written before ``_head`` is
    published, so no lock is needed.  When the ring is full the newest
    window is dropped, the gap is logged in :attr:`gaps`, and the next
    delivered record carries ``FLAG_GAP_BEFORE``.
    """

    def __init__(self, config: StreamConfig = StreamConfig(), raise_on_overflow: bool = False):
        self.config = config
        self.raise_on_overflow = raise_on_overflow
        self._slots: list[TapSnapshot | None] = [None] * config.capacity
        self._head = 0
        self._tail = 0
        self._win = _Window()
        self._pending_gap = False
        self.gaps: list[Gap] = []
        self.pushed = 0
        self.dropped_windows = 0

    # producer side -------------------------------------------------------

    def push(self, snap: TapSnapshot) -> bool:
        """Feed one native-rate snapshot. Returns False if an output window
        completed but had to be dropped."""
        self.pushed += 1
        cfg = self.config
        win = self._win
        if cfg.mode == "boxcar_average":
            # phases averaged as first value + mean deviation: exact for
            # constant input
            if win.count == 0:
                win.taps = snap.taps.astype(np.int64)
                win.first_x = snap.cum_phase_x
                win.first_y = snap.cum_phase_y
            else:
                win.taps += snap.taps
                win.phase_x += snap.cum_phase_x - win.first_x
                win.phase_y += snap.cum_phase_y - win.first_y
        win.count += 1
        if win.count < cfg.decimation:
            return True

        if cfg.mode == "boxcar_average" and cfg.decimation > 1:
            n = cfg.decimation
            out = TapSnapshot(snap.seq, snap.t_ns, _average(win.taps, n), win.first_x + win.phase_x / n,
                              win.first_y + win.phase_y / n, snap.flags)
        else:
            out = snap
        self._win = _Window()
        return self._enqueue(out)

    def _enqueue(self, out: TapSnapshot) -> bool:
        cap = self.config.capacity
        if self._head - self._tail >= cap:
            self.dropped_windows += 1
            if self._pending_gap and self.gaps:
                last = self.gaps[-1]
                self.gaps[-1] = Gap(last.first_seq, last.windows + 1)
            else:
                self.gaps.append(Gap(out.seq, 1))
            self._pending_gap = True
            if self.raise_on_overflow:
                raise Overflow(f"bridge full; dropped window ending at seq {out.seq}")
            return False
        if self._pending_gap:
            out = TapSnapshot(out.seq, out.t_ns, out.taps, out.cum_phase_x, out.cum_phase_y,
                              out.flags | FLAG_GAP_BEFORE)
            self._pending_gap = False
        self._slots[self._head % cap] = out
        self._head += 1
        return True

    # consumer side -------------------------------------------------------

    def poll(self, max_items: int | None = None) -> list[TapSnapshot]:
        head = self._head
        n = head - self._tail
        if max_items is not None:
            n = min(n, max_items)
        cap = self.config.capacity
        out = []
        for _ in range(n):
            i = self._tail % cap
            out.append(self._slots[i])
            self._slots[i] = None
            self._tail += 1
        return out

    def __len__(self) -> int:
        return self._head - self._tail


def decimate_records(rec: np.ndarray, cfg: StreamConfig) -> np.ndarray:
    """Bulk equivalent of pushing ``rec`` through a never-lagging bridge."""
    d = int(cfg.decimation)
    n_out = rec.size // d
    if d == 1:
        return rec.copy()
    if cfg.mode == "subsample":
        return rec[d - 1 : n_out * d : d].copy()
    blocks = rec[: n_out * d].reshape(n_out, d)
    last = blocks[:, -1]
    taps = np.rint(blocks["taps"].astype(np.int64).sum(axis=1) / d).astype(np.int16)
    fx = blocks["cum_phase_x"][:, 0]
    fy = blocks["cum_phase_y"][:, 0]
    cx = np.zeros(n_out)
    cy = np.zeros(n_out)
    # sequential sum to match the streaming accumulator bit-for-bit
    for k in range(1, d):
        cx += blocks["cum_phase_x"][:, k] - fx
        cy += blocks["cum_phase_y"][:, k] - fy
    return pack_records(last["seq"], last["t_ns"], taps, fx + cx / d, fy + cy / d, last["flags"])
