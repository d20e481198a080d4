"""Polarimetric value types, exact 2x2 algebra and fixed-point helpers.

Scalar APIs (``polar_decompose``, ``stokes_from_row`` ...) take and return the
small value types below. Every one of them is a thin wrapper around a
vectorized ``*_array`` twin that works on stacks of shape ``(..., 2, 2)`` so
the analytics layer can push 10^5 snapshots through without Python loops.

Stokes convention, for a field (or matrix row) ``(a, b)``::

    s0 = |a|^2 + |b|^2
    s1 = |a|^2 - |b|^2
    s2 = 2 Re(a b*)
    s3 = -2 Im(a b*)

which is ``s_k = v^H sigma_k v`` with ``sigma_1 = diag(1, -1)``,
``sigma_2 = [[0, 1], [1, 0]]`` and ``sigma_3 = [[0, -i], [i, 0]]``.
Flip ``s3`` to compare against tools using the opposite handedness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import ConfigError, NotUnitary, SingularMatrix, ZeroPower

__all__ = [
    "FixedSpec",
    "quantize",
    "dequantize",
    "JonesMatrix2",
    "StokesVector",
    "PolarParts",
    "PAULI",
    "polar_decompose",
    "polar_decompose_array",
    "pdl_db",
    "pdl_db_array",
    "stokes_from_row",
    "stokes_from_rows",
    "unitary_correlation",
    "unitary_correlation_array",
    "rotation_matrix",
    "pdl_matrix",
    "random_unitary",
]

# Singular-value ratio below which a matrix is treated as singular.
SINGULAR_RTOL = 1e-9
POWER_EPS = 1e-20


# --------------------------------------------------------------------------
# fixed point
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedSpec:
    """Two's-complement fixed-point format.

    Value of a code is ``code * 2**-frac_bits``.  Only round-half-even and
    saturation are modelled, which is what the receiver datapath uses.
    """

    total_bits: int
    frac_bits: int
    signed: bool = True
    rounding: Literal["nearest_even"] = "nearest_even"
    overflow: Literal["saturate"] = "saturate"

    def __post_init__(self):
        if not 1 <= self.total_bits <= 16:
            raise ConfigError(f"total_bits must be in [1, 16], got {self.total_bits}")
        if not 0 <= self.frac_bits < self.total_bits:
            raise ConfigError(
                f"frac_bits must be in [0, total_bits), got {self.frac_bits}"
            )
        if self.rounding != "nearest_even":
            raise ConfigError(f"unsupported rounding mode {self.rounding!r}")
        if self.overflow != "saturate":
            raise ConfigError(f"unsupported overflow mode {self.overflow!r}")

    @property
    def min_code(self) -> int:
        return -(1 << (self.total_bits - 1)) if self.signed else 0

    @property
    def max_code(self) -> int:
        if self.signed:
            return (1 << (self.total_bits - 1)) - 1
        return (1 << self.total_bits) - 1

    @property
    def lsb(self) -> float:
        return 2.0**-self.frac_bits

    @property
    def min_value(self) -> float:
        return self.min_code * self.lsb

    @property
    def max_value(self) -> float:
        return self.max_code * self.lsb

    def contains(self, code) -> bool:
        code = np.asarray(code)
        return bool(np.all((code >= self.min_code) & (code <= self.max_code)))


def quantize(x, spec: FixedSpec):
    """Round ``x`` half-to-even onto the grid of ``spec`` and saturate.

    Accepts scalars or arrays; returns ``int`` for scalars, ``int64`` arrays
    otherwise.
    """
    arr = np.asarray(x, dtype=np.float64)
    codes = np.rint(arr * (1 << spec.frac_bits))
    codes = np.clip(codes, spec.min_code, spec.max_code).astype(np.int64)
    if codes.ndim == 0:
        return int(codes)
    return codes


def dequantize(code, spec: FixedSpec):
    arr = np.asarray(code, dtype=np.float64) * spec.lsb
    if arr.ndim == 0:
        return float(arr)
    return arr


# --------------------------------------------------------------------------
# value types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class JonesMatrix2:
    """Complex 2x2 field transfer matrix ``[[h_xx, h_xy], [h_yx, h_yy]]``."""

    h_xx: complex
    h_xy: complex
    h_yx: complex
    h_yy: complex

    def __post_init__(self):
        if not np.all(np.isfinite(self.array)):
            raise ValueError("JonesMatrix2 entries must be finite")

    @classmethod
    def from_array(cls, m) -> "JonesMatrix2":
        m = np.asarray(m, dtype=np.complex128)
        if m.shape != (2, 2):
            raise ValueError(f"expected a 2x2 array, got shape {m.shape}")
        return cls(complex(m[0, 0]), complex(m[0, 1]), complex(m[1, 0]), complex(m[1, 1]))

    @classmethod
    def identity(cls) -> "JonesMatrix2":
        return cls(1 + 0j, 0j, 0j, 1 + 0j)

    @property
    def array(self) -> np.ndarray:
        return np.array([[self.h_xx, self.h_xy], [self.h_yx, self.h_yy]], dtype=np.complex128)

    @property
    def H(self) -> "JonesMatrix2":
        return JonesMatrix2.from_array(self.array.conj().T)

    def det(self) -> complex:
        return self.h_xx * self.h_yy - self.h_xy * self.h_yx

    def __matmul__(self, other: "JonesMatrix2") -> "JonesMatrix2":
        return JonesMatrix2.from_array(self.array @ other.array)

    def is_unitary(self, tol: float = 1e-9) -> bool:
        m = self.array
        return float(np.linalg.norm(m.conj().T @ m - np.eye(2))) <= tol


@dataclass(frozen=True)
class StokesVector:
    s1: float
    s2: float
    s3: float
    s0: float = 1.0

    @property
    def array(self) -> np.ndarray:
        return np.array([self.s1, self.s2, self.s3])


@dataclass(frozen=True)
class PolarParts:
    hermitian: JonesMatrix2
    unitary: JonesMatrix2


# Stokes-basis Pauli matrices, ordered (s1, s2, s3).
PAULI = np.array(
    [
        [[1, 0], [0, -1]],
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
    ],
    dtype=np.complex128,
)


# --------------------------------------------------------------------------
# polar decomposition and PDL
# --------------------------------------------------------------------------


def _singular_values(j: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    fro2 = np.sum(np.abs(j) ** 2, axis=(-2, -1))
    det = np.abs(j[..., 0, 0] * j[..., 1, 1] - j[..., 0, 1] * j[..., 1, 0])
    disc = np.sqrt(np.maximum(fro2**2 - 4.0 * det**2, 0.0))
    smax = np.sqrt((fro2 + disc) / 2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        smin = np.where(smax > 0, det / smax, 0.0)
    return smax, smin


def polar_decompose_array(j) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Left polar decomposition ``J = P U`` for a stack of 2x2 matrices.

    Returns ``(P, U, ok)``; rows where ``ok`` is False are singular and
    hold NaN.  Uses the 2x2 identity ``J + e^{i arg det J} adj(J)^H =
    tr(P) U`` which follows from Cayley-Hamilton, so no iteration and no
    matrix square root is needed.
    """
    j = np.asarray(j, dtype=np.complex128)
    a, b = j[..., 0, 0], j[..., 0, 1]
    c, d = j[..., 1, 0], j[..., 1, 1]
    det = a * d - b * c
    smax, smin = _singular_values(j)
    ok = np.isfinite(smax) & (smax > 0) & (smin > SINGULAR_RTOL * smax)

    with np.errstate(divide="ignore", invalid="ignore"):
        ph = np.where(ok, det / np.abs(det), 0)
    m = np.empty_like(j)
    m[..., 0, 0] = a + ph * np.conj(d)
    m[..., 0, 1] = b - ph * np.conj(c)
    m[..., 1, 0] = c - ph * np.conj(b)
    m[..., 1, 1] = d + ph * np.conj(a)
    trace_p = np.sqrt(np.sum(np.abs(m) ** 2, axis=(-2, -1)) / 2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = m / trace_p[..., None, None]
    p = j @ np.conj(np.swapaxes(u, -1, -2))
    p = 0.5 * (p + np.conj(np.swapaxes(p, -1, -2)))
    u = np.where(ok[..., None, None], u, np.nan)
    p = np.where(ok[..., None, None], p, np.nan)
    return p, u, ok


def polar_decompose(j: JonesMatrix2) -> PolarParts:
    """Split ``j`` into Hermitian PSD ``P`` (PDL) and unitary ``U`` (rotation)."""
    p, u, ok = polar_decompose_array(j.array)
    if not ok:
        raise SingularMatrix("Jones matrix is singular to within 1e-9 relative")
    return PolarParts(JonesMatrix2.from_array(p), JonesMatrix2.from_array(u))


def _hermitian_eigvals(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = p[..., 0, 0].real
    d = p[..., 1, 1].real
    half_tr = (a + d) / 2.0
    rad = np.hypot((a - d) / 2.0, np.abs(p[..., 0, 1]))
    return half_tr + rad, half_tr - rad


def pdl_db_array(p) -> np.ndarray:
    """PDL in dB of Hermitian PSD amplitude matrices; NaN where singular."""
    lmax, lmin = _hermitian_eigvals(np.asarray(p, dtype=np.complex128))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 20.0 * np.log10(lmax / lmin)
    return np.where(lmin > 0, out, np.nan)


def pdl_db(p: JonesMatrix2) -> float:
    """Power ratio ``10 log10(lmax/lmin)`` of ``p^2``, i.e. 20 log10 of the
    amplitude eigenvalue ratio of ``p``."""
    lmax, lmin = _hermitian_eigvals(p.array)
    if not lmin > 0:
        raise SingularMatrix("PDL undefined: smallest eigenvalue is not positive")
    return float(20.0 * np.log10(lmax / lmin))


# --------------------------------------------------------------------------
# Stokes
# --------------------------------------------------------------------------


def stokes_from_rows(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Normalized Stokes vectors of field pairs ``(a, b)``.

    Returns ``(s, s0)`` where ``s`` has a trailing axis of length 3.  Rows
    with ``s0 <= POWER_EPS`` come back as NaN.
    """
    a = np.asarray(a, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    pa = a.real**2 + a.imag**2
    pb = b.real**2 + b.imag**2
    s0 = pa + pb
    cross = a * np.conj(b)
    s = np.stack([pa - pb, 2.0 * cross.real, -2.0 * cross.imag], axis=-1)
    good = s0 > POWER_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(good[..., None], s / s0[..., None], np.nan)
        # renormalize away rounding so |s| = 1 to ~1 ulp
        s = s / np.linalg.norm(s, axis=-1, keepdims=True)
    return s, s0


def stokes_from_row(a: complex, b: complex) -> StokesVector:
    s, s0 = stokes_from_rows(a, b)
    if not s0 > POWER_EPS:
        raise ZeroPower("row carries no power")
    return StokesVector(float(s[0]), float(s[1]), float(s[2]), float(s0))


# --------------------------------------------------------------------------
# correlation
# --------------------------------------------------------------------------


def unitary_correlation_array(u1, u2) -> np.ndarray:
    """``Tr(u2^H u1) / 2`` over stacks (broadcasting)."""
    u1 = np.asarray(u1, dtype=np.complex128)
    u2 = np.asarray(u2, dtype=np.complex128)
    return np.sum(np.conj(u2) * u1, axis=(-2, -1)) / 2.0


def unitary_correlation(u1: JonesMatrix2, u2: JonesMatrix2) -> complex:
    """Closeness of two unitary Jones matrices; ``|C| = 1`` iff they differ
    only by a global phase."""
    for name, u in (("u1", u1), ("u2", u2)):
        if not u.is_unitary(1e-6):
            raise NotUnitary(f"{name} is not unitary; polar-decompose it first")
    return complex(unitary_correlation_array(u1.array, u2.array))


# --------------------------------------------------------------------------
# constructors used by the channel model and the test suite
# --------------------------------------------------------------------------


def _unit_axis(axis) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("rotation axis must be nonzero")
    return axis / norm


def rotation_matrix(theta, axis) -> np.ndarray:
    """``exp(-i theta/2 n.sigma)``: rotates column-field Stokes vectors by
    ``theta`` (right-handed) about Stokes axis ``n``.  Broadcasts over
    ``theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    n = _unit_axis(axis)
    ns = np.tensordot(n, PAULI, axes=([-1], [0])) if n.ndim == 1 else np.einsum("...k,kij->...ij", n, PAULI)
    c = np.cos(theta / 2.0)[..., None, None]
    s = np.sin(theta / 2.0)[..., None, None]
    return c * np.eye(2) - 1j * s * ns


def pdl_matrix(pdl_db_value: float, axis=(1.0, 0.0, 0.0)) -> np.ndarray:
    """Hermitian PSD amplitude matrix with the given PDL along a Stokes axis.

    Normalized to preserve mean power over the two eigenpolarizations
    (``a_max^2 + a_min^2 = 2``).
    """
    if pdl_db_value < 0:
        raise ValueError("PDL must be >= 0 dB")
    ratio = 10.0 ** (-pdl_db_value / 10.0)
    a_max = np.sqrt(2.0 / (1.0 + ratio))
    a_min = a_max * np.sqrt(ratio)
    n = _unit_axis(axis)
    ns = np.tensordot(n, PAULI, axes=([0], [0]))
    return 0.5 * (a_max + a_min) * np.eye(2) + 0.5 * (a_max - a_min) * ns


def random_unitary(rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Haar-random 2x2 unitaries via QR of complex Gaussian matrices."""
    shape = (2, 2) if size is None else (size, 2, 2)
    z = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    q, r = np.linalg.qr(z)
    d = np.diagonal(r, axis1=-2, axis2=-1)
    return q * (d / np.abs(d))[..., None, :]
