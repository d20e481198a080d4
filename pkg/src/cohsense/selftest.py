"""Built-in invariant suite run by ``cohsense selftest``.

Each check is independent of pytest so it can run on a deployed install.
``corrupt`` temporarily replaces one module constant with a wrong value;
the suite must then fail and name the broken invariant.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import bridge, core, rxdsp
from .core import FixedSpec, dequantize, quantize

N_RANDOM = 2000
TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _rng() -> np.random.Generator:
    return np.random.default_rng(20240601)


def _random_jones(rng, n):
    u = core.random_unitary(rng, n)
    axes = rng.normal(size=(n, 3))
    p = np.stack([core.pdl_matrix(d, a) for d, a in zip(rng.uniform(0, 20, n), axes)])
    return p @ u * (rng.uniform(0.1, 10, n) * np.exp(2j * np.pi * rng.uniform(size=n)))[:, None, None]


def check_polar_reconstruction():
    j = _random_jones(_rng(), N_RANDOM)
    p, u, ok = core.polar_decompose_array(j)
    if not ok.all():
        return False, "well-conditioned input flagged singular"
    eye = np.eye(2)
    rec = np.max(np.linalg.norm(p @ u - j, axis=(1, 2)) / np.linalg.norm(j, axis=(1, 2)))
    uni = np.max(np.linalg.norm(u @ np.conj(np.swapaxes(u, 1, 2)) - eye, axis=(1, 2)))
    herm = np.max(np.abs(p - np.conj(np.swapaxes(p, 1, 2))))
    psd = np.min(np.linalg.eigvalsh(p))
    worst = max(rec, uni)
    return worst <= TOL and herm <= TOL and psd > 0, f"max |PU-J|/|J| {rec:.1e}, max |UU^H-I| {uni:.1e}"


def check_pdl_round_trip():
    rng = _rng()
    vals = rng.uniform(0, 20, 200)
    got = np.array([core.pdl_db_array(core.pdl_matrix(v, rng.normal(size=3))) for v in vals])
    err = np.max(np.abs(got - vals))
    return err <= 1e-9, f"max PDL error {err:.1e} dB"


def check_correlation_invariance():
    rng = _rng()
    u1, u2, v, w = (core.random_unitary(rng, N_RANDOM) for _ in range(4))
    c0 = core.unitary_correlation_array(u1, u2)
    c1 = core.unitary_correlation_array(v @ u1 @ w, v @ u2 @ w)
    err = np.max(np.abs(c1 - c0))
    self_c = np.max(np.abs(np.abs(core.unitary_correlation_array(u1, u1 * np.exp(1j * 0.7))) - 1))
    return err <= TOL and self_c <= TOL, f"max |C(VU1W,VU2W)-C(U1,U2)| {err:.1e}"


def check_stokes_phase_invariance():
    rng = _rng()
    a, b = rng.normal(size=(2, N_RANDOM)) + 1j * rng.normal(size=(2, N_RANDOM))
    phase = np.exp(2j * np.pi * rng.uniform(size=N_RANDOM))
    s0, _ = core.stokes_from_rows(a, b)
    s1, _ = core.stokes_from_rows(a * phase, b * phase)
    err = np.max(np.abs(s1 - s0))
    norm = np.max(np.abs(np.linalg.norm(s0, axis=1) - 1))
    return bool(err <= TOL and norm <= TOL), f"max Stokes change {err:.1e}, max ||s|-1| {norm:.1e}"


def check_rotation_stokes():
    """rotation_matrix(theta, n) must rotate Stokes vectors by theta about n
    (Rodrigues formula as the oracle)."""
    rng = _rng()
    n = rng.normal(size=(N_RANDOM, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    theta = rng.uniform(-np.pi, np.pi, N_RANDOM)
    e = rng.normal(size=(N_RANDOM, 2)) + 1j * rng.normal(size=(N_RANDOM, 2))
    r = core.rotation_matrix(theta, n)
    out = np.einsum("nij,nj->ni", r, e)
    s_in, _ = core.stokes_from_rows(e[:, 0], e[:, 1])
    s_out, _ = core.stokes_from_rows(out[:, 0], out[:, 1])
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    dot = np.sum(n * s_in, axis=1, keepdims=True)
    expect = s_in * c + np.cross(n, s_in) * s + n * dot * (1 - c)
    err = np.max(np.abs(s_out - expect))
    return err <= 1e-9, f"max Stokes rotation error {err:.1e}"


def check_fixed_point_round_trip():
    details = []
    ok = True
    for spec in (rxdsp.TAP_SPEC, rxdsp.ERR_SPEC, FixedSpec(8, 0), FixedSpec(16, 15)):
        codes = np.arange(spec.min_code, spec.max_code + 1)
        back = quantize(dequantize(codes, spec), spec)
        ok &= bool(np.array_equal(back, codes))
        x = np.linspace(spec.min_value, spec.max_value, 10001)
        err = np.max(np.abs(dequantize(quantize(x, spec), spec) - x))
        ok &= bool(err <= spec.lsb / 2)
        sat = quantize([spec.max_value * 4, spec.min_value * 4], spec)
        ok &= sat.tolist() == [spec.max_code, spec.min_code]
        details.append(f"{spec.total_bits}.{spec.frac_bits}")
    return ok, "code->value->code identity, |err| <= lsb/2, saturation for " + ", ".join(details)


def check_snap_round_trip():
    rng = _rng()
    n = 64
    rec = bridge.pack_records(
        np.arange(n), np.arange(n) * 1024, rng.integers(-256, 256, (n, 4, 17, 2)),
        rng.normal(size=n), rng.normal(size=n),
    )
    raw = rec.tobytes()
    back = bridge.parse_records(raw)
    size = bridge.record_size(17)
    return back.tobytes() == raw and size == 318 and len(raw) == n * size, f"{n} records, {size} bytes each"


def check_cma_kernel_reference():
    rng = _rng()
    n = 256
    x, y = rng.normal(size=(2, 2 * n)) + 1j * rng.normal(size=(2, 2 * n))
    eq0 = rxdsp.EqualizerState.initial(mu=2.0**-6)
    out, _, _, _, eq_k = rxdsp.run_equalizer(x, y, eq0, parallel=1)
    c = (eq0.n_taps - 1) // 2
    xp = np.concatenate([np.zeros(c), x, np.zeros(c + 2)])
    yp = np.concatenate([np.zeros(c), y, np.zeros(c + 2)])
    idx = 2 * c - np.arange(eq0.n_taps)
    eq = eq0
    for k in range(n):
        y0, y1, eq = rxdsp.cma_step(eq, xp[2 * k + idx], yp[2 * k + idx])
        if (y0, y1) != (out[0, k], out[1, k]):
            return False, f"output mismatch at symbol {k}"
    same = np.array_equal(eq.tap_codes, eq_k.tap_codes) and np.array_equal(eq.acc, eq_k.acc)
    return same, f"{n} symbols bit-exact against the scalar reference"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "polar_reconstruction": check_polar_reconstruction,
    "pdl_round_trip": check_pdl_round_trip,
    "correlation_rotation_invariance": check_correlation_invariance,
    "stokes_global_phase_invariance": check_stokes_phase_invariance,
    "rotation_stokes_consistency": check_rotation_stokes,
    "fixed_point_round_trip": check_fixed_point_round_trip,
    "snap_round_trip": check_snap_round_trip,
    "cma_kernel_reference": check_cma_kernel_reference,
}


def _flip_sigma2(p):
    p = p.copy()
    p[1] = -p[1]
    return p


# test hook: module, constant, replacement factory
CORRUPTIONS = {
    "core.PAULI": (core, "PAULI", _flip_sigma2),
    "core.POWER_EPS": (core, "POWER_EPS", lambda v: 1e300),
    "core.SINGULAR_RTOL": (core, "SINGULAR_RTOL", lambda v: 2.0),
}


@contextmanager
def corrupted(name: str | None):
    if name is None:
        yield
        return
    if name not in CORRUPTIONS:
        raise KeyError(f"unknown constant {name!r}; choose from {sorted(CORRUPTIONS)}")
    mod, attr, make = CORRUPTIONS[name]
    original = getattr(mod, attr)
    setattr(mod, attr, make(original))
    try:
        yield
    finally:
        setattr(mod, attr, original)


def run(corrupt: str | None = None, only: list[str] | None = None) -> list[CheckResult]:
    results = []
    with corrupted(corrupt):
        for name, fn in CHECKS.items():
            if only and name not in only:
                continue
            t0 = time.perf_counter()
            try:
                ok, detail = fn()
            except Exception as exc:  # a crash is a failure of that invariant
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results
