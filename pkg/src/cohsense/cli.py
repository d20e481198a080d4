"""Command line: ``cohsense simulate | analyze | selftest``.

Exit codes: 0 ok, 1 configuration or usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import __version__
from . import analytics as an
from . import config as cfgmod
from . import selftest as st
from .bridge import parse_records, write_stream
from .errors import AlignmentError, ConfigError, StreamError, TooShort
from .pipeline import analyze_records, simulate, through_bridge

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _versions() -> dict:
    out = {"cohsense": __version__, "python": platform.python_version()}
    for pkg in ("numpy", "scipy", "numba", "PyYAML", "jsonschema"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_json_default, allow_nan=False) + "\n")


def _nan_to_none(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_nan_to_none(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = cfgmod.load(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    sim = simulate(cfg.tx, cfg.channel_state(), cfg.rx, cfg.n_symbols)
    stream_cfg = cfg.stream_config()
    records, gaps = through_bridge(sim.records, stream_cfg)

    names = cfg.outputs
    write_stream(out / names.stream, records)
    sim.truth.to_csv(out / names.ground_truth)
    report = sim.rx.report
    rx_json = dataclasses.asdict(report)
    rx_json["summary"] = report.summary()
    rx_json["adc_full_scale"] = sim.rx.adc_full_scale
    _write_json(out / names.rx_report, _nan_to_none(rx_json))
    (out / "config.yaml").write_text(cfgmod.serialize(cfg))

    converged = sim.converged_snapshot(cfg.rx.snapshot_interval)
    manifest = {
        "command": "simulate",
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "seeds": cfg.seeds(),
        "versions": _versions(),
        "time_scale": cfg.channel.time_scale,
        "symbol_rate": cfg.tx.symbol_rate,
        "snapshot_interval_symbols": cfg.rx.snapshot_interval,
        "native_rate_hz": stream_cfg.native_rate_hz,
        "decimation": stream_cfg.decimation,
        "decimation_mode": stream_cfg.mode,
        "effective_rate_hz": stream_cfg.effective_rate_hz,
        "converged_at_symbol": report.converged_at,
        "converged_snapshot": converged,
        "converged_record": -(-converged // stream_cfg.decimation),
        "n_records": int(len(records)),
        "gaps": [dataclasses.asdict(g) for g in gaps],
        "files": {p: _sha256(out / p) for p in (names.stream, names.ground_truth, names.rx_report, "config.yaml")},
        "elapsed_s": round(time.perf_counter() - t0, 3),
    }
    _write_json(out / names.manifest, manifest)
    print(report.summary())
    print(f"wrote {len(records)} records ({stream_cfg.effective_rate_hz:g} Hz) to {out / names.stream}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def _sibling_manifest(stream: Path) -> dict | None:
    """The simulate manifest next to ``stream`` if it describes that file."""
    for cand in stream.parent.glob("*.json"):
        try:
            m = json.loads(cand.read_text())
        except (OSError, ValueError):
            continue
        if isinstance(m, dict) and m.get("command") == "simulate" and stream.name in m.get("files", {}):
            return m
    return None


def cmd_analyze(args) -> int:
    src = Path(args.input)
    try:
        raw = src.read_bytes()
    except OSError as exc:
        print(f"error: cannot read {src}: {exc.strerror}", file=sys.stderr)
        return EXIT_DATA
    records = parse_records(raw)

    manifest = _sibling_manifest(src)
    run_cfg = cfgmod.parse(json.dumps(manifest["config"]), f"{src.parent}/manifest") if manifest else cfgmod.RunConfig()
    skip = args.skip if args.skip is not None else (manifest["converged_record"] if manifest else 0)
    time_scale = args.time_scale if args.time_scale is not None else run_cfg.channel.time_scale
    overrides = {"skip_snapshots": skip, "decimation": args.decimation, "time_scale": time_scale}
    if args.row:
        overrides["row"] = args.row
    if args.segment_len:
        overrides["segment_len"] = args.segment_len
    acfg = run_cfg.analysis_config(**overrides)

    prod = analyze_records(records, acfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    an.series_to_csv(out / "series.csv", prod.series())
    files = ["series.csv"]
    for name, grid in prod.spectrograms.items():
        fname = f"spectrogram_{name}.csv"
        an.spectrogram_to_csv(out / fname, grid)
        files.append(fname)
    report = dict(prod.report)
    any_peak = any(e["peaks"] for e in report["spectrograms"].values())
    corr_min = report["corr_abs_min"]
    report["flat"] = bool(not any_peak and corr_min is not None and corr_min > 0.99)
    report["analysis"] = dataclasses.asdict(acfg)
    _write_json(out / "report.json", _nan_to_none(report))
    files.append("report.json")
    _write_json(out / "manifest.json", {
        "command": "analyze",
        "input": str(src),
        "input_sha256": hashlib.sha256(raw).hexdigest(),
        "n_records_in": int(len(records)),
        "simulate_config_sha256": manifest["config_sha256"] if manifest else None,
        "analysis": dataclasses.asdict(acfg),
        "versions": _versions(),
        "files": {p: _sha256(out / p) for p in files},
    })

    print(f"{report['n_snapshots']} snapshots at {report['rate_hz']:.6g} Hz over {report['duration_s']:.6g} s")
    print(f"PDL mean {report['pdl_db_mean']} dB, min |C| {corr_min}")
    for name, entry in report["spectrograms"].items():
        peaks = ", ".join(f"{p['freq_hz']:.4g} Hz (+{p['height_db']:.1f} dB)" for p in entry["peaks"]) or "none"
        line = f"{name}: peaks {peaks}"
        for r in entry["ridges"]:
            if r["slope_hz_per_s"] is not None:
                line += f"; ridge {r['band_hz']} slope {r['slope_hz_per_s']:.4g} Hz/s"
        print(line)
    if report["flat"]:
        print("flat: no spectral peaks, |C| stays above 0.99")
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------


def cmd_selftest(args) -> int:
    if args.corrupt and args.corrupt not in st.CORRUPTIONS:
        print(f"error: unknown constant {args.corrupt!r}; choose from {sorted(st.CORRUPTIONS)}", file=sys.stderr)
        return EXIT_CONFIG
    t0 = time.perf_counter()
    results = st.run(args.corrupt)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail} ({r.seconds:.2f} s)")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} invariants passed in {time.perf_counter() - t0:.1f} s")
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return 1
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cohsense", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"cohsense {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="transmit, propagate and receive; write the .snap stream")
    s.add_argument("--config", required=True, help="YAML run configuration")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", help="turn a .snap stream into sensing series and spectrograms")
    a.add_argument("--in", dest="input", required=True, help=".snap stream file")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--row", choices=["first", "second"], help="Jones row used for Stokes traces")
    a.add_argument("--decimation", type=int, default=1, help="extra decimation of the stored records")
    a.add_argument("--time-scale", type=float, help="physical seconds per simulated second")
    a.add_argument("--skip", type=int, help="leading records to drop (default: from the simulate manifest)")
    a.add_argument("--segment-len", type=int, help="spectrogram segment length")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("selftest", help="run the built-in invariant suite")
    t.add_argument("--corrupt", help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StreamError, TooShort, AlignmentError) as exc:
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
