"""Declarative run configuration: YAML text validated against a published
JSON schema, with unknown keys rejected and errors pointing at the line."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .bridge import StreamConfig
from .channel import ChannelState, EventSpec, synth_event
from .core import random_unitary
from .errors import ConfigError
from .pipeline import AnalysisConfig
from .rxdsp import RxConfig
from .txsim import TxConfig

SCHEMA_RESOURCE = "data/config.schema.json"


@lru_cache(maxsize=1)
def schema() -> dict:
    return json.loads(resources.files("cohsense").joinpath(SCHEMA_RESOURCE).read_text())


def _keys(section: str) -> tuple[str, ...]:
    return tuple(schema()["properties"][section]["properties"])


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 insists on a dot in floats; accept plain exponent forms like 1e-3
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?|\.[0-9_]+)[eE][-+]?[0-9]+$"),
    list("-+0123456789."),
)


@dataclass(frozen=True)
class ChannelSpec:
    rotation: str | tuple = "random"
    pdl_db: float = 0.0
    pdl_axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    snr_db: float = 10.0
    phase_linewidth_hz: float = 1e3
    hold_symbols: int = 64
    time_scale: float = 1.0
    events: tuple[EventSpec, ...] = ()


@dataclass(frozen=True)
class BridgeSpec:
    decimation: int = 1
    mode: str = "subsample"
    capacity: int = 4096


@dataclass(frozen=True)
class AnalysisSpec:
    row: str = "first"
    align_fraction: float = 0.1
    correlation_reference: str = "first_sample"
    correlation_lag: int = 1
    segment_len: int = 256
    overlap: float = 0.5
    window: str = "hann"
    peak_min_db: float = 10.0
    ridge_threshold_db: float = 12.0
    chirp_bands: tuple = ((0.05, 0.12),)


@dataclass(frozen=True)
class OutputNames:
    stream: str = "stream.snap"
    ground_truth: str = "ground_truth.csv"
    rx_report: str = "rx_report.json"
    manifest: str = "manifest.json"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_symbols: int = 100_000
    tx: TxConfig = field(default_factory=TxConfig)
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    rx: RxConfig = field(default_factory=RxConfig)
    bridge: BridgeSpec = field(default_factory=BridgeSpec)
    analysis: AnalysisSpec = field(default_factory=AnalysisSpec)
    outputs: OutputNames = field(default_factory=OutputNames)

    def seeds(self) -> dict:
        """Seeds of every random stream, derived from the root seed."""
        noise, rot = np.random.SeedSequence(self.seed).generate_state(2, dtype=np.uint32)
        return {"root": self.seed, "channel_noise": int(noise), "rotation": int(rot)}

    def base_rotation(self) -> np.ndarray:
        r = self.channel.rotation
        if r == "identity":
            return np.eye(2, dtype=np.complex128)
        if r == "random":
            return random_unitary(np.random.default_rng(self.seeds()["rotation"]))
        return _matrix(r)

    def channel_state(self) -> ChannelState:
        c = self.channel
        return ChannelState(
            base_rotation=self.base_rotation(), pdl_db=c.pdl_db, pdl_axis=c.pdl_axis, events=c.events,
            phase_linewidth_hz=c.phase_linewidth_hz, snr_db=c.snr_db, seed=self.seeds()["channel_noise"],
            hold_symbols=c.hold_symbols, time_scale=c.time_scale,
        )

    def stream_config(self) -> StreamConfig:
        return StreamConfig(
            native_rate_hz=self.tx.symbol_rate / self.rx.snapshot_interval,
            decimation=self.bridge.decimation, mode=self.bridge.mode, capacity=self.bridge.capacity,
        )

    def analysis_config(self, **overrides) -> AnalysisConfig:
        a = dataclasses.asdict(self.analysis)
        a.update(time_scale=self.channel.time_scale, symbol_rate=self.tx.symbol_rate,
                 tap_frac_bits=self.rx.tap_frac_bits, decimation_mode=self.bridge.mode)
        a.update(overrides)
        return AnalysisConfig(**a)

    def to_dict(self) -> dict:
        out: dict = {"seed": self.seed, "n_symbols": self.n_symbols}
        for name in ("tx", "channel", "rx", "bridge", "analysis", "outputs"):
            obj = getattr(self, name)
            out[name] = {k: _plain(getattr(obj, k)) for k in _keys(name)}
        out["channel"]["events"] = [
            {k: _plain(getattr(ev, k)) for k in ("kind", "t_start", "t_end", "amplitude", "f0", "f1", "axis", "slope")}
            for ev in self.channel.events
        ]
        return out

    def digest(self) -> str:
        """SHA-256 of the canonical serialized form."""
        return hashlib.sha256(serialize(self).encode()).hexdigest()


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, (list, tuple)) else v


def _matrix(pairs) -> np.ndarray:
    return np.array([[complex(*z) for z in row] for row in pairs], dtype=np.complex128)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _node_at(root, path):
    """Deepest YAML node reachable along ``path`` (for line numbers)."""
    node = root
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = next((v for k, v in node.value if k.value == key), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            nxt = node.value[key]
        else:
            nxt = None
        if nxt is None:
            break
        node = nxt
    return node


def _key_node(mapping, key):
    if isinstance(mapping, yaml.MappingNode):
        for k, _ in mapping.value:
            if k.value == key:
                return k
    return mapping


def _fail(msg: str, root, path, source: str, key: str | None = None):
    node = _node_at(root, path) if root is not None else None
    if key is not None and node is not None:
        node = _key_node(node, key)
    line = node.start_mark.line + 1 if node is not None else None
    where = ".".join(str(p) for p in (*path, key) if p is not None) or "<root>"
    loc = f"{source}:{line}" if line else source
    err = ConfigError(f"{loc}: {where}: {msg}")
    err.line, err.field = line, where
    raise err


def _build(section: str, cls, data: dict, root, source: str, **extra):
    try:
        return cls(**{k: _tuplify(v) for k, v in data.get(section, {}).items()}, **extra)
    except (ConfigError, TypeError) as exc:
        msg = str(exc)
        # point at the offending key when the message names one
        key = next((k for k in data.get(section, {}) if re.search(rf"\b{re.escape(k)}\b", msg)), None)
        _fail(msg, root, [section], source, key=key)


def parse(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate YAML config text."""
    try:
        root = yaml.compose(text, Loader=_Loader)
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark else None
        err = ConfigError(f"{source}:{line}: YAML syntax error: {getattr(exc, 'problem', exc)}")
        err.line, err.field = line, None
        raise err from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        _fail("top level must be a mapping", root, [], source)

    validator = jsonschema.Draft202012Validator(schema())
    e = jsonschema.exceptions.best_match(validator.iter_errors(data))
    if e is not None:
        path = list(e.absolute_path)
        if e.validator == "additionalProperties":
            allowed = set(e.schema.get("properties", {}))
            extra = sorted(set(e.instance) - allowed)
            _fail(f"unknown key {extra[0]!r}", root, path, source, key=extra[0])
        _fail(e.message, root, path, source)

    ch = dict(data.get("channel", {}))
    events = []
    for i, ev in enumerate(ch.pop("events", []) or []):
        ev = dict(ev)
        try:
            events.append(synth_event(ev.pop("kind"), **{k: _tuplify(v) for k, v in ev.items()}))
        except ConfigError as exc:
            _fail(str(exc), root, ["channel", "events", i], source)
    if isinstance(ch.get("rotation"), list):
        m = _matrix(ch["rotation"])
        if np.linalg.norm(m.conj().T @ m - np.eye(2)) > 1e-9:
            _fail("rotation must be unitary", root, ["channel", "rotation"], source)
    channel = _build("channel", ChannelSpec, {"channel": ch}, root, source, events=tuple(events))

    cfg = RunConfig(
        seed=int(data.get("seed", 0)),
        n_symbols=int(data.get("n_symbols", RunConfig.n_symbols)),
        tx=_build("tx", TxConfig, data, root, source),
        channel=channel,
        rx=_build("rx", RxConfig, data, root, source),
        bridge=_build("bridge", BridgeSpec, data, root, source),
        analysis=_build("analysis", AnalysisSpec, data, root, source),
        outputs=_build("outputs", OutputNames, data, root, source),
    )
    try:
        cfg.channel_state()
        cfg.stream_config()
    except ConfigError as exc:
        _fail(str(exc), root, ["channel"], source)
    if cfg.n_symbols < 2 * cfg.rx.snapshot_interval:
        _fail("n_symbols must cover at least two snapshot intervals", root, ["n_symbols"], source)
    return cfg


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse(text, str(path))


def serialize(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)
