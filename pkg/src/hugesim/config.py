"""Scenario configuration: a JSON document with dotted-path overrides."""

from __future__ import annotations

import copy
import dataclasses
import enum
import json
import os
import re
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError
from .sizes import GB, KB, MB


class Policy(str, enum.Enum):
    BASE4K = "base4k"
    THP2M = "thp2m"
    TRIDENT_1G_ONLY = "trident1gonly"
    TRIDENT = "trident"
    TRIDENT_PV = "tridentpv"

    @classmethod
    def parse(cls, text) -> "Policy":
        if isinstance(text, Policy):
            return text
        key = re.sub(r"[^a-z0-9]", "", str(text).lower())
        for p in cls:
            if p.value == key:
                return p
        raise ConfigError(f"unknown policy {text!r}")


_SIZE_RE = re.compile(r"^\s*(\d+)\s*([kmgt]?)i?b?\s*$", re.I)
_UNITS = {"": 1, "k": KB, "m": MB, "g": GB, "t": GB << 10}


def parse_bytes(v) -> int:
    if isinstance(v, bool):
        raise ConfigError(f"bad size {v!r}")
    if isinstance(v, int):
        return v
    m = _SIZE_RE.match(str(v))
    if not m:
        raise ConfigError(f"bad size {v!r}")
    return int(m.group(1)) * _UNITS[m.group(2).lower()]


@dataclass
class TraceConfig:
    # "preallocating" | "incremental" | "pattern" | "file"
    kind: str = "preallocating"
    path: str | None = None
    pattern: str = "uniform"
    footprint: int = GB
    base: int = GB
    accesses: int = 0
    windows: int = 6
    pid: int = 1
    settle_ticks: int = 8
    tick_ns: int = 10_000_000


@dataclass
class FragConfig:
    preset: str | None = "none"
    occupied_fraction: float | None = None
    unmovable_fraction: float | None = None
    clustering: float | None = None
    skew: float | None = None
    unmovable_span: float | None = None


@dataclass
class KhugepagedConfig:
    enabled: bool = True
    budget: int = 8
    interval_ns: int = 10_000_000


@dataclass
class ZeroPoolConfig:
    capacity: int = 4
    fill_rate: int = 1
    interval_ns: int = 10_000_000


@dataclass
class CostConfig:
    mem_latency: float = 100.0
    l2_penalty: float = 7.0
    base: float = 1.0


@dataclass
class LatencyConfig:
    fault_1g_sync: int = 400_000_000
    fault_1g_async: int = 2_700_000
    fault_2m: int = 850_000
    fault_4k: int = 5_000


@dataclass
class PvConfig:
    hypercall: int = 300
    per_entry: int = 1_000
    copy_2m: int = 600_000_000 // 512


@dataclass
class VirtConfig:
    enabled: bool = False
    host_memory: int = 0  # 0: guest memory plus 1GB
    host_policy: str = "thp2m"


@dataclass
class ScenarioConfig:
    name: str = ""
    policy: str = "trident"
    seed: int = 0
    memory: int = 8 * GB
    trace: TraceConfig = field(default_factory=TraceConfig)
    fragmentation: FragConfig = field(default_factory=FragConfig)
    khugepaged: KhugepagedConfig = field(default_factory=KhugepagedConfig)
    zero_pool: ZeroPoolConfig = field(default_factory=ZeroPoolConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    pv: PvConfig = field(default_factory=PvConfig)
    virtualization: VirtConfig = field(default_factory=VirtConfig)
    tlb: dict | None = None
    timeseries_interval_ns: int = 10_000_000
    base_dir: str = field(default=".", metadata={"internal": True})

    @property
    def policy_enum(self) -> Policy:
        return Policy.parse(self.policy)

    @property
    def label(self) -> str:
        return self.name or self.policy_enum.value

    # -- (de)serialization -------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    @classmethod
    def from_dict(cls, data: dict, base_dir: str = ".") -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _build(cls, data, "")
        cfg.base_dir = base_dir
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str, overrides=()) -> "ScenarioConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        data = apply_overrides(data, overrides)
        return cls.from_dict(data, os.path.dirname(os.path.abspath(path)))

    def trace_path(self) -> str | None:
        if self.trace.path is None:
            return None
        return os.path.join(self.base_dir, self.trace.path)

    def validate(self) -> None:
        self.policy_enum
        if self.memory <= 0 or self.memory % GB:
            raise ConfigError("memory must be a positive multiple of 1GB")
        if self.policy_enum == Policy.TRIDENT_PV and not self.virtualization.enabled:
            raise ConfigError("tridentpv requires virtualization.enabled")
        if self.virtualization.enabled:
            Policy.parse(self.virtualization.host_policy)
            if self.virtualization.host_memory and self.virtualization.host_memory < self.memory:
                raise ConfigError("host memory must hold the whole guest")
            if self.virtualization.host_memory % GB:
                raise ConfigError("host memory must be a multiple of 1GB")
        t = self.trace
        if t.kind not in ("preallocating", "incremental", "pattern", "file"):
            raise ConfigError(f"unknown trace kind {t.kind!r}")
        if t.kind == "file":
            p = self.trace_path()
            if p is None or not os.path.isfile(p):
                raise ConfigError(f"trace file not found: {t.path}")
        if t.base % GB and t.kind != "file":
            raise ConfigError("trace.base must be 1GB aligned")
        for name, val in (("khugepaged.budget", self.khugepaged.budget),
                          ("khugepaged.interval_ns", self.khugepaged.interval_ns),
                          ("zero_pool.interval_ns", self.zero_pool.interval_ns),
                          ("timeseries_interval_ns", self.timeseries_interval_ns),
                          ("cost.mem_latency", self.cost.mem_latency),
                          ("cost.base", self.cost.base),
                          ("pv.hypercall", self.pv.hypercall),
                          ("pv.per_entry", self.pv.per_entry),
                          ("pv.copy_2m", self.pv.copy_2m),
                          ("trace.tick_ns", t.tick_ns)):
            if val <= 0:
                raise ConfigError(f"{name} must be positive")
        for name, val in dataclasses.asdict(self.latency).items():
            if val <= 0:
                raise ConfigError(f"latency.{name} must be positive")
        if self.latency.fault_1g_async >= self.latency.fault_1g_sync:
            raise ConfigError("latency.fault_1g_async must be below fault_1g_sync")
        if self.cost.l2_penalty < 0:
            raise ConfigError("cost.l2_penalty must be non-negative")
        try:
            self.frag_spec()
            self.tlb_config()
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    def frag_spec(self):
        from .workload import PRESETS
        f = self.fragmentation
        name = f.preset or "none"
        if name not in PRESETS:
            raise ConfigError(f"unknown fragmentation preset {name!r}")
        base = PRESETS[name]
        changes = {k: v for k, v in dataclasses.asdict(f).items() if k != "preset" and v is not None}
        changes["seed"] = self.seed
        return dataclasses.replace(base, **changes)

    def tlb_config(self):
        from .tlb import TlbConfig
        return TlbConfig.from_dict(self.tlb) if self.tlb else TlbConfig()


_BYTE_FIELDS = {"memory", "footprint", "base", "host_memory"}


def _build(cls, data: dict, prefix: str):
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls) if not f.metadata.get("internal")}
    for key, val in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        f = fields[key]
        sub = _SECTIONS.get(key) if cls is ScenarioConfig else None
        if sub is not None:
            if not isinstance(val, dict):
                raise ConfigError(f"{prefix + key} must be an object")
            kwargs[key] = _build(sub, val, prefix + key + ".")
        elif key in _BYTE_FIELDS:
            kwargs[key] = parse_bytes(val)
        else:
            kwargs[key] = _coerce(f, val, prefix + key)
    return cls(**kwargs)


def _coerce(f, val, name):
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if val is None:
        if "None" in t:
            return None
        raise ConfigError(f"{name} may not be null")
    if t.startswith("bool"):
        if not isinstance(val, bool):
            raise ConfigError(f"{name} must be true or false")
        return val
    if t.startswith("int"):
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{name} must be an integer")
        return val
    if t.startswith("float"):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(val)
    if t.startswith("str"):
        if not isinstance(val, str):
            raise ConfigError(f"{name} must be a string")
        return val
    return copy.deepcopy(val)


_SECTIONS = {
    "trace": TraceConfig,
    "fragmentation": FragConfig,
    "khugepaged": KhugepagedConfig,
    "zero_pool": ZeroPoolConfig,
    "cost": CostConfig,
    "latency": LatencyConfig,
    "pv": PvConfig,
    "virtualization": VirtConfig,
}


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply "a.b.c=value" strings; values are JSON when they parse."""
    out = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        if not all(keys):
            raise ConfigError(f"bad override path {path!r}")
        node = out
        for k in keys[:-1]:
            nxt = node.setdefault(k, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {path!r} descends into a non-object")
            node = nxt
        node[keys[-1]] = _parse_value(raw)
    return out
