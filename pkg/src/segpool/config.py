"""TOML experiment configuration: load, validate, serialize, and build a simulation."""

from __future__ import annotations

import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .cost_model import PROFILE_DIR, HardwareProfile, min_segment_size
from .sim import PolicyConfig, SimConfig
from .workload import TraceSpec, generate, load

OUT_ENV = "SEGPOOL_OUT_DIR"


class ConfigValidationError(ValueError):
    pass


@dataclass
class SchedulerParams:
    chunk_size: int = 512
    slo_multiplier: float = 10.0
    max_active: int = 64
    admission_retries: int = 3


@dataclass
class PoolParams:
    n_instances: int = 8
    segment_size: int = 640
    allow_small_segments: bool = False  # permit segment_size below the roofline threshold
    slot_capacity: int = 4096
    overload_delta: float = 0.2
    heavy_constant: float = 1.0
    half_life: float = 32.0


@dataclass
class MetricsParams:
    cv_window: float = 10.0


@dataclass
class TraceParams:
    path: str | None = None  # a JSONL trace file; when unset the spec below is generated
    system_prompt_len: int = 1024
    spec: TraceSpec | None = None


@dataclass
class ExperimentConfig:
    profile: str = "a100"
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    scheduler: SchedulerParams = field(default_factory=SchedulerParams)
    pool: PoolParams = field(default_factory=PoolParams)
    metrics: MetricsParams = field(default_factory=MetricsParams)
    trace: TraceParams = field(default_factory=TraceParams)
    seed: int = 0
    output_dir: str = "out"
    check_invariants: bool = False
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    # -- serialization ------------------------------------------------------------

    def to_dict(self) -> dict:
        def clean(d: dict) -> dict:
            return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items() if v is not None}

        tr = {"system_prompt_len": self.trace.system_prompt_len}
        if self.trace.path is not None:
            tr["path"] = self.trace.path
        if self.trace.spec is not None:
            tr["spec"] = clean(asdict(self.trace.spec))
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "check_invariants": self.check_invariants,
            "hardware": {"profile": self.profile},
            "policy": clean(asdict(self.policy)),
            "scheduler": asdict(self.scheduler),
            "pool": asdict(self.pool),
            "metrics": asdict(self.metrics),
            "trace": tr,
        }

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | str = ".") -> "ExperimentConfig":
        d = dict(d)
        known = {"seed", "output_dir", "check_invariants", "hardware", "policy", "scheduler", "pool", "metrics", "trace"}
        unknown = set(d) - known
        if unknown:
            raise ConfigValidationError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")

        def build(kind, section: str):
            data = d.get(section, {})
            names = {f.name for f in fields(kind)}
            bad = set(data) - names
            if bad:
                raise ConfigValidationError(f"[{section}] unknown key(s): {', '.join(sorted(bad))}")
            try:
                return kind(**data)
            except (TypeError, ValueError) as e:
                raise ConfigValidationError(f"[{section}] {e}") from None

        tr = dict(d.get("trace", {}))
        spec = tr.pop("spec", None)
        bad = set(tr) - {"path", "system_prompt_len"}
        if bad:
            raise ConfigValidationError(f"[trace] unknown key(s): {', '.join(sorted(bad))}")
        spec_obj = _build_spec(spec) if spec is not None else None
        hw = d.get("hardware", {})
        return cls(
            profile=hw.get("profile", "a100"),
            policy=build(PolicyConfig, "policy"),
            scheduler=build(SchedulerParams, "scheduler"),
            pool=build(PoolParams, "pool"),
            metrics=build(MetricsParams, "metrics"),
            trace=TraceParams(tr.get("path"), tr.get("system_prompt_len", 1024), spec_obj),
            seed=d.get("seed", 0),
            output_dir=d.get("output_dir", "out"),
            check_invariants=d.get("check_invariants", False),
            base_dir=Path(base_dir),
        )

    @classmethod
    def loads(cls, text: str, base_dir: Path | str = ".") -> "ExperimentConfig":
        try:
            return cls.from_dict(tomllib.loads(text), base_dir)
        except tomllib.TOMLDecodeError as e:
            raise ConfigValidationError(f"invalid TOML: {e}") from None

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        p = Path(path)
        return cls.loads(p.read_text(encoding="utf-8"), p.parent)

    # -- validation and assembly ------------------------------------------------------

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def hardware(self) -> HardwareProfile:
        p = Path(self.profile)
        if p.suffix == ".toml":
            p = self.resolve(self.profile)
            if not p.exists():
                raise ConfigValidationError(f"[hardware] profile file {p} does not exist")
            return HardwareProfile.load(p)
        if not (PROFILE_DIR / f"{self.profile}.toml").exists():
            raise ConfigValidationError(f"[hardware] unknown profile {self.profile!r}")
        return HardwareProfile.load(self.profile)

    def validate(self) -> None:
        prof = self.hardware()
        if self.trace.path is None and self.trace.spec is None:
            raise ConfigValidationError("[trace] needs either path or spec")
        if self.trace.path is not None and not self.resolve(self.trace.path).exists():
            raise ConfigValidationError(f"[trace] path {self.resolve(self.trace.path)} does not exist")
        floor = math.ceil(min_segment_size(prof))
        if self.pool.segment_size < floor and not self.pool.allow_small_segments:
            raise ConfigValidationError(
                f"[pool] segment_size {self.pool.segment_size} is below the threshold {floor}; "
                "set allow_small_segments = true to override"
            )
        try:
            self.sim_config(prof).validate()
        except ValueError as e:
            raise ConfigValidationError(str(e)) from None

    def sim_config(self, prof: HardwareProfile | None = None) -> SimConfig:
        s, p = self.scheduler, self.pool
        return SimConfig(
            n_instances=p.n_instances,
            policy=self.policy,
            profile=prof or self.hardware(),
            segment_size=p.segment_size,
            slot_capacity=p.slot_capacity,
            overload_delta=p.overload_delta,
            heavy_constant=p.heavy_constant,
            half_life=p.half_life,
            chunk_size=s.chunk_size,
            slo_multiplier=s.slo_multiplier,
            system_prompt_len=self.system_prompt_len(),
            max_active=s.max_active,
            admission_retries=s.admission_retries,
            seed=self.seed,
            check_invariants=self.check_invariants,
        )

    def system_prompt_len(self) -> int:
        if self.trace.path is None and self.trace.spec is not None:
            return self.trace.spec.system_prompt_len
        return self.trace.system_prompt_len

    def load_trace(self):
        if self.trace.path is not None:
            return load(self.resolve(self.trace.path))
        return generate(self.trace.spec)  # type: ignore[arg-type]

    # -- sweeps ------------------------------------------------------------------

    def keys(self) -> list[str]:
        out = []

        def walk(prefix: str, d: dict) -> None:
            for k, v in d.items():
                path = f"{prefix}{k}"
                if isinstance(v, dict):
                    walk(path + ".", v)
                else:
                    out.append(path)

        d = self.to_dict()
        # optional fields are settable even when currently unset
        d["policy"].setdefault("pd_split", None)
        d["trace"].setdefault("path", None)
        walk("", d)
        return sorted(out)

    def with_value(self, key: str, value: Any) -> "ExperimentConfig":
        if key not in self.keys():
            raise KeyError(key)
        d = self.to_dict()
        node = d
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
        return ExperimentConfig.from_dict(d, self.base_dir)


def _build_spec(data: dict) -> TraceSpec:
    names = {f.name for f in fields(TraceSpec)}
    bad = set(data) - names
    if bad:
        raise ConfigValidationError(f"[trace.spec] unknown key(s): {', '.join(sorted(bad))}")
    try:
        return TraceSpec(**data)
    except (TypeError, ValueError) as e:
        raise ConfigValidationError(f"[trace.spec] {e}") from None


def load_trace_spec(path: str | Path) -> TraceSpec:
    """A trace spec file: TraceSpec fields at top level or under [trace]."""
    try:
        data = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigValidationError(f"invalid TOML: {e}") from None
    if "trace" in data and isinstance(data["trace"], dict):
        data = data["trace"].get("spec", data["trace"])
    return _build_spec(data)


def spec_dumps(spec: TraceSpec) -> str:
    return tomli_w.dumps({k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items() if v is not None})
