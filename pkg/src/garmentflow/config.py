"""Run configuration: a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored. Unknown keys are an error. The
canonical serialization lists every key in declaration order, so the config
hash is stable.
"""
from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .backbone import DiTConfig
from .conditioning import VARIANTS
from .selattn import KINDS, SelectionStrategy
from .worldgen import BUCKET_BY_RATIO

OUT_ROOT_ENV = "GARMENTFLOW_OUT"


class ConfigError(ValueError):
    pass


@dataclass
class Stage:
    name: str
    steps: int
    trainable: str  # "refiner" or "all"


@dataclass(frozen=True)
class RunConfig:
    # data
    data_seed: int = 0
    dataset_size: int = 2000
    eval_size: int = 200
    buckets: str = "1:1,3:4,2:3"
    # model
    patch: int = 4
    dim: int = 64
    heads: int = 4
    depth: int = 4
    time_dim: int = 64
    refiner: str = "fusion"
    refiner_depth: int = 2
    masked_attention: bool = True
    selective_attention: bool = True
    noise_sees_cond: bool = True
    strategy: str = "top-k"
    strategy_k: int = 8
    strategy_p: float = 0.2
    strategy_tau: float = 1.0
    # training; configs/reference-schedule.cfg holds the large-batch schedule
    stage_plan: str = "refiner:500,all:4500"
    batch_size: int = 16
    lr: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    log_interval: int = 50
    init_checkpoint: str = ""
    # seeds
    init_seed: int = 0
    train_seed: int = 0
    sample_seed: int = 0
    # sampling / runtime
    sampler_steps: int = 32
    threads: int = 1
    record_wallclock: bool = False
    out_root: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.refiner not in VARIANTS:
            raise ConfigError(f"refiner must be one of {VARIANTS}, got {self.refiner!r}")
        if self.strategy not in KINDS:
            raise ConfigError(f"strategy must be one of {KINDS}, got {self.strategy!r}")
        for ratio in self.bucket_list:
            if ratio not in BUCKET_BY_RATIO:
                raise ConfigError(f"unknown bucket {ratio!r}")
        for b in self.bucket_list:
            bucket = BUCKET_BY_RATIO[b]
            if bucket.height % self.patch or bucket.width % self.patch:
                raise ConfigError(f"bucket {b} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ConfigError("dim must be divisible by heads")
        for name in ("data_seed", "init_seed", "train_seed", "sample_seed"):
            if not 0 <= getattr(self, name) < 1 << 32:
                raise ConfigError(f"{name} must be in [0, 2^32)")
        for name in ("dataset_size", "eval_size", "batch_size", "log_interval", "sampler_steps", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        try:
            self.selection
        except ValueError as e:
            raise ConfigError(str(e)) from None
        self.stages  # parse check

    @property
    def bucket_list(self) -> list[str]:
        return [b.strip() for b in self.buckets.split(",") if b.strip()]

    @property
    def selection(self) -> SelectionStrategy:
        return SelectionStrategy(self.strategy, self.strategy_k, self.strategy_p, self.strategy_tau)

    @property
    def stages(self) -> list[Stage]:
        out = []
        for item in self.stage_plan.split(","):
            item = item.strip()
            if not item:
                continue
            try:
                name, steps = item.split(":")
                steps = int(steps)
            except ValueError:
                raise ConfigError(f"bad stage entry {item!r}; expected trainable:steps") from None
            if name not in ("refiner", "all") or steps < 0:
                raise ConfigError(f"bad stage entry {item!r}")
            out.append(Stage(f"stage{len(out) + 1}", steps, name))
        if not out:
            raise ConfigError("stage_plan is empty")
        return out

    def dit_config(self) -> DiTConfig:
        return DiTConfig(
            patch=self.patch,
            dim=self.dim,
            heads=self.heads,
            depth=self.depth,
            time_dim=self.time_dim,
            sampler_steps=self.sampler_steps,
            strategy=self.selection,
            refiner=self.refiner,
            refiner_depth=self.refiner_depth,
            masked_attention=self.masked_attention,
            selective_attention=self.selective_attention,
            noise_sees_cond=self.noise_sees_cond,
            max_rows=max(BUCKET_BY_RATIO[b].height for b in self.bucket_list) // self.patch,
            max_cols=max(BUCKET_BY_RATIO[b].width for b in self.bucket_list) // self.patch,
        )

    def replace(self, **changes) -> "RunConfig":
        try:
            return dataclasses.replace(self, **changes)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    # ------------------------------------------------------------ text form

    def serialize(self) -> str:
        lines = [f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()[:12]

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            values[key] = _coerce(raw, types[key], f"{source}:{lineno}")
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        return cls.parse(text, str(path))

    def save(self, path) -> None:
        from .imageio import atomic_write_bytes

        atomic_write_bytes(path, self.serialize().encode())

    def resolved_out_root(self) -> Path:
        return Path(os.environ.get(OUT_ROOT_ENV) or self.out_root)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, typ, where: str):
    try:
        if typ in (bool, "bool"):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ}") from None
    return raw
