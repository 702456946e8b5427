"""Flat ``key = value`` run configuration.

Every key is validated before any work starts; errors name the key.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Tuple

from .errors import ConfigError


@dataclass
class RunConfig:
    devices: int = 4
    topology: Optional[str] = None
    n: int = 64
    channels: int = 8
    compressed_channels: Optional[int] = None
    frames: int = 1
    motion: float = 0.02
    mask_density: float = 0.25
    center_band: int = 8
    noise_sigma: float = 0.0
    weight_a: float = 220.0
    weight_b: float = 32.0
    alpha0: float = 1.0
    q: float = 1.0 / 3.0
    newton_steps: int = 6
    cg_iters: int = 30
    cg_tol: float = 1e-2
    precision: str = "single"
    seed: int = 0
    out_dir: str = "out"
    data_dir: Optional[str] = None
    check_invariance: bool = False
    bench_matrix_size: int = 256
    bench_sizes: Tuple[int, ...] = (64, 128, 256, 512)
    bench_matrices: int = 12
    bench_weak_per_device: int = 3

    def validate(self) -> "RunConfig":
        _require(self.devices >= 1, "devices", "must be >= 1")
        _require(self.n >= 2 and self.n & (self.n - 1) == 0, "n", "must be a power of two >= 2")
        _require(self.channels >= 1, "channels", "must be >= 1")
        if self.compressed_channels is not None:
            _require(
                1 <= self.compressed_channels <= self.channels,
                "compressed_channels",
                f"must lie in [1, channels={self.channels}]",
            )
        _require(self.frames >= 1, "frames", "must be >= 1")
        _require(0 < self.mask_density <= 1, "mask_density", "must lie in (0, 1]")
        _require(self.center_band >= 0, "center_band", "must be >= 0")
        _require(self.noise_sigma >= 0, "noise_sigma", "must be >= 0")
        _require(self.weight_b >= 0 and self.weight_a >= 0, "weight_a", "weights must be >= 0")
        _require(self.alpha0 > 0, "alpha0", "must be > 0")
        _require(0 < self.q < 1, "q", "must lie in (0, 1)")
        _require(self.newton_steps >= 1, "newton_steps", "must be >= 1")
        _require(self.cg_iters >= 1, "cg_iters", "must be >= 1")
        _require(self.cg_tol > 0, "cg_tol", "must be > 0")
        _require(self.precision in ("single", "double"), "precision", "must be 'single' or 'double'")
        _require(all(s >= 2 and s & (s - 1) == 0 for s in self.bench_sizes), "bench_sizes",
                 "must be powers of two")
        _require(self.bench_matrix_size >= 1, "bench_matrix_size", "must be >= 1")
        _require(self.bench_matrices >= 1, "bench_matrices", "must be >= 1")
        _require(self.bench_weak_per_device >= 1, "bench_weak_per_device", "must be >= 1")
        if self.topology is not None:
            _require(Path(self.topology).is_file(), "topology", f"file not found: {self.topology}")
        return self

    @property
    def J_recon(self) -> int:
        return self.compressed_channels or self.channels


def _require(cond, key, msg):
    if not cond:
        raise ConfigError(key, msg)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, value: str):
    default = getattr(RunConfig, key, None)
    ftype = str(_FIELDS[key].type)
    try:
        if key == "bench_sizes":
            return tuple(int(v) for v in value.split(",") if v.strip())
        if "bool" in ftype:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if "int" in ftype:
            return int(value)
        if "float" in ftype:
            return float(value)
        return value
    except ValueError:
        raise ConfigError(key, f"invalid value {value!r}") from None


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(key, "unknown configuration key")
        setattr(cfg, key, _convert(key, value))
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError("--config", str(e)) from None
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            continue
        if isinstance(v, tuple):
            v = ",".join(map(str, v))
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
