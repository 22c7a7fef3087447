"""Run configuration: defaults, a TOML file, then command-line overrides.

Precedence is fixed: dataclass defaults < TOML keys < explicit flags. The
TOML layer rejects unknown keys so a typo cannot silently fall back to a
default mid-experiment.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ConfigError


@dataclass
class RunConfig:
    # bookkeeping
    workdir: str = "."
    seed: int = 0
    threads: int = 0            # 0: PARTGRAPH_THREADS, else 1
    # paths (resolved against workdir)
    manifest: str = ""
    negatives_dir: str = ""
    skeleton: str = ""
    model: str = "model.json"
    image: str = ""
    pred: str = ""
    out: str = "out"
    # synthetic data
    count: int = 20
    noise: float = 0.03
    width: int = 192
    height: int = 144
    negative_count: int = 0
    negative_width: int = 128
    negative_height: int = 128
    mix: str = ""               # "0:5,3:5"; empty splits between bins 0 and 3
    car_scale: int = 1
    # candidate grid
    stride: int = 4
    scales: str = ""            # "0.5,1.0"; empty sweeps the scale band
    r_w: float = 0.0            # 0: twice the patch size
    sigma_e: float = 0.0        # 0: the patch size
    # model structure
    num_levels: int = 3
    patch_size: int = 0         # 0: percentile estimate from the data
    # training
    C: float = 0.002
    max_iters: int = 10
    mining_rounds: int = 5
    max_epochs: int = 120
    tol_outer: float = 1e-4
    tol_inner: float = 1e-3
    flip: bool = False
    # rendering
    alpha: float = 0.45

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.threads < 0:
            raise ConfigError(f"threads must be >= 0, got {self.threads}")
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        for name in ("width", "height", "negative_width", "negative_height"):
            v = getattr(self, name)
            if v < 16:
                raise ConfigError(f"{name} must be >= 16, got {v}")
        if self.negative_count < 0:
            raise ConfigError(f"negative_count must be >= 0, "
                              f"got {self.negative_count}")
        if self.car_scale < 1:
            raise ConfigError(f"car_scale must be >= 1, got {self.car_scale}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.r_w < 0 or self.sigma_e < 0:
            raise ConfigError("r_w and sigma_e must be >= 0 (0 means default)")
        if self.num_levels < 1:
            raise ConfigError(f"num_levels must be >= 1, got {self.num_levels}")
        if self.patch_size < 0 or (self.patch_size and self.patch_size < 4):
            raise ConfigError(f"patch_size must be 0 or >= 4, "
                              f"got {self.patch_size}")
        if self.C < 0:
            raise ConfigError(f"C must be >= 0, got {self.C}")
        if self.max_iters < 1 or self.mining_rounds < 1 or self.max_epochs < 1:
            raise ConfigError("max_iters, mining_rounds and max_epochs "
                              "must be >= 1")
        if self.tol_outer < 0 or self.tol_inner < 0:
            raise ConfigError("tolerances must be >= 0")
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        self.mix_table()
        self.scale_tuple()

    def mix_table(self) -> dict[int, int] | None:
        """Parse the viewpoint mix string into {viewpoint: count}."""
        if not self.mix:
            return None
        out = {}
        for item in self.mix.split(","):
            try:
                k, v = item.split(":")
                out[int(k)] = int(v)
            except ValueError:
                raise ConfigError(f"bad mix entry {item!r}; "
                                  "expected viewpoint:count") from None
        return out

    def scale_tuple(self) -> tuple[float, ...] | None:
        if not self.scales:
            return None
        try:
            out = tuple(float(s) for s in self.scales.split(","))
        except ValueError:
            raise ConfigError(f"bad scales {self.scales!r}") from None
        if any(s <= 0 for s in out):
            raise ConfigError(f"scales must be positive, got {self.scales!r}")
        return out

    def path(self, name: str) -> str:
        """Resolve a path field against the workdir."""
        value = getattr(self, name)
        if not value:
            raise ConfigError(f"missing required path: {name}")
        return os.path.join(self.workdir, value)

    def resolve_threads(self) -> int:
        env = os.environ.get("PARTGRAPH_THREADS", "")
        cap = None
        if env:
            try:
                cap = int(env)
            except ValueError:
                raise ConfigError(f"PARTGRAPH_THREADS={env!r} is not an int")
            if cap < 1:
                raise ConfigError(f"PARTGRAPH_THREADS must be >= 1, got {cap}")
        want = self.threads if self.threads else (cap or 1)
        return min(want, cap) if cap else want


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_TYPES = {"str": str, "int": int, "float": float, "bool": bool}


def _coerce(key: str, value):
    want = _TYPES[_FIELDS[key]]
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, want) or (want is int and isinstance(value, bool)):
        raise ConfigError(f"config key {key!r} expects {want.__name__}, "
                          f"got {value!r}")
    return value


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from an optional TOML file plus explicit overrides.

    overrides come from CLI flags the user actually passed and win over the
    file; both reject keys that are not RunConfig fields.
    """
    values: dict = {}
    if path:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        unknown = sorted(set(raw) - set(_FIELDS))
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {unknown}")
        values.update({k: _coerce(k, v) for k, v in raw.items()})
    for k, v in (overrides or {}).items():
        if k not in _FIELDS:
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = _coerce(k, v)
    return RunConfig(**values)
