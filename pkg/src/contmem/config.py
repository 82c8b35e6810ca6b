"""Line-oriented `key = value` run configuration with [section] headers.

The format is deliberately flat: sections only group keys visually, the
parsed result is a single RunConfig.  Values round-trip losslessly
(ints, floats via repr, booleans, strings, comma lists).
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .model import ModelConfig

ENV_PREFIX = "CONTMEM_"


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    # model
    vocab_size: int = 21
    num_layers: int = 2
    num_heads: int = 2
    embed_size: int = 64
    input_len: int = 64
    stm_len: int = 64
    basis_n: int = 64
    tau: float = 0.75
    sample_count: int = 0
    sticky_bins: int = 50
    ridge_lam: float = 0.5
    kl_weight: float = 1e-5
    sigma0: float = 0.05
    gate_enabled: bool = True
    ltm_mode: str = "linspace"
    ffn_hidden: int = 256
    basis_widths: tuple = (0.01, 0.05)
    kl_form: str = "paper"
    gate_depthwise: bool = False
    ltm_shared_affine: bool = False
    grad_clip: float = 0.25
    # run
    data_dir: str = "data"
    out_dir: str = "out"
    seed: int = 0
    batch_size: int = 1
    steps: int = 1000
    learning_rate: float = 2.5e-4
    emit_interval: int = 10
    save_interval: int = 0      # 0: only final checkpoint

    def model_config(self) -> ModelConfig:
        keys = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in keys})


_SECTIONS = {
    "model": {f.name for f in fields(ModelConfig)},
}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(repr(float(x)) if isinstance(x, float) else str(x) for x in v)
    return str(v)


def _parse_value(raw: str, ftype, name: str):
    raw = raw.strip()
    if ftype is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if ftype is int:
        return int(raw)
    if ftype is float:
        return float(raw)
    if ftype is tuple:
        return tuple(float(x) for x in raw.split(",") if x.strip())
    return raw


def write_config(cfg: RunConfig, path) -> None:
    model_keys = _SECTIONS["model"]
    lines = ["[model]"]
    run_lines = ["", "[run]"]
    for f in fields(cfg):
        if f.name.startswith("_"):
            continue
        line = f"{f.name} = {_format_value(getattr(cfg, f.name))}"
        (lines if f.name in model_keys else run_lines).append(line)
    Path(path).write_text("\n".join(lines + run_lines) + "\n", encoding="utf-8")


def parse_config(path, env: dict = None) -> RunConfig:
    """Parse a config file; environment variables CONTMEM_<KEY> override."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    # annotations are strings under future-annotations; type from the default
    typed = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    values = {}
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in typed:
            raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
        values[key] = _parse_value(raw, typed[key], key)
    env = os.environ if env is None else env
    for key in typed:
        ev = env.get(ENV_PREFIX + key.upper())
        if ev is not None:
            values[key] = _parse_value(ev, typed[key], key)
    return RunConfig(**values)
