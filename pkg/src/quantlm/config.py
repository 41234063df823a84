"""Experiment configuration: sectioned key = value files.

The file format is INI-style with four sections: [model], [train],
[quant], [paths]. Every key has a default, so a config file only needs
the keys it overrides. Parsing is strict: unknown sections or keys are
rejected rather than ignored, and values are validated on construction.
"""

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import ConfigError

_SECTIONS = {
    "model": ("label", "d_model", "d_ff", "n_heads", "n_layers", "max_len",
              "tie_embeddings"),
    "train": ("epochs", "lr", "lr_decay", "window", "clip_norm", "seed"),
    "quant": ("admm_epochs", "rho", "rho_growth", "candidates",
              "quantize_embeddings", "budget", "probes", "max_probe_tokens",
              "beta", "nas_epochs", "lr_arch", "manual_bits"),
    "paths": ("train_path", "valid_path", "test_path", "mode", "workdir"),
}


@dataclass
class ExperimentConfig:
    # [model]
    label: str = "desk-2L"
    d_model: int = 32
    d_ff: int = 64
    n_heads: int = 2
    n_layers: int = 2
    max_len: int = 32
    tie_embeddings: bool = False
    # [train]
    epochs: int = 10
    lr: float = 0.2
    lr_decay: float = 0.9
    window: int = 32
    clip_norm: float = 5.0
    seed: int = 0
    # [quant]
    admm_epochs: int = 20
    rho: float = 0.3
    rho_growth: float = 1.25
    candidates: tuple = (1, 2, 4, 8)
    quantize_embeddings: bool = False
    budget: float = 2.0
    probes: int = 8
    max_probe_tokens: int = 2048
    beta: float = 0.01
    nas_epochs: int = 5
    lr_arch: float = 1.0
    manual_bits: dict = field(default_factory=dict)
    # [paths]; empty split paths select the bundled desk dataset
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    mode: str = "char"
    workdir: str = "runs"

    def __post_init__(self):
        positive = ("d_model", "d_ff", "n_heads", "n_layers", "max_len",
                    "epochs", "lr", "lr_decay", "window", "admm_epochs",
                    "rho_growth", "budget", "probes", "max_probe_tokens",
                    "nas_epochs", "lr_arch")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("clip_norm", "rho", "beta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.window < 2:
            raise ConfigError("window must be at least 2 tokens")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must divide evenly into heads")
        self.candidates = tuple(int(b) for b in self.candidates)
        if not self.candidates or list(self.candidates) != sorted(set(self.candidates)):
            raise ConfigError("candidates must be distinct ascending bit widths")
        if any(b < 1 or b > 8 for b in self.candidates):
            raise ConfigError("candidate bit widths must fall in 1..8")
        for cid, bits in self.manual_bits.items():
            if not 1 <= int(bits) <= 32:
                raise ConfigError(f"manual bits for {cid} out of range: {bits}")
        if self.mode not in ("word", "char"):
            raise ConfigError(f"tokenization mode must be word or char, got {self.mode!r}")

    def to_text(self) -> str:
        out = []
        for section, keys in _SECTIONS.items():
            out.append(f"[{section}]")
            for key in keys:
                out.append(f"{key} = {_format_value(getattr(self, key))}")
            out.append("")
        return "\n".join(out)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, dict):
        return ",".join(f"{k}={v}" for k, v in sorted(value.items()))
    return str(value)


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_value(raw: str, like) -> object:
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            return _parse_bool(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if isinstance(like, dict):
            if not raw:
                return {}
            pairs = (item.split("=", 1) for item in raw.split(","))
            return {k.strip(): int(v) for k, v in pairs}
        return raw
    except ValueError as e:
        raise ConfigError(f"cannot parse {raw!r}: {e}") from e


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str    # keys are case-sensitive
    try:
        parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
    except (configparser.Error, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    values = {}
    blank = ExperimentConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[key] = _parse_value(raw, getattr(blank, key))
    return ExperimentConfig(**values)
