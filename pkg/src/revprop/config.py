"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from revprop.network import LayerSpec, NetworkSpec
from revprop.trainer import TrainProtocol


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # run
    seed: int = 0
    out_dir: str = "run"
    data_dir: str = ""  # empty: <out_dir>/data
    # data
    subjects: int = 16
    test_subjects: int = 8
    subject_extent: int = 32
    n_bumps: int = 30
    patches_per_subject: int = 16
    train_fraction: float = 0.8
    # network
    input_channels: int = 6
    upsampling_rate: int = 2
    espcn_kernels: str = "3,1,3"
    espcn_widths: str = "8,16"  # hidden widths; the last layer always emits r^3*C
    n_blocks: int = 2
    precision: int = 32
    input_extent: int = 11
    # protocol
    max_epochs: int = 30
    batch_size: int = 12
    learning_rate: float = 1e-3
    lr_decay_patience: int = 5
    lr_decay_factor: float = 0.5
    lr_floor: float = 1e-6
    early_stop_patience: int = 10
    backprop: str = "efficient"
    n_seeds: int = 1
    # evaluation
    interior_margin: int = 2
    eval_stride: int = 7
    # profiling
    profile_blocks: str = "0,1,2,4,8"
    profile_modes: str = "naive,efficient"
    # reporting
    figures: bool = True

    def __post_init__(self):
        if self.backprop not in ("naive", "efficient"):
            raise ConfigError(f"backprop must be naive or efficient, got {self.backprop!r}")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be at least 1")
        if not 0 <= self.test_subjects <= self.subjects:
            raise ConfigError("test_subjects must lie in [0, subjects]")

    @property
    def train_subjects(self) -> int:
        return self.subjects - self.test_subjects

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir) if self.data_dir else Path(self.out_dir) / "data"

    def network_spec(self, n_blocks: int | None = None) -> NetworkSpec:
        kernels = _int_list(self.espcn_kernels, "espcn_kernels")
        widths = _int_list(self.espcn_widths, "espcn_widths")
        if len(widths) != len(kernels) - 1:
            raise ConfigError("espcn_widths needs one entry per layer except the last")
        outs = widths + [self.upsampling_rate**3 * self.input_channels]
        layers = tuple(
            LayerSpec(k, c, 0, i < len(kernels) - 1)
            for i, (k, c) in enumerate(zip(kernels, outs))
        )
        try:
            return NetworkSpec(
                input_channels=self.input_channels,
                upsampling_rate=self.upsampling_rate,
                espcn_layers=layers,
                n_blocks=self.n_blocks if n_blocks is None else n_blocks,
                precision=self.precision,
                input_extent=self.input_extent,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def protocol(self) -> TrainProtocol:
        return TrainProtocol(
            max_epochs=self.max_epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lr_decay_patience=self.lr_decay_patience,
            lr_decay_factor=self.lr_decay_factor,
            lr_floor=self.lr_floor,
            early_stop_patience=self.early_stop_patience,
            backprop=self.backprop,
        )

    def profile_matrix(self):
        modes = [m.strip() for m in self.profile_modes.split(",") if m.strip()]
        for m in modes:
            if m not in ("naive", "efficient"):
                raise ConfigError(f"unknown profile mode {m!r}")
        return modes, _int_list(self.profile_blocks, "profile_blocks")

    def dumps(self) -> str:
        lines = ["# resolved run configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _int_list(s: str, key: str) -> list[int]:
    try:
        return [int(t) for t in str(s).split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of integers") from None


def _coerce(name: str, typ, raw: str):
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None
    return raw


def parse_config(text: str, **overrides) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment); unknown keys are errors."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def load_config(path=None, **overrides) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    return parse_config(text, **overrides)
