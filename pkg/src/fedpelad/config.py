"""Experiment configuration and its strict ``key = value`` / ``[section]`` file format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

from .csi import ChannelConfig
from .federation import ConfigError, FedHyper, Strategy

ALL_STRATEGIES = (
    Strategy.FEDAVG,
    Strategy.FEDDEC,
    Strategy.FEDPELAD_NOAF,
    Strategy.FEDPELAD_HALF,
    Strategy.FEDPELAD,
)

# Four heterogeneous sub-scenarios (LOS/NLOS x outdoor/indoor analogues).
# Each is a narrow angular cluster at its own bearing within the sector.
SCENARIO_PRESETS = (
    dict(n_paths=2, angle_center_deg=-30.0, angle_spread_deg=2.0, rician_k_db=9.0, delay_spread_frac=0.10),
    dict(n_paths=3, angle_center_deg=20.0, angle_spread_deg=5.0, rician_k_db=-math.inf, delay_spread_frac=0.15),
    dict(n_paths=3, angle_center_deg=45.0, angle_spread_deg=6.0, rician_k_db=3.0, delay_spread_frac=0.12),
    dict(n_paths=4, angle_center_deg=-5.0, angle_spread_deg=8.0, rician_k_db=-math.inf, delay_spread_frac=0.20),
)


class ConfigParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line


@dataclass
class ModelConfig:
    n_sub: int = 32
    n_tx: int = 32
    n_delay: int = 16
    gamma: Fraction = Fraction(1, 16)
    hidden: int = 128
    lora_layers: int = 4

    @property
    def codeword_len(self) -> int:
        return int(self.gamma * 2 * self.n_delay * self.n_tx)


@dataclass
class LoraConfig:
    rank: int = 8
    alpha_ratio: float = 1.0


@dataclass
class FedConfig:
    strategies: tuple[Strategy, ...] = ALL_STRATEGIES
    rounds: int = 60
    local_epochs: int = 2
    batch_size: int = 50
    lr: float = 1e-3
    lr_ratio: float = 5.0
    ues: int = 4


@dataclass
class DataConfig:
    samples_per_ue: int = 300
    scenario_seeds: tuple[int, ...] = ()
    scenario_angles: tuple[float, ...] = ()
    scenario_spreads: tuple[float, ...] = ()
    scenario_paths: tuple[int, ...] = ()
    scenario_k_db: tuple[float, ...] = ()
    scenario_delay_spread: tuple[float, ...] = ()


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "results"
    pretrain_epochs: int = 20


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def hyper(self) -> FedHyper:
        return FedHyper(
            rounds=self.fed.rounds,
            local_epochs=self.fed.local_epochs,
            batch_size=self.fed.batch_size,
            lr=self.fed.lr,
            lr_ratio=self.fed.lr_ratio,
            rank=self.lora.rank,
            alpha_ratio=self.lora.alpha_ratio,
        )

    def channel_configs(self) -> list[ChannelConfig]:
        """One generator config per UE; unset scenario fields cycle through the presets."""
        d, m = self.data, self.model
        out = []
        for k in range(self.fed.ues):
            preset = dict(SCENARIO_PRESETS[k % len(SCENARIO_PRESETS)])
            overrides = {
                "angle_center_deg": d.scenario_angles,
                "angle_spread_deg": d.scenario_spreads,
                "n_paths": d.scenario_paths,
                "rician_k_db": d.scenario_k_db,
                "delay_spread_frac": d.scenario_delay_spread,
            }
            for key, values in overrides.items():
                if values:
                    preset[key] = values[k]
            seed = d.scenario_seeds[k] if d.scenario_seeds else 100 + k
            out.append(ChannelConfig(n_sub=m.n_sub, n_tx=m.n_tx, n_delay=m.n_delay, seed=seed, **preset))
        return out

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        """Copy with ``rank``, ``alpha_ratio``, ``lr_ratio``, ``seed`` or ``out_dir`` replaced."""
        cfg = replace(self, lora=replace(self.lora), fed=replace(self.fed), run=replace(self.run))
        for key, value in kwargs.items():
            if key in ("rank", "alpha_ratio"):
                setattr(cfg.lora, key, value)
            elif key == "lr_ratio":
                cfg.fed.lr_ratio = value
            elif key in ("seed", "out_dir"):
                setattr(cfg.run, key, value)
            else:
                raise ConfigError(f"cannot override {key!r}")
        validate(cfg)
        return cfg


def _parse_float(raw: str) -> float:
    low = raw.strip().lower()
    if low in ("-inf", "-infinity"):
        return -math.inf
    if low in ("inf", "+inf", "infinity"):
        return math.inf
    return float(raw)


def _parse_fraction(raw: str) -> Fraction:
    return Fraction(raw.strip().replace(" ", ""))


def _parse_strategies(raw: str) -> tuple[Strategy, ...]:
    return tuple(Strategy(s.strip()) for s in raw.split(",") if s.strip())


def _list_of(conv):
    def parse(raw: str):
        return tuple(conv(s) for s in raw.split(",") if s.strip())

    return parse


_SECTIONS = {
    "model": ModelConfig,
    "lora": LoraConfig,
    "fed": FedConfig,
    "data": DataConfig,
    "run": RunConfig,
}

_PARSERS = {
    ("model", "gamma"): _parse_fraction,
    ("fed", "strategies"): _parse_strategies,
    ("data", "scenario_seeds"): _list_of(int),
    ("data", "scenario_angles"): _list_of(_parse_float),
    ("data", "scenario_spreads"): _list_of(_parse_float),
    ("data", "scenario_paths"): _list_of(int),
    ("data", "scenario_k_db"): _list_of(_parse_float),
    ("data", "scenario_delay_spread"): _list_of(_parse_float),
    ("run", "out_dir"): str,
}


def _converter(section: str, key: str, default):
    conv = _PARSERS.get((section, key))
    if conv is not None:
        return conv
    if isinstance(default, bool):
        raise AssertionError("no boolean config keys")
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return _parse_float
    return str


def validate(cfg: ExperimentConfig) -> None:
    m, f, d = cfg.model, cfg.fed, cfg.data
    if m.n_delay > m.n_sub:
        raise ConfigError(f"n_delay={m.n_delay} exceeds n_sub={m.n_sub}")
    code = m.gamma * 2 * m.n_delay * m.n_tx
    if code.denominator != 1 or code <= 0:
        raise ConfigError(f"gamma={m.gamma} gives a non-integer codeword length {code} for {m.n_delay}x{m.n_tx}x2")
    if m.hidden < 1 or m.lora_layers < 1:
        raise ConfigError("hidden width and lora_layers must be >= 1")
    widths = [int(code)] + [m.hidden] * (m.lora_layers - 1) + [2 * m.n_delay * m.n_tx]
    smallest = min(min(a, b) for a, b in zip(widths[:-1], widths[1:]))
    if not 1 <= cfg.lora.rank < smallest:
        raise ConfigError(f"rank={cfg.lora.rank} must be in [1, {smallest}) for these layer widths")
    if f.rounds < 2 or f.rounds % 2:
        raise ConfigError(f"rounds must be an even number >= 2, got {f.rounds}")
    if f.local_epochs < 1 or f.batch_size < 1 or f.ues < 1:
        raise ConfigError("local_epochs, batch_size and ues must be >= 1")
    if f.lr <= 0 or f.lr_ratio < 0 or cfg.lora.alpha_ratio <= 0:
        raise ConfigError("lr and alpha_ratio must be positive, lr_ratio non-negative")
    if not f.strategies:
        raise ConfigError("no strategies requested")
    if len(set(f.strategies)) != len(f.strategies):
        raise ConfigError("duplicate strategy in list")
    if d.samples_per_ue < 10:
        raise ConfigError("samples_per_ue must be >= 10")
    for name in ("scenario_seeds", "scenario_angles", "scenario_spreads", "scenario_paths",
                 "scenario_k_db", "scenario_delay_spread"):
        values = getattr(d, name)
        if values and len(values) != f.ues:
            raise ConfigError(f"{name} has {len(values)} entries but ues = {f.ues}")
    if cfg.run.pretrain_epochs < 0:
        raise ConfigError("pretrain_epochs must be >= 0")
    try:
        cfg.channel_configs()
    except ValueError as exc:
        raise ConfigError(f"bad scenario settings: {exc}") from exc


def parse_config_text(text: str, path: str | None = None) -> ExperimentConfig:
    sections = {name: {} for name in _SECTIONS}
    lines = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in _SECTIONS:
                raise ConfigParseError(f"unknown section [{current}]", lineno, path)
            continue
        if "=" not in line:
            raise ConfigParseError(f"expected 'key = value', got {line!r}", lineno, path)
        if current is None:
            raise ConfigParseError("key outside of any [section]", lineno, path)
        key, value = (s.strip() for s in line.split("=", 1))
        known = {f.name: f for f in fields(_SECTIONS[current])}
        if key not in known:
            raise ConfigParseError(f"unknown key {key!r} in [{current}]", lineno, path)
        if key in sections[current]:
            raise ConfigParseError(f"duplicate key {key!r} in [{current}]", lineno, path)
        default = _SECTIONS[current]().__getattribute__(key)
        try:
            sections[current][key] = _converter(current, key, default)(value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigParseError(f"bad value for {key!r}: {value!r} ({exc})", lineno, path) from None
        lines[(current, key)] = lineno

    cfg = ExperimentConfig(**{name: cls(**sections[name]) for name, cls in _SECTIONS.items()})
    try:
        validate(cfg)
    except ConfigError as exc:
        raise ConfigParseError(str(exc), None, path) from None
    return cfg


def parse_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigParseError("config file not found", None, str(p))
    return parse_config_text(p.read_text(), str(p))
