import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import yaml
from dotenv import load_dotenv

from partdescent.errors import ConfigError

# Load environment variables from .env file
load_dotenv()

# Base directory
BASE_DIR = Path(__file__).resolve().parent.parent

OUTPUT_DIRECTORY = Path(os.getenv("PARTDESCENT_OUTPUT_DIR", "./runs"))
PRESET_DIRECTORY = Path(os.getenv("PARTDESCENT_PRESET_DIR", str(BASE_DIR / "presets")))
DATABASE_URL = os.getenv("PARTDESCENT_DATABASE_URL", f"sqlite:///{BASE_DIR}/partdescent.db")

MODES = ("centralized", "async")

# Used when a preset file is missing from the preset directory
BUILTIN_PRESETS = {
    "paper": {
        "mode": "async",
        "graph": {"kind": "erdos_renyi", "nodes": 50, "p": 0.2, "seed": 2016},
        "instance": {"kind": "indefinite_qp", "seed": 7, "lower": -30.0, "upper": 20.0, "shift": 2.0},
        "strategy": "scaled_identity:alpha=0.01",
        "sim": {"seed": 11},
        "output": {"track_blocks": [13, 47]},
    },
    "path5": {
        "mode": "async",
        "graph": {"kind": "path", "nodes": 5},
        "instance": {"kind": "indefinite_qp", "seed": 5},
        "stop": {"max_iters": 500},
        "sim": {"seed": 5},
        "output": {"track_blocks": [0, 4]},
    },
    "trivial": {
        "mode": "centralized",
        "graph": {"kind": "path", "nodes": 4},
        "instance": {"kind": "zero"},
        "stop": {"max_iters": 40},
    },
}


@dataclass(frozen=True)
class GraphSettings:
    kind: str = "erdos_renyi"
    nodes: int = 50
    p: float = 0.2
    seed: int = 0
    file: Optional[str] = None


@dataclass(frozen=True)
class InstanceSettings:
    kind: str = "indefinite_qp"
    seed: int = 1
    lower: float = -30.0
    upper: float = 20.0
    shift: float = 2.0
    block_dim: int = 1
    file: Optional[str] = None


@dataclass(frozen=True)
class StartSettings:
    kind: str = "zeros"
    seed: int = 0


@dataclass(frozen=True)
class StopSettings:
    max_iters: Optional[int] = None
    step_tol: float = 1e-12


@dataclass(frozen=True)
class ScheduleSettings:
    seed: int = 3
    probabilities: Optional[List[float]] = None
    replay_trace: Optional[str] = None


@dataclass(frozen=True)
class SimSettings:
    seed: int = 2
    rate: float = 1.0
    audit: bool = False
    event_log: bool = False


@dataclass(frozen=True)
class OutputSettings:
    dir: Optional[str] = None
    track_blocks: List[int] = field(default_factory=lambda: [0, 1])


@dataclass(frozen=True)
class RunConfig:
    mode: str
    preset: Optional[str] = None
    strategy: str = "lipschitz"
    graph: GraphSettings = field(default_factory=GraphSettings)
    instance: InstanceSettings = field(default_factory=InstanceSettings)
    start: StartSettings = field(default_factory=StartSettings)
    stop: StopSettings = field(default_factory=StopSettings)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    sim: SimSettings = field(default_factory=SimSettings)
    output: OutputSettings = field(default_factory=OutputSettings)

    def to_dict(self) -> dict:
        return asdict(self)

    def output_dir(self) -> Path:
        if self.output.dir:
            return Path(self.output.dir)
        seed = self.sim.seed if self.mode == "async" else self.schedule.seed
        return OUTPUT_DIRECTORY / f"{self.preset or 'run'}-{self.mode}-seed{seed}"


SECTIONS = {
    "graph": GraphSettings,
    "instance": InstanceSettings,
    "start": StartSettings,
    "stop": StopSettings,
    "schedule": ScheduleSettings,
    "sim": SimSettings,
    "output": OutputSettings,
}


def _build_section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{name}' must be a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown keys in '{name}': {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"Invalid section '{name}': {e}")


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("A run configuration must be a mapping")
    unknown = set(data) - set(SECTIONS) - {"mode", "preset", "strategy"}
    if unknown:
        raise ConfigError(f"Unknown configuration keys: {sorted(unknown)}")
    if "mode" not in data:
        raise ConfigError("The configuration must set 'mode' (centralized or async)")

    sections = {name: _build_section(cls, data.get(name), name) for name, cls in SECTIONS.items()}
    config = RunConfig(mode=data["mode"], preset=data.get("preset"), strategy=str(data.get("strategy", "lipschitz")), **sections)
    validate(config)
    return config


def validate(config: RunConfig):
    if config.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {config.mode!r}")
    if config.graph.kind not in ("erdos_renyi", "path", "complete", "edge_list"):
        raise ConfigError(f"Unknown graph kind {config.graph.kind!r}")
    if config.graph.kind == "edge_list" and not config.graph.file:
        raise ConfigError("graph.kind 'edge_list' needs graph.file")
    if config.graph.kind != "edge_list" and config.graph.nodes < 2 and config.instance.file is None:
        raise ConfigError(f"graph.nodes must be at least 2, got {config.graph.nodes}")
    if config.instance.kind not in ("indefinite_qp", "zero"):
        raise ConfigError(f"Unknown instance kind {config.instance.kind!r}")
    if not config.instance.lower < config.instance.upper:
        raise ConfigError(f"Bounds need lower < upper, got [{config.instance.lower}, {config.instance.upper}]")
    if config.instance.block_dim < 1:
        raise ConfigError("instance.block_dim must be positive")
    if config.start.kind not in ("zeros", "uniform"):
        raise ConfigError(f"Unknown start kind {config.start.kind!r}")
    if config.stop.max_iters is not None and config.stop.max_iters < 0:
        raise ConfigError("stop.max_iters must be nonnegative")
    if config.sim.rate <= 0:
        raise ConfigError("sim.rate must be positive")


def apply_overrides(data: dict, overrides: dict) -> dict:
    """Sets dotted keys ("graph.seed") on a copy of a raw configuration mapping."""
    merged = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if key:
            merged.setdefault(section, {})
            merged[section] = dict(merged[section] or {})
            merged[section][key] = value
        else:
            merged[section] = value
    return merged


def read_yaml(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"Configuration file not found: {path}")
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse {path}: {e}")
    return data or {}


def load_preset_data(name: str) -> dict:
    path = PRESET_DIRECTORY / f"{name}.yaml"
    if path.exists():
        data = read_yaml(path)
    elif name in BUILTIN_PRESETS:
        data = dict(BUILTIN_PRESETS[name])
    else:
        raise ConfigError(f"Unknown preset {name!r} (looked in {PRESET_DIRECTORY})")
    data.setdefault("preset", name)
    return data


def load_config(path: Optional[Path] = None, preset: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Preset first, then the config file on top of it, then CLI overrides."""
    data = load_preset_data(preset) if preset else {}
    if path is not None:
        for key, value in read_yaml(Path(path)).items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
    return config_from_dict(apply_overrides(data, overrides or {}))


def save_config(config: RunConfig, path: Path) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)
    return Path(path)
