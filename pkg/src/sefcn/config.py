"""Run configuration: one JSON document with the sections ``network``,
``train``, ``data``, ``output`` and ``inspect``.

Missing keys take their defaults; unknown keys are rejected. ``dumps`` of a
loaded config parses back to an equal config.
"""
import json
import os
from dataclasses import asdict, dataclass, field, fields

from .architectures import NetworkSpec
from .data import PROFILES
from .trainer import TrainConfig

SEED_ENV = "SEFCN_SEED"
SECTIONS = ("network", "train", "data", "output", "inspect")


class ConfigError(ValueError):
    pass


def _from_section(cls, name, d):
    if not isinstance(d, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from e


@dataclass
class DataConfig:
    """Where the corpus lives and, for ``gen-data``, how to synthesise it.

    ``manifest`` defaults to ``<out_dir>/manifest.json``.
    """
    manifest: str = None
    out_dir: str = "data"
    seed: int = 0
    n_samples: int = 300
    height: int = 64
    width: int = 64
    num_classes: int = 9
    profile: str = "imbalanced"
    val_fraction: float = 1 / 6
    test_fraction: float = 1 / 6

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}")
        for name in ("val_fraction", "test_fraction"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")

    @property
    def manifest_path(self):
        return self.manifest or os.path.join(self.out_dir, "manifest.json")


@dataclass
class OutputConfig:
    run_dir: str = "runs/default"


@dataclass
class InspectConfig:
    """Excitation dumps. ``epochs`` empty means every checkpoint found."""
    enabled: bool = False
    blocks: list = field(default_factory=lambda: ["sE-1", "sD-4"])
    epochs: list = field(default_factory=list)
    out_dir: str = None

    def __post_init__(self):
        self.blocks = list(self.blocks)
        self.epochs = [int(e) for e in self.epochs]


@dataclass
class RunConfig:
    network: NetworkSpec = field(default_factory=NetworkSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    inspect: InspectConfig = field(default_factory=InspectConfig)

    def to_dict(self):
        return {"network": self.network.to_dict(), "train": self.train.to_dict(),
                "data": asdict(self.data), "output": asdict(self.output),
                "inspect": asdict(self.inspect)}

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        net = d.get("network", {})
        if not isinstance(net, dict):
            raise ConfigError("section 'network' must be an object")
        try:
            network = NetworkSpec.from_dict(net)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"network: {e}") from e
        return cls(network=network,
                   train=_from_section(TrainConfig, "train", d.get("train", {})),
                   data=_from_section(DataConfig, "data", d.get("data", {})),
                   output=_from_section(OutputConfig, "output", d.get("output", {})),
                   inspect=_from_section(InspectConfig, "inspect", d.get("inspect", {})))

    def with_seed(self, seed):
        """Copy with both the generator and the training seed replaced."""
        d = self.to_dict()
        d["train"]["seed"] = seed
        d["data"]["seed"] = seed
        return RunConfig.from_dict(d)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"


def loads(text):
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return RunConfig.from_dict(d)


def load_config(path=None, seed=None, environ=None):
    """Read ``path`` (defaults only when ``None``) and apply the seed override.

    Precedence: the ``seed`` argument (command-line flag), then the
    ``SEFCN_SEED`` environment variable, then the file.
    """
    if path is None:
        cfg = RunConfig()
    else:
        with open(path, encoding="utf-8") as f:
            cfg = loads(f.read())
    environ = os.environ if environ is None else environ
    if seed is None and environ.get(SEED_ENV, "") != "":
        try:
            seed = int(environ[SEED_ENV])
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {environ[SEED_ENV]!r}") from e
    return cfg if seed is None else cfg.with_seed(seed)
