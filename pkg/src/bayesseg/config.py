"""Flat ``key = value`` run configuration shared by every CLI command."""

import dataclasses
from dataclasses import dataclass, fields

from .densenet import PROFILES, NetworkSpec, SpecError
from .synthdata import NUM_CLASSES, SceneSpec
from .training import TrainConfig
from .uncertainty import DecisionRule

STRATEGIES = ("UW-MAP", "UW-ML", "MFW-MAP", "MFW-ML")
# combinations evaluated in the original experiments
PAPER_STRATEGIES = ("UW-MAP", "UW-ML", "MFW-MAP")
EXPERIMENTS = ("single", "crack-6-combinations", "damage-pair", "component-pair", "surrogate-trio")


class ConfigError(ValueError):
    """Bad key, bad value or inconsistent configuration."""


@dataclass
class RunConfig:
    # scene
    task: str = "crack"
    width: int = 96
    height: int = 64
    count: int = 60
    data_seed: int = 0
    crack_fraction: str = "0.005,0.025"
    rare_fraction_max: float = 0.03
    split_seed: int = 0
    # network
    profile: str = "tiny"
    db_layer_counts: str = ""
    growth_rate: int = 0
    stem_filters: int = 0
    dropout_p: float = 0.5
    # training
    lr0: float = 1.0e-4
    lr_decay_per_epoch: float = 0.9996
    batch_size: int = 2
    max_epochs: int = 200
    patience: int = 15
    l2_coeff: float = 1e-4
    val_samples: int = 10
    val_mode: str = "auto"
    bn_recalibrate: bool = False
    seed: int = 0
    seeds: str = ""
    # inference / decision
    strategy: str = "UW-MAP"
    n_samples: int = 50
    infer_seed: int = 0
    # experiment preset: single, crack-6-combinations, damage-pair, component-pair, surrogate-trio
    experiment: str = "single"
    # paths
    data_dir: str = ""
    out_dir: str = ""

    @property
    def weight_scheme(self):
        return self.strategy.split("-")[0]

    @property
    def rule_kind(self):
        return self.strategy.split("-")[1]

    @property
    def seed_list(self):
        if not self.seeds.strip():
            return [self.seed]
        return [int(s) for s in self.seeds.split(",") if s.strip()]

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy: expected one of {STRATEGIES}, got {self.strategy!r}")
        if self.profile not in PROFILES:
            raise ConfigError(f"profile: expected one of {sorted(PROFILES)}, got {self.profile!r}")
        if self.task not in NUM_CLASSES:
            raise ConfigError(f"task: expected one of {sorted(NUM_CLASSES)}, got {self.task!r}")
        if self.val_mode not in ("auto", "mc", "deterministic"):
            raise ConfigError(f"val_mode: expected auto, mc or deterministic, got {self.val_mode!r}")
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment: expected one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.n_samples < 1:
            raise ConfigError(f"n_samples: must be at least 1, got {self.n_samples}")
        try:
            self.scene_spec()
            self.network_spec(NUM_CLASSES[self.task], 3)
            self.seed_list
        except (ValueError, SpecError) as exc:
            raise ConfigError(str(exc)) from None
        return self

    def scene_spec(self):
        lo, hi = (float(v) for v in self.crack_fraction.split(","))
        return SceneSpec(task=self.task, width=self.width, height=self.height, count=self.count,
                         seed=self.data_seed, crack_fraction=(lo, hi), rare_fraction_max=self.rare_fraction_max)

    def network_spec(self, num_classes, input_channels, benchmark=False):
        base = PROFILES[self.profile]
        changes = {"num_classes": num_classes, "input_channels": input_channels,
                   "dropout_p": 0.0 if benchmark else self.dropout_p}
        if self.db_layer_counts.strip():
            changes["db_layer_counts"] = tuple(int(v) for v in self.db_layer_counts.split(","))
        if self.growth_rate:
            changes["growth_rate"] = self.growth_rate
        if self.stem_filters:
            changes["stem_filters"] = self.stem_filters
        return base.replace(**changes)

    def train_config(self, seed=None):
        return TrainConfig(lr0=self.lr0, lr_decay_per_epoch=self.lr_decay_per_epoch, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, patience=self.patience, l2_coeff=self.l2_coeff,
                           weight_scheme=self.weight_scheme, seed=self.seed if seed is None else seed,
                           val_samples=self.val_samples, val_mode=self.val_mode,
                           bn_recalibrate=self.bn_recalibrate)

    def decision_rule(self, frequencies):
        if self.rule_kind == "ML":
            return DecisionRule("ML", tuple(frequencies))
        return DecisionRule("MAP")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes).validate()

    def to_text(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def _coerce(name, raw, kind):
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered not in ("true", "false", "1", "0"):
                raise ValueError
            return lowered in ("true", "1")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text, base=None):
    """Parse ``key = value`` lines (``#`` comments); unknown keys are rejected."""
    cfg = base or RunConfig()
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {"int": int, "float": float, "str": str, "bool": bool}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        kind = known[key]
        kind = types.get(kind, kind) if isinstance(kind, str) else kind
        setattr(cfg, key, _coerce(key, value, kind))
    return cfg.validate()


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())
