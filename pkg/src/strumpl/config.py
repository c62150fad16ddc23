"""Experiment configuration files: sectioned key=value text with typed keys.

An experiment file has sections [experiment], [world], [model], [loss],
[train] and [eval]; keys match the corresponding dataclass field names
(case-sensitive), with dotted paths reaching into nested structures, e.g.
``mnar.steepness`` or ``true_phi.alpha`` under [world].  Unknown keys are
rejected.  An ablation grid file has a [grid] section (``base`` pointing at an
experiment file) plus one [variant:NAME] section per row, each holding dotted
overrides like ``loss.sup_mode = ipw``.
"""

from __future__ import annotations

import configparser
import copy
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .evaluation import EvalConfig
from .losses import LossConfig
from .model import ModelConfig
from .trainer import TrainConfig
from .world import WorldConfig


class ConfigError(ValueError):
    """Malformed experiment or grid configuration."""


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seeds: list = field(default_factory=lambda: [42, 123, 456, 789, 1011])
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")


_SECTION_FIELD = {"world": "world", "model": "model", "loss": "loss",
                  "train": "train", "eval": "eval"}


def _coerce(raw: str, current):
    """Parse ``raw`` with the type of the current (default) value."""
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"expected an integer, got {raw!r}") from None
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"expected a number, got {raw!r}") from None
    if isinstance(current, str):
        return raw
    if isinstance(current, (tuple, list)):
        parts = [p for p in (s.strip() for s in raw.split(",")) if p]
        elem = current[0] if len(current) else 0.0
        values = [_coerce(p, elem) for p in parts]
        return tuple(values) if isinstance(current, tuple) else values
    raise ConfigError(f"unsupported config value type {type(current).__name__}")


def _set_dotted(obj, key: str, raw: str, context: str) -> None:
    head, _, rest = key.partition(".")
    if is_dataclass(obj):
        if head not in {f.name for f in fields(obj)}:
            raise ConfigError(f"unknown key {context}{key!r}")
        current = getattr(obj, head)
        if rest:
            _set_dotted(current, rest, raw, context + head + ".")
        elif is_dataclass(current):
            raise ConfigError(f"{context}{key!r} is a section, not a value")
        else:
            setattr(obj, head, _coerce(raw, current))
    elif isinstance(obj, dict):
        if rest:
            raise ConfigError(f"key {context}{key!r} nests too deep")
        if head not in obj:
            raise ConfigError(f"unknown key {context}{key!r}")
        obj[head] = _coerce(raw, obj[head])
    else:
        raise ConfigError(f"cannot descend into {context}{key!r}")


def _revalidate(exp: ExperimentConfig) -> ExperimentConfig:
    """Reconstruct every sub-config so dataclass validation runs again."""
    exp.world = replace(exp.world)
    exp.model = replace(exp.model)
    exp.loss = replace(exp.loss)
    exp.train = replace(exp.train)
    exp.eval = replace(exp.eval)
    return exp


def _read_ini(path: Path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive field names
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parser


def parse_experiment_config(path) -> ExperimentConfig:
    path = Path(path)
    parser = _read_ini(path)
    exp = ExperimentConfig()
    for section in parser.sections():
        if section == "experiment":
            for key, raw in parser.items(section):
                if key == "name":
                    exp.name = raw.strip()
                elif key == "seeds":
                    exp.seeds = [int(s) for s in raw.split(",") if s.strip()]
                else:
                    raise ConfigError(f"unknown key [experiment] {key!r}")
            continue
        target = _SECTION_FIELD.get(section)
        if target is None:
            raise ConfigError(f"unknown section [{section}] in {path}")
        for key, raw in parser.items(section):
            try:
                _set_dotted(getattr(exp, target), key, raw, f"[{section}] ")
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
    if not exp.seeds:
        raise ConfigError("seed list must be non-empty")
    try:
        return _revalidate(exp)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def apply_patch(exp: ExperimentConfig, patch: dict) -> ExperimentConfig:
    """Return a copy of ``exp`` with dotted overrides applied and revalidated.

    Keys look like ``loss.sup_mode`` or ``world.mnar.steepness``; the special
    keys ``name`` and ``seeds`` address the experiment itself.
    """
    out = copy.deepcopy(exp)
    for key, raw in patch.items():
        if key == "name":
            out.name = str(raw).strip()
            continue
        if key == "seeds":
            out.seeds = [int(s) for s in str(raw).split(",") if s.strip()]
            continue
        head, _, rest = key.partition(".")
        if head not in _SECTION_FIELD or not rest:
            raise ConfigError(f"patch key {key!r} must start with a section name")
        _set_dotted(getattr(out, head), rest, str(raw), f"[{head}] ")
    try:
        return _revalidate(out)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# Ablation grids
# ---------------------------------------------------------------------------


@dataclass
class AblationGrid:
    base_path: str | None  # experiment file the variants patch
    variants: dict  # name -> dotted-override dict, insertion-ordered


def parse_grid(path) -> AblationGrid:
    path = Path(path)
    parser = _read_ini(path)
    if not parser.sections():
        raise ConfigError(f"{path}: empty ablation grid")
    base_path = None
    variants: dict = {}
    for section in parser.sections():
        if section == "grid":
            base_path = parser.get(section, "base", fallback=None)
            continue
        if not section.startswith("variant:"):
            raise ConfigError(f"{path}: unexpected section [{section}]")
        name = section[len("variant:"):].strip()
        if not name:
            raise ConfigError(f"{path}: variant section without a name")
        if name in variants:
            raise ConfigError(f"{path}: duplicate variant name {name!r}")
        variants[name] = dict(parser.items(section))
    if not variants:
        raise ConfigError(f"{path}: grid defines no variants")
    return AblationGrid(base_path=base_path, variants=variants)


def builtin_grid() -> AblationGrid:
    """The standard ablation rows: supervision form, stop-gradient ablations,
    physics-module forms and loss-weight zeroing combinations."""
    variants = {
        "aipw": {},
        "naive": {"loss.sup_mode": "naive"},
        "ipw": {"loss.sup_mode": "ipw"},
        "no_detach_pi": {"loss.detach_pi": "false"},
        "no_detach_mu": {"loss.detach_mu": "false"},
        "physics_power_law": {"model.physics_variant": "power_law"},
        "physics_mlp": {"model.physics_variant": "mlp"},
        "no_phys": {"loss.lambda_phys_start": "0", "loss.lambda_phys_end": "0"},
        "no_cons": {"loss.lambda_cons": "0"},
        "no_bias_imp": {
            "loss.sup_mode": "naive",
            "loss.lambda_bias": "0",
            "loss.lambda_imp": "0",
        },
        "mtl_sup_only": {
            "loss.sup_mode": "naive",
            "loss.lambda_phys_start": "0",
            "loss.lambda_phys_end": "0",
            "loss.lambda_cons": "0",
            "loss.lambda_bias": "0",
            "loss.lambda_imp": "0",
        },
    }
    return AblationGrid(base_path=None, variants=variants)
