"""Run configuration: an INI file of ``key = value`` sections, overridden by flags."""

import configparser
import logging
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .attacks import AttackKind, AttackSpec
from .data import PreprocessConfig, SyntheticSpec
from .federation import FederationConfig
from .report import SuccessRule
from .seeding import derive_seed

logger = logging.getLogger(__name__)

DEFAULT_PERCENTAGES = (1.0, 2.0, 3.0, 4.0, 5.0, 7.0, 10.0, 15.0, 20.0, 25.0)

ConfigPath = tuple[str, ...]

_TRAIN_KEYS = (
    "batch_size",
    "learning_rate",
    "sgd_momentum",
    "dropout_p",
    "hidden_sizes",
    "bn_eps",
    "bn_momentum",
)
_FEDERATION_KEYS = (
    "num_clients",
    "rounds",
    "local_epochs",
    "client_workers",
    "importance_repeats",
)
_FOREST_KEYS = ("n_trees", "max_depth", "min_samples_split", "features_per_split", "bootstrap")

# section -> key -> location in the RunConfig tree
SECTIONS: dict[str, dict[str, ConfigPath]] = {
    "data": {"path": ("dataset",), "name": ("dataset_name",), "label_column": ("label_column",)},
    "synthetic": {key: ("synthetic", key) for key in SyntheticSpec.model_fields},
    "preprocess": {key: ("preprocess", key) for key in PreprocessConfig.model_fields},
    "train": {key: ("federation", "train", key) for key in _TRAIN_KEYS},
    "federation": {key: ("federation", key) for key in _FEDERATION_KEYS},
    "forest": {key: ("federation", "forest", key) for key in _FOREST_KEYS},
    "attack": {
        "kind": ("attack",),
        "kinds": ("attacks",),
        "percent": ("percent",),
        "percentages": ("percentages",),
        "feature_index": ("feature_index",),
        "target_client": ("target_client",),
        "step3_always": ("step3_always",),
    },
    "report": {"success_threshold": ("success", "threshold")},
    "run": {"out": ("out",), "seed": ("seed",), "workers": ("workers",)},
}

_LIST_PATHS = {
    ("federation", "train", "hidden_sizes"),
    ("percentages",),
    ("attacks",),
}
_NONE_WORDS = ("", "none")


class RunConfig(BaseModel):
    """Everything a command needs; one master ``seed`` reproduces the run."""

    model_config = ConfigDict(frozen=True)

    dataset: Optional[Path] = None
    dataset_name: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None
    label_column: int = -1
    preprocess: PreprocessConfig = PreprocessConfig()
    federation: FederationConfig = FederationConfig()
    attack: Optional[AttackKind] = None
    attacks: tuple[AttackKind, ...] = Field(default=(AttackKind.LF, AttackKind.FP), min_length=1)
    percent: Optional[float] = Field(default=None, ge=0.0, le=100.0)
    percentages: tuple[float, ...] = Field(default=DEFAULT_PERCENTAGES, min_length=1)
    feature_index: Optional[int] = Field(default=None, ge=0)
    target_client: int = Field(default=0, ge=0)
    step3_always: bool = True
    out: Path = Path("runs")
    seed: int = 0
    workers: int = Field(default=1, ge=1)
    success: SuccessRule = SuccessRule()

    @field_validator("attack", mode="before")
    @classmethod
    def _upper_kind(cls, value: Any) -> Any:  # noqa: ANN401
        return value.upper() if isinstance(value, str) else value

    @field_validator("attacks", mode="before")
    @classmethod
    def _upper_kinds(cls, value: Any) -> Any:  # noqa: ANN401
        if isinstance(value, (list, tuple)):
            return tuple(v.upper() if isinstance(v, str) else v for v in value)
        return value

    @field_validator("percentages")
    @classmethod
    def _increasing(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if any(not 0.0 <= p <= 100.0 for p in value):  # noqa: PLR2004
            msg = f"percentages must lie in [0, 100], got {list(value)}"
            raise ValueError(msg)
        if any(b <= a for a, b in zip(value, value[1:])):
            msg = f"percentages must be strictly increasing, got {list(value)}"
            raise ValueError(msg)
        return value

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        if self.dataset is not None and self.synthetic is not None:
            msg = "give either a dataset path or a synthetic spec, not both"
            raise ValueError(msg)
        if len(set(self.attacks)) != len(self.attacks):
            msg = "attack kinds must not repeat"
            raise ValueError(msg)
        if self.target_client >= self.federation.num_clients:
            clients = self.federation.num_clients
            msg = f"target_client {self.target_client} but only {clients} clients"
            raise ValueError(msg)
        return self

    @property
    def scenario_name(self) -> str:
        """Dataset name used in scenario ids."""
        if self.dataset_name:
            return self.dataset_name
        if self.dataset is not None:
            return self.dataset.stem.upper()
        return "SYN"

    def experiment_federation(self) -> FederationConfig:
        """Federation settings with every seed derived from the master seed."""
        forest_seed = derive_seed(self.seed, "forest")
        forest = self.federation.forest.model_copy(update={"seed": forest_seed})
        return self.federation.model_copy(update={"seed": self.seed, "forest": forest})

    def attack_spec(self, kind: AttackKind, percent: float) -> AttackSpec:
        """Attack for one sweep entry, seeded from (master seed, kind, percent)."""
        return AttackSpec(
            kind=kind,
            percent=percent,
            target_client=self.target_client,
            feature_index=self.feature_index,
            seed=derive_seed(self.seed, "attack", kind.value, repr(float(percent))),
            step3_always=self.step3_always,
        )


def split_list(text: str) -> list[str]:
    """Comma separated items, whitespace stripped, empties dropped."""
    return [item.strip() for item in text.split(",") if item.strip()]


def _assign(tree: dict[str, Any], path: ConfigPath, value: object) -> None:
    node = tree
    for part in path[:-1]:
        node = node.setdefault(part, {})
    node[path[-1]] = value


def _ini_value(path: ConfigPath, raw: str) -> object:
    if raw.strip().lower() in _NONE_WORDS:
        return None
    if path in _LIST_PATHS:
        return split_list(raw)
    return raw.strip()


def read_ini(path: Union[str, Path]) -> dict[str, Any]:
    """Read an INI file into a RunConfig tree of raw values.

    Raises:
        FileNotFoundError: If the file does not exist
        ValueError: On an unknown section or key
    """
    path = Path(path)
    if not path.is_file():
        msg = f"config file not found: {path}"
        raise FileNotFoundError(msg)
    parser = configparser.ConfigParser(interpolation=None)
    parser.read(path, encoding="utf-8")

    tree: dict[str, Any] = {}
    for section in parser.sections():
        keys = SECTIONS.get(section)
        if keys is None:
            msg = f"{path}: unknown section [{section}]"
            raise ValueError(msg)
        for key, raw in parser.items(section):
            if key not in keys:
                msg = f"{path}: unknown key {key!r} in [{section}]"
                raise ValueError(msg)
            _assign(tree, keys[key], _ini_value(keys[key], raw))
    logger.debug("Read config %s: sections %s", path, parser.sections())
    return tree


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[ConfigPath, object]] = None,
) -> RunConfig:
    """Build a RunConfig from an optional INI file and flag overrides (flags win).

    A synthetic spec without its own seed takes the master seed.

    Raises:
        pydantic.ValidationError: If the merged values violate a constraint
    """
    tree = read_ini(path) if path is not None else {}
    for location, value in (overrides or {}).items():
        _assign(tree, location, value)
    synthetic = tree.get("synthetic")
    if isinstance(synthetic, dict) and synthetic.get("seed") is None:
        synthetic["seed"] = tree.get("seed") or 0
    return RunConfig.model_validate(tree)


def parse_synthetic(text: str) -> dict[str, str]:
    """Parse ``n=1000,d=8,...`` into SyntheticSpec fields.

    Raises:
        ValueError: On a malformed item or unknown field
    """
    fields: dict[str, str] = {}
    for item in split_list(text):
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in SyntheticSpec.model_fields:
            names = ", ".join(SyntheticSpec.model_fields)
            msg = f"bad synthetic item {item!r}; expected <field>=<value> with field in {names}"
            raise ValueError(msg)
        fields[key] = value.strip()
    return fields

