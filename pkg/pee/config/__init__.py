"""Pipeline configuration.

Configuration files are line-based ``key = value`` text with one section per
stage::

    [model]
    blocks = 16
    block_dim = 8

    [pretrain]
    reg = 1e-4

Unknown sections and keys are hard errors: sweeps mutate configuration
programmatically and a silent typo would invalidate a whole run.
"""

from __future__ import annotations

import configparser
import copy
import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union, get_type_hints

from pee.exceptions import ConfigurationError
from pee.utils import text


@dataclasses.dataclass
class DataConfig:
    input: str = "synthetic"
    min_interactions: int = 10
    ratios: List[float] = dataclasses.field(default_factory=lambda: [0.7, 0.1, 0.2])
    split: str = "per_user"
    synthetic_users: int = 400
    synthetic_items: int = 400
    synthetic_clusters: int = 4
    synthetic_p_in: float = 0.5
    synthetic_p_out: float = 0.02


@dataclasses.dataclass
class ModelConfig:
    blocks: int = 16
    block_dim: int = 8
    item_groups: int = 20
    bytes_per_parameter: int = 4
    popularity_segmentation: bool = True

    @property
    def dim(self) -> int:
        """Full embedding dimension D = N * d."""
        return self.blocks * self.block_dim


@dataclasses.dataclass
class PretrainConfig:
    layers: int = 2
    reg: float = 1e-4
    weight_decay: float = 1e-5
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 1024
    patience: int = 5
    eval_every: int = 1
    eval_k: int = 20
    init_std: float = 0.1
    final_layer_only: bool = True


@dataclasses.dataclass
class ClusterConfig:
    user_groups: int = 15
    restarts: int = 10
    max_iters: int = 100
    tol: float = 1e-4


@dataclasses.dataclass
class FinetuneConfig:
    scorer_layers: int = 1
    scorer_width: int = 64
    controller_layers: int = 1
    controller_width: int = 32
    learning_rate: float = 1e-3
    controller_learning_rate: float = 1e-3
    # Negative value means "same as learning_rate"
    xi: float = -1.0
    reg: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 20
    batch_size: int = 256
    patience: int = 3
    epsilon: float = 1e-5
    momentum: float = 0.9
    init_std: float = 0.1
    controller: bool = True
    second_order: bool = True

    @property
    def lookahead_rate(self) -> float:
        """Learning rate of the one-step lookahead (xi)."""
        if not self.second_order:
            return 0.0
        if self.xi < 0:
            return self.learning_rate
        return self.xi


@dataclasses.dataclass
class DeployConfig:
    budget_unit: str = "mb"
    budgets: List[float] = dataclasses.field(default_factory=lambda: [25.0, 10.0, 5.0])
    importance_weights: bool = True


@dataclasses.dataclass
class DeviceConfig:
    k: int = 50
    threads: int = 1


SECTIONS: Dict[str, type] = {
    "data": DataConfig,
    "model": ModelConfig,
    "pretrain": PretrainConfig,
    "cluster": ClusterConfig,
    "finetune": FinetuneConfig,
    "deploy": DeployConfig,
    "device": DeviceConfig,
}


@dataclasses.dataclass
class PipelineConfig:
    """Configuration of all stages.

    .. list-table:: Defaults
       :header-rows: 1

       * - Knob
         - Key
         - Default
       * - d
         - ``model.block_dim``
         - 8
       * - N
         - ``model.blocks``
         - 16
       * - G_u#
         - ``cluster.user_groups``
         - 15
       * - G_v#
         - ``model.item_groups``
         - 20
       * - lambda
         - ``pretrain.reg``, ``finetune.reg``
         - 1e-4
    """

    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    pretrain: PretrainConfig = dataclasses.field(default_factory=PretrainConfig)
    cluster: ClusterConfig = dataclasses.field(default_factory=ClusterConfig)
    finetune: FinetuneConfig = dataclasses.field(default_factory=FinetuneConfig)
    deploy: DeployConfig = dataclasses.field(default_factory=DeployConfig)
    device: DeviceConfig = dataclasses.field(default_factory=DeviceConfig)
    seed: int = 0

    def validate(self) -> PipelineConfig:
        """Check invariants, raise :class:`ConfigurationError` on violation."""
        positive: List[Tuple[str, Union[int, float]]] = [
            ("model.blocks", self.model.blocks),
            ("model.block_dim", self.model.block_dim),
            ("model.item_groups", self.model.item_groups),
            ("model.bytes_per_parameter", self.model.bytes_per_parameter),
            ("cluster.user_groups", self.cluster.user_groups),
            ("cluster.restarts", self.cluster.restarts),
            ("cluster.max_iters", self.cluster.max_iters),
            ("data.min_interactions", self.data.min_interactions),
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("pretrain.patience", self.pretrain.patience),
            ("pretrain.eval_every", self.pretrain.eval_every),
            ("pretrain.eval_k", self.pretrain.eval_k),
            ("finetune.batch_size", self.finetune.batch_size),
            ("finetune.patience", self.finetune.patience),
            ("finetune.scorer_width", self.finetune.scorer_width),
            ("finetune.controller_width", self.finetune.controller_width),
            ("finetune.epsilon", self.finetune.epsilon),
            ("device.k", self.device.k),
            ("device.threads", self.device.threads),
        ]
        for name, value in positive:
            if value <= 0:
                raise ConfigurationError(f"'{name}' has to be positive, got {value}.")

        non_negative = [
            ("pretrain.layers", self.pretrain.layers),
            ("pretrain.reg", self.pretrain.reg),
            ("pretrain.weight_decay", self.pretrain.weight_decay),
            ("pretrain.epochs", self.pretrain.epochs),
            ("finetune.reg", self.finetune.reg),
            ("finetune.weight_decay", self.finetune.weight_decay),
            ("finetune.epochs", self.finetune.epochs),
            ("finetune.scorer_layers", self.finetune.scorer_layers),
            ("finetune.controller_layers", self.finetune.controller_layers),
        ]
        for name, value in non_negative:
            if value < 0:
                raise ConfigurationError(f"'{name}' cannot be negative, got {value}.")

        if not 0.0 <= self.finetune.momentum < 1.0:
            raise ConfigurationError("'finetune.momentum' has to be in [0, 1).")
        if len(self.data.ratios) != 3 or abs(sum(self.data.ratios) - 1.0) > 1e-9:
            raise ConfigurationError(
                f"'data.ratios' has to be three numbers summing to 1, "
                f"got {self.data.ratios}."
            )
        if any(r < 0 for r in self.data.ratios):
            raise ConfigurationError("'data.ratios' cannot be negative.")
        if self.data.split not in ("per_user", "global"):
            raise ConfigurationError(
                f"'data.split' has to be 'per_user' or 'global', got {self.data.split}."
            )
        if self.deploy.budget_unit not in ("mb", "fraction"):
            raise ConfigurationError(
                f"'deploy.budget_unit' has to be 'mb' or 'fraction', "
                f"got {self.deploy.budget_unit}."
            )
        return self

    @property
    def dim(self) -> int:
        return self.model.dim

    def copy(self) -> PipelineConfig:
        return copy.deepcopy(self)

    def set(self, key: str, value: Any) -> PipelineConfig:
        """Set ``section.key`` value, with type conversion for strings."""
        if key == "seed":
            self.seed = int(value)
            return self
        section_name, _, field_name = key.partition(".")
        if section_name not in SECTIONS:
            raise ConfigurationError(f"Unknown section '{section_name}'.")
        section = getattr(self, section_name)
        hints = get_type_hints(type(section))
        if field_name not in hints:
            raise ConfigurationError(f"Unknown key '{key}'.")
        if isinstance(value, str):
            value = _convert(hints[field_name], value, key)
        setattr(section, field_name, value)
        return self

    def dump(self, sections: Optional[Iterable[str]] = None) -> Dict[str, Any]:
        """Return dictionary representation of (some) sections."""
        names = list(sections) if sections is not None else list(SECTIONS)
        result: Dict[str, Any] = {}
        for name in names:
            if name == "seed":
                result["seed"] = self.seed
                continue
            result[name] = dataclasses.asdict(getattr(self, name))
        return result

    def hash(self, sections: Optional[Iterable[str]] = None) -> str:
        """Stable SHA-1 over canonical rendering of the named sections."""
        rendered = json.dumps(self.dump(sections), sort_keys=True, default=repr)
        return hashlib.sha1(rendered.encode("utf-8")).hexdigest()

    def render(self) -> str:
        """Render the config in the file format accepted by :meth:`load`."""
        lines: List[str] = [f"seed = {self.seed}", ""]
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for key, value in dataclasses.asdict(getattr(self, name)).items():
                if isinstance(value, list):
                    value = text.format_list(value)
                elif isinstance(value, bool):
                    value = str(value).lower()
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)

    @staticmethod
    def load(path: Union[str, Path]) -> PipelineConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"Config file '{path}' does not exist.")
        with path.open("r", encoding="utf-8") as handle:
            return PipelineConfig.parse(handle.read(), source=str(path))

    @staticmethod
    def parse(content: str, *, source: str = "<string>") -> PipelineConfig:
        parser = _read(content, source)

        config = PipelineConfig()
        for section_name in parser.sections():
            if section_name == "experiment":
                # Handled by ExperimentSpec
                continue
            if section_name == TOP_SECTION:
                for key, value in parser.items(section_name):
                    if key != "seed":
                        raise ConfigurationError(
                            f"Unknown top-level key '{key}' in '{source}'."
                        )
                    config.set("seed", value)
                continue
            if section_name not in SECTIONS:
                raise ConfigurationError(
                    f"Unknown section '[{section_name}]' in '{source}'."
                )
            for key, value in parser.items(section_name):
                config.set(f"{section_name}.{key}", value)
        return config.validate()


@dataclasses.dataclass
class Ablations:
    """Switches that reproduce the ablation variants."""

    diversity_regularizer: bool = True
    user_clustering: bool = True
    popularity_segmentation: bool = True
    importance_weights: bool = True
    final_layer_only: bool = True

    def apply(self, config: PipelineConfig) -> PipelineConfig:
        """Return copy of ``config`` with the disabled components forced off."""
        config = config.copy()
        if not self.diversity_regularizer:
            config.pretrain.reg = 0.0
            config.finetune.reg = 0.0
        if not self.user_clustering:
            config.cluster.user_groups = 1
        if not self.popularity_segmentation:
            config.model.popularity_segmentation = False
        if not self.importance_weights:
            config.deploy.importance_weights = False
        if not self.final_layer_only:
            config.pretrain.final_layer_only = False
        return config

    def label(self) -> str:
        disabled = [
            f.name for f in dataclasses.fields(self) if not getattr(self, f.name)
        ]
        if not disabled:
            return "full"
        return "w/o " + "+".join(disabled)


STAGES: Tuple[str, ...] = ("ingest", "pretrain", "cluster", "finetune", "evaluate")


@dataclasses.dataclass
class ExperimentSpec:
    """Description of one experiment run."""

    stages: List[str] = dataclasses.field(default_factory=lambda: list(STAGES))
    ablations: Ablations = dataclasses.field(default_factory=Ablations)
    # Extra ablation variants to compare against the full model, e.g.
    # ``importance_weights,user_clustering``.
    compare_ablations: List[str] = dataclasses.field(default_factory=list)
    sweep_item_groups: List[int] = dataclasses.field(default_factory=list)
    sweep_user_groups: List[int] = dataclasses.field(default_factory=list)
    sweep_blocks: List[int] = dataclasses.field(default_factory=list)
    budgets: List[float] = dataclasses.field(default_factory=list)
    seeds: List[int] = dataclasses.field(default_factory=list)
    output: str = "runs/experiment"
    threads: int = 1
    config: PipelineConfig = dataclasses.field(default_factory=PipelineConfig)

    def validate(self) -> ExperimentSpec:
        for stage in self.stages:
            if stage not in STAGES:
                raise ConfigurationError(f"Unknown stage '{stage}'.")
        # Stages must keep pipeline order
        order = [STAGES.index(s) for s in self.stages]
        if order != sorted(order):
            raise ConfigurationError("Stages have to be listed in pipeline order.")
        valid = {f.name for f in dataclasses.fields(Ablations)}
        for name in self.compare_ablations:
            if name not in valid:
                raise ConfigurationError(f"Unknown ablation '{name}'.")
        if self.threads <= 0:
            raise ConfigurationError("'experiment.threads' has to be positive.")
        self.config.validate()
        if not self.ablations.user_clustering and self.config.cluster.user_groups != 1:
            self.config.cluster.user_groups = 1
        return self

    @property
    def budget_list(self) -> List[float]:
        return self.budgets or list(self.config.deploy.budgets)

    @property
    def seed_list(self) -> List[int]:
        return self.seeds or [self.config.seed]

    @staticmethod
    def load(path: Union[str, Path]) -> ExperimentSpec:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"Config file '{path}' does not exist.")
        with path.open("r", encoding="utf-8") as handle:
            return ExperimentSpec.parse(handle.read(), source=str(path))

    @staticmethod
    def parse(content: str, *, source: str = "<string>") -> ExperimentSpec:
        config = PipelineConfig.parse(content, source=source)
        parser = _read(content, source)

        spec = ExperimentSpec(config=config)
        if not parser.has_section("experiment"):
            return spec.validate()

        ablation_keys = {f.name for f in dataclasses.fields(Ablations)}
        for key, value in parser.items("experiment"):
            if key in ablation_keys:
                flag = text.parse_bool(value)
                if flag is None:
                    raise ConfigurationError(f"'experiment.{key}' has to be boolean.")
                setattr(spec.ablations, key, flag)
            elif key == "stages":
                spec.stages = text.parse_list(value, str)
            elif key == "compare_ablations":
                spec.compare_ablations = text.parse_list(value, str)
            elif key in ("sweep_item_groups", "sweep_user_groups", "sweep_blocks"):
                setattr(spec, key, text.parse_list(value, int))
            elif key == "budgets":
                spec.budgets = text.parse_list(value, float)
            elif key == "seeds":
                spec.seeds = text.parse_list(value, int)
            elif key == "output":
                spec.output = value.strip()
            elif key == "threads":
                try:
                    spec.threads = int(value)
                except ValueError:
                    raise ConfigurationError(
                        "'experiment.threads' has to be an integer."
                    )
            else:
                raise ConfigurationError(
                    f"Unknown key 'experiment.{key}' in '{source}'."
                )
        return spec.validate()


TOP_SECTION = "__top__"


def _read(content: str, source: str) -> configparser.ConfigParser:
    """Parse the file; keys above the first section land in ``TOP_SECTION``."""
    parser = configparser.ConfigParser(
        delimiters=("=",),
        comment_prefixes=("#", ";"),
        inline_comment_prefixes=("#",),
        interpolation=None,
        # Nothing is inherited between sections
        default_section="__no_defaults__",
    )
    # Keep key case as written
    parser.optionxform = str  # type: ignore[assignment]
    try:
        parser.read_string(f"[{TOP_SECTION}]\n" + content, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"Cannot parse '{source}': {exc}")
    return parser


def _convert(kind: Any, value: str, key: str) -> Any:
    value = value.strip()
    try:
        if kind is bool:
            parsed = text.parse_bool(value)
            if parsed is None:
                raise ValueError(f"'{value}' is not a boolean")
            return parsed
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        if kind is str:
            return value
        if getattr(kind, "__origin__", None) in (list, List):
            (inner,) = kind.__args__
            return text.parse_list(value, inner)
    except ValueError as exc:
        raise ConfigurationError(f"Invalid value of '{key}': {exc}.")
    raise ConfigurationError(f"Unsupported type of '{key}'.")
