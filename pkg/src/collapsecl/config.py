"""
Experiment configuration: loads a JSON (or YAML) file into typed dataclasses.

Layout:
- seeds: list of ints (required)
- stream: synthetic generator parameters or a CSV path (required)
- model, train, plasticity, distill, augment: optional sections
- ablation: plasticity_loss / stability / pseudo_replay switches
- grid: optional lists of ablation values for `collapsecl ablate`
- output_dir

Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .core.losses import DistillationConfig, PlasticityConfig
from .core.stream import AugmentConfig, TaskStream, load_csv_stream, make_synthetic_stream
from .core.trainer import ModelConfig, TrainConfig
from .errors import CollapseError, ConfigError

DEFAULT_E0_FRACTION = 0.3


@dataclass(frozen=True)
class StreamConfig:
    """Where the task stream comes from."""
    tasks: int = 3
    classes_per_task: int = 2
    samples_per_class: int = 100
    input_dim: int = 20
    cluster_spread: float = 0.15
    scenario: str = "class-il"
    csv_path: Optional[str] = None  # when set, the synthetic fields are ignored
    seed: Optional[int] = None      # None: use the run seed

    def build(self, run_seed: int, base_dir: Optional[Path] = None) -> TaskStream:
        if self.csv_path:
            path = Path(self.csv_path)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return load_csv_stream(path, self.scenario)
        seed = run_seed if self.seed is None else self.seed
        return make_synthetic_stream(self.tasks, self.classes_per_task, self.samples_per_class,
                                     self.input_dim, self.cluster_spread, seed, self.scenario)


@dataclass(frozen=True)
class GridConfig:
    """Ablation axes; each list is crossed with the others."""
    plasticity_loss: tuple[str, ...] = ()
    stability: tuple[str, ...] = ()
    pseudo_replay: tuple[bool, ...] = ()
    buffer_capacity: tuple[int, ...] = ()
    cells: tuple[dict, ...] = ()  # explicit cells, used instead of the cross product when set

    @property
    def empty(self) -> bool:
        return not (self.plasticity_loss or self.stability or self.pseudo_replay
                    or self.buffer_capacity or self.cells)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one `collapsecl run` needs."""
    seeds: tuple[int, ...]
    stream: StreamConfig
    train: TrainConfig
    grid: GridConfig = field(default_factory=GridConfig)
    output_dir: str = "results"
    checkpoints: bool = False
    source: Optional[str] = field(default=None, compare=False)

    @classmethod
    def load(cls, path: Path) -> "ExperimentConfig":
        """Parse and validate a config file; errors name the offending line when possible."""
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"{path}: {e.strerror}") from None
        data = _parse(text, path)
        try:
            config = cls._from_dict(data)
        except ConfigError as e:
            if e.line is None and e.field is not None:
                e.line = _locate(text, e.field)
            raise
        except CollapseError as e:
            raise ConfigError(f"{path}: {e}") from None
        return dataclasses.replace(config, source=str(path))

    @classmethod
    def _from_dict(cls, data: Any) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping at the top level")
        _check_keys(data, _TOP_KEYS, "config")
        for required in ("seeds", "stream"):
            if required not in data:
                raise ConfigError(f"missing required field '{required}'", field=required)

        seeds = data["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds must be a non-empty list of integers", field="seeds")

        stream = _section(StreamConfig, data["stream"], "stream")
        model = _section(ModelConfig, data.get("model", {}), "model")
        plasticity = _section(PlasticityConfig, data.get("plasticity", {}), "plasticity")
        augment = _section(AugmentConfig, data.get("augment", {}), "augment")

        train_raw = dict(data.get("train", {}))
        _check_keys(train_raw, _TRAIN_KEYS, "train")
        epochs_later = int(train_raw.get("epochs_later", TrainConfig.epochs_later))
        distill_raw = dict(data.get("distill", {}))
        _check_keys(distill_raw, _DISTILL_KEYS, "distill")
        distill_raw.setdefault("e0", int(round(DEFAULT_E0_FRACTION * epochs_later)))
        distill = _section(DistillationConfig, {**distill_raw, "epochs": epochs_later}, "distill")

        ablation = dict(data.get("ablation", {}))
        _check_keys(ablation, _ABLATION_KEYS, "ablation")
        train = _build(TrainConfig, {
            **train_raw,
            **ablation,
            "plasticity": plasticity,
            "distill": distill,
            "augment": augment,
            "model": model,
        }, "train")

        grid = _section(GridConfig, data.get("grid", {}), "grid")
        return cls(
            seeds=tuple(seeds),
            stream=stream,
            train=train,
            grid=grid,
            output_dir=str(data.get("output_dir", "results")),
            checkpoints=bool(data.get("checkpoints", False)),
        )

    def to_dict(self) -> dict[str, Any]:
        t = self.train
        result: dict[str, Any] = {
            "seeds": list(self.seeds),
            "stream": _plain(self.stream),
            "model": _plain(t.model),
            "plasticity": _plain(t.plasticity),
            "distill": {k: v for k, v in _plain(t.distill).items() if k != "epochs"},
            "augment": _plain(t.augment),
            "train": {k: getattr(t, k) for k in _TRAIN_KEYS},
            "ablation": {k: getattr(t, k) for k in _ABLATION_KEYS},
            "output_dir": self.output_dir,
            "checkpoints": self.checkpoints,
        }
        if not self.grid.empty:
            result["grid"] = _plain(self.grid)
        return result

    def for_seed(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.train, seed=seed)

    def with_seeds(self, seeds: list[int]) -> "ExperimentConfig":
        return dataclasses.replace(self, seeds=tuple(seeds))

    def with_cell(self, cell: dict[str, Any]) -> "ExperimentConfig":
        """The same experiment with some ablation switches replaced."""
        unknown = sorted(set(cell) - set(_ABLATION_KEYS) - {"buffer_capacity"})
        if unknown:
            raise ConfigError(f"unknown ablation switch '{unknown[0]}' in grid cell {cell}", field=unknown[0])
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **cell))

    def with_grid_file(self, path: Path) -> "ExperimentConfig":
        """Replace the grid by the `grid` section of another file (or the whole file)."""
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        data = _parse(text, path)
        if isinstance(data, dict) and "grid" in data:
            data = data["grid"]
        try:
            grid = _section(GridConfig, data, "grid")
        except ConfigError as e:
            if e.line is None and e.field is not None:
                e.line = _locate(text, e.field)
            raise
        return dataclasses.replace(self, grid=grid)

    @property
    def base_dir(self) -> Optional[Path]:
        return Path(self.source).parent if self.source else None


_TOP_KEYS = ("seeds", "stream", "model", "train", "plasticity", "distill", "augment",
             "ablation", "grid", "output_dir", "checkpoints")
_TRAIN_KEYS = ("epochs_first_task", "epochs_later", "batch_size", "lr", "momentum", "buffer_capacity",
               "probe_epochs", "probe_lr", "probe_batch_size", "classifier_mode", "probe_features", "nc_trace")
_ABLATION_KEYS = ("plasticity_loss", "stability", "pseudo_replay")
_DISTILL_KEYS = ("kappa_past", "kappa_current", "zeta_past", "zeta_current", "e0")


def _check_keys(data: dict[str, Any], allowed: tuple[str, ...], where: str) -> None:
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in {where}", field=key)


def _build(cls: type, values: dict[str, Any], where: str):
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (CollapseError, TypeError) as e:
        raise ConfigError(f"{where}: {e}", field=where) from None


def _section(cls: type, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping", field=where)
    names = tuple(f.name for f in dataclasses.fields(cls))
    _check_keys(data, names, where)
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return _build(cls, values, where)


def _plain(obj: Any) -> dict[str, Any]:
    """Dataclass fields as JSON-ready values (tuples become lists)."""
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def _parse(text: str, path: Path) -> Any:
    if path.suffix in (".yaml", ".yml"):
        try:
            return yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            raise ConfigError(f"{path}: {e}", line=mark.line + 1 if mark else None) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e.msg}", line=e.lineno) from None


def _locate(text: str, key: str) -> Optional[int]:
    """1-based line of the first occurrence of `key` as a mapping key."""
    pattern = re.compile(rf'(^|[{{,])\s*"?{re.escape(key)}"?\s*:')
    for number, line in enumerate(text.splitlines(), start=1):
        if pattern.search(line):
            return number
    return None
