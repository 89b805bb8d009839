"""Declarative JSON run configuration for the command-line tools."""

import json
from pathlib import Path
from typing import NamedTuple, Optional, Tuple

from bivariate_lmm.config import (
    DEFAULT_MARKER_NAMES,
    DEFAULT_OCCASION_SPACING,
    DEFAULT_PRESET,
    DEFAULT_REPLICATES,
    DEFAULT_TAU,
    DEFAULT_TIME_ORIGIN,
    PIECEWISE_TERMS,
    TRUTH_PRESETS,
)
from bivariate_lmm.errors import ConfigError, InvalidArgumentError
from bivariate_lmm.models import (
    DesignSpec,
    Method,
    MissingnessPattern,
    ModelSpec,
    RandomEffects,
    ResidualVariant,
    TruthParams,
)
from bivariate_lmm.simulate import missingness_from_dict, truth_from_dict, validate_truth

LAYOUTS = ("wide", "long")


class ModelEntry(NamedTuple):
    """A named model of a run, optionally declared nested in another one."""
    name: str
    spec: ModelSpec
    nested_in: Optional[str] = None


class RunConfig(NamedTuple):
    """Everything ``fit`` needs: where the data is, how to read it, which models to fit."""
    input: Path
    layout: str
    subject_column: str
    time_column: str
    marker_columns: Tuple[str, str]
    marker_names: Tuple[str, str]
    occasion_spacing: float
    time_origin: float
    baseline_difference: bool
    design: DesignSpec
    models: Tuple[ModelEntry, ...]
    output: Optional[Path]
    seed: int


class TruthConfig(NamedTuple):
    """Everything ``recover`` and ``simulate`` need."""
    truth: TruthParams
    design: DesignSpec
    model: ModelEntry
    missingness: Optional[MissingnessPattern]
    replicates: int
    output: Optional[Path]
    layout: str


def _read_json(path, example):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(
            f"Config file not found: {path}\n"
            f"Please copy {example} to {path.name} and edit it for your data."
        )
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a JSON object")
    return path, data


def _resolve(base, value):
    if value is None:
        return None
    value = Path(value)
    return value if value.is_absolute() else base / value


def _enum(enum_type, value, field):
    try:
        return enum_type(value)
    except ValueError as e:
        choices = ", ".join(member.value for member in enum_type)
        raise ConfigError(f"Invalid {field} {value!r}; expected one of: {choices}") from e


def design_from_dict(data):
    """
    Design block (tau, include_intercept, terms) of a config.

    Raises:
        ConfigError: If the design is invalid
    """
    try:
        return DesignSpec(
            tau=float(data.get("tau", DEFAULT_TAU)),
            include_intercept=bool(data.get("include_intercept", False)),
            terms=tuple(data.get("terms", PIECEWISE_TERMS)),
        ).validate()
    except (InvalidArgumentError, TypeError, ValueError) as e:
        raise ConfigError(f"Invalid design: {e}") from e


def model_from_dict(data, design):
    """
    One model block.

    Raises:
        ConfigError: If the name is missing or a field has an unknown value
    """
    if "name" not in data:
        raise ConfigError("Config model block missing required field: name")
    spec = ModelSpec(
        design=design,
        random_effects=_enum(RandomEffects, data.get("random_effects", "slopes"), "random_effects"),
        residual=_enum(ResidualVariant, data.get("residual", "grouped_diagonal"), "residual"),
        independent=bool(data.get("independent", False)),
        method=_enum(Method, str(data.get("method", "REML")).upper(), "method"),
    )
    return ModelEntry(name=str(data["name"]), spec=spec, nested_in=data.get("nested_in"))


def load_run_config(config_path):
    """
    Load a fit configuration.

    Args:
        config_path: Path to the JSON file

    Returns:
        RunConfig with relative paths resolved against the config's directory

    Raises:
        FileNotFoundError: If the config file doesn't exist
        ConfigError: If required fields are missing or invalid
    """
    path, data = _read_json(config_path, "config.json.example")
    for field in ("input", "models"):
        if field not in data:
            raise ConfigError(f"Config file missing required field: {field}")

    layout = data.get("layout", "wide")
    if layout not in LAYOUTS:
        raise ConfigError(f"Invalid layout {layout!r}; expected one of: {', '.join(LAYOUTS)}")
    marker_columns = tuple(data.get("marker_columns", DEFAULT_MARKER_NAMES))
    if len(marker_columns) != 2:
        raise ConfigError("marker_columns must name exactly two columns")
    marker_names = tuple(data.get("marker_names", marker_columns))
    if len(marker_names) != 2:
        raise ConfigError("marker_names must name exactly two markers")

    spacing = float(data.get("occasion_spacing", DEFAULT_OCCASION_SPACING))
    if not spacing > 0:
        raise ConfigError(f"occasion_spacing must be positive, got {spacing}")

    design = design_from_dict(data)
    if not isinstance(data["models"], list) or not data["models"]:
        raise ConfigError("Config must list at least one model")
    models = tuple(model_from_dict(block, design) for block in data["models"])
    names = [model.name for model in models]
    duplicates = sorted({name for name in names if names.count(name) > 1})
    if duplicates:
        raise ConfigError(f"Model names must be unique; repeated: {', '.join(duplicates)}")
    for model in models:
        if model.nested_in is not None and model.nested_in not in names:
            raise ConfigError(f"Model {model.name!r} is nested in unknown model {model.nested_in!r}")

    base = path.parent
    return RunConfig(
        input=_resolve(base, data["input"]),
        layout=layout,
        subject_column=data.get("subject_column", "subject"),
        time_column=data.get("time_column", "time"),
        marker_columns=marker_columns,
        marker_names=marker_names,
        occasion_spacing=spacing,
        time_origin=float(data.get("time_origin", DEFAULT_TIME_ORIGIN)),
        baseline_difference=bool(data.get("baseline_difference", False)),
        design=design,
        models=models,
        output=_resolve(base, data.get("output")),
        seed=int(data.get("seed", 0)),
    )


def truth_config_from_dict(data, base=Path(".")):
    """
    Build a TruthConfig from a mapping: optional preset plus overrides.

    Raises:
        ConfigError: Unknown preset, incomplete truth or invalid values
    """
    preset_name = data.get("preset", DEFAULT_PRESET if "beta" not in data else None)
    if preset_name is not None and preset_name not in TRUTH_PRESETS:
        raise ConfigError(
            f"Unknown truth preset {preset_name!r}; available: {', '.join(sorted(TRUTH_PRESETS))}"
        )
    preset = TRUTH_PRESETS.get(preset_name, {})
    merged = {key: value for key, value in preset.items() if key != "model"}
    merged.update({key: value for key, value in data.items() if key != "model"})

    model_block = data.get("model", preset.get("model"))
    if model_block is None:
        raise ConfigError("Truth config needs a model block when no preset is used")
    model_block = {"name": preset.get("model", {}).get("name", "model"), **model_block}

    design = design_from_dict(merged)
    layout = merged.get("layout", "long")
    if layout not in LAYOUTS:
        raise ConfigError(f"Invalid layout {layout!r}; expected one of: {', '.join(LAYOUTS)}")
    try:
        truth = validate_truth(truth_from_dict(merged), design)
        missingness = missingness_from_dict(merged.get("missingness"))
        replicates = int(merged.get("replicates", DEFAULT_REPLICATES))
    except (InvalidArgumentError, KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"Invalid truth config: {e}") from e
    if replicates < 1:
        raise ConfigError(f"replicates must be positive, got {replicates}")

    return TruthConfig(
        truth=truth,
        design=design,
        model=model_from_dict(model_block, design),
        missingness=missingness,
        replicates=replicates,
        output=_resolve(base, merged.get("output")),
        layout=layout,
    )


def load_truth_config(config_path=None):
    """
    Load a recovery/simulation configuration (the default preset if no path).

    Raises:
        FileNotFoundError: If the config file doesn't exist
        ConfigError: If fields are missing or invalid
    """
    if config_path is None:
        return truth_config_from_dict({})
    path, data = _read_json(config_path, "truth.json.example")
    return truth_config_from_dict(data, path.parent)
