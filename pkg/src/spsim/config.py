"""YAML run configuration with strict, line-anchored validation.

Unknown keys are rejected (pointing at the offending line), and every value
is coerced to its declared type so scientific notation like ``300e9`` works
whether the YAML parser read it as number or string.
"""

from dataclasses import dataclass, field, fields

import yaml

from .cluster import ClusterSpec
from .executor import ATTENTION_MODES, SHARD_AXES, TEXT_PLACEMENTS
from .model import PatchSpec
from .planner import CostParams, ModelDims, Workload


class ConfigError(ValueError):
    """Anything wrong with a run configuration file."""


@dataclass(frozen=True)
class ToyScenario:
    """The small en-masse-verifiable workload the simulator runs."""

    frames: int = 4
    height: int = 96
    width: int = 96
    text_len: int = 6
    dim: int = 48
    heads: int = 24
    depth: int = 2
    timesteps: int = 100
    sp_sizes: tuple = (1, 2, 3, 4, 6, 8)
    axes: tuple = SHARD_AXES
    attentions: tuple = ATTENTION_MODES
    text_placements: tuple = TEXT_PLACEMENTS


@dataclass(frozen=True)
class SweepSpec:
    frames_start: int = 8
    frames_stop: int = 160
    frames_step: int = 8
    resolutions: tuple = ((256, 256), (512, 384), (512, 512), (768, 432),
                          (1024, 576), (1280, 720), (1920, 1080))


@dataclass(frozen=True)
class SearchSpec:
    recompute_grid: tuple = tuple(round(0.1 * i, 10) for i in range(11))
    offload_grid: tuple = (0.0, 0.2)


@dataclass(frozen=True)
class CalibrationSpec:
    anchors: str = ""
    dp_size: int = 2
    zero_stage: int = 3
    global_batch: int = 2


@dataclass(frozen=True)
class RunConfig:
    cluster: ClusterSpec
    model: ModelDims
    cost: CostParams
    workload: Workload
    toy: ToyScenario
    sweep: SweepSpec
    search: SearchSpec
    calibration: CalibrationSpec
    raw: dict = field(repr=False, default_factory=dict)


_PATCH_KEYS = ("vae_downsample", "patch", "latent_channels")


def _coerce(value, target_type, where: str, line: int):
    try:
        if target_type is bool:
            if isinstance(value, bool):
                return value
            raise ValueError("expected a boolean")
        if target_type is int:
            out = int(str(value), 0) if not isinstance(value, (int, float)) else int(value)
            if isinstance(value, float) and value != out:
                raise ValueError("not an integer")
            return out
        if target_type is float:
            return float(value)
        if target_type is str:
            if not isinstance(value, str):
                raise ValueError("expected a string")
            return value
        if target_type is tuple:
            if not isinstance(value, (list, tuple)):
                raise ValueError("expected a list")
            return tuple(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where} (line {line}): bad value {value!r}: {exc}")
    raise ConfigError(f"{where} (line {line}): unsupported type {target_type}")


def _key_lines(text: str) -> dict:
    """Map dotted key paths to 1-based source lines, via the composed tree."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    lines = {}

    def walk(node, prefix):
        if not isinstance(node, yaml.MappingNode):
            return
        for key_node, value_node in node.value:
            name = str(key_node.value)
            path = f"{prefix}.{name}" if prefix else name
            lines[path] = key_node.start_mark.line + 1
            walk(value_node, path)

    walk(root, "")
    return lines


def _dataclass_schema(cls) -> dict:
    return {f.name: f.type if isinstance(f.type, type) else _resolve(f.type)
            for f in fields(cls)}


def _resolve(annotation):
    # dataclass field types arrive as strings under deferred annotations
    return {"int": int, "float": float, "str": str, "bool": bool,
            "tuple": tuple}.get(annotation, annotation)


def _build_section(cls, data, section: str, lines: dict, extra_keys=()):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        line = lines.get(section, 0)
        raise ConfigError(f"section '{section}' (line {line}) must be a mapping")
    schema = _dataclass_schema(cls)
    kwargs = {}
    for key, value in data.items():
        path = f"{section}.{key}"
        line = lines.get(path, 0)
        if key in extra_keys:
            continue
        if key not in schema:
            known = ", ".join(sorted(list(schema) + list(extra_keys)))
            raise ConfigError(
                f"unknown key '{key}' in section '{section}' (line {line}); "
                f"known keys: {known}"
            )
        kwargs[key] = _coerce(value, schema[key], path, line)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{section}': {exc}")


_SECTIONS = ("cluster", "model", "cost", "workload", "toy", "sweep",
             "search", "calibration")


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid yaml: {exc}")
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    lines = _key_lines(text)

    for key in data:
        if key not in _SECTIONS:
            line = lines.get(key, 0)
            raise ConfigError(
                f"unknown section '{key}' (line {line}); "
                f"known sections: {', '.join(_SECTIONS)}"
            )

    model_data = dict(data.get("model") or {})
    patch_kwargs = {}
    for key in _PATCH_KEYS:
        if key in model_data:
            line = lines.get(f"model.{key}", 0)
            patch_kwargs[key] = _coerce(model_data.pop(key), int,
                                        f"model.{key}", line)
    try:
        patch = PatchSpec(**patch_kwargs)
    except ValueError as exc:
        raise ConfigError(f"section 'model': {exc}")

    cluster = _build_section(ClusterSpec, data.get("cluster"), "cluster", lines)
    dims = _build_section(ModelDims, model_data, "model", lines,
                          extra_keys=("patch",))
    try:
        dims = ModelDims(layers=dims.layers, dim=dims.dim, heads=dims.heads,
                         mlp_ratio=dims.mlp_ratio, text_tokens=dims.text_tokens,
                         patch=patch)
    except ValueError as exc:
        raise ConfigError(f"section 'model': {exc}")
    cost = _build_section(CostParams, data.get("cost"), "cost", lines)
    workload = _build_section(Workload, data.get("workload") or
                              {"frames": 144, "height": 1920, "width": 1080,
                               "global_batch": 24}, "workload", lines)
    toy = _build_section(ToyScenario, data.get("toy"), "toy", lines)
    sweep_data = dict(data.get("sweep") or {})
    if "frames" in sweep_data:
        f = sweep_data.pop("frames")
        line = lines.get("sweep.frames", 0)
        if not isinstance(f, dict) or set(f) - {"start", "stop", "step"}:
            raise ConfigError(
                f"sweep.frames (line {line}) must be a mapping of "
                f"start/stop/step"
            )
        for name in ("start", "stop", "step"):
            if name in f:
                sweep_data[f"frames_{name}"] = f[name]
    sweep = _build_section(SweepSpec, sweep_data, "sweep", lines)
    if isinstance(sweep.resolutions, tuple):
        try:
            res = tuple((int(h), int(w)) for h, w in sweep.resolutions)
        except (TypeError, ValueError):
            raise ConfigError("sweep.resolutions must be [height, width] pairs")
        sweep = SweepSpec(frames_start=sweep.frames_start,
                          frames_stop=sweep.frames_stop,
                          frames_step=sweep.frames_step, resolutions=res)
    search = _build_section(SearchSpec, data.get("search"), "search", lines)
    calibration = _build_section(CalibrationSpec, data.get("calibration"),
                                 "calibration", lines)

    for scn_field, bound in (("sp_sizes", 1),):
        vals = getattr(toy, scn_field)
        if not vals or any(int(v) < bound for v in vals):
            raise ConfigError(f"toy.{scn_field} must be positive integers")
    toy = ToyScenario(frames=toy.frames, height=toy.height, width=toy.width,
                      text_len=toy.text_len, dim=toy.dim, heads=toy.heads,
                      depth=toy.depth, timesteps=toy.timesteps,
                      sp_sizes=tuple(int(v) for v in toy.sp_sizes),
                      axes=tuple(toy.axes), attentions=tuple(toy.attentions),
                      text_placements=tuple(toy.text_placements))
    for axis in toy.axes:
        if axis not in SHARD_AXES:
            raise ConfigError(f"toy.axes: unknown axis {axis!r}")
    for mode in toy.attentions:
        if mode not in ATTENTION_MODES:
            raise ConfigError(f"toy.attentions: unknown mode {mode!r}")
    for place in toy.text_placements:
        if place not in TEXT_PLACEMENTS:
            raise ConfigError(f"toy.text_placements: unknown placement {place!r}")

    return RunConfig(cluster=cluster, model=dims, cost=cost, workload=workload,
                     toy=toy, sweep=sweep, search=search,
                     calibration=calibration, raw=data)
