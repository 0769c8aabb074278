"""Layered YAML configuration with group selection and interpolation.

A config root holds ``<base>.yaml`` plus one subdirectory per group of
interchangeable choices (``reconstruction/nesvor.yaml``, ...). Composition
precedence is total: base < defaults (in listed order) < explicit
selections < overrides. Maps merge recursively, lists replace wholesale.
All transformations return new trees and never mutate their inputs.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .container import CommandTemplate, ContainerSpec
from .errors import ConfigError, InterpolationError, OverrideError, TemplateError

_PATH_RE = re.compile(r"^[A-Za-z0-9_]+(\.[A-Za-z0-9_]+)*$")
_REF_RE = re.compile(r"\$\{([A-Za-z0-9_]+(?:\.[A-Za-z0-9_]+)*)\}")

RUNTIMES = ("docker", "singularity", "local")

_STAGE_KEYS = {"implementation", "container", "command", "params", "timeout_s"}
_CONTAINER_KEYS = {"image", "runtime", "gpu", "env", "extra_args"}
_ENGINE_KEYS = {"nproc", "cache_root", "fast_hash"}


@dataclass(frozen=True)
class GroupSelection:
    """One group choice, e.g. ``reconstruction=svrtk``."""

    group: str
    choice: str

    def __post_init__(self):
        if not self.group or not self.choice:
            raise ConfigError(f"group and choice must be non-empty: {self.group!r}={self.choice!r}")


@dataclass(frozen=True)
class OverrideExpr:
    """A single config override: dotted path, parsed value, replace or add."""

    path: tuple[str, ...]
    value: Any
    mode: str = "replace"

    @property
    def dotted(self) -> str:
        return ".".join(self.path)


def parse_override(text: str) -> OverrideExpr:
    """Parse ``path=value`` / ``+path=value`` surface syntax.

    Values go through YAML scalar parsing, so ``5`` is an integer while
    ``"5"`` stays a string.
    """
    mode = "replace"
    if text.startswith("+"):
        mode = "add"
        text = text[1:]
    lhs, sep, rhs = text.partition("=")
    if not sep or not lhs:
        raise OverrideError(f"malformed override {text!r}; expected path=value")
    if not _PATH_RE.match(lhs):
        raise OverrideError(f"malformed override path {lhs!r}")
    try:
        value = yaml.safe_load(rhs) if rhs else None
    except yaml.YAMLError as exc:
        raise OverrideError(f"cannot parse override value {rhs!r}: {exc}") from exc
    return OverrideExpr(tuple(lhs.split(".")), value, mode)


class _StrictLoader(yaml.SafeLoader):
    """SafeLoader that rejects duplicate keys instead of last-wins."""


def _construct_mapping(loader: _StrictLoader, node: yaml.MappingNode, deep: bool = False):
    mapping: dict = {}
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in mapping:
            raise ConfigError(
                f"duplicate key {key!r} at line {key_node.start_mark.line + 1}"
            )
        mapping[key] = loader.construct_object(value_node, deep=deep)
    return mapping


_StrictLoader.add_constructor(
    yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping
)


def load_yaml(path: str | Path):
    """Load one YAML file as a plain tree. Empty files load as ``{}``."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        tree = yaml.load(text, Loader=_StrictLoader)
    except ConfigError as exc:
        raise ConfigError(f"{exc} in {path}") from None
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else "?"
        raise ConfigError(f"YAML syntax error at line {line} in {path}: {exc.problem}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"YAML error in {path}: {exc}") from exc
    return {} if tree is None else tree


def deep_merge(base, update):
    """Merge ``update`` over ``base``: maps recurse, everything else replaces."""
    if isinstance(base, dict) and isinstance(update, dict):
        merged = {k: copy.deepcopy(v) for k, v in base.items()}
        for key, value in update.items():
            if key in merged:
                merged[key] = deep_merge(merged[key], value)
            else:
                merged[key] = copy.deepcopy(value)
        return merged
    return copy.deepcopy(update)


def _parse_defaults(entry, base_path: Path) -> tuple[str, str]:
    if not isinstance(entry, dict) or len(entry) != 1:
        raise ConfigError(
            f"defaults entries must be single-key mappings like '- reconstruction: nesvor' in {base_path}"
        )
    (group, choice), = entry.items()
    if not isinstance(choice, str):
        raise ConfigError(f"defaults choice for group {group!r} must be a string in {base_path}")
    return str(group), choice


def compose(
    config_root: str | Path,
    base_name: str,
    selections: list[GroupSelection] | None = None,
):
    """Compose the base file, its defaults list, and explicit selections.

    Each group's file content mounts under the key named by the group.
    Explicit selections replace the default choice of the same group.
    """
    config_root = Path(config_root)
    base_path = config_root / f"{base_name}.yaml"
    if not base_path.is_file():
        raise ConfigError(f"base config not found: {base_path}")
    base = load_yaml(base_path)
    if not isinstance(base, dict):
        raise ConfigError(f"base config must be a mapping: {base_path}")
    merged = copy.deepcopy(base)
    defaults = merged.pop("defaults", [])
    if not isinstance(defaults, list):
        raise ConfigError(f"'defaults' must be a list in {base_path}")

    choices: dict[str, str] = {}
    for entry in defaults:
        group, choice = _parse_defaults(entry, base_path)
        choices[group] = choice
    seen: set[str] = set()
    for sel in selections or []:
        if sel.group in seen:
            raise ConfigError(f"two selections for the same group {sel.group!r}")
        seen.add(sel.group)
        choices[sel.group] = sel.choice

    for group, choice in choices.items():
        group_dir = config_root / group
        if not group_dir.is_dir():
            available = sorted(
                p.name for p in config_root.iterdir() if p.is_dir() and any(p.glob("*.yaml"))
            )
            raise ConfigError(f"unknown config group {group!r}; available groups: {available}")
        choice_path = group_dir / f"{choice}.yaml"
        if not choice_path.is_file():
            available = sorted(p.stem for p in group_dir.glob("*.yaml"))
            raise ConfigError(
                f"unknown choice {choice!r} for group {group!r}; available: {available}"
            )
        content = load_yaml(choice_path)
        if not isinstance(content, dict):
            raise ConfigError(f"group config must be a mapping: {choice_path}")
        merged = deep_merge(merged, {group: content})
    return merged


def apply_overrides(node, overrides: list[OverrideExpr]):
    """Apply overrides in order (later ones win). Returns a new tree.

    Replace mode requires the path to exist; add mode (``+path``) requires
    the final key to be absent and creates intermediate maps as needed.
    """
    working = copy.deepcopy(node)
    for ov in overrides:
        target = working
        for i, seg in enumerate(ov.path[:-1]):
            prefix = ".".join(ov.path[: i + 1])
            if not isinstance(target, dict):
                raise OverrideError(f"cannot descend into {prefix!r}: parent is not a mapping")
            if seg not in target:
                if ov.mode == "add":
                    target[seg] = {}
                else:
                    raise OverrideError(
                        f"cannot override missing path {ov.dotted!r};"
                        f" did you mean '+{ov.dotted}=...'?"
                    )
            target = target[seg]
        if not isinstance(target, dict):
            raise OverrideError(
                f"cannot set {ov.dotted!r}: {'.'.join(ov.path[:-1])!r} is not a mapping"
            )
        last = ov.path[-1]
        if ov.mode == "replace" and last not in target:
            raise OverrideError(
                f"cannot override missing path {ov.dotted!r}; did you mean '+{ov.dotted}=...'?"
            )
        if ov.mode == "add" and last in target:
            raise OverrideError(
                f"cannot add existing path {ov.dotted!r}; drop the '+' to replace it"
            )
        target[last] = copy.deepcopy(ov.value)
    return working


def interpolate(node):
    """Resolve every ``${a.b.c}`` reference against the tree's absolute paths.

    A string that is exactly one reference keeps the referenced value's
    type; references embedded in longer strings splice in as text. Cycles
    and danglings raise :class:`InterpolationError` naming the path.
    """
    root = node

    def lookup(path: str):
        current = root
        for seg in path.split("."):
            if not isinstance(current, dict) or seg not in current:
                raise InterpolationError(f"dangling reference ${{{path}}}")
            current = current[seg]
        return current

    def deref(path: str, stack: tuple[str, ...]):
        if path in stack:
            cycle = list(stack[stack.index(path):]) + [path]
            raise InterpolationError("interpolation cycle: " + " -> ".join(cycle))
        return walk(lookup(path), path, stack)

    def walk(value, loc: str, stack: tuple[str, ...]):
        if isinstance(value, dict):
            return {
                k: walk(v, f"{loc}.{k}" if loc else str(k), stack) for k, v in value.items()
            }
        if isinstance(value, list):
            return [walk(v, loc, stack) for v in value]
        if isinstance(value, str):
            full = _REF_RE.fullmatch(value)
            if full:
                return deref(full.group(1), stack + (loc,))

            def splice(match: re.Match) -> str:
                resolved = deref(match.group(1), stack + (loc,))
                if isinstance(resolved, (dict, list)):
                    raise InterpolationError(
                        f"cannot splice non-scalar ${{{match.group(1)}}} into a string at {loc!r}"
                    )
                if isinstance(resolved, bool):
                    return "true" if resolved else "false"
                return "" if resolved is None else str(resolved)

            return _REF_RE.sub(splice, value)
        return value

    return walk(node, "", ())


@dataclass(frozen=True)
class StageConfig:
    """Fully resolved configuration of one pipeline stage."""

    name: str
    implementation: str
    container: ContainerSpec
    template: CommandTemplate
    params: dict[str, Any] = field(default_factory=dict)
    timeout_s: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    """Validated, typed view of the composed configuration tree."""

    pipeline_name: str
    stages: tuple[StageConfig, ...]
    runtime: str
    parallelism: int
    output_root: str | None = None
    cache_root: str | None = None
    fast_hash: bool = False
    warnings: tuple[str, ...] = ()

    def stage(self, name: str) -> StageConfig:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)


def _flatten_params(params, prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in params.items():
        dotted = f"{prefix}.{key}" if prefix else str(key)
        if isinstance(value, dict):
            flat.update(_flatten_params(value, dotted))
        else:
            flat[dotted] = value
    return flat


def _require_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path} must be an integer, got {value!r}")
    return value


def validate_config(node, registry=None) -> PipelineConfig:
    """Turn a composed, overridden, interpolated tree into a PipelineConfig.

    Unknown top-level keys are collected as warnings; unknown keys inside a
    stage section are errors. Every configured stage must name an
    implementation registered in the pipeline catalog, and the configured
    stages must form a chain whose input kinds are satisfied in order.
    """
    from .pipeline import STAGES, registry as default_registry

    if not isinstance(node, dict):
        raise ConfigError("configuration root must be a mapping")
    reg = registry if registry is not None else default_registry()

    warnings: list[str] = []
    top_keys = {"pipeline_name", "runtime", "engine", "parallelism", "output_root"} | set(STAGES)
    for key in node:
        if key not in top_keys:
            warnings.append(f"unknown top-level key {key!r} ignored")

    pipeline_name = node.get("pipeline_name", "stackflow")
    if not isinstance(pipeline_name, str) or not pipeline_name:
        raise ConfigError("pipeline_name must be a non-empty string")

    runtime = node.get("runtime", "docker")
    if runtime not in RUNTIMES:
        raise ConfigError(f"runtime must be one of {RUNTIMES}, got {runtime!r} (runtime)")

    engine = node.get("engine", {})
    if not isinstance(engine, dict):
        raise ConfigError("engine must be a mapping (engine)")
    for key in engine:
        if key not in _ENGINE_KEYS:
            warnings.append(f"unknown engine key 'engine.{key}' ignored")

    if "parallelism" in node:
        parallelism = _require_int(node["parallelism"], "parallelism")
        par_path = "parallelism"
    else:
        parallelism = _require_int(engine.get("nproc", 1), "engine.nproc")
        par_path = "engine.nproc"
    if parallelism < 1:
        raise ConfigError(f"parallelism ≥ 1 required, got {parallelism} ({par_path})")

    cache_root = engine.get("cache_root")
    if cache_root is not None and not isinstance(cache_root, str):
        raise ConfigError("engine.cache_root must be a string path")
    fast_hash = engine.get("fast_hash", False)
    if not isinstance(fast_hash, bool):
        raise ConfigError("engine.fast_hash must be a boolean")
    output_root = node.get("output_root")
    if output_root is not None and not isinstance(output_root, str):
        raise ConfigError("output_root must be a string path")

    stages: list[StageConfig] = []
    available_kinds = {"stacks"}
    for stage_name, stage_def in STAGES.items():
        if stage_name not in node:
            continue
        content = node[stage_name]
        if not isinstance(content, dict):
            raise ConfigError(f"stage section must be a mapping ({stage_name})")
        for key in content:
            if key not in _STAGE_KEYS:
                raise ConfigError(f"unknown stage key ({stage_name}.{key})")

        impl_id = content.get("implementation")
        if not isinstance(impl_id, str) or not impl_id:
            raise ConfigError(f"missing required key ({stage_name}.implementation)")
        impl = next((i for i in reg.get(stage_name, []) if i.id == impl_id), None)
        if impl is None:
            available = sorted(i.id for i in reg.get(stage_name, []))
            raise ConfigError(
                f"implementation {impl_id!r} not registered for stage {stage_name!r};"
                f" available: {available} ({stage_name}.implementation)"
            )

        container_cfg = content.get("container", {})
        if not isinstance(container_cfg, dict):
            raise ConfigError(f"container section must be a mapping ({stage_name}.container)")
        for key in container_cfg:
            if key not in _CONTAINER_KEYS:
                raise ConfigError(f"unknown container key ({stage_name}.container.{key})")
        stage_runtime = container_cfg.get("runtime", runtime)
        if stage_runtime not in RUNTIMES:
            raise ConfigError(
                f"runtime must be one of {RUNTIMES} ({stage_name}.container.runtime)"
            )
        env = container_cfg.get("env", dict(impl.container.env))
        if not isinstance(env, dict):
            raise ConfigError(f"env must be a mapping ({stage_name}.container.env)")
        extra_args = container_cfg.get("extra_args", list(impl.container.extra_args))
        if not isinstance(extra_args, list):
            raise ConfigError(f"extra_args must be a list ({stage_name}.container.extra_args)")
        try:
            spec = ContainerSpec(
                image=container_cfg.get("image", impl.container.image),
                runtime=stage_runtime,
                gpu=bool(container_cfg.get("gpu", impl.container.gpu)),
                env={str(k): str(v) for k, v in env.items()},
                extra_args=tuple(str(a) for a in extra_args),
            )
        except ValueError as exc:
            raise ConfigError(f"{exc} ({stage_name}.container)") from exc

        command = content.get("command", impl.template.template)
        if not isinstance(command, str) or not command.strip():
            raise ConfigError(f"command must be a non-empty string ({stage_name}.command)")
        try:
            template = CommandTemplate(command)
        except TemplateError as exc:
            raise ConfigError(f"{exc} ({stage_name}.command)") from exc

        params_cfg = content.get("params", {})
        if not isinstance(params_cfg, dict):
            raise ConfigError(f"params must be a mapping ({stage_name}.params)")
        params = _flatten_params(deep_merge(impl.default_params, params_cfg))

        timeout_s = _require_int(content.get("timeout_s", 0), f"{stage_name}.timeout_s")
        if timeout_s < 0:
            raise ConfigError(f"timeout_s must be ≥ 0 ({stage_name}.timeout_s)")

        if stage_def.input_kind not in available_kinds:
            raise ConfigError(
                f"stage ordering violation: {stage_name!r} consumes"
                f" {stage_def.input_kind!r}, which no earlier configured stage"
                f" provides ({stage_name})"
            )
        available_kinds.add(stage_def.output_kind)

        stages.append(
            StageConfig(
                name=stage_name,
                implementation=impl_id,
                container=spec,
                template=template,
                params=params,
                timeout_s=timeout_s,
            )
        )

    if not stages:
        raise ConfigError("no pipeline stages configured")

    return PipelineConfig(
        pipeline_name=pipeline_name,
        stages=tuple(stages),
        runtime=runtime,
        parallelism=parallelism,
        output_root=output_root,
        cache_root=cache_root,
        fast_hash=fast_hash,
        warnings=tuple(warnings),
    )
