"""The reference fetal-brain pipeline: stage chain, implementation catalog,
and stage-to-node resolution.

The four stages form a fixed chain (preprocessing, reconstruction,
segmentation, surface) connected by artifact kinds: stacks flow into a
reconstructed volume, the volume into a labelmap, the labelmap (plus the
volume) into surface meshes. Implementation command templates are
configuration data: the shipped config group files under ``configs/`` are
the catalog source, parsed once into an immutable registry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Any, Mapping, Sequence

from .bids import BidsEntities, StackGroup, derive_output_path
from .config import StageConfig, load_yaml
from .container import CommandTemplate, ContainerSpec
from .errors import ConfigError, GraphError, TemplateError
from .graph import ArtifactRef, NodeBinding, NodeSpec, OutputDecl


@dataclass(frozen=True)
class StageDef:
    """One stage of the chain and its artifact-kind contract."""

    name: str
    requires: str | None
    input_kind: str
    output_kind: str
    input_bindings: tuple[str, ...]  # placeholder name per consumed kind
    output_binding: str
    output_directory: bool
    stage_label: str
    output_suffix: str
    output_extension: str


STAGES: dict[str, StageDef] = {
    s.name: s
    for s in (
        StageDef(
            name="preprocessing",
            requires=None,
            input_kind="stacks",
            output_kind="stacks",
            input_bindings=("stacks",),
            output_binding="out_dir",
            output_directory=True,
            stage_label="preproc",
            output_suffix="T2w",
            output_extension="",
        ),
        StageDef(
            name="reconstruction",
            requires="preprocessing",
            input_kind="stacks",
            output_kind="volume",
            input_bindings=("stacks",),
            output_binding="out_volume",
            output_directory=False,
            stage_label="rec",
            output_suffix="T2w",
            output_extension=".nii.gz",
        ),
        StageDef(
            name="segmentation",
            requires="reconstruction",
            input_kind="volume",
            output_kind="labelmap",
            input_bindings=("volume",),
            output_binding="out_labels",
            output_directory=False,
            stage_label="seg",
            output_suffix="dseg",
            output_extension=".nii.gz",
        ),
        StageDef(
            name="surface",
            requires="segmentation",
            input_kind="labelmap",
            output_kind="surfaces",
            input_bindings=("labels", "volume"),
            output_binding="out_surfaces_dir",
            output_directory=True,
            stage_label="surf",
            output_suffix="surfaces",
            output_extension="",
        ),
    )
}

# Placeholder names every template may use, beyond its own params.
_CONTRACT_BINDINGS = {"stacks", "volume", "labels", "params"}


@dataclass(frozen=True)
class ImplementationDef:
    """A catalog entry: how one tool implements one stage."""

    id: str
    stage: str
    container: ContainerSpec
    template: CommandTemplate
    default_params: dict[str, Any] = field(default_factory=dict)
    gpu_required: bool = False


def packaged_config_root() -> Path:
    """The reference config groups shipped with the package."""
    return Path(__file__).parent / "configs"


def _implementation_from_file(stage: str, path: Path) -> ImplementationDef:
    data = load_yaml(path)
    if not isinstance(data, dict):
        raise ConfigError(f"implementation config must be a mapping: {path}")
    impl_id = data.get("implementation")
    if not isinstance(impl_id, str) or not impl_id:
        raise ConfigError(f"missing 'implementation' id in {path}")
    container = data.get("container", {})
    if not isinstance(container, dict):
        raise ConfigError(f"'container' must be a mapping in {path}")
    spec = ContainerSpec(
        image=container.get("image", ""),
        runtime=container.get("runtime", "docker"),
        gpu=bool(container.get("gpu", False)),
        env={str(k): str(v) for k, v in container.get("env", {}).items()},
        extra_args=tuple(str(a) for a in container.get("extra_args", [])),
    )
    command = data.get("command")
    if not isinstance(command, str) or not command.strip():
        raise ConfigError(f"missing 'command' template in {path}")
    params = data.get("params", {}) or {}
    if not isinstance(params, dict):
        raise ConfigError(f"'params' must be a mapping in {path}")
    return ImplementationDef(
        id=impl_id,
        stage=stage,
        container=spec,
        template=CommandTemplate(command),
        default_params=params,
        gpu_required=spec.gpu,
    )


_registry_cache: dict[str, dict[str, list[ImplementationDef]]] = {}


def registry(config_root: str | Path | None = None) -> dict[str, list[ImplementationDef]]:
    """Parse the config groups into the per-stage implementation catalog.

    The result is cached per root and must be treated as immutable.
    """
    root = Path(config_root) if config_root is not None else packaged_config_root()
    cache_key = str(root.resolve())
    if cache_key in _registry_cache:
        return _registry_cache[cache_key]
    catalog: dict[str, list[ImplementationDef]] = {}
    for stage_name in STAGES:
        stage_dir = root / stage_name
        impls = []
        if stage_dir.is_dir():
            for path in sorted(stage_dir.glob("*.yaml")):
                impls.append(_implementation_from_file(stage_name, path))
        catalog[stage_name] = sorted(impls, key=lambda i: i.id)
    _registry_cache[cache_key] = catalog
    return catalog


def scalar_str(value: Any) -> str:
    """Canonical string form of a config scalar (YAML-style booleans)."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "null"
    return str(value)


def _node_id(group: StackGroup, stage: str) -> str:
    if group.session is not None:
        return f"{group.subject}_{group.session}_{stage}"
    return f"{group.subject}_{stage}"


def resolve_stage(
    stage_cfg: StageConfig,
    group: StackGroup,
    upstream: Mapping[str, Sequence[ArtifactRef]],
    *,
    pipeline_name: str,
) -> NodeSpec:
    """Wire one configured stage into a concrete NodeSpec for one group.

    ``upstream`` maps artifact kinds to the references currently available
    for this group (the raw stacks, plus each earlier stage's outputs).

    Raises
    ------
    GraphError
        If the stage's input kind is not available (input-kind mismatch).
    TemplateError
        If a template placeholder is satisfied neither by the stage
        contract nor by the stage parameters.
    """
    stage_def = STAGES[stage_cfg.name]
    if stage_def.input_kind not in upstream or not upstream[stage_def.input_kind]:
        raise GraphError(
            f"input-kind mismatch: stage {stage_cfg.name!r} consumes"
            f" {stage_def.input_kind!r}, available kinds: {sorted(upstream)}"
        )

    entities = BidsEntities(
        subject=group.subject,
        suffix="T2w",
        extension=".nii.gz",
        session=group.session,
        datatype="anat",
    )
    out_relpath = derive_output_path(
        entities,
        pipeline_name,
        stage_def.stage_label,
        stage_def.output_suffix,
        stage_def.output_extension,
    )
    outputs = (OutputDecl(str(PurePosixPath(out_relpath)), stage_def.output_directory),)

    kind_for_binding = {
        "stacks": "stacks",
        "volume": "volume",
        "labels": "labelmap",
    }
    params = {k: scalar_str(v) for k, v in stage_cfg.params.items()}

    bindings: list[NodeBinding] = []
    for name, is_list in stage_cfg.template.placeholders():
        if name == stage_def.output_binding:
            bindings.append(
                NodeBinding(name=name, role="output", output_index=0, is_list=is_list)
            )
        elif name in stage_def.input_bindings and name in kind_for_binding:
            kind = kind_for_binding[name]
            refs = tuple(upstream.get(kind, ()))
            if not refs:
                raise GraphError(
                    f"stage {stage_cfg.name!r} placeholder <{name}> needs a"
                    f" {kind!r} artifact, none available"
                )
            bindings.append(NodeBinding(name=name, role="input", refs=refs, is_list=is_list))
        elif name == "params":
            bindings.append(
                NodeBinding(
                    name=name,
                    role="param",
                    values=tuple(f"{k}={v}" for k, v in sorted(params.items())),
                    is_list=True,
                )
            )
        elif name in params:
            bindings.append(NodeBinding(name=name, role="param", value=params[name]))
        else:
            raise TemplateError(
                f"placeholder <{name}> in stage {stage_cfg.name!r} is neither a"
                f" contract binding nor a parameter"
            )

    return NodeSpec(
        id=_node_id(group, stage_cfg.name),
        stage=stage_cfg.name,
        implementation=stage_cfg.implementation,
        subject=group.subject,
        session=group.session,
        spec=stage_cfg.container,
        template=stage_cfg.template,
        bindings=tuple(bindings),
        outputs=outputs,
        params=tuple(sorted(params.items())),
        timeout_s=stage_cfg.timeout_s,
    )


def contract_placeholders(stage: str) -> set[str]:
    """Placeholder names the stage contract itself provides."""
    stage_def = STAGES[stage]
    return set(stage_def.input_bindings) | {stage_def.output_binding, "params"}
