"""Build the per-run DAG and execute it with caching and failure isolation.

One orchestrator owns the graph state; a pool of N workers each runs one
container execution at a time. A node runs only when every upstream is
succeeded or cached; a node failure marks its transitive downstream
blocked while independent chains continue. Verified outputs are committed
to the content-addressed cache and materialized into the derivatives
tree; failed nodes leave logs and a ``failed`` marker in the run-scoped
work directory, never in the cache.
"""

from __future__ import annotations

import logging
import os
import threading
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path

from .bids import BidsDataset, DatasetWarning, StackGroup
from .cache import CacheStore, cache_key_preimage, compute_cache_key, hash_path
from .config import PipelineConfig
from .container import (
    DirPath,
    ResolvedCommand,
    build_runtime_invocation,
    execute,
    render_command,
)
from .errors import (
    ExecutionTimeoutError,
    GraphError,
    RuntimeUnavailableError,
    StackflowError,
    TemplateError,
)
from .graph import (
    ArtifactRef,
    FileInput,
    NodeSpec,
    NodeStatus,
    UpstreamOutput,
    WorkflowGraph,
    validate_acyclic,
)
from .pipeline import STAGES, resolve_stage
from .report import (
    ExecutionReport,
    NodeRecord,
    config_digest,
    dataset_summary,
    new_run_id,
    rfc3339,
    sidecar_payload,
    write_report,
    write_resolved_config,
    write_sidecar,
)

logger = logging.getLogger(__name__)


def build_graph(
    config: PipelineConfig,
    groups: list[StackGroup],
    *,
    dataset_root: str | Path,
) -> WorkflowGraph:
    """One linear chain of configured stages per (subject, session) group.

    The first configured stage consumes the group's stacks; each later
    stage consumes the previous stage's declared outputs.
    """
    if not groups:
        raise GraphError("no stack groups to process")
    dataset_root = Path(dataset_root)
    graph = WorkflowGraph()
    for group in groups:
        state: dict[str, tuple[ArtifactRef, ...]] = {
            "stacks": tuple(
                FileInput(str(dataset_root / f.relative_path)) for f in group.stacks
            )
        }
        for stage_cfg in config.stages:
            node = resolve_stage(stage_cfg, group, state, pipeline_name=config.pipeline_name)
            graph.add(node)
            state[STAGES[stage_cfg.name].output_kind] = (UpstreamOutput(node.id, 0),)
    return graph


@dataclass
class ExecuteOptions:
    """Run-level knobs for :func:`execute_graph`."""

    out_root: Path
    cache_root: Path
    parallelism: int = 1
    fast_hash: bool = False
    extra_env: dict[str, str] = field(default_factory=dict)
    path_prepend: Path | None = None
    run_id: str | None = None
    pipeline_name: str = "stackflow"
    dataset: BidsDataset | None = None
    resolved_config: object = None
    dataset_warnings: tuple[DatasetWarning, ...] = ()


@dataclass(frozen=True)
class PlanEntry:
    """One node's dry-run fate: run or hit the cache."""

    node_id: str
    stage: str
    action: str  # would-run | would-hit-cache
    cache_key: str | None
    command_preview: str

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "stage": self.stage,
            "action": self.action,
            "cache_key": self.cache_key,
            "command_preview": self.command_preview,
        }


def _resolve_ref(ref: ArtifactRef, graph: WorkflowGraph, out_root: Path) -> Path:
    if isinstance(ref, FileInput):
        return Path(ref.path)
    producer = graph.nodes[ref.node_id]
    return out_root / producer.outputs[ref.index].relpath


def _expand_artifact(path: Path, *, missing_ok: bool) -> list[Path]:
    """A list placeholder bound to a directory artifact expands to its
    files, sorted for determinism."""
    if path.is_dir():
        return sorted(p for p in path.rglob("*") if p.is_file())
    if not path.exists() and not missing_ok:
        raise TemplateError(f"host input path missing: {path}")
    return [path]


def _build_bindings(
    node: NodeSpec,
    graph: WorkflowGraph,
    out_root: Path,
    staging: Path | None,
    *,
    missing_ok: bool = False,
) -> dict[str, object]:
    """Concrete render bindings: input paths, output paths, params.

    With ``staging`` set, output placeholders point into the node's work
    directory; otherwise they point at the final derivatives paths (used
    for previews, where only the basenames matter after translation).
    """
    bindings: dict[str, object] = {}
    for b in node.bindings:
        if b.role == "input":
            paths = [_resolve_ref(ref, graph, out_root) for ref in b.refs]
            if b.is_list:
                expanded: list[Path] = []
                for p in paths:
                    expanded.extend(_expand_artifact(p, missing_ok=missing_ok))
                bindings[b.name] = expanded
            else:
                bindings[b.name] = paths[0]
        elif b.role == "output":
            decl = node.outputs[b.output_index]
            base = staging if staging is not None else out_root / Path(decl.relpath).parent
            target = Path(base) / Path(decl.relpath).name
            bindings[b.name] = DirPath(target) if decl.directory else target
        elif b.is_list:
            bindings[b.name] = list(b.values)
        else:
            bindings[b.name] = b.value
    return bindings


def _node_digests(node: NodeSpec, graph: WorkflowGraph, out_root: Path, fast: bool) -> list[str]:
    return [
        hash_path(_resolve_ref(ref, graph, out_root), fast=fast) for ref in node.inputs
    ]


def _canonical_command(
    node: NodeSpec, graph: WorkflowGraph, out_root: Path, staging: Path | None
) -> ResolvedCommand:
    bindings = _build_bindings(node, graph, out_root, staging, missing_ok=True)
    return render_command(node.template, bindings, translate=True, check_paths=False)


def _sources_for(node: NodeSpec, graph: WorkflowGraph, dataset: BidsDataset | None) -> list[str]:
    sources: list[str] = []
    for ref in node.inputs:
        if isinstance(ref, FileInput):
            path = Path(ref.path)
            if dataset is not None:
                try:
                    sources.append(path.relative_to(dataset.root).as_posix())
                    continue
                except ValueError:
                    pass
            sources.append(str(path))
        else:
            sources.append(graph.nodes[ref.node_id].outputs[ref.index].relpath)
    return sources


class _KeyLocks:
    """Per-cache-key mutual exclusion within this orchestrator process."""

    def __init__(self):
        self._guard = threading.Lock()
        self._locks: dict[str, threading.Lock] = {}

    def get(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())


def _run_node(
    node: NodeSpec,
    graph: WorkflowGraph,
    options: ExecuteOptions,
    cache: CacheStore,
    key_locks: _KeyLocks,
    work_dir: Path,
) -> NodeRecord:
    out_root = Path(options.out_root)
    node_work = work_dir / node.id
    digests = _node_digests(node, graph, out_root, options.fast_hash)
    canonical = _canonical_command(node, graph, out_root, staging=None)
    key = compute_cache_key(node.spec.image, canonical.argv, node.params, digests)
    preimage = cache_key_preimage(node.spec.image, canonical.argv, node.params, digests)
    sources = _sources_for(node, graph, options.dataset)

    base_record = dict(
        id=node.id,
        stage=node.stage,
        implementation=node.implementation,
        image=node.spec.image,
        cache_key=key.digest,
        outputs=tuple(o.relpath for o in node.outputs),
    )

    with key_locks.get(key.digest):
        if cache.has(key):
            meta = cache.read_meta(key)
            cache.materialize(key, out_root)
            for decl in node.outputs:
                payload = meta.get("sidecars", {}).get(decl.relpath)
                if payload is not None:
                    write_sidecar(out_root / decl.relpath, payload, from_cache=True)
            return NodeRecord(status=NodeStatus.CACHED.value, **base_record)

        staging = node_work / "out"
        staging.mkdir(parents=True, exist_ok=True)
        for decl in node.outputs:
            if decl.directory:
                (staging / Path(decl.relpath).name).mkdir(exist_ok=True)

        bindings = _build_bindings(node, graph, out_root, staging)
        translate = node.spec.runtime != "local"
        exec_cmd = render_command(node.template, bindings, translate=translate)
        invocation = build_runtime_invocation(node.spec, exec_cmd)

        env = os.environ.copy()
        env.update(options.extra_env)
        if options.path_prepend is not None:
            env["PATH"] = f"{options.path_prepend}{os.pathsep}{env.get('PATH', '')}"

        def failed(error: str, duration_ms: int = 0, invocation_ref: str | None = None) -> NodeRecord:
            (node_work / "failed").write_text(error + "\n", encoding="utf-8")
            return NodeRecord(
                status=NodeStatus.FAILED.value,
                duration_ms=duration_ms,
                invocation_ref=invocation_ref,
                error=error,
                **base_record,
            )

        invocation_ref = str((node_work / "invocation.json").relative_to(Path(options.out_root)))
        try:
            result = execute(invocation, node_work, timeout_s=node.timeout_s, env=env)
        except ExecutionTimeoutError as exc:
            return failed(f"timeout: {exc}", invocation_ref=invocation_ref)
        except RuntimeUnavailableError as exc:
            return failed(str(exc), invocation_ref=invocation_ref)

        if result.exit_code != 0:
            return failed(
                f"exit code {result.exit_code}",
                duration_ms=result.duration_ms,
                invocation_ref=invocation_ref,
            )

        artifacts: list[tuple[Path, str]] = []
        for decl in node.outputs:
            produced = staging / Path(decl.relpath).name
            if not produced.exists():
                return failed(
                    f"declared output missing after execution: {decl.relpath}",
                    duration_ms=result.duration_ms,
                    invocation_ref=invocation_ref,
                )
            artifacts.append((produced, decl.relpath))

        command_str = " ".join(canonical.argv)
        sidecars = {
            decl.relpath: sidecar_payload(
                sources=sources,
                pipeline_name=options.pipeline_name,
                stage=node.stage,
                implementation=node.implementation,
                image=node.spec.image,
                command=command_str,
                cache_key=key.digest,
            )
            for decl in node.outputs
        }
        cache.store(key, artifacts, preimage, sidecars=sidecars)
        cache.materialize(key, out_root)
        for decl in node.outputs:
            write_sidecar(out_root / decl.relpath, sidecars[decl.relpath], from_cache=False)

        return NodeRecord(
            status=NodeStatus.SUCCEEDED.value,
            duration_ms=result.duration_ms,
            invocation_ref=invocation_ref,
            **base_record,
        )


def execute_graph(graph: WorkflowGraph, options: ExecuteOptions) -> ExecutionReport:
    """Run the graph with at most ``options.parallelism`` nodes in flight.

    Node failures are report data, not exceptions: the report lists each
    node as succeeded, cached, failed, or blocked. Only run-level problems
    (unwritable cache, concurrent orchestrator) raise.
    """
    order = validate_acyclic(graph)
    out_root = Path(options.out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    run_id = options.run_id or new_run_id()
    work_dir = out_root / "work" / run_id
    work_dir.mkdir(parents=True, exist_ok=True)

    cache = CacheStore(options.cache_root)
    key_locks = _KeyLocks()
    statuses: dict[str, str] = {node_id: NodeStatus.PENDING.value for node_id in order}
    records: dict[str, NodeRecord] = {}

    def upstream_ok(node_id: str) -> bool:
        return all(
            statuses[p] in (NodeStatus.SUCCEEDED.value, NodeStatus.CACHED.value)
            for p in graph.predecessors(node_id)
        )

    def block_downstream(node_id: str) -> None:
        for child in sorted(graph.transitive_successors(node_id)):
            if statuses[child] in (NodeStatus.PENDING.value,):
                statuses[child] = NodeStatus.BLOCKED.value
                node = graph.nodes[child]
                records[child] = NodeRecord(
                    id=child,
                    stage=node.stage,
                    implementation=node.implementation,
                    status=NodeStatus.BLOCKED.value,
                    image=node.spec.image,
                    error=f"upstream {node_id} did not succeed",
                    outputs=tuple(o.relpath for o in node.outputs),
                )

    with cache.lock():
        with ThreadPoolExecutor(max_workers=options.parallelism) as pool:
            in_flight: dict[Future, str] = {}

            def submit_ready() -> None:
                for node_id in order:
                    if statuses[node_id] != NodeStatus.PENDING.value:
                        continue
                    if not upstream_ok(node_id):
                        continue
                    statuses[node_id] = NodeStatus.RUNNING.value
                    future = pool.submit(
                        _run_node, graph.nodes[node_id], graph, options, cache,
                        key_locks, work_dir,
                    )
                    in_flight[future] = node_id

            submit_ready()
            while in_flight:
                done, _ = wait(in_flight, return_when=FIRST_COMPLETED)
                for future in done:
                    node_id = in_flight.pop(future)
                    record = future.result()
                    records[node_id] = record
                    statuses[node_id] = record.status
                    if record.status == NodeStatus.FAILED.value:
                        logger.warning("node %s failed: %s", node_id, record.error)
                        block_downstream(node_id)
                    else:
                        logger.info(
                            "node %s %s (%d ms)", node_id, record.status, record.duration_ms
                        )
                submit_ready()

    report = ExecutionReport(
        run_id=run_id,
        created_at=rfc3339(),
        pipeline_name=options.pipeline_name,
        resolved_config_digest=(
            config_digest(options.resolved_config) if options.resolved_config is not None else ""
        ),
        dataset=dataset_summary(options.dataset),
        nodes=tuple(records[node_id] for node_id in graph.nodes),
        fast_hash=options.fast_hash,
        warnings=tuple(options.dataset_warnings),
    )
    write_report(report, out_root)
    if options.resolved_config is not None:
        write_resolved_config(options.resolved_config, out_root, run_id)
    return report


def dry_run(
    graph: WorkflowGraph,
    cache_root: str | Path,
    out_root: str | Path,
    *,
    fast_hash: bool = False,
) -> list[PlanEntry]:
    """Preview which nodes would run and which would hit the cache.

    Reads inputs for hashing but has no other side effects. A node whose
    upstream would run is itself marked would-run without a key, since its
    inputs do not exist yet.
    """
    order = validate_acyclic(graph)
    cache = CacheStore(cache_root)
    out_root = Path(out_root)
    would_run: set[str] = set()
    plan: list[PlanEntry] = []

    for node_id in order:
        node = graph.nodes[node_id]
        preview_cmd = _canonical_command(node, graph, out_root, staging=None)
        preview = " ".join(preview_cmd.argv)
        if any(p in would_run for p in graph.predecessors(node_id)):
            would_run.add(node_id)
            plan.append(PlanEntry(node_id, node.stage, "would-run", None, preview))
            continue
        try:
            digests = _node_digests(node, graph, out_root, fast_hash)
        except (OSError, StackflowError):
            would_run.add(node_id)
            plan.append(PlanEntry(node_id, node.stage, "would-run", None, preview))
            continue
        key = compute_cache_key(node.spec.image, preview_cmd.argv, node.params, digests)
        if cache.has(key):
            plan.append(
                PlanEntry(node_id, node.stage, "would-hit-cache", key.digest, preview)
            )
        else:
            would_run.add(node_id)
            plan.append(PlanEntry(node_id, node.stage, "would-run", key.digest, preview))

    node_order = {node_id: i for i, node_id in enumerate(graph.nodes)}
    plan.sort(key=lambda e: node_order[e.node_id])
    return plan
