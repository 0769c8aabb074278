"""Per-run workflow graph: node specs, acyclicity, and DOT export.

Node ids are deterministic (``<subject>[_<session>]_<stage>``) and every
node input is either a concrete dataset file or a declared output of
exactly one upstream node, so identical inputs always build identical
graphs.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from enum import Enum

from .container import CommandTemplate, ContainerSpec
from .errors import CycleError, GraphError


@dataclass(frozen=True)
class FileInput:
    """A dataset file consumed directly (absolute host path)."""

    path: str


@dataclass(frozen=True)
class UpstreamOutput:
    """A declared output of an upstream node, by id and output index."""

    node_id: str
    index: int


ArtifactRef = FileInput | UpstreamOutput


@dataclass(frozen=True)
class OutputDecl:
    """One declared node output, as a path relative to the output root."""

    relpath: str
    directory: bool = False


@dataclass(frozen=True)
class NodeBinding:
    """Wiring of one template placeholder: inputs, an output, or a param."""

    name: str
    role: str  # input | output | param
    refs: tuple[ArtifactRef, ...] = ()
    output_index: int = -1
    value: str = ""
    values: tuple[str, ...] = ()  # list-valued params (the <params...> binding)
    is_list: bool = False


class NodeStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    CACHED = "cached"
    SUCCEEDED = "succeeded"
    FAILED = "failed"
    BLOCKED = "blocked"


@dataclass(frozen=True)
class NodeSpec:
    """One concrete containerized step with declared inputs and outputs."""

    id: str
    stage: str
    implementation: str
    subject: str
    session: str | None
    spec: ContainerSpec
    template: CommandTemplate
    bindings: tuple[NodeBinding, ...]
    outputs: tuple[OutputDecl, ...]
    params: tuple[tuple[str, str], ...] = ()
    timeout_s: int = 0

    @property
    def inputs(self) -> tuple[ArtifactRef, ...]:
        """All input artifact references, flattened in binding order."""
        refs: list[ArtifactRef] = []
        for b in self.bindings:
            if b.role == "input":
                refs.extend(b.refs)
        return tuple(refs)

    @property
    def upstream_ids(self) -> tuple[str, ...]:
        seen: list[str] = []
        for ref in self.inputs:
            if isinstance(ref, UpstreamOutput) and ref.node_id not in seen:
                seen.append(ref.node_id)
        return tuple(seen)


@dataclass
class WorkflowGraph:
    """Nodes keyed by id plus (producer, consumer) edges."""

    nodes: dict[str, NodeSpec] = field(default_factory=dict)
    edges: list[tuple[str, str]] = field(default_factory=list)

    def add(self, node: NodeSpec) -> None:
        if node.id in self.nodes:
            raise GraphError(f"duplicate node id {node.id!r}")
        for producer in node.upstream_ids:
            if producer not in self.nodes:
                raise GraphError(f"node {node.id!r} references unknown upstream {producer!r}")
            self.edges.append((producer, node.id))
        self.nodes[node.id] = node

    def predecessors(self, node_id: str) -> list[str]:
        return [p for p, c in self.edges if c == node_id]

    def successors(self, node_id: str) -> list[str]:
        return [c for p, c in self.edges if p == node_id]

    def transitive_successors(self, node_id: str) -> set[str]:
        found: set[str] = set()
        frontier = [node_id]
        while frontier:
            current = frontier.pop()
            for child in self.successors(current):
                if child not in found:
                    found.add(child)
                    frontier.append(child)
        return found

    def to_dict(self) -> dict:
        """Serializable form, used for determinism comparisons."""
        return {
            "nodes": [
                {
                    "id": n.id,
                    "stage": n.stage,
                    "implementation": n.implementation,
                    "subject": n.subject,
                    "session": n.session,
                    "image": n.spec.image,
                    "runtime": n.spec.runtime,
                    "gpu": n.spec.gpu,
                    "template": n.template.template,
                    "params": [list(p) for p in n.params],
                    "inputs": [
                        {"path": r.path}
                        if isinstance(r, FileInput)
                        else {"node": r.node_id, "index": r.index}
                        for r in n.inputs
                    ],
                    "outputs": [
                        {"relpath": o.relpath, "directory": o.directory} for o in n.outputs
                    ],
                }
                for n in self.nodes.values()
            ],
            "edges": [list(e) for e in sorted(set(self.edges))],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def validate_acyclic(graph: WorkflowGraph) -> list[str]:
    """Return a deterministic topological order (ties broken by node id).

    Raises
    ------
    CycleError
        Carrying one offending cycle path, first node repeated last.
    """
    indegree = {node_id: 0 for node_id in graph.nodes}
    edges = sorted(set(graph.edges))
    for producer, consumer in edges:
        if producer not in graph.nodes or consumer not in graph.nodes:
            raise GraphError(f"edge ({producer!r}, {consumer!r}) references unknown node")
        indegree[consumer] += 1

    ready = [node_id for node_id, deg in sorted(indegree.items()) if deg == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        node_id = heapq.heappop(ready)
        order.append(node_id)
        for producer, consumer in edges:
            if producer != node_id:
                continue
            indegree[consumer] -= 1
            if indegree[consumer] == 0:
                heapq.heappush(ready, consumer)

    if len(order) != len(graph.nodes):
        remaining = set(graph.nodes) - set(order)
        raise CycleError(_find_cycle(edges, remaining))
    return order


def _find_cycle(edges: list[tuple[str, str]], candidates: set[str]) -> list[str]:
    adjacency: dict[str, list[str]] = {}
    for producer, consumer in edges:
        if producer in candidates and consumer in candidates:
            adjacency.setdefault(producer, []).append(consumer)

    start = sorted(candidates)[0]
    path: list[str] = []
    seen: set[str] = set()

    def visit(node: str) -> list[str] | None:
        if node in path:
            return path[path.index(node):] + [node]
        if node in seen:
            return None
        seen.add(node)
        path.append(node)
        for nxt in sorted(adjacency.get(node, [])):
            cycle = visit(nxt)
            if cycle:
                return cycle
        path.pop()
        return None

    for node in sorted(candidates):
        cycle = visit(node)
        if cycle:
            return cycle
    return [start, start]  # unreachable for a real cycle set


def to_dot(graph: WorkflowGraph) -> str:
    """Deterministic DOT rendering: nodes labeled ``<id>\\n<stage>:<impl>``."""
    lines = ["digraph workflow {"]
    for node_id in sorted(graph.nodes):
        node = graph.nodes[node_id]
        lines.append(
            f'  "{node_id}" [label="{node_id}\\n{node.stage}:{node.implementation}"];'
        )
    for producer, consumer in sorted(set(graph.edges)):
        lines.append(f'  "{producer}" -> "{consumer}";')
    lines.append("}")
    return "\n".join(lines) + "\n"
