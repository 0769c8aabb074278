"""Execution reports and per-derivative provenance sidecars.

Reports are canonical JSON: stable key order, UTF-8, newline-terminated,
schema-versioned. Timestamps and durations live in dedicated fields so
determinism checks can exclude them.
"""

from __future__ import annotations

import hashlib
import json
import secrets
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import __version__
from .bids import BidsDataset, DatasetWarning
from .cache import CACHE_SCHEMA_VERSION

REPORT_SCHEMA_VERSION = "1"

# Fields that legitimately vary between otherwise identical runs; tests
# scrub these before comparing reports byte-for-byte.
VOLATILE_FIELDS = frozenset({"run_id", "created_at", "duration_ms", "invocation_ref"})


def new_run_id() -> str:
    """UTC timestamp plus a short random suffix, e.g. 20240101T120000Z-3fa2b1."""
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    return f"{stamp}-{secrets.token_hex(3)}"


def rfc3339(epoch_s: float | None = None) -> str:
    t = datetime.fromtimestamp(time.time() if epoch_s is None else epoch_s, timezone.utc)
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class NodeRecord:
    """Outcome of one graph node in one run."""

    id: str
    stage: str
    implementation: str
    status: str
    cache_key: str | None = None
    duration_ms: int = 0
    image: str = ""
    invocation_ref: str | None = None
    error: str | None = None
    outputs: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "stage": self.stage,
            "implementation": self.implementation,
            "status": self.status,
            "cache_key": self.cache_key,
            "duration_ms": self.duration_ms,
            "image": self.image,
            "invocation_ref": self.invocation_ref,
            "error": self.error,
            "outputs": list(self.outputs),
        }


@dataclass(frozen=True)
class ExecutionReport:
    """Per-run record: every node's status, cache key, and timing."""

    run_id: str
    created_at: str
    pipeline_name: str
    resolved_config_digest: str
    dataset: dict
    nodes: tuple[NodeRecord, ...]
    fast_hash: bool = False
    warnings: tuple[DatasetWarning, ...] = ()

    @property
    def summary(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for node in self.nodes:
            counts[node.status] = counts.get(node.status, 0) + 1
        return dict(sorted(counts.items()))

    @property
    def ok(self) -> bool:
        return all(n.status in ("succeeded", "cached") for n in self.nodes)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA_VERSION,
            "cache_schema": CACHE_SCHEMA_VERSION,
            "engine_version": __version__,
            "run_id": self.run_id,
            "created_at": self.created_at,
            "pipeline_name": self.pipeline_name,
            "resolved_config_digest": self.resolved_config_digest,
            "dataset": self.dataset,
            # Each (subject, session) pair is reconstructed on its own;
            # sessions of one subject never share a chain.
            "session_handling": "independent",
            "fast_hash": self.fast_hash,
            "summary": self.summary,
            "nodes": [n.to_dict() for n in self.nodes],
            "warnings": [
                {"code": w.code, "path": w.path, "message": w.message} for w in self.warnings
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def scrub_volatile(obj):
    """Drop volatile fields recursively, for determinism comparisons."""
    if isinstance(obj, dict):
        return {k: scrub_volatile(v) for k, v in obj.items() if k not in VOLATILE_FIELDS}
    if isinstance(obj, list):
        return [scrub_volatile(v) for v in obj]
    return obj


def dataset_summary(dataset: BidsDataset | None) -> dict:
    if dataset is None:
        return {"root": None, "file_count": 0, "subject_count": 0, "index_digest": None}
    from .bids import serialize_dataset

    digest = hashlib.sha256(serialize_dataset(dataset).encode("utf-8")).hexdigest()
    return {
        "root": str(dataset.root),
        "file_count": len(dataset.files),
        "subject_count": len(dataset.subjects),
        "index_digest": digest,
    }


def config_digest(config_node) -> str:
    text = yaml.safe_dump(config_node, sort_keys=True, default_flow_style=False)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def report_dir(out_root: str | Path, run_id: str) -> Path:
    return Path(out_root) / "reports" / run_id


def write_report(report: ExecutionReport, out_root: str | Path) -> Path:
    directory = report_dir(out_root, report.run_id)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "report.json"
    path.write_text(report.to_json(), encoding="utf-8")
    return path


def write_resolved_config(config_node, out_root: str | Path, run_id: str) -> Path:
    directory = report_dir(out_root, run_id)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "resolved_config.yaml"
    path.write_text(
        yaml.safe_dump(config_node, sort_keys=True, default_flow_style=False),
        encoding="utf-8",
    )
    return path


def sidecar_path(artifact_path: str | Path) -> Path:
    """The provenance sidecar sits next to the artifact, imaging extension
    replaced by ``.json`` (``x_T2w.nii.gz`` -> ``x_T2w.json``)."""
    artifact_path = Path(artifact_path)
    name = artifact_path.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            name = name[: -len(ext)]
            break
    return artifact_path.with_name(name + ".json")


def sidecar_payload(
    *,
    sources: list[str],
    pipeline_name: str,
    stage: str,
    implementation: str,
    image: str,
    command: str,
    cache_key: str,
) -> dict:
    return {
        "sources": sources,
        "generated_by": {
            "pipeline": pipeline_name,
            "version": __version__,
            "stage": stage,
            "implementation": implementation,
            "container_image": image,
            "command": command,
        },
        "cache_key": cache_key,
        "materialized_from_cache": False,
    }


def write_sidecar(artifact_path: str | Path, payload: dict, *, from_cache: bool) -> Path:
    path = sidecar_path(artifact_path)
    body = dict(payload)
    body["materialized_from_cache"] = from_cache
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(body, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    return path
