"""Shared fixtures: fixture BIDS datasets and stub pipeline configs."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    """Print one PASS/FAIL line per acceptance criterion."""
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker and report.when == "call":
        n, description = marker.args
        status = "PASS" if report.passed else "FAIL"
        print(f"[acceptance] criterion {n} {status}: {description}", file=sys.stderr)

from stackflow.config import GroupSelection, compose, interpolate, validate_config
from stackflow.pipeline import packaged_config_root, registry

# Selections that wire every stage to its deterministic local stub.
STUB_SETTINGS = [
    "preprocessing=stub",
    "reconstruction=stub",
    "segmentation=stub",
    "surface=stub",
    "runtime=local",
]

STUB_SELECTIONS = [
    GroupSelection("preprocessing", "stub"),
    GroupSelection("reconstruction", "stub"),
    GroupSelection("segmentation", "stub"),
    GroupSelection("surface", "stub"),
]

# (subject, session) -> number of T2w stacks; the acceptance layout:
# 3 subjects, subject 01 with 2 sessions, 2-3 stacks each.
FIXTURE_LAYOUT = {
    ("01", "01"): 3,
    ("01", "02"): 2,
    ("02", None): 2,
    ("03", None): 3,
}


def write_stack(root: Path, subject: str, session: str | None, run: int, payload: bytes | None = None) -> Path:
    anat = root / f"sub-{subject}"
    if session is not None:
        anat = anat / f"ses-{session}"
    anat = anat / "anat"
    anat.mkdir(parents=True, exist_ok=True)
    name = f"sub-{subject}"
    if session is not None:
        name += f"_ses-{session}"
    name += f"_run-{run}_T2w.nii.gz"
    path = anat / name
    if payload is None:
        payload = f"stack sub-{subject} ses-{session} run-{run}\n".encode() * 4
    path.write_bytes(payload)
    return path


def make_dataset(root: Path, layout: dict[tuple[str, str | None], int] | None = None) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    (root / "dataset_description.json").write_text(
        json.dumps({"Name": "fixture dataset", "BIDSVersion": "1.8.0"}) + "\n"
    )
    for (subject, session), n_stacks in (layout or FIXTURE_LAYOUT).items():
        for run in range(1, n_stacks + 1):
            write_stack(root, subject, session, run)
    return root


@pytest.fixture
def bids_root(tmp_path: Path) -> Path:
    """The full acceptance-layout dataset."""
    return make_dataset(tmp_path / "bids")


@pytest.fixture
def small_bids_root(tmp_path: Path) -> Path:
    """A two-group dataset for faster engine tests."""
    return make_dataset(
        tmp_path / "bids",
        {("01", None): 2, ("02", None): 2},
    )


def stub_config(nproc: int = 1, stages: list[str] | None = None, tweak=None):
    """Composed + validated all-stub pipeline config (local runtime).

    ``tweak`` may mutate the composed tree before validation (e.g. to set
    a per-stage timeout).
    """
    selections = [s for s in STUB_SELECTIONS if stages is None or s.group in stages]
    tree = compose(packaged_config_root(), "base", selections)
    if stages is not None:
        for stage in ("preprocessing", "reconstruction", "segmentation", "surface"):
            if stage not in stages:
                tree.pop(stage, None)
    tree["runtime"] = "local"
    tree["engine"]["nproc"] = nproc
    if tweak is not None:
        tweak(tree)
    tree = interpolate(tree)
    return tree, validate_config(tree, registry=registry())


def run_stub_pipeline(
    bids_root: Path,
    out_root: Path,
    cache_root: Path,
    nproc: int = 1,
    stages: list[str] | None = None,
    tweak=None,
):
    """Index, group, build, and execute the all-stub pipeline."""
    from stackflow.bids import group_stacks, index_dataset
    from stackflow.engine import ExecuteOptions, build_graph, execute_graph
    from stackflow.stubs import stub_toolchain

    dataset = index_dataset(bids_root)
    groups, group_warnings = group_stacks(dataset)
    tree, cfg = stub_config(nproc=nproc, stages=stages, tweak=tweak)
    graph = build_graph(cfg, groups, dataset_root=dataset.root)
    stub_dir = out_root / "stubs"
    stub_toolchain(stub_dir)
    options = ExecuteOptions(
        out_root=out_root,
        cache_root=cache_root,
        parallelism=cfg.parallelism,
        path_prepend=stub_dir,
        pipeline_name=cfg.pipeline_name,
        dataset=dataset,
        resolved_config=tree,
        dataset_warnings=tuple(dataset.warnings) + tuple(group_warnings),
    )
    report = execute_graph(graph, options)
    return report, graph
