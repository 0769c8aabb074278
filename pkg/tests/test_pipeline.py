"""Implementation catalog, stage resolution, and the stub toolchain."""

from __future__ import annotations

import hashlib
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import pytest

from conftest import stub_config
from stackflow.bids import StackGroup, group_stacks, index_dataset
from stackflow.config import StageConfig
from stackflow.container import CommandTemplate, ContainerSpec, render_command
from stackflow.errors import GraphError, TemplateError
from stackflow.graph import FileInput
from stackflow.pipeline import (
    contract_placeholders,
    registry,
    resolve_stage,
)
from stackflow.stubs import STUB_STAGES, stub_toolchain


class TestRegistry:
    def test_reconstruction_catalog(self):
        assert {i.id for i in registry()["reconstruction"]} == {
            "nesvor", "svrtk", "niftymic", "stub",
        }

    def test_segmentation_catalog(self):
        assert {i.id for i in registry()["segmentation"]} == {"bounti", "dhcp", "stub"}

    def test_preprocessing_and_surface_catalog(self):
        assert {i.id for i in registry()["preprocessing"]} == {"utils", "stub"}
        assert {i.id for i in registry()["surface"]} == {"surface_proc", "stub"}

    def test_non_stub_runtime_defaults_to_docker(self):
        for impls in registry().values():
            for impl in impls:
                if impl.id == "stub":
                    assert impl.container.runtime == "local"
                else:
                    assert impl.container.runtime == "docker"
                    assert impl.container.image

    def test_every_entry_has_a_template(self):
        for impls in registry().values():
            for impl in impls:
                assert impl.template.template.strip()

    def test_placeholder_closure(self):
        # Statically checkable contract: every placeholder is satisfied by
        # the stage's I/O contract or the implementation's own params.
        for stage, impls in registry().items():
            allowed_base = contract_placeholders(stage)
            for impl in impls:
                allowed = allowed_base | set(impl.default_params)
                for name, _ in impl.template.placeholders():
                    assert name in allowed, f"{stage}/{impl.id}: <{name}>"

    def test_registry_cached_per_root(self):
        assert registry() is registry()


def _group(tmp_path: Path, n_stacks: int = 3) -> tuple[StackGroup, Path]:
    from conftest import make_dataset

    root = make_dataset(tmp_path / "bids", {("07", None): n_stacks})
    groups, _ = group_stacks(index_dataset(root))
    return groups[0], root


class TestResolveStage:
    def test_preprocessing_references_every_stack(self, tmp_path):
        group, root = _group(tmp_path, n_stacks=3)
        _, cfg = stub_config()
        upstream = {
            "stacks": tuple(FileInput(str(root / f.relative_path)) for f in group.stacks)
        }
        node = resolve_stage(
            cfg.stage("preprocessing"), group, upstream, pipeline_name="p"
        )
        stack_binding = next(b for b in node.bindings if b.name == "stacks")
        cmd = render_command(
            node.template,
            {
                "stacks": [Path(r.path) for r in stack_binding.refs],
                "out_dir": tmp_path / "out",
                "params": [],
            },
            check_paths=False,
        )
        stack_args = [a for a in cmd.argv if a.endswith(".nii.gz")]
        assert len(stack_args) == len(group.stacks) == 3

    def test_node_id_with_and_without_session(self, tmp_path):
        group, root = _group(tmp_path)
        _, cfg = stub_config()
        upstream = {"stacks": (FileInput(str(root / group.stacks[0].relative_path)),)}
        node = resolve_stage(cfg.stage("preprocessing"), group, upstream, pipeline_name="p")
        assert node.id == "07_preprocessing"
        with_session = StackGroup(subject="07", session="02", stacks=group.stacks)
        node = resolve_stage(
            cfg.stage("preprocessing"), with_session, upstream, pipeline_name="p"
        )
        assert node.id == "07_02_preprocessing"

    def test_gpu_required_propagates(self, tmp_path):
        group, root = _group(tmp_path)
        impl = next(i for i in registry()["reconstruction"] if i.id == "nesvor")
        stage_cfg = StageConfig(
            name="reconstruction",
            implementation="nesvor",
            container=impl.container,
            template=impl.template,
            params=dict(impl.default_params),
        )
        upstream = {"stacks": (FileInput(str(root / group.stacks[0].relative_path)),)}
        node = resolve_stage(stage_cfg, group, upstream, pipeline_name="p")
        assert node.spec.gpu is True

    def test_input_kind_mismatch(self, tmp_path):
        group, root = _group(tmp_path)
        _, cfg = stub_config()
        upstream = {"stacks": (FileInput(str(root / group.stacks[0].relative_path)),)}
        with pytest.raises(GraphError, match="input-kind mismatch"):
            resolve_stage(cfg.stage("surface"), group, upstream, pipeline_name="p")

    def test_surface_binds_volume_when_template_asks(self, tmp_path):
        group, _ = _group(tmp_path)
        stage_cfg = StageConfig(
            name="surface",
            implementation="surface_proc",
            container=ContainerSpec(image="img", runtime="docker"),
            template=CommandTemplate(
                "extract --labels <labels> --volume <volume> --out <out_surfaces_dir>"
            ),
        )
        upstream = {
            "labelmap": (FileInput("/x/labels.nii.gz"),),
            "volume": (FileInput("/x/vol.nii.gz"),),
        }
        node = resolve_stage(stage_cfg, group, upstream, pipeline_name="p")
        names = {b.name for b in node.bindings if b.role == "input"}
        assert names == {"labels", "volume"}
        assert len(node.upstream_ids) == 0  # plain files, no upstream nodes

    def test_unsatisfiable_placeholder(self, tmp_path):
        group, root = _group(tmp_path)
        stage_cfg = StageConfig(
            name="reconstruction",
            implementation="x",
            container=ContainerSpec(image="img"),
            template=CommandTemplate("tool <stacks...> <mystery> <out_volume>"),
        )
        upstream = {"stacks": (FileInput(str(root / group.stacks[0].relative_path)),)}
        with pytest.raises(TemplateError, match="<mystery>"):
            resolve_stage(stage_cfg, group, upstream, pipeline_name="p")

    def test_params_sorted_and_canonical(self, tmp_path):
        group, root = _group(tmp_path)
        stage_cfg = StageConfig(
            name="reconstruction",
            implementation="x",
            container=ContainerSpec(image="img"),
            template=CommandTemplate("tool <stacks...> <out_volume>"),
            params={"zeta": True, "alpha": 3},
        )
        upstream = {"stacks": (FileInput(str(root / group.stacks[0].relative_path)),)}
        node = resolve_stage(stage_cfg, group, upstream, pipeline_name="p")
        assert node.params == (("alpha", "3"), ("zeta", "true"))


def _run_stub(script: Path, *args: str, env: dict | None = None):
    full_env = os.environ.copy()
    full_env.update(env or {})
    return subprocess.run(
        [sys.executable, str(script), *args],
        capture_output=True,
        text=True,
        env=full_env,
    )


def _expected_transcript(paths: list[Path], params: list[tuple[str, str]]) -> str:
    # Independent re-derivation of the documented transcript format.
    lines = [
        f"sha256:{hashlib.sha256(p.read_bytes()).hexdigest()} {p.name}" for p in paths
    ]
    lines.append("params:" + ",".join(f"{k}={v}" for k, v in sorted(params)))
    return "".join(line + "\n" for line in lines)


class TestStubToolchain:
    def test_installs_one_executable_per_stage(self, tmp_path):
        installed = stub_toolchain(tmp_path / "stubs")
        assert set(installed) == set(STUB_STAGES)
        for path in installed.values():
            assert os.access(path, os.X_OK)

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError):
            stub_toolchain(blocker / "stubs")

    def test_reconstruction_transcript_matches_oracle(self, tmp_path):
        stubs = stub_toolchain(tmp_path / "stubs")
        a = tmp_path / "a.nii.gz"
        b = tmp_path / "b.nii.gz"
        a.write_bytes(b"stack A")
        b.write_bytes(b"stack B")
        out = tmp_path / "vol.nii.gz"
        proc = _run_stub(
            stubs["reconstruction"],
            "--inputs", str(a), str(b), "--out", str(out), "--params", "n=2", "m=x",
        )
        assert proc.returncode == 0, proc.stderr
        assert out.read_text() == _expected_transcript([a, b], [("m", "x"), ("n", "2")])

    def test_bit_reproducible(self, tmp_path):
        stubs = stub_toolchain(tmp_path / "stubs")
        a = tmp_path / "a.nii.gz"
        a.write_bytes(b"stack A")
        out1, out2 = tmp_path / "v1", tmp_path / "v2"
        for out in (out1, out2):
            _run_stub(stubs["reconstruction"], "--inputs", str(a), "--out", str(out))
        assert out1.read_bytes() == out2.read_bytes()

    def test_preprocessing_writes_per_input_files(self, tmp_path):
        stubs = stub_toolchain(tmp_path / "stubs")
        a = tmp_path / "a.nii.gz"
        b = tmp_path / "b.nii.gz"
        a.write_bytes(b"A")
        b.write_bytes(b"B")
        out_dir = tmp_path / "preproc"
        proc = _run_stub(
            stubs["preprocessing"], "--inputs", str(a), str(b), "--out", str(out_dir)
        )
        assert proc.returncode == 0
        assert sorted(p.name for p in out_dir.iterdir()) == ["a.nii.gz", "b.nii.gz"]
        assert (out_dir / "a.nii.gz").read_text() == _expected_transcript([a], [])

    def test_surface_writes_hemisphere_files(self, tmp_path):
        stubs = stub_toolchain(tmp_path / "stubs")
        labels = tmp_path / "labels.nii.gz"
        labels.write_bytes(b"L")
        out_dir = tmp_path / "surf"
        _run_stub(stubs["surface"], "--inputs", str(labels), "--out", str(out_dir))
        names = sorted(p.name for p in out_dir.iterdir())
        assert names == ["hemi-left.surf", "hemi-right.surf"]
        assert "hemi:left" in (out_dir / "hemi-left.surf").read_text()

    def test_directory_inputs_expand_sorted(self, tmp_path):
        stubs = stub_toolchain(tmp_path / "stubs")
        src = tmp_path / "stage-in"
        src.mkdir()
        (src / "b.nii").write_bytes(b"B")
        (src / "a.nii").write_bytes(b"A")
        out = tmp_path / "v.nii"
        _run_stub(stubs["reconstruction"], "--inputs", str(src), "--out", str(out))
        assert out.read_text() == _expected_transcript([src / "a.nii", src / "b.nii"], [])

    def test_fail_hook_writes_nothing(self, tmp_path):
        stubs = stub_toolchain(tmp_path / "stubs")
        a = tmp_path / "a.nii.gz"
        a.write_bytes(b"A")
        out = tmp_path / "v.nii.gz"
        proc = _run_stub(
            stubs["reconstruction"],
            "--inputs", str(a), "--out", str(out),
            env={"STUB_FAIL": "1"},
        )
        assert proc.returncode == 1
        assert not out.exists()

    def test_fail_hook_scoped_by_stage_and_match(self, tmp_path):
        stubs = stub_toolchain(tmp_path / "stubs")
        a = tmp_path / "sub-03_run-1.nii.gz"
        a.write_bytes(b"A")
        out = tmp_path / "v.nii.gz"
        env = {"STUB_FAIL": "1", "STUB_FAIL_STAGE": "reconstruction", "STUB_FAIL_MATCH": "sub-03"}
        assert _run_stub(stubs["segmentation"], "--inputs", str(a), "--out", str(out), env=env).returncode == 0
        (tmp_path / "v.nii.gz").unlink()
        env["STUB_FAIL_MATCH"] = "sub-99"
        assert _run_stub(stubs["reconstruction"], "--inputs", str(a), "--out", str(out), env=env).returncode == 0
        env["STUB_FAIL_MATCH"] = "sub-03"
        assert _run_stub(stubs["reconstruction"], "--inputs", str(a), "--out", str(out), env=env).returncode == 1

    def test_sleep_and_stamp_hooks(self, tmp_path):
        stubs = stub_toolchain(tmp_path / "stubs")
        a = tmp_path / "a.nii.gz"
        a.write_bytes(b"A")
        stamp_dir = tmp_path / "stamps"
        t0 = time.time()
        _run_stub(
            stubs["reconstruction"],
            "--inputs", str(a), "--out", str(tmp_path / "v"),
            env={"STUB_SLEEP_MS": "200", "STUB_STAMP": str(stamp_dir)},
        )
        assert time.time() - t0 >= 0.2
        stamps = list(stamp_dir.glob("reconstruction-*.json"))
        assert len(stamps) == 1
        record = json.loads(stamps[0].read_text())
        assert record["end"] - record["start"] >= 0.2

    def test_count_hook_appends_per_invocation(self, tmp_path):
        stubs = stub_toolchain(tmp_path / "stubs")
        a = tmp_path / "a.nii.gz"
        a.write_bytes(b"A")
        counter = tmp_path / "count"
        env = {"STUB_COUNT": str(counter)}
        _run_stub(stubs["reconstruction"], "--inputs", str(a), "--out", str(tmp_path / "v1"), env=env)
        _run_stub(stubs["segmentation"], "--inputs", str(a), "--out", str(tmp_path / "v2"), env=env)
        assert counter.read_text().splitlines() == ["reconstruction", "segmentation"]
