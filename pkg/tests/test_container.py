"""Command rendering, runtime invocation goldens, and execution."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackflow.container import (
    CommandTemplate,
    ContainerSpec,
    DirPath,
    Mount,
    build_runtime_invocation,
    check_image,
    execute,
    render_command,
)
from stackflow.errors import (
    ExecutionTimeoutError,
    RuntimeUnavailableError,
    TemplateError,
)


class TestCommandTemplate:
    def test_placeholders_in_order(self):
        t = CommandTemplate("recon --input <stacks...> --output <out_volume> --n <n>")
        assert t.placeholders() == [("stacks", True), ("out_volume", False), ("n", False)]

    def test_uppercase_placeholder_rejected(self):
        with pytest.raises(TemplateError, match="<BadName>"):
            CommandTemplate("tool <BadName>")

    def test_inline_list_placeholder_rejected(self):
        with pytest.raises(TemplateError, match="whole token"):
            CommandTemplate("tool --x=<stacks...>")

    def test_literal_angle_text_is_fine(self):
        assert CommandTemplate("echo a < b > c").placeholders() == []


class TestRenderCommand:
    def test_spec_mapping_golden(self):
        # Frozen mapping for the documented fixture; mount coverage is
        # checked independently by scanning argv for host paths below.
        t = CommandTemplate("recon --input <stacks...> --output <out_volume>")
        cmd = render_command(
            t,
            {
                "stacks": [Path("/d/s1.nii.gz"), Path("/d/s2.nii.gz")],
                "out_volume": Path("/o/v.nii.gz"),
            },
            check_paths=False,
        )
        assert list(cmd.argv) == [
            "recon",
            "--input",
            "/data/in/0/s1.nii.gz",
            "/data/in/0/s2.nii.gz",
            "--output",
            "/data/out/0/v.nii.gz",
        ]
        assert set(cmd.mounts) == {
            Mount(Path("/d"), "/data/in/0", read_only=True),
            Mount(Path("/o"), "/data/out/0", read_only=False),
        }
        assert not any("/d/" in a or "/o/" in a for a in cmd.argv)

    def test_no_placeholders_identity(self):
        cmd = render_command(CommandTemplate("echo hi"), {})
        assert list(cmd.argv) == ["echo", "hi"]
        assert cmd.mounts == ()

    def test_unbound_placeholder_named(self):
        with pytest.raises(TemplateError, match="<x>"):
            render_command(CommandTemplate("<x>"), {})

    def test_extra_binding_warns(self, caplog):
        with caplog.at_level(logging.WARNING, logger="stackflow.container"):
            render_command(CommandTemplate("echo hi"), {"unused": "1"})
        assert any("unused" in r.message for r in caplog.records)

    def test_missing_input_path_rejected(self, tmp_path):
        t = CommandTemplate("tool <volume>")
        with pytest.raises(TemplateError, match="host input path missing"):
            render_command(t, {"volume": tmp_path / "nope.nii.gz"})

    def test_untranslated_render_keeps_host_paths(self, tmp_path):
        src = tmp_path / "in.nii.gz"
        src.write_bytes(b"x")
        t = CommandTemplate("tool <volume> --out <out_volume>")
        cmd = render_command(
            t, {"volume": src, "out_volume": tmp_path / "o.nii.gz"}, translate=False
        )
        assert list(cmd.argv) == ["tool", str(src), "--out", str(tmp_path / "o.nii.gz")]
        assert cmd.mounts == ()

    def test_directory_binding_mounts_itself(self, tmp_path):
        out_dir = tmp_path / "outputs"
        out_dir.mkdir()
        cmd = render_command(CommandTemplate("tool --out <out_dir>"), {"out_dir": DirPath(out_dir)})
        assert list(cmd.argv) == ["tool", "--out", "/data/out/0"]
        assert cmd.mounts == (Mount(out_dir, "/data/out/0", read_only=False),)

    def test_shared_host_directory_shares_one_mount(self):
        t = CommandTemplate("tool <stacks...> <mask>")
        cmd = render_command(
            t,
            {"stacks": [Path("/d/a.nii"), Path("/d/b.nii")], "mask": Path("/d/m.nii")},
            check_paths=False,
        )
        assert len([m for m in cmd.mounts if m.read_only]) == 1

    def test_rendering_is_deterministic(self, tmp_path):
        t = CommandTemplate("tool <stacks...> --out <out_volume> --n <n>")
        bindings = {
            "stacks": [Path("/a/x.nii"), Path("/b/y.nii")],
            "out_volume": Path("/c/out.nii"),
            "n": 3,
        }
        first = render_command(t, bindings, check_paths=False)
        second = render_command(t, bindings, check_paths=False)
        assert first == second


_host_dir = st.sampled_from(["/hosta", "/hostb/deep", "/hostc"])
_fname = st.text(alphabet="abcxyz", min_size=1, max_size=6)


class TestHostPathLeaks:
    @given(
        stacks=st.lists(
            st.tuples(_host_dir, _fname).map(lambda t: Path(f"{t[0]}/{t[1]}.nii.gz")),
            min_size=1,
            max_size=5,
        ),
        out_name=_fname,
        param=st.integers(min_value=0, max_value=99),
    )
    @settings(max_examples=150)
    def test_no_host_path_in_container_argv(self, stacks, out_name, param):
        t = CommandTemplate("tool <stacks...> --out <out_volume> --n <n>")
        cmd = render_command(
            t,
            {"stacks": stacks, "out_volume": Path(f"/hostout/{out_name}.nii.gz"), "n": param},
            check_paths=False,
        )
        for token in cmd.argv:
            assert not token.startswith("/host")
        for mount in cmd.mounts:
            ro_expected = not str(mount.host_path).startswith("/hostout")
            assert mount.read_only is ro_expected


DOCKER_SPEC = ContainerSpec(image="recon-tool:1.0", runtime="docker")


class TestRuntimeInvocationGoldens:
    def test_docker_golden(self):
        cmd = render_command(
            CommandTemplate("recon <volume>"), {"volume": Path("/d/x.nii.gz")},
            check_paths=False,
        )
        argv = build_runtime_invocation(DOCKER_SPEC, cmd)
        assert argv == [
            "docker", "run", "--rm",
            "-v", "/d:/data/in/0:ro",
            "recon-tool:1.0",
            "recon", "/data/in/0/x.nii.gz",
        ]

    def test_docker_with_gpu_env_and_output(self):
        spec = ContainerSpec(
            image="recon-tool:1.0", runtime="docker", gpu=True, env={"B": "2", "A": "1"}
        )
        cmd = render_command(
            CommandTemplate("recon <volume> --out <out_volume>"),
            {"volume": Path("/d/x.nii.gz"), "out_volume": Path("/o/y.nii.gz")},
            check_paths=False,
        )
        argv = build_runtime_invocation(spec, cmd)
        assert argv == [
            "docker", "run", "--rm",
            "--gpus", "all",
            "-v", "/d:/data/in/0:ro",
            "-v", "/o:/data/out/0",
            "-e", "A=1",
            "-e", "B=2",
            "recon-tool:1.0",
            "recon", "/data/in/0/x.nii.gz", "--out", "/data/out/0/y.nii.gz",
        ]

    def test_singularity_golden_gpu(self):
        spec = ContainerSpec(image="tool.sif", runtime="singularity", gpu=True)
        cmd = render_command(
            CommandTemplate("recon <volume>"), {"volume": Path("/d/x.nii.gz")},
            check_paths=False,
        )
        argv = build_runtime_invocation(spec, cmd)
        assert argv == [
            "singularity", "exec", "--nv",
            "--bind", "/d:/data/in/0:ro",
            "tool.sif",
            "recon", "/data/in/0/x.nii.gz",
        ]
        assert "--nv" in argv and "--bind" in argv

    def test_extra_args_inserted_before_image(self):
        spec = ContainerSpec(
            image="recon-tool:1.0", runtime="docker",
            extra_args=("--shm-size", "8g"),
        )
        cmd = render_command(CommandTemplate("recon"), {})
        argv = build_runtime_invocation(spec, cmd)
        assert argv == [
            "docker", "run", "--rm", "--shm-size", "8g", "recon-tool:1.0", "recon",
        ]

    def test_local_passthrough(self, tmp_path):
        src = tmp_path / "x.nii.gz"
        src.write_bytes(b"x")
        spec = ContainerSpec(runtime="local")
        cmd = render_command(CommandTemplate("recon <volume>"), {"volume": src}, translate=False)
        assert build_runtime_invocation(spec, cmd) == ["recon", str(src)]

    def test_byte_identical_across_calls(self):
        cmd = render_command(
            CommandTemplate("recon <volume>"), {"volume": Path("/d/x.nii.gz")},
            check_paths=False,
        )
        a = build_runtime_invocation(DOCKER_SPEC, cmd)
        b = build_runtime_invocation(DOCKER_SPEC, cmd)
        assert a == b

    def test_image_required_unless_local(self):
        with pytest.raises(ValueError, match="image required"):
            ContainerSpec(image="", runtime="docker")
        ContainerSpec(image="", runtime="local")  # fine


class TestExecute:
    def test_success(self, tmp_path):
        result = execute([sys.executable, "-c", "print('ok')"], tmp_path / "logs")
        assert result.exit_code == 0
        assert (tmp_path / "logs" / "stdout.log").read_text().strip() == "ok"
        assert (tmp_path / "logs" / "stderr.log").exists()
        assert (tmp_path / "logs" / "invocation.json").exists()

    def test_nonzero_exit_is_data(self, tmp_path):
        result = execute([sys.executable, "-c", "import sys; sys.exit(3)"], tmp_path / "logs")
        assert result.exit_code == 3

    def test_timeout_kills_and_keeps_partial_logs(self, tmp_path):
        with pytest.raises(ExecutionTimeoutError) as excinfo:
            execute(
                [sys.executable, "-c", "import time; time.sleep(30)"],
                tmp_path / "logs",
                timeout_s=1,
            )
        assert excinfo.value.stderr_path.exists()

    def test_spawn_failure(self, tmp_path):
        with pytest.raises(RuntimeUnavailableError, match="not found"):
            execute(["definitely-not-a-real-binary-xyz"], tmp_path / "logs")

    def test_duration_recorded(self, tmp_path):
        result = execute(
            [sys.executable, "-c", "import time; time.sleep(0.1)"], tmp_path / "logs"
        )
        assert result.duration_ms >= 80


class TestCheckImage:
    def test_local_always_available(self):
        assert check_image(ContainerSpec(runtime="local")) is True

    def test_missing_runtime_binary_reported_first(self, monkeypatch):
        monkeypatch.setattr("stackflow.container.shutil.which", lambda name: None)
        with pytest.raises(RuntimeUnavailableError, match="docker"):
            check_image(ContainerSpec(image="whatever:latest", runtime="docker"))

    def test_singularity_sif_existence(self, tmp_path, monkeypatch):
        monkeypatch.setattr(
            "stackflow.container.shutil.which", lambda name: "/usr/bin/singularity"
        )
        sif = tmp_path / "tool.sif"
        spec_missing = ContainerSpec(image=str(sif), runtime="singularity")
        assert check_image(spec_missing) is False
        sif.write_bytes(b"sif")
        assert check_image(spec_missing) is True

    def test_singularity_remote_ref_unchecked(self, monkeypatch):
        monkeypatch.setattr(
            "stackflow.container.shutil.which", lambda name: "/usr/bin/singularity"
        )
        assert check_image(ContainerSpec(image="docker://x/y:z", runtime="singularity")) is True
