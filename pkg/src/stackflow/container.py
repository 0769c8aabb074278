"""Render command templates into concrete container invocations and run them.

Templates contain literal tokens and placeholders: ``<name>`` for a single
value, ``<name...>`` for a space-joined list. Placeholders whose names
start with ``out`` receive output paths (mounted read-write); all other
path bindings are inputs (mounted read-only). For the docker and
singularity runtimes, host paths are rewritten to stable container paths
under ``/data/in/<k>`` and ``/data/out/<k>``; the local runtime executes
argv directly with host paths untranslated.
"""

from __future__ import annotations

import json
import logging
import re
import shutil
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    ExecutionTimeoutError,
    RuntimeUnavailableError,
    TemplateError,
)

logger = logging.getLogger(__name__)

_PLACEHOLDER_RE = re.compile(r"<([a-z_]+)(\.\.\.)?>")
_ANGLE_TOKEN_RE = re.compile(r"<([^<>\s]*)>")


@dataclass(frozen=True)
class ContainerSpec:
    """How one step's container is launched: image, runtime, GPU, env."""

    image: str = ""
    runtime: str = "docker"
    gpu: bool = False
    env: dict[str, str] = field(default_factory=dict)
    extra_args: tuple[str, ...] = ()

    def __post_init__(self):
        if self.runtime not in ("docker", "singularity", "local"):
            raise ValueError(f"unknown runtime {self.runtime!r}")
        if self.runtime != "local" and not self.image:
            raise ValueError(f"image required for runtime {self.runtime!r}")


class DirPath:
    """Marks a binding as a directory artifact: the path itself is mounted
    (and translated), rather than its parent."""

    __slots__ = ("path",)

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def __repr__(self):
        return f"DirPath({str(self.path)!r})"

    def __eq__(self, other):
        return isinstance(other, DirPath) and self.path == other.path


@dataclass(frozen=True)
class CommandTemplate:
    """A placeholder command string, tokenized on whitespace.

    A list placeholder must be a whole token; single placeholders may be
    embedded inside a token (``--out=<out_volume>``).
    """

    template: str

    def __post_init__(self):
        for inner in _ANGLE_TOKEN_RE.findall(self.template):
            if not re.fullmatch(r"[a-z_]+(\.\.\.)?", inner):
                raise TemplateError(
                    f"bad placeholder <{inner}>: names must match [a-z_]+"
                )
        for token in self.tokens():
            for name, dots in _PLACEHOLDER_RE.findall(token):
                if dots and token != f"<{name}...>":
                    raise TemplateError(
                        f"list placeholder <{name}...> must be a whole token, got {token!r}"
                    )

    def tokens(self) -> list[str]:
        return self.template.split()

    def placeholders(self) -> list[tuple[str, bool]]:
        """Placeholder (name, is_list) pairs in textual order, deduplicated."""
        seen: dict[str, bool] = {}
        for name, dots in _PLACEHOLDER_RE.findall(self.template):
            seen.setdefault(name, bool(dots))
        return list(seen.items())


@dataclass(frozen=True)
class Mount:
    host_path: Path
    container_path: str
    read_only: bool


@dataclass(frozen=True)
class ResolvedCommand:
    """Container-side argv plus the mounts needed to satisfy it."""

    argv: tuple[str, ...]
    mounts: tuple[Mount, ...]
    workdir: str = "/"


def _is_output(name: str) -> bool:
    return name == "out" or name.startswith("out_")


class _MountTable:
    """Assigns one stable container directory per distinct host directory."""

    def __init__(self):
        self._dirs: dict[tuple[str, bool], str] = {}
        self._counts = {"in": 0, "out": 0}

    def translate(self, host: Path, *, output: bool, directory: bool) -> str:
        host = host.absolute()
        host_dir = host if directory else host.parent
        role = "out" if output else "in"
        key = (str(host_dir), output)
        if key not in self._dirs:
            self._dirs[key] = f"/data/{role}/{self._counts[role]}"
            self._counts[role] += 1
        base = self._dirs[key]
        return base if directory else f"{base}/{host.name}"

    def mounts(self) -> tuple[Mount, ...]:
        return tuple(
            Mount(Path(host_dir), container, read_only=not output)
            for (host_dir, output), container in self._dirs.items()
        )


def render_command(
    template: CommandTemplate,
    bindings: dict[str, object],
    *,
    translate: bool = True,
    check_paths: bool = True,
) -> ResolvedCommand:
    """Substitute bindings into the template and derive the mount list.

    Binding values may be strings (literal), ``Path`` (file), ``DirPath``
    (directory), or lists of paths/strings. With ``translate=False`` host
    paths are left as-is and no mounts are produced (the local runtime).
    ``check_paths=False`` skips host existence checks (dry-run previews).
    """
    names = dict(template.placeholders())
    for name in names:
        if name not in bindings:
            raise TemplateError(f"unbound placeholder <{name}> in {template.template!r}")
    for name in bindings:
        if name not in names:
            logger.warning("binding %r does not match any placeholder; ignored", name)

    table = _MountTable()

    def check_host(path: Path, *, output: bool) -> None:
        if not check_paths:
            return
        if output:
            if not path.parent.is_dir():
                raise TemplateError(f"parent directory missing for output path {path}")
        elif not path.exists():
            raise TemplateError(f"host input path missing: {path}")

    def substitute_single(name: str, value: object) -> str:
        if isinstance(value, DirPath):
            path = value.path.absolute()
            check_host(path, output=_is_output(name))
            if translate:
                return table.translate(path, output=_is_output(name), directory=True)
            return str(path)
        if isinstance(value, Path):
            path = value.absolute()
            check_host(path, output=_is_output(name))
            if translate:
                return table.translate(path, output=_is_output(name), directory=False)
            return str(path)
        if isinstance(value, (str, int, float, bool)):
            if isinstance(value, bool):
                return "true" if value else "false"
            return str(value)
        raise TemplateError(f"unsupported binding type for <{name}>: {type(value).__name__}")

    def expand_list(name: str, value: object) -> list[str]:
        if not isinstance(value, (list, tuple)):
            raise TemplateError(f"placeholder <{name}...> needs a list binding")
        return [substitute_single(name, item) for item in value]

    argv: list[str] = []
    for token in template.tokens():
        match = _PLACEHOLDER_RE.fullmatch(token)
        if match and match.group(2):
            argv.extend(expand_list(match.group(1), bindings[match.group(1)]))
            continue

        def repl(m: re.Match) -> str:
            return substitute_single(m.group(1), bindings[m.group(1)])

        argv.append(_PLACEHOLDER_RE.sub(repl, token))

    mounts = table.mounts()
    out_dirs = [m.container_path for m in mounts if not m.read_only]
    return ResolvedCommand(
        argv=tuple(argv),
        mounts=mounts,
        workdir=out_dirs[0] if out_dirs else "/",
    )


def build_runtime_invocation(spec: ContainerSpec, cmd: ResolvedCommand) -> list[str]:
    """Produce the exact host argv for the configured runtime.

    The flag order is deterministic: mounts sorted by container path, env
    sorted by key. This argv layout is a stable, golden-tested interface.
    """
    mounts = sorted(cmd.mounts, key=lambda m: m.container_path)
    env = sorted(spec.env.items())

    if spec.runtime == "local":
        return list(cmd.argv)

    if spec.runtime == "docker":
        argv = ["docker", "run", "--rm"]
        if spec.gpu:
            argv += ["--gpus", "all"]
        for m in mounts:
            suffix = ":ro" if m.read_only else ""
            argv += ["-v", f"{m.host_path}:{m.container_path}{suffix}"]
        for key, value in env:
            argv += ["-e", f"{key}={value}"]
        argv += list(spec.extra_args)
        argv.append(spec.image)
        argv += list(cmd.argv)
        return argv

    if spec.runtime == "singularity":
        argv = ["singularity", "exec"]
        if spec.gpu:
            argv.append("--nv")
        for m in mounts:
            suffix = ":ro" if m.read_only else ""
            argv += ["--bind", f"{m.host_path}:{m.container_path}{suffix}"]
        for key, value in env:
            argv += ["--env", f"{key}={value}"]
        argv += list(spec.extra_args)
        argv.append(spec.image)
        argv += list(cmd.argv)
        return argv

    raise ValueError(f"unknown runtime {spec.runtime!r}")


@dataclass(frozen=True)
class ExecResult:
    """Outcome of one child process. Nonzero exit codes are data here."""

    exit_code: int
    duration_ms: int
    stdout_path: Path
    stderr_path: Path
    invocation: tuple[str, ...]


def execute(
    invocation: list[str],
    log_dir: str | Path,
    timeout_s: int = 0,
    env: dict[str, str] | None = None,
) -> ExecResult:
    """Run a host argv with stdout/stderr streamed to files.

    ``timeout_s=0`` means unlimited. The log files and ``invocation.json``
    exist after execution regardless of outcome.

    Raises
    ------
    RuntimeUnavailableError
        If the executable cannot be spawned.
    ExecutionTimeoutError
        If the child outlives ``timeout_s``; partial logs are kept.
    """
    log_dir = Path(log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)
    stdout_path = log_dir / "stdout.log"
    stderr_path = log_dir / "stderr.log"
    invocation_path = log_dir / "invocation.json"

    record = {"argv": list(invocation), "timeout_s": timeout_s}
    invocation_path.write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")

    start = time.monotonic()
    with open(stdout_path, "wb") as out, open(stderr_path, "wb") as err:
        try:
            proc = subprocess.Popen(
                invocation, stdout=out, stderr=err, stdin=subprocess.DEVNULL, env=env
            )
        except FileNotFoundError as exc:
            raise RuntimeUnavailableError(
                f"executable not found: {invocation[0]!r}"
            ) from exc
        except OSError as exc:
            raise RuntimeUnavailableError(f"cannot spawn {invocation[0]!r}: {exc}") from exc
        try:
            exit_code = proc.wait(timeout=timeout_s if timeout_s > 0 else None)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
            raise ExecutionTimeoutError(
                f"timed out after {timeout_s}s: {' '.join(invocation)}",
                stdout_path=stdout_path,
                stderr_path=stderr_path,
            ) from None

    duration_ms = round((time.monotonic() - start) * 1000)
    record.update({"exit_code": exit_code, "duration_ms": duration_ms})
    invocation_path.write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    return ExecResult(
        exit_code=exit_code,
        duration_ms=duration_ms,
        stdout_path=stdout_path,
        stderr_path=stderr_path,
        invocation=tuple(invocation),
    )


def check_image(spec: ContainerSpec) -> bool:
    """Report whether the image is locally available.

    Docker asks the daemon; singularity checks ``.sif`` paths on disk and
    accepts remote references unchecked; local is always available.

    Raises
    ------
    RuntimeUnavailableError
        If the runtime binary itself is missing from PATH.
    """
    if spec.runtime == "local":
        return True
    if shutil.which(spec.runtime) is None:
        raise RuntimeUnavailableError(f"runtime binary not found on PATH: {spec.runtime!r}")
    if spec.runtime == "docker":
        proc = subprocess.run(
            ["docker", "image", "inspect", spec.image],
            stdout=subprocess.DEVNULL,
            stderr=subprocess.DEVNULL,
            check=False,
        )
        return proc.returncode == 0
    # singularity: .sif files must exist; remote refs (docker://...) pass.
    if spec.image.endswith(".sif"):
        return Path(spec.image).exists()
    return True
