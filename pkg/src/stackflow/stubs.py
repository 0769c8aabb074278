"""Deterministic stub executables standing in for the real stage tools.

:func:`stub_toolchain` writes one standalone python3 script per stage
(``stub-preprocessing``, ``stub-reconstruction``, ``stub-segmentation``,
``stub-surface``). Each reads every input on its argv and writes outputs
whose bytes are a transcript of the input digests and params, so a full
pipeline can be verified bit-for-bit without any imaging tool or
container daemon.

Transcript format, one line per input then the params line::

    sha256:<hex> <basename>
    params:<k=v,k=v sorted by key>

Test hooks, all via environment variables:

- ``STUB_SLEEP_MS``: sleep this long before doing any work.
- ``STUB_FAIL``: exit with this code, writing nothing to the outputs.
  ``STUB_FAIL_STAGE`` and ``STUB_FAIL_MATCH`` narrow the injection to one
  stage and to invocations whose argv contains a substring.
- ``STUB_STAMP``: directory to drop a ``{stage, start, end}`` JSON stamp
  per invocation, for concurrency assertions.
- ``STUB_COUNT``: file to append one line per invocation (atomic via
  O_APPEND), counting process executions.
"""

from __future__ import annotations

import os
import stat
from pathlib import Path

STUB_STAGES = ("preprocessing", "reconstruction", "segmentation", "surface")

_SCRIPT = '''#!/usr/bin/env python3
"""Deterministic stand-in for the __STAGE__ stage; see the stub toolchain docs."""
import argparse
import hashlib
import json
import os
import sys
import time

STAGE = "__STAGE__"
DIR_OUTPUT = __DIR_OUTPUT__
PER_INPUT = __PER_INPUT__


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            chunk = f.read(1 << 20)
            if not chunk:
                break
            h.update(chunk)
    return h.hexdigest()


def expand(paths):
    out = []
    for p in paths:
        if os.path.isdir(p):
            for root, dirs, files in os.walk(p):
                dirs.sort()
                for name in sorted(files):
                    out.append(os.path.join(root, name))
        else:
            out.append(p)
    return out


def transcript(paths, params):
    lines = ["sha256:%s %s" % (sha256_file(p), os.path.basename(p)) for p in paths]
    lines.append("params:" + ",".join("%s=%s" % kv for kv in sorted(params)))
    return "".join(line + "\\n" for line in lines)


def write_stamp(start):
    stamp_dir = os.environ.get("STUB_STAMP")
    if not stamp_dir:
        return
    os.makedirs(stamp_dir, exist_ok=True)
    name = "%s-%d-%d.json" % (STAGE, os.getpid(), time.monotonic_ns())
    with open(os.path.join(stamp_dir, name), "w") as f:
        json.dump({"stage": STAGE, "start": start, "end": time.time()}, f)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="stub-" + STAGE)
    parser.add_argument("--inputs", nargs="+", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--params", nargs="*", default=[])
    args = parser.parse_args(argv)

    start = time.time()
    count_path = os.environ.get("STUB_COUNT")
    if count_path:
        fd = os.open(count_path, os.O_CREAT | os.O_WRONLY | os.O_APPEND)
        os.write(fd, (STAGE + "\\n").encode())
        os.close(fd)

    sleep_ms = int(os.environ.get("STUB_SLEEP_MS", "0"))
    if sleep_ms:
        time.sleep(sleep_ms / 1000.0)

    fail = os.environ.get("STUB_FAIL")
    if fail:
        stage_ok = os.environ.get("STUB_FAIL_STAGE") in (None, STAGE)
        match = os.environ.get("STUB_FAIL_MATCH")
        match_ok = match is None or any(match in a for a in sys.argv[1:])
        if stage_ok and match_ok:
            sys.stderr.write("stub failure injected\\n")
            write_stamp(start)
            return int(fail)

    params = [tuple(item.split("=", 1)) if "=" in item else (item, "") for item in args.params]
    inputs = expand(args.inputs)
    for path in inputs:
        if not os.path.exists(path):
            sys.stderr.write("missing input: %s\\n" % path)
            return 1

    if DIR_OUTPUT:
        os.makedirs(args.out, exist_ok=True)
        if PER_INPUT:
            for path in inputs:
                body = transcript([path], params)
                with open(os.path.join(args.out, os.path.basename(path)), "w") as f:
                    f.write(body)
        else:
            body = transcript(inputs, params)
            for hemi in ("left", "right"):
                with open(os.path.join(args.out, "hemi-%s.surf" % hemi), "w") as f:
                    f.write(body + "hemi:%s\\n" % hemi)
    else:
        parent = os.path.dirname(os.path.abspath(args.out))
        os.makedirs(parent, exist_ok=True)
        with open(args.out, "w") as f:
            f.write(transcript(inputs, params))

    write_stamp(start)
    return 0


if __name__ == "__main__":
    sys.exit(main())
'''


def stub_script(stage: str) -> str:
    """The standalone script text for one stage's stub."""
    if stage not in STUB_STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    return (
        _SCRIPT.replace("__STAGE__", stage)
        .replace("__DIR_OUTPUT__", str(stage in ("preprocessing", "surface")))
        .replace("__PER_INPUT__", str(stage == "preprocessing"))
    )


def stub_toolchain(directory: str | Path) -> dict[str, Path]:
    """Install one executable stub per stage into ``directory``.

    Returns the stage -> script path mapping. The directory is created if
    needed; it must be writable.
    """
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        probe = directory / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"stub directory not writable: {directory}: {exc}") from exc

    installed: dict[str, Path] = {}
    for stage in STUB_STAGES:
        path = directory / f"stub-{stage}"
        path.write_text(stub_script(stage), encoding="utf-8")
        path.chmod(path.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
        installed[stage] = path
    return installed
