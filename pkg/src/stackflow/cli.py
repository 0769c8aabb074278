"""Command-line entry point: run pipelines, preview plans, manage the cache.

Human-readable output goes to stderr; machine artifacts (DOT graphs, JSON
plans, resolved configs) go to stdout or files. Exit codes are stable:
0 success, 1 any node failed, 2 configuration or dataset error, 3
internal error.

Trailing bare ``key=value`` tokens after the flags are config settings,
in two forms: ``group=choice`` selects a config group file (the key names
a directory in the config root), everything else is an override of the
composed tree (``+key=value`` adds a new key).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import __version__
from .bids import group_stacks, index_dataset
from .cache import CacheStore
from .config import (
    GroupSelection,
    OverrideExpr,
    apply_overrides,
    compose,
    interpolate,
    parse_override,
    validate_config,
)
from .engine import ExecuteOptions, build_graph, dry_run, execute_graph
from .errors import (
    BidsError,
    CacheLockError,
    ConfigError,
    DatasetError,
    GraphError,
    OverrideError,
    StackflowError,
    TemplateError,
)
from .graph import to_dot
from .pipeline import packaged_config_root, registry
from .stubs import stub_toolchain

logger = logging.getLogger(__name__)

ENV_CACHE = "STACKFLOW_CACHE"
ENV_RUNTIME = "STACKFLOW_RUNTIME"

EXIT_OK = 0
EXIT_NODE_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_INTERNAL_ERROR = 3


@dataclass
class CliInvocation:
    """Parsed command line, ready for dispatch."""

    subcommand: str
    bids_dir: Path | None = None
    out_dir: Path | None = None
    config_root: Path = field(default_factory=packaged_config_root)
    base_config: str = "base"
    selections: list[GroupSelection] = field(default_factory=list)
    overrides: list[OverrideExpr] = field(default_factory=list)
    subjects: list[str] | None = None
    sessions: list[str] | None = None
    nproc: int | None = None
    runtime: str | None = None
    cache_root: Path | None = None
    fast_hash: bool = False
    cache_action: str | None = None
    older_than_s: float | None = None
    max_size_bytes: int | None = None
    verbose: int = 0


class _Once(argparse.Action):
    """Reject conflicting duplicate flags instead of silently last-wins."""

    def __call__(self, parser, namespace, values, option_string=None):
        marker = f"_seen_{self.dest}"
        if getattr(namespace, marker, False):
            parser.error(f"conflicting duplicate flag {option_string}")
        setattr(namespace, marker, True)
        setattr(namespace, self.dest, values)


_DURATION_RE = re.compile(r"^(\d+)([smhdw])$")
_DURATION_UNITS = {"s": 1, "m": 60, "h": 3600, "d": 86400, "w": 604800}
_SIZE_RE = re.compile(r"^(\d+)([KMGT]?)B?$", re.IGNORECASE)
_SIZE_UNITS = {"": 1, "K": 1 << 10, "M": 1 << 20, "G": 1 << 30, "T": 1 << 40}


def parse_duration(text: str) -> float:
    """``30d``-style durations to seconds."""
    m = _DURATION_RE.match(text)
    if not m:
        raise ValueError(f"bad duration {text!r}; use e.g. 30d, 12h, 45m")
    return int(m.group(1)) * _DURATION_UNITS[m.group(2)]


def parse_size(text: str) -> int:
    """``10G``-style sizes to bytes."""
    m = _SIZE_RE.match(text)
    if not m:
        raise ValueError(f"bad size {text!r}; use e.g. 10G, 500M")
    return int(m.group(1)) * _SIZE_UNITS[m.group(2).upper()]


def _add_config_args(sub: argparse.ArgumentParser, *, with_dataset: bool, with_out: bool) -> None:
    if with_dataset:
        sub.add_argument("--bids-dir", type=Path, required=with_out, action=_Once,
                         help="dataset root (must contain dataset_description.json)")
        sub.add_argument("--subjects", action=_Once,
                         help="comma-separated subject labels to process")
        sub.add_argument("--sessions", action=_Once,
                         help="comma-separated session labels to process")
    if with_out:
        sub.add_argument("--out-dir", type=Path, required=True, action=_Once,
                         help="output root for derivatives, work dirs, and reports")
    sub.add_argument("--config-root", type=Path, action=_Once,
                     help="config directory (default: the packaged reference configs)")
    sub.add_argument("--base-config", default="base", action=_Once,
                     help="base config name inside the config root (default: base)")
    sub.add_argument("settings", nargs="*", metavar="GROUP=CHOICE | KEY.PATH=VALUE | +KEY.PATH=VALUE",
                     help="config group selections and overrides")


def _add_engine_args(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--nproc", type=int, action=_Once,
                     help="worker pool size (wins over engine.nproc)")
    sub.add_argument("--runtime", choices=["docker", "singularity", "local"], action=_Once,
                     help=f"container runtime (wins over config and ${ENV_RUNTIME})")
    sub.add_argument("--cache-root", type=Path, action=_Once,
                     help=f"cache directory (default: ${ENV_CACHE} or <out-dir>/cache)")
    sub.add_argument("--fast-hash", action="store_true",
                     help="hash files >1GiB by size+mtime+head+tail instead of full content")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stackflow",
        description="Container-native workflow engine for staged fetal brain MRI pipelines.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="increase log verbosity (-v info, -vv debug)")
    subparsers = parser.add_subparsers(dest="subcommand", required=True)

    run = subparsers.add_parser("run", help="execute the configured pipeline")
    _add_config_args(run, with_dataset=True, with_out=True)
    _add_engine_args(run)

    dry = subparsers.add_parser("dry-run", help="preview the plan without executing")
    _add_config_args(dry, with_dataset=True, with_out=True)
    _add_engine_args(dry)

    val = subparsers.add_parser("validate", help="validate config (and dataset, if given)")
    _add_config_args(val, with_dataset=True, with_out=False)
    val.add_argument("--runtime", choices=["docker", "singularity", "local"], action=_Once,
                     help="container runtime override")

    graph = subparsers.add_parser("graph", help="print the workflow graph as DOT")
    _add_config_args(graph, with_dataset=True, with_out=False)
    graph.add_argument("--runtime", choices=["docker", "singularity", "local"], action=_Once,
                       help="container runtime override")

    cache = subparsers.add_parser("cache", help="inspect or prune the cache")
    cache.add_argument("action", choices=["ls", "prune"])
    cache.add_argument("--cache-root", type=Path, action=_Once,
                       help=f"cache directory (default: ${ENV_CACHE})")
    cache.add_argument("--older-than", action=_Once,
                       help="prune entries older than this (e.g. 30d, 12h)")
    cache.add_argument("--max-size", action=_Once,
                       help="prune oldest entries until the cache fits (e.g. 10G)")
    return parser


def _classify_settings(
    tokens: list[str], config_root: Path, parser: argparse.ArgumentParser
) -> tuple[list[GroupSelection], list[OverrideExpr]]:
    selections: list[GroupSelection] = []
    overrides: list[OverrideExpr] = []
    for token in tokens:
        if "=" not in token:
            parser.error(f"malformed setting {token!r}; expected key=value")
        if token.startswith("+"):
            overrides.append(parse_override(token))
            continue
        lhs = token.split("=", 1)[0]
        if "." not in lhs and (config_root / lhs).is_dir():
            group, _, choice = token.partition("=")
            if not choice:
                parser.error(f"empty choice in selection {token!r}")
            selections.append(GroupSelection(group, choice))
        else:
            overrides.append(parse_override(token))
    return selections, overrides


def parse_args(argv: list[str] | None = None) -> CliInvocation:
    """Parse argv into a typed invocation (argparse handles usage errors)."""
    parser = build_parser()
    args = parser.parse_args(argv)

    config_root = getattr(args, "config_root", None) or packaged_config_root()
    settings = getattr(args, "settings", [])
    try:
        selections, overrides = _classify_settings(settings, config_root, parser)
    except OverrideError as exc:
        parser.error(str(exc))

    def split_csv(value):
        return [v for v in value.split(",") if v] if value else None

    invocation = CliInvocation(
        subcommand=args.subcommand,
        bids_dir=getattr(args, "bids_dir", None),
        out_dir=getattr(args, "out_dir", None),
        config_root=Path(config_root),
        base_config=getattr(args, "base_config", "base"),
        selections=selections,
        overrides=overrides,
        subjects=split_csv(getattr(args, "subjects", None)),
        sessions=split_csv(getattr(args, "sessions", None)),
        nproc=getattr(args, "nproc", None),
        runtime=getattr(args, "runtime", None),
        cache_root=getattr(args, "cache_root", None),
        fast_hash=getattr(args, "fast_hash", False),
        cache_action=getattr(args, "action", None),
        verbose=args.verbose,
    )
    if invocation.nproc is not None and invocation.nproc < 1:
        parser.error("--nproc must be >= 1")
    older = getattr(args, "older_than", None)
    max_size = getattr(args, "max_size", None)
    try:
        invocation.older_than_s = parse_duration(older) if older else None
        invocation.max_size_bytes = parse_size(max_size) if max_size else None
    except ValueError as exc:
        parser.error(str(exc))
    return invocation


def _prepare_config(invocation: CliInvocation):
    """Compose, override, interpolate, validate. Flags win over config and env."""
    tree = compose(invocation.config_root, invocation.base_config, invocation.selections)
    tree = apply_overrides(tree, invocation.overrides)
    if invocation.runtime is not None:
        tree["runtime"] = invocation.runtime
    elif os.environ.get(ENV_RUNTIME):
        tree["runtime"] = os.environ[ENV_RUNTIME]
    if invocation.nproc is not None:
        tree.setdefault("engine", {})["nproc"] = invocation.nproc
        tree.pop("parallelism", None)
    if invocation.fast_hash:
        tree.setdefault("engine", {})["fast_hash"] = True
    tree = interpolate(tree)
    cfg = validate_config(tree, registry=registry(invocation.config_root))
    for warning in cfg.warnings:
        logger.warning("%s", warning)
    return tree, cfg


def _resolve_cache_root(invocation: CliInvocation, cfg=None) -> Path:
    if invocation.cache_root is not None:
        return invocation.cache_root
    env = os.environ.get(ENV_CACHE)
    if env:
        return Path(env)
    if cfg is not None and cfg.cache_root:
        return Path(cfg.cache_root)
    if invocation.out_dir is not None:
        return invocation.out_dir / "cache"
    raise ConfigError(f"no cache root: pass --cache-root or set ${ENV_CACHE}")


def _load_dataset(invocation: CliInvocation):
    dataset = index_dataset(invocation.bids_dir, invocation.subjects, invocation.sessions)
    groups, group_warnings = group_stacks(dataset)
    if not groups:
        raise DatasetError("no T2w stack groups found in the dataset")
    return dataset, groups, tuple(dataset.warnings) + tuple(group_warnings)


def _execute_options(invocation, tree, cfg, dataset, warnings) -> ExecuteOptions:
    path_prepend = None
    if any(s.implementation == "stub" for s in cfg.stages):
        stub_dir = invocation.out_dir / "work" / "stubs"
        stub_toolchain(stub_dir)
        path_prepend = stub_dir
    return ExecuteOptions(
        out_root=invocation.out_dir,
        cache_root=_resolve_cache_root(invocation, cfg),
        parallelism=cfg.parallelism,
        fast_hash=cfg.fast_hash,
        path_prepend=path_prepend,
        pipeline_name=cfg.pipeline_name,
        dataset=dataset,
        resolved_config=tree,
        dataset_warnings=warnings,
    )


def cmd_run(invocation: CliInvocation) -> int:
    tree, cfg = _prepare_config(invocation)
    dataset, groups, warnings = _load_dataset(invocation)
    graph = build_graph(cfg, groups, dataset_root=dataset.root)
    options = _execute_options(invocation, tree, cfg, dataset, warnings)
    logger.info(
        "running %d nodes (%d groups x %d stages), nproc=%d, cache=%s",
        len(graph.nodes), len(groups), len(cfg.stages), cfg.parallelism, options.cache_root,
    )
    report = execute_graph(graph, options)
    for line in (
        f"run {report.run_id}: " + ", ".join(f"{k}={v}" for k, v in report.summary.items()),
        f"report: {invocation.out_dir / 'reports' / report.run_id / 'report.json'}",
    ):
        print(line, file=sys.stderr)
    return EXIT_OK if report.ok else EXIT_NODE_FAILURE


def cmd_dry_run(invocation: CliInvocation) -> int:
    tree, cfg = _prepare_config(invocation)
    dataset, groups, _ = _load_dataset(invocation)
    graph = build_graph(cfg, groups, dataset_root=dataset.root)
    plan = dry_run(
        graph,
        _resolve_cache_root(invocation, cfg),
        invocation.out_dir,
        fast_hash=cfg.fast_hash,
    )
    print(json.dumps([entry.to_dict() for entry in plan], indent=2))
    runs = sum(1 for e in plan if e.action == "would-run")
    print(f"{runs} of {len(plan)} nodes would run", file=sys.stderr)
    return EXIT_OK


def cmd_validate(invocation: CliInvocation) -> int:
    tree, cfg = _prepare_config(invocation)
    summary = [f"config OK: {len(cfg.stages)} stages, runtime={cfg.runtime}"]
    if invocation.bids_dir is not None:
        dataset, groups, warnings = _load_dataset(invocation)
        summary.append(
            f"dataset OK: {len(dataset.subjects)} subjects, {len(dataset.files)} files,"
            f" {len(groups)} stack groups, {len(warnings)} warnings"
        )
    print(yaml.safe_dump(tree, sort_keys=True, default_flow_style=False), end="")
    for line in summary:
        print(line, file=sys.stderr)
    return EXIT_OK


def cmd_graph(invocation: CliInvocation) -> int:
    _, cfg = _prepare_config(invocation)
    dataset, groups, _ = _load_dataset(invocation)
    graph = build_graph(cfg, groups, dataset_root=dataset.root)
    print(to_dot(graph), end="")
    return EXIT_OK


def cmd_cache(invocation: CliInvocation) -> int:
    store = CacheStore(_resolve_cache_root(invocation))
    if invocation.cache_action == "ls":
        print(json.dumps(store.entries(), indent=2))
        return EXIT_OK
    removed = store.prune(invocation.older_than_s, invocation.max_size_bytes)
    print(json.dumps(removed, indent=2))
    print(f"pruned {len(removed)} cache entries", file=sys.stderr)
    return EXIT_OK


_COMMANDS = {
    "run": cmd_run,
    "dry-run": cmd_dry_run,
    "validate": cmd_validate,
    "graph": cmd_graph,
    "cache": cmd_cache,
}


def main(argv: list[str] | None = None) -> int:
    try:
        invocation = parse_args(argv)
    except SystemExit as exc:  # argparse has already printed the usage message
        return int(exc.code or 0)
    logging.basicConfig(
        stream=sys.stderr,
        level=max(logging.WARNING - 10 * invocation.verbose, logging.DEBUG),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[invocation.subcommand](invocation)
    except (ConfigError, OverrideError, DatasetError, BidsError, GraphError,
            TemplateError, CacheLockError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except StackflowError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL_ERROR
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, never crashes
        logger.exception("unexpected internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
