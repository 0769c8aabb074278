"""Content-addressed cache: input hashing, cache keys, and the on-disk store.

A cache key is a function of (image identifier, rendered container-side
argv, sorted params, input content digests, cache schema version) and
nothing else. Entries live under ``<root>/<first 2 hex>/<key>/outputs/``
next to a ``meta.json`` holding the key preimage; the meta file doubles as
the commit marker. Eviction is manual via :meth:`CacheStore.prune`.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import CacheLockError, StackflowError

CACHE_SCHEMA_VERSION = "1"

_CHUNK = 1 << 20
_FAST_HASH_THRESHOLD = 1 << 30  # 1 GiB
_FAST_HASH_WINDOW = 64 << 20  # first + last 64 MiB


@dataclass(frozen=True)
class CacheKey:
    """A 256-bit digest rendered as lowercase hex."""

    digest: str

    def __post_init__(self):
        if len(self.digest) != 64 or any(c not in "0123456789abcdef" for c in self.digest):
            raise ValueError(f"not a sha256 hex digest: {self.digest!r}")

    def __str__(self):
        return self.digest


def hash_file(path: str | Path, fast: bool = False) -> str:
    """sha256 hex digest of one file's content.

    With ``fast=True``, files above 1 GiB are digested from (size, mtime,
    first and last 64 MiB) instead of full content; the run report records
    when this shortcut was active.
    """
    path = Path(path)
    h = hashlib.sha256()
    size = path.stat().st_size
    if fast and size > _FAST_HASH_THRESHOLD:
        st = path.stat()
        h.update(f"fast:{size}:{st.st_mtime_ns}".encode())
        with open(path, "rb") as f:
            h.update(f.read(_FAST_HASH_WINDOW))
            f.seek(max(size - _FAST_HASH_WINDOW, 0))
            h.update(f.read(_FAST_HASH_WINDOW))
        return h.hexdigest()
    with open(path, "rb") as f:
        while chunk := f.read(_CHUNK):
            h.update(chunk)
    return h.hexdigest()


def hash_path(path: str | Path, fast: bool = False) -> str:
    """Digest of a file, or of a directory's (relative name, digest) pairs."""
    path = Path(path)
    if path.is_dir():
        h = hashlib.sha256()
        for sub in sorted(p for p in path.rglob("*") if p.is_file()):
            rel = sub.relative_to(path).as_posix()
            h.update(rel.encode())
            h.update(b"\0")
            h.update(hash_file(sub, fast=fast).encode())
            h.update(b"\n")
        return h.hexdigest()
    return hash_file(path, fast=fast)


def cache_key_preimage(
    image: str,
    container_argv: Sequence[str],
    params: Sequence[tuple[str, str]],
    input_digests: Sequence[str],
) -> str:
    """Canonical JSON preimage the cache key is the sha256 of."""
    payload = {
        "schema": CACHE_SCHEMA_VERSION,
        "image": image,
        "argv": list(container_argv),
        "params": [[k, v] for k, v in sorted(params)],
        "inputs": list(input_digests),
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def compute_cache_key(
    image: str,
    container_argv: Sequence[str],
    params: Sequence[tuple[str, str]],
    input_digests: Sequence[str],
) -> CacheKey:
    """Derive the deterministic cache key for one node execution."""
    preimage = cache_key_preimage(image, container_argv, params, input_digests)
    return CacheKey(hashlib.sha256(preimage.encode("utf-8")).hexdigest())


def _link_or_copy(src: Path, dst: Path) -> None:
    dst.parent.mkdir(parents=True, exist_ok=True)
    if dst.exists():
        dst.unlink()
    try:
        os.link(src, dst)
    except OSError:
        shutil.copy2(src, dst)


def _copy_artifact(src: Path, dst: Path) -> None:
    if src.is_dir():
        for sub in sorted(p for p in src.rglob("*") if p.is_file()):
            _link_or_copy(sub, dst / sub.relative_to(src))
        dst.mkdir(parents=True, exist_ok=True)
    else:
        _link_or_copy(src, dst)


class CacheLock:
    """Single-orchestrator guard: an exclusive lock file at the cache root.

    A second process on the same cache fails fast rather than risking a
    multi-writer store.
    """

    def __init__(self, root: Path):
        self._path = root / ".lock"
        self._fd: int | None = None

    def __enter__(self):
        try:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._fd = os.open(self._path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CacheLockError(
                f"cache {self._path.parent} is locked by another run;"
                f" remove {self._path} if that process is gone"
            ) from None
        except OSError as exc:
            raise CacheLockError(f"cannot use cache root {self._path.parent}: {exc}") from exc
        os.write(self._fd, f"{os.getpid()}\n".encode())
        return self

    def __exit__(self, *exc_info):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        try:
            self._path.unlink()
        except FileNotFoundError:
            pass


class CacheStore:
    """Filesystem store of verified node outputs, keyed by cache key."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def lock(self) -> CacheLock:
        return CacheLock(self.root)

    def _entry_dir(self, key: CacheKey) -> Path:
        return self.root / key.digest[:2] / key.digest

    def has(self, key: CacheKey) -> bool:
        return (self._entry_dir(key) / "meta.json").is_file()

    def read_meta(self, key: CacheKey) -> dict:
        meta_path = self._entry_dir(key) / "meta.json"
        return json.loads(meta_path.read_text(encoding="utf-8"))

    def store(
        self,
        key: CacheKey,
        artifacts: Iterable[tuple[Path, str]],
        preimage: str,
        sidecars: dict[str, dict] | None = None,
    ) -> None:
        """Commit (source path, artifact relpath) pairs under ``key``.

        Writes into a temp directory first and renames into place, so a
        partially written entry is never visible. The optional sidecar
        payloads are replayed on later materializations.
        """
        entry = self._entry_dir(key)
        if self.has(key):
            return
        tmp = entry.with_name(f"{entry.name}.tmp-{os.getpid()}-{time.monotonic_ns()}")
        outputs = tmp / "outputs"
        outputs.mkdir(parents=True)
        relpaths = []
        for src, relpath in artifacts:
            _copy_artifact(Path(src), outputs / relpath)
            relpaths.append(relpath)
        meta = {
            "schema": CACHE_SCHEMA_VERSION,
            "key": key.digest,
            "preimage": json.loads(preimage),
            "created_at": time.time(),
            "outputs": relpaths,
            "sidecars": sidecars or {},
        }
        (tmp / "meta.json").write_text(
            json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        entry.parent.mkdir(parents=True, exist_ok=True)
        try:
            tmp.rename(entry)
        except OSError:
            if self.has(key):  # someone else committed the same key first
                shutil.rmtree(tmp, ignore_errors=True)
            else:
                raise

    def materialize(self, key: CacheKey, out_root: Path) -> list[str]:
        """Copy (or hard-link, when the filesystem allows) cached outputs
        into the output tree. Returns the artifact relpaths."""
        meta = self.read_meta(key)
        outputs = self._entry_dir(key) / "outputs"
        for relpath in meta["outputs"]:
            src = outputs / relpath
            dst = out_root / relpath
            if src.is_dir():
                if dst.exists():
                    shutil.rmtree(dst)
            _copy_artifact(src, dst)
        return list(meta["outputs"])

    def entries(self) -> list[dict]:
        """All committed entries with key, creation time, and size."""
        found = []
        if not self.root.is_dir():
            return found
        for meta_path in sorted(self.root.glob("??/*/meta.json")):
            try:
                meta = json.loads(meta_path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError):
                continue
            entry_dir = meta_path.parent
            size = sum(p.stat().st_size for p in entry_dir.rglob("*") if p.is_file())
            found.append(
                {"key": meta["key"], "created_at": meta["created_at"], "size_bytes": size}
            )
        return found

    def prune(self, older_than_s: float | None = None, max_size_bytes: int | None = None) -> list[str]:
        """Evict entries by age, then oldest-first until under the size cap."""
        removed: list[str] = []
        entries = sorted(self.entries(), key=lambda e: e["created_at"])
        now = time.time()
        if older_than_s is not None:
            for entry in list(entries):
                if now - entry["created_at"] > older_than_s:
                    self._remove(entry["key"])
                    removed.append(entry["key"])
                    entries.remove(entry)
        if max_size_bytes is not None:
            total = sum(e["size_bytes"] for e in entries)
            for entry in list(entries):
                if total <= max_size_bytes:
                    break
                self._remove(entry["key"])
                removed.append(entry["key"])
                total -= entry["size_bytes"]
        return removed

    def _remove(self, digest: str) -> None:
        entry = self.root / digest[:2] / digest
        if not entry.is_dir():
            raise StackflowError(f"no cache entry {digest}")
        shutil.rmtree(entry)
