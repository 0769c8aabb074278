"""BIDS filename grammar, dataset indexing, and derivative naming.

Filenames decompose into underscore-separated ``key-value`` entity tokens
followed by a bare suffix and extension, e.g.::

    sub-01_ses-02_run-1_T2w.nii.gz

Only the entities the pipeline routes on (``sub``, ``ses``, ``acq``,
``run``) are parsed into typed fields; every other key is preserved
verbatim in ``extra`` in input order. Formatting and parsing round-trip:
``parse_filename(format_entities(e)) == e`` for every valid entity set.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath

from .errors import BidsError, BidsParseError, DatasetError

# Canonical entity order in formatted names. Unrecognized keys follow in
# input order, then the suffix.
KNOWN_ENTITY_KEYS = ("sub", "ses", "acq", "run")

IMAGING_EXTENSIONS = (".nii.gz", ".nii")

_LABEL_RE = re.compile(r"^[a-zA-Z0-9]+$")


@dataclass(frozen=True)
class BidsEntities:
    """The decomposed naming entities of one dataset file.

    ``extra`` holds unrecognized ``key-value`` pairs in input order.
    ``datatype`` is the directory-level kind (e.g. ``anat``); it is not
    part of the filename and is filled in by the indexer.
    """

    subject: str
    suffix: str
    extension: str = ""
    session: str | None = None
    run: int | None = None
    acquisition: str | None = None
    datatype: str = ""
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.subject or not _LABEL_RE.match(self.subject):
            raise BidsParseError(f"subject must be non-empty alphanumeric, got {self.subject!r}")
        if not self.suffix or not _LABEL_RE.match(self.suffix):
            raise BidsParseError(f"suffix must be non-empty alphanumeric, got {self.suffix!r}")
        if self.extension and not re.match(r"^(\.[a-zA-Z0-9]+)+$", self.extension):
            raise BidsParseError(f"bad extension {self.extension!r}")
        if self.session is not None and not _LABEL_RE.match(self.session):
            raise BidsParseError(f"session must be alphanumeric, got {self.session!r}")
        if self.acquisition is not None and not _LABEL_RE.match(self.acquisition):
            raise BidsParseError(f"acquisition must be alphanumeric, got {self.acquisition!r}")
        if self.run is not None and self.run < 1:
            raise BidsParseError(f"run must be a positive integer, got {self.run!r}")
        for key, value in self.extra.items():
            if not re.match(r"^[a-z]+$", key) or key in KNOWN_ENTITY_KEYS:
                raise BidsParseError(f"bad extra entity key {key!r}")
            if not _LABEL_RE.match(value):
                raise BidsParseError(f"bad value {value!r} for entity {key!r}")

    @property
    def directory(self) -> PurePosixPath:
        """``sub-X[/ses-Y]/<datatype>`` directory implied by the entities."""
        parts = [f"sub-{self.subject}"]
        if self.session is not None:
            parts.append(f"ses-{self.session}")
        parts.append(self.datatype or "anat")
        return PurePosixPath(*parts)


def format_entities(entities: BidsEntities) -> str:
    """Render entities as a canonical BIDS filename.

    Entity order is sub, ses, acq, run, then extras in input order, then
    the suffix and extension.
    """
    tokens = [f"sub-{entities.subject}"]
    if entities.session is not None:
        tokens.append(f"ses-{entities.session}")
    if entities.acquisition is not None:
        tokens.append(f"acq-{entities.acquisition}")
    if entities.run is not None:
        tokens.append(f"run-{entities.run}")
    for key, value in entities.extra.items():
        tokens.append(f"{key}-{value}")
    tokens.append(f"{entities.suffix}{entities.extension}")
    return "_".join(tokens)


def parse_filename(name: str) -> BidsEntities:
    """Parse a bare filename into :class:`BidsEntities`.

    Parameters
    ----------
    name : str
        Filename without directory components, e.g.
        ``sub-01_ses-02_run-1_T2w.nii.gz``.

    Returns
    -------
    BidsEntities
        Typed fields for sub/ses/acq/run; every other key lands in
        ``extra`` preserving input order.

    Raises
    ------
    BidsParseError
        If the name has directory separators, lacks a suffix token, has an
        entity token without a dash or with an empty value, repeats a key,
        or is missing the required ``sub`` entity.
    """
    if "/" in name or "\\" in name:
        raise BidsParseError(f"expected a bare filename, got a path: {name!r}")
    if not name:
        raise BidsParseError("empty filename")

    tokens = name.split("_")
    last = tokens[-1]
    dot = last.find(".")
    if dot == 0:
        raise BidsParseError(f"missing suffix before extension in {name!r}")
    suffix = last if dot < 0 else last[:dot]
    extension = "" if dot < 0 else last[dot:]
    if "-" in suffix:
        # The final token is still a key-value entity: no suffix was given.
        raise BidsParseError(f"missing suffix token in {name!r}")
    if not _LABEL_RE.match(suffix):
        raise BidsParseError(f"bad suffix {suffix!r} in {name!r}")

    fields: dict[str, object] = {}
    extra: dict[str, str] = {}
    seen_keys: set[str] = set()
    for token in tokens[:-1]:
        if "-" not in token:
            raise BidsParseError(f"malformed entity token {token!r} in {name!r} (no dash)")
        key, _, value = token.partition("-")
        if not key:
            raise BidsParseError(f"empty entity key in token {token!r} of {name!r}")
        if not value:
            raise BidsParseError(f"empty value for entity {key!r} in {name!r}")
        if key in seen_keys:
            raise BidsParseError(f"duplicate entity {key!r} in {name!r}")
        seen_keys.add(key)
        if key == "sub":
            fields["subject"] = value
        elif key == "ses":
            fields["session"] = value
        elif key == "acq":
            fields["acquisition"] = value
        elif key == "run":
            if not value.isdigit() or int(value) < 1:
                raise BidsParseError(f"run must be a positive integer, got {value!r} in {name!r}")
            fields["run"] = int(value)
        else:
            extra[key] = value

    if "subject" not in fields:
        raise BidsParseError(f"missing required entity 'sub' in {name!r}")

    return BidsEntities(suffix=suffix, extension=extension, extra=extra, **fields)  # type: ignore[arg-type]


@dataclass(frozen=True)
class BidsFile:
    """One indexed imaging file: relative path, entities, size, sidecar."""

    relative_path: PurePosixPath
    entities: BidsEntities
    size_bytes: int
    sidecar: PurePosixPath | None = None

    @property
    def name(self) -> str:
        return self.relative_path.name


@dataclass(frozen=True)
class DatasetWarning:
    """Structured non-fatal finding collected while indexing or grouping."""

    code: str
    path: str
    message: str


@dataclass(frozen=True)
class BidsDataset:
    """Read-only index of a dataset tree. Safe to share across workers."""

    root: Path
    files: tuple[BidsFile, ...]
    subjects: tuple[str, ...]
    warnings: tuple[DatasetWarning, ...] = ()


@dataclass(frozen=True)
class StackGroup:
    """All T2-weighted stacks of one (subject, session) pair, in run order."""

    subject: str
    session: str | None
    stacks: tuple[BidsFile, ...]

    @property
    def label(self) -> str:
        if self.session is not None:
            return f"sub-{self.subject}_ses-{self.session}"
        return f"sub-{self.subject}"


def _strip_prefix(value: str, prefix: str) -> str:
    return value[len(prefix):] if value.startswith(prefix) else value


def _stack_sort_key(f: BidsFile):
    # Run ascending, missing run last, then acquisition, then filename.
    e = f.entities
    return (e.run is None, e.run or 0, e.acquisition or "", f.relative_path.name)


def index_dataset(
    root: str | Path,
    subjects: list[str] | None = None,
    sessions: list[str] | None = None,
) -> BidsDataset:
    """Index every parseable imaging file under ``sub-*/[ses-*/]<datatype>/``.

    Non-matching files become warning records rather than errors. JSON
    files are attached as sidecars to the imaging file sharing their stem.

    Parameters
    ----------
    root : str or Path
        Dataset root. Must contain ``dataset_description.json``.
    subjects, sessions : list of str, optional
        Restrict indexing to these labels (``sub-``/``ses-`` prefixes
        accepted and stripped).

    Raises
    ------
    DatasetError
        If the root is missing, unreadable, or zero subjects remain after
        filtering.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")
    if not (root / "dataset_description.json").is_file():
        raise DatasetError(f"missing dataset_description.json in {root}")

    subject_filter = {_strip_prefix(s, "sub-") for s in subjects} if subjects else None
    session_filter = {_strip_prefix(s, "ses-") for s in sessions} if sessions else None

    files: list[BidsFile] = []
    warnings: list[DatasetWarning] = []
    json_stems: dict[str, PurePosixPath] = {}

    try:
        subject_dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("sub-"))
    except OSError as exc:
        raise DatasetError(f"cannot read dataset root {root}: {exc}") from exc

    def scan_datatype_dir(dt_dir: Path, subject: str, session: str | None) -> None:
        try:
            entries = sorted(dt_dir.iterdir())
        except OSError as exc:
            raise DatasetError(f"unreadable directory {dt_dir}: {exc}") from exc
        for path in entries:
            rel = PurePosixPath(path.relative_to(root).as_posix())
            if not path.is_file():
                warnings.append(DatasetWarning("unexpected-entry", str(rel), "not a regular file"))
                continue
            if path.name.endswith(".json"):
                json_stems[str(rel)[: -len(".json")]] = rel
                continue
            if not path.name.endswith(IMAGING_EXTENSIONS):
                warnings.append(DatasetWarning("skipped-extension", str(rel), "not an imaging file"))
                continue
            try:
                entities = parse_filename(path.name)
            except BidsParseError as exc:
                warnings.append(DatasetWarning("unparseable-name", str(rel), str(exc)))
                continue
            if entities.subject != subject or entities.session != session:
                warnings.append(
                    DatasetWarning(
                        "entity-mismatch", str(rel),
                        "filename entities disagree with the directory placement",
                    )
                )
                continue
            entities = BidsEntities(
                subject=entities.subject,
                suffix=entities.suffix,
                extension=entities.extension,
                session=entities.session,
                run=entities.run,
                acquisition=entities.acquisition,
                datatype=dt_dir.name,
                extra=entities.extra,
            )
            files.append(BidsFile(rel, entities, path.stat().st_size))

    def warn_stray_files(directory: Path) -> None:
        for path in sorted(p for p in directory.iterdir() if p.is_file()):
            rel = PurePosixPath(path.relative_to(root).as_posix())
            warnings.append(
                DatasetWarning("misplaced-file", str(rel), "expected a datatype directory here")
            )

    for sub_dir in subject_dirs:
        subject = sub_dir.name[len("sub-"):]
        if subject_filter is not None and subject not in subject_filter:
            continue
        warn_stray_files(sub_dir)
        session_dirs = sorted(
            p for p in sub_dir.iterdir() if p.is_dir() and p.name.startswith("ses-")
        )
        if session_dirs:
            for ses_dir in session_dirs:
                session = ses_dir.name[len("ses-"):]
                if session_filter is not None and session not in session_filter:
                    continue
                warn_stray_files(ses_dir)
                for dt_dir in sorted(p for p in ses_dir.iterdir() if p.is_dir()):
                    scan_datatype_dir(dt_dir, subject, session)
        else:
            for dt_dir in sorted(p for p in sub_dir.iterdir() if p.is_dir()):
                scan_datatype_dir(dt_dir, subject, None)

    # Attach JSON sidecars by matching stem (extension-stripped name).
    indexed: list[BidsFile] = []
    for f in files:
        stem = str(f.relative_path)
        for ext in IMAGING_EXTENSIONS:
            if stem.endswith(ext):
                stem = stem[: -len(ext)]
                break
        sidecar = json_stems.get(stem)
        indexed.append(BidsFile(f.relative_path, f.entities, f.size_bytes, sidecar))

    indexed.sort(key=lambda f: str(f.relative_path))
    subject_labels = tuple(sorted({f.entities.subject for f in indexed}))
    if not subject_labels:
        raise DatasetError(f"zero subjects indexed under {root}")

    return BidsDataset(
        root=root,
        files=tuple(indexed),
        subjects=subject_labels,
        warnings=tuple(warnings),
    )


def group_stacks(dataset: BidsDataset) -> tuple[list[StackGroup], list[DatasetWarning]]:
    """Partition T2w files into one group per (subject, session) pair.

    Subjects or sessions without any T2w file are omitted from the groups
    and reported in the returned warning list.
    """
    buckets: dict[tuple[str, str | None], list[BidsFile]] = {}
    seen_pairs: set[tuple[str, str | None]] = set()
    for f in dataset.files:
        pair = (f.entities.subject, f.entities.session)
        seen_pairs.add(pair)
        if f.entities.suffix == "T2w":
            buckets.setdefault(pair, []).append(f)

    warnings = [
        DatasetWarning(
            "no-t2w-stacks",
            f"sub-{subject}" + (f"/ses-{session}" if session else ""),
            "no T2w stacks found; skipped",
        )
        for subject, session in sorted(seen_pairs - set(buckets), key=lambda p: (p[0], p[1] or ""))
    ]

    groups = [
        StackGroup(subject, session, tuple(sorted(stacks, key=_stack_sort_key)))
        for (subject, session), stacks in sorted(buckets.items(), key=lambda p: (p[0][0], p[0][1] or ""))
    ]
    return groups, warnings


def derive_output_path(
    entities: BidsEntities,
    pipeline_name: str,
    stage_label: str,
    new_suffix: str,
    new_extension: str,
) -> PurePosixPath:
    """Name a derivative output under ``derivatives/<pipeline_name>/``.

    The filename carries the source entities plus ``desc-<stage_label>``
    and the new suffix/extension; its basename re-parses with
    :func:`parse_filename`.
    """
    if not _LABEL_RE.match(stage_label):
        raise BidsError(f"stage label must be alphanumeric, got {stage_label!r}")
    if not re.match(r"^[a-zA-Z0-9_-]+$", pipeline_name):
        raise BidsError(f"bad pipeline name {pipeline_name!r}")
    extra = dict(entities.extra)
    extra["desc"] = stage_label
    derived = BidsEntities(
        subject=entities.subject,
        suffix=new_suffix,
        extension=new_extension,
        session=entities.session,
        run=entities.run,
        acquisition=entities.acquisition,
        datatype=entities.datatype or "anat",
        extra=extra,
    )
    return PurePosixPath("derivatives", pipeline_name) / derived.directory / format_entities(derived)


def serialize_dataset(dataset: BidsDataset) -> str:
    """Canonical JSON form of the index, for digests and determinism checks.

    Deliberately excludes the root location so identical trees serialize
    identically wherever they live.
    """
    payload = {
        "subjects": list(dataset.subjects),
        "files": [
            {
                "path": str(f.relative_path),
                "size": f.size_bytes,
                "sidecar": str(f.sidecar) if f.sidecar else None,
                "entities": {
                    "subject": f.entities.subject,
                    "session": f.entities.session,
                    "run": f.entities.run,
                    "acquisition": f.entities.acquisition,
                    "datatype": f.entities.datatype,
                    "suffix": f.entities.suffix,
                    "extension": f.entities.extension,
                    "extra": f.entities.extra,
                },
            }
            for f in dataset.files
        ],
        "warnings": [
            {"code": w.code, "path": w.path, "message": w.message} for w in dataset.warnings
        ],
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
