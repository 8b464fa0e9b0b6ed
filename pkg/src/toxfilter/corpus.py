"""Corpus loading, validation, streaming, and writing.

The canonical on-disk format is UTF-8 JSONL with exactly the keys
``id``, ``image_path``, ``caption`` per line. A compatibility loader
accepts the common pretraining layout (JSON array of elements with
``id``, ``image``, and a ``conversations`` list) and extracts the
caption from the first assistant-role turn.

Canonical loading and writing are streaming: records are materialized
one at a time regardless of corpus size, and readers expose an
instrumented counter (``records_read``) so tests can assert the bound.
The compat loader is a one-shot conversion path and parses its JSON
array eagerly.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from .errors import CorpusError

__all__ = [
    "DatasetRecord",
    "CorpusManifest",
    "CorpusStream",
    "validate_record",
    "load_corpus",
    "load_llava_compat",
    "write_corpus",
    "IdDigest",
    "digest_ids",
]

CANONICAL_FIELDS = ("id", "image_path", "caption")

# Conversation roles treated as the assistant side of a compat element.
ASSISTANT_ROLES = frozenset({"assistant", "gpt"})


@dataclass(frozen=True)
class DatasetRecord:
    """One image-caption pair, the unit the whole pipeline filters by."""

    id: str
    image_path: str
    caption: str


@dataclass(frozen=True)
class CorpusManifest:
    """Summary of a fully streamed corpus, used for checkpoint binding."""

    record_count: int
    id_digest: str
    source_path: str


class IdDigest:
    """Incremental content hash over an ordered ID sequence.

    Each ID is fed as UTF-8 followed by a newline, so any single-ID
    change (or reordering) changes the digest.
    """

    def __init__(self) -> None:
        self._hash = hashlib.sha256()
        self.count = 0

    def update(self, record_id: str) -> None:
        self._hash.update(record_id.encode("utf-8"))
        self._hash.update(b"\n")
        self.count += 1

    def hexdigest(self) -> str:
        return self._hash.hexdigest()


def digest_ids(ids: Iterable[str]) -> str:
    """Digest of an ordered ID sequence (convenience wrapper)."""
    digest = IdDigest()
    for record_id in ids:
        digest.update(record_id)
    return digest.hexdigest()


def validate_record(raw: object, *, line: int | None = None) -> DatasetRecord:
    """Validate one parsed object into a DatasetRecord.

    ``id`` must be a non-empty string, ``image_path`` a non-empty string,
    and ``caption`` a string (empty allowed).
    """
    if not isinstance(raw, dict):
        raise CorpusError(f"record must be an object, got {type(raw).__name__}", line=line)
    for key in CANONICAL_FIELDS:
        if key not in raw:
            raise CorpusError(f"record missing {key!r} field", line=line)
    record_id = raw["id"]
    if not isinstance(record_id, str):
        raise CorpusError(f"id must be a string, got {type(record_id).__name__}", line=line)
    if not record_id:
        raise CorpusError("empty id", line=line)
    image_path = raw["image_path"]
    if not isinstance(image_path, str) or not image_path:
        raise CorpusError(f"image_path must be a non-empty string (record {record_id!r})", line=line)
    caption = raw["caption"]
    if not isinstance(caption, str):
        raise CorpusError(
            f"caption must be a string, got {type(caption).__name__} (record {record_id!r})",
            line=line,
        )
    return DatasetRecord(id=record_id, image_path=image_path, caption=caption)


class CorpusStream:
    """Single-pass record iterator with duplicate-ID detection.

    The manifest is available from :attr:`manifest` only after the
    stream is exhausted; ``records_read`` counts records parsed so far
    and is the instrumented streaming counter.
    """

    def __init__(self, records: Iterator[DatasetRecord], source_path: str):
        self._records = records
        self._source_path = source_path
        self._digest = IdDigest()
        self._seen: set[str] = set()
        self._exhausted = False
        self.records_read = 0

    def __iter__(self) -> Iterator[DatasetRecord]:
        return self

    def __next__(self) -> DatasetRecord:
        try:
            record = next(self._records)
        except StopIteration:
            self._exhausted = True
            raise
        if record.id in self._seen:
            raise CorpusError(f"duplicate id {record.id!r}", record_id=record.id)
        self._seen.add(record.id)
        self._digest.update(record.id)
        self.records_read += 1
        return record

    @property
    def manifest(self) -> CorpusManifest:
        if not self._exhausted:
            raise RuntimeError("manifest is only available after the stream is exhausted")
        return CorpusManifest(
            record_count=self._digest.count,
            id_digest=self._digest.hexdigest(),
            source_path=self._source_path,
        )


def _iter_jsonl(path: Path) -> Iterator[DatasetRecord]:
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                raw = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"invalid JSON: {exc.msg}", line=lineno) from None
            yield validate_record(raw, line=lineno)


def load_corpus(path: str | Path, format: str = "canonical-jsonl") -> CorpusStream:
    """Stream a corpus file as DatasetRecords.

    Records are yielded in file order with constant record memory; the
    stream's manifest reflects exactly the yielded records once exhausted.
    Duplicate IDs and malformed lines (reported with their 1-based line
    number) are hard errors.
    """
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"corpus file not found: {path}")
    if format == "canonical-jsonl":
        records = _iter_jsonl(path)
    elif format == "llava-compat":
        records = _iter_llava_compat(path)
    else:
        raise CorpusError(f"unknown corpus format: {format!r}")
    return CorpusStream(records, source_path=str(path))


def _compat_caption(element: dict, element_id: str) -> str:
    conversations = element.get("conversations")
    if not isinstance(conversations, list):
        raise CorpusError(f"element {element_id!r} has no conversations list")
    for turn in conversations:
        if isinstance(turn, dict) and turn.get("from") in ASSISTANT_ROLES:
            value = turn.get("value")
            if not isinstance(value, str):
                raise CorpusError(f"element {element_id!r} assistant turn has no text value")
            return value
    raise CorpusError(f"element {element_id!r} has no assistant-role turn")


def _iter_llava_compat(path: Path) -> Iterator[DatasetRecord]:
    with open(path, "r", encoding="utf-8") as handle:
        data = json.load(handle)
    if not isinstance(data, list):
        raise CorpusError("compat corpus must be a JSON array")
    for index, element in enumerate(data):
        if not isinstance(element, dict):
            raise CorpusError(f"element {index} is not an object")
        element_id = element.get("id")
        if not isinstance(element_id, str) or not element_id:
            raise CorpusError(f"element {index} missing id")
        image = element.get("image")
        if not isinstance(image, str) or not image:
            raise CorpusError(f"element {element_id!r} missing image")
        yield DatasetRecord(id=element_id, image_path=image, caption=_compat_caption(element, element_id))


def load_llava_compat(path: str | Path) -> CorpusStream:
    """Stream a pretraining-layout JSON array as DatasetRecords."""
    return load_corpus(path, format="llava-compat")


def write_corpus(records: Iterable[DatasetRecord], path: str | Path) -> CorpusManifest:
    """Write records as canonical JSONL with fixed field order.

    The file is written to a temporary sibling and renamed into place on
    success, so a failed write never leaves a partial corpus at ``path``.
    """
    path = Path(path)
    tmp_path = path.with_name(path.name + ".tmp")
    digest = IdDigest()
    try:
        with open(tmp_path, "w", encoding="utf-8") as handle:
            for record in records:
                payload = {"id": record.id, "image_path": record.image_path, "caption": record.caption}
                handle.write(json.dumps(payload, ensure_ascii=False))
                handle.write("\n")
                digest.update(record.id)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        tmp_path.unlink(missing_ok=True)
        raise
    return CorpusManifest(record_count=digest.count, id_digest=digest.hexdigest(), source_path=str(path))
