"""Crash-safe stage checkpoints: a digest-bound header plus an append-only log.

Each stage owns two sidecar files in the checkpoint directory:

    <stage>.meta.json   {"stage": str, "corpus_digest": str}
    <stage>.log         JSONL, one entry per fully processed record,
                        {"index": int, "id": str, ...outcome}

Entries are committed in input order, so the log is a prefix of the
work and ``completed_through`` is simply the last committed index. A
torn trailing line (partial write at crash time) is discarded on load
and its record reprocessed; damage anywhere else is corruption and a
hard error.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import CorpusManifest
from .errors import CheckpointError, CheckpointMismatchError

log = logging.getLogger(__name__)

__all__ = ["CheckpointState", "StageCheckpoint", "load_checkpoint", "resume"]

STAGES = ("image", "text", "judge")


@dataclass
class CheckpointState:
    """Loaded view of one stage's checkpoint."""

    stage: str
    corpus_digest: str
    entries: list[dict] = field(default_factory=list)

    @property
    def completed_through(self) -> int:
        """Index of the last fully processed record; -1 when none."""
        return len(self.entries) - 1


def _meta_path(directory: Path, stage: str) -> Path:
    return directory / f"{stage}.meta.json"


def _log_path(directory: Path, stage: str) -> Path:
    return directory / f"{stage}.log"


def load_checkpoint(directory: str | Path, stage: str) -> CheckpointState | None:
    """Load a stage checkpoint, or None when the stage has never run."""
    if stage not in STAGES:
        raise CheckpointError(f"unknown checkpoint stage: {stage!r}")
    directory = Path(directory)
    meta_path = _meta_path(directory, stage)
    if not meta_path.exists():
        return None
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header {meta_path}: {exc}") from None
    if not isinstance(meta, dict) or "corpus_digest" not in meta or meta.get("stage") != stage:
        raise CheckpointError(f"malformed checkpoint header {meta_path}")

    state = CheckpointState(stage=stage, corpus_digest=meta["corpus_digest"])
    log_path = _log_path(directory, stage)
    if not log_path.exists():
        return state

    lines = log_path.read_bytes().split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    for position, line in enumerate(lines):
        try:
            entry = json.loads(line)
        except json.JSONDecodeError:
            if position == len(lines) - 1:
                # Torn trailing write: drop it, the record is reprocessed.
                log.warning("discarding torn trailing entry in %s", log_path)
                break
            raise CheckpointError(f"corrupt checkpoint log {log_path} at entry {position}") from None
        if not isinstance(entry, dict) or entry.get("index") != position:
            raise CheckpointError(
                f"checkpoint log {log_path} entry {position} out of sequence"
            )
        state.entries.append(entry)
    return state


def resume(state: CheckpointState, manifest: CorpusManifest) -> int:
    """Return the first unprocessed record index for a loaded checkpoint.

    The checkpoint must have been written against the same corpus: a
    digest mismatch is a hard error, never a silent restart.
    """
    if state.corpus_digest != manifest.id_digest:
        raise CheckpointMismatchError(
            f"checkpoint for stage {state.stage!r} was written against a different corpus "
            f"(checkpoint digest {state.corpus_digest[:12]}…, corpus {manifest.id_digest[:12]}…)"
        )
    return state.completed_through + 1


class StageCheckpoint:
    """Single-writer handle for one stage's checkpoint files.

    ``open()`` loads any prior progress (validating the digest binding)
    and returns the first unprocessed index; ``append()`` commits one
    entry. The log is fsynced every ``fsync_every`` appends and on close,
    bounding rework after a crash.
    """

    def __init__(
        self,
        directory: str | Path,
        stage: str,
        corpus_digest: str,
        fsync_every: int = 64,
    ):
        if stage not in STAGES:
            raise CheckpointError(f"unknown checkpoint stage: {stage!r}")
        self.directory = Path(directory)
        self.stage = stage
        self.corpus_digest = corpus_digest
        self.fsync_every = max(1, fsync_every)
        self.entries: list[dict] = []
        self._handle = None
        self._next_index = 0
        self._since_sync = 0

    def open(self) -> int:
        """Prepare the checkpoint and return the first unprocessed index."""
        self.directory.mkdir(parents=True, exist_ok=True)
        state = load_checkpoint(self.directory, self.stage)
        if state is None:
            _meta_path(self.directory, self.stage).write_text(
                json.dumps({"stage": self.stage, "corpus_digest": self.corpus_digest}),
                encoding="utf-8",
            )
            self.entries = []
        else:
            if state.corpus_digest != self.corpus_digest:
                raise CheckpointMismatchError(
                    f"checkpoint for stage {self.stage!r} was written against a different corpus"
                )
            self.entries = state.entries
        self._next_index = len(self.entries)

        # Truncate away any torn tail so appends start at a clean boundary.
        log_path = _log_path(self.directory, self.stage)
        rewrite = log_path.exists() and not self._log_is_clean(log_path, len(self.entries))
        mode = "w" if rewrite or not log_path.exists() else "a"
        self._handle = open(log_path, mode, encoding="utf-8")
        if rewrite:
            for entry in self.entries:
                self._handle.write(json.dumps(entry, ensure_ascii=False) + "\n")
            self._handle.flush()
            os.fsync(self._handle.fileno())
        return self._next_index

    @staticmethod
    def _log_is_clean(path: Path, committed: int) -> bool:
        """True when the log holds exactly the committed entries, newline-terminated."""
        data = path.read_bytes()
        if not data:
            return committed == 0
        if not data.endswith(b"\n"):
            return False
        return data.count(b"\n") == committed

    def append(self, entry: dict) -> None:
        """Commit one per-record outcome; entries must arrive in input order."""
        if self._handle is None:
            raise CheckpointError("checkpoint not opened")
        if entry.get("index") != self._next_index:
            raise CheckpointError(
                f"out-of-order checkpoint append: expected index {self._next_index}, "
                f"got {entry.get('index')}"
            )
        self._handle.write(json.dumps(entry, ensure_ascii=False) + "\n")
        self.entries.append(entry)
        self._next_index += 1
        self._since_sync += 1
        if self._since_sync >= self.fsync_every:
            self._handle.flush()
            os.fsync(self._handle.fileno())
            self._since_sync = 0

    def close(self) -> None:
        if self._handle is not None:
            self._handle.flush()
            os.fsync(self._handle.fileno())
            self._handle.close()
            self._handle = None

    def __enter__(self) -> "StageCheckpoint":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()
