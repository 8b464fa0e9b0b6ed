"""Staged toxicity scan: image stage, judge refinement, text stage, union, filter.

Records flow through two parallel branches: the image branch classifies
every image and sends Unsafe verdicts to the judge for confirmation; the
text branch scores every caption against the toxicity threshold. Flagged
IDs from both branches are merged by set union and the corpus is
filtered by ID.

Stages commit per-record outcomes in input order to an append-only
checkpoint log, so interrupted runs resume without reclassifying
committed records, and final artifacts are produced by deterministic
sort/merge: worker count never changes any output byte.

Error policy: schema-invalid responses and refusals quarantine the
record (rerunning cannot fix malformed model output); transport failures
after retries abort the stage (the checkpoint makes the rerun cheap).
"""

from __future__ import annotations

import enum
import itertools
import json
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

from .backends import BackendConfig, resolve_backend
from .checkpoint import StageCheckpoint
from .corpus import CorpusManifest, DatasetRecord, digest_ids, load_corpus, write_corpus
from .errors import ConfigError, ProtocolError, ToxfilterError, VerdictError
from .judge import JudgeDecision, judge_verdict
from .taxonomy import (
    SafetyVerdict,
    TextFlag,
    TextLabel,
    flag_from_scores,
    verdict_from_dict,
    verdict_to_dict,
)
from .util import atomic_write_text

log = logging.getLogger(__name__)

__all__ = [
    "FlagSource",
    "FlagRecord",
    "MergedFlagManifest",
    "PipelineConfig",
    "ImageStageResult",
    "TextStageResult",
    "JudgeStageResult",
    "FilterStream",
    "FilterResult",
    "RunResult",
    "run_image_stage",
    "run_text_stage",
    "run_judge_stage",
    "merge_flags",
    "filter_corpus",
    "run_all",
]


class FlagSource(str, enum.Enum):
    IMAGE = "ImagePipeline"
    TEXT = "TextPipeline"


@dataclass(frozen=True)
class FlagRecord:
    """One flagged record ID with its provenance and evidence."""

    record_id: str
    source: FlagSource
    evidence: SafetyVerdict | TextFlag
    judge: JudgeDecision | None = None

    def __post_init__(self) -> None:
        if self.source is FlagSource.IMAGE:
            if not isinstance(self.evidence, SafetyVerdict) or not self.evidence.is_unsafe:
                raise ToxfilterError(
                    f"image flag for {self.record_id!r} requires an Unsafe verdict as evidence"
                )
            if self.judge is None or not self.judge.unsafe:
                raise ToxfilterError(
                    f"image flag for {self.record_id!r} requires a confirming judge decision"
                )
        else:
            if not isinstance(self.evidence, TextFlag):
                raise ToxfilterError(f"text flag for {self.record_id!r} requires a TextFlag as evidence")
        if self.evidence.record_id != self.record_id:
            raise ToxfilterError(f"flag evidence id mismatch for {self.record_id!r}")


def flag_record_to_dict(flag: FlagRecord) -> dict:
    if flag.source is FlagSource.IMAGE:
        evidence = verdict_to_dict(flag.evidence)
    else:
        evidence = {
            "triggering_labels": [label.value for label in flag.evidence.triggering_labels],
            "max_score": flag.evidence.max_score,
        }
    judge = None
    if flag.judge is not None:
        judge = {"unsafe": flag.judge.unsafe, "reason": flag.judge.reason}
    return {"record_id": flag.record_id, "source": flag.source.value, "evidence": evidence, "judge": judge}


def flag_record_from_dict(data: dict) -> FlagRecord:
    try:
        source = FlagSource(data["source"])
        record_id = data["record_id"]
        judge = None
        if data.get("judge") is not None:
            judge = JudgeDecision(
                record_id=record_id, unsafe=data["judge"]["unsafe"], reason=data["judge"]["reason"]
            )
        if source is FlagSource.IMAGE:
            evidence: SafetyVerdict | TextFlag = verdict_from_dict(data["evidence"], record_id)
        else:
            evidence = TextFlag(
                record_id=record_id,
                triggering_labels=tuple(TextLabel(v) for v in data["evidence"]["triggering_labels"]),
                max_score=data["evidence"]["max_score"],
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise ToxfilterError(f"malformed flag record: {exc}") from None
    return FlagRecord(record_id=record_id, source=source, evidence=evidence, judge=judge)


@dataclass(frozen=True)
class MergedFlagManifest:
    """Sorted unique union of flagged IDs with per-source counts and overlap."""

    ids: tuple[str, ...]
    per_source_counts: dict[str, int]
    overlap_count: int

    def __post_init__(self) -> None:
        if list(self.ids) != sorted(set(self.ids)):
            raise ToxfilterError("merged manifest ids must be strictly ascending and unique")
        if sum(self.per_source_counts.values()) - self.overlap_count != len(self.ids):
            raise ToxfilterError("merged manifest violates inclusion-exclusion")

    def to_dict(self) -> dict:
        return {
            "ids": list(self.ids),
            "per_source_counts": dict(self.per_source_counts),
            "overlap_count": self.overlap_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MergedFlagManifest":
        try:
            return cls(
                ids=tuple(data["ids"]),
                per_source_counts={str(k): int(v) for k, v in data["per_source_counts"].items()},
                overlap_count=int(data["overlap_count"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ToxfilterError(f"malformed merged manifest: {exc}") from None


def merge_flags(*flag_sets: Iterable[FlagRecord]) -> MergedFlagManifest:
    """Union one or more flag lists by record ID.

    Each input list contributes its distinct IDs per source to the
    per-source counts; the overlap is whatever inclusion-exclusion
    requires (for the usual image-list + text-list case, exactly the
    intersection size). Commutative, associative, and idempotent over
    the underlying ID sets.
    """
    source_counts: dict[FlagSource, int] = {}
    union: set[str] = set()
    for flags in flag_sets:
        in_this_list: dict[FlagSource, set[str]] = {}
        for flag in flags:
            in_this_list.setdefault(flag.source, set()).add(flag.record_id)
            union.add(flag.record_id)
        for source, ids in in_this_list.items():
            source_counts[source] = source_counts.get(source, 0) + len(ids)
    counts = {
        source.value: count
        for source, count in sorted(source_counts.items(), key=lambda kv: kv[0].value)
    }
    overlap = sum(source_counts.values()) - len(union)
    return MergedFlagManifest(ids=tuple(sorted(union)), per_source_counts=counts, overlap_count=overlap)


# ---------------------------------------------------------------------------
# Checkpointed, order-committed stage execution
# ---------------------------------------------------------------------------


def _ordered_parallel(items: Iterable, fn: Callable, workers: int) -> Iterator:
    """Map fn over items with a bounded worker pool, yielding in input order."""
    if workers <= 1:
        for item in items:
            yield fn(item)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        window = workers * 2
        pending: deque = deque()
        iterator = iter(items)
        for item in itertools.islice(iterator, window):
            pending.append(pool.submit(fn, item))
        for item in iterator:
            result = pending.popleft().result()
            pending.append(pool.submit(fn, item))
            yield result
        while pending:
            yield pending.popleft().result()


def _committed_entries(
    items: Iterable,
    process: Callable[[object], dict],
    checkpoint: StageCheckpoint | None,
    workers: int,
) -> list[dict]:
    """Run process over items, committing outcomes in input order.

    With a checkpoint, previously committed entries are replayed and
    their records skipped, so each record's outcome is committed exactly
    once across interrupted runs.
    """
    entries: list[dict] = []
    start = 0
    if checkpoint is not None:
        start = checkpoint.open()
        entries = list(checkpoint.entries)
    try:
        pending = (item for index, item in enumerate(items) if index >= start)
        for offset, outcome in enumerate(_ordered_parallel(pending, process, workers)):
            entry = {"index": start + offset, **outcome}
            if checkpoint is not None:
                checkpoint.append(entry)
            entries.append(entry)
    finally:
        if checkpoint is not None:
            checkpoint.close()
    return entries


@dataclass
class ImageStageResult:
    """Image-classification pass: Unsafe verdicts plus bookkeeping."""

    verdicts: list[SafetyVerdict]
    scanned: int
    safe_count: int
    quarantined: dict[str, str]


def run_image_stage(
    records: Iterable[DatasetRecord],
    backend: BackendConfig | object,
    checkpoint: StageCheckpoint | None = None,
    workers: int = 1,
) -> ImageStageResult:
    """Classify every record's image, keeping only Unsafe verdicts.

    Safe verdicts are counted but not retained; the returned verdicts are
    sorted by record ID. Schema-invalid backend responses quarantine the
    record and the scan continues.
    """
    backend_obj = resolve_backend(backend, "image") if isinstance(backend, BackendConfig) else backend

    def process(record: DatasetRecord) -> dict:
        try:
            verdict = backend_obj.classify_image(record)
        except (ProtocolError, VerdictError) as exc:
            return {"id": record.id, "outcome": "quarantined", "error": str(exc)}
        if verdict.is_unsafe:
            return {"id": record.id, "outcome": "unsafe", "verdict": verdict_to_dict(verdict)}
        return {"id": record.id, "outcome": "safe"}

    entries = _committed_entries(records, process, checkpoint, workers)
    verdicts = []
    safe_count = 0
    quarantined: dict[str, str] = {}
    for entry in entries:
        if entry["outcome"] == "unsafe":
            verdicts.append(verdict_from_dict(entry["verdict"], entry["id"]))
        elif entry["outcome"] == "safe":
            safe_count += 1
        else:
            quarantined[entry["id"]] = entry["error"]
    verdicts.sort(key=lambda v: v.record_id)
    return ImageStageResult(
        verdicts=verdicts, scanned=len(entries), safe_count=safe_count, quarantined=quarantined
    )


@dataclass
class TextStageResult:
    """Caption-scoring pass: threshold flags plus bookkeeping."""

    flags: list[TextFlag]
    scanned: int
    quarantined: dict[str, str]


def run_text_stage(
    records: Iterable[DatasetRecord],
    backend: BackendConfig | object,
    threshold: float = 0.8,
    checkpoint: StageCheckpoint | None = None,
    workers: int = 1,
) -> TextStageResult:
    """Score every caption and flag records passing the threshold rule.

    Flags exactly the records whose scores pass flag_from_scores at
    ``threshold``, sorted by record ID.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"text threshold out of [0, 1]: {threshold}")
    backend_obj = resolve_backend(backend, "text") if isinstance(backend, BackendConfig) else backend

    def process(record: DatasetRecord) -> dict:
        try:
            scores = backend_obj.classify_text(record)
        except (ProtocolError, VerdictError) as exc:
            return {"id": record.id, "outcome": "quarantined", "error": str(exc)}
        flag = flag_from_scores(scores, threshold)
        if flag is None:
            return {"id": record.id, "outcome": "clear"}
        return {
            "id": record.id,
            "outcome": "flag",
            "triggering_labels": [label.value for label in flag.triggering_labels],
            "max_score": flag.max_score,
        }

    entries = _committed_entries(records, process, checkpoint, workers)
    flags = []
    quarantined: dict[str, str] = {}
    for entry in entries:
        if entry["outcome"] == "flag":
            flags.append(
                TextFlag(
                    record_id=entry["id"],
                    triggering_labels=tuple(TextLabel(v) for v in entry["triggering_labels"]),
                    max_score=entry["max_score"],
                )
            )
        elif entry["outcome"] == "quarantined":
            quarantined[entry["id"]] = entry["error"]
    flags.sort(key=lambda f: f.record_id)
    return TextStageResult(flags=flags, scanned=len(entries), quarantined=quarantined)


@dataclass
class JudgeStageResult:
    """Judge pass over Unsafe verdicts: confirmed flags plus bookkeeping."""

    flag_records: list[FlagRecord]
    judged: int
    rejected: dict[str, str]
    quarantined: dict[str, str]


def run_judge_stage(
    verdicts: list[SafetyVerdict],
    preamble: str,
    backend: BackendConfig | object,
    checkpoint: StageCheckpoint | None = None,
    workers: int = 1,
) -> JudgeStageResult:
    """Judge each Unsafe verdict once, emitting a FlagRecord per confirmed ID.

    Rejected IDs are retained as safe and reported; per-record judge
    failures are quarantined (UNDECIDED), never fatal.
    """
    backend_obj = resolve_backend(backend, "judge") if isinstance(backend, BackendConfig) else backend

    def process(verdict: SafetyVerdict) -> dict:
        decision, error = judge_verdict(backend_obj, verdict, preamble)
        if error is not None:
            return {"id": verdict.record_id, "outcome": "quarantined", "error": error}
        if decision.unsafe:
            return {
                "id": verdict.record_id,
                "outcome": "confirmed",
                "reason": decision.reason,
                "verdict": verdict_to_dict(verdict),
            }
        return {"id": verdict.record_id, "outcome": "rejected", "reason": decision.reason}

    entries = _committed_entries(verdicts, process, checkpoint, workers)
    flag_records = []
    rejected: dict[str, str] = {}
    quarantined: dict[str, str] = {}
    for entry in entries:
        if entry["outcome"] == "confirmed":
            flag_records.append(
                FlagRecord(
                    record_id=entry["id"],
                    source=FlagSource.IMAGE,
                    evidence=verdict_from_dict(entry["verdict"], entry["id"]),
                    judge=JudgeDecision(record_id=entry["id"], unsafe=True, reason=entry["reason"]),
                )
            )
        elif entry["outcome"] == "rejected":
            rejected[entry["id"]] = entry["reason"]
        else:
            quarantined[entry["id"]] = entry["error"]
    flag_records.sort(key=lambda f: f.record_id)
    return JudgeStageResult(
        flag_records=flag_records, judged=len(entries), rejected=rejected, quarantined=quarantined
    )


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterResult:
    """Removal bookkeeping, available once the clean stream is exhausted."""

    removed_ids: tuple[str, ...]
    unknown_ids: tuple[str, ...]
    clean_count: int

    @property
    def removed_count(self) -> int:
        return len(self.removed_ids)


class FilterStream:
    """Yields records not in the flag manifest, preserving corpus order.

    After exhaustion, :attr:`result` reports the removed IDs (the
    intersection of manifest IDs with corpus IDs, sorted) and any
    manifest IDs that never appeared in the corpus (warned, not fatal).
    """

    def __init__(self, records: Iterable[DatasetRecord], manifest: MergedFlagManifest):
        self._records = iter(records)
        self._flagged = set(manifest.ids)
        self._removed: set[str] = set()
        self._clean_count = 0
        self._result: FilterResult | None = None

    def __iter__(self) -> Iterator[DatasetRecord]:
        return self

    def __next__(self) -> DatasetRecord:
        for record in self._records:
            if record.id in self._flagged:
                self._removed.add(record.id)
                continue
            self._clean_count += 1
            return record
        unknown = sorted(self._flagged - self._removed)
        for record_id in unknown:
            log.warning("unknown flagged id: %s (not present in corpus)", record_id)
        self._result = FilterResult(
            removed_ids=tuple(sorted(self._removed)),
            unknown_ids=tuple(unknown),
            clean_count=self._clean_count,
        )
        raise StopIteration

    @property
    def result(self) -> FilterResult:
        if self._result is None:
            raise RuntimeError("filter result is only available after the stream is exhausted")
        return self._result


def filter_corpus(records: Iterable[DatasetRecord], manifest: MergedFlagManifest) -> FilterStream:
    """Drop every record whose ID is in the merged manifest."""
    return FilterStream(records, manifest)


# ---------------------------------------------------------------------------
# End-to-end run
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    """Everything one end-to-end run needs."""

    corpus_path: str
    image_backend: BackendConfig
    text_backend: BackendConfig
    judge_backend: BackendConfig
    preamble_path: str | None = None
    corpus_format: str = "canonical-jsonl"
    text_threshold: float = 0.8
    worker_count: int = 1
    checkpoint_dir: str | None = None
    clean_path: str = "clean.jsonl"
    removed_path: str = "removed.json"
    merged_path: str = "merged.json"
    flags_path: str = "flags.jsonl"
    report_path: str = "report.json"
    csv_path: str | None = None
    svg_path: str | None = None
    summary_path: str | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.text_threshold <= 1.0:
            raise ConfigError(f"text_threshold out of [0, 1]: {self.text_threshold}")
        if self.worker_count < 1:
            raise ConfigError(f"worker_count must be >= 1, got {self.worker_count}")

    def resolved_csv_path(self) -> str:
        return self.csv_path or str(Path(self.report_path).with_suffix(".csv"))

    def resolved_svg_path(self) -> str:
        return self.svg_path or str(Path(self.report_path).with_suffix(".svg"))

    def resolved_summary_path(self) -> str:
        return self.summary_path or str(Path(self.report_path).with_suffix(".summary.json"))


@dataclass
class RunResult:
    corpus_manifest: CorpusManifest
    image: ImageStageResult
    judge: JudgeStageResult
    text: TextStageResult
    merged: MergedFlagManifest
    filter: FilterResult
    clean_manifest: CorpusManifest
    summary: dict
    artifacts: dict[str, str]


def _stage_checkpoint(config: PipelineConfig, stage: str, digest: str) -> StageCheckpoint | None:
    if config.checkpoint_dir is None:
        return None
    return StageCheckpoint(config.checkpoint_dir, stage, digest)


def run_all(config: PipelineConfig) -> RunResult:
    """Execute the full pipeline and write every artifact atomically.

    Passes over the corpus: one manifest pass (binds checkpoints and
    catches malformed input early), one per scan branch, one filter pass.
    """
    preamble = "judge preamble unused by built-in judge"
    if config.preamble_path is not None:
        preamble = Path(config.preamble_path).read_text(encoding="utf-8")
        if not preamble:
            raise ConfigError(f"preamble file {config.preamble_path} is empty")
    elif config.judge_backend.kind == "remote":
        raise ConfigError("a preamble file is required when the judge backend is remote")

    def stream():
        return load_corpus(config.corpus_path, format=config.corpus_format)

    manifest_stream = stream()
    for _ in manifest_stream:
        pass
    corpus_manifest = manifest_stream.manifest
    digest = corpus_manifest.id_digest

    image = run_image_stage(
        stream(),
        config.image_backend,
        checkpoint=_stage_checkpoint(config, "image", digest),
        workers=config.worker_count,
    )

    judge_digest = digest_ids(v.record_id for v in image.verdicts)
    judge = run_judge_stage(
        image.verdicts,
        preamble,
        config.judge_backend,
        checkpoint=_stage_checkpoint(config, "judge", judge_digest),
        workers=config.worker_count,
    )

    text = run_text_stage(
        stream(),
        config.text_backend,
        threshold=config.text_threshold,
        checkpoint=_stage_checkpoint(config, "text", digest),
        workers=config.worker_count,
    )

    text_flag_records = [
        FlagRecord(record_id=flag.record_id, source=FlagSource.TEXT, evidence=flag)
        for flag in text.flags
    ]
    merged = merge_flags(judge.flag_records, text_flag_records)

    clean_stream = filter_corpus(stream(), merged)
    clean_manifest = write_corpus(clean_stream, config.clean_path)
    filter_result = clean_stream.result

    all_flags = sorted(
        judge.flag_records + text_flag_records, key=lambda f: (f.record_id, f.source.value)
    )
    flag_lines = "".join(json.dumps(flag_record_to_dict(f), ensure_ascii=False) + "\n" for f in all_flags)
    atomic_write_text(config.flags_path, flag_lines)

    atomic_write_text(
        config.merged_path, json.dumps(merged.to_dict(), indent=2, ensure_ascii=False) + "\n"
    )
    removed_payload = {
        "ids": list(filter_result.removed_ids),
        "count": filter_result.removed_count,
        "unknown_flagged_ids": list(filter_result.unknown_ids),
    }
    atomic_write_text(
        config.removed_path, json.dumps(removed_payload, indent=2, ensure_ascii=False) + "\n"
    )

    quarantined_total = len(image.quarantined) + len(judge.quarantined) + len(text.quarantined)
    summary = {
        "scanned": corpus_manifest.record_count,
        "safe": image.safe_count,
        "unsafe": len(image.verdicts),
        "confirmed": len(judge.flag_records),
        "rejected": len(judge.rejected),
        "quarantined": quarantined_total,
        "stages": {
            "image": {"scanned": image.scanned, "quarantined": sorted(image.quarantined)},
            "judge": {"judged": judge.judged, "quarantined": sorted(judge.quarantined)},
            "text": {
                "scanned": text.scanned,
                "flagged": len(text.flags),
                "quarantined": sorted(text.quarantined),
            },
        },
    }
    atomic_write_text(
        config.resolved_summary_path(), json.dumps(summary, indent=2, ensure_ascii=False) + "\n"
    )

    from .report import build_report, emit_report

    report = build_report(
        merged,
        all_flags,
        corpus_manifest,
        image_flagged_raw=len(image.verdicts),
        quarantined=quarantined_total,
        removed_count=filter_result.removed_count,
    )
    atomic_write_text(config.report_path, emit_report(report, "json").decode("utf-8"))
    atomic_write_text(config.resolved_csv_path(), emit_report(report, "csv").decode("utf-8"))
    atomic_write_text(config.resolved_svg_path(), emit_report(report, "svg").decode("utf-8"))

    artifacts = {
        "clean": config.clean_path,
        "removed": config.removed_path,
        "merged": config.merged_path,
        "flags": config.flags_path,
        "report": config.report_path,
        "csv": config.resolved_csv_path(),
        "svg": config.resolved_svg_path(),
        "summary": config.resolved_summary_path(),
    }
    return RunResult(
        corpus_manifest=corpus_manifest,
        image=image,
        judge=judge,
        text=text,
        merged=merged,
        filter=filter_result,
        clean_manifest=clean_manifest,
        summary=summary,
        artifacts=artifacts,
    )
