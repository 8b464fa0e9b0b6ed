"""Audit reporting: removal arithmetic, histograms, and chart emission.

The report ties every pipeline run together: corpus size, raw and
confirmed image flags, text flags, the union, overlap, and the clean
count, plus per-category and per-label histograms. It is emitted as
JSON (lossless round-trip), CSV (fixed ``metric,value`` layout), and a
standalone SVG bar chart with one labeled bar per nonzero histogram
entry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from xml.sax.saxutils import escape

from .corpus import CorpusManifest
from .errors import ToxfilterError
from .pipeline import FlagRecord, FlagSource, MergedFlagManifest
from .taxonomy import SafetyCategory, TextLabel

__all__ = [
    "AuditReport",
    "build_report",
    "overlap_stats",
    "emit_report",
    "report_to_dict",
    "report_from_dict",
]


@dataclass(frozen=True)
class AuditReport:
    """Aggregate counts and histograms for one pipeline run."""

    corpus_size: int
    image_flagged_raw: int
    image_confirmed: int
    text_flagged: int
    union_size: int
    overlap_count: int
    clean_size: int
    category_histogram: dict[SafetyCategory, int]
    label_histogram: dict[TextLabel, int]
    quarantined: int

    def __post_init__(self) -> None:
        counts = (
            self.corpus_size,
            self.image_flagged_raw,
            self.image_confirmed,
            self.text_flagged,
            self.union_size,
            self.overlap_count,
            self.clean_size,
            self.quarantined,
        )
        if any(value < 0 for value in counts):
            raise ToxfilterError("audit report counts must be non-negative")
        if self.union_size != self.image_confirmed + self.text_flagged - self.overlap_count:
            raise ToxfilterError("audit report violates inclusion-exclusion")
        if sum(self.category_histogram.values()) != self.image_confirmed:
            raise ToxfilterError("category histogram must sum to the confirmed image count")
        # Removed count is at most the union, so the clean count is bracketed.
        if not self.corpus_size - self.union_size <= self.clean_size <= self.corpus_size:
            raise ToxfilterError("clean count inconsistent with corpus and union sizes")


def overlap_stats(set_a: set[str], set_b: set[str]) -> dict[str, int]:
    """Exact set arithmetic between two flagged-ID sets."""
    set_a = set(set_a)
    set_b = set(set_b)
    return {
        "size_a": len(set_a),
        "size_b": len(set_b),
        "intersection": len(set_a & set_b),
        "union": len(set_a | set_b),
    }


def build_report(
    merged: MergedFlagManifest,
    flag_records: list[FlagRecord],
    corpus_manifest: CorpusManifest,
    *,
    image_flagged_raw: int,
    quarantined: int = 0,
    removed_count: int | None = None,
) -> AuditReport:
    """Assemble the audit report from one run's artifacts.

    ``removed_count`` is how many flagged IDs were actually present in
    the corpus; when omitted, every flagged ID is assumed present. The
    manifest and flag records must describe the same run.
    """
    flag_ids = {flag.record_id for flag in flag_records}
    if flag_ids != set(merged.ids):
        missing = sorted(set(merged.ids) - flag_ids)[:3]
        extra = sorted(flag_ids - set(merged.ids))[:3]
        raise ToxfilterError(
            f"merged manifest and flag records disagree (manifest-only {missing}, flags-only {extra})"
        )

    category_histogram = {category: 0 for category in SafetyCategory}
    label_histogram = {label: 0 for label in TextLabel}
    image_ids: set[str] = set()
    for flag in flag_records:
        if flag.source is FlagSource.IMAGE:
            if flag.record_id in image_ids:
                raise ToxfilterError(f"duplicate image flag for {flag.record_id!r}")
            image_ids.add(flag.record_id)
            category_histogram[flag.evidence.category] += 1
        else:
            for label in flag.evidence.triggering_labels:
                label_histogram[label] += 1

    image_confirmed = merged.per_source_counts.get(FlagSource.IMAGE.value, 0)
    text_flagged = merged.per_source_counts.get(FlagSource.TEXT.value, 0)
    if removed_count is None:
        removed_count = len(merged.ids)
    if image_flagged_raw < image_confirmed:
        raise ToxfilterError("raw image flag count cannot be below the confirmed count")

    return AuditReport(
        corpus_size=corpus_manifest.record_count,
        image_flagged_raw=image_flagged_raw,
        image_confirmed=image_confirmed,
        text_flagged=text_flagged,
        union_size=len(merged.ids),
        overlap_count=merged.overlap_count,
        clean_size=corpus_manifest.record_count - removed_count,
        category_histogram=category_histogram,
        label_histogram=label_histogram,
        quarantined=quarantined,
    )


def report_to_dict(report: AuditReport) -> dict:
    return {
        "corpus_size": report.corpus_size,
        "image_flagged_raw": report.image_flagged_raw,
        "image_confirmed": report.image_confirmed,
        "text_flagged": report.text_flagged,
        "union_size": report.union_size,
        "overlap_count": report.overlap_count,
        "clean_size": report.clean_size,
        "quarantined": report.quarantined,
        "category_histogram": {c.code: report.category_histogram.get(c, 0) for c in SafetyCategory},
        "label_histogram": {l.value: report.label_histogram.get(l, 0) for l in TextLabel},
    }


def report_from_dict(data: dict) -> AuditReport:
    try:
        return AuditReport(
            corpus_size=data["corpus_size"],
            image_flagged_raw=data["image_flagged_raw"],
            image_confirmed=data["image_confirmed"],
            text_flagged=data["text_flagged"],
            union_size=data["union_size"],
            overlap_count=data["overlap_count"],
            clean_size=data["clean_size"],
            quarantined=data["quarantined"],
            category_histogram={
                SafetyCategory[code]: count for code, count in data["category_histogram"].items()
            },
            label_histogram={TextLabel(name): count for name, count in data["label_histogram"].items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ToxfilterError(f"malformed audit report: {exc}") from None


CSV_HEADER = "metric,value"

_SCALAR_METRICS = (
    "corpus_size",
    "image_flagged_raw",
    "image_confirmed",
    "text_flagged",
    "union_size",
    "overlap_count",
    "clean_size",
    "quarantined",
)


def _emit_csv(report: AuditReport) -> str:
    data = report_to_dict(report)
    lines = [CSV_HEADER]
    lines.extend(f"{metric},{data[metric]}" for metric in _SCALAR_METRICS)
    lines.extend(f"category:{code},{count}" for code, count in data["category_histogram"].items())
    lines.extend(f"label:{name},{count}" for name, count in data["label_histogram"].items())
    return "\n".join(lines) + "\n"


# SVG layout constants (pixels).
_BAR_WIDTH = 34
_BAR_GAP = 14
_PLOT_HEIGHT = 220
_MARGIN = 40
_LABEL_SPACE = 150


def _svg_bars(entries: list[tuple[str, int]], x_offset: int, max_count: int, parts: list[str]) -> int:
    """Append one bar + label per entry; returns the next free x offset."""
    baseline = _MARGIN + _PLOT_HEIGHT
    for name, count in entries:
        # Full float precision keeps heights strictly monotone in counts.
        height = _PLOT_HEIGHT * count / max_count
        y = baseline - height
        parts.append(
            f'  <rect class="bar" x="{x_offset}" y="{y!r}" '
            f'width="{_BAR_WIDTH}" height="{height!r}" data-count="{count}"/>'
        )
        parts.append(
            f'  <text class="count" x="{x_offset + _BAR_WIDTH / 2:.1f}" y="{y - 6:.2f}" '
            f'text-anchor="middle">{count}</text>'
        )
        parts.append(
            f'  <text class="bar-label" x="{x_offset + _BAR_WIDTH / 2:.1f}" y="{baseline + 14}" '
            f'text-anchor="end" transform="rotate(-40 {x_offset + _BAR_WIDTH / 2:.1f} '
            f'{baseline + 14})">{escape(name)}</text>'
        )
        x_offset += _BAR_WIDTH + _BAR_GAP
    return x_offset


def _emit_svg(report: AuditReport) -> str:
    category_entries = [
        (category.label, count)
        for category, count in report.category_histogram.items()
        if count > 0
    ]
    label_entries = [(label.value, count) for label, count in report.label_histogram.items() if count > 0]
    # One shared scale across both charts: equal counts get equal heights.
    max_count = max([count for _, count in category_entries + label_entries] or [1])

    parts: list[str] = []
    x = _MARGIN
    if category_entries:
        parts.append(f'  <text class="title" x="{x}" y="{_MARGIN - 14}">Image safety categories</text>')
        x = _svg_bars(category_entries, x, max_count, parts)
        x += 3 * _BAR_GAP
    if label_entries:
        parts.append(f'  <text class="title" x="{x}" y="{_MARGIN - 14}">Caption toxicity labels</text>')
        x = _svg_bars(label_entries, x, max_count, parts)
    if not category_entries and not label_entries:
        parts.append(f'  <text class="title" x="{x}" y="{_MARGIN + 20}">No flagged records</text>')

    width = max(x + _MARGIN, 320)
    height = _MARGIN + _PLOT_HEIGHT + _LABEL_SPACE
    header = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n'
        "  <style>\n"
        "    .bar { fill: #4a7bd0; }\n"
        "    .title { font: bold 14px sans-serif; }\n"
        "    .count { font: 11px sans-serif; }\n"
        "    .bar-label { font: 11px sans-serif; }\n"
        "  </style>"
    )
    return header + "\n" + "\n".join(parts) + "\n</svg>\n"


def emit_report(report: AuditReport, format: str) -> bytes:
    """Render the report as json, csv, or svg bytes."""
    if format == "json":
        return (json.dumps(report_to_dict(report), indent=2, ensure_ascii=False) + "\n").encode("utf-8")
    if format == "csv":
        return _emit_csv(report).encode("utf-8")
    if format == "svg":
        return _emit_svg(report).encode("utf-8")
    raise ToxfilterError(f"unknown report format: {format!r}")
