from __future__ import annotations

import json
from pathlib import Path

import pytest

from toxfilter import (
    DatasetRecord,
    FlagRecord,
    FlagSource,
    JudgeDecision,
    Rating,
    SafetyCategory,
    SafetyVerdict,
    TextFlag,
    TextLabel,
    TextToxicityScores,
)

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


def make_record(rid: str, marker: str = "", caption: str = "a quiet street") -> DatasetRecord:
    return DatasetRecord(id=rid, image_path=f"images/{rid}{marker}.jpg", caption=caption)


def make_scores(rid: str = "r", **overrides: float) -> TextToxicityScores:
    scores = {label: 0.0 for label in TextLabel}
    for name, value in overrides.items():
        scores[TextLabel(name)] = value
    return TextToxicityScores(record_id=rid, scores=scores)


def unsafe_verdict(rid: str, category: SafetyCategory = SafetyCategory.O2, rationale: str = "graphic") -> SafetyVerdict:
    return SafetyVerdict(record_id=rid, rating=Rating.UNSAFE, category=category, rationale=rationale)


def image_flag(rid: str, category: SafetyCategory = SafetyCategory.O2) -> FlagRecord:
    return FlagRecord(
        record_id=rid,
        source=FlagSource.IMAGE,
        evidence=unsafe_verdict(rid, category),
        judge=JudgeDecision(record_id=rid, unsafe=True, reason="confirmed"),
    )


def text_flag(rid: str, label: TextLabel = TextLabel.TOXIC, score: float = 0.9) -> FlagRecord:
    return FlagRecord(
        record_id=rid,
        source=FlagSource.TEXT,
        evidence=TextFlag(record_id=rid, triggering_labels=(label,), max_score=score),
    )


def write_raw_jsonl(path: Path, rows: list[dict]) -> Path:
    path.write_text("".join(json.dumps(row, ensure_ascii=False) + "\n" for row in rows), encoding="utf-8")
    return path
