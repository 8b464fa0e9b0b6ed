"""Safety taxonomy, verdict schema, and text-toxicity flagging semantics.

Images are rated Safe/Unsafe against nine policy categories (O1..O9);
captions are scored against the six standard text-toxicity labels and
flagged when any per-label confidence strictly exceeds the threshold.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

from .errors import VerdictError

__all__ = [
    "SafetyCategory",
    "Rating",
    "SafetyVerdict",
    "TextLabel",
    "TextToxicityScores",
    "TextFlag",
    "category_from_code",
    "parse_verdict",
    "serialize_verdict",
    "verdict_from_dict",
    "verdict_to_dict",
    "flag_from_scores",
    "scores_from_dict",
    "scores_to_dict",
]


class SafetyCategory(enum.Enum):
    """The nine image-safety policy categories, keyed by code."""

    O1 = "Hate/Harassment"
    O2 = "Violence"
    O3 = "Sexual Content"
    O4 = "Nudity"
    O5 = "Criminal Planning"
    O6 = "Weapons/Substance Abuse"
    O7 = "Self-Harm"
    O8 = "Animal Cruelty"
    O9 = "Disasters/Emergencies"

    @property
    def code(self) -> str:
        return self.name

    @property
    def display_name(self) -> str:
        return self.value

    @property
    def label(self) -> str:
        """Chart/report label, e.g. ``O1 Hate/Harassment``."""
        return f"{self.name} {self.value}"


def category_from_code(code: str) -> SafetyCategory:
    """Exact, case-sensitive lookup of a category by its O1..O9 code."""
    try:
        return SafetyCategory[code]
    except KeyError:
        raise VerdictError(f"unknown safety category code: {code!r}") from None


class Rating(str, enum.Enum):
    SAFE = "Safe"
    UNSAFE = "Unsafe"


@dataclass(frozen=True)
class SafetyVerdict:
    """Image classifier output: rating, category, and free-text rationale.

    Unsafe verdicts carry exactly one category; Safe verdicts carry none.
    """

    record_id: str
    rating: Rating
    category: SafetyCategory | None
    rationale: str

    def __post_init__(self) -> None:
        if self.rating is Rating.UNSAFE and self.category is None:
            raise VerdictError(f"Unsafe verdict for {self.record_id!r} must carry a category")
        if self.rating is Rating.SAFE and self.category is not None:
            raise VerdictError(f"Safe verdict for {self.record_id!r} must not carry a category")

    @property
    def is_unsafe(self) -> bool:
        return self.rating is Rating.UNSAFE


def verdict_to_dict(verdict: SafetyVerdict) -> dict:
    """Wire form of a verdict: ``{rating, category, rationale}`` (no id)."""
    return {
        "rating": verdict.rating.value,
        "category": verdict.category.code if verdict.category else None,
        "rationale": verdict.rationale,
    }


def serialize_verdict(verdict: SafetyVerdict) -> str:
    return json.dumps(verdict_to_dict(verdict), ensure_ascii=False)


def verdict_from_dict(data: dict, record_id: str) -> SafetyVerdict:
    """Validate a parsed verdict object and bind it to ``record_id``.

    Rating is folded case-insensitively to Safe/Unsafe; category codes are
    case-sensitive (a closed machine vocabulary).
    """
    if not isinstance(data, dict):
        raise VerdictError(f"verdict must be a JSON object, got {type(data).__name__}")
    for key in ("rating", "category", "rationale"):
        if key not in data:
            raise VerdictError(f"verdict missing {key!r} key")

    raw_rating = data["rating"]
    if not isinstance(raw_rating, str):
        raise VerdictError(f"rating must be a string, got {type(raw_rating).__name__}")
    folded = raw_rating.strip().lower()
    if folded == "safe":
        rating = Rating.SAFE
    elif folded == "unsafe":
        rating = Rating.UNSAFE
    else:
        raise VerdictError(f"rating must be Safe or Unsafe, got {raw_rating!r}")

    raw_category = data["category"]
    category = None
    if raw_category is not None:
        if not isinstance(raw_category, str):
            raise VerdictError(f"category must be a string or null, got {type(raw_category).__name__}")
        category = category_from_code(raw_category)

    rationale = data["rationale"]
    if not isinstance(rationale, str):
        raise VerdictError(f"rationale must be a string, got {type(rationale).__name__}")

    return SafetyVerdict(record_id=record_id, rating=rating, category=category, rationale=rationale)


def parse_verdict(raw: str, record_id: str) -> SafetyVerdict:
    """Parse a classifier response body into a verdict bound to ``record_id``.

    The body must be a strict JSON object; anything else (including
    free-text refusals) is a schema violation for the caller to handle.
    """
    try:
        data = json.loads(raw)
    except (json.JSONDecodeError, TypeError) as exc:
        raise VerdictError(f"verdict body is not valid JSON: {exc}") from None
    return verdict_from_dict(data, record_id)


class TextLabel(str, enum.Enum):
    """The six text-toxicity labels scored as independent probabilities."""

    TOXIC = "toxic"
    SEVERE_TOXIC = "severe_toxic"
    OBSCENE = "obscene"
    THREAT = "threat"
    INSULT = "insult"
    IDENTITY_HATE = "identity_hate"


@dataclass(frozen=True)
class TextToxicityScores:
    """Per-label probabilities in [0, 1] for one record's caption."""

    record_id: str
    scores: dict[TextLabel, float]

    def __post_init__(self) -> None:
        missing = [label.value for label in TextLabel if label not in self.scores]
        if missing:
            raise VerdictError(f"scores for {self.record_id!r} missing labels: {missing}")
        extra = [key for key in self.scores if not isinstance(key, TextLabel)]
        if extra:
            raise VerdictError(f"scores for {self.record_id!r} carry unknown labels: {extra}")
        for label, value in self.scores.items():
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise VerdictError(f"score for {label.value} must be a number")
            if not 0.0 <= value <= 1.0:
                raise VerdictError(f"score for {label.value} out of [0, 1]: {value}")


def scores_to_dict(scores: TextToxicityScores) -> dict:
    """Wire form: ``{"scores": {label: probability}}`` in canonical label order."""
    return {"scores": {label.value: float(scores.scores[label]) for label in TextLabel}}


def scores_from_dict(data: dict, record_id: str) -> TextToxicityScores:
    if not isinstance(data, dict) or not isinstance(data.get("scores"), dict):
        raise VerdictError("scores payload must be an object with a 'scores' mapping")
    raw = data["scores"]
    parsed: dict[TextLabel, float] = {}
    for label in TextLabel:
        if label.value not in raw:
            raise VerdictError(f"scores payload missing label {label.value!r}")
        parsed[label] = raw[label.value]
    return TextToxicityScores(record_id=record_id, scores=parsed)


@dataclass(frozen=True)
class TextFlag:
    """A caption flagged because at least one label exceeded the threshold."""

    record_id: str
    triggering_labels: tuple[TextLabel, ...]
    max_score: float

    def __post_init__(self) -> None:
        if not self.triggering_labels:
            raise VerdictError(f"text flag for {self.record_id!r} has no triggering labels")


def flag_from_scores(scores: TextToxicityScores, threshold: float) -> TextFlag | None:
    """Flag a record iff some label score is strictly greater than ``threshold``.

    Returns None when no label exceeds it; a score exactly equal to the
    threshold never flags.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold out of [0, 1]: {threshold}")
    triggering = tuple(label for label in TextLabel if scores.scores[label] > threshold)
    if not triggering:
        return None
    return TextFlag(
        record_id=scores.record_id,
        triggering_labels=triggering,
        max_score=max(scores.scores[label] for label in triggering),
    )
