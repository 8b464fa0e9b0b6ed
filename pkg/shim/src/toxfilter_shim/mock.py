"""Deterministic mock classifiers: every answer is a pure function of the request.

Image rule: the first marker token found in image_path (lowest category
code wins) yields an Unsafe verdict for that category; no marker means
Safe. Text rule: a MOCK_<LABEL> token in the text pins that label to
0.99; every other label scores 0.01. Judge rule: confirm unless the
verdict rationale contains the reject token.
"""

from __future__ import annotations

import re

TEXT_LABELS = ("toxic", "severe_toxic", "obscene", "threat", "insult", "identity_hate")

DEFAULT_MARKERS = {f"#O{k}": f"O{k}" for k in range(1, 10)}
REJECT_TOKEN = "MOCK_REJECT"

MOCK_HIGH = 0.99
MOCK_LOW = 0.01

_TOKEN_PATTERNS = {
    label: re.compile(rf"\bMOCK_{label.upper()}\b") for label in TEXT_LABELS
}


def classify_image(image_path: str, markers: dict[str, str]) -> dict:
    matches = [(code, token) for token, code in markers.items() if token in image_path]
    if not matches:
        return {"rating": "Safe", "category": None, "rationale": "no marker matched"}
    code, token = min(matches)
    return {"rating": "Unsafe", "category": code, "rationale": f"matched marker {token}"}


def classify_text(text: str) -> dict:
    scores = {
        label: MOCK_HIGH if _TOKEN_PATTERNS[label].search(text) else MOCK_LOW
        for label in TEXT_LABELS
    }
    return {"scores": scores}


def judge(rationale: str) -> dict:
    if REJECT_TOKEN in rationale:
        return {"unsafe": False, "reason": f"rejected: rationale contains {REJECT_TOKEN}"}
    return {"unsafe": True, "reason": "confirmed by mock judge"}
