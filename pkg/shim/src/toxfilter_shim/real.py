"""Real-mode model wrappers.

Each wrapper lazily loads an operator-configured checkpoint the first
time it is used and maps the model's native output onto the wire
schemas. Any safety VLM, multi-label toxicity classifier, and
instruction-following judge that can honor the schemas will do; the
checkpoints are deliberately not hardcoded here.

Model output that cannot be mapped onto the schema raises
ModelOutputError, which the service turns into a 502 (the shim never
forwards schema-invalid bodies).
"""

from __future__ import annotations

import json
import threading

from .mock import TEXT_LABELS

VALID_CATEGORIES = {f"O{k}" for k in range(1, 10)}

IMAGE_PROMPT = (
    "Assess this image against the nine content-safety policy categories "
    "O1 Hate/Harassment, O2 Violence, O3 Sexual Content, O4 Nudity, "
    "O5 Criminal Planning, O6 Weapons/Substance Abuse, O7 Self-Harm, "
    "O8 Animal Cruelty, O9 Disasters/Emergencies. Respond with exactly one "
    'JSON object: {"rating": "Safe"|"Unsafe", "category": "O1".."O9"|null, '
    '"rationale": "<short explanation>"}'
)


class ModelOutputError(Exception):
    """The underlying model produced output the wire schema cannot carry."""


class _LazyPipeline:
    """Thread-safe, load-once wrapper around a transformers pipeline."""

    def __init__(self, task: str, model_id: str, **kwargs):
        self.task = task
        self.model_id = model_id
        self.kwargs = kwargs
        self._pipeline = None
        self._lock = threading.Lock()

    def get(self):
        with self._lock:
            if self._pipeline is None:
                from transformers import pipeline

                self._pipeline = pipeline(self.task, model=self.model_id, **self.kwargs)
            return self._pipeline


def _extract_json_object(text: str) -> dict:
    """Parse the trailing JSON object out of a model completion."""
    start = text.find("{")
    end = text.rfind("}")
    if start < 0 or end <= start:
        raise ModelOutputError(f"no JSON object in model output: {text[:200]!r}")
    try:
        data = json.loads(text[start : end + 1])
    except json.JSONDecodeError as exc:
        raise ModelOutputError(f"model output is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ModelOutputError("model output JSON is not an object")
    return data


class RealImageClassifier:
    """Safety VLM behind the image verdict schema."""

    def __init__(self, model_id: str):
        self._pipe = _LazyPipeline("image-text-to-text", model_id)

    def classify(self, image_path: str) -> dict:
        pipe = self._pipe.get()
        messages = [
            {
                "role": "user",
                "content": [
                    {"type": "image", "url": image_path},
                    {"type": "text", "text": IMAGE_PROMPT},
                ],
            }
        ]
        completion = pipe(text=messages, max_new_tokens=256, return_full_text=False)
        text = completion[0]["generated_text"]
        data = _extract_json_object(text if isinstance(text, str) else str(text))
        rating = str(data.get("rating", "")).strip().capitalize()
        if rating not in ("Safe", "Unsafe"):
            raise ModelOutputError(f"model rating {data.get('rating')!r} is not Safe/Unsafe")
        category = data.get("category")
        if rating == "Unsafe":
            if category not in VALID_CATEGORIES:
                raise ModelOutputError(f"Unsafe verdict with invalid category {category!r}")
        else:
            category = None
        return {"rating": rating, "category": category, "rationale": str(data.get("rationale", ""))}


class RealTextClassifier:
    """Multi-label toxicity classifier behind the scores schema.

    The checkpoint's label names are normalized (lowercase, spaces to
    underscores) and matched against the six wire labels; labels the
    model does not emit score 0.0.
    """

    def __init__(self, model_id: str):
        self._pipe = _LazyPipeline("text-classification", model_id, top_k=None)

    def classify(self, text: str) -> dict:
        pipe = self._pipe.get()
        outputs = pipe(text)
        if outputs and isinstance(outputs[0], list):
            outputs = outputs[0]
        scores = {label: 0.0 for label in TEXT_LABELS}
        for item in outputs:
            name = str(item.get("label", "")).strip().lower().replace(" ", "_")
            if name in scores:
                scores[name] = max(0.0, min(1.0, float(item["score"])))
        return {"scores": scores}


class RealJudge:
    """Instruction-following judge behind the {unsafe, reason} schema."""

    def __init__(self, model_id: str):
        self._pipe = _LazyPipeline("text-generation", model_id)

    def judge(self, preamble: str, verdict: dict) -> dict:
        pipe = self._pipe.get()
        messages = [
            {"role": "system", "content": preamble},
            {"role": "user", "content": json.dumps(verdict, ensure_ascii=False)},
        ]
        completion = pipe(messages, max_new_tokens=128, return_full_text=False)
        text = completion[0]["generated_text"]
        data = _extract_json_object(text if isinstance(text, str) else str(text))
        if not isinstance(data.get("unsafe"), bool):
            raise ModelOutputError("judge output must carry a boolean 'unsafe'")
        return {"unsafe": data["unsafe"], "reason": str(data.get("reason", ""))}
