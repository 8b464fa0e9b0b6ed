"""Classifier backends: remote wire-protocol client and deterministic built-ins.

Three backend roles exist: image safety classification, text toxicity
scoring, and judge refinement. A remote backend speaks JSON over HTTP:

    POST /v1/classify/image  {"id", "image_path", "image_b64"?}
        -> {"rating": "Safe"|"Unsafe", "category": "O1".."O9"|null, "rationale": str}
    POST /v1/classify/text   {"id", "text"}
        -> {"scores": {"toxic": f, "severe_toxic": f, "obscene": f,
                       "threat": f, "insult": f, "identity_hate": f}}
    POST /v1/judge           {"id", "preamble", "verdict": {...}}
        -> {"unsafe": bool, "reason": str}
    GET  /v1/health          -> {"status": "ok"}

The built-ins (marker-token stub for images, noisy-OR lexicon for text,
confirm-all for the judge) are pure functions of their inputs so the
whole pipeline is testable offline.
"""

from __future__ import annotations

import functools
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import httpx

from .corpus import DatasetRecord
from .errors import ConfigError, ProtocolError, TransportError, VerdictError
from .taxonomy import (
    Rating,
    SafetyCategory,
    SafetyVerdict,
    TextLabel,
    TextToxicityScores,
    category_from_code,
    scores_from_dict,
    verdict_from_dict,
    verdict_to_dict,
)

log = logging.getLogger(__name__)

__all__ = [
    "BackendConfig",
    "Lexicon",
    "StubRuleset",
    "RemoteBackend",
    "StubImageBackend",
    "LexiconTextBackend",
    "ConfirmAllJudgeBackend",
    "classify_image",
    "classify_text",
    "lexicon_score",
    "stub_classify_image",
    "resolve_backend",
]

BACKEND_KINDS = ("remote", "builtin-lexicon", "builtin-stub", "builtin-confirm-all")


@dataclass(frozen=True)
class BackendConfig:
    """How to reach one classifier backend.

    ``kind`` selects the implementation; remote backends need an
    ``endpoint_url``, the lexicon built-in a ``lexicon_path``, the stub
    built-in a ``ruleset_path``. ``max_retries`` bounds re-attempts after
    transport failures (total attempts = 1 + max_retries).
    """

    kind: str
    endpoint_url: str | None = None
    timeout: float = 30.0
    max_retries: int = 2
    lexicon_path: str | None = None
    ruleset_path: str | None = None
    max_inflight: int = 8

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"unknown backend kind: {self.kind!r}")
        if self.kind == "remote" and not self.endpoint_url:
            raise ConfigError("remote backend requires endpoint_url")
        if self.kind == "builtin-lexicon" and not self.lexicon_path:
            raise ConfigError("builtin-lexicon backend requires lexicon_path")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")


# ---------------------------------------------------------------------------
# Built-in text classifier: weighted lexicon with noisy-OR combination
# ---------------------------------------------------------------------------


class Lexicon:
    """Per-label term lists with weights in (0, 1].

    Matched weights combine per label as ``1 - prod(1 - w_i)`` (noisy-OR),
    which stays in [0, 1] and never decreases when a term is added.
    """

    def __init__(self, entries: dict[TextLabel, list[tuple[str, float]]]):
        self.entries: dict[TextLabel, list[tuple[str, float]]] = {label: [] for label in TextLabel}
        self._patterns: dict[TextLabel, list[tuple[re.Pattern, float]]] = {label: [] for label in TextLabel}
        for label, terms in entries.items():
            seen: set[str] = set()
            for term, weight in terms:
                term = term.lower()
                if not term:
                    raise ConfigError(f"lexicon term under {label.value} is empty")
                if term in seen:
                    raise ConfigError(f"duplicate lexicon term {term!r} under {label.value}")
                if not 0.0 < weight <= 1.0:
                    raise ConfigError(f"lexicon weight for {term!r} out of (0, 1]: {weight}")
                seen.add(term)
                self.entries[label].append((term, weight))
                # Whole-word, case-insensitive match; avoids substring false positives.
                pattern = re.compile(rf"\b{re.escape(term)}\b", re.IGNORECASE)
                self._patterns[label].append((pattern, weight))

    @classmethod
    def from_file(cls, path: str | Path) -> "Lexicon":
        """Load ``{label: [{"term": str, "weight": num}]}`` JSON."""
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load lexicon {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"lexicon {path} must be a JSON object")
        entries: dict[TextLabel, list[tuple[str, float]]] = {}
        for key, terms in data.items():
            try:
                label = TextLabel(key)
            except ValueError:
                raise ConfigError(f"lexicon {path} has unknown label {key!r}") from None
            if not isinstance(terms, list):
                raise ConfigError(f"lexicon entries for {key} must be a list")
            parsed = []
            for item in terms:
                if not isinstance(item, dict) or "term" not in item or "weight" not in item:
                    raise ConfigError(f"lexicon entry under {key} must have term and weight")
                parsed.append((str(item["term"]), float(item["weight"])))
            entries[label] = parsed
        return cls(entries)

    def matched_weights(self, text: str, label: TextLabel) -> list[float]:
        return [weight for pattern, weight in self._patterns[label] if pattern.search(text)]


def lexicon_score(text: str, lexicon: Lexicon, record_id: str = "") -> TextToxicityScores:
    """Score a text against the lexicon: noisy-OR of matched term weights.

    A label with no matching term scores 0.0 (the empty product).
    """
    scores: dict[TextLabel, float] = {}
    for label in TextLabel:
        survival = 1.0
        for weight in lexicon.matched_weights(text, label):
            survival *= 1.0 - weight
        scores[label] = 1.0 - survival
    return TextToxicityScores(record_id=record_id, scores=scores)


# ---------------------------------------------------------------------------
# Built-in image classifier: marker tokens in the image path
# ---------------------------------------------------------------------------


class StubRuleset:
    """Marker-token table mapping path substrings to safety categories."""

    def __init__(self, markers: dict[str, SafetyCategory]):
        if len(set(markers)) != len(markers):
            raise ConfigError("stub ruleset marker tokens must be unique")
        for token in markers:
            if not token:
                raise ConfigError("stub ruleset marker token is empty")
        self.markers = dict(markers)

    @classmethod
    def from_file(cls, path: str | Path) -> "StubRuleset":
        """Load ``{"markers": {token: category_code}}`` JSON."""
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load stub ruleset {path}: {exc}") from None
        if not isinstance(data, dict) or not isinstance(data.get("markers"), dict):
            raise ConfigError(f"stub ruleset {path} must be an object with a 'markers' mapping")
        try:
            markers = {token: category_from_code(code) for token, code in data["markers"].items()}
        except VerdictError as exc:
            raise ConfigError(f"stub ruleset {path}: {exc}") from None
        return cls(markers)


def stub_classify_image(record: DatasetRecord, ruleset: StubRuleset) -> SafetyVerdict:
    """Deterministic image verdict from marker tokens in the image path.

    When several markers match, the one whose category code sorts lowest
    (O1 before O2, ties broken by token) wins, so multi-marker paths are
    classified the same way on every run.
    """
    matches = [
        (category.code, token)
        for token, category in ruleset.markers.items()
        if token in record.image_path
    ]
    if not matches:
        return SafetyVerdict(
            record_id=record.id, rating=Rating.SAFE, category=None, rationale="no marker matched"
        )
    code, token = min(matches)
    return SafetyVerdict(
        record_id=record.id,
        rating=Rating.UNSAFE,
        category=SafetyCategory[code],
        rationale=f"matched marker {token}",
    )


class StubImageBackend:
    def __init__(self, ruleset: StubRuleset):
        self.ruleset = ruleset

    def classify_image(self, record: DatasetRecord) -> SafetyVerdict:
        return stub_classify_image(record, self.ruleset)


class LexiconTextBackend:
    def __init__(self, lexicon: Lexicon):
        self.lexicon = lexicon

    def classify_text(self, record: DatasetRecord) -> TextToxicityScores:
        return lexicon_score(record.caption, self.lexicon, record_id=record.id)


class ConfirmAllJudgeBackend:
    """Judge that confirms every verdict it is shown; for offline runs."""

    def judge(self, verdict: SafetyVerdict, preamble: str) -> "JudgeDecision":
        from .judge import JudgeDecision

        return JudgeDecision(record_id=verdict.record_id, unsafe=True, reason="confirmed by built-in judge")


# ---------------------------------------------------------------------------
# Remote wire-protocol client
# ---------------------------------------------------------------------------


class RemoteBackend:
    """HTTP client for the classify/judge wire protocol.

    One shared connection-reusing client serves all calls; concurrent use
    is bounded by ``max_inflight`` connections. 5xx responses and
    transport errors are retried up to ``max_retries`` times, everything
    else that is not a schema-valid 200 becomes a ProtocolError carrying
    the raw body.
    """

    def __init__(self, config: BackendConfig, transport: httpx.BaseTransport | None = None):
        if config.kind != "remote":
            raise ConfigError(f"RemoteBackend requires kind=remote, got {config.kind}")
        self.config = config
        self._client = httpx.Client(
            base_url=config.endpoint_url,
            timeout=config.timeout,
            limits=httpx.Limits(max_connections=config.max_inflight),
            transport=transport,
        )

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, payload: dict) -> str:
        attempts = self.config.max_retries + 1
        last_error = ""
        for attempt in range(1, attempts + 1):
            try:
                response = self._client.post(path, json=payload)
            except httpx.HTTPError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                log.debug("attempt %d/%d against %s failed: %s", attempt, attempts, path, last_error)
                continue
            if response.status_code >= 500:
                last_error = f"HTTP {response.status_code}"
                log.debug("attempt %d/%d against %s failed: %s", attempt, attempts, path, last_error)
                continue
            if response.status_code != 200:
                raise ProtocolError(
                    f"{path} returned HTTP {response.status_code}", raw_body=response.text
                )
            return response.text
        raise TransportError(
            f"{path} failed after {attempts} attempts: {last_error}", attempts=attempts
        )

    def health(self) -> bool:
        try:
            response = self._client.get("/v1/health")
        except httpx.HTTPError:
            return False
        return response.status_code == 200

    def classify_image(self, record: DatasetRecord) -> SafetyVerdict:
        body = self._post("/v1/classify/image", {"id": record.id, "image_path": record.image_path})
        try:
            data = json.loads(body)
            return verdict_from_dict(data, record.id)
        except (json.JSONDecodeError, VerdictError) as exc:
            raise ProtocolError(f"invalid image verdict: {exc}", raw_body=body) from None

    def classify_text(self, record: DatasetRecord) -> TextToxicityScores:
        body = self._post("/v1/classify/text", {"id": record.id, "text": record.caption})
        try:
            data = json.loads(body)
            return scores_from_dict(data, record.id)
        except (json.JSONDecodeError, VerdictError) as exc:
            raise ProtocolError(f"invalid text scores: {exc}", raw_body=body) from None

    def judge(self, verdict: SafetyVerdict, preamble: str) -> "JudgeDecision":
        from .judge import parse_judge_response

        body = self._post(
            "/v1/judge",
            {"id": verdict.record_id, "preamble": preamble, "verdict": verdict_to_dict(verdict)},
        )
        return parse_judge_response(body, verdict.record_id)


# ---------------------------------------------------------------------------
# Resolution
# ---------------------------------------------------------------------------

_ROLE_KINDS = {
    "image": ("remote", "builtin-stub"),
    "text": ("remote", "builtin-lexicon"),
    "judge": ("remote", "builtin-confirm-all"),
}


@functools.lru_cache(maxsize=None)
def _resolve_cached(config: BackendConfig, role: str):
    return _resolve(config, role, transport=None)


def _resolve(config: BackendConfig, role: str, transport: httpx.BaseTransport | None):
    if role not in _ROLE_KINDS:
        raise ConfigError(f"unknown backend role: {role!r}")
    if config.kind not in _ROLE_KINDS[role]:
        raise ConfigError(f"backend kind {config.kind!r} cannot serve the {role} stage")
    if config.kind == "remote":
        return RemoteBackend(config, transport=transport)
    if config.kind == "builtin-stub":
        if not config.ruleset_path:
            raise ConfigError("builtin-stub backend requires ruleset_path")
        return StubImageBackend(StubRuleset.from_file(config.ruleset_path))
    if config.kind == "builtin-lexicon":
        return LexiconTextBackend(Lexicon.from_file(config.lexicon_path))
    return ConfirmAllJudgeBackend()


def resolve_backend(config: BackendConfig, role: str, transport: httpx.BaseTransport | None = None):
    """Turn a BackendConfig into a callable backend for ``role``.

    ``role`` is one of image/text/judge. Resolutions without a custom
    transport are cached, so repeated calls share lexicons, rulesets,
    and HTTP connection pools.
    """
    if transport is not None:
        return _resolve(config, role, transport)
    return _resolve_cached(config, role)


def classify_image(record: DatasetRecord, backend: BackendConfig) -> SafetyVerdict:
    """Classify one image via the configured backend; verdict is bound to the record id."""
    return resolve_backend(backend, "image").classify_image(record)


def classify_text(record: DatasetRecord, backend: BackendConfig) -> TextToxicityScores:
    """Score one caption via the configured backend."""
    return resolve_backend(backend, "text").classify_text(record)
