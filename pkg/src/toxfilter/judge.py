"""Judge refinement: second-pass review of Unsafe image verdicts.

Each Unsafe verdict is paired with an operator-supplied preamble
(system-prompt text) and sent to a judge backend; only IDs the judge
confirms as unsafe survive. Judge responses must be strict JSON
``{"unsafe": bool, "reason": str}`` — free-text affirmations are parse
errors, never mined heuristically.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .backends import BackendConfig, resolve_backend
from .errors import JudgeError, ProtocolError
from .taxonomy import SafetyVerdict, serialize_verdict

log = logging.getLogger(__name__)

__all__ = [
    "JudgePrompt",
    "JudgeDecision",
    "RefineResult",
    "render_judge_prompt",
    "parse_judge_response",
    "refine_flags",
    "judge_verdict",
]


@dataclass(frozen=True)
class JudgePrompt:
    """Preamble plus the serialized verdict it is judging."""

    preamble: str
    verdict_payload: str

    @property
    def text(self) -> str:
        """Full prompt: the preamble verbatim, then the verdict JSON."""
        return f"{self.preamble}\n\n{self.verdict_payload}"


@dataclass(frozen=True)
class JudgeDecision:
    record_id: str
    unsafe: bool
    reason: str


def render_judge_prompt(preamble: str, verdict: SafetyVerdict) -> JudgePrompt:
    """Build the judge prompt for one Unsafe verdict.

    The verdict is serialized as JSON, so rationales survive byte-exact
    (embedded newlines included) through a parse round-trip.
    """
    if not preamble:
        raise JudgeError("judge preamble must be non-empty")
    if not verdict.is_unsafe:
        raise JudgeError(f"verdict for {verdict.record_id!r} is Safe; only Unsafe verdicts are judged")
    return JudgePrompt(preamble=preamble, verdict_payload=serialize_verdict(verdict))


def parse_judge_response(raw: str, record_id: str) -> JudgeDecision:
    """Parse a judge response body; strict JSON only."""
    try:
        data = json.loads(raw)
    except (json.JSONDecodeError, TypeError) as exc:
        raise JudgeError(f"judge response is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise JudgeError(f"judge response must be an object, got {type(data).__name__}")
    for key in ("unsafe", "reason"):
        if key not in data:
            raise JudgeError(f"judge response missing {key!r} key")
    unsafe = data["unsafe"]
    if not isinstance(unsafe, bool):
        raise JudgeError(f"judge 'unsafe' must be a boolean, got {type(unsafe).__name__}")
    reason = data["reason"]
    if not isinstance(reason, str):
        raise JudgeError(f"judge 'reason' must be a string, got {type(reason).__name__}")
    return JudgeDecision(record_id=record_id, unsafe=unsafe, reason=reason)


@dataclass
class RefineResult:
    """Outcome of one judge pass over a batch of Unsafe verdicts.

    ``confirmed_ids`` is the judge-confirmed subset; rejected IDs are
    retained as safe and reported separately. Per-record failures are
    quarantined into ``errors`` (an UNDECIDED bucket) rather than
    failing the batch.
    """

    confirmed_ids: set[str] = field(default_factory=set)
    decisions: dict[str, JudgeDecision] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def rejected_ids(self) -> set[str]:
        return {rid for rid, decision in self.decisions.items() if not decision.unsafe}


def refine_flags(
    verdicts: list[SafetyVerdict],
    preamble: str,
    backend: BackendConfig | object,
    workers: int = 1,
) -> RefineResult:
    """Judge every Unsafe verdict once and collect the confirmed ID set.

    ``backend`` may be a BackendConfig or an already resolved judge
    backend (anything with ``judge(verdict, preamble)``). Verdicts with
    duplicate record IDs are judged once. The result is a set, so input
    order never affects it.
    """
    if not preamble:
        raise JudgeError("judge preamble must be non-empty")
    for verdict in verdicts:
        if not verdict.is_unsafe:
            raise JudgeError(f"verdict for {verdict.record_id!r} is Safe; refine expects Unsafe input")

    judge_backend = backend
    if isinstance(backend, BackendConfig):
        judge_backend = resolve_backend(backend, "judge")

    unique: dict[str, SafetyVerdict] = {}
    for verdict in verdicts:
        unique.setdefault(verdict.record_id, verdict)

    result = RefineResult()

    def _one(verdict: SafetyVerdict) -> tuple[str, JudgeDecision | None, str | None]:
        decision, error = judge_verdict(judge_backend, verdict, preamble)
        return verdict.record_id, decision, error

    batch = list(unique.values())
    if workers <= 1 or len(batch) <= 1:
        outcomes = map(_one, batch)
    else:
        pool = ThreadPoolExecutor(max_workers=workers)
        try:
            outcomes = list(pool.map(_one, batch))
        finally:
            pool.shutdown()

    for record_id, decision, error in outcomes:
        if error is not None:
            log.warning("judge quarantined %s: %s", record_id, error)
            result.errors[record_id] = error
            continue
        result.decisions[record_id] = decision
        if decision.unsafe:
            result.confirmed_ids.add(record_id)

    return result


def judge_verdict(
    judge_backend, verdict: SafetyVerdict, preamble: str
) -> tuple[JudgeDecision | None, str | None]:
    """Judge a single verdict, mapping per-record failures to an error string.

    Returns (decision, None) on success and (None, reason) when the
    record must be quarantined. Transport failures (backend unreachable
    after retries) propagate: they are stage-level, a rerun can fix them.
    """
    try:
        decision = judge_backend.judge(verdict, preamble)
    except (JudgeError, ProtocolError) as exc:
        return None, str(exc)
    if decision.record_id != verdict.record_id:
        return None, f"judge answered for {decision.record_id!r}"
    return decision, None
