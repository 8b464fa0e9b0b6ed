from __future__ import annotations

import random

import pytest

from toxfilter import (
    DatasetRecord,
    FlagSource,
    ProtocolError,
    SafetyCategory,
    StageCheckpoint,
    TextLabel,
    digest_ids,
    filter_corpus,
    merge_flags,
    run_image_stage,
    run_judge_stage,
    run_text_stage,
)
from toxfilter.backends import Lexicon, LexiconTextBackend, StubImageBackend, StubRuleset
from toxfilter.pipeline import FlagRecord, MergedFlagManifest, flag_record_from_dict, flag_record_to_dict

from .conftest import image_flag, make_record, text_flag, unsafe_verdict


def stub_backend(**markers: str) -> StubImageBackend:
    return StubImageBackend(StubRuleset({t: SafetyCategory[c] for t, c in markers.items()}))


def lexicon_backend() -> LexiconTextBackend:
    return LexiconTextBackend(Lexicon({TextLabel.OBSCENE: [("smut", 0.9)]}))


class ConfirmSubsetJudge:
    def __init__(self, confirm_ids):
        self.confirm_ids = set(confirm_ids)

    def judge(self, verdict, preamble):
        from toxfilter import JudgeDecision

        return JudgeDecision(verdict.record_id, verdict.record_id in self.confirm_ids, "mock")


class CrashAfter:
    """Delegates to a backend, raising before the (n+1)-th call."""

    def __init__(self, inner, n: int):
        self.inner = inner
        self.n = n
        self.calls = 0

    def _tick(self):
        if self.calls >= self.n:
            raise RuntimeError("injected crash")
        self.calls += 1

    def classify_image(self, record):
        self._tick()
        return self.inner.classify_image(record)

    def classify_text(self, record):
        self._tick()
        return self.inner.classify_text(record)

    def judge(self, verdict, preamble):
        self._tick()
        return self.inner.judge(verdict, preamble)


# --- image stage -------------------------------------------------------------


def test_image_stage_flags_planted_records():
    records = [make_record(f"r{i}", marker="#bad" if i in (3, 7) else "") for i in range(10)]
    result = run_image_stage(records, stub_backend(**{"#bad": "O2"}))
    assert [v.record_id for v in result.verdicts] == ["r3", "r7"]
    assert result.scanned == 10
    assert result.safe_count == 8
    assert result.quarantined == {}


class PoisonImageBackend:
    def __init__(self, bad_id):
        self.bad_id = bad_id
        self.inner = stub_backend(**{"#bad": "O2"})

    def classify_image(self, record):
        if record.id == self.bad_id:
            raise ProtocolError("refusal", raw_body="I cannot assist")
        return self.inner.classify_image(record)


def test_image_stage_quarantines_bad_record_and_continues():
    records = [make_record(f"r{i}", marker="#bad" if i == 9 else "") for i in range(10)]
    result = run_image_stage(records, PoisonImageBackend("r4"))
    assert result.scanned == 10
    assert list(result.quarantined) == ["r4"]
    assert [v.record_id for v in result.verdicts] == ["r9"]
    assert result.safe_count == 8


def test_image_stage_resume_matches_uninterrupted_run(tmp_path):
    records = [make_record(f"r{i}", marker="#bad" if i % 3 == 0 else "") for i in range(10)]
    digest = digest_ids(r.id for r in records)

    # Oracle: the uninterrupted run.
    oracle = run_image_stage(records, stub_backend(**{"#bad": "O6"}))

    killer = CrashAfter(stub_backend(**{"#bad": "O6"}), 6)
    ckpt_dir = tmp_path / "ckpt"
    with pytest.raises(RuntimeError, match="injected crash"):
        run_image_stage(records, killer, checkpoint=StageCheckpoint(ckpt_dir, "image", digest))
    assert killer.calls == 6

    resumed = run_image_stage(
        records, stub_backend(**{"#bad": "O6"}), checkpoint=StageCheckpoint(ckpt_dir, "image", digest)
    )
    assert resumed.verdicts == oracle.verdicts
    assert resumed.scanned == oracle.scanned
    assert resumed.safe_count == oracle.safe_count


def test_image_stage_classifies_each_record_once_across_runs(tmp_path):
    records = [make_record(f"r{i}") for i in range(10)]
    digest = digest_ids(r.id for r in records)
    ckpt_dir = tmp_path / "ckpt"

    first = CrashAfter(stub_backend(**{"#bad": "O1"}), 6)
    with pytest.raises(RuntimeError):
        run_image_stage(records, first, checkpoint=StageCheckpoint(ckpt_dir, "image", digest))
    second = CrashAfter(stub_backend(**{"#bad": "O1"}), 100)
    run_image_stage(records, second, checkpoint=StageCheckpoint(ckpt_dir, "image", digest))
    assert first.calls + second.calls == len(records)


def test_image_stage_worker_counts_agree():
    records = [make_record(f"r{i:03d}", marker="#bad" if i % 7 == 0 else "") for i in range(200)]
    results = [
        run_image_stage(records, stub_backend(**{"#bad": "O3"}), workers=w) for w in (1, 4, 16)
    ]
    assert results[0].verdicts == results[1].verdicts == results[2].verdicts
    assert results[0].safe_count == results[1].safe_count == results[2].safe_count


# --- text stage --------------------------------------------------------------


def test_text_stage_flags_planted_caption():
    records = [make_record(f"r{i}", caption="nothing here") for i in range(5)]
    records[2] = make_record("r2", caption="pure smut")
    result = run_text_stage(records, lexicon_backend(), threshold=0.8)
    assert [f.record_id for f in result.flags] == ["r2"]
    assert result.flags[0].triggering_labels == (TextLabel.OBSCENE,)
    assert result.flags[0].max_score == pytest.approx(0.9)


def test_text_stage_threshold_one_flags_nothing():
    records = [make_record(f"r{i}", caption="pure smut") for i in range(5)]
    assert run_text_stage(records, lexicon_backend(), threshold=1.0).flags == []


def test_text_stage_empty_captions_flag_nothing():
    records = [make_record(f"r{i}", caption="") for i in range(5)]
    assert run_text_stage(records, lexicon_backend(), threshold=0.8).flags == []


def test_text_stage_resume_matches_oracle(tmp_path):
    records = [
        make_record(f"r{i}", caption="pure smut" if i % 4 == 1 else "fine") for i in range(12)
    ]
    digest = digest_ids(r.id for r in records)
    oracle = run_text_stage(records, lexicon_backend(), threshold=0.8)

    killer = CrashAfter(lexicon_backend(), 5)
    ckpt_dir = tmp_path / "c"
    with pytest.raises(RuntimeError):
        run_text_stage(
            records, killer, threshold=0.8, checkpoint=StageCheckpoint(ckpt_dir, "text", digest)
        )
    resumed = run_text_stage(
        records, lexicon_backend(), threshold=0.8, checkpoint=StageCheckpoint(ckpt_dir, "text", digest)
    )
    assert resumed.flags == oracle.flags


# --- judge stage -------------------------------------------------------------


def test_judge_stage_wraps_confirmed_ids_into_flag_records():
    verdicts = [unsafe_verdict(f"r{i}") for i in range(6)]
    result = run_judge_stage(verdicts, "p", ConfirmSubsetJudge({"r1", "r4"}))
    assert [f.record_id for f in result.flag_records] == ["r1", "r4"]
    for flag in result.flag_records:
        assert flag.source is FlagSource.IMAGE
        assert flag.judge.unsafe is True
    assert set(result.rejected) == {"r0", "r2", "r3", "r5"}


def test_judge_stage_reject_all():
    verdicts = [unsafe_verdict(f"r{i}") for i in range(4)]
    result = run_judge_stage(verdicts, "p", ConfirmSubsetJudge(set()))
    assert result.flag_records == []
    assert len(result.rejected) == 4


def test_judge_stage_empty_input():
    result = run_judge_stage([], "p", ConfirmSubsetJudge(set()))
    assert result.flag_records == []
    assert result.judged == 0


# --- merge -------------------------------------------------------------------


def test_merge_two_source_counts():
    image_ids = [f"i{k}" for k in range(7)]
    text_ids = [f"t{k}" for k in range(4)] + image_ids[:2]  # overlap of 2
    merged = merge_flags([image_flag(i) for i in image_ids], [text_flag(t) for t in text_ids])
    assert merged.per_source_counts == {"ImagePipeline": 7, "TextPipeline": 6}
    assert merged.overlap_count == 2
    assert len(merged.ids) == 11  # 7 + 6 - 2


def test_merge_disjoint_sets():
    merged = merge_flags([image_flag(f"a{i}") for i in range(3)], [text_flag(f"b{i}") for i in range(4)])
    assert len(merged.ids) == 7
    assert merged.overlap_count == 0


def test_merge_set_with_itself_is_idempotent_on_ids():
    flags = [text_flag(f"r{i}") for i in range(5)]
    once = merge_flags(flags)
    twice = merge_flags(flags, flags)
    assert twice.ids == once.ids
    assert twice.overlap_count == len(once.ids)


def test_merge_union_algebra_randomized():
    rng = random.Random(42)
    universe = [f"u{i}" for i in range(40)]
    for _ in range(50):
        a = set(rng.sample(universe, rng.randint(0, 25)))
        b = set(rng.sample(universe, rng.randint(0, 25)))
        fa = [image_flag(x) for x in sorted(a)]
        fb = [text_flag(x) for x in sorted(b)]
        merged = merge_flags(fa, fb)
        # Inclusion-exclusion against plain set arithmetic.
        assert len(merged.ids) == len(a | b)
        assert merged.overlap_count == len(a & b)
        # Commutativity and idempotence on the ID sets.
        assert merge_flags(fb, fa).ids == merged.ids
        assert merge_flags(fa, fb, fb).ids == merged.ids
        # Associativity over a third set.
        c = set(rng.sample(universe, rng.randint(0, 10)))
        fc = [text_flag(x) for x in sorted(c)]
        left = merge_flags([image_flag(x) for x in merge_flags(fa, fb).ids], fc).ids
        right = merge_flags(fa, [text_flag(x) for x in merge_flags(fb, fc).ids]).ids
        assert left == right == tuple(sorted(a | b | c))


def test_merged_manifest_ids_sorted():
    merged = merge_flags([text_flag("zz"), text_flag("aa"), text_flag("mm")])
    assert merged.ids == ("aa", "mm", "zz")


def test_flag_record_round_trip():
    for flag in (image_flag("r1", SafetyCategory.O5), text_flag("r2", TextLabel.THREAT, 0.83)):
        assert flag_record_from_dict(flag_record_to_dict(flag)) == flag


def test_flag_record_invariants():
    from toxfilter import JudgeDecision, ToxfilterError

    with pytest.raises(ToxfilterError, match="confirming judge"):
        FlagRecord(record_id="r", source=FlagSource.IMAGE, evidence=unsafe_verdict("r"), judge=None)
    with pytest.raises(ToxfilterError, match="TextFlag"):
        FlagRecord(
            record_id="r",
            source=FlagSource.TEXT,
            evidence=unsafe_verdict("r"),
            judge=JudgeDecision("r", True, "x"),
        )


# --- filter ------------------------------------------------------------------


def corpus_of(n: int) -> list[DatasetRecord]:
    return [make_record(f"r{i:03d}") for i in range(n)]


def manifest_of(*ids: str) -> MergedFlagManifest:
    return merge_flags([text_flag(i) for i in ids])


def test_filter_removes_flagged_preserving_order():
    records = corpus_of(10)
    stream = filter_corpus(records, manifest_of("r003", "r007"))
    clean = list(stream)
    assert [r.id for r in clean] == [r.id for r in records if r.id not in ("r003", "r007")]
    assert stream.result.removed_ids == ("r003", "r007")
    assert stream.result.clean_count + stream.result.removed_count == len(records)


def test_filter_empty_manifest_is_identity():
    records = corpus_of(5)
    stream = filter_corpus(records, merge_flags([]))
    assert list(stream) == records
    assert stream.result.removed_ids == ()


def test_filter_unknown_flagged_id_warns(caplog):
    records = corpus_of(4)
    with caplog.at_level("WARNING"):
        stream = filter_corpus(records, manifest_of("r001", "ghost"))
        clean = list(stream)
    assert [r.id for r in clean] == ["r000", "r002", "r003"]
    assert stream.result.unknown_ids == ("ghost",)
    assert sum("unknown flagged id" in msg for msg in caplog.messages) == 1


def test_filter_is_idempotent():
    records = corpus_of(8)
    manifest = manifest_of("r002", "r005")
    first = list(filter_corpus(records, manifest))
    second_stream = filter_corpus(first, manifest)
    assert list(second_stream) == first
    assert second_stream.result.removed_ids == ()
    assert second_stream.result.unknown_ids == ("r002", "r005")


def test_stage_monotonicity_confirmed_subset_of_unsafe():
    records = [make_record(f"r{i}", marker="#bad" if i % 2 else "") for i in range(10)]
    image = run_image_stage(records, stub_backend(**{"#bad": "O2"}))
    unsafe_ids = {v.record_id for v in image.verdicts}
    judged = run_judge_stage(image.verdicts, "p", ConfirmSubsetJudge({"r1", "r3"}))
    confirmed_ids = {f.record_id for f in judged.flag_records}
    corpus_ids = {r.id for r in records}
    assert confirmed_ids <= unsafe_ids <= corpus_ids
