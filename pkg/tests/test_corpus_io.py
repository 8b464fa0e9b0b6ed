from __future__ import annotations

import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toxfilter import CorpusError, DatasetRecord, digest_ids, load_corpus, load_llava_compat, validate_record, write_corpus

from .conftest import write_raw_jsonl


def test_load_three_wellformed_lines(tmp_path):
    path = write_raw_jsonl(
        tmp_path / "c.jsonl",
        [
            {"id": "a", "image_path": "a.jpg", "caption": "one"},
            {"id": "b", "image_path": "b.jpg", "caption": "two"},
            {"id": "c", "image_path": "c.jpg", "caption": "three"},
        ],
    )
    stream = load_corpus(path)
    records = list(stream)
    assert [r.id for r in records] == ["a", "b", "c"]
    assert stream.manifest.record_count == 3


def test_load_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("", encoding="utf-8")
    stream = load_corpus(path)
    assert list(stream) == []
    assert stream.manifest.record_count == 0


def test_missing_caption_reports_line_number(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(
        json.dumps({"id": "a", "image_path": "a.jpg", "caption": "x"})
        + "\n"
        + json.dumps({"id": "b", "image_path": "b.jpg"})
        + "\n",
        encoding="utf-8",
    )
    with pytest.raises(CorpusError, match="line 2"):
        list(load_corpus(path))


def test_malformed_json_reports_line_number(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"id": "a", "image_path": "a.jpg", "caption": "x"}\n{not json\n', encoding="utf-8")
    with pytest.raises(CorpusError, match="line 2"):
        list(load_corpus(path))


def test_duplicate_id_is_hard_error(tmp_path):
    path = write_raw_jsonl(
        tmp_path / "c.jsonl",
        [
            {"id": "a", "image_path": "a.jpg", "caption": "x"},
            {"id": "a", "image_path": "b.jpg", "caption": "y"},
        ],
    )
    with pytest.raises(CorpusError, match="duplicate id"):
        list(load_corpus(path))


def test_missing_file():
    with pytest.raises(CorpusError, match="not found"):
        load_corpus("/nonexistent/corpus.jsonl")


def test_validate_record_allows_empty_caption():
    record = validate_record({"id": "a", "image_path": "x.jpg", "caption": ""})
    assert record == DatasetRecord(id="a", image_path="x.jpg", caption="")


def test_validate_record_rejects_empty_id():
    with pytest.raises(CorpusError, match="empty id"):
        validate_record({"id": "", "image_path": "x.jpg", "caption": "y"})


def test_validate_record_rejects_numeric_caption():
    with pytest.raises(CorpusError, match="caption must be a string"):
        validate_record({"id": "a", "image_path": "x.jpg", "caption": 7})


record_strategy = st.builds(
    DatasetRecord,
    id=st.uuids().map(str),
    image_path=st.text(min_size=1, max_size=40).filter(lambda s: s.strip()),
    caption=st.text(max_size=120),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(record_strategy, max_size=25, unique_by=lambda r: r.id))
def test_write_then_load_round_trip(tmp_path_factory, records):
    path = tmp_path_factory.mktemp("rt") / "c.jsonl"
    manifest = write_corpus(records, path)
    stream = load_corpus(path)
    assert list(stream) == records
    assert stream.manifest.record_count == len(records)
    assert stream.manifest.id_digest == manifest.id_digest


def test_write_empty_stream(tmp_path):
    manifest = write_corpus([], tmp_path / "c.jsonl")
    assert manifest.record_count == 0
    assert (tmp_path / "c.jsonl").read_text() == ""


def test_rewrite_reproduces_digest(tmp_path):
    records = [DatasetRecord(f"r{i}", f"{i}.jpg", "cap") for i in range(5)]
    first = write_corpus(records, tmp_path / "a.jsonl")
    second = write_corpus(list(load_corpus(tmp_path / "a.jsonl")), tmp_path / "b.jsonl")
    assert first.id_digest == second.id_digest
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_canonical_field_order_is_fixed(tmp_path):
    write_corpus([DatasetRecord("a", "x.jpg", "cap")], tmp_path / "c.jsonl")
    line = (tmp_path / "c.jsonl").read_text().strip()
    assert line == '{"id": "a", "image_path": "x.jpg", "caption": "cap"}'


def test_digest_changes_on_any_single_id_change():
    ids = [f"r{i}" for i in range(50)]
    base = digest_ids(ids)
    for position in (0, 25, 49):
        mutated = list(ids)
        mutated[position] = mutated[position] + "x"
        assert digest_ids(mutated) != base
    assert digest_ids(ids) == base  # determinism
    assert digest_ids(list(reversed(ids))) != base  # order matters


def test_streaming_bound_via_instrumented_counter(tmp_path):
    rows = [{"id": f"r{i}", "image_path": f"{i}.jpg", "caption": "c"} for i in range(10_000)]
    path = write_raw_jsonl(tmp_path / "big.jsonl", rows)
    stream = load_corpus(path)
    consumed = list(itertools.islice(stream, 3))
    assert len(consumed) == 3
    # An eager loader would have parsed all 10,000 records by now.
    assert stream.records_read == 3


def test_failed_write_leaves_no_partial_file(tmp_path):
    def bad_stream():
        yield DatasetRecord("a", "x.jpg", "cap")
        raise RuntimeError("disk on fire")

    target = tmp_path / "out.jsonl"
    with pytest.raises(RuntimeError):
        write_corpus(bad_stream(), target)
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []


# --- compat loader ---------------------------------------------------------


def compat_element(eid: str, caption: str, role: str = "gpt") -> dict:
    return {
        "id": eid,
        "image": f"imgs/{eid}.jpg",
        "conversations": [
            {"from": "human", "value": "<image>\nDescribe."},
            {"from": role, "value": caption},
        ],
    }


def test_compat_extracts_first_assistant_turn(tmp_path):
    path = tmp_path / "pretrain.json"
    path.write_text(json.dumps([compat_element("e1", "a red bus on a street")]), encoding="utf-8")
    records = list(load_llava_compat(path))
    assert records == [DatasetRecord(id="e1", image_path="imgs/e1.jpg", caption="a red bus on a street")]


def test_compat_preserves_count(tmp_path):
    n = 1200
    path = tmp_path / "pretrain.json"
    path.write_text(
        json.dumps([compat_element(f"e{i}", f"caption {i}") for i in range(n)]), encoding="utf-8"
    )
    stream = load_llava_compat(path)
    assert sum(1 for _ in stream) == n
    assert stream.manifest.record_count == n


def test_compat_accepts_assistant_role(tmp_path):
    path = tmp_path / "pretrain.json"
    path.write_text(json.dumps([compat_element("e1", "hello", role="assistant")]), encoding="utf-8")
    assert list(load_llava_compat(path))[0].caption == "hello"


def test_compat_human_only_names_element(tmp_path):
    element = {
        "id": "e9",
        "image": "imgs/e9.jpg",
        "conversations": [{"from": "human", "value": "hi"}],
    }
    path = tmp_path / "pretrain.json"
    path.write_text(json.dumps([element]), encoding="utf-8")
    with pytest.raises(CorpusError, match="e9"):
        list(load_llava_compat(path))


def test_compat_missing_image(tmp_path):
    path = tmp_path / "pretrain.json"
    element = compat_element("e2", "cap")
    del element["image"]
    path.write_text(json.dumps([element]), encoding="utf-8")
    with pytest.raises(CorpusError, match="missing image"):
        list(load_llava_compat(path))
