"""End-to-end: the primary pipeline, run unchanged against a live shim.

Starts the service with uvicorn on an ephemeral port and compares a
run-all invocation using remote backends (all three roles served by the
shim in mock mode) with one using the built-in backends: the resulting
manifests, clean corpus, and report must be identical.
"""

from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

from .conftest import FIXTURES


def run_primary_cli(out_dir: Path, backend_args: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    argv = [
        sys.executable, "-m", "toxfilter.cli", "run-all",
        "--corpus", str(FIXTURES / "corpus.jsonl"),
        "--preamble", str(FIXTURES / "example_preamble.txt"),
        "--out", str(out_dir / "clean.jsonl"),
        "--removed", str(out_dir / "removed.json"),
        "--report", str(out_dir / "report.json"),
        *backend_args,
    ]
    completed = subprocess.run(argv, capture_output=True, text=True, timeout=300)
    assert completed.returncode == 0, completed.stderr


def test_primary_run_all_against_shim_matches_builtins(shim_url, tmp_path):
    builtin_out = tmp_path / "builtin"
    run_primary_cli(
        builtin_out,
        [
            "--image-backend", "builtin-stub", "--ruleset", str(FIXTURES / "ruleset.json"),
            "--text-backend", "builtin-lexicon", "--lexicon", str(FIXTURES / "lexicon.json"),
            "--judge-backend", "builtin-confirm-all",
        ],
    )

    shim_out = tmp_path / "shim"
    run_primary_cli(
        shim_out,
        [
            "--image-backend", shim_url,
            "--text-backend", shim_url,
            "--judge-backend", shim_url,
        ],
    )

    for name in ("clean.jsonl", "merged.json", "removed.json", "report.json", "report.csv", "report.svg"):
        assert (shim_out / name).read_bytes() == (builtin_out / name).read_bytes(), name

    merged = json.loads((shim_out / "merged.json").read_text())
    assert len(merged["ids"]) == 9  # fixture plant: 5 image + 5 text - 1 overlap
    assert merged["overlap_count"] == 1

    # Same flagged IDs with the same provenance through both stacks.
    def flagged(path: Path) -> set[tuple[str, str]]:
        rows = [json.loads(line) for line in (path / "flags.jsonl").read_text().splitlines()]
        return {(row["record_id"], row["source"]) for row in rows}

    assert flagged(shim_out) == flagged(builtin_out)


def test_shim_handles_concurrent_clients(shim_url, tmp_path):
    # Multiple workers hammer the same live service; results stay correct.
    out = tmp_path / "parallel"
    run_primary_cli(
        out,
        [
            "--image-backend", shim_url,
            "--text-backend", shim_url,
            "--judge-backend", shim_url,
            "--workers", "8",
        ],
    )
    report = json.loads((out / "report.json").read_text())
    assert report["union_size"] == 9
    assert report["clean_size"] == 191
