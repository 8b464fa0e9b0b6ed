"""Command-line surface: per-stage commands plus an end-to-end run.

Usage follows one convention everywhere: options may come from a JSON
config file (``--config`` or the TOXFILTER_CONFIG environment variable)
with command-line flags overriding it; relative paths inside the config
file are resolved against the config file's directory.

Exit status: 0 success, 1 stage failure, 2 usage or configuration error.
All artifacts are written atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .backends import BackendConfig
from .checkpoint import StageCheckpoint
from .corpus import digest_ids, load_corpus, write_corpus
from .errors import ConfigError, ToxfilterError
from .pipeline import (
    FlagRecord,
    FlagSource,
    MergedFlagManifest,
    PipelineConfig,
    filter_corpus,
    flag_record_from_dict,
    flag_record_to_dict,
    merge_flags,
    run_all,
    run_image_stage,
    run_judge_stage,
    run_text_stage,
)
from .report import build_report, emit_report
from .taxonomy import verdict_from_dict, verdict_to_dict
from .util import atomic_write_text

log = logging.getLogger(__name__)

CONFIG_ENV_VAR = "TOXFILTER_CONFIG"

# Config keys holding paths, resolved against the config file's directory.
_PATH_KEYS = {
    "corpus",
    "lexicon",
    "ruleset",
    "preamble",
    "checkpoint",
    "out",
    "removed",
    "report",
    "svg",
    "manifest",
    "verdicts",
    "flags",
}

_SUBCOMMANDS = ("scan-images", "scan-text", "judge", "merge", "filter", "report", "run-all")


class _UsageError(Exception):
    """Bad invocation or configuration; exits with status 2."""


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="toxfilter",
        description="Detect and remove toxic image-text pairs from a pretraining corpus.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p: argparse.ArgumentParser, *, corpus: bool = False) -> None:
        p.add_argument("--config", help="JSON config file (or set TOXFILTER_CONFIG)")
        if corpus:
            p.add_argument("--corpus", help="corpus file to process")
            p.add_argument(
                "--format",
                choices=["canonical-jsonl", "llava-compat"],
                help="corpus file format (default canonical-jsonl)",
            )
        p.add_argument("--workers", type=int, help="worker pool size (default 1)")
        p.add_argument("--checkpoint", help="checkpoint directory for crash-safe resume")
        p.add_argument("--dry-run", action="store_true", help="print the plan, write nothing")

    p = sub.add_parser("scan-images", help="classify images, keep Unsafe verdicts")
    common(p, corpus=True)
    p.add_argument("--image-backend", help="URL or builtin-stub")
    p.add_argument("--ruleset", help="marker ruleset for the builtin stub classifier")
    p.add_argument("--out", help="output verdicts JSONL")

    p = sub.add_parser("scan-text", help="score captions, keep threshold flags")
    common(p, corpus=True)
    p.add_argument("--text-backend", help="URL or builtin-lexicon")
    p.add_argument("--lexicon", help="lexicon file for the builtin text classifier")
    p.add_argument("--threshold", type=float, help="flagging threshold (default 0.8)")
    p.add_argument("--out", help="output flag records JSONL")

    p = sub.add_parser("judge", help="refine Unsafe verdicts through the judge")
    common(p)
    p.add_argument("--verdicts", help="verdicts JSONL from scan-images")
    p.add_argument("--judge-backend", help="URL or builtin-confirm-all")
    p.add_argument("--preamble", help="preamble (system prompt) text file")
    p.add_argument("--out", help="output flag records JSONL")

    p = sub.add_parser("merge", help="union flag records into a merged manifest")
    common(p)
    p.add_argument("--flags", action="append", help="flag records JSONL (repeatable)")
    p.add_argument("--out", help="output merged manifest JSON")

    p = sub.add_parser("filter", help="remove flagged records from the corpus")
    common(p, corpus=True)
    p.add_argument("--manifest", help="merged manifest JSON")
    p.add_argument("--out", help="output clean corpus JSONL")
    p.add_argument("--removed", help="output removed manifest JSON")

    p = sub.add_parser("report", help="build the audit report from run artifacts")
    common(p, corpus=True)
    p.add_argument("--manifest", help="merged manifest JSON")
    p.add_argument("--flags", action="append", help="flag records JSONL (repeatable)")
    p.add_argument("--summary", help="run summary JSON (for raw/quarantine counts)")
    p.add_argument("--report", help="output report JSON (CSV/SVG siblings derived)")
    p.add_argument("--svg", help="output chart SVG path")

    p = sub.add_parser("run-all", help="image + judge and text stages, merge, filter, report")
    common(p, corpus=True)
    p.add_argument("--image-backend", help="URL or builtin-stub")
    p.add_argument("--text-backend", help="URL or builtin-lexicon")
    p.add_argument("--judge-backend", help="URL or builtin-confirm-all")
    p.add_argument("--lexicon", help="lexicon file for the builtin text classifier")
    p.add_argument("--ruleset", help="marker ruleset for the builtin stub classifier")
    p.add_argument("--threshold", type=float, help="flagging threshold (default 0.8)")
    p.add_argument("--preamble", help="preamble (system prompt) text file")
    p.add_argument("--out", help="output clean corpus JSONL (default clean.jsonl)")
    p.add_argument("--removed", help="output removed manifest JSON (default removed.json)")
    p.add_argument("--report", help="output report JSON (default report.json)")
    p.add_argument("--svg", help="output chart SVG path")

    return parser


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------


def _load_config_file(path: str) -> dict:
    config_path = Path(path)
    try:
        data = json.loads(config_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise _UsageError(f"cannot read config {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise _UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise _UsageError(f"config {path} must be a JSON object")
    base = config_path.resolve().parent
    resolved = {}
    for key, value in data.items():
        if key in _PATH_KEYS and isinstance(value, str) and value:
            value = str((base / value).resolve()) if not os.path.isabs(value) else value
        if key == "flags" and isinstance(value, list):
            value = [
                str((base / item).resolve()) if not os.path.isabs(item) else item for item in value
            ]
        resolved[key] = value
    return resolved


class _Options:
    """Flag values overriding config-file values overriding defaults."""

    def __init__(self, args: argparse.Namespace, config: dict):
        self._args = vars(args)
        self._config = config

    def get(self, key: str, default=None):
        flag_value = self._args.get(key.replace("-", "_"))
        if flag_value is not None and flag_value is not False:
            return flag_value
        config_value = self._config.get(key, self._config.get(key.replace("-", "_")))
        if config_value is not None:
            return config_value
        return default

    def require(self, key: str, flag: str):
        value = self.get(key)
        if value is None:
            raise _UsageError(f"missing required {flag} (set it or provide it in the config file)")
        return value


def _backend_config(value: str, *, lexicon: str | None, ruleset: str | None, flag: str) -> BackendConfig:
    if value.startswith(("http://", "https://")):
        return BackendConfig(kind="remote", endpoint_url=value)
    if value == "builtin-stub":
        if not ruleset:
            raise _UsageError(f"{flag} builtin-stub requires --ruleset")
        return BackendConfig(kind="builtin-stub", ruleset_path=ruleset)
    if value == "builtin-lexicon":
        if not lexicon:
            raise _UsageError(f"{flag} builtin-lexicon requires --lexicon")
        return BackendConfig(kind="builtin-lexicon", lexicon_path=lexicon)
    if value == "builtin-confirm-all":
        return BackendConfig(kind="builtin-confirm-all")
    raise _UsageError(f"{flag} must be a http(s) URL or a builtin name, got {value!r}")


def _corpus_args(opts: _Options) -> tuple[str, str]:
    corpus = opts.require("corpus", "--corpus")
    corpus_format = opts.get("format", "canonical-jsonl")
    return corpus, corpus_format


def _dry_run(command: str, resolved: dict, plan: list[str]) -> int:
    print(json.dumps({"command": command, "plan": plan, "resolved": resolved}, indent=2))
    return 0


def _corpus_digest(corpus: str, corpus_format: str) -> str:
    stream = load_corpus(corpus, format=corpus_format)
    for _ in stream:
        pass
    return stream.manifest.id_digest


def _checkpoint(opts: _Options, stage: str, digest: str) -> StageCheckpoint | None:
    directory = opts.get("checkpoint")
    if directory is None:
        return None
    return StageCheckpoint(directory, stage, digest)


def _write_jsonl(path: str, rows: list[dict]) -> None:
    atomic_write_text(path, "".join(json.dumps(row, ensure_ascii=False) + "\n" for row in rows))


def _read_flag_records(paths: list[str]) -> list[FlagRecord]:
    records = []
    for path in paths:
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                if line.strip():
                    records.append(flag_record_from_dict(json.loads(line)))
    return records


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def _cmd_scan_images(opts: _Options) -> int:
    corpus, corpus_format = _corpus_args(opts)
    backend = _backend_config(
        opts.require("image-backend", "--image-backend"),
        lexicon=None,
        ruleset=opts.get("ruleset"),
        flag="--image-backend",
    )
    out = opts.require("out", "--out")
    workers = int(opts.get("workers", 1))
    if opts.get("dry_run"):
        return _dry_run(
            "scan-images",
            {"corpus": corpus, "format": corpus_format, "backend": backend.kind, "out": out},
            ["stream corpus", "classify images", "write Unsafe verdicts"],
        )
    digest = _corpus_digest(corpus, corpus_format)
    result = run_image_stage(
        load_corpus(corpus, format=corpus_format),
        backend,
        checkpoint=_checkpoint(opts, "image", digest),
        workers=workers,
    )
    rows = [dict(verdict_to_dict(v), record_id=v.record_id) for v in result.verdicts]
    _write_jsonl(out, rows)
    print(
        f"scanned {result.scanned} records: {len(result.verdicts)} unsafe, "
        f"{result.safe_count} safe, {len(result.quarantined)} quarantined"
    )
    return 0


def _cmd_scan_text(opts: _Options) -> int:
    corpus, corpus_format = _corpus_args(opts)
    backend = _backend_config(
        opts.require("text-backend", "--text-backend"),
        lexicon=opts.get("lexicon"),
        ruleset=None,
        flag="--text-backend",
    )
    out = opts.require("out", "--out")
    threshold = float(opts.get("threshold", 0.8))
    workers = int(opts.get("workers", 1))
    if opts.get("dry_run"):
        return _dry_run(
            "scan-text",
            {
                "corpus": corpus,
                "format": corpus_format,
                "backend": backend.kind,
                "threshold": threshold,
                "out": out,
            },
            ["stream corpus", "score captions", "write threshold flags"],
        )
    digest = _corpus_digest(corpus, corpus_format)
    result = run_text_stage(
        load_corpus(corpus, format=corpus_format),
        backend,
        threshold=threshold,
        checkpoint=_checkpoint(opts, "text", digest),
        workers=workers,
    )
    flag_records = [
        FlagRecord(record_id=f.record_id, source=FlagSource.TEXT, evidence=f) for f in result.flags
    ]
    _write_jsonl(out, [flag_record_to_dict(f) for f in flag_records])
    print(
        f"scanned {result.scanned} captions: {len(result.flags)} flagged, "
        f"{len(result.quarantined)} quarantined"
    )
    return 0


def _cmd_judge(opts: _Options) -> int:
    verdicts_path = opts.require("verdicts", "--verdicts")
    backend = _backend_config(
        opts.require("judge-backend", "--judge-backend"), lexicon=None, ruleset=None, flag="--judge-backend"
    )
    preamble_path = opts.require("preamble", "--preamble")
    out = opts.require("out", "--out")
    workers = int(opts.get("workers", 1))
    if opts.get("dry_run"):
        return _dry_run(
            "judge",
            {"verdicts": verdicts_path, "backend": backend.kind, "preamble": preamble_path, "out": out},
            ["load Unsafe verdicts", "query judge per verdict", "write confirmed flag records"],
        )
    preamble = Path(preamble_path).read_text(encoding="utf-8")
    verdicts = []
    with open(verdicts_path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                data = json.loads(line)
                verdicts.append(verdict_from_dict(data, data["record_id"]))
    verdicts.sort(key=lambda v: v.record_id)
    digest = digest_ids(v.record_id for v in verdicts)
    result = run_judge_stage(
        verdicts,
        preamble,
        backend,
        checkpoint=_checkpoint(opts, "judge", digest),
        workers=workers,
    )
    _write_jsonl(out, [flag_record_to_dict(f) for f in result.flag_records])
    print(
        f"judged {result.judged} verdicts: {len(result.flag_records)} confirmed, "
        f"{len(result.rejected)} rejected, {len(result.quarantined)} quarantined"
    )
    return 0


def _cmd_merge(opts: _Options) -> int:
    flag_paths = opts.get("flags")
    if not flag_paths:
        raise _UsageError("missing required --flags (repeat the flag for multiple inputs)")
    out = opts.require("out", "--out")
    if opts.get("dry_run"):
        return _dry_run(
            "merge",
            {"flags": list(flag_paths), "out": out},
            ["load flag records", "union by record id", "write merged manifest"],
        )
    merged = merge_flags(_read_flag_records(list(flag_paths)))
    atomic_write_text(out, json.dumps(merged.to_dict(), indent=2, ensure_ascii=False) + "\n")
    print(f"merged {len(merged.ids)} unique flagged ids (overlap {merged.overlap_count})")
    return 0


def _cmd_filter(opts: _Options) -> int:
    corpus, corpus_format = _corpus_args(opts)
    manifest_path = opts.require("manifest", "--manifest")
    out = opts.require("out", "--out")
    removed_path = opts.require("removed", "--removed")
    if opts.get("dry_run"):
        return _dry_run(
            "filter",
            {"corpus": corpus, "manifest": manifest_path, "out": out, "removed": removed_path},
            ["stream corpus", "drop flagged ids", "write clean corpus and removed manifest"],
        )
    merged = MergedFlagManifest.from_dict(json.loads(Path(manifest_path).read_text(encoding="utf-8")))
    stream = filter_corpus(load_corpus(corpus, format=corpus_format), merged)
    clean_manifest = write_corpus(stream, out)
    result = stream.result
    atomic_write_text(
        removed_path,
        json.dumps(
            {
                "ids": list(result.removed_ids),
                "count": result.removed_count,
                "unknown_flagged_ids": list(result.unknown_ids),
            },
            indent=2,
            ensure_ascii=False,
        )
        + "\n",
    )
    print(f"kept {clean_manifest.record_count} records, removed {result.removed_count}")
    return 0


def _cmd_report(opts: _Options) -> int:
    corpus, corpus_format = _corpus_args(opts)
    manifest_path = opts.require("manifest", "--manifest")
    flag_paths = opts.get("flags")
    if not flag_paths:
        raise _UsageError("missing required --flags (repeat the flag for multiple inputs)")
    report_path = opts.require("report", "--report")
    svg_path = opts.get("svg") or str(Path(report_path).with_suffix(".svg"))
    csv_path = str(Path(report_path).with_suffix(".csv"))
    if opts.get("dry_run"):
        return _dry_run(
            "report",
            {
                "corpus": corpus,
                "manifest": manifest_path,
                "flags": list(flag_paths),
                "report": report_path,
                "svg": svg_path,
            },
            ["load artifacts", "build audit report", "emit json/csv/svg"],
        )
    merged = MergedFlagManifest.from_dict(json.loads(Path(manifest_path).read_text(encoding="utf-8")))
    flag_records = _read_flag_records(list(flag_paths))
    stream = load_corpus(corpus, format=corpus_format)
    for _ in stream:
        pass
    image_flagged_raw = merged.per_source_counts.get(FlagSource.IMAGE.value, 0)
    quarantined = 0
    summary_path = opts.get("summary")
    if summary_path:
        summary = json.loads(Path(summary_path).read_text(encoding="utf-8"))
        image_flagged_raw = summary.get("unsafe", image_flagged_raw)
        quarantined = summary.get("quarantined", 0)
    report = build_report(
        merged,
        flag_records,
        stream.manifest,
        image_flagged_raw=image_flagged_raw,
        quarantined=quarantined,
    )
    atomic_write_text(report_path, emit_report(report, "json").decode("utf-8"))
    atomic_write_text(csv_path, emit_report(report, "csv").decode("utf-8"))
    atomic_write_text(svg_path, emit_report(report, "svg").decode("utf-8"))
    print(f"report written to {report_path} (csv {csv_path}, svg {svg_path})")
    return 0


def _cmd_run_all(opts: _Options) -> int:
    corpus, corpus_format = _corpus_args(opts)
    image_backend = _backend_config(
        opts.get("image-backend", "builtin-stub"),
        lexicon=None,
        ruleset=opts.get("ruleset"),
        flag="--image-backend",
    )
    text_backend = _backend_config(
        opts.get("text-backend", "builtin-lexicon"),
        lexicon=opts.get("lexicon"),
        ruleset=None,
        flag="--text-backend",
    )
    judge_backend = _backend_config(
        opts.get("judge-backend", "builtin-confirm-all"), lexicon=None, ruleset=None, flag="--judge-backend"
    )
    config = PipelineConfig(
        corpus_path=corpus,
        corpus_format=corpus_format,
        image_backend=image_backend,
        text_backend=text_backend,
        judge_backend=judge_backend,
        preamble_path=opts.get("preamble"),
        text_threshold=float(opts.get("threshold", 0.8)),
        worker_count=int(opts.get("workers", 1)),
        checkpoint_dir=opts.get("checkpoint"),
        clean_path=opts.get("out", "clean.jsonl"),
        removed_path=opts.get("removed", "removed.json"),
        report_path=opts.get("report", "report.json"),
        svg_path=opts.get("svg"),
    )
    merged_default = str(Path(config.removed_path).with_name("merged.json"))
    flags_default = str(Path(config.removed_path).with_name("flags.jsonl"))
    config.merged_path = opts.get("merged", merged_default)
    config.flags_path = opts.get("flags", flags_default)
    if opts.get("dry_run"):
        resolved = {
            "corpus": corpus,
            "format": corpus_format,
            "image_backend": image_backend.kind,
            "text_backend": text_backend.kind,
            "judge_backend": judge_backend.kind,
            "threshold": config.text_threshold,
            "workers": config.worker_count,
            "checkpoint": config.checkpoint_dir,
            "out": config.clean_path,
            "removed": config.removed_path,
            "merged": config.merged_path,
            "flags": config.flags_path,
            "report": config.report_path,
            "svg": config.resolved_svg_path(),
            "summary": config.resolved_summary_path(),
        }
        plan = [
            "compute corpus manifest",
            "image stage: classify images",
            "judge stage: refine Unsafe verdicts",
            "text stage: score captions",
            "merge flags by record id",
            "filter corpus",
            "emit audit report",
        ]
        return _dry_run("run-all", resolved, plan)
    result = run_all(config)
    print(json.dumps({k: v for k, v in result.summary.items() if k != "stages"}, indent=2))
    print(f"artifacts: {json.dumps(result.artifacts, indent=2)}")
    return 0


_HANDLERS = {
    "scan-images": _cmd_scan_images,
    "scan-text": _cmd_scan_text,
    "judge": _cmd_judge,
    "merge": _cmd_merge,
    "filter": _cmd_filter,
    "report": _cmd_report,
    "run-all": _cmd_run_all,
}


def run_command(argv: list[str] | None = None) -> int:
    """Parse argv and execute one subcommand, returning the exit status."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        config: dict = {}
        config_path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV_VAR)
        if config_path:
            config = _load_config_file(config_path)
        return _HANDLERS[args.command](_Options(args, config))
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ToxfilterError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    logging.basicConfig(level=os.environ.get("TOXFILTER_LOG", "WARNING"))
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
