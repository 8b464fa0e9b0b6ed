"""Toxicity filtering for multimodal pretraining corpora.

Scans an image-caption corpus with an image safety classifier (nine
policy categories), refines Unsafe findings through an LLM judge, flags
toxic captions with a thresholded text classifier, unions the flags,
and emits a toxicity-mitigated corpus plus audit reports.
"""

from .backends import (
    BackendConfig,
    Lexicon,
    StubRuleset,
    classify_image,
    classify_text,
    lexicon_score,
    stub_classify_image,
)
from .checkpoint import CheckpointState, StageCheckpoint, load_checkpoint, resume
from .corpus import (
    CorpusManifest,
    DatasetRecord,
    digest_ids,
    load_corpus,
    load_llava_compat,
    validate_record,
    write_corpus,
)
from .errors import (
    BackendError,
    CheckpointError,
    CheckpointMismatchError,
    ConfigError,
    CorpusError,
    JudgeError,
    ProtocolError,
    ToxfilterError,
    TransportError,
    VerdictError,
)
from .judge import (
    JudgeDecision,
    JudgePrompt,
    RefineResult,
    parse_judge_response,
    refine_flags,
    render_judge_prompt,
)
from .pipeline import (
    FilterResult,
    FlagRecord,
    FlagSource,
    MergedFlagManifest,
    PipelineConfig,
    RunResult,
    filter_corpus,
    merge_flags,
    run_all,
    run_image_stage,
    run_judge_stage,
    run_text_stage,
)
from .report import AuditReport, build_report, emit_report, overlap_stats
from .taxonomy import (
    Rating,
    SafetyCategory,
    SafetyVerdict,
    TextFlag,
    TextLabel,
    TextToxicityScores,
    category_from_code,
    flag_from_scores,
    parse_verdict,
    serialize_verdict,
)

__version__ = "0.1.0"
