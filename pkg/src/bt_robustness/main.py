"""Command-line entry point of the back-transcription toolkit."""

import argparse
import asyncio
import json
import os
import sys
from pathlib import Path
from typing import Any, NoReturn, Sequence

from .adapters import HttpAsrAdapter, HttpNluAdapter, HttpTtsAdapter, load_mock_adapters
from .align import extract_editops, format_editop
from .audit import (
    compute_resemblance,
    make_annotation_sheet,
    read_filled_sheet,
    write_sheet,
)
from .btpipe import (
    BackTranscriptionRun,
    RunConfig,
    back_transcribe,
    transcribe_recordings,
    word_error_stats,
)
from .corpus import (
    DEFAULT_POLICY,
    Corpus,
    NormalizationPolicy,
    Task,
    import_massive,
    load_corpus,
    massive_partition_sizes,
    normalize_text,
    save_corpus,
)
from .errmodel import (
    LogRegHyperparams,
    build_dataset,
    rank_errors,
    rank_frequency,
    save_model,
    train_logreg,
)
from .errors import BtRobustnessError, ConfigError, CorpusError, UndefinedMetricError
from .logging_config import RunLogger, get_logger, setup_logging
from .mock_service import run_mock_service
from .reports import (
    category_counts_markdown,
    component_delta_markdown,
    frequency_csv,
    metrics_csv,
    metrics_markdown,
    ranking_csv,
    resemblance_markdown,
    standard_metrics_markdown,
)
from .robustness import (
    METRIC_IDS,
    all_metrics,
    category_counts,
    compare_robustness,
    fscore_component_delta,
    get_policy,
    robustness_metric,
    standard_metrics,
)

logger = get_logger("main")
run_logger = RunLogger()


class JsonArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors as a JSON summary."""

    def error(self, message: str) -> NoReturn:
        summary = {"error": "UsageError", "message": message, "details": {"usage": self.format_usage().strip()}}
        self.exit(2, json.dumps(summary) + "\n")


def _env_flag(name: str) -> bool:
    return os.getenv(name, "false").lower() in ("1", "true", "yes", "on")


def _add_config_option(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Key-value config file with BT_* settings")


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--corpus", required=True, help="Input corpus (JSONL)")
    parser.add_argument("--out", required=True, help="Output corpus (JSONL)")
    _add_config_option(parser)
    parser.add_argument("--parallel", type=int, help="Maximum concurrent adapter requests")
    parser.add_argument("--mock-dir", help="Use file-backed mock adapters from this directory")
    parser.add_argument("--cache-dir", help="Adapter result cache directory")
    parser.add_argument("--metadata-out", help="Write run metadata JSON here")


def build_parser() -> argparse.ArgumentParser:
    parser = JsonArgumentParser(
        prog="bt-robustness",
        description="Back transcription toolkit - NLU robustness to speech recognition errors",
    )
    parser.add_argument(
        "--log-level",
        choices=["debug", "info", "warning", "error"],
        default=os.getenv("LOG_LEVEL", "info").lower(),
        help="Log level (default: info)",
    )
    parser.add_argument("--log-file", default=os.getenv("LOG_FILE"), help="Also log to this file")
    parser.add_argument(
        "--structured-logs",
        action="store_true",
        default=_env_flag("STRUCTURED_LOGGING"),
        help="Emit JSON log records",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("import", help="Import a MASSIVE-format file as a corpus")
    p.add_argument("--massive", required=True, help="MASSIVE locale file (JSONL)")
    p.add_argument("--task", choices=[t.value for t in Task], required=True)
    p.add_argument("--partition", help="Keep only this partition (train, dev, test)")
    p.add_argument("--out", help="Output corpus (JSONL)")
    p.add_argument("--show-partitions", action="store_true", help="Print partition sizes")

    p = commands.add_parser("backtranscribe", help="Run TTS -> ASR -> NLU over a corpus")
    _add_run_options(p)
    p.add_argument("--audio-dir", help="Export synthesized audio as <id>.wav here")

    p = commands.add_parser("transcribe", help="Run ASR -> NLU over recorded audio")
    _add_run_options(p)
    p.add_argument("--audio-dir", required=True, help="Directory holding <id>.wav recordings")

    p = commands.add_parser("evaluate", help="Robustness and standard metrics of a corpus")
    p.add_argument("--corpus", required=True)
    _add_config_option(p)
    p.add_argument("--task", choices=[t.value for t in Task])
    p.add_argument("--metric", choices=list(METRIC_IDS), help="Print only this metric's value")
    p.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    p.add_argument("--differing-only", action="store_true", help="Count only samples with h != r")
    p.add_argument("--nlu-label", default="nlu")
    p.add_argument("--tts-label", default="tts")
    p.add_argument("--out", help="Write the report here instead of stdout")

    p = commands.add_parser("compare", help="Compare the metrics of two runs")
    p.add_argument("--corpus-a", required=True)
    p.add_argument("--corpus-b", required=True)
    _add_config_option(p)
    p.add_argument("--out")

    p = commands.add_parser("editops", help="Dump edit operations per sample")
    p.add_argument("--corpus", required=True)
    _add_config_option(p)
    p.add_argument("--out", required=True, help="Edit-op dump (JSONL)")
    p.add_argument("--freq-out", help="Operation frequency CSV")

    p = commands.add_parser("rank-errors", help="Rank edit operations by harm or frequency")
    p.add_argument("--corpus", required=True)
    _add_config_option(p)
    p.add_argument("--policy", choices=list(METRIC_IDS), default="R123")
    p.add_argument("--top", type=int, default=20)
    p.add_argument("--by", choices=["coefficient", "frequency"], default="coefficient")
    p.add_argument("--l2", type=float, default=1.0, help="L2 regularization strength")
    p.add_argument("--max-iterations", type=int, default=10000)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--min-freq", type=int, default=1, help="Minimum feature frequency")
    p.add_argument("--backoff", action="store_true", help="Add op-type-only features")
    p.add_argument("--model-out", help="Save the trained model (JSON)")
    p.add_argument("--out")

    p = commands.add_parser("tts-audit", help="Blind TTS quality audit")
    audit = p.add_subparsers(dest="audit_command", required=True)
    a = audit.add_parser("make-sheet", help="Sample prompts into an annotation sheet")
    a.add_argument("--corpus", required=True)
    a.add_argument("--fraction", type=float, default=0.1)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--audio-dir", help="Directory of exported <id>.wav files")
    a.add_argument("--out", required=True, help="Annotator sheet (CSV)")
    a.add_argument("--key-out", required=True, help="Hidden key (CSV)")
    a = audit.add_parser("score", help="Score a filled annotation sheet")
    a.add_argument("--sheet", required=True)
    a.add_argument("--key", required=True)
    a.add_argument("--tts-label", default="tts")
    a.add_argument("--format", choices=["markdown", "json"], default="markdown")

    p = commands.add_parser("wer", help="Corpus-level word error rate")
    p.add_argument("--refs", required=True, help="Reference texts, one per line")
    p.add_argument("--hyps", required=True, help="Hypothesis texts, one per line")
    p.add_argument("--no-normalize", action="store_true", help="Compare raw texts")
    p.add_argument("--details", action="store_true", help="Print edit counts as JSON")

    p = commands.add_parser("serve-mock", help="Serve mock adapters over HTTP")
    p.add_argument("--mock-dir", required=True)
    p.add_argument("--host", default=os.getenv("HTTP_HOST", "127.0.0.1"))
    p.add_argument("--port", type=int, default=int(os.getenv("HTTP_PORT", "8000")))
    p.add_argument("--workers", type=int, default=1)

    return parser


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _load_config(args: argparse.Namespace) -> RunConfig:
    return RunConfig.load(
        args.config,
        max_parallel_requests=args.parallel,
        cache_directory=Path(args.cache_dir) if args.cache_dir else None,
        audio_export_directory=Path(args.audio_dir)
        if args.command == "backtranscribe" and args.audio_dir
        else None,
    )


def _build_adapters(args: argparse.Namespace, config: RunConfig) -> tuple[Any, Any, Any]:
    if args.mock_dir:
        return load_mock_adapters(args.mock_dir)
    needed = {"tts": config.tts_endpoint, "asr": config.asr_endpoint, "nlu": config.nlu_endpoint}
    if args.command == "transcribe":
        needed.pop("tts")
    missing = [f"BT_{role.upper()}_ENDPOINT" for role, endpoint in needed.items() if not endpoint]
    if missing:
        raise ConfigError(f"Missing adapter endpoint(s): {', '.join(missing)}", missing=missing)

    def make(cls, endpoint):
        if endpoint is None:
            return None
        return cls(endpoint, config.api_key, config.request_timeout_seconds)

    return (
        make(HttpTtsAdapter, config.tts_endpoint),
        make(HttpAsrAdapter, config.asr_endpoint),
        make(HttpNluAdapter, config.nlu_endpoint),
    )


async def _run_pipeline(args: argparse.Namespace, corpus: Corpus, config: RunConfig) -> BackTranscriptionRun:
    tts, asr, nlu = _build_adapters(args, config)
    try:
        if args.command == "backtranscribe":
            return await back_transcribe(corpus, tts, asr, nlu, config)
        return await transcribe_recordings(corpus, args.audio_dir, asr, nlu, config)
    finally:
        for adapter in (tts, asr, nlu):
            if hasattr(adapter, "aclose"):
                await adapter.aclose()


def cmd_import(args: argparse.Namespace) -> None:
    if args.show_partitions:
        _emit(json.dumps(massive_partition_sizes(args.massive), sort_keys=True) + "\n", None)
    if args.out is None:
        if not args.show_partitions:
            raise ConfigError("import needs --out (or --show-partitions)")
        return
    corpus = import_massive(args.massive, args.task, partition=args.partition)
    save_corpus(corpus, args.out)


def cmd_run(args: argparse.Namespace) -> None:
    config = _load_config(args)
    corpus = load_corpus(args.corpus, config.normalization)
    run = asyncio.run(_run_pipeline(args, corpus, config))
    save_corpus(run.corpus, args.out)
    if args.metadata_out:
        run.metadata.write(args.metadata_out)
    summary = {
        "samples": run.metadata.samples,
        "completed": run.metadata.completed,
        "failed": run.failed_ids,
        "cache_hits": run.metadata.cache_hits,
    }
    _emit(json.dumps(summary) + "\n", None)


def _normalization(args: argparse.Namespace) -> NormalizationPolicy:
    """Normalization from --config and BT_* variables, as the run that wrote the corpus used."""
    return RunConfig.load(args.config).normalization


def _evaluable(path: str, normalization: NormalizationPolicy = DEFAULT_POLICY) -> Corpus:
    corpus = load_corpus(path, normalization)
    evaluable = corpus.evaluable()
    skipped = len(corpus) - len(evaluable)
    if skipped:
        logger.warning(f"Skipping {skipped} sample(s) without back-transcription results")
    return evaluable


def cmd_evaluate(args: argparse.Namespace) -> None:
    normalization = _normalization(args)
    corpus = _evaluable(args.corpus, normalization)
    if args.metric:
        _emit(f"{robustness_metric(corpus, args.metric, normalization).value}\n", args.out)
        return
    results = all_metrics(corpus, normalization)
    if args.format == "csv":
        _emit(metrics_csv(results), args.out)
        return

    if args.task:
        task = Task(args.task)
    elif len(corpus):
        task = corpus.samples[0].task
    else:
        raise CorpusError("Cannot evaluate an empty corpus")
    sections = [
        "## Outcome changes\n\n"
        + category_counts_markdown(
            category_counts(corpus, args.differing_only, normalization),
            args.nlu_label,
            args.tts_label,
        ),
        "## Robustness\n\n" + metrics_markdown(results, args.nlu_label, args.tts_label),
    ]
    try:
        sections.append(
            "## Standard metrics\n\n"
            + standard_metrics_markdown(
                standard_metrics(corpus, task), args.nlu_label, args.tts_label
            )
        )
    except UndefinedMetricError as e:
        sections.append(f"## Standard metrics\n\nn/a: {e.message}\n")
    if task is not Task.SLOTS:
        sections.append(
            "## F-measure components\n\n" + component_delta_markdown(fscore_component_delta(corpus))
        )
    _emit("\n".join(sections), args.out)


def cmd_compare(args: argparse.Namespace) -> None:
    normalization = _normalization(args)
    comparison = compare_robustness(
        _evaluable(args.corpus_a, normalization),
        _evaluable(args.corpus_b, normalization),
        normalization,
    )
    payload = {
        "differences": comparison.differences,
        "mean_abs_difference": comparison.mean_abs_difference,
        "max_abs_difference": comparison.max_abs_difference,
    }
    _emit(json.dumps(payload, indent=2) + "\n", args.out)


def cmd_editops(args: argparse.Namespace) -> None:
    normalization = _normalization(args)
    corpus = load_corpus(args.corpus, normalization)
    lines = []
    for sample in corpus:
        if sample.hypothesis is None:
            continue
        ops = extract_editops(sample.reference, sample.hypothesis)
        record = {
            "id": sample.id,
            "ops": [format_editop(op) for op in ops],
            "positions": [op.position for op in ops],
        }
        lines.append(json.dumps(record, ensure_ascii=False))
    _emit("".join(line + "\n" for line in lines), args.out)
    if args.freq_out:
        _emit(frequency_csv(rank_frequency(corpus, sys.maxsize, normalization)), args.freq_out)


def cmd_rank_errors(args: argparse.Namespace) -> None:
    normalization = _normalization(args)
    corpus = _evaluable(args.corpus, normalization)
    if args.by == "frequency":
        _emit(ranking_csv(rank_frequency(corpus, args.top, normalization)), args.out)
        return
    policy = get_policy(args.policy)
    dataset = build_dataset(
        corpus,
        policy,
        min_feature_frequency=args.min_freq,
        backoff=args.backoff,
        normalization=normalization,
    )
    model = train_logreg(
        dataset,
        LogRegHyperparams(
            l2_lambda=args.l2, tolerance=args.tolerance, max_iterations=args.max_iterations
        ),
    )
    model.metadata["policy"] = policy.name
    if args.model_out:
        save_model(model, args.model_out)
    _emit(ranking_csv(rank_errors(model, args.top)), args.out)


def cmd_tts_audit(args: argparse.Namespace) -> None:
    if args.audit_command == "make-sheet":
        sheet = make_annotation_sheet(
            load_corpus(args.corpus), args.fraction, args.seed, audio_dir=args.audio_dir
        )
        write_sheet(sheet, args.out, args.key_out)
        return
    result = compute_resemblance(read_filled_sheet(args.sheet, args.key))
    if args.format == "json":
        payload = {
            "total": result.total,
            "utt": result.utt,
            "aug": result.aug,
            "both": result.both,
            "resemblance": result.resemblance,
        }
        _emit(json.dumps(payload) + "\n", None)
    else:
        _emit(resemblance_markdown(result, args.tts_label), None)


def _read_lines(path: str, normalize: bool) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [normalize_text(line, DEFAULT_POLICY) if normalize else line for line in lines]


def cmd_wer(args: argparse.Namespace) -> None:
    normalize = not args.no_normalize
    stats = word_error_stats(_read_lines(args.refs, normalize), _read_lines(args.hyps, normalize))
    if args.details:
        payload = {
            "substitutions": stats.substitutions,
            "insertions": stats.insertions,
            "deletions": stats.deletions,
            "reference_tokens": stats.reference_tokens,
            "rate": stats.rate,
        }
        _emit(json.dumps(payload) + "\n", None)
    else:
        _emit(f"{stats.rate}\n", None)


def cmd_serve_mock(args: argparse.Namespace) -> None:
    run_mock_service(
        args.mock_dir,
        host=args.host,
        port=args.port,
        workers=args.workers,
        log_level=args.log_level,
    )


COMMANDS = {
    "import": cmd_import,
    "backtranscribe": cmd_run,
    "transcribe": cmd_run,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "editops": cmd_editops,
    "rank-errors": cmd_rank_errors,
    "tts-audit": cmd_tts_audit,
    "wer": cmd_wer,
    "serve-mock": cmd_serve_mock,
}


def _fail(summary: dict[str, Any]) -> int:
    sys.stderr.write(json.dumps(summary, default=str) + "\n")
    return 1


def main(argv: Sequence[str] | None = None) -> int:
    """Main entry point; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    setup_logging(
        level=args.log_level.upper(), log_file=args.log_file, structured=args.structured_logs
    )
    logger.debug(f"Running command {args.command}")

    try:
        COMMANDS[args.command](args)
    except BtRobustnessError as e:
        run_logger.log_error(e, args.command)
        return _fail(e.to_dict())
    except OSError as e:
        run_logger.log_error(e, args.command)
        return _fail(
            {
                "error": type(e).__name__,
                "message": e.strerror or str(e),
                "details": {"path": e.filename},
            }
        )
    except KeyboardInterrupt:
        sys.stderr.write("\nInterrupted by user\n")
        return 130
    return 0
