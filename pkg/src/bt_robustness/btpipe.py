"""
Back-transcription pipeline: TTS -> ASR -> NLU over a corpus, plus word error rate.

Adapter calls run concurrently up to ``max_parallel_requests`` and every result
is cached on disk under a key derived from (adapter identity, adapter config,
input bytes), so an interrupted or repeated run only pays for missing work.
"""

import asyncio
import dataclasses
import hashlib
import json
import os
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Awaitable, Callable, Mapping, Sequence

from dotenv import dotenv_values

from .adapters import (
    AsrAdapter,
    NluAdapter,
    TtsAdapter,
    checked_outcome,
    decode_audio,
    encode_audio,
)
from .corpus import (
    DEFAULT_POLICY,
    Corpus,
    NluOutcome,
    NormalizationPolicy,
    Sample,
    normalize_text,
)
from .errors import AdapterError, ConfigError, WerInputError
from .logging_config import RunLogger, get_logger, log_function_call

logger = get_logger("btpipe")
run_logger = RunLogger()

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(key: str, value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ConfigError(f"{key} must be a boolean, got {value!r}", key=key)


def _parse_number(key: str, value: str, kind: type) -> Any:
    try:
        return kind(value)
    except ValueError as e:
        raise ConfigError(f"{key} must be a {kind.__name__}, got {value!r}", key=key) from e


@dataclass(frozen=True)
class RunConfig:
    """Settings of one back-transcription run."""

    tts_endpoint: str | None = None
    asr_endpoint: str | None = None
    nlu_endpoint: str | None = None
    api_key: str | None = field(default=None, repr=False)
    max_parallel_requests: int = 4
    retry_limit: int = 2
    retry_backoff_seconds: float = 0.5
    request_timeout_seconds: float = 60.0
    cache_directory: Path | None = None
    audio_export_directory: Path | None = None
    normalization: NormalizationPolicy = DEFAULT_POLICY
    normalize_before_nlu: bool = False

    def __post_init__(self):
        if self.max_parallel_requests < 1:
            raise ConfigError(
                f"max_parallel_requests must be >= 1, got {self.max_parallel_requests}"
            )
        if self.retry_limit < 0:
            raise ConfigError(f"retry_limit must be >= 0, got {self.retry_limit}")
        if self.retry_backoff_seconds < 0 or self.request_timeout_seconds <= 0:
            raise ConfigError("Backoff must be >= 0 and request timeout > 0")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str | None]) -> "RunConfig":
        """Build a config from BT_* keys; absent keys keep their defaults."""
        v = {key: value for key, value in values.items() if value not in (None, "")}
        kwargs: dict[str, Any] = {}
        for key, name in (
            ("BT_TTS_ENDPOINT", "tts_endpoint"),
            ("BT_ASR_ENDPOINT", "asr_endpoint"),
            ("BT_NLU_ENDPOINT", "nlu_endpoint"),
            ("BT_API_KEY", "api_key"),
        ):
            if key in v:
                kwargs[name] = v[key]
        for key, name, kind in (
            ("BT_MAX_PARALLEL_REQUESTS", "max_parallel_requests", int),
            ("BT_RETRY_LIMIT", "retry_limit", int),
            ("BT_RETRY_BACKOFF_SECONDS", "retry_backoff_seconds", float),
            ("BT_REQUEST_TIMEOUT_SECONDS", "request_timeout_seconds", float),
        ):
            if key in v:
                kwargs[name] = _parse_number(key, v[key], kind)
        for key, name in (
            ("BT_CACHE_DIRECTORY", "cache_directory"),
            ("BT_AUDIO_EXPORT_DIRECTORY", "audio_export_directory"),
        ):
            if key in v:
                kwargs[name] = Path(v[key])
        if "BT_NORMALIZE_BEFORE_NLU" in v:
            kwargs["normalize_before_nlu"] = _parse_bool(
                "BT_NORMALIZE_BEFORE_NLU", v["BT_NORMALIZE_BEFORE_NLU"]
            )
        policy: dict[str, bool] = {}
        for key, name in (
            ("BT_LOWERCASE", "lowercase"),
            ("BT_COLLAPSE_WHITESPACE", "collapse_whitespace"),
            ("BT_STRIP_OUTER_WHITESPACE", "strip_outer_whitespace"),
            ("BT_STRIP_TERMINAL_PUNCTUATION", "strip_terminal_punctuation"),
        ):
            if key in v:
                policy[name] = _parse_bool(key, v[key])
        if policy:
            kwargs["normalization"] = NormalizationPolicy(**policy)
        return cls(**kwargs)

    @classmethod
    def load(
        cls,
        path: str | Path | None = None,
        environ: Mapping[str, str] | None = None,
        **overrides: Any,
    ) -> "RunConfig":
        """
        Load a config: key-value file, then BT_* environment variables, then
        explicit overrides (None values are ignored).
        """
        values: dict[str, str | None] = {}
        if path is not None:
            if not Path(path).exists():
                raise ConfigError(f"Config file not found: {path}", path=str(path))
            values.update(dotenv_values(path))
        environ = os.environ if environ is None else environ
        values.update({k: v for k, v in environ.items() if k.startswith("BT_")})
        config = cls.from_mapping(values)
        changes = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(config, **changes) if changes else config

    def describe(self) -> dict[str, Any]:
        """Non-secret view of the config."""
        data = dataclasses.asdict(self)
        data.pop("api_key")
        for key in ("cache_directory", "audio_export_directory"):
            data[key] = str(data[key]) if data[key] is not None else None
        return data

    def config_hash(self) -> str:
        canonical = json.dumps(self.describe(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(canonical).hexdigest()


class ResultCache:
    """
    Adapter result cache: an in-memory map backed by one JSON file per key
    when a directory is configured.
    """

    def __init__(self, directory: Path | None = None):
        self.directory = directory
        self._memory: dict[str, dict[str, Any]] = {}
        if directory is not None:
            directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(identity: str, config: Mapping[str, Any], payload: bytes) -> str:
        digest = hashlib.sha256()
        digest.update(identity.encode("utf-8"))
        digest.update(b"\0")
        digest.update(json.dumps(config, sort_keys=True).encode("utf-8"))
        digest.update(b"\0")
        digest.update(payload)
        return digest.hexdigest()

    def _path(self, key: str) -> Path:
        assert self.directory is not None
        return self.directory / f"{key}.json"

    def get(self, key: str) -> dict[str, Any] | None:
        if key in self._memory:
            return self._memory[key]
        if self.directory is None:
            return None
        path = self._path(key)
        if not path.exists():
            return None
        try:
            with open(path, "r", encoding="utf-8") as f:
                value = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.warning(f"Ignoring unreadable cache entry {path.name}: {e}")
            return None
        self._memory[key] = value
        return value

    def put(self, key: str, value: dict[str, Any]) -> None:
        self._memory[key] = value
        if self.directory is None:
            return
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(value, f, ensure_ascii=False)
        os.replace(tmp, self._path(key))


@dataclass
class SampleFailure:
    sample_id: str
    stage: str
    error: str


@dataclass
class RunMetadata:
    run_kind: str
    adapters: dict[str, dict[str, Any]]
    config_hash: str
    started_at: str
    finished_at: str | None = None
    samples: int = 0
    completed: int = 0
    adapter_calls: dict[str, int] = field(default_factory=dict)
    cache_hits: int = 0
    failures: list[SampleFailure] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        data = dataclasses.asdict(self)
        data["failures"] = [
            {"id": f.sample_id, "stage": f.stage, "error": f.error} for f in self.failures
        ]
        return data

    def write(self, path: str | Path) -> None:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, indent=2, ensure_ascii=False)


@dataclass
class BackTranscriptionRun:
    """Output corpus of a run and what happened while producing it."""

    corpus: Corpus
    metadata: RunMetadata

    @property
    def failed_ids(self) -> list[str]:
        return [f.sample_id for f in self.metadata.failures]


class _StageError(Exception):
    def __init__(self, stage: str, error: Exception):
        super().__init__(str(error))
        self.stage = stage
        self.error = error


class _Pipeline:
    def __init__(
        self,
        config: RunConfig,
        asr: AsrAdapter,
        nlu: NluAdapter,
        tts: TtsAdapter | None = None,
    ):
        self.config = config
        self.tts = tts
        self.asr = asr
        self.nlu = nlu
        self.cache = ResultCache(config.cache_directory)
        self.semaphore = asyncio.Semaphore(config.max_parallel_requests)
        self.cache_hits = 0

    async def _cached_call(
        self,
        stage: str,
        adapter: Any,
        payload: bytes,
        invoke: Callable[[], Awaitable[dict[str, Any]]],
    ) -> dict[str, Any]:
        key = ResultCache.key(adapter.identity, adapter.cache_config(), payload)
        cached = self.cache.get(key)
        if cached is not None:
            self.cache_hits += 1
            return cached
        attempt = 0
        while True:
            try:
                async with self.semaphore:
                    result = await invoke()
                break
            except AdapterError as e:
                if attempt >= self.config.retry_limit:
                    raise _StageError(stage, e) from e
                attempt += 1
                run_logger.log_adapter_retry(adapter.identity, attempt, e)
                await asyncio.sleep(self.config.retry_backoff_seconds * 2 ** (attempt - 1))
        self.cache.put(key, result)
        return result

    async def synthesize(self, text: str) -> bytes:
        assert self.tts is not None
        tts = self.tts

        async def invoke() -> dict[str, Any]:
            return {"audio_b64": encode_audio(await tts.synthesize(text))}

        result = await self._cached_call("tts", tts, text.encode("utf-8"), invoke)
        return decode_audio(result["audio_b64"])

    async def transcribe(self, audio: bytes) -> str:
        asr = self.asr

        async def invoke() -> dict[str, Any]:
            return {"text": await asr.transcribe(audio)}

        result = await self._cached_call("asr", asr, audio, invoke)
        return result["text"]

    async def understand(self, text: str, sample: Sample) -> NluOutcome:
        nlu = self.nlu
        task = sample.task

        async def invoke() -> dict[str, Any]:
            return (await nlu.understand(text, task)).to_json()

        payload = json.dumps({"text": text, "task": task.value}).encode("utf-8")
        result = await self._cached_call("nlu", nlu, payload, invoke)
        try:
            outcome = checked_outcome(nlu.identity, result, task)
        except AdapterError as e:
            raise _StageError("nlu", e) from e
        return outcome.normalized(self.config.normalization)

    def export_audio(self, sample_id: str, audio: bytes) -> None:
        directory = self.config.audio_export_directory
        if directory is None:
            return
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{sample_id}.wav").write_bytes(audio)

    async def finish_sample(self, sample: Sample, audio: bytes) -> Sample:
        hypothesis = normalize_text(await self.transcribe(audio), self.config.normalization)
        reference_input = (
            normalize_text(sample.reference, self.config.normalization)
            if self.config.normalize_before_nlu
            else sample.reference
        )
        before, after = await asyncio.gather(
            self.understand(reference_input, sample),
            self.understand(hypothesis, sample),
        )
        return dataclasses.replace(sample, hypothesis=hypothesis, before=before, after=after)


def _adapter_info(**adapters: Any) -> dict[str, dict[str, Any]]:
    return {
        role: {"identity": adapter.identity, "deterministic": adapter.deterministic}
        for role, adapter in adapters.items()
        if adapter is not None
    }


async def _run(
    run_kind: str,
    corpus: Corpus,
    pipeline: _Pipeline,
    process: Callable[[Sample], Awaitable[Sample]],
) -> BackTranscriptionRun:
    adapters = {"tts": pipeline.tts, "asr": pipeline.asr, "nlu": pipeline.nlu}
    calls_before = {role: a.calls for role, a in adapters.items() if a is not None}
    metadata = RunMetadata(
        run_kind=run_kind,
        adapters=_adapter_info(**adapters),
        config_hash=pipeline.config.config_hash(),
        started_at=datetime.now(timezone.utc).isoformat(),
        samples=len(corpus),
    )
    for role, info in metadata.adapters.items():
        if not info["deterministic"]:
            logger.warning(f"{role} adapter {info['identity']} is non-deterministic")
    run_logger.log_run_started(run_kind, len(corpus), pipeline.config.describe())
    start = time.perf_counter()

    async def guarded(sample: Sample) -> tuple[Sample, SampleFailure | None]:
        try:
            return await process(sample), None
        except _StageError as e:
            run_logger.log_sample_failed(sample.id, e.stage, e.error)
            return sample, SampleFailure(sample.id, e.stage, str(e.error))

    results = await asyncio.gather(*(guarded(sample) for sample in corpus))

    # gather preserves input order, so the output follows corpus order
    by_id = {sample.id: sample for sample, _ in results}
    metadata.failures = [failure for _, failure in results if failure is not None]
    metadata.completed = len(corpus) - len(metadata.failures)
    metadata.cache_hits = pipeline.cache_hits
    metadata.adapter_calls = {
        role: a.calls - calls_before[role] for role, a in adapters.items() if a is not None
    }
    metadata.finished_at = datetime.now(timezone.utc).isoformat()
    run_logger.log_run_finished(
        run_kind, metadata.completed, len(metadata.failures), time.perf_counter() - start
    )
    return BackTranscriptionRun(
        corpus=Corpus(tuple(by_id[sample_id] for sample_id in corpus.ids)),
        metadata=metadata,
    )


@log_function_call(logger)
async def back_transcribe(
    corpus: Corpus,
    tts: TtsAdapter,
    asr: AsrAdapter,
    nlu: NluAdapter,
    config: RunConfig,
) -> BackTranscriptionRun:
    """
    Run the back-transcription loop over a corpus.

    Every sample gains hypothesis = normalize(asr(tts(reference))),
    before = nlu(reference) and after = nlu(hypothesis). A sample whose adapter
    calls still fail after the retries keeps its original fields and is listed
    in the run metadata; the rest of the corpus is processed regardless.

    Args:
        corpus: Samples with reference and expected outcome
        tts: Text-to-speech adapter
        asr: Speech recognition adapter
        nlu: NLU adapter
        config: Concurrency, retry, cache and normalization settings

    Returns:
        BackTranscriptionRun: Output corpus (input order) and run metadata
    """
    pipeline = _Pipeline(config, asr=asr, nlu=nlu, tts=tts)

    async def process(sample: Sample) -> Sample:
        audio = await pipeline.synthesize(sample.reference)
        pipeline.export_audio(sample.id, audio)
        return await pipeline.finish_sample(sample, audio)

    return await _run("back_transcription", corpus, pipeline, process)


@log_function_call(logger)
async def transcribe_recordings(
    corpus: Corpus,
    audio_dir: str | Path,
    asr: AsrAdapter,
    nlu: NluAdapter,
    config: RunConfig,
) -> BackTranscriptionRun:
    """
    Same loop as back_transcribe, but the audio of each sample is a recording
    read from ``<audio_dir>/<id>.wav`` instead of synthesized speech.
    """
    pipeline = _Pipeline(config, asr=asr, nlu=nlu)
    base = Path(audio_dir)

    async def process(sample: Sample) -> Sample:
        path = base / f"{sample.id}.wav"
        try:
            audio = path.read_bytes()
        except OSError as e:
            raise _StageError("audio", e) from e
        return await pipeline.finish_sample(sample, audio)

    return await _run("recorded_transcription", corpus, pipeline, process)


@dataclass(frozen=True)
class WordErrorStats:
    substitutions: int
    insertions: int
    deletions: int
    reference_tokens: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        if self.reference_tokens == 0:
            raise WerInputError("Word error rate is undefined without reference tokens")
        return self.errors / self.reference_tokens


def _edit_counts(ref: Sequence[str], hyp: Sequence[str]) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of one minimum-cost token alignment."""
    rows, cols = len(ref) + 1, len(hyp) + 1
    dist = [[0] * cols for _ in range(rows)]
    for i in range(rows):
        dist[i][0] = i
    for j in range(cols):
        dist[0][j] = j
    for i in range(1, rows):
        for j in range(1, cols):
            if ref[i - 1] == hyp[j - 1]:
                dist[i][j] = dist[i - 1][j - 1]
            else:
                dist[i][j] = 1 + min(dist[i - 1][j - 1], dist[i][j - 1], dist[i - 1][j])

    subs = ins = dels = 0
    i, j = len(ref), len(hyp)
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and dist[i][j] == dist[i - 1][j - 1]:
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + 1:
            subs += 1
            i, j = i - 1, j - 1
        elif j > 0 and dist[i][j] == dist[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return subs, ins, dels


def word_error_stats(references: Sequence[str], hypotheses: Sequence[str]) -> WordErrorStats:
    """
    Corpus-level edit counts between paired reference and hypothesis texts.

    Raises:
        WerInputError: If the lists differ in length
    """
    if len(references) != len(hypotheses):
        raise WerInputError(
            f"{len(references)} references but {len(hypotheses)} hypotheses",
            references=len(references),
            hypotheses=len(hypotheses),
        )
    subs = ins = dels = tokens = 0
    for reference, hypothesis in zip(references, hypotheses):
        ref_tokens = reference.split()
        s, i, d = _edit_counts(ref_tokens, hypothesis.split())
        subs, ins, dels = subs + s, ins + i, dels + d
        tokens += len(ref_tokens)
    return WordErrorStats(subs, ins, dels, tokens)


def word_error_rate(references: Sequence[str], hypotheses: Sequence[str]) -> float:
    """
    Corpus-level WER: summed token edit distances over summed reference lengths.

    Raises:
        WerInputError: On a length mismatch or zero reference tokens
    """
    return word_error_stats(references, hypotheses).rate
