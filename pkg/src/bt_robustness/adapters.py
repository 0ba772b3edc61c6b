"""
Pluggable TTS/ASR/NLU adapters.

HTTP adapters speak a small JSON wire protocol (audio travels base64-encoded):

    TTS: POST {"text": ...}                      -> {"audio_b64": ..., "format": "wav"}
    ASR: POST {"audio_b64": ..., "format": "wav"} -> {"text": ...}
    NLU: POST {"text": ..., "task": ...}          -> OUTCOME

File-backed mock adapters read lookup tables from a directory (tts.json, asr.json,
nlu.json) and make hermetic runs possible.
"""

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, ClassVar, Mapping, Protocol, runtime_checkable

import httpx

from .corpus import DEFAULT_POLICY, NluOutcome, Task, normalize_text
from .errors import AdapterError, SchemaError
from .logging_config import get_logger

logger = get_logger("adapters")

AUDIO_FORMAT = "wav"


@runtime_checkable
class TtsAdapter(Protocol):
    identity: str
    deterministic: bool
    calls: int

    def cache_config(self) -> dict[str, Any]: ...

    async def synthesize(self, text: str) -> bytes: ...


@runtime_checkable
class AsrAdapter(Protocol):
    identity: str
    deterministic: bool
    calls: int

    def cache_config(self) -> dict[str, Any]: ...

    async def transcribe(self, audio: bytes) -> str: ...


@runtime_checkable
class NluAdapter(Protocol):
    identity: str
    deterministic: bool
    calls: int

    def cache_config(self) -> dict[str, Any]: ...

    async def understand(self, text: str, task: Task) -> NluOutcome: ...


def encode_audio(audio: bytes) -> str:
    return base64.b64encode(audio).decode("ascii")


def decode_audio(audio_b64: str) -> bytes:
    try:
        return base64.b64decode(audio_b64, validate=True)
    except ValueError as e:
        raise AdapterError(f"Invalid base64 audio payload: {e}") from e


class HttpAdapter:
    """Shared plumbing for adapters reached over HTTP."""

    kind: ClassVar[str] = "http"

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        timeout_s: float = 60.0,
        client: httpx.AsyncClient | None = None,
        deterministic: bool = True,
    ):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout_s = timeout_s
        self.deterministic = deterministic
        self.calls = 0
        self._client = client
        self._owns_client = client is None

    @property
    def identity(self) -> str:
        return f"http-{self.kind}:{self.endpoint}"

    def cache_config(self) -> dict[str, Any]:
        # Credentials never enter cache keys or metadata
        return {"endpoint": self.endpoint, "kind": self.kind}

    def _headers(self) -> dict[str, str]:
        headers = {"Accept": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    async def _post(self, payload: dict[str, Any]) -> dict[str, Any]:
        self.calls += 1
        if self._client is None:
            self._client = httpx.AsyncClient(timeout=self.timeout_s)
        try:
            response = await self._client.post(
                self.endpoint, json=payload, headers=self._headers(), timeout=self.timeout_s
            )
            response.raise_for_status()
            body = response.json()
        except httpx.HTTPStatusError as e:
            raise AdapterError(
                f"{self.identity} returned HTTP {e.response.status_code}",
                status_code=e.response.status_code,
            ) from e
        except httpx.HTTPError as e:
            raise AdapterError(f"{self.identity} request failed: {e}") from e
        except ValueError as e:
            raise AdapterError(f"{self.identity} returned a non-JSON body") from e
        if not isinstance(body, dict):
            raise AdapterError(f"{self.identity} returned a non-object JSON body")
        return body

    async def aclose(self) -> None:
        if self._client is not None and self._owns_client:
            await self._client.aclose()
            self._client = None


class HttpTtsAdapter(HttpAdapter):
    kind = "tts"

    async def synthesize(self, text: str) -> bytes:
        body = await self._post({"text": text})
        if "audio_b64" not in body:
            raise AdapterError(f"{self.identity} response lacks 'audio_b64'")
        return decode_audio(body["audio_b64"])


class HttpAsrAdapter(HttpAdapter):
    kind = "asr"

    async def transcribe(self, audio: bytes) -> str:
        body = await self._post({"audio_b64": encode_audio(audio), "format": AUDIO_FORMAT})
        text = body.get("text")
        if not isinstance(text, str):
            raise AdapterError(f"{self.identity} response lacks 'text'")
        return text


def checked_outcome(identity: str, body: Any, task: Task) -> NluOutcome:
    """Parse an NLU reply, rejecting malformed outcomes and outcomes for another task."""
    try:
        outcome = NluOutcome.from_json(body)
    except SchemaError as e:
        raise AdapterError(f"{identity} returned an invalid outcome: {e}") from e
    if outcome.task is not task:
        raise AdapterError(
            f"{identity} answered a {task.value} request with a {outcome.task.value} outcome"
        )
    return outcome


class HttpNluAdapter(HttpAdapter):
    kind = "nlu"

    async def understand(self, text: str, task: Task) -> NluOutcome:
        body = await self._post({"text": text, "task": task.value})
        return checked_outcome(self.identity, body, task)


def _table_digest(table: Mapping[str, Any]) -> str:
    canonical = json.dumps(table, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(canonical).hexdigest()[:16]


@dataclass
class MockTables:
    """
    Lookup tables behind the mock adapters.

    tts: text -> audio key (the mock "audio" is the UTF-8 encoding of the key)
    asr: audio key -> transcript
    nlu: task -> {text: OUTCOME}
    """

    tts: dict[str, str] = field(default_factory=dict)
    asr: dict[str, str] = field(default_factory=dict)
    nlu: dict[str, dict[str, dict[str, Any]]] = field(default_factory=dict)

    @classmethod
    def from_directory(cls, directory: str | Path) -> "MockTables":
        base = Path(directory)
        if not base.is_dir():
            raise AdapterError(f"Mock adapter directory not found: {base}")

        def read(name: str) -> dict:
            path = base / name
            if not path.exists():
                return {}
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
            if not isinstance(data, dict):
                raise AdapterError(f"{path} must hold a JSON object")
            return data

        nlu_raw = read("nlu.json")
        nlu = {
            task: {normalize_text(text): outcome for text, outcome in entries.items()}
            for task, entries in nlu_raw.items()
        }
        return cls(tts=read("tts.json"), asr=read("asr.json"), nlu=nlu)

    def lookup_outcome(self, text: str, task: Task) -> NluOutcome:
        entry = self.nlu.get(task.value, {}).get(normalize_text(text, DEFAULT_POLICY))
        if entry is None:
            raise AdapterError(f"No mock {task.value} outcome for text: {text!r}", text=text)
        return checked_outcome("mock nlu table", entry, task)


class MockTtsAdapter:
    deterministic = True

    def __init__(self, tables: MockTables):
        self.tables = tables
        self.calls = 0
        self.identity = f"mock-tts:{_table_digest(tables.tts)}"

    def cache_config(self) -> dict[str, Any]:
        return {"table": _table_digest(self.tables.tts)}

    async def synthesize(self, text: str) -> bytes:
        self.calls += 1
        return self.tables.tts.get(text, text).encode("utf-8")


class MockAsrAdapter:
    deterministic = True

    def __init__(self, tables: MockTables):
        self.tables = tables
        self.calls = 0
        self.identity = f"mock-asr:{_table_digest(tables.asr)}"

    def cache_config(self) -> dict[str, Any]:
        return {"table": _table_digest(self.tables.asr)}

    async def transcribe(self, audio: bytes) -> str:
        self.calls += 1
        try:
            key = audio.decode("utf-8")
        except UnicodeDecodeError as e:
            raise AdapterError("Mock ASR only understands mock audio") from e
        # echo channel for unknown audio
        return self.tables.asr.get(key, key)


class MockNluAdapter:
    deterministic = True

    def __init__(self, tables: MockTables):
        self.tables = tables
        self.calls = 0
        self.identity = f"mock-nlu:{_table_digest(tables.nlu)}"

    def cache_config(self) -> dict[str, Any]:
        return {"table": _table_digest(self.tables.nlu)}

    async def understand(self, text: str, task: Task) -> NluOutcome:
        self.calls += 1
        return self.tables.lookup_outcome(text, task)


def load_mock_adapters(
    directory: str | Path,
) -> tuple[MockTtsAdapter, MockAsrAdapter, MockNluAdapter]:
    """Build the three file-backed mock adapters from one table directory."""
    tables = MockTables.from_directory(directory)
    logger.info(
        f"Loaded mock tables from {directory}: {len(tables.tts)} tts, "
        f"{len(tables.asr)} asr, {sum(len(v) for v in tables.nlu.values())} nlu entries"
    )
    return MockTtsAdapter(tables), MockAsrAdapter(tables), MockNluAdapter(tables)
