"""HTTP mock of the TTS/ASR/NLU adapter services, backed by lookup tables."""

import asyncio
import os
import platform
import signal
import sys
import threading
import time
from collections import deque
from pathlib import Path
from typing import Any

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse
from hypercorn.asyncio import serve
from hypercorn.config import Config
from pydantic import BaseModel

from . import __version__
from .adapters import AUDIO_FORMAT, MockTables, decode_audio, encode_audio
from .corpus import Task
from .errors import AdapterError
from .logging_config import get_logger

logger = get_logger("mock_service")

MAX_RESPONSE_TIMES = 1000


class ServiceMetrics:
    """Thread-safe request counters of one app instance."""

    def __init__(self):
        self.lock = threading.Lock()
        self.start_time = time.time()
        self.requests_total = 0
        self.errors_total = 0
        self.requests_by_endpoint: dict[str, int] = {}
        self.response_times: deque[float] = deque(maxlen=MAX_RESPONSE_TIMES)

    def record(self, endpoint: str, process_time: float, is_error: bool) -> None:
        with self.lock:
            self.requests_total += 1
            self.requests_by_endpoint[endpoint] = self.requests_by_endpoint.get(endpoint, 0) + 1
            if is_error:
                self.errors_total += 1
            self.response_times.append(process_time)

    def snapshot(self) -> dict[str, Any]:
        with self.lock:
            avg_response_time = (
                sum(self.response_times) / len(self.response_times)
                if self.response_times
                else 0
            )
            return {
                "total_requests": self.requests_total,
                "errors_total": self.errors_total,
                "requests_by_endpoint": dict(self.requests_by_endpoint),
                "avg_response_time_ms": round(avg_response_time * 1000, 3),
            }


class TtsRequest(BaseModel):
    text: str


class AsrRequest(BaseModel):
    audio_b64: str
    format: str = AUDIO_FORMAT


class NluRequest(BaseModel):
    text: str
    task: Task


def create_app(tables: MockTables) -> FastAPI:
    """Create the mock adapter application over the given lookup tables."""
    app = FastAPI(
        title="Back-transcription mock adapters",
        description="Deterministic TTS/ASR/NLU stand-ins speaking the adapter wire protocol",
        version=__version__,
    )
    metrics = ServiceMetrics()
    app.state.metrics = metrics
    app.state.tables = tables

    @app.middleware("http")
    async def metrics_middleware(request: Request, call_next):
        start_time = time.time()
        is_error = False
        try:
            response = await call_next(request)
            is_error = response.status_code >= 400
        except Exception as e:
            logger.error(f"Request failed: {e}")
            is_error = True
            raise
        finally:
            process_time = time.time() - start_time
            metrics.record(request.url.path, process_time, is_error)

        response.headers["X-Process-Time"] = str(process_time)
        return response

    @app.post("/tts")
    async def tts(body: TtsRequest):
        audio = tables.tts.get(body.text, body.text).encode("utf-8")
        return {"audio_b64": encode_audio(audio), "format": AUDIO_FORMAT}

    @app.post("/asr")
    async def asr(body: AsrRequest):
        if body.format != AUDIO_FORMAT:
            raise HTTPException(status_code=400, detail=f"Unsupported audio format: {body.format}")
        try:
            key = decode_audio(body.audio_b64).decode("utf-8")
        except (AdapterError, UnicodeDecodeError) as e:
            raise HTTPException(status_code=400, detail=f"Undecodable audio: {e}") from e
        return {"text": tables.asr.get(key, key)}

    @app.post("/nlu")
    async def nlu(body: NluRequest):
        try:
            outcome = tables.lookup_outcome(body.text, body.task)
        except AdapterError as e:
            raise HTTPException(status_code=404, detail=e.message) from e
        return outcome.to_json()

    @app.get("/health")
    async def health_check():
        return JSONResponse(
            {
                "status": "healthy",
                "version": __version__,
                "uptime_seconds": time.time() - metrics.start_time,
                "tables": {
                    "tts": len(tables.tts),
                    "asr": len(tables.asr),
                    "nlu": sum(len(entries) for entries in tables.nlu.values()),
                },
                "performance": metrics.snapshot(),
            }
        )

    @app.get("/")
    async def root():
        return JSONResponse(
            {
                "name": "Back-transcription mock adapters",
                "version": __version__,
                "endpoints": {"tts": "/tts", "asr": "/asr", "nlu": "/nlu", "health": "/health"},
            }
        )

    return app


def create_hypercorn_config(
    host: str = "127.0.0.1",
    port: int = 8000,
    workers: int | None = None,
    log_level: str = "info",
) -> Config:
    config = Config()
    config.bind = [f"{host}:{port}"]
    config.loglevel = log_level.lower()
    config.worker_class = "uvloop" if platform.system() != "Windows" else "asyncio"
    config.workers = workers or max(1, (os.cpu_count() or 1) // 2)
    config.keep_alive_timeout = 65
    config.graceful_timeout = 30
    config.accesslog = "-"
    return config


async def _shutdown(server_task: asyncio.Task) -> None:
    logger.info("Shutting down mock adapter service...")
    server_task.cancel()
    try:
        await server_task
    except asyncio.CancelledError:
        pass
    logger.info("Mock adapter service shutdown complete")


def run_mock_service(
    mock_dir: str | Path,
    host: str = "127.0.0.1",
    port: int = 8000,
    workers: int | None = 1,
    log_level: str = "info",
) -> None:
    """Serve the mock adapters from a table directory with Hypercorn."""
    app = create_app(MockTables.from_directory(mock_dir))
    config = create_hypercorn_config(host, port, workers, log_level)
    logger.info(f"Starting mock adapter service on {host}:{port} with tables from {mock_dir}")

    async def main():
        server_task: asyncio.Task | None = None

        def signal_handler(sig, frame):
            if server_task:
                asyncio.create_task(_shutdown(server_task))

        signal.signal(signal.SIGINT, signal_handler)
        signal.signal(signal.SIGTERM, signal_handler)

        try:
            server_task = asyncio.create_task(serve(app, config))  # type: ignore
            await server_task
        except asyncio.CancelledError:
            logger.info("Server cancelled")

    try:
        if platform.system() != "Windows":
            import uvloop

            uvloop.run(main())
        else:
            asyncio.run(main())
    except KeyboardInterrupt:
        logger.info("Mock adapter service stopped by user")
    except Exception as e:
        logger.error(f"Failed to start mock adapter service: {e}")
        sys.exit(1)
