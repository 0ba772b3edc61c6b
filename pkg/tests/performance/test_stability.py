"""
Stability tests: thread safety of the mock service counters, bounded memory of
the response-time window and the on-disk result cache under concurrent use.
"""

import asyncio
import time
from concurrent.futures import ThreadPoolExecutor

import pytest

from bt_robustness.adapters import load_mock_adapters
from bt_robustness.btpipe import ResultCache, RunConfig, back_transcribe
from bt_robustness.mock_service import MAX_RESPONSE_TIMES, ServiceMetrics


class TestConcurrencyAndThreadSafety:
    """Test thread safety and concurrency handling."""

    def test_service_metrics_concurrent_updates(self):
        """Test that counters stay exact when many request handlers record at once."""
        metrics = ServiceMetrics()

        def record_worker(worker_id: int, updates: int):
            for i in range(updates):
                metrics.record(f"/endpoint-{worker_id % 3}", 0.001, is_error=i % 5 == 0)
                time.sleep(0.0001)

        num_workers = 8
        updates_per_worker = 25

        with ThreadPoolExecutor(max_workers=num_workers) as executor:
            futures = [
                executor.submit(record_worker, worker_id, updates_per_worker)
                for worker_id in range(num_workers)
            ]
            for future in futures:
                future.result()

        snapshot = metrics.snapshot()
        assert snapshot["total_requests"] == num_workers * updates_per_worker
        assert snapshot["errors_total"] == num_workers * 5
        assert sum(snapshot["requests_by_endpoint"].values()) == num_workers * updates_per_worker

    def test_result_cache_concurrent_writers(self, tmp_path):
        """Test that concurrent writers of the same keys leave complete entries and no temp files."""
        cache = ResultCache(tmp_path / "cache")
        keys = [ResultCache.key("mock-asr", {}, f"audio-{i}".encode()) for i in range(20)]

        def writer(worker_id: int):
            for i, key in enumerate(keys):
                cache.put(key, {"text": f"transcript {i}"})

        with ThreadPoolExecutor(max_workers=6) as executor:
            for future in [executor.submit(writer, w) for w in range(6)]:
                future.result()

        fresh = ResultCache(tmp_path / "cache")
        assert [fresh.get(key) for key in keys] == [{"text": f"transcript {i}"} for i in range(20)]
        assert not list((tmp_path / "cache").glob("*.tmp"))


class TestMemoryManagement:
    """Test memory management and resource limits."""

    def test_response_time_window_is_bounded(self):
        """Test that the response-time window keeps only the latest entries."""
        metrics = ServiceMetrics()
        for i in range(MAX_RESPONSE_TIMES + 100):
            metrics.record("/asr", i * 0.001, is_error=False)

        assert len(metrics.response_times) == MAX_RESPONSE_TIMES
        assert (MAX_RESPONSE_TIMES + 99) * 0.001 in metrics.response_times
        assert 0.0 not in metrics.response_times
        assert metrics.snapshot()["total_requests"] == MAX_RESPONSE_TIMES + 100


class TestErrorRecovery:
    """Test recovery from damaged state between runs."""

    def test_corrupt_cache_entry_is_recomputed(self, tmp_path, mock_dir, hermetic_input_corpus, hermetic_expected_corpus):
        """
        Test that a damaged cache entry is recomputed instead of failing the sample.

        Args:
            tmp_path: Directory for the result cache.
            mock_dir: Mock tables of the fixture.
            hermetic_input_corpus: The fixture before back transcription.
            hermetic_expected_corpus: The fixture as the run must produce it.
        """
        cache_dir = tmp_path / "cache"
        config = RunConfig(retry_limit=0, cache_directory=cache_dir)
        first = asyncio.run(back_transcribe(hermetic_input_corpus, *load_mock_adapters(mock_dir), config))
        assert first.metadata.cache_hits == 0

        entries = sorted(cache_dir.glob("*.json"))
        assert len(entries) == 76
        entries[0].write_text("{truncated", encoding="utf-8")

        second = asyncio.run(back_transcribe(hermetic_input_corpus, *load_mock_adapters(mock_dir), config))
        assert second.corpus == hermetic_expected_corpus
        assert second.metadata.cache_hits == 79

    @pytest.mark.slow
    def test_repeated_runs_are_stable(self, mock_dir, hermetic_input_corpus, hermetic_expected_corpus):
        """Test that back-to-back runs give the same corpus and never fail a sample."""
        config = RunConfig(retry_limit=0, max_parallel_requests=8)
        for _ in range(25):
            run = asyncio.run(back_transcribe(hermetic_input_corpus, *load_mock_adapters(mock_dir), config))
            assert run.corpus == hermetic_expected_corpus
            assert run.failed_ids == []
