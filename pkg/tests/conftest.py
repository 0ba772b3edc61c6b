"""
Shared fixtures: small hand-computed corpora and a hermetic mock adapter stack.
"""

import json
import logging
from pathlib import Path
from typing import Callable

import pytest

from bt_robustness.btpipe import RunConfig
from bt_robustness.corpus import Corpus, NluOutcome, Sample, save_corpus

# id, reference, hypothesis, expected, NLU(reference), NLU(hypothesis)
HERMETIC_ROWS: list[tuple[str, str, str, str, str, str]] = [
    ("s01", "play jazz", "play a jazz", "play_music", "play_music", "play_music"),
    ("s02", "play rock", "play a rock", "play_music", "play_music", "play_music"),
    ("s03", "play pop", "play a pop", "play_music", "play_music", "play_music"),
    ("s04", "play blues", "play a blues", "play_music", "play_music", "play_music"),
    ("s05", "play soul", "play a soul", "play_music", "play_music", "play_music"),
    ("s06", "play funk", "play a funk", "play_music", "play_music", "play_music"),
    ("s07", "play metal", "play a metal", "play_music", "play_music", "play_music"),
    ("s08", "play folk", "play a folk", "play_music", "play_music", "play_music"),
    ("s09", "email mary", "mail mary", "email_sendemail", "email_sendemail", "email_query"),
    ("s10", "email john", "mail john", "email_sendemail", "email_sendemail", "email_query"),
    ("s11", "set an alarm", "set an alarm", "alarm_set", "alarm_set", "alarm_set"),
    ("s12", "wake me up", "wake me up", "alarm_set", "alarm_set", "alarm_set"),
    ("s13", "what time is it", "what time is it", "datetime_query", "alarm_query", "alarm_query"),
    ("s14", "turn off the lights", "turn off the lights", "iot_hue_lightoff", "iot_hue_lightoff", "iot_hue_lightoff"),
    ("s15", "turn on the light", "turn on the lights", "iot_hue_lighton", "iot_hue_lightoff", "iot_hue_lighton"),
    ("s16", "tell me a joke", "tell me a jug", "general_joke", "general_quirky", "music_query"),
    ("s17", "set a timer", "set a timer please", "alarm_set", "alarm_set", "alarm_set"),
    ("s18", "stop the timer", "stop the timer please", "alarm_remove", "alarm_remove", "alarm_remove"),
    ("s19", "weather today", "weather to day", "weather_query", "weather_query", "weather_query"),
    ("s20", "news today", "news to day", "news_query", "news_query", "news_query"),
]


def intent_sample(
    sample_id: str,
    reference: str,
    hypothesis: str | None,
    expected: str,
    before: str | None = None,
    after: str | None = None,
) -> Sample:
    return Sample(
        id=sample_id,
        reference=reference,
        hypothesis=hypothesis,
        expected=NluOutcome.intent(expected),
        before=NluOutcome.intent(before) if before is not None else None,
        after=NluOutcome.intent(after) if after is not None else None,
    )


@pytest.fixture
def make_sample() -> Callable[..., Sample]:
    """Factory for intent samples from plain labels."""
    return intent_sample


@pytest.fixture
def metric_corpus() -> Corpus:
    """
    Four differing samples with e = A:
    s1 b=A a=A (Const), s2 b=A a=B (CtoI), s3 b=B a=C (ItoI), s4 b=B a=A (ItoC).
    """
    return Corpus(
        (
            intent_sample("s1", "book a flight", "book a fight", "a", "a", "a"),
            intent_sample("s2", "book a hotel", "book a motel", "a", "a", "b"),
            intent_sample("s3", "book a table", "book a cable", "a", "b", "c"),
            intent_sample("s4", "book a taxi", "book a taxis", "a", "b", "a"),
        )
    )


@pytest.fixture
def hermetic_expected_corpus() -> Corpus:
    """The 20-sample fixture as a back transcription over the mock tables must produce it."""
    return Corpus(tuple(intent_sample(*row) for row in HERMETIC_ROWS))


@pytest.fixture
def hermetic_input_corpus() -> Corpus:
    """The 20-sample fixture before back transcription: reference and expected only."""
    return Corpus(
        tuple(
            intent_sample(sample_id, reference, None, expected)
            for sample_id, reference, _, expected, _, _ in HERMETIC_ROWS
        )
    )


def write_mock_tables(directory: Path, rows=HERMETIC_ROWS) -> Path:
    """tts: reference -> audio key, asr: audio key -> hypothesis, nlu: text -> intent."""
    directory.mkdir(parents=True, exist_ok=True)
    tts = {reference: f"audio-{sample_id}" for sample_id, reference, *_ in rows}
    asr = {f"audio-{sample_id}": hypothesis for sample_id, _, hypothesis, *_ in rows}
    nlu: dict[str, dict] = {}
    for _, reference, hypothesis, _, before, after in rows:
        nlu[reference] = {"task": "intent", "label": before}
        nlu[hypothesis] = {"task": "intent", "label": after}
    (directory / "tts.json").write_text(json.dumps(tts, indent=2), encoding="utf-8")
    (directory / "asr.json").write_text(json.dumps(asr, indent=2), encoding="utf-8")
    (directory / "nlu.json").write_text(json.dumps({"intent": nlu}, indent=2), encoding="utf-8")
    return directory


@pytest.fixture
def mock_dir(tmp_path: Path) -> Path:
    """Directory with the mock adapter tables of the 20-sample fixture."""
    return write_mock_tables(tmp_path / "mock")


@pytest.fixture
def hermetic_corpus_file(tmp_path: Path, hermetic_input_corpus: Corpus) -> Path:
    path = tmp_path / "corpus.jsonl"
    save_corpus(hermetic_input_corpus, path)
    return path


@pytest.fixture
def corpus_file(tmp_path: Path) -> Callable[[Corpus, str], Path]:
    """Write a corpus to a JSONL file under tmp_path."""

    def write(corpus: Corpus, name: str = "corpus.jsonl") -> Path:
        path = tmp_path / name
        save_corpus(corpus, path)
        return path

    return write


@pytest.fixture
def fast_config() -> RunConfig:
    """No retries and no backoff, so failing samples fail immediately."""
    return RunConfig(retry_limit=0, retry_backoff_seconds=0.0)


@pytest.fixture
def restore_logging():
    """The CLI reconfigures the root logger; put the previous handlers back."""
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)
