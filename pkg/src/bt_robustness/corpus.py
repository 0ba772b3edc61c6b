"""
Corpus data model: samples, NLU outcomes, text normalization and ingestion.

A sample carries the reference text r(s), the back-transcribed hypothesis h(s),
the expected outcome e(s) and the NLU outcomes before (b(s)) and after (a(s))
back transcription. Corpora are immutable once loaded.
"""

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .errors import (
    CorpusError,
    DuplicateSampleError,
    IncompleteSampleError,
    MassiveFormatError,
    OutcomeKindError,
    SchemaError,
)
from .logging_config import get_logger

logger = get_logger("corpus")


class Task(StrEnum):
    DOMAIN = "domain"
    INTENT = "intent"
    SLOTS = "slots"


@dataclass(frozen=True)
class NormalizationPolicy:
    """Textual normalization applied before texts are stored or compared."""

    lowercase: bool = True
    collapse_whitespace: bool = True
    strip_outer_whitespace: bool = True
    strip_terminal_punctuation: bool = False


DEFAULT_POLICY = NormalizationPolicy()

_WHITESPACE = re.compile(r"\s+")
_TERMINAL_PUNCTUATION = re.compile(r"[\s.,!?;:]+$")


def normalize_text(text: str, policy: NormalizationPolicy = DEFAULT_POLICY) -> str:
    """
    Normalize a text according to the policy. Idempotent.

    Args:
        text: Raw text
        policy: Which normalization steps to apply

    Returns:
        str: Normalized text
    """
    if policy.lowercase:
        text = text.lower()
    if policy.collapse_whitespace:
        text = _WHITESPACE.sub(" ", text)
    if policy.strip_outer_whitespace:
        text = text.strip()
    if policy.strip_terminal_punctuation:
        # also eats trailing whitespace, so the result is a fixed point
        text = _TERMINAL_PUNCTUATION.sub("", text)
    return text


@dataclass(frozen=True)
class NluOutcome:
    """
    Semantic result of NLU: a domain label, an intent label or a set of
    (slot name, slot value) pairs.
    """

    task: Task
    label: str | None = None
    slots: frozenset[tuple[str, str]] | None = None

    def __post_init__(self):
        if self.task is Task.SLOTS:
            if self.slots is None or self.label is not None:
                raise SchemaError("Slot outcomes carry a slot set and no label")
        elif self.label is None or self.slots is not None:
            raise SchemaError(f"{self.task} outcomes carry a label and no slot set")

    @classmethod
    def domain(cls, label: str) -> "NluOutcome":
        return cls(Task.DOMAIN, label=label)

    @classmethod
    def intent(cls, label: str) -> "NluOutcome":
        return cls(Task.INTENT, label=label)

    @classmethod
    def slot_set(cls, pairs: Iterable[tuple[str, str]]) -> "NluOutcome":
        return cls(Task.SLOTS, slots=frozenset((name, value) for name, value in pairs))

    def normalized(self, policy: NormalizationPolicy = DEFAULT_POLICY) -> "NluOutcome":
        if self.task is Task.SLOTS:
            assert self.slots is not None
            return NluOutcome.slot_set(
                (normalize_text(name, policy), normalize_text(value, policy))
                for name, value in self.slots
            )
        assert self.label is not None
        return NluOutcome(self.task, label=normalize_text(self.label, policy))

    def to_json(self) -> dict[str, Any]:
        if self.task is Task.SLOTS:
            assert self.slots is not None
            return {
                "task": self.task.value,
                "slots": [{"name": n, "value": v} for n, v in sorted(self.slots)],
            }
        return {"task": self.task.value, "label": self.label}

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "NluOutcome":
        try:
            record = OutcomeRecord.model_validate(data)
        except ValidationError as e:
            raise SchemaError(f"Invalid outcome: {e.errors()[0]['msg']}") from e
        return record.to_outcome()


def outcome_equal(o1: NluOutcome, o2: NluOutcome) -> bool:
    """
    Sample-level exact match of two outcomes of the same task.

    Labels compare as strings, slot outcomes compare as whole sets.

    Raises:
        OutcomeKindError: If the outcomes belong to different tasks
    """
    if o1.task is not o2.task:
        raise OutcomeKindError(
            f"Cannot compare {o1.task} outcome with {o2.task} outcome",
            left=o1.task.value,
            right=o2.task.value,
        )
    if o1.task is Task.SLOTS:
        return o1.slots == o2.slots
    return o1.label == o2.label


class SlotRecord(BaseModel):
    name: str
    value: str


class OutcomeRecord(BaseModel):
    task: Task
    label: str | None = None
    slots: list[SlotRecord] | None = None

    @model_validator(mode="after")
    def _check_shape(self) -> "OutcomeRecord":
        if self.task is Task.SLOTS and self.slots is None:
            raise ValueError("slots outcome requires 'slots'")
        if self.task is not Task.SLOTS and self.label is None:
            raise ValueError(f"{self.task.value} outcome requires 'label'")
        return self

    def to_outcome(self) -> NluOutcome:
        if self.task is Task.SLOTS:
            assert self.slots is not None
            return NluOutcome.slot_set((s.name, s.value) for s in self.slots)
        assert self.label is not None
        return NluOutcome(self.task, label=self.label)


class SampleRecord(BaseModel):
    """One line of the native corpus JSONL; unknown fields are kept."""

    model_config = ConfigDict(extra="allow")

    id: str
    reference: str
    hypothesis: str | None = None
    expected: OutcomeRecord
    before: OutcomeRecord | None = None
    after: OutcomeRecord | None = None


@dataclass(frozen=True)
class Sample:
    id: str
    reference: str
    expected: NluOutcome
    hypothesis: str | None = None
    before: NluOutcome | None = None
    after: NluOutcome | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.after is not None and self.hypothesis is None:
            raise CorpusError(
                f"Sample {self.id} has an outcome after back transcription but no hypothesis",
                sample_id=self.id,
            )
        for name in ("before", "after"):
            outcome = getattr(self, name)
            if outcome is not None and outcome.task is not self.expected.task:
                raise OutcomeKindError(
                    f"Sample {self.id}: '{name}' is a {outcome.task} outcome "
                    f"but 'expected' is {self.expected.task}",
                    sample_id=self.id,
                )

    @property
    def task(self) -> Task:
        return self.expected.task

    @property
    def is_evaluable(self) -> bool:
        return self.hypothesis is not None and self.before is not None and self.after is not None

    def differs(self, policy: NormalizationPolicy = DEFAULT_POLICY) -> bool:
        """The h(s) != r(s) test under the given normalization."""
        if self.hypothesis is None:
            raise IncompleteSampleError(
                f"Sample {self.id} has no hypothesis", sample_id=self.id
            )
        return normalize_text(self.hypothesis, policy) != normalize_text(self.reference, policy)

    def to_json(self) -> dict[str, Any]:
        record: dict[str, Any] = {
            "id": self.id,
            "reference": self.reference,
            "hypothesis": self.hypothesis,
            "expected": self.expected.to_json(),
            "before": self.before.to_json() if self.before else None,
            "after": self.after.to_json() if self.after else None,
        }
        for key, value in self.extra.items():
            record.setdefault(key, value)
        return record


@dataclass(frozen=True)
class Corpus:
    """Ordered, id-unique collection of samples."""

    samples: tuple[Sample, ...] = ()
    _index: dict[str, Sample] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index: dict[str, Sample] = {}
        for sample in self.samples:
            if sample.id in index:
                raise DuplicateSampleError(sample.id)
            index[sample.id] = sample
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, sample_id: str) -> Sample:
        return self._index[sample_id]

    def __contains__(self, sample_id: object) -> bool:
        return sample_id in self._index

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def evaluable(self) -> "Corpus":
        """Samples that have a hypothesis and both NLU outcomes."""
        return Corpus(tuple(s for s in self.samples if s.is_evaluable))

    def differing(self, policy: NormalizationPolicy = DEFAULT_POLICY) -> "Corpus":
        """Samples whose hypothesis differs from the reference."""
        return Corpus(
            tuple(s for s in self.samples if s.hypothesis is not None and s.differs(policy))
        )


def _normalize_sample_record(
    record: SampleRecord, policy: NormalizationPolicy, line: int
) -> Sample:
    reference = normalize_text(record.reference, policy)
    if not reference:
        raise SchemaError(
            f"line {line}: sample {record.id} has an empty reference", line=line
        )

    def outcome(rec: OutcomeRecord | None) -> NluOutcome | None:
        return rec.to_outcome().normalized(policy) if rec is not None else None

    expected = outcome(record.expected)
    assert expected is not None
    try:
        return Sample(
            id=record.id,
            reference=reference,
            hypothesis=(
                normalize_text(record.hypothesis, policy)
                if record.hypothesis is not None
                else None
            ),
            expected=expected,
            before=outcome(record.before),
            after=outcome(record.after),
            extra=dict(record.model_extra or {}),
        )
    except CorpusError as e:
        e.details["line"] = line
        raise


def load_corpus(path: str | Path, policy: NormalizationPolicy = DEFAULT_POLICY) -> Corpus:
    """
    Load a native JSONL corpus, validating and normalizing every record.

    Args:
        path: JSONL file, one sample object per line
        policy: Normalization applied to all texts and labels

    Returns:
        Corpus: All samples in file order

    Raises:
        SchemaError: On malformed JSON or records violating the sample schema
        DuplicateSampleError: If two records share an id
    """
    samples: list[Sample] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"line {line_no}: malformed JSON ({e.msg})", line=line_no) from e
            try:
                record = SampleRecord.model_validate(data)
            except ValidationError as e:
                first = e.errors()[0]
                location = ".".join(str(part) for part in first["loc"])
                raise SchemaError(
                    f"line {line_no}: {location}: {first['msg']}", line=line_no
                ) from e
            if record.id in seen:
                raise DuplicateSampleError(record.id, line=line_no)
            seen.add(record.id)
            samples.append(_normalize_sample_record(record, policy, line_no))

    logger.info(f"Loaded {len(samples)} samples from {path}")
    return Corpus(tuple(samples))


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write a corpus as native JSONL."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for sample in corpus:
            f.write(json.dumps(sample.to_json(), ensure_ascii=False) + "\n")
    logger.info(f"Wrote {len(corpus)} samples to {out}")


def parse_slot_markup(annot_utt: str) -> set[tuple[str, str]]:
    """
    Extract (slot name, slot value) pairs from MASSIVE bracket markup,
    e.g. "wake me up at [time : nine am]".

    Raises:
        MassiveFormatError: On unbalanced brackets or a bracket without a slot name
    """
    pairs: set[tuple[str, str]] = set()
    start: int | None = None
    for pos, char in enumerate(annot_utt):
        if char == "[":
            if start is not None:
                raise MassiveFormatError(
                    f"Nested '[' at position {pos} in: {annot_utt}", position=pos
                )
            start = pos
        elif char == "]":
            if start is None:
                raise MassiveFormatError(
                    f"Unmatched ']' at position {pos} in: {annot_utt}", position=pos
                )
            body = annot_utt[start + 1 : pos]
            name, sep, value = body.partition(":")
            if not sep or not name.strip():
                raise MassiveFormatError(
                    f"Slot markup without 'name : value' at position {start} in: {annot_utt}",
                    position=start,
                )
            pairs.add((name.strip(), value.strip()))
            start = None
    if start is not None:
        raise MassiveFormatError(
            f"Unclosed '[' at position {start} in: {annot_utt}", position=start
        )
    return pairs


_MASSIVE_FIELDS = ("id", "utt", "annot_utt", "scenario", "intent", "partition")


def _iter_massive(path: str | Path) -> Iterator[tuple[int, dict[str, Any]]]:
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise MassiveFormatError(
                    f"line {line_no}: malformed JSON ({e.msg})", line=line_no
                ) from e
            missing = [name for name in _MASSIVE_FIELDS if name not in record]
            if missing:
                raise MassiveFormatError(
                    f"line {line_no}: missing field(s) {', '.join(missing)}",
                    line=line_no,
                    missing=missing,
                )
            yield line_no, record


def massive_partition_sizes(path: str | Path) -> dict[str, int]:
    """Count MASSIVE records per partition."""
    return dict(Counter(record["partition"] for _, record in _iter_massive(path)))


def import_massive(
    path: str | Path,
    task: Task | str,
    partition: str | None = None,
    policy: NormalizationPolicy = DEFAULT_POLICY,
) -> Corpus:
    """
    Import a MASSIVE-format JSONL file as a corpus for one NLU task.

    Args:
        path: MASSIVE locale file (e.g. en-US.jsonl)
        task: domain (scenario), intent, or slots (bracket markup in annot_utt)
        partition: Keep only this partition (train/dev/test); all when None
        policy: Normalization applied to texts and labels

    Returns:
        Corpus: Samples with reference and expected outcome set
    """
    task = Task(task)
    samples: list[Sample] = []
    for line_no, record in _iter_massive(path):
        if partition is not None and record["partition"] != partition:
            continue
        try:
            if task is Task.DOMAIN:
                expected = NluOutcome.domain(record["scenario"])
            elif task is Task.INTENT:
                expected = NluOutcome.intent(record["intent"])
            else:
                expected = NluOutcome.slot_set(parse_slot_markup(record["annot_utt"]))
        except MassiveFormatError as e:
            e.details["line"] = line_no
            raise
        reference = normalize_text(record["utt"], policy)
        if not reference:
            raise MassiveFormatError(f"line {line_no}: empty utterance", line=line_no)
        samples.append(
            Sample(
                id=str(record["id"]),
                reference=reference,
                expected=expected.normalized(policy),
                extra={"partition": record["partition"]},
            )
        )

    logger.info(
        f"Imported {len(samples)} MASSIVE samples for task {task.value}"
        + (f" (partition {partition})" if partition else "")
    )
    return Corpus(tuple(samples))
