"""
Blind TTS quality audit.

A seeded sample of the prompts whose back transcription differs from the input
is shown to an annotator as two unlabeled options (original prompt and ASR
output, in random order) next to the synthesized audio. The annotator picks
the option closer to the recording, or both. The position of the original
prompt is kept in a separate key file and used to score the filled sheet.
"""

import csv
import io
import math
import random
from dataclasses import dataclass, replace
from enum import StrEnum
from pathlib import Path
from typing import Iterable

from .corpus import DEFAULT_POLICY, NormalizationPolicy, Sample
from .errors import AuditError, MissingVerdictError
from .logging_config import get_logger

logger = get_logger("audit")

SHEET_COLUMNS = ("row", "sample_id", "audio", "option_1", "option_2", "verdict")
KEY_COLUMNS = ("row", "sample_id", "original_position")


class Verdict(StrEnum):
    OPTION_1 = "option_1"
    OPTION_2 = "option_2"
    BOTH = "both"

    @classmethod
    def parse(cls, text: str) -> "Verdict | None":
        value = text.strip().lower()
        if not value:
            return None
        aliases = {"1": cls.OPTION_1, "2": cls.OPTION_2}
        if value in aliases:
            return aliases[value]
        try:
            return cls(value)
        except ValueError:
            raise AuditError(
                f"Unknown verdict {text!r}; use 1, 2, option_1, option_2 or both",
                verdict=text,
            ) from None


@dataclass(frozen=True)
class AnnotationRow:
    sample_id: str
    option_1: str
    option_2: str
    original_position: int
    audio: str = ""
    verdict: Verdict | None = None


@dataclass(frozen=True)
class AnnotationSheet:
    rows: tuple[AnnotationRow, ...]
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.rows)


def make_annotation_sheet(
    corpus: Iterable[Sample],
    fraction: float,
    seed: int,
    normalization: NormalizationPolicy = DEFAULT_POLICY,
    audio_dir: str | Path | None = None,
) -> AnnotationSheet:
    """
    Sample ceil(fraction * |{s: h != r}|) prompts without replacement.

    Both the choice of samples and the order of the two options in every row
    come from ``random.Random(seed)``, so a fixed seed gives the same sheet.

    Raises:
        AuditError: If fraction lies outside [0, 1]
    """
    if not 0.0 <= fraction <= 1.0:
        raise AuditError(f"fraction must lie in [0, 1], got {fraction}", fraction=fraction)
    differing = [
        s for s in corpus if s.hypothesis is not None and s.differs(normalization)
    ]
    # rounding first keeps 0.1 * 30 from becoming 4 rows
    size = math.ceil(round(fraction * len(differing), 9))
    rng = random.Random(seed)
    chosen = rng.sample(differing, size)

    rows = []
    for sample in chosen:
        assert sample.hypothesis is not None
        original_position = rng.choice((1, 2))
        options = (
            (sample.reference, sample.hypothesis)
            if original_position == 1
            else (sample.hypothesis, sample.reference)
        )
        audio = str(Path(audio_dir) / f"{sample.id}.wav") if audio_dir is not None else ""
        rows.append(
            AnnotationRow(
                sample_id=sample.id,
                option_1=options[0],
                option_2=options[1],
                original_position=original_position,
                audio=audio,
            )
        )
    logger.info(f"Annotation sheet: {len(rows)} of {len(differing)} differing samples (seed {seed})")
    return AnnotationSheet(tuple(rows), seed)


def render_sheet(sheet: AnnotationSheet) -> str:
    """Annotator-facing CSV; the original position is not part of it."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SHEET_COLUMNS)
    for number, row in enumerate(sheet.rows, start=1):
        writer.writerow(
            (number, row.sample_id, row.audio, row.option_1, row.option_2, row.verdict or "")
        )
    return buffer.getvalue()


def render_key(sheet: AnnotationSheet) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(KEY_COLUMNS)
    for number, row in enumerate(sheet.rows, start=1):
        writer.writerow((number, row.sample_id, row.original_position))
    return buffer.getvalue()


def write_sheet(sheet: AnnotationSheet, sheet_path: str | Path, key_path: str | Path) -> None:
    for path, text in ((sheet_path, render_sheet(sheet)), (key_path, render_key(sheet))):
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")


def _read_rows(path: str | Path, columns: tuple[str, ...]) -> list[dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in columns if c not in (reader.fieldnames or [])]
        if missing:
            raise AuditError(f"{path} lacks column(s) {', '.join(missing)}", path=str(path))
        return list(reader)


def read_filled_sheet(sheet_path: str | Path, key_path: str | Path) -> AnnotationSheet:
    """
    Join a filled annotator sheet with its hidden key.

    Raises:
        AuditError: On unknown verdicts or rows that do not match the key
    """
    sheet_rows = _read_rows(sheet_path, SHEET_COLUMNS)
    key_rows = {r["row"]: r for r in _read_rows(key_path, KEY_COLUMNS)}
    if len(key_rows) != len(sheet_rows):
        raise AuditError(
            f"Sheet has {len(sheet_rows)} rows but the key has {len(key_rows)}"
        )
    rows = []
    for entry in sheet_rows:
        key = key_rows.get(entry["row"])
        if key is None or key["sample_id"] != entry["sample_id"]:
            raise AuditError(
                f"Row {entry['row']} ({entry['sample_id']}) does not match the key",
                row=entry["row"],
            )
        if key["original_position"] not in ("1", "2"):
            raise AuditError(f"Row {entry['row']}: original_position must be 1 or 2")
        rows.append(
            AnnotationRow(
                sample_id=entry["sample_id"],
                option_1=entry["option_1"],
                option_2=entry["option_2"],
                original_position=int(key["original_position"]),
                audio=entry["audio"],
                verdict=Verdict.parse(entry["verdict"]),
            )
        )
    return AnnotationSheet(tuple(rows))


def fill_verdicts(sheet: AnnotationSheet, verdicts: Iterable[Verdict | None]) -> AnnotationSheet:
    return replace(
        sheet,
        rows=tuple(replace(row, verdict=v) for row, v in zip(sheet.rows, verdicts, strict=True)),
    )


@dataclass(frozen=True)
class ResemblanceResult:
    total: int
    utt: int
    aug: int
    both: int

    @property
    def resemblance(self) -> float:
        """Share of readings at least as close to the original prompt: (utt + both) / total."""
        return (self.utt + self.both) / self.total

    @property
    def percentage(self) -> float:
        return 100.0 * self.resemblance


def compute_resemblance(sheet: AnnotationSheet) -> ResemblanceResult:
    """
    Tally a filled sheet back through the hidden option order.

    Raises:
        MissingVerdictError: Listing the rows without a verdict
        AuditError: For an empty sheet
    """
    missing = [n for n, row in enumerate(sheet.rows, start=1) if row.verdict is None]
    if missing:
        raise MissingVerdictError(
            f"{len(missing)} row(s) have no verdict: {', '.join(map(str, missing))}",
            rows=missing,
        )
    if not sheet.rows:
        raise AuditError("Resemblance is undefined for an empty sheet")
    utt = aug = both = 0
    for row in sheet.rows:
        if row.verdict is Verdict.BOTH:
            both += 1
        elif (row.verdict is Verdict.OPTION_1) == (row.original_position == 1):
            utt += 1
        else:
            aug += 1
    return ResemblanceResult(total=len(sheet.rows), utt=utt, aug=aug, both=both)
