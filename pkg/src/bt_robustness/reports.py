"""Report rendering: CSV for machines, Markdown tables for people."""

import csv
import io
from typing import Iterable, Mapping, Sequence

from .audit import ResemblanceResult
from .errors import UndefinedMetricError
from .robustness import (
    METRIC_IDS,
    ChangeCategory,
    ComponentDelta,
    MetricResult,
    StandardMetrics,
)


def _csv(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def _markdown(header: Sequence[str], rows: Iterable[Sequence[object]], numeric_from: int) -> str:
    align = ["---" if i < numeric_from else "---:" for i in range(len(header))]
    lines = [
        "| " + " | ".join(header) + " |",
        "| " + " | ".join(align) + " |",
    ]
    lines.extend("| " + " | ".join(str(cell) for cell in row) + " |" for row in rows)
    return "\n".join(lines) + "\n"


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def metrics_csv(results: Mapping[str, MetricResult | UndefinedMetricError]) -> str:
    """metric_id, numerator, denominator, value; undefined metrics have an empty value."""
    rows = []
    for metric_id in METRIC_IDS:
        result = results.get(metric_id)
        if result is None:
            continue
        if isinstance(result, MetricResult):
            rows.append((metric_id, result.numerator, result.denominator, repr(result.value)))
        else:
            rows.append((metric_id, 0, 0, ""))
    return _csv(("metric_id", "numerator", "denominator", "value"), rows)


def metrics_markdown(
    results: Mapping[str, MetricResult | UndefinedMetricError],
    nlu_label: str,
    tts_label: str,
) -> str:
    ids = [m for m in METRIC_IDS if m in results]
    values = [
        _fmt(r.value) if isinstance(r, MetricResult) else "n/a"
        for r in (results[m] for m in ids)
    ]
    return _markdown(("NLU model", "TTS model", *ids), [(nlu_label, tts_label, *values)], 2)


def category_counts_markdown(
    counts: Mapping[ChangeCategory, int], nlu_label: str, tts_label: str
) -> str:
    categories = list(ChangeCategory)
    return _markdown(
        ("NLU model", "TTS model", *[c.value for c in categories]),
        [(nlu_label, tts_label, *[counts.get(c, 0) for c in categories])],
        2,
    )


def standard_metrics_markdown(metrics: StandardMetrics, nlu_label: str, tts_label: str) -> str:
    rows = [
        (
            nlu_label,
            tts_label,
            "accuracy",
            _fmt(metrics.accuracy_before),
            _fmt(metrics.accuracy_after),
            _fmt(metrics.accuracy_delta),
        )
    ]
    if metrics.micro_f1_before is not None:
        rows.append(
            (
                nlu_label,
                tts_label,
                "micro F1",
                _fmt(metrics.micro_f1_before),
                _fmt(metrics.micro_f1_after),
                _fmt(metrics.micro_f1_delta),
            )
        )
    return _markdown(
        ("NLU model", "TTS model", "Metric", "before BT", "after BT", "Δ"), rows, 3
    )


def _arrow(value: float | None) -> str:
    if value is None:
        return "n/a"
    if value > 0:
        return "↑"
    if value < 0:
        return "↓"
    return "="


def _signed(value: float | None, fmt: str) -> str:
    if value is None:
        return "n/a"
    return f"{_arrow(value)} {value:{fmt}}"


def component_delta_markdown(deltas: Mapping[str, ComponentDelta]) -> str:
    """Per-label direction of each F-measure component, with the signed change."""
    rows = [
        (
            label,
            _signed(d.tp, "+d"),
            _signed(d.fp, "+d"),
            _signed(d.fn, "+d"),
            _signed(d.precision, "+.4f"),
            _signed(d.recall, "+.4f"),
        )
        for label, d in deltas.items()
    ]
    return _markdown(("label", "TP", "FP", "FN", "P", "R"), rows, 1)


def resemblance_markdown(result: ResemblanceResult, tts_label: str) -> str:
    return _markdown(
        ("TTS", "total", "utt", "aug", "both", "resemblance"),
        [
            (
                tts_label,
                result.total,
                result.utt,
                result.aug,
                result.both,
                f"{result.percentage:.2f}%",
            )
        ],
        1,
    )


def ranking_csv(ranking: Sequence[tuple[str, float | int]]) -> str:
    return _csv(
        ("rank", "feature", "score"),
        ((rank, feature, score) for rank, (feature, score) in enumerate(ranking, start=1)),
    )


def frequency_csv(counts: Sequence[tuple[str, int]]) -> str:
    return _csv(("op", "count"), counts)
