"""
Robustness evaluation of NLU outcome changes caused by back transcription.

Each evaluable sample falls into exactly one change category:

    Const: b = a
    CtoI:  b = e, a != e
    ItoI:  b != e, a != e, b != a
    ItoC:  b != e, a = e

The six robustness metrics differ in their domain D (always a subset of the
samples with h != r) and in what counts as robust inside it.
"""

from collections import Counter
from dataclasses import dataclass
from enum import StrEnum
from typing import Callable, Iterable, Mapping, NamedTuple

from .corpus import (
    DEFAULT_POLICY,
    Corpus,
    NluOutcome,
    NormalizationPolicy,
    Sample,
    Task,
    outcome_equal,
)
from .errors import IncompleteSampleError, OutcomeKindError, UndefinedMetricError
from .logging_config import get_logger

logger = get_logger("robustness")


class ChangeCategory(StrEnum):
    C_TO_I = "CtoI"
    I_TO_I = "ItoI"
    I_TO_C = "ItoC"
    CONST = "Const"


class Treatment(StrEnum):
    NEGATIVE = "negative"
    IRRELEVANT = "irrelevant"
    POSITIVE = "positive"


@dataclass(frozen=True)
class RobustnessPolicy:
    """How I->I and I->C changes are judged; CtoI is always negative."""

    name: str
    i_to_i: Treatment
    i_to_c: Treatment

    def treatment(self, category: ChangeCategory) -> Treatment:
        if category is ChangeCategory.C_TO_I:
            return Treatment.NEGATIVE
        if category is ChangeCategory.I_TO_I:
            return self.i_to_i
        if category is ChangeCategory.I_TO_C:
            return self.i_to_c
        return Treatment.POSITIVE

    def is_negative(self, category: ChangeCategory) -> bool:
        return self.treatment(category) is Treatment.NEGATIVE


POLICIES: dict[str, RobustnessPolicy] = {
    policy.name: policy
    for policy in (
        RobustnessPolicy("R123", Treatment.NEGATIVE, Treatment.NEGATIVE),
        RobustnessPolicy("R13", Treatment.IRRELEVANT, Treatment.NEGATIVE),
        RobustnessPolicy("R12", Treatment.NEGATIVE, Treatment.IRRELEVANT),
        RobustnessPolicy("R1", Treatment.IRRELEVANT, Treatment.IRRELEVANT),
        RobustnessPolicy("R123+", Treatment.NEGATIVE, Treatment.POSITIVE),
        RobustnessPolicy("R13+", Treatment.IRRELEVANT, Treatment.POSITIVE),
    )
}

METRIC_IDS: tuple[str, ...] = tuple(POLICIES)


def get_policy(name: str) -> RobustnessPolicy:
    try:
        return POLICIES[name]
    except KeyError:
        raise UndefinedMetricError(
            f"Unknown robustness policy {name!r}; expected one of {', '.join(METRIC_IDS)}",
            metric_id=name,
        ) from None


class _Judgement(NamedTuple):
    b_is_e: bool
    a_is_e: bool
    b_is_a: bool


@dataclass(frozen=True)
class _MetricDefinition:
    in_domain: Callable[[_Judgement], bool]
    is_robust: Callable[[_Judgement], bool]


def _unchanged(j: _Judgement) -> bool:
    return j.b_is_a


def _unchanged_or_correct(j: _Judgement) -> bool:
    return j.b_is_a or j.a_is_e


def _everything(j: _Judgement) -> bool:
    return True


def _correct_before_or_after(j: _Judgement) -> bool:
    return j.b_is_e or j.a_is_e


def _not_incorrect_to_correct(j: _Judgement) -> bool:
    return not (not j.b_is_e and j.a_is_e)


def _correct_before(j: _Judgement) -> bool:
    return j.b_is_e


# Restricted to h != r; the domains are exactly as the metric table prints them.
_METRICS: dict[str, _MetricDefinition] = {
    "R123": _MetricDefinition(_everything, _unchanged),
    "R13": _MetricDefinition(_correct_before_or_after, _unchanged),
    "R12": _MetricDefinition(_not_incorrect_to_correct, _unchanged),
    "R1": _MetricDefinition(_correct_before, _unchanged),
    "R123+": _MetricDefinition(_everything, _unchanged_or_correct),
    "R13+": _MetricDefinition(_correct_before_or_after, _unchanged_or_correct),
}


@dataclass(frozen=True)
class MetricResult:
    metric_id: str
    numerator: int
    denominator: int

    @property
    def value(self) -> float:
        return self.numerator / self.denominator

    def to_json(self) -> dict:
        return {
            "metric_id": self.metric_id,
            "numerator": self.numerator,
            "denominator": self.denominator,
            "value": self.value,
        }


def _outcomes(sample: Sample) -> tuple[NluOutcome, NluOutcome, NluOutcome]:
    if sample.before is None or sample.after is None:
        raise IncompleteSampleError(
            f"Sample {sample.id} lacks the outcome before or after back transcription",
            sample_id=sample.id,
        )
    return sample.expected, sample.before, sample.after


def _judge(sample: Sample) -> _Judgement:
    e, b, a = _outcomes(sample)
    return _Judgement(outcome_equal(b, e), outcome_equal(a, e), outcome_equal(b, a))


def categorize(sample: Sample) -> ChangeCategory:
    """
    Change category of one sample.

    Raises:
        IncompleteSampleError: If the before or after outcome is missing
    """
    j = _judge(sample)
    if j.b_is_a:
        return ChangeCategory.CONST
    if j.b_is_e:
        return ChangeCategory.C_TO_I
    if j.a_is_e:
        return ChangeCategory.I_TO_C
    return ChangeCategory.I_TO_I


def category_counts(
    corpus: Iterable[Sample],
    differing_only: bool = False,
    normalization: NormalizationPolicy = DEFAULT_POLICY,
) -> dict[ChangeCategory, int]:
    """
    Number of samples per change category, every category present.

    Samples with h = r count as Const unless ``differing_only`` drops them.
    """
    counts: Counter[ChangeCategory] = Counter()
    for sample in corpus:
        if differing_only and not sample.differs(normalization):
            continue
        counts[categorize(sample)] += 1
    return {category: counts[category] for category in ChangeCategory}


def change_shares(counts: Mapping[ChangeCategory, int]) -> dict[ChangeCategory, float]:
    """
    Share of CtoI, ItoI and ItoC among the samples whose outcome changed.

    Raises:
        UndefinedMetricError: If no outcome changed
    """
    changed = [c for c in ChangeCategory if c is not ChangeCategory.CONST]
    total = sum(counts.get(c, 0) for c in changed)
    if total == 0:
        raise UndefinedMetricError("No outcome changed; change shares are undefined")
    return {c: counts.get(c, 0) / total for c in changed}


def robustness_metric(
    corpus: Iterable[Sample],
    metric_id: str,
    normalization: NormalizationPolicy = DEFAULT_POLICY,
) -> MetricResult:
    """
    Compute one of the six robustness metrics.

    Args:
        corpus: Evaluable samples
        metric_id: One of R123, R13, R12, R1, R123+, R13+
        normalization: Policy behind the h != r test

    Returns:
        MetricResult: Robust count over domain size

    Raises:
        UndefinedMetricError: For an unknown metric or an empty domain
        IncompleteSampleError: If a differing sample lacks an outcome
    """
    definition = _METRICS[get_policy(metric_id).name]

    numerator = denominator = 0
    for sample in corpus:
        if not sample.differs(normalization):
            continue
        j = _judge(sample)
        if not definition.in_domain(j):
            continue
        denominator += 1
        if definition.is_robust(j):
            numerator += 1

    if denominator == 0:
        raise UndefinedMetricError(
            f"{metric_id} is undefined: its domain is empty", metric_id=metric_id
        )
    return MetricResult(metric_id, numerator, denominator)


def all_metrics(
    corpus: Iterable[Sample],
    normalization: NormalizationPolicy = DEFAULT_POLICY,
) -> dict[str, MetricResult | UndefinedMetricError]:
    """All six metrics; an undefined metric is reported in place instead of aborting."""
    samples = list(corpus)
    results: dict[str, MetricResult | UndefinedMetricError] = {}
    for metric_id in METRIC_IDS:
        try:
            results[metric_id] = robustness_metric(samples, metric_id, normalization)
        except UndefinedMetricError as e:
            logger.warning(str(e))
            results[metric_id] = e
    return results


@dataclass(frozen=True)
class RobustnessComparison:
    """Metric differences between two runs over the same prompts (a minus b)."""

    differences: dict[str, float | None]
    mean_abs_difference: float
    max_abs_difference: float


def compare_robustness(
    corpus_a: Iterable[Sample],
    corpus_b: Iterable[Sample],
    normalization: NormalizationPolicy = DEFAULT_POLICY,
) -> RobustnessComparison:
    """
    Compare the six metrics of two runs, e.g. synthesized against recorded audio.

    Metrics undefined in either run have a None difference and are left out of
    the aggregates.

    Raises:
        UndefinedMetricError: If no metric is defined in both runs
    """
    metrics_a = all_metrics(corpus_a, normalization)
    metrics_b = all_metrics(corpus_b, normalization)
    differences: dict[str, float | None] = {}
    for metric_id in METRIC_IDS:
        a, b = metrics_a[metric_id], metrics_b[metric_id]
        if isinstance(a, MetricResult) and isinstance(b, MetricResult):
            differences[metric_id] = a.value - b.value
        else:
            differences[metric_id] = None
    defined = [abs(d) for d in differences.values() if d is not None]
    if not defined:
        raise UndefinedMetricError("No robustness metric is defined for both runs")
    return RobustnessComparison(
        differences=differences,
        mean_abs_difference=sum(defined) / len(defined),
        max_abs_difference=max(defined),
    )


@dataclass(frozen=True)
class StandardMetrics:
    """Conventional before/after scores: accuracy, plus micro-F1 for slots."""

    task: Task
    accuracy_before: float
    accuracy_after: float
    micro_f1_before: float | None = None
    micro_f1_after: float | None = None

    @property
    def accuracy_delta(self) -> float:
        return self.accuracy_after - self.accuracy_before

    @property
    def micro_f1_delta(self) -> float | None:
        if self.micro_f1_before is None or self.micro_f1_after is None:
            return None
        return self.micro_f1_after - self.micro_f1_before


def _micro_f1(pairs: list[tuple[NluOutcome, NluOutcome]]) -> float:
    tp = fp = fn = 0
    for expected, predicted in pairs:
        assert expected.slots is not None and predicted.slots is not None
        tp += len(expected.slots & predicted.slots)
        fp += len(predicted.slots - expected.slots)
        fn += len(expected.slots - predicted.slots)
    if 2 * tp + fp + fn == 0:
        raise UndefinedMetricError("Micro-F1 is undefined: no slot values in the corpus")
    return 2 * tp / (2 * tp + fp + fn)


def standard_metrics(corpus: Iterable[Sample], task: Task | str) -> StandardMetrics:
    """
    Accuracy (sample-level exact match) before and after back transcription;
    for the slots task also micro-F1 over pooled (name, value) pairs.

    Raises:
        OutcomeKindError: If a sample belongs to another task
        UndefinedMetricError: On an empty corpus or a slot corpus without slot values
    """
    task = Task(task)
    samples = list(corpus)
    if not samples:
        raise UndefinedMetricError("Standard metrics are undefined for an empty corpus")
    before_pairs: list[tuple[NluOutcome, NluOutcome]] = []
    after_pairs: list[tuple[NluOutcome, NluOutcome]] = []
    for sample in samples:
        if sample.task is not task:
            raise OutcomeKindError(
                f"Sample {sample.id} is a {sample.task} sample, not {task}",
                sample_id=sample.id,
            )
        e, b, a = _outcomes(sample)
        before_pairs.append((e, b))
        after_pairs.append((e, a))

    def accuracy(pairs: list[tuple[NluOutcome, NluOutcome]]) -> float:
        return sum(outcome_equal(p, e) for e, p in pairs) / len(pairs)

    if task is Task.SLOTS:
        return StandardMetrics(
            task,
            accuracy(before_pairs),
            accuracy(after_pairs),
            _micro_f1(before_pairs),
            _micro_f1(after_pairs),
        )
    return StandardMetrics(task, accuracy(before_pairs), accuracy(after_pairs))


@dataclass(frozen=True)
class ComponentDelta:
    """
    Signed change (after minus before) of the F-measure building blocks of one label.

    Precision/recall deltas are None when either side has a zero denominator.
    """

    label: str
    tp: int
    fp: int
    fn: int
    precision: float | None
    recall: float | None


def _label_counts(pairs: Iterable[tuple[str, str]]) -> tuple[Counter, Counter, Counter]:
    tp: Counter[str] = Counter()
    fp: Counter[str] = Counter()
    fn: Counter[str] = Counter()
    for expected, predicted in pairs:
        if predicted == expected:
            tp[expected] += 1
        else:
            fp[predicted] += 1
            fn[expected] += 1
    return tp, fp, fn


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def _delta(before: float | None, after: float | None) -> float | None:
    if before is None or after is None:
        return None
    return after - before


def fscore_component_delta(corpus: Iterable[Sample]) -> dict[str, ComponentDelta]:
    """
    Per-label change of TP, FP, FN, precision and recall between predictions
    before and after back transcription, for domain or intent samples.

    Raises:
        OutcomeKindError: For slot samples
    """
    before_pairs: list[tuple[str, str]] = []
    after_pairs: list[tuple[str, str]] = []
    for sample in corpus:
        if sample.task is Task.SLOTS:
            raise OutcomeKindError(
                f"Sample {sample.id}: component deltas need label outcomes, not slots",
                sample_id=sample.id,
            )
        e, b, a = _outcomes(sample)
        assert e.label is not None and b.label is not None and a.label is not None
        before_pairs.append((e.label, b.label))
        after_pairs.append((e.label, a.label))

    tp_b, fp_b, fn_b = _label_counts(before_pairs)
    tp_a, fp_a, fn_a = _label_counts(after_pairs)
    labels = sorted({label for pair in before_pairs + after_pairs for label in pair})

    deltas: dict[str, ComponentDelta] = {}
    for label in labels:
        precision_b = _ratio(tp_b[label], tp_b[label] + fp_b[label])
        precision_a = _ratio(tp_a[label], tp_a[label] + fp_a[label])
        recall_b = _ratio(tp_b[label], tp_b[label] + fn_b[label])
        recall_a = _ratio(tp_a[label], tp_a[label] + fn_a[label])
        deltas[label] = ComponentDelta(
            label=label,
            tp=tp_a[label] - tp_b[label],
            fp=fp_a[label] - fp_b[label],
            fn=fn_a[label] - fn_b[label],
            precision=_delta(precision_b, precision_a),
            recall=_delta(recall_b, recall_a),
        )
    return deltas


def evaluable_or_raise(corpus: Corpus) -> Corpus:
    """Return the corpus unchanged if every sample is evaluable."""
    missing = [s.id for s in corpus if not s.is_evaluable]
    if missing:
        raise IncompleteSampleError(
            f"{len(missing)} sample(s) are not back-transcribed, e.g. {missing[0]}",
            sample_ids=missing[:20],
        )
    return corpus
