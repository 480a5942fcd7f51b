"""Confusion matrices, one-vs-rest counts and accuracy/precision/sensitivity/F1."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np

from .constants import CLASS_NAMES
from .errors import IntegrityError, LabelError, ParameterError


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""
    counts: np.ndarray
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.class_names)
        if self.counts.shape != (k, k):
            raise ParameterError(f"confusion matrix must be {k}x{k}, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ParameterError("confusion matrix counts must be non-negative")

    @property
    def k(self) -> int:
        return len(self.class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def trace(self) -> int:
        return int(np.trace(self.counts))


def confusion_matrix(truths: Sequence[int], preds: Sequence[int], k: int = len(CLASS_NAMES),
                     class_names: Sequence[str] | None = None) -> ConfusionMatrix:
    t = np.asarray(truths, dtype=np.int64).ravel()
    p = np.asarray(preds, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise LabelError(f"{t.size} truths but {p.size} predictions")
    for name, v in (("truth", t), ("prediction", p)):
        bad = np.flatnonzero((v < 0) | (v >= k))
        if bad.size:
            raise LabelError(f"{name} label {v[bad[0]]} at index {bad[0]} outside [0, {k})")
    counts = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    names = tuple(class_names) if class_names is not None else (
        CLASS_NAMES if k == len(CLASS_NAMES) else tuple(str(i) for i in range(k)))
    return ConfusionMatrix(counts, names)


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, False) if den > 0 else (0.0, True)


@dataclass
class ClassMetrics:
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: float
    precision: float
    sensitivity: float
    f1: float
    degenerate: list[str] = field(default_factory=list)

    @classmethod
    def from_counts(cls, tp: int, tn: int, fp: int, fn: int) -> "ClassMetrics":
        degenerate = []
        values = {}
        for name, num, den in (("accuracy", tp + tn, tp + tn + fp + fn),
                               ("precision", tp, tp + fp),
                               ("sensitivity", tp, tp + fn),
                               ("f1", 2 * tp, 2 * tp + fp + fn)):
            values[name], flag = _ratio(num, den)
            if flag:
                degenerate.append(name)
        return cls(tp, tn, fp, fn, degenerate=degenerate, **values)


def class_metrics(cm: ConfusionMatrix, class_index: int) -> ClassMetrics:
    if not 0 <= class_index < cm.k:
        raise ParameterError(f"class index {class_index} outside [0, {cm.k})")
    c = cm.counts
    tp = int(c[class_index, class_index])
    fn = int(c[class_index].sum()) - tp
    fp = int(c[:, class_index].sum()) - tp
    tn = cm.total - tp - fn - fp
    return ClassMetrics.from_counts(tp, tn, fp, fn)


@dataclass
class MetricsReport:
    class_names: tuple[str, ...]
    per_class: list[ClassMetrics]
    micro: ClassMetrics
    macro: dict[str, float]
    overall_accuracy: float
    total: int

    def to_dict(self) -> dict:
        return {
            "classes": list(self.class_names),
            "per_class": {n: asdict(m) for n, m in zip(self.class_names, self.per_class)},
            "micro": asdict(self.micro),
            "macro": self.macro,
            "overall_accuracy": self.overall_accuracy,
            "total": self.total,
        }


def aggregate_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class, micro-pooled and macro-averaged metrics for a confusion matrix."""
    if cm.total == 0:
        raise ParameterError("cannot aggregate metrics over an empty confusion matrix")
    per = [class_metrics(cm, i) for i in range(cm.k)]
    tp = sum(m.tp for m in per)
    fp = sum(m.fp for m in per)
    fn = sum(m.fn for m in per)
    tn = sum(m.tn for m in per)
    micro = ClassMetrics.from_counts(tp, tn, fp, fn)
    macro = {name: float(np.mean([getattr(m, name) for m in per]))
             for name in ("accuracy", "precision", "sensitivity", "f1")}
    return MetricsReport(cm.class_names, per, micro, macro, cm.trace / cm.total, cm.total)


METRIC_NAMES = ("accuracy", "precision", "sensitivity", "f1")


@dataclass
class Comparison:
    metric: str
    computed: float
    reference: float
    tolerance: float

    @property
    def delta(self) -> float:
        return self.computed - self.reference

    @property
    def passed(self) -> bool:
        return abs(self.delta) <= self.tolerance + 1e-12


def compare(report: MetricsReport, reference: dict[str, float], tolerance: float = 0.005) -> list[Comparison]:
    """Compare overall accuracy and micro precision/sensitivity/F1 against ``reference``."""
    computed = {"accuracy": report.overall_accuracy, "precision": report.micro.precision,
                "sensitivity": report.micro.sensitivity, "f1": report.micro.f1}
    return [Comparison(m, computed[m], float(reference[m]), tolerance) for m in METRIC_NAMES if m in reference]


@dataclass
class RenderedReport:
    text: str
    data: dict
    comparisons: list[Comparison]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.comparisons)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2)


def report(cm: ConfusionMatrix, reference: dict[str, float] | None = None, tolerance: float = 0.005,
           title: str = "") -> RenderedReport:
    rep = aggregate_metrics(cm)
    names = rep.class_names
    w = max(8, *(len(n) for n in names))
    lines = [title] if title else []
    lines.append("confusion matrix (rows = true, cols = predicted)")
    lines.append(" " * w + "".join(f"{n:>{w + 1}}" for n in names))
    for n, row in zip(names, cm.counts):
        lines.append(f"{n:<{w}}" + "".join(f"{v:>{w + 1}d}" for v in row))
    lines.append("")
    hdr = f"{'class':<{w}} {'TP':>7} {'TN':>7} {'FP':>7} {'FN':>7} {'acc':>7} {'prec':>7} {'sens':>7} {'f1':>7}"
    lines.append(hdr)
    for n, m in zip(names, rep.per_class):
        lines.append(f"{n:<{w}} {m.tp:>7} {m.tn:>7} {m.fp:>7} {m.fn:>7} {m.accuracy:>7.4f} "
                     f"{m.precision:>7.4f} {m.sensitivity:>7.4f} {m.f1:>7.4f}")
    mi = rep.micro
    lines.append(f"{'micro':<{w}} {mi.tp:>7} {mi.tn:>7} {mi.fp:>7} {mi.fn:>7} {mi.accuracy:>7.4f} "
                 f"{mi.precision:>7.4f} {mi.sensitivity:>7.4f} {mi.f1:>7.4f}")
    ma = rep.macro
    lines.append(f"{'macro':<{w}} {'':>31} {ma['accuracy']:>7.4f} {ma['precision']:>7.4f} "
                 f"{ma['sensitivity']:>7.4f} {ma['f1']:>7.4f}")
    lines.append(f"overall accuracy: {rep.overall_accuracy:.5f} ({cm.trace}/{cm.total})")
    data = rep.to_dict()
    data["confusion_matrix"] = cm.counts.tolist()
    comparisons = []
    if reference:
        comparisons = compare(rep, reference, tolerance)
        lines.append("")
        lines.append(f"comparison against reference (tolerance {tolerance})")
        for c in comparisons:
            lines.append(f"  {'PASS' if c.passed else 'FAIL'} {c.metric:<12} computed={c.computed:.5f} "
                         f"reference={c.reference:.4f} delta={c.delta:+.5f}")
        data["comparison"] = [dict(asdict(c), delta=c.delta, passed=c.passed) for c in comparisons]
    return RenderedReport("\n".join(lines), data, comparisons)


# -- embedded published matrices ------------------------------------------------------------

def load_published_fixture() -> dict:
    """The published confusion matrices and reference metrics, validated."""
    text = resources.files("octnet.fixtures").joinpath("published_confusion.json").read_text()
    try:
        doc = json.loads(text)
    except ValueError as e:
        raise IntegrityError(f"published fixture is not valid JSON: {e}") from e
    validate_published_fixture(doc)
    return doc


def validate_published_fixture(doc: dict):
    try:
        matrices = doc["matrices"]
        sums = doc["expected_row_sums"]
        refs = doc["reference_metrics"]
    except (KeyError, TypeError) as e:
        raise IntegrityError(f"published fixture missing section {e}") from None
    if len(matrices) != 8:
        raise IntegrityError(f"expected 8 confusion matrices, found {len(matrices)}")
    for m in matrices:
        rows = np.asarray(m.get("rows"))
        where = f"{m.get('model')}/{m.get('phase')}"
        if rows.shape != (4, 4) or rows.dtype.kind not in "iu" or (rows < 0).any():
            raise IntegrityError(f"{where}: rows must be a 4x4 non-negative integer matrix")
        if tuple(m.get("class_order", ())) != CLASS_NAMES:
            raise IntegrityError(f"{where}: unexpected class order {m.get('class_order')}")
        if rows.sum(axis=1).tolist() != sums[m["phase"]]:
            raise IntegrityError(f"{where}: row sums {rows.sum(axis=1).tolist()} != {sums[m['phase']]}")
        if m["phase"] not in refs.get(m["model"], {}):
            raise IntegrityError(f"{where}: no reference metrics")


@dataclass
class ReproductionLine:
    model: str
    phase: str
    status: str        # PASS, FAIL or NOTE
    computed: float
    reference: float
    report: MetricsReport
    tolerance: float = 0.005

    def render(self) -> str:
        r = self.report
        tail = (f"micro p/s/f1={r.micro.precision:.4f}/{r.micro.sensitivity:.4f}/{r.micro.f1:.4f} "
                f"macro p/s/f1={r.macro['precision']:.4f}/{r.macro['sensitivity']:.4f}/{r.macro['f1']:.4f}")
        msg = f"{self.status:<4} {self.model:<12} {self.phase:<8} accuracy computed={self.computed:.5f} " \
              f"reference={self.reference:.4f} delta={self.computed - self.reference:+.5f} | {tail}"
        if self.status == "NOTE":
            agree = abs(self.computed - self.reference) <= self.tolerance + 1e-12
            msg += (f" (training row, not gated: {'within' if agree else 'outside'} tolerance; the published "
                    "training accuracy is an epoch curve value, not trace/total of the matrix)")
        return msg


def reproduce_table3(tolerance: float = 0.005, fixture: dict | None = None) -> list[ReproductionLine]:
    """Recompute every published metric row from the published confusion matrices.

    Testing accuracies are gated at ``tolerance`` (PASS/FAIL); training rows
    are always NOTE lines, never failures.
    """
    doc = fixture if fixture is not None else load_published_fixture()
    if fixture is not None:
        validate_published_fixture(doc)
    out = []
    for phase in ("testing", "training"):
        for m in doc["matrices"]:
            if m["phase"] != phase:
                continue
            rep = aggregate_metrics(ConfusionMatrix(np.asarray(m["rows"]), tuple(m["class_order"])))
            ref = float(doc["reference_metrics"][m["model"]][phase]["accuracy"])
            ok = abs(rep.overall_accuracy - ref) <= tolerance + 1e-12
            status = "NOTE" if phase == "training" else ("PASS" if ok else "FAIL")
            out.append(ReproductionLine(m["model"], phase, status, rep.overall_accuracy, ref, rep, tolerance))
    return out
