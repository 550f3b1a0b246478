"""Accuracy/cost metrics, rho sweeps and trade-off reports."""

from __future__ import annotations

import html
import math
import os
import statistics
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .cascade import (
    Decider,
    DelegationPolicy,
    PolicyKind,
    StudentOutputs,
    check_policy,
    route,
    student_outputs,
    student_space,
)
from .errors import InvalidInputError


@dataclass(frozen=True)
class CostModel:
    student_cost: float
    teacher_cost: float
    unit: str = "FLOPs"

    def __post_init__(self):
        if self.student_cost < 0 or self.teacher_cost < 0:
            raise InvalidInputError("costs must be non-negative")


# ResNet-32 student and EfficientNet-L2 teacher, FLOPs per inference
PRESET_COST = CostModel(72e6, 478e9, "FLOPs")


def mlp_flops(widths):
    """Multiply-adds counted as 2 FLOPs, plus bias adds."""
    return float(sum(2 * a * b + b for a, b in zip(widths[:-1], widths[1:])))


def expected_cost(model, fraction_delegated):
    """Student always runs; delegated instances also pay for the teacher."""
    if not 0.0 <= fraction_delegated <= 1.0:
        raise InvalidInputError("fraction_delegated must lie in [0, 1]")
    return model.student_cost + fraction_delegated * model.teacher_cost


@dataclass(frozen=True)
class TradeoffPoint:
    rho: float
    fraction_student: float
    overall_acc: float
    in_domain_acc: float
    expected_cost: float


@dataclass(frozen=True, eq=False)
class InDomainMask:
    mask: np.ndarray
    tag: str

    @classmethod
    def by_class(cls, labels, l_in):
        l_in = tuple(sorted(l_in))
        return cls(np.isin(np.asarray(labels), l_in), "BY_CLASS(" + ",".join(map(str, l_in)) + ")")

    @classmethod
    def by_teacher_margin(cls, teacher_dist, threshold=0.4):
        return cls(nn.margin(np.atleast_2d(teacher_dist)) >= threshold, f"BY_TEACHER_MARGIN({threshold!r})")

    @classmethod
    def everything(cls, n):
        return cls(np.ones(n, dtype=bool), "ALL")

    def __len__(self):
        return self.mask.shape[0]


def _final_labels(decisions):
    return np.fromiter((d.final_label for d in decisions), dtype=np.int64, count=len(decisions))


def _student_mask(decisions):
    return np.fromiter((d.decider is Decider.STUDENT for d in decisions), dtype=bool, count=len(decisions))


def accuracy(decisions, labels):
    labels = np.asarray(labels)
    if len(decisions) == 0 or len(decisions) != labels.shape[0]:
        raise InvalidInputError("need equally many decisions and labels, at least one")
    return float(np.mean(_final_labels(decisions) == labels))


def fraction_student(decisions):
    return float(np.mean(_student_mask(decisions)))


def in_domain_accuracy(decisions, labels, mask):
    """(accuracy, student fraction) on masked instances; (nan, nan) if the mask is empty."""
    m = mask.mask if isinstance(mask, InDomainMask) else np.asarray(mask, dtype=bool)
    labels = np.asarray(labels)
    if m.shape[0] != labels.shape[0] or len(decisions) != labels.shape[0]:
        raise InvalidInputError("mask, decisions and labels must have equal length")
    if not m.any():
        warnings.warn("in-domain mask selects no instances", RuntimeWarning)
        return math.nan, math.nan
    correct = _final_labels(decisions) == labels
    return float(correct[m].mean()), float(_student_mask(decisions)[m].mean())


def _threads():
    try:
        return max(1, int(os.environ.get("CASCADE_DISTILL_THREADS", "1")))
    except ValueError:
        return 1


def cached_student_outputs(student, X, space, threads=None):
    """Student outputs for all of ``X``; chunks may run on a thread pool, merged in order."""
    threads = threads or _threads()
    X = np.asarray(X, dtype=np.float64)
    if threads == 1 or X.shape[0] < 2 * threads:
        return student_outputs(student, X, space)
    chunks = np.array_split(X, threads)
    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(lambda c: student_outputs(student, c, space), chunks))
    return StudentOutputs(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                            ("dist", "margin", "slot", "label", "abstained")))


def sweep(student, teacher, X, labels, mask, family, rho_grid, cost, index=None):
    """One TradeoffPoint per rho, reusing a single student pass.

    ``family`` is ``PolicyKind.MARGIN_BASED`` or ``PolicyKind.ABSTAIN_MARGIN``.
    The teacher is queried once, on the instances delegated at the largest
    rho (a superset of every other rho's delegated set).
    """
    rho_grid = [float(r) for r in rho_grid]
    if not rho_grid:
        raise InvalidInputError("rho grid is empty")
    if any(b < a for a, b in zip(rho_grid, rho_grid[1:])):
        raise InvalidInputError("rho grid must be sorted ascending")
    family = PolicyKind(family)
    if family not in (PolicyKind.MARGIN_BASED, PolicyKind.ABSTAIN_MARGIN):
        raise InvalidInputError("sweeps need a margin-threshold policy family")
    labels = np.asarray(labels, dtype=np.int64)
    X = np.asarray(X, dtype=np.float64)
    m = mask.mask if isinstance(mask, InDomainMask) else np.asarray(mask, dtype=bool)
    if not (X.shape[0] == labels.shape[0] == m.shape[0]) or X.shape[0] == 0:
        raise InvalidInputError("features, labels and mask must be non-empty and aligned")
    space = student_space(student, teacher.n_classes)
    check_policy(DelegationPolicy(family, rho=rho_grid[0]), space)
    outs = cached_student_outputs(student, X, space)

    top = route(DelegationPolicy(family, rho=rho_grid[-1]), outs)
    teacher_labels = np.full(X.shape[0], -1, dtype=np.int64)
    sent = np.flatnonzero(~top)
    if sent.size:
        idx = None if index is None else np.asarray(index, dtype=np.int64)[sent]
        teacher_labels[sent] = teacher.predict(X[sent], idx)

    points = []
    for rho in rho_grid:
        keep = route(DelegationPolicy(family, rho=rho), outs)
        final = np.where(keep, outs.label, teacher_labels)
        correct = final == labels
        frac = float(keep.mean())
        in_acc = float(correct[m].mean()) if m.any() else math.nan
        points.append(TradeoffPoint(rho, frac, float(correct.mean()), in_acc, expected_cost(cost, 1.0 - frac)))
    return points


def measure_latency(net, X, repetitions=30):
    """(median, p90) seconds per instance for per-instance forward passes over ``X``."""
    if repetitions < 3:
        raise InvalidInputError("need at least 3 repetitions")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise InvalidInputError("empty test set")
    rows = list(X)
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for x in rows:
            nn.forward(net, x)
        samples.append((time.perf_counter() - t0) / len(rows))
    samples.sort()
    p90 = samples[min(len(samples) - 1, math.ceil(0.9 * len(samples)) - 1)]
    return statistics.median(samples), p90


# reports

CSV_HEADER = "rho,fraction_student,overall_acc,in_domain_acc,expected_cost,unit"


def _f6(v):
    return "nan" if math.isnan(v) else f"{v:.6f}"


def tradeoff_csv(points, unit):
    rows = [CSV_HEADER]
    for p in points:
        rows.append(",".join([_f6(p.rho), _f6(p.fraction_student), _f6(p.overall_acc),
                              _f6(p.in_domain_acc), _f6(p.expected_cost), unit]))
    return "\n".join(rows) + "\n"


def _panel(series, x0, title, xlabel, w=360, h=260):
    xs = [x for x, _ in series]
    lo, hi = min(xs), max(xs)
    span = (hi - lo) or 1.0
    pad = 40

    def sx(x):
        return x0 + pad + (x - lo) / span * (w - 2 * pad)

    def sy(y):
        return pad + (1.0 - y) * (h - 2 * pad)

    pts = " ".join(f"{sx(x):.3f},{sy(y if not math.isnan(y) else 0.0):.3f}" for x, y in series)
    return "\n".join([
        f'<g class="panel">',
        f'<rect x="{x0 + pad}" y="{pad}" width="{w - 2 * pad}" height="{h - 2 * pad}" fill="none" stroke="#999"/>',
        f'<text x="{x0 + w / 2:.1f}" y="20" text-anchor="middle" font-size="13">{title}</text>',
        f'<text x="{x0 + w / 2:.1f}" y="{h - 8}" text-anchor="middle" font-size="11">{xlabel} [{lo:.6g}, {hi:.6g}]</text>',
        f'<text x="{x0 + 12}" y="{h / 2:.1f}" font-size="11" transform="rotate(-90 {x0 + 12} {h / 2:.1f})">accuracy</text>',
        f'<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{pts}"/>',
        "</g>",
    ])


def tradeoff_svg(points, unit):
    frac = [(p.fraction_student, p.overall_acc) for p in points]
    cost = [(p.expected_cost, p.overall_acc) for p in points]
    body = [
        '<svg xmlns="http://www.w3.org/2000/svg" width="720" height="260" viewBox="0 0 720 260">',
        '<rect width="720" height="260" fill="white"/>',
        _panel(frac, 0, "accuracy vs student fraction", "fraction decided by student"),
        _panel(cost, 360, "accuracy vs expected cost", f"expected cost ({html.escape(unit)})"),
        "</svg>",
    ]
    return "\n".join(body) + "\n"


def emit_report(points, path, unit="FLOPs"):
    """Write ``<path>.csv`` and ``<path>.svg``; returns both paths."""
    if not points:
        raise InvalidInputError("no trade-off points to report")
    base = Path(path)
    if base.suffix in (".csv", ".svg"):
        base = base.with_suffix("")
    # names like CD1_alpha0.6 contain dots; append rather than replace a suffix
    csv_path = base.parent / (base.name + ".csv")
    svg_path = base.parent / (base.name + ".svg")
    csv_path.write_text(tradeoff_csv(points, unit), encoding="ascii", newline="\n")
    svg_path.write_text(tradeoff_svg(points, unit), encoding="ascii", newline="\n")
    return csv_path, svg_path
