"""Easy/hard partitions, per-variant pseudo-labels and the distillation loss.

Class indices are 0-based. Variants and their student output widths::

    BASELINE    L       teacher softmax
    CD1         L       teacher softmax in l_in, label-smoothed one-hot outside
    CD2         L'      teacher softmax restricted to l_in, uniform outside
    CD3         L'+1    restricted softmax + 0 in l_in, abstain one-hot outside
    MD_LS       L       teacher softmax if teacher margin > rho_tr, else smoothed one-hot
    MD_ABSTAIN  L+1     teacher softmax + 0 if easy, abstain one-hot if hard

``L' = len(l_in)``; restricted slot ``k`` is the k-th smallest class in l_in.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, InvalidInputError, ParseError

log = logging.getLogger(__name__)


class Variant(str, enum.Enum):
    BASELINE = "BASELINE"
    CD1 = "CD1"
    CD2 = "CD2"
    CD3 = "CD3"
    MD_LS = "MD_LS"
    MD_ABSTAIN = "MD_ABSTAIN"


CLASS_VARIANTS = (Variant.CD1, Variant.CD2, Variant.CD3)
MARGIN_VARIANTS = (Variant.MD_LS, Variant.MD_ABSTAIN)


@dataclass(frozen=True)
class DistillConfig:
    variant: Variant = Variant.BASELINE
    a: float = 0.0
    b: float = 1.0
    tau: float = 1.0
    alpha: float = 0.0
    rho_tr: float = 0.5
    l_in: tuple = ()
    # "prob": margin of the teacher softmax (rho_tr in [0, 1]);
    # "logit": gap between the top two teacher logits (any rho_tr >= 0)
    margin_space: str = "prob"

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "l_in", tuple(sorted(set(int(c) for c in self.l_in))))
        if self.a < 0 or self.b < 0 or not self.a + self.b > 0:
            raise ConfigError("need a >= 0, b >= 0 and a + b > 0")
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise ConfigError("tau must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.margin_space not in ("prob", "logit"):
            raise ConfigError("margin_space must be 'prob' or 'logit'")
        if self.margin_space == "prob" and not 0.0 <= self.rho_tr <= 1.0:
            raise ConfigError("rho_tr must lie in [0, 1] for probability margins")
        if self.variant in CLASS_VARIANTS and not self.l_in:
            raise ConfigError(f"{self.variant.value} needs a non-empty l_in")

    def output_width(self, n_classes):
        if self.variant is Variant.CD2:
            return len(self.l_in)
        if self.variant is Variant.CD3:
            return len(self.l_in) + 1
        if self.variant is Variant.MD_ABSTAIN:
            return n_classes + 1
        return n_classes

    def check_classes(self, n_classes):
        if any(c < 0 or c >= n_classes for c in self.l_in):
            raise ConfigError(f"l_in {self.l_in} not within [0, {n_classes})")

    def metadata(self):
        meta = {"variant": self.variant.value, "tau": repr(float(self.tau))}
        if self.variant in CLASS_VARIANTS:
            meta["l_in"] = ",".join(map(str, self.l_in))
        if self.variant in (Variant.CD1, Variant.MD_LS):
            meta["alpha"] = repr(float(self.alpha))
        if self.variant in MARGIN_VARIANTS:
            meta["rho_tr"] = repr(float(self.rho_tr))
        return meta


@dataclass(frozen=True, eq=False)
class TeacherScoreCache:
    """Frozen teacher logits, one row per training example."""

    logits: np.ndarray
    teacher: str = "teacher"
    tau: float = 1.0

    def __post_init__(self):
        z = np.array(self.logits, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] < 1:
            raise InvalidInputError("cache logits must be an (n, L) matrix")
        if not np.all(np.isfinite(z)):
            raise InvalidInputError("cache logits must be finite")
        if not self.teacher or any(c.isspace() for c in self.teacher):
            raise InvalidInputError("teacher tag must be non-empty without whitespace")
        z.flags.writeable = False
        object.__setattr__(self, "logits", z)

    def __len__(self):
        return self.logits.shape[0]

    @property
    def n_classes(self):
        return self.logits.shape[1]

    def __getitem__(self, i):
        return self.logits[i]


@dataclass(frozen=True)
class Partition:
    easy: np.ndarray
    hard: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def easy_mask(self, n):
        m = np.zeros(n, dtype=bool)
        m[self.easy] = True
        return m


def _split(mask):
    idx = np.arange(mask.shape[0], dtype=np.int64)
    return Partition(idx[mask], idx[~mask])


def partition_by_class(labels, l_in, n_classes=None):
    y = np.asarray(labels, dtype=np.int64)
    if n_classes is not None and y.size and (y.min() < 0 or y.max() >= n_classes):
        raise InvalidInputError("label out of range")
    if n_classes is not None and any(c < 0 or c >= n_classes for c in l_in):
        raise InvalidInputError("l_in contains a class outside [0, L)")
    return _split(np.isin(y, list(l_in)))


def teacher_margin(teacher_dist):
    return nn.margin(teacher_dist)


def _logit_gap(z):
    top2 = np.partition(np.asarray(z, dtype=np.float64), -2, axis=-1)[..., -2:]
    return top2[..., 1] - top2[..., 0]


def teacher_margins(cache, tau, space="prob"):
    if space == "logit":
        return _logit_gap(cache.logits)
    return nn.margin(nn.softmax(cache.logits, tau))


def partition_by_margin(cache, rho_tr, tau=1.0, space="prob"):
    """Easy iff the teacher margin is strictly greater than ``rho_tr``."""
    if space == "prob" and not 0.0 <= rho_tr <= 1.0:
        raise InvalidInputError("rho_tr must lie in [0, 1]")
    return _split(teacher_margins(cache, tau, space) > rho_tr)


def is_easy(entry, cfg):
    """Margin-partition membership of a single cached teacher row."""
    z = np.asarray(entry, dtype=np.float64)
    if cfg.margin_space == "logit":
        return bool(_logit_gap(z) > cfg.rho_tr)
    return bool(nn.margin(nn.softmax(z, cfg.tau)) > cfg.rho_tr)


# pseudo-labels

def _smoothed_onehot(y, n_classes, alpha):
    p = np.full(n_classes, alpha / n_classes)
    p[y] += 1.0 - alpha
    return p


def _restricted_softmax(entry, l_in, tau):
    return nn.softmax(np.asarray(entry, dtype=np.float64)[list(l_in)], tau)


def _check_label(y, n_classes):
    if not 0 <= y < n_classes:
        raise InvalidInputError(f"label {y} outside [0, {n_classes})")


def pseudo_label_baseline(entry, tau=1.0):
    return nn.softmax(entry, tau)


def pseudo_label_cd1(y, entry, alpha, l_in, tau=1.0):
    L = len(entry)
    _check_label(y, L)
    if y in l_in:
        return pseudo_label_baseline(entry, tau)
    return _smoothed_onehot(y, L, alpha)


def pseudo_label_cd2(y, entry, l_in, tau=1.0):
    _check_label(y, len(entry))
    l_in = sorted(l_in)
    if len(l_in) < 1:
        raise InvalidInputError("l_in must be non-empty")
    if y in l_in:
        if len(l_in) == 1:
            log.warning("CD2 with a single in-domain class: degenerate target (1.0)")
        return _restricted_softmax(entry, l_in, tau)
    return np.full(len(l_in), 1.0 / len(l_in))


def pseudo_label_cd3(y, entry, l_in, tau=1.0):
    _check_label(y, len(entry))
    l_in = sorted(l_in)
    out = np.zeros(len(l_in) + 1)
    if y in l_in:
        out[:-1] = _restricted_softmax(entry, l_in, tau)
    else:
        out[-1] = 1.0
    return out


def pseudo_label_md_ls(y, entry, easy, alpha, tau=1.0):
    L = len(entry)
    _check_label(y, L)
    if easy:
        return pseudo_label_baseline(entry, tau)
    return _smoothed_onehot(y, L, alpha)


def pseudo_label_md_abstain(y, entry, easy, tau=1.0):
    L = len(entry)
    _check_label(y, L)
    out = np.zeros(L + 1)
    if easy:
        out[:-1] = pseudo_label_baseline(entry, tau)
    else:
        out[-1] = 1.0
    return out


def pseudo_label(y, entry, cfg):
    """Dispatch to the builder for ``cfg.variant``."""
    v = cfg.variant
    if v is Variant.BASELINE:
        return pseudo_label_baseline(entry, cfg.tau)
    if v is Variant.CD1:
        return pseudo_label_cd1(y, entry, cfg.alpha, cfg.l_in, cfg.tau)
    if v is Variant.CD2:
        return pseudo_label_cd2(y, entry, cfg.l_in, cfg.tau)
    if v is Variant.CD3:
        return pseudo_label_cd3(y, entry, cfg.l_in, cfg.tau)
    if v is Variant.MD_LS:
        return pseudo_label_md_ls(y, entry, is_easy(entry, cfg), cfg.alpha, cfg.tau)
    return pseudo_label_md_abstain(y, entry, is_easy(entry, cfg), cfg.tau)


def label_target(y, entry, cfg):
    """True-label distribution mapped into the variant's output space.

    In-domain/easy labels become a one-hot on their slot; out-of-domain or hard
    labels go to the abstain slot where one exists. CD2 has no abstain slot, so
    its out-of-domain label target is the uniform distribution it is trained
    toward anyway.
    """
    L = len(entry)
    _check_label(y, L)
    v = cfg.variant
    if v in (Variant.BASELINE, Variant.CD1, Variant.MD_LS):
        return _smoothed_onehot(y, L, 0.0)
    if v in (Variant.CD2, Variant.CD3):
        width = cfg.output_width(L)
        out = np.zeros(width)
        if y in cfg.l_in:
            out[cfg.l_in.index(y)] = 1.0
        elif v is Variant.CD3:
            out[-1] = 1.0
        else:
            out[:] = 1.0 / width
        return out
    out = np.zeros(L + 1)
    out[y if is_easy(entry, cfg) else L] = 1.0
    return out


def distill_objective(y, entry, student_logits, cfg):
    """``a * H(label, p_student) + b * H(pseudo_label, p_student)`` for one example."""
    z = np.asarray(student_logits, dtype=np.float64)
    width = cfg.output_width(len(entry))
    if z.shape != (width,):
        raise InvalidInputError(f"{cfg.variant.value} expects {width} student logits, got {z.shape}")
    q = nn.softmax(z, cfg.tau)
    value = 0.0
    if cfg.a:
        value += cfg.a * nn.cross_entropy(label_target(y, entry, cfg), q)
    if cfg.b:
        value += cfg.b * nn.cross_entropy(pseudo_label(y, entry, cfg), q)
    return value


def build_targets(labels, cache, cfg):
    """Per-example training targets ``(a * label + b * pseudo) / (a + b)``.

    Training on these with learning rate scaled by ``a + b`` follows the same
    gradient as the weighted objective.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != len(cache):
        raise ConfigError(f"cache has {len(cache)} rows for {labels.shape[0]} examples")
    cfg.check_classes(cache.n_classes)
    width = cfg.output_width(cache.n_classes)
    T = np.empty((labels.shape[0], width))
    for i, y in enumerate(labels.tolist()):
        entry = cache.logits[i]
        if cfg.a == 0:
            T[i] = pseudo_label(y, entry, cfg)
        elif cfg.b == 0:
            T[i] = label_target(y, entry, cfg)
        else:
            s = cfg.a + cfg.b
            T[i] = (cfg.a / s) * label_target(y, entry, cfg) + (cfg.b / s) * pseudo_label(y, entry, cfg)
    return T


def distill_train(student, dataset, cache, cfg, spec, history=None):
    """Train ``student`` on the variant's targets; returns it with metadata attached."""
    width = cfg.output_width(cache.n_classes)
    if student.n_out != width:
        raise ConfigError(
            f"{cfg.variant.value} needs a student with {width} outputs, got {student.n_out}"
        )
    if student.n_in != dataset.dim:
        raise ConfigError(f"student input width {student.n_in} != feature dim {dataset.dim}")
    if dataset.n_classes != cache.n_classes:
        raise ConfigError("dataset and teacher cache disagree on the class count")
    if cfg.variant is Variant.CD2 and len(cfg.l_in) == 1:
        log.warning("CD2 with |l_in| = 1: margins undefined, use class/abstain delegation")
    T = build_targets(dataset.labels, cache, cfg)
    scaled = nn.TrainSpec(spec.lr * (cfg.a + cfg.b), spec.epochs, spec.batch_size, spec.shuffle_seed)
    trained = nn.train(student, dataset.features, T, scaled, cfg.tau, history=history)
    meta = dict(student.meta)
    meta.update(cfg.metadata())
    meta["classes"] = str(cache.n_classes)
    return trained.replace(meta=meta)


# score cache file

_SCORE_MAGIC = "scorev1"


def save_cache(cache, path):
    n, L = cache.logits.shape
    header = f"{_SCORE_MAGIC} n={n} L={L} tau={cache.tau!r} teacher={cache.teacher}\n"
    Path(path).write_bytes(header.encode("ascii") + cache.logits.astype("<f8").tobytes())


def load_cache(path):
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ParseError("missing score-cache header", line=1)
    tokens = data[:nl].decode("ascii", errors="replace").split()
    if not tokens or tokens[0] != _SCORE_MAGIC:
        raise ParseError(f"expected '{_SCORE_MAGIC}' header", line=1)
    fields = dict(t.partition("=")[::2] for t in tokens[1:])
    try:
        n, L = int(fields["n"]), int(fields["L"])
        tau = float(fields["tau"])
        tag = fields["teacher"]
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad score-cache header: {exc}", line=1) from None
    blob = data[nl + 1:]
    if len(blob) != n * L * 8:
        raise ParseError(f"body has {len(blob)} bytes, expected {n * L * 8}", offset=nl + 1 + len(blob))
    logits = np.frombuffer(blob, dtype="<f8").reshape(n, L).astype(np.float64)
    return TeacherScoreCache(logits, tag, tau)
