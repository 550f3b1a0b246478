"""Two-stage inference: the student answers, or hands the instance to the teacher."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, InvalidInputError

ABSTAIN = -1


class Decider(str, enum.Enum):
    STUDENT = "STUDENT"
    TEACHER = "TEACHER"


class PolicyKind(str, enum.Enum):
    CLASS_BASED = "CLASS_BASED"
    MARGIN_BASED = "MARGIN_BASED"
    ABSTAIN_BASED = "ABSTAIN_BASED"
    ABSTAIN_MARGIN = "ABSTAIN_MARGIN"


@dataclass(frozen=True)
class DelegationPolicy:
    kind: PolicyKind
    rho: float | None = None
    l_in: tuple | None = None

    def __post_init__(self):
        kind = PolicyKind(self.kind)
        object.__setattr__(self, "kind", kind)
        uses_rho = kind in (PolicyKind.MARGIN_BASED, PolicyKind.ABSTAIN_MARGIN)
        if uses_rho != (self.rho is not None):
            raise ConfigError(f"{kind.value}: rho must be {'set' if uses_rho else 'unset'}")
        if uses_rho and not self.rho >= 0:
            raise ConfigError("rho must be >= 0")
        if (kind is PolicyKind.CLASS_BASED) != (self.l_in is not None):
            raise ConfigError("l_in is required for (and only for) CLASS_BASED")
        if self.l_in is not None:
            object.__setattr__(self, "l_in", tuple(sorted(set(int(c) for c in self.l_in))))

    @classmethod
    def class_based(cls, l_in):
        return cls(PolicyKind.CLASS_BASED, l_in=tuple(l_in))

    @classmethod
    def margin_based(cls, rho):
        return cls(PolicyKind.MARGIN_BASED, rho=float(rho))

    @classmethod
    def abstain(cls):
        return cls(PolicyKind.ABSTAIN_BASED)

    @classmethod
    def abstain_margin(cls, rho):
        return cls(PolicyKind.ABSTAIN_MARGIN, rho=float(rho))

    def with_rho(self, rho):
        return DelegationPolicy(self.kind, rho=float(rho))


@dataclass(frozen=True)
class Decision:
    final_label: int
    decider: Decider
    student_margin: float
    abstained: bool = False


class TeacherOracle:
    """A trained teacher network, or an oracle that knows the true labels.

    The oracle puts mass ``eta`` on the true label and spreads ``1 - eta``
    evenly over the other classes; instances are addressed by index into
    ``labels``.
    """

    def __init__(self, net=None, labels=None, n_classes=None, eta=1.0):
        if (net is None) == (labels is None):
            raise ConfigError("give exactly one of a teacher network or oracle labels")
        self.net = net
        self.eta = float(eta)
        if net is not None:
            self.labels = None
            self.n_classes = net.n_out
        else:
            self.labels = np.asarray(labels, dtype=np.int64)
            self.n_classes = int(n_classes)
            if self.n_classes < 2 or not 1.0 / self.n_classes < self.eta <= 1.0:
                raise ConfigError("oracle confidence eta must lie in (1/L, 1]")

    @classmethod
    def trained(cls, net):
        return cls(net=net)

    @classmethod
    def oracle(cls, labels, n_classes, eta=1.0):
        return cls(labels=labels, n_classes=n_classes, eta=eta)

    @property
    def is_oracle(self):
        return self.net is None

    @property
    def tag(self):
        return f"oracle-eta{self.eta!r}" if self.is_oracle else "mlp-" + "-".join(map(str, self.net.widths))

    def _oracle_dist(self, index):
        idx = np.atleast_1d(np.asarray(index, dtype=np.int64))
        L = self.n_classes
        P = np.full((idx.shape[0], L), (1.0 - self.eta) / (L - 1))
        P[np.arange(idx.shape[0]), self.labels[idx]] = self.eta
        return P

    def _need_index(self, index):
        if self.is_oracle and index is None:
            raise InvalidInputError("oracle teacher needs instance indices")

    def distribution(self, X=None, index=None):
        self._need_index(index)
        if self.is_oracle:
            return self._oracle_dist(index)
        return nn.softmax(nn.forward(self.net, np.atleast_2d(X)), 1.0)

    def logits(self, X=None, index=None):
        self._need_index(index)
        if self.is_oracle:
            return np.log(np.maximum(self._oracle_dist(index), nn.LOG_FLOOR))
        return nn.forward(self.net, np.atleast_2d(X))

    def predict(self, X=None, index=None):
        self._need_index(index)
        if self.is_oracle:
            # argmax of the oracle distribution is the true label whenever eta > 1/L
            return self.labels[np.atleast_1d(np.asarray(index, dtype=np.int64))].copy()
        return nn.argmax(nn.forward(self.net, np.atleast_2d(X)))


# single-instance rules

def student_margin(dist):
    return nn.margin(dist)


def delegate_class_based(student_logits, l_in):
    return Decider.STUDENT if int(nn.argmax(student_logits)) in set(l_in) else Decider.TEACHER


def delegate_margin_based(student_dist, rho):
    if rho < 0:
        raise InvalidInputError("rho must be >= 0")
    return Decider.STUDENT if nn.margin(student_dist) >= rho else Decider.TEACHER


def delegate_abstain(student_dist):
    p = np.asarray(student_dist)
    if p.shape[-1] < 2:
        raise InvalidInputError("abstain delegation needs at least one class plus the abstain slot")
    return Decider.TEACHER if int(nn.argmax(p)) == p.shape[-1] - 1 else Decider.STUDENT


def delegate_abstain_margin(student_dist, rho):
    if rho < 0:
        raise InvalidInputError("rho must be >= 0")
    if delegate_abstain(student_dist) is Decider.TEACHER:
        return Decider.TEACHER
    return Decider.STUDENT if nn.margin(student_dist) >= rho else Decider.TEACHER


def bayes_reject(posterior, c):
    """Reject-option Bayes rule: abstain iff ``max posterior <= 1 - c``."""
    if not 0.0 < c <= 1.0:
        raise InvalidInputError("rejection cost c must lie in (0, 1]")
    p = np.asarray(posterior, dtype=np.float64)
    k = int(np.argmax(p))
    return ABSTAIN if p[k] <= 1.0 - c else k


# student output spaces

@dataclass(frozen=True)
class StudentSpace:
    """How to read a student's outputs back into the original label space."""

    n_classes: int
    slots: tuple  # original class for each real output slot
    has_abstain: bool

    @property
    def width(self):
        return len(self.slots) + int(self.has_abstain)


def student_space(student, n_classes=None):
    meta = student.meta
    if n_classes is None:
        n_classes = int(meta["classes"]) if "classes" in meta else student.n_out
    variant = meta.get("variant", "BASELINE")
    if variant in ("CD2", "CD3"):
        slots = tuple(int(c) for c in meta["l_in"].split(","))
        space = StudentSpace(n_classes, slots, variant == "CD3")
    else:
        space = StudentSpace(n_classes, tuple(range(n_classes)), variant == "MD_ABSTAIN")
    if space.width != student.n_out:
        raise ConfigError(f"student has {student.n_out} outputs, its {variant} space needs {space.width}")
    return space


def check_policy(policy, space):
    kind = policy.kind
    if kind in (PolicyKind.ABSTAIN_BASED, PolicyKind.ABSTAIN_MARGIN) and not space.has_abstain:
        raise ConfigError(f"{kind.value} needs a student with an abstain slot")
    if kind in (PolicyKind.CLASS_BASED, PolicyKind.MARGIN_BASED) and space.has_abstain:
        raise ConfigError(f"{kind.value} needs a student without an abstain slot")
    if kind is PolicyKind.CLASS_BASED and any(c >= space.n_classes for c in policy.l_in):
        raise ConfigError("policy l_in outside the label space")


@dataclass(frozen=True, eq=False)
class StudentOutputs:
    """Student quantities routing needs, computed once per test set at tau = 1."""

    dist: np.ndarray
    margin: np.ndarray
    slot: np.ndarray       # raw argmax slot
    label: np.ndarray      # slot mapped to the original class (-1 on abstain)
    abstained: np.ndarray


def student_outputs(student, X, space):
    P = nn.softmax(nn.forward(student, np.atleast_2d(X)), 1.0)
    slot = nn.argmax(P)
    abstained = space.has_abstain & (slot == len(space.slots))
    lookup = np.array(space.slots + ((ABSTAIN,) if space.has_abstain else ()), dtype=np.int64)
    return StudentOutputs(P, nn.margin(P), slot, lookup[slot], abstained)


def route(policy, outs):
    """Boolean mask: True where the student makes the final prediction."""
    kind = policy.kind
    if kind is PolicyKind.CLASS_BASED:
        return np.isin(outs.label, list(policy.l_in))
    if kind is PolicyKind.MARGIN_BASED:
        return outs.margin >= policy.rho
    if kind is PolicyKind.ABSTAIN_BASED:
        return ~outs.abstained
    return ~outs.abstained & (outs.margin >= policy.rho)


def decide(outs, keep, teacher_labels):
    """Assemble Decisions; ``teacher_labels`` is consulted only where ``keep`` is False."""
    out = []
    for i in range(keep.shape[0]):
        if keep[i]:
            out.append(Decision(int(outs.label[i]), Decider.STUDENT, float(outs.margin[i]), bool(outs.abstained[i])))
        else:
            out.append(Decision(int(teacher_labels[i]), Decider.TEACHER, float(outs.margin[i]), bool(outs.abstained[i])))
    return out


def two_stage_predict_batch(student, teacher, policy, X, index=None):
    """Route a batch; the teacher runs only on delegated rows."""
    space = student_space(student, teacher.n_classes)
    check_policy(policy, space)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if index is not None:
        index = np.asarray(index, dtype=np.int64)
    outs = student_outputs(student, X, space)
    keep = route(policy, outs)
    teacher_labels = np.full(keep.shape[0], -1, dtype=np.int64)
    sent = np.flatnonzero(~keep)
    if sent.size:
        teacher_labels[sent] = teacher.predict(X[sent], None if index is None else index[sent])
    return decide(outs, keep, teacher_labels)


def two_stage_predict(student, teacher, policy, x, index=None):
    """Route one instance; ``index`` addresses it for an oracle teacher."""
    idx = None if index is None else [index]
    return two_stage_predict_batch(student, teacher, policy, np.asarray(x, dtype=np.float64)[None, :], idx)[0]
