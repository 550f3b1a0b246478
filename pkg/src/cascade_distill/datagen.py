"""Seeded long-tailed Gaussian-mixture benchmarks.

Class ``k`` (0-based) has prior proportional to ``(k + 1) ** -zipf`` and an
isotropic Gaussian around a mean drawn uniformly on a sphere of the given
radius, so the exact posterior is available for every point.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidInputError, ParseError

# SeedSequence spawn keys for the independent streams of one spec
_MEANS, _TRAIN, _TEST, _TEST_ALT = range(4)


@dataclass(frozen=True)
class MixtureSpec:
    n_classes: int
    dim: int
    zipf: float
    radius: float
    sigma: float
    n_train: int
    n_test: int
    seed: int
    balanced_test: bool = True

    def __post_init__(self):
        if self.n_classes < 1 or self.dim < 1:
            raise InvalidInputError("need at least one class and one feature")
        if not (self.sigma > 0 and self.radius > 0):
            raise InvalidInputError("sigma and radius must be positive")
        if self.zipf < 0:
            raise InvalidInputError("zipf exponent must be >= 0")
        if self.n_train < 1 or self.n_test < 1:
            raise InvalidInputError("n_train and n_test must be positive")

    def priors(self):
        w = np.arange(1, self.n_classes + 1, dtype=np.float64) ** -float(self.zipf)
        return w / w.sum()

    def means(self):
        rng = _stream(self.seed, _MEANS)
        g = rng.standard_normal((self.n_classes, self.dim))
        return self.radius * g / np.linalg.norm(g, axis=1, keepdims=True)

    def head_classes(self, k):
        """The ``k`` most frequent classes (priors decrease with index)."""
        return tuple(range(min(k, self.n_classes)))


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    seed: int = 0

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise InvalidInputError("features must be (n, d) with one label per row")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise InvalidInputError("label out of range")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.n_classes == other.n_classes
            and self.seed == other.seed
            and np.array_equal(self.labels, other.labels)
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
        )


def _stream(seed, key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


def _draw(spec, n, rng, balanced):
    L = spec.n_classes
    if balanced:
        labels = rng.permutation(np.arange(n) % L)
    else:
        labels = rng.choice(L, size=n, p=spec.priors())
    noise = rng.standard_normal((n, spec.dim))
    X = spec.means()[labels] + spec.sigma * noise
    return Dataset(X, labels, L, spec.seed)


def generate(spec):
    """Return ``(train, test)``; train follows the priors, test per ``balanced_test``."""
    if spec.n_classes > spec.n_train:
        warnings.warn("more classes than training examples", RuntimeWarning)
    train = _draw(spec, spec.n_train, _stream(spec.seed, _TRAIN), balanced=False)
    test = _draw(spec, spec.n_test, _stream(spec.seed, _TEST), balanced=spec.balanced_test)
    return train, test


def generate_alt_test(spec):
    """The test flavor ``generate`` did not emit (balanced <-> prior-weighted)."""
    return _draw(spec, spec.n_test, _stream(spec.seed, _TEST_ALT), balanced=not spec.balanced_test)


def log_joint(spec, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    mu = spec.means()
    sq = ((X[:, None, :] - mu[None, :, :]) ** 2).sum(axis=2)
    return np.log(spec.priors())[None, :] - sq / (2.0 * spec.sigma ** 2)


def true_posterior(spec, x):
    """Exact class posterior ``P(y | x)`` under the mixture, computed in log space."""
    x = np.asarray(x, dtype=np.float64)
    lj = log_joint(spec, x)
    post = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    return post[0] if x.ndim == 1 else post


def bayes_predict(spec, X):
    return np.argmax(log_joint(spec, X), axis=1)


# serialization

_DATA_MAGIC = "datav1"


def save_dataset(ds, path):
    lines = [f"{_DATA_MAGIC} n={len(ds)} d={ds.dim} L={ds.n_classes} seed={ds.seed}"]
    for label, row in zip(ds.labels.tolist(), ds.features.tolist()):
        lines.append(",".join([str(label)] + [repr(v) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii", newline="\n")


def _header_int(fields, key):
    try:
        return int(fields[key])
    except (KeyError, ValueError):
        raise ParseError(f"header field {key!r} missing or not an integer", line=1) from None


def load_dataset(path):
    text = Path(path).read_text(encoding="ascii")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty dataset file", line=1, offset=0)
    tokens = lines[0].split()
    if not tokens or tokens[0] != _DATA_MAGIC:
        raise ParseError(f"expected '{_DATA_MAGIC}' header", line=1)
    fields = dict(t.partition("=")[::2] for t in tokens[1:])
    n, d, L, seed = (_header_int(fields, k) for k in ("n", "d", "L", "seed"))
    body = lines[1:]
    if len(body) != n:
        raise ParseError(f"header says n={n} but file has {len(body)} rows", line=len(body) + 2)
    X = np.empty((n, d))
    y = np.empty(n, dtype=np.int64)
    offset = len(lines[0]) + 1
    for i, line in enumerate(body):
        parts = line.split(",")
        if len(parts) != d + 1:
            raise ParseError(f"expected {d + 1} fields, got {len(parts)}", line=i + 2, offset=offset)
        try:
            y[i] = int(parts[0])
            X[i] = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise ParseError(str(exc), line=i + 2, offset=offset) from None
        if not 0 <= y[i] < L or not all(math.isfinite(v) for v in X[i]):
            raise ParseError("label out of range or non-finite feature", line=i + 2, offset=offset)
        offset += len(line) + 1
    return Dataset(X, y, L, seed)
