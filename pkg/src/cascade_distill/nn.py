"""Small deterministic feedforward networks.

Softmax with temperature, cross-entropy against soft targets, analytic
gradients and a mini-batch SGD loop. The dense forward/backward work runs in
the kernel module chosen by ``_backend``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _backend
from ._kernels_py import batch_grad, layer_views
from .errors import InvalidInputError, ParseError

LOG_FLOOR = 1e-300


def _check_tau(tau):
    if not (isinstance(tau, (int, float, np.floating)) and math.isfinite(tau) and tau > 0):
        raise InvalidInputError(f"temperature must be a positive finite number, got {tau!r}")


def softmax(logits, tau=1.0):
    """Temperature softmax along the last axis, ``exp(tau*z_i) / sum_j exp(tau*z_j)``."""
    z = np.asarray(logits, dtype=np.float64)
    _check_tau(tau)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise InvalidInputError("logits must have at least one class")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits contain NaN or Inf")
    s = tau * z
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(target, pred):
    """``-sum_i target_i * log(pred_i)`` with ``0 * log 0 = 0``.

    Returns ``inf`` (with a warning) when ``pred`` puts zero mass on a class
    the target supports.
    """
    t = np.asarray(target, dtype=np.float64)
    q = np.asarray(pred, dtype=np.float64)
    if t.shape != q.shape:
        raise InvalidInputError(f"length mismatch: target {t.shape} vs pred {q.shape}")
    support = t > 0
    if np.any(q[support] <= 0):
        warnings.warn("cross_entropy: prediction has zero mass on target support", RuntimeWarning)
        return math.inf
    return float(-np.sum(t[support] * np.log(q[support])))


def entropy(p):
    return cross_entropy(p, p)


def margin(dist):
    """Top-1 minus top-2 probability (last axis)."""
    p = np.asarray(dist, dtype=np.float64)
    if p.shape[-1] < 2:
        raise InvalidInputError("margin needs at least two classes")
    top2 = np.partition(p, -2, axis=-1)[..., -2:]
    m = top2[..., 1] - top2[..., 0]
    return float(m) if m.ndim == 0 else m


def argmax(v):
    """Argmax along the last axis; lowest index wins ties."""
    return np.argmax(np.asarray(v), axis=-1)


def param_count(widths):
    return sum((a + 1) * b for a, b in zip(widths[:-1], widths[1:]))


@dataclass(frozen=True, eq=False)
class Network:
    """Fully connected ReLU network; ``params`` is a flat read-only vector.

    ``meta`` carries string metadata (distillation variant, label subset, ...)
    that survives a checkpoint round trip.
    """

    widths: tuple
    params: np.ndarray
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise InvalidInputError(f"widths must be >= 2 positive integers, got {self.widths}")
        params = np.array(self.params, dtype=np.float64, copy=True).ravel()
        if params.size != param_count(widths):
            raise InvalidInputError(
                f"expected {param_count(widths)} parameters for widths {widths}, got {params.size}"
            )
        params.flags.writeable = False
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def n_in(self):
        return self.widths[0]

    @property
    def n_out(self):
        return self.widths[-1]

    def layers(self):
        """Per-layer ``(W, b)`` read-only views, ``W`` shaped (fan_out, fan_in)."""
        return layer_views(self.params, self.widths)

    def replace(self, params=None, meta=None):
        return Network(
            self.widths,
            self.params if params is None else params,
            self.seed,
            self.meta if meta is None else meta,
        )

    def __call__(self, x):
        return forward(self, x)


def init_network(widths, seed):
    """Seeded init: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases."""
    widths = tuple(int(w) for w in widths)
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return Network(widths, np.concatenate(chunks), seed=int(seed))


def _as_batch(net, x):
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != net.n_in:
        raise InvalidInputError(f"expected feature width {net.n_in}, got shape {np.shape(x)}")
    return np.ascontiguousarray(X), single


def forward(net, x):
    """Logits for one feature vector (1-D) or a batch (2-D)."""
    X, single = _as_batch(net, x)
    Z = _backend.kernels.forward(net.params, net.widths, X)
    return Z[0] if single else Z


def predict_proba(net, x, tau=1.0):
    return softmax(forward(net, x), tau)


def logit_grad(logits, target, tau=1.0):
    """Gradient of ``H(target, softmax(logits, tau))`` w.r.t. the logits."""
    return tau * (softmax(logits, tau) - np.asarray(target, dtype=np.float64))


def _check_targets(net, T):
    if T.ndim != 2 or T.shape[1] != net.n_out:
        raise InvalidInputError(f"targets must have width {net.n_out}, got shape {T.shape}")
    if np.any(T < 0) or np.any(np.abs(T.sum(axis=1) - 1.0) > 1e-9):
        raise InvalidInputError("targets must be probability distributions")


def loss(net, x, target, tau=1.0):
    """Mean cross-entropy of the network's tempered softmax against ``target``."""
    X, single = _as_batch(net, x)
    T = np.atleast_2d(np.asarray(target, dtype=np.float64))
    _check_targets(net, T)
    value, _ = batch_grad(net.params, net.widths, X, T, tau)
    return value


def loss_grad(net, x, target, tau=1.0):
    """Flat parameter gradient of the (batch-mean) soft-target cross-entropy."""
    _check_tau(tau)
    X, _ = _as_batch(net, x)
    T = np.atleast_2d(np.asarray(target, dtype=np.float64))
    _check_targets(net, T)
    if T.shape[0] != X.shape[0]:
        raise InvalidInputError("one target per input row required")
    _, grad = batch_grad(net.params, net.widths, X, T, tau)
    return grad


@dataclass(frozen=True)
class TrainSpec:
    lr: float
    epochs: int
    batch_size: int
    shuffle_seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidInputError("learning rate must be positive")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be non-negative")
        if self.batch_size <= 0:
            raise InvalidInputError("batch size must be positive")


def train(net, X, targets, spec, tau=1.0, history=None):
    """Plain mini-batch SGD on soft targets; returns a new network.

    Each epoch visits the examples in a fresh permutation drawn from
    ``spec.shuffle_seed``; the last batch may be short. If ``history`` is a
    list, the mean batch loss of each epoch is appended to it.
    """
    _check_tau(tau)
    X = np.ascontiguousarray(X, dtype=np.float64)
    T = np.ascontiguousarray(targets, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidInputError("training set is empty")
    if X.shape[1] != net.n_in:
        raise InvalidInputError(f"expected feature width {net.n_in}, got {X.shape[1]}")
    if T.shape[0] != X.shape[0]:
        raise InvalidInputError("one target per example required")
    _check_targets(net, T)
    if spec.batch_size > X.shape[0]:
        raise InvalidInputError("batch size exceeds dataset size")
    if spec.epochs == 0:
        return net
    params = net.params.copy()
    rng = np.random.default_rng(spec.shuffle_seed)
    k = _backend.kernels
    for _ in range(spec.epochs):
        order = rng.permutation(X.shape[0]).astype(np.int64)
        epoch_loss = k.sgd_epoch(params, net.widths, X, T, order, float(spec.lr), float(tau), int(spec.batch_size))
        if not math.isfinite(epoch_loss):
            raise FloatingPointError("training diverged (non-finite loss); lower the learning rate")
        if history is not None:
            history.append(epoch_loss)
    return net.replace(params=params)


# checkpoints

_NET_MAGIC = "netv1"


def _fmt_meta(value):
    text = str(value)
    if not text or any(c.isspace() for c in text) or "=" in text:
        raise InvalidInputError(f"metadata value {value!r} must be non-empty without spaces or '='")
    return text


def save_network(net, path):
    """Write ``netv1`` header line plus little-endian float64 parameter blob."""
    fields = [_NET_MAGIC, "widths=" + ",".join(map(str, net.widths)), f"seed={net.seed}"]
    for key in sorted(net.meta):
        fields.append(f"{_fmt_meta(key)}={_fmt_meta(net.meta[key])}")
    header = (" ".join(fields) + "\n").encode("ascii")
    Path(path).write_bytes(header + net.params.astype("<f8").tobytes())


def load_network(path):
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ParseError("missing checkpoint header", line=1)
    try:
        tokens = data[:nl].decode("ascii").split()
    except UnicodeDecodeError:
        raise ParseError("checkpoint header is not ASCII", line=1) from None
    if not tokens or tokens[0] != _NET_MAGIC:
        raise ParseError(f"expected '{_NET_MAGIC}' header", line=1)
    fields = {}
    for tok in tokens[1:]:
        key, sep, value = tok.partition("=")
        if not sep:
            raise ParseError(f"malformed header field {tok!r}", line=1)
        fields[key] = value
    try:
        widths = tuple(int(w) for w in fields.pop("widths").split(","))
        seed = int(fields.pop("seed"))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad widths/seed in header: {exc}", line=1) from None
    blob = data[nl + 1:]
    expected = param_count(widths) * 8
    if len(blob) != expected:
        raise ParseError(f"parameter blob has {len(blob)} bytes, expected {expected}", offset=nl + 1 + len(blob))
    params = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    return Network(widths, params, seed=seed, meta=fields)
