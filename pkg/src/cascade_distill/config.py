"""Flat ``key=value`` experiment configs.

Blank lines and ``#`` comments are ignored; nesting uses dotted keys
(``student.widths=16,6,10``). Unknown keys are rejected with their line number.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import MixtureSpec
from .distill import DistillConfig, Variant
from .errors import ConfigError
from .eval import CostModel
from .nn import TrainSpec


def _ints(text):
    return tuple(int(t) for t in text.split(",") if t.strip())


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def parse_grid(text):
    """Comma list of numbers and ``start:stop:step`` ranges (stop inclusive)."""
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if ":" in tok:
            start, stop, step = (float(v) for v in tok.split(":"))
            if step <= 0:
                raise ValueError("range step must be positive")
            count = int(np.floor((stop - start) / step + 1e-9)) + 1
            out.extend(round(start + i * step, 10) for i in range(count))
        else:
            out.append(float(tok))
    if any(b < a for a, b in zip(out, out[1:])):
        raise ValueError("rho grid must be ascending")
    return tuple(out)


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "out": (str, "runs/default"),
    "data.classes": (int, 10),
    "data.dim": (int, 16),
    "data.zipf": (float, 1.0),
    "data.radius": (float, 3.0),
    "data.sigma": (float, 1.0),
    "data.n_train": (int, 20000),
    "data.n_test": (int, 5000),
    "data.balanced_test": (_bool, True),
    "teacher.mode": (_choice("trained", "oracle"), "trained"),
    "teacher.widths": (_ints, (16, 128, 128, 10)),
    "teacher.lr": (float, 0.05),
    "teacher.epochs": (int, 30),
    "teacher.batch_size": (int, 64),
    "teacher.eta": (float, 1.0),
    "student.widths": (_ints, (16, 6, 10)),
    "student.lr": (float, 0.05),
    "student.epochs": (int, 20),
    "student.batch_size": (int, 64),
    "distill.variants": (str, "BASELINE"),
    "distill.a": (float, 0.0),
    "distill.b": (float, 1.0),
    "distill.tau": (float, 1.0),
    "distill.alpha": (float, 0.0),
    "distill.rho_tr": (float, 0.5),
    "distill.l_in": (_ints, (0, 1, 2, 3, 4)),
    "distill.margin_space": (_choice("prob", "logit"), "prob"),
    "sweep.family": (_choice("auto", "margin", "abstain_margin"), "auto"),
    "sweep.rho_grid": (parse_grid, parse_grid("0:1:0.1,1.01")),
    "in_domain.kind": (_choice("class", "teacher_margin"), "class"),
    "in_domain.threshold": (float, 0.4),
    "report.rho": (float, 0.4),
    "cost.student": (float, 72e6),
    "cost.teacher": (float, 478e9),
    "cost.unit": (str, "FLOPs"),
}

_RAW_DEFAULTS = {
    "sweep.rho_grid": "0:1:0.1,1.01",
}


@dataclass(frozen=True)
class StudentRun:
    """One entry of ``distill.variants``: a name and its DistillConfig."""

    name: str
    cfg: DistillConfig


class ExperimentConfig:
    def __init__(self, values, raw):
        self._v = values
        self._raw = raw

    def __getitem__(self, key):
        return self._v[key]

    @classmethod
    def parse(cls, text, overrides=None):
        values = {k: default for k, (_, default) in SCHEMA.items()}
        raw = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            key, sep, value = stripped.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ConfigError(f"expected key=value, got {stripped!r}", line=lineno)
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}", line=lineno)
            if key in raw:
                raise ConfigError(f"duplicate key {key!r}", line=lineno)
            try:
                values[key] = SCHEMA[key][0](value)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}", line=lineno) from None
            raw[key] = value
        for key, value in (overrides or {}).items():
            values[key] = SCHEMA[key][0](str(value))
            raw[key] = str(value)
        conf = cls(values, raw)
        conf.validate()
        return conf

    @classmethod
    def load(cls, path, overrides=None):
        return cls.parse(Path(path).read_text(encoding="utf-8"), overrides)

    def resolved_text(self):
        """Canonical, sorted dump of every key (defaults included)."""
        lines = []
        for key in sorted(SCHEMA):
            if key in self._raw:
                text = self._raw[key]
            elif key in _RAW_DEFAULTS:
                text = _RAW_DEFAULTS[key]
            else:
                v = self._v[key]
                text = ",".join(map(str, v)) if isinstance(v, tuple) else str(v).lower() if isinstance(v, bool) else str(v)
            lines.append(f"{key}={text}")
        return "\n".join(lines) + "\n"

    def validate(self):
        v = self._v
        L = v["data.classes"]
        self.mixture()
        if v["teacher.mode"] == "trained":
            tw = v["teacher.widths"]
            if len(tw) < 2 or tw[0] != v["data.dim"] or tw[-1] != L:
                raise ConfigError("teacher.widths must start at data.dim and end at data.classes")
        sw = v["student.widths"]
        if len(sw) < 2 or sw[0] != v["data.dim"] or sw[-1] != L:
            raise ConfigError("student.widths must start at data.dim and end at data.classes")
        if not v["sweep.rho_grid"]:
            raise ConfigError("sweep.rho_grid is empty")
        for run in self.student_runs():
            run.cfg.check_classes(L)
        try:
            self.cost()
            self.train_spec("teacher")
            self.train_spec("student")
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # typed views

    def stage_seed(self, stage):
        """Independent 64-bit seed for a named stage, split from the global seed."""
        ss = np.random.SeedSequence(self._v["seed"], spawn_key=(zlib.crc32(stage.encode()),))
        return int(ss.generate_state(1, np.uint64)[0])

    def mixture(self):
        v = self._v
        try:
            return MixtureSpec(
                v["data.classes"], v["data.dim"], v["data.zipf"], v["data.radius"], v["data.sigma"],
                v["data.n_train"], v["data.n_test"], self.stage_seed("data"), v["data.balanced_test"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_spec(self, who):
        v = self._v
        return TrainSpec(v[f"{who}.lr"], v[f"{who}.epochs"], v[f"{who}.batch_size"], self.stage_seed(f"{who}.shuffle"))

    def cost(self):
        return CostModel(self._v["cost.student"], self._v["cost.teacher"], self._v["cost.unit"])

    def base_distill(self):
        v = self._v
        return dict(
            a=v["distill.a"], b=v["distill.b"], tau=v["distill.tau"], alpha=v["distill.alpha"],
            rho_tr=v["distill.rho_tr"], l_in=v["distill.l_in"], margin_space=v["distill.margin_space"],
        )

    def student_runs(self):
        """Parse ``distill.variants``: ``NAME[:key=value[:key=value...]]``, comma separated."""
        runs = []
        for item in self._v["distill.variants"].split(","):
            item = item.strip()
            if not item:
                continue
            head, *opts = item.split(":")
            kwargs = self.base_distill()
            suffix = []
            for opt in opts:
                key, sep, value = opt.partition("=")
                if not sep or key not in ("a", "b", "tau", "alpha", "rho_tr"):
                    raise ConfigError(f"bad variant option {opt!r} in {item!r}")
                kwargs[key] = float(value)
                suffix.append(f"{key}{value}")
            try:
                cfg = DistillConfig(Variant(head), **kwargs)
            except ValueError as exc:
                raise ConfigError(f"{item}: {exc}") from None
            name = "_".join([head] + suffix)
            if any(r.name == name for r in runs):
                raise ConfigError(f"variant {item!r} listed twice")
            runs.append(StudentRun(name, cfg))
        if not runs:
            raise ConfigError("distill.variants is empty")
        return runs

    @property
    def out(self):
        return Path(self._v["out"])
