"""``cascade-distill`` command-line pipeline.

    gen-data -> train-teacher -> cache-scores -> distill -> sweep -> report

Every command reads the same config and writes under its output directory::

    config.resolved
    data/{train,test,test_alt}.data
    teacher/teacher.net           (trained teacher only)
    teacher/train.score
    students/<variant>.net
    sweeps/<variant>.{csv,svg}
    report/table.{csv,md}
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import _backend, cascade, datagen, distill, nn
from . import eval as ev
from .config import ExperimentConfig
from .errors import ConfigError, InvalidInputError, MissingArtifactError, ParseError

log = logging.getLogger("cascade_distill")


class Paths:
    def __init__(self, out):
        self.out = Path(out)
        self.config = self.out / "config.resolved"
        self.train = self.out / "data" / "train.data"
        self.test = self.out / "data" / "test.data"
        self.test_alt = self.out / "data" / "test_alt.data"
        self.teacher = self.out / "teacher" / "teacher.net"
        self.scores = self.out / "teacher" / "train.score"
        self.students = self.out / "students"
        self.sweeps = self.out / "sweeps"
        self.report = self.out / "report"

    def student(self, name):
        return self.students / f"{name}.net"


def _require(path, command):
    if not Path(path).exists():
        raise MissingArtifactError(f"missing {path}; run `cascade-distill {command}` first")


def _freeze_config(conf, paths):
    paths.out.mkdir(parents=True, exist_ok=True)
    paths.config.write_text(conf.resolved_text(), encoding="ascii", newline="\n")


def _teacher(conf, paths, labels_for_oracle):
    if conf["teacher.mode"] == "oracle":
        return cascade.TeacherOracle.oracle(labels_for_oracle, conf["data.classes"], conf["teacher.eta"])
    _require(paths.teacher, "train-teacher")
    return cascade.TeacherOracle.trained(nn.load_network(paths.teacher))


def cmd_gen_data(conf, paths):
    spec = conf.mixture()
    train, test = datagen.generate(spec)
    alt = datagen.generate_alt_test(spec)
    paths.train.parent.mkdir(parents=True, exist_ok=True)
    datagen.save_dataset(train, paths.train)
    datagen.save_dataset(test, paths.test)
    datagen.save_dataset(alt, paths.test_alt)
    counts = np.bincount(train.labels, minlength=spec.n_classes)
    log.info("train class counts: %s", " ".join(map(str, counts)))
    return [paths.train, paths.test, paths.test_alt]


def cmd_train_teacher(conf, paths):
    _require(paths.train, "gen-data")
    if conf["teacher.mode"] == "oracle":
        log.info("teacher.mode=oracle: nothing to train")
        return []
    train = datagen.load_dataset(paths.train)
    net = nn.init_network(conf["teacher.widths"], conf.stage_seed("teacher.init"))
    targets = np.eye(train.n_classes)[train.labels]
    history = []
    net = nn.train(net, train.features, targets, conf.train_spec("teacher"), tau=1.0, history=history)
    log.info("teacher loss %.4f -> %.4f", history[0] if history else float("nan"), history[-1] if history else float("nan"))
    paths.teacher.parent.mkdir(parents=True, exist_ok=True)
    nn.save_network(net.replace(meta={"role": "teacher"}), paths.teacher)
    return [paths.teacher]


def cmd_cache_scores(conf, paths):
    _require(paths.train, "gen-data")
    train = datagen.load_dataset(paths.train)
    teacher = _teacher(conf, paths, train.labels)
    logits = teacher.logits(train.features, np.arange(len(train)))
    cache = distill.TeacherScoreCache(logits, teacher.tag, 1.0)
    paths.scores.parent.mkdir(parents=True, exist_ok=True)
    distill.save_cache(cache, paths.scores)
    return [paths.scores]


def cmd_distill(conf, paths):
    _require(paths.train, "gen-data")
    _require(paths.scores, "cache-scores")
    train = datagen.load_dataset(paths.train)
    cache = distill.load_cache(paths.scores)
    paths.students.mkdir(parents=True, exist_ok=True)
    written = []
    for run in conf.student_runs():
        widths = conf["student.widths"][:-1] + (run.cfg.output_width(train.n_classes),)
        net = nn.init_network(widths, conf.stage_seed("student.init"))
        history = []
        net = distill.distill_train(net, train, cache, run.cfg, conf.train_spec("student"), history=history)
        log.info("%s: loss %.4f -> %.4f", run.name, history[0], history[-1])
        nn.save_network(net, paths.student(run.name))
        written.append(paths.student(run.name))
    return written


def _mask(conf, test, teacher):
    if conf["in_domain.kind"] == "class":
        return ev.InDomainMask.by_class(test.labels, conf["distill.l_in"])
    dist = teacher.distribution(test.features, np.arange(len(test)))
    return ev.InDomainMask.by_teacher_margin(dist, conf["in_domain.threshold"])


def _family(conf, space):
    choice = conf["sweep.family"]
    if choice == "auto":
        return cascade.PolicyKind.ABSTAIN_MARGIN if space.has_abstain else cascade.PolicyKind.MARGIN_BASED
    return cascade.PolicyKind.ABSTAIN_MARGIN if choice == "abstain_margin" else cascade.PolicyKind.MARGIN_BASED


def _load_eval_inputs(conf, paths):
    _require(paths.test, "gen-data")
    test = datagen.load_dataset(paths.test)
    teacher = _teacher(conf, paths, test.labels)
    students = {}
    for run in conf.student_runs():
        _require(paths.student(run.name), "distill")
        students[run.name] = nn.load_network(paths.student(run.name))
    return test, teacher, students


def cmd_sweep(conf, paths):
    test, teacher, students = _load_eval_inputs(conf, paths)
    mask = _mask(conf, test, teacher)
    paths.sweeps.mkdir(parents=True, exist_ok=True)
    written = []
    for name, student in students.items():
        space = cascade.student_space(student, test.n_classes)
        points = ev.sweep(student, teacher, test.features, test.labels, mask, _family(conf, space),
                          conf["sweep.rho_grid"], conf.cost(), index=np.arange(len(test)))
        written.extend(ev.emit_report(points, paths.sweeps / name, conf["cost.unit"]))
    return written


def table_policy(student, n_classes, rho):
    """Delegation rule for the comparison table (class-based where one exists)."""
    variant = student.meta.get("variant", "BASELINE")
    if variant == "BASELINE":
        return cascade.DelegationPolicy.class_based(range(n_classes))
    if variant in ("CD1", "CD2"):
        return cascade.DelegationPolicy.class_based(int(c) for c in student.meta["l_in"].split(","))
    if variant == "CD3":
        return cascade.DelegationPolicy.abstain()
    if variant == "MD_LS":
        return cascade.DelegationPolicy.margin_based(rho)
    return cascade.DelegationPolicy.abstain_margin(rho)


def _policy_label(policy):
    if policy.kind is cascade.PolicyKind.CLASS_BASED:
        return "class"
    if policy.kind is cascade.PolicyKind.ABSTAIN_BASED:
        return "abstain"
    return f"{policy.kind.value.lower()}(rho={policy.rho:g})"


def cmd_report(conf, paths):
    test, teacher, students = _load_eval_inputs(conf, paths)
    mask = _mask(conf, test, teacher)
    index = np.arange(len(test))
    rows = []
    for name, student in students.items():
        policy = table_policy(student, test.n_classes, conf["report.rho"])
        decisions = cascade.two_stage_predict_batch(student, teacher, policy, test.features, index)
        in_acc, in_frac = ev.in_domain_accuracy(decisions, test.labels, mask)
        rows.append((name, _policy_label(policy), in_acc, in_frac,
                     ev.accuracy(decisions, test.labels), ev.fraction_student(decisions)))
    paths.report.mkdir(parents=True, exist_ok=True)
    csv_lines = ["approach,delegation,in_domain_acc,in_domain_fraction,overall_acc,overall_fraction"]
    md_lines = [
        f"In-domain: {mask.tag}; teacher: {teacher.tag}",
        "",
        "| Approach | Delegation | In-domain Accuracy | In-domain Fraction | Overall Accuracy | Overall Fraction |",
        "|---|---|---|---|---|---|",
    ]
    for name, pol, ia, ifr, oa, ofr in rows:
        csv_lines.append(f"{name},{pol},{ia:.6f},{ifr:.6f},{oa:.6f},{ofr:.6f}")
        md_lines.append(f"| {name} | {pol} | {ia:.2f} | {ifr:.2f} | {oa:.2f} | {ofr:.2f} |")
    csv_path, md_path = paths.report / "table.csv", paths.report / "table.md"
    csv_path.write_text("\n".join(csv_lines) + "\n", encoding="ascii", newline="\n")
    md_path.write_text("\n".join(md_lines) + "\n", encoding="ascii", newline="\n")
    print("\n".join(md_lines))
    return [csv_path, md_path]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "cache-scores": cmd_cache_scores,
    "distill": cmd_distill,
    "sweep": cmd_sweep,
    "report": cmd_report,
}
PIPELINE = list(COMMANDS)


def run(command, config_path, out=None, seed=None):
    overrides = {}
    if out is not None:
        overrides["out"] = out
    if seed is not None:
        overrides["seed"] = seed
    conf = ExperimentConfig.load(config_path, overrides)
    paths = Paths(conf.out)
    _freeze_config(conf, paths)
    return COMMANDS[command](conf, paths)


def build_parser():
    parser = argparse.ArgumentParser(prog="cascade-distill", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=[*COMMANDS, "all"])
    parser.add_argument("--config", required=True, help="key=value experiment config")
    parser.add_argument("--out", help="output directory (overrides `out`)")
    parser.add_argument("--seed", type=int, help="global seed (overrides `seed`)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.info("kernel backend: %s", _backend.BACKEND)
    commands = PIPELINE if args.command == "all" else [args.command]
    try:
        for command in commands:
            for path in run(command, args.config, args.out, args.seed):
                log.info("wrote %s", path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (MissingArtifactError, ParseError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
