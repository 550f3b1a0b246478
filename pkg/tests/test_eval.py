import math

import numpy as np
import pytest

from cascade_distill import cascade, eval as ev, nn
from cascade_distill.cascade import Decider, Decision, PolicyKind, TeacherOracle
from cascade_distill.errors import InvalidInputError

from test_cascade import identity_student


def decisions(labels, deciders):
    return [Decision(int(y), d, 0.0) for y, d in zip(labels, deciders)]


S, T = Decider.STUDENT, Decider.TEACHER


def test_accuracy():
    assert ev.accuracy(decisions([0, 1], [S, S]), [0, 1]) == 1.0
    assert ev.accuracy(decisions([0, 0], [S, S]), [0, 1]) == 0.5
    assert ev.accuracy(decisions([1, 0], [S, T]), [0, 1]) == 0.0
    with pytest.raises(InvalidInputError):
        ev.accuracy([], [])


def test_in_domain_counting():
    d = decisions([0, 1, 2, 9, 5], [S, S, T, T, S])
    labels = [0, 1, 2, 3, 7]
    mask = np.array([True, True, True, True, False])
    assert ev.in_domain_accuracy(d, labels, mask) == (0.75, 0.5)


def test_in_domain_full_mask_matches_overall():
    rng = np.random.default_rng(0)
    d = decisions(rng.integers(0, 3, 50), rng.choice([S, T], 50))
    labels = rng.integers(0, 3, 50)
    acc, frac = ev.in_domain_accuracy(d, labels, ev.InDomainMask.everything(50))
    assert abs(acc - ev.accuracy(d, labels)) < 1e-12 and frac == ev.fraction_student(d)


def test_in_domain_teacher_only_mask():
    d = decisions([0, 1, 2], [S, T, T])
    assert ev.in_domain_accuracy(d, [0, 1, 2], np.array([False, True, True]))[1] == 0.0


def test_in_domain_empty_mask():
    with pytest.warns(RuntimeWarning):
        acc, frac = ev.in_domain_accuracy(decisions([0], [S]), [0], np.array([False]))
    assert math.isnan(acc) and math.isnan(frac)


def test_masks():
    assert ev.InDomainMask.by_class([0, 3, 1, 2], (1, 0)).mask.tolist() == [True, False, True, False]
    m = ev.InDomainMask.by_teacher_margin(np.array([[0.75, 0.25], [0.6, 0.4], [0.9, 0.1]]))
    assert m.mask.tolist() == [True, False, True]


# cost


def test_cost_examples():
    assert ev.expected_cost(ev.PRESET_COST, 0.0) == 72e6
    assert ev.expected_cost(ev.PRESET_COST, 1.0) == pytest.approx(478.072e9, rel=1e-15)
    assert ev.expected_cost(ev.PRESET_COST, 0.74) == 353_792_000_000.0
    for bad in (-0.01, 1.01):
        with pytest.raises(InvalidInputError):
            ev.expected_cost(ev.PRESET_COST, bad)


def test_cost_affine():
    rng = np.random.default_rng(3)
    f = rng.uniform(0, 1, 100)
    got = [ev.expected_cost(ev.PRESET_COST, x) for x in f]
    assert got == [72e6 + x * 478e9 for x in f]


def test_mlp_flops():
    assert ev.mlp_flops((4, 3, 2)) == 2 * 12 + 3 + 2 * 6 + 2


def test_negative_costs_rejected():
    with pytest.raises(InvalidInputError):
        ev.CostModel(-1.0, 5.0)


# sweeps


@pytest.fixture(scope="module")
def sweep_setup():
    rng = np.random.default_rng(9)
    X = rng.normal(0, 1.2, size=(400, 5))
    labels = np.where(rng.random(400) < 0.6, nn.argmax(X), rng.integers(0, 5, 400))
    student = identity_student(5, variant="BASELINE", classes=5)
    return X, labels, student


def test_sweep_endpoints(sweep_setup):
    X, labels, student = sweep_setup
    teacher = TeacherOracle.trained(nn.init_network((5, 8, 5), 4))
    pts = ev.sweep(student, teacher, X, labels, ev.InDomainMask.everything(400),
                   PolicyKind.MARGIN_BASED, [0.0, 1.01], ev.PRESET_COST)
    assert pts[0].fraction_student == 1.0
    assert pts[0].overall_acc == float(np.mean(nn.argmax(X) == labels))
    assert pts[0].expected_cost == 72e6
    assert pts[1].fraction_student == 0.0
    assert pts[1].overall_acc == float(np.mean(teacher.predict(X) == labels))


def test_sweep_matches_per_rho_prediction(sweep_setup):
    X, labels, student = sweep_setup
    teacher = TeacherOracle.trained(nn.init_network((5, 8, 5), 4))
    grid = [0.0, 0.1, 0.3, 0.7]
    pts = ev.sweep(student, teacher, X, labels, np.ones(400, bool), "MARGIN_BASED", grid, ev.PRESET_COST)
    for rho, p in zip(grid, pts):
        d = cascade.two_stage_predict_batch(student, teacher, cascade.DelegationPolicy.margin_based(rho), X)
        assert p.overall_acc == ev.accuracy(d, labels) and p.fraction_student == ev.fraction_student(d)


def test_sweep_oracle_monotone(sweep_setup):
    X, labels, student = sweep_setup
    teacher = TeacherOracle.oracle(labels, 5)
    grid = np.round(np.linspace(0, 1.01, 102), 6)
    pts = ev.sweep(student, teacher, X, labels, np.ones(400, bool), "MARGIN_BASED", grid, ev.PRESET_COST,
                   index=np.arange(400))
    acc = [p.overall_acc for p in pts]
    frac = [p.fraction_student for p in pts]
    assert all(b >= a for a, b in zip(acc, acc[1:]))
    assert all(b <= a for a, b in zip(frac, frac[1:]))
    assert acc[-1] == 1.0


def test_sweep_threads_same_result(sweep_setup, monkeypatch):
    X, labels, student = sweep_setup
    teacher = TeacherOracle.oracle(labels, 5)
    args = (student, teacher, X, labels, np.ones(400, bool), "MARGIN_BASED", [0.0, 0.2, 0.5], ev.PRESET_COST)
    one = ev.sweep(*args, index=np.arange(400))
    monkeypatch.setenv("CASCADE_DISTILL_THREADS", "4")
    assert ev.sweep(*args, index=np.arange(400)) == one


def test_sweep_errors(sweep_setup):
    X, labels, student = sweep_setup
    teacher = TeacherOracle.oracle(labels, 5)
    mask = np.ones(400, bool)
    with pytest.raises(InvalidInputError):
        ev.sweep(student, teacher, X, labels, mask, "MARGIN_BASED", [], ev.PRESET_COST, index=np.arange(400))
    with pytest.raises(InvalidInputError):
        ev.sweep(student, teacher, X, labels, mask, "MARGIN_BASED", [0.5, 0.1], ev.PRESET_COST,
                 index=np.arange(400))


# latency


def test_latency_wider_is_slower():
    X = np.random.default_rng(0).normal(size=(40, 64))
    small = nn.init_network((64, 4, 4), 0)
    big = nn.init_network((64, 1024, 1024, 4), 0)
    assert ev.measure_latency(big, X, 30)[0] >= ev.measure_latency(small, X, 30)[0]


def test_latency_preconditions():
    net = nn.init_network((2, 2), 0)
    with pytest.raises(InvalidInputError):
        ev.measure_latency(net, np.zeros((3, 2)), 2)
    with pytest.raises(InvalidInputError):
        ev.measure_latency(net, np.zeros((0, 2)), 3)
    med, p90 = ev.measure_latency(net, np.zeros((3, 2)), 3)
    assert 0 < med <= p90


# reports


def points(n):
    return [ev.TradeoffPoint(i / n, 1 - i / n, 0.5 + i / (4 * n), math.nan if i == 0 else 0.9, 1e9 * i)
            for i in range(n)]


def test_csv_format():
    text = ev.tradeoff_csv(points(1), "FLOPs")
    assert text == (
        "rho,fraction_student,overall_acc,in_domain_acc,expected_cost,unit\n"
        "0.000000,1.000000,0.500000,nan,0.000000,FLOPs\n"
    )


def test_emit_report_deterministic(tmp_path):
    a = ev.emit_report(points(50), tmp_path / "a", "FLOPs")
    b = ev.emit_report(points(50), tmp_path / "b.csv", "FLOPs")
    assert [p.name for p in b] == ["b.csv", "b.svg"]
    assert a[0].read_bytes() == b[0].read_bytes() and a[1].read_bytes() == b[1].read_bytes()
    assert len(a[0].read_text().splitlines()) == 51


def test_emit_report_dotted_names(tmp_path):
    ev.emit_report(points(2), tmp_path / "CD1_alpha0.6")
    ev.emit_report(points(3), tmp_path / "CD1_alpha0.9")
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "CD1_alpha0.6.csv", "CD1_alpha0.6.svg", "CD1_alpha0.9.csv", "CD1_alpha0.9.svg"]


def test_svg_vertex_counts():
    svg = ev.tradeoff_svg(points(50), "FLOPs & <units>")
    lines = [l for l in svg.splitlines() if l.startswith("<polyline")]
    assert len(lines) == 2
    for line in lines:
        pts = line.split('points="')[1].split('"')[0].split()
        assert len(pts) == 50
    assert "&amp; &lt;units&gt;" in svg and "href" not in svg


def test_emit_report_empty(tmp_path):
    with pytest.raises(InvalidInputError):
        ev.emit_report([], tmp_path / "x")
