import numpy as np
import pytest
from numpy.testing import assert_allclose

import src.xprop as xprop
from helpers import make_nets, token_sum_task
from src.builders import build_random_exnet
from src.gradcheck import GradcheckReport, Offender, check_trial, numeric_gradient, run_gradcheck


def test_numeric_gradient_of_a_quadratic():
    a = np.array([[2.0, 1.0], [1.0, 3.0]])
    theta = np.array([0.5, -1.0])
    grad = numeric_gradient(lambda t: float(t @ a @ t), theta)
    assert_allclose(grad, 2 * a @ theta, rtol=1e-8)
    assert_allclose(theta, [0.5, -1.0])


@pytest.mark.parametrize("mode", ["SM", "DM"])
def test_diamond_gradients_match_finite_differences(diamond, mode):
    nets = make_nets(diamond, seed=2)
    report = run_gradcheck(diamond.graph, nets, token_sum_task(diamond), [mode], draws=2, seed=3)
    assert report.passed, report.lines()
    assert {role for _, role in report.max_error} == {"pp", "cp", "tr"}


@pytest.mark.parametrize("seed", range(20))
def test_random_exnets_pass_gradcheck(seed):
    built = build_random_exnet(3 + seed % 5, reuse_prob=0.5, seed=seed, max_vertices=15)
    assert built.graph.n_vertices <= 15
    nets = make_nets(built, seed=seed)
    task = token_sum_task(built, seed=seed)
    example = task.draw(seed)
    for mode in xprop.Mode:
        report = check_trial(built.graph, nets, task.tokens(example), example.loss, mode, sm_seed=(seed, 1))
        assert report.passed, report.lines()


def test_corrupted_backward_is_detected(diamond, monkeypatch):
    original = xprop.backward

    def scaled(spec, params, x, upstream):
        grad, dx = original(spec, params, x, upstream)
        return 1.5 * grad, dx

    monkeypatch.setattr(xprop, "backward", scaled)
    nets = make_nets(diamond, seed=2)
    report = run_gradcheck(diamond.graph, nets, token_sum_task(diamond), ["DM"], draws=1)
    assert not report.passed
    assert report.worst is not None and report.worst.error > 0.1


def test_report_merge_and_lines():
    a = GradcheckReport(tolerance=1e-4)
    a.note("DM", "tr", Offender(("tr", "v4"), 0, 1.0, 1.0, 1e-9))
    b = GradcheckReport(tolerance=1e-4)
    b.note("SM", "cp", Offender(("cp", "a2"), 3, 2.0, 1.0, 0.5))
    a.merge(b)
    assert not a.passed
    assert a.worst_mode == "SM"
    lines = a.lines()
    assert lines[0].startswith("DM tr")
    assert "group=cp:a2" in lines[-1]
