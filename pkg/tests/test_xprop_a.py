import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from config.settings import AEON_COLUMNS
from helpers import make_nets, token_sum_task
from src.builders import build_sequence_tree
from src.errors import ConfigError, ConsistencyError
from src.gradcheck import numeric_gradient
from src.neural import SGD, Adam, LrSchedule, init_params
from src.tasks import make_task, tokeniser_for
from src.utils import seed_sequence, stable_hash
from src.xprop import up_pass
from src.xprop_a import (
    AeonSettings,
    EpochPlan,
    TrainingSet,
    aeon_schedule,
    check_consistency,
    epoch_gradients,
    epoch_keys,
    finalize_epoch,
    init_tables,
    load_tables,
    run_aeons,
    run_epoch,
    save_tables,
)


def _memorize(built, k=8, d=3):
    task = make_task("memorize_k", {"n": built.n_slots, "k": k, "output_dim": 2}, 1, d, tokeniser_for(built, d))
    return task, TrainingSet.build(task.fixed, task.tokeniser)


def _join(g):
    return next(v for v in g.internal_vertices if len(g.parents_of(v)) > 1)


# ---------- Schedule and tables ----------
def test_schedule_visits_children_first(diamond):
    g = diamond.graph
    schedule = aeon_schedule(g)
    assert sorted(schedule) == list(g.internal_vertices)
    position = {v: i for i, v in enumerate(schedule)}
    for v in schedule:
        for c in g.child_vertices(v):
            if not g.is_leaf(c):
                assert position[c] < position[v]
    assert schedule[-1] == g.root


def test_initial_tables_match_the_passes(diamond):
    nets = make_nets(diamond)
    _, ts = _memorize(diamond, k=3)
    tables = init_tables(diamond.graph, nets, ts)
    assert tables.alpha(diamond.graph.root).shape == (3, 3)
    assert set(tables.b) == set(diamond.graph.internal_vertices)
    assert check_consistency(diamond.graph, nets, tables, ts).passed
    assert_array_equal(tables.beta(diamond.graph.root), 0.0)


def test_training_set_must_not_be_empty():
    with pytest.raises(ConfigError):
        TrainingSet.build([], lambda x: x)


# ---------- Epochs ----------
def test_zero_trial_epoch_only_resets(diamond):
    nets = make_nets(diamond)
    _, ts = _memorize(diamond)
    g = diamond.graph
    tables = init_tables(g, nets, ts)
    v = _join(g)
    plan = EpochPlan(v, trials=0, reset_seed=11)
    before = nets.copy()
    assert run_epoch(plan, g, nets, tables, ts, SGD(0.1)) == []
    keys = set(epoch_keys(g, nets, v))
    for key, value in nets.params.items():
        if key in keys:
            fresh = init_params(nets.specs[key[0]], seed_sequence(11, stable_hash(f"{key[0]}:{key[1]}")))
            assert_array_equal(value, fresh)
        else:
            assert_array_equal(value, before.params[key])


def test_epoch_touches_only_the_vertex_blocks(diamond):
    nets = make_nets(diamond)
    _, ts = _memorize(diamond)
    g = diamond.graph
    tables = init_tables(g, nets, ts)
    v = _join(g)
    before = nets.copy()
    norms = run_epoch(EpochPlan(v, trials=5, reset_seed=3), g, nets, tables, ts, Adam(0.01))
    assert len(norms) == 5 and all(n > 0 for n in norms)
    keys = set(epoch_keys(g, nets, v))
    assert len(keys) == 4
    for key, value in nets.params.items():
        if key not in keys:
            assert_array_equal(value, before.params[key])


def test_epochs_reject_leaves(diamond):
    nets = make_nets(diamond)
    _, ts = _memorize(diamond)
    tables = init_tables(diamond.graph, nets, ts)
    with pytest.raises(ConfigError):
        run_epoch(EpochPlan(diamond.graph.leaves[0], 1, 0), diamond.graph, nets, tables, ts, SGD(0.1))


def test_epoch_gradients_match_finite_differences(diamond):
    nets = make_nets(diamond, seed=5)
    _, ts = _memorize(diamond, k=2)
    g = diamond.graph
    tables = init_tables(g, nets, ts)
    v = _join(g)
    example = ts.examples[1]
    grads, _ = epoch_gradients(g, nets, tables, v, 1, example)
    assert set(grads) == set(epoch_keys(g, nets, v))

    for key, analytic in grads.items():
        def scalar(theta, key=key):
            saved = nets.params[key].copy()
            nets.params[key][:] = theta
            try:
                return epoch_gradients(g, nets, tables, v, 1, example)[1]
            finally:
                nets.params[key][:] = saved

        numeric = numeric_gradient(scalar, nets.params[key])
        assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8, err_msg=str(key))


def test_finalize_rewrites_only_the_vertex_rows(diamond):
    nets = make_nets(diamond)
    _, ts = _memorize(diamond, k=4)
    g = diamond.graph
    tables = init_tables(g, nets, ts)
    v = _join(g)
    nets.reset(epoch_keys(g, nets, v), seed=123)
    snapshot = {u: tables.alpha(u).copy() for u in g.vertices}
    finalize_epoch(v, g, nets, tables)
    assert not np.array_equal(tables.alpha(v), snapshot[v])
    for u in g.vertices:
        if u != v:
            assert_array_equal(tables.alpha(u), snapshot[u])
    for i, tokens in enumerate(ts.tokens):
        primary, _ = up_pass(g, nets, tokens)
        assert_array_equal(tables.alpha(v)[i], primary[v])


def test_stale_tables_are_reported(diamond):
    nets = make_nets(diamond)
    _, ts = _memorize(diamond, k=3)
    g = diamond.graph
    tables = init_tables(g, nets, ts)
    v = _join(g)
    tables.a[v][2] += 1e-3
    report = check_consistency(g, nets, tables, ts)
    assert not report.passed
    assert (report.vertex, report.instance) == (v, 2)
    assert report.max_abs_diff == pytest.approx(1e-3)
    assert report.line(1).startswith("aeon 1: FAIL")


# ---------- Aeons ----------
@pytest.mark.parametrize("builder", ["tree", "diamond"])
def test_aeons_keep_tables_consistent(builder, diamond):
    built = diamond if builder == "diamond" else build_sequence_tree(4, share_by_depth=False)
    nets = make_nets(built, seed=1)
    task, ts = _memorize(built, k=8)
    settings = AeonSettings(aeons=2, epoch_trials=20, seed=4, heldout_draws=4)
    tables, history = run_aeons(built.graph, nets, ts, settings, Adam(0.01), task=task)
    assert history.consistent
    assert [r.line(k) for k, r in enumerate(history.reports, start=1)] == ["aeon 1: pass", "aeon 2: pass"]
    assert len(history.rows) == 3
    assert [row["aeon"] for row in history.rows] == [0, 1, 2]
    assert history.rows[-1]["trial"] == 2 * 20 * len(aeon_schedule(built.graph))
    assert all(list(row) == AEON_COLUMNS for row in history.rows)
    assert check_consistency(built.graph, nets, tables, ts).passed


def test_epochs_grow_from_aeon_to_aeon(tree4):
    settings = AeonSettings(aeons=3, epoch_trials=5, epoch_growth=2.0)
    assert [settings.epoch_length(k) for k in (1, 2, 3)] == [5, 10, 20]
    nets = make_nets(tree4)
    _, ts = _memorize(tree4, k=3)
    _, history = run_aeons(tree4.graph, nets, ts, settings, SGD(0.05))
    per_aeon = len(aeon_schedule(tree4.graph))
    assert [row["trial"] for row in history.rows] == [0, 5 * per_aeon, 15 * per_aeon, 35 * per_aeon]
    assert history.consistent


def test_epoch_schedule_anneals_and_restores_the_rate(diamond):
    g = diamond.graph
    v = _join(g)
    _, ts = _memorize(diamond, k=3)
    plain, annealed = make_nets(diamond), make_nets(diamond)
    plan = EpochPlan(v, trials=1, reset_seed=4)
    opt = SGD(0.1)
    run_epoch(plan, g, plain, init_tables(g, plain, ts), ts, SGD(0.1))
    run_epoch(plan, g, annealed, init_tables(g, annealed, ts), ts, opt, LrSchedule("cosine"))
    assert opt.lr == 0.1
    # a one-trial epoch runs at the base rate
    for key in plain.params:
        assert_array_equal(annealed.params[key], plain.params[key])

    opt = SGD(0.1)
    frozen = make_nets(diamond)
    tables = init_tables(g, frozen, ts)
    run_epoch(EpochPlan(v, trials=2, reset_seed=4), g, frozen, tables, ts, opt, LrSchedule("cosine", lr_min=0.0))
    once = make_nets(diamond)
    run_epoch(plan, g, once, init_tables(g, once, ts), ts, SGD(0.1))
    # the second step runs at lr_min = 0
    for key in once.params:
        assert_array_equal(frozen.params[key], once.params[key])


def test_zero_trial_aeons_stay_consistent(tree4):
    nets = make_nets(tree4)
    task, ts = _memorize(tree4, k=3)
    _, history = run_aeons(tree4.graph, nets, ts, AeonSettings(aeons=1, epoch_trials=0), SGD(0.1))
    assert history.consistent
    assert np.isnan(history.rows[0]["heldout_loss"])


def test_skipped_finalize_raises_in_strict_mode(tree4, monkeypatch):
    monkeypatch.setattr("src.xprop_a.finalize_epoch", lambda *args: None)
    nets = make_nets(tree4)
    _, ts = _memorize(tree4, k=3)
    with pytest.raises(ConsistencyError):
        run_aeons(tree4.graph, nets, ts, AeonSettings(aeons=1, epoch_trials=2), SGD(0.1))

    nets = make_nets(tree4)
    _, history = run_aeons(tree4.graph, nets, ts, AeonSettings(aeons=1, epoch_trials=2, strict=False), SGD(0.1))
    assert not history.consistent
    assert history.rows[-1]["consistent"] == 0


def test_aeons_are_deterministic(tree4):
    results = []
    for _ in range(2):
        nets = make_nets(tree4, seed=2)
        task, ts = _memorize(tree4, k=4)
        tables, history = run_aeons(tree4.graph, nets, ts, AeonSettings(aeons=1, epoch_trials=10, seed=9), Adam(0.01))
        results.append((tables, history, nets))
    (t0, h0, n0), (t1, h1, n1) = results
    assert [r["loss"] for r in h0.rows] == [r["loss"] for r in h1.rows]
    for v in t0.a:
        assert_array_equal(t0.a[v], t1.a[v])
    for key in n0.params:
        assert_array_equal(n0.params[key], n1.params[key])


def test_shared_parameters_are_rejected():
    built = build_sequence_tree(8, share_by_depth=True)
    nets = make_nets(built)
    task, ts = _memorize(built, k=2)
    with pytest.raises(ConfigError):
        run_aeons(built.graph, nets, ts, AeonSettings(aeons=1, epoch_trials=1), SGD(0.1))


def test_tables_roundtrip(tmp_path, diamond):
    nets = make_nets(diamond)
    _, ts = _memorize(diamond, k=3)
    tables = init_tables(diamond.graph, nets, ts)
    loaded = load_tables(save_tables(tables, tmp_path / "out" / "tables.npz"))
    assert set(loaded.a) == set(tables.a) and set(loaded.b) == set(tables.b)
    for v in tables.a:
        assert_array_equal(loaded.a[v], tables.a[v])
    for v in tables.b:
        assert_array_equal(loaded.b[v], tables.b[v])


@pytest.mark.slow
def test_aeons_reduce_training_loss():
    built = build_sequence_tree(4, share_by_depth=False)
    nets = make_nets(built, seed=0, hidden=(16,))
    task, ts = _memorize(built, k=8)
    _, history = run_aeons(built.graph, nets, ts, AeonSettings(aeons=3, epoch_trials=300), Adam(0.01), task=task)
    assert history.consistent
    assert history.rows[-1]["loss"] < history.rows[0]["loss"]


def test_token_sum_training_set_from_draws(tree4):
    task = token_sum_task(tree4)
    ts = TrainingSet.build(task.training_set(5, 2), task.tokeniser)
    assert len(ts) == 5
    assert ts.tokens[0].shape == (4, 3)
