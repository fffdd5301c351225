import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.builders import build_image_exnet, build_sequence_tree
from src.errors import ConfigError, DimensionError
from src.tasks import (
    Example,
    export_training_set,
    leaf_tokeniser,
    load_training_set,
    make_task,
    parity_label,
    partition_tokeniser,
    softmax_xent_loss,
    squared_loss,
    tokeniser_for,
)


def _numeric_grad(fn, y, h=1e-6):
    return np.array([(fn(y + h * e) - fn(y - h * e)) / (2 * h) for e in np.eye(y.size)])


# ---------- Tokenisers ----------
def test_partition_splits_instance_in_leaf_order():
    tok = partition_tokeniser(2, 3)
    assert_array_equal(tok(np.arange(6.0)), [[0, 1], [2, 3], [4, 5]])


def test_partition_pads_short_and_rejects_long_instances():
    tok = partition_tokeniser(2, 3)
    assert_array_equal(tok(np.array([1.0, 2.0, 3.0])), [[1, 2], [3, 0], [0, 0]])
    with pytest.raises(DimensionError):
        tok(np.zeros(7))
    with pytest.raises(ConfigError):
        partition_tokeniser(0, 3)


def test_leaf_tokeniser_routes_slots_and_zeroes_unbound_leaves():
    tok = leaf_tokeniser({10: 1, 11: None, 12: 0}, [10, 11, 12], 2, 2)
    assert_array_equal(tok(np.array([1.0, 2.0, 3.0, 4.0])), [[3, 4], [0, 0], [1, 2]])
    with pytest.raises(ConfigError):
        leaf_tokeniser({0: 5}, [0], 2, 2)


def test_tokeniser_for_image_uses_row_major_pixels():
    built = build_image_exnet(2, 0.5)
    tok = tokeniser_for(built, 1)
    tokens = tok(np.array([11.0, 12.0, 21.0, 22.0]))
    for row, leaf in zip(tokens, built.graph.leaves):
        i, j = built.leaf_binding[leaf]
        assert row[0] == 10 * i + j


# ---------- Losses ----------
def test_squared_loss_value_and_gradient(rng):
    loss = squared_loss([1.0, -2.0])
    assert loss(np.array([1.0, -2.0])) == 0.0
    assert loss(np.array([2.0, 0.0])) == 5.0
    y = rng.normal(size=2)
    assert_allclose(loss.grad(y), _numeric_grad(loss.value, y), atol=1e-7)
    with pytest.raises(DimensionError):
        loss(np.zeros(3))


def test_cross_entropy_of_equal_logits_is_ln2():
    loss = softmax_xent_loss(0, 2)
    assert loss(np.zeros(2)) == pytest.approx(math.log(2), abs=1e-15)
    assert_allclose(loss.grad(np.zeros(2)), [-0.5, 0.5])


def test_cross_entropy_is_stable_and_differentiable(rng):
    loss = softmax_xent_loss(2, 3)
    assert np.isfinite(loss(np.array([1000.0, -1000.0, 0.0])))
    assert loss(np.array([0.0, 0.0, 800.0])) == pytest.approx(0.0, abs=1e-12)
    y = rng.normal(size=3)
    assert_allclose(loss.grad(y), _numeric_grad(loss.value, y), atol=1e-7)
    assert loss.grad(y).sum() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_validation():
    with pytest.raises(ConfigError):
        softmax_xent_loss(2, 2)
    with pytest.raises(ConfigError):
        softmax_xent_loss(0, 1)


# ---------- Tasks ----------
def test_token_sum_target_is_the_sum_of_tokens():
    task = make_task("token_sum_regression", {"n": 4, "output_dim": 2}, seed=0, d_primary=3)
    ex = task.draw(5)
    tokens = task.tokens(ex)
    assert tokens.shape == (4, 3)
    assert np.all(np.abs(tokens) <= 1.0)
    assert_allclose(ex.target, tokens.sum(axis=0)[:2])
    assert ex.loss(tokens.sum(axis=0)[:2]) == 0.0
    assert task.output_dim == 2


def test_draws_are_pure_functions_of_the_seed():
    task = make_task("token_sum_regression", {"n": 3}, seed=0, d_primary=2)
    assert_array_equal(task.draw((1, 7)).instance, task.draw((1, 7)).instance)
    assert not np.array_equal(task.draw((1, 7)).instance, task.draw((1, 8)).instance)
    first = task.training_set(5, 3)
    assert [e.instance.tolist() for e in first] == [e.instance.tolist() for e in task.training_set(5, 3)]


@pytest.mark.parametrize(
    "bits,label", [([1, 1, 1], 1), ([-1, 1, 1], -1), ([-1, -1, 1], 1), ([-1, -1, -1], -1)]
)
def test_parity_label(bits, label):
    assert parity_label(bits) == label


def test_parity_tokens_carry_bit_and_position_tag():
    task = make_task("parity_classification", {"n": 4}, seed=0, d_primary=5)
    for s in range(10):
        ex = task.draw(s)
        tokens = task.tokens(ex)
        bits = tokens[:, 0]
        assert set(np.unique(bits)) <= {-1.0, 1.0}
        assert ex.target == (0 if parity_label(bits) > 0 else 1)
        for i in range(4):
            tag = np.zeros(4)
            tag[i] = 1.0
            assert_array_equal(tokens[i, 1:], tag)
    assert task.output_dim == 2
    with pytest.raises(ConfigError):
        make_task("parity_classification", {"n": 4}, seed=0, d_primary=1)


def test_parity_position_tags_never_repeat():
    n = 8
    with pytest.raises(ConfigError):
        make_task("parity_classification", {"n": n}, seed=0, d_primary=n)
    task = make_task("parity_classification", {"n": n}, seed=0, d_primary=n + 1)
    tokens = task.tokens(task.draw(0))
    positions = [int(np.argmax(row[1:])) for row in tokens]
    assert positions == list(range(n))


def test_memorize_k_draws_each_fixed_instance_uniformly():
    task = make_task("memorize_k", {"n": 2, "k": 4}, seed=3, d_primary=2)
    assert len(task.fixed) == 4
    assert task.training_set(100, 0) == task.fixed
    counts = np.zeros(4, dtype=int)
    for s in range(4000):
        ex = task.draw(s)
        counts[next(i for i, f in enumerate(task.fixed) if f is ex)] += 1
    assert np.all(np.abs(counts - 1000) < 150)


def test_memorize_k_fixed_set_depends_only_on_the_seed():
    a = make_task("memorize_k", {"n": 2, "k": 3}, seed=3, d_primary=2)
    b = make_task("memorize_k", {"n": 2, "k": 3}, seed=3, d_primary=2)
    c = make_task("memorize_k", {"n": 2, "k": 3}, seed=4, d_primary=2)
    assert all(np.array_equal(x.instance, y.instance) for x, y in zip(a.fixed, b.fixed))
    assert not np.array_equal(a.fixed[0].instance, c.fixed[0].instance)


def test_unknown_task_and_bad_parameters():
    with pytest.raises(ConfigError):
        make_task("sorting", {"n": 3}, seed=0, d_primary=2)
    with pytest.raises(ConfigError):
        make_task("token_sum_regression", {}, seed=0, d_primary=2)
    with pytest.raises(ConfigError):
        make_task("token_sum_regression", {"n": 2, "output_dim": 3}, seed=0, d_primary=2)


def test_task_with_tree_tokeniser():
    built = build_sequence_tree(3)
    task = make_task("token_sum_regression", {"n": 3}, seed=0, d_primary=2, tokeniser=tokeniser_for(built, 2))
    ex = task.draw(0)
    assert_array_equal(task.tokens(ex), ex.instance.reshape(3, 2))


# ---------- Training-set files ----------
def test_export_and_load_training_set(tmp_path):
    task = make_task("parity_classification", {"n": 3}, seed=0, d_primary=4)
    examples = task.training_set(4, 9) + [
        make_task("token_sum_regression", {"n": 3}, seed=0, d_primary=4).draw(1)
    ]
    path = export_training_set(examples, tmp_path / "sets" / "train.json", task.name)
    loaded = load_training_set(path)
    assert len(loaded) == 5
    for original, restored in zip(examples, loaded):
        assert_array_equal(restored.instance, original.instance)
        assert restored.loss_kind == original.loss_kind
        y = np.linspace(-1.0, 1.0, original.loss.dim)
        assert restored.loss(y) == original.loss(y)


def test_loading_a_broken_training_set_is_a_config_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_training_set(path)
    with pytest.raises(ConfigError):
        load_training_set(tmp_path / "missing.json")


def test_example_with_unknown_loss_kind():
    with pytest.raises(ConfigError):
        Example(np.zeros(2), "hinge", 0).loss
