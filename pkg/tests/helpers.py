"""Builders of small networks and tasks shared by the test modules."""

from src.neural import NetworkBundle, role_specs
from src.tasks import make_task, tokeniser_for

DIAMOND = {"r": ["a", "b"], "a": ["x", "v"], "b": ["v", "w"], "v": ["p", "q"]}


def small_specs(d=3, output_dim=2, hidden=(4,), extraction_activation="tanh"):
    return role_specs(d, d, output_dim, hidden=hidden, extraction_activation=extraction_activation)


def make_nets(built, seed=0, **kwargs):
    return NetworkBundle.create(built.graph, built.sharing, small_specs(**kwargs), seed)


def token_sum_task(built, d=3, output_dim=2, seed=1):
    return make_task(
        "token_sum_regression",
        {"n": built.n_slots, "output_dim": output_dim},
        seed,
        d,
        tokeniser_for(built, d),
    )
