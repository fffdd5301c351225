import numpy as np
import pytest

from helpers import DIAMOND
from src.builders import build_from_dag, build_sequence_tree


@pytest.fixture
def diamond():
    """r -> (a, b); a -> (x, v); b -> (v, w); v -> (p, q): v has two parents."""
    return build_from_dag(DIAMOND, root="r")


@pytest.fixture
def tree3():
    return build_sequence_tree(2, share_by_depth=False)


@pytest.fixture
def tree4():
    return build_sequence_tree(4, share_by_depth=False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
