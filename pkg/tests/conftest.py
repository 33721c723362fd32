import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def random_tree(X, cfg, rng, n_moves=6):
    """Grow a random valid tree by repeatedly applying accepted-style moves."""
    from gptrees import trees

    tree = trees.DecisionTree.stump(X.shape[0])
    for _ in range(n_moves):
        prop = trees.propose_move(tree, X, cfg, rng)
        if prop.valid:
            tree = prop.tree
    return tree
