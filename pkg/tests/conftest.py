import numpy as np
import pytest

from kama.model import KinematicTree, SkinnedModel
from kama.synthetic import make_synthetic_model

# filled by test_acceptance, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def model():
    return make_synthetic_model()


def build_chain_model():
    """Three joints in a row along +x, one keypoint per joint plus a tip.

    Vertices sit on the joints and on the tip, each fully weighted to one joint.
    """
    tree = KinematicTree(
        ("root", "mid", "end"), np.array([-1, 0, 1]),
        np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]]),
        ("k_root", "k_mid", "k_end", "k_tip"), np.array([-1, 0, 1, 2]),
        ((0, 0), (1, 1), (2, 2), (3, None)),
    )
    verts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0], [0.5, 0.2, 0]])
    faces = np.array([[0, 1, 4], [1, 2, 3]])
    weights = np.zeros((5, 3))
    weights[[0, 1, 2, 3, 4], [0, 1, 2, 2, 0]] = 1.0
    sdirs = np.zeros((5, 3, 10))
    sdirs[3, 0, 0] = 0.1
    sdirs[4, 1, 1] = 0.05
    W = np.zeros((4, 5))
    W[[0, 1, 2, 3], [0, 1, 2, 3]] = 1.0
    return SkinnedModel(tree, verts, faces, weights, sdirs, W, ("k_root", "k_mid", "k_end"))


@pytest.fixture
def chain_model():
    return build_chain_model()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
