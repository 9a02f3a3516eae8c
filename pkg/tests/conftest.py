import numpy as np
import pytest

from siger.dataset import SyntheticSpec, generate_synthetic, split_general
from siger.graphs import GraphConfig, build_graphs
from siger.model import SIGER, GraphTensors, ModelHyper, feature_tensors
from siger.trainer import PreparedData

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_line():
    """Record one acceptance summary line, printed at the end of the run."""
    def record(line: str) -> None:
        print(line)
        _ACCEPTANCE_LINES.append(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_pairs(rng, n_users, n_items, density=0.2, min_per_user=1):
    mask = rng.random((n_users, n_items)) < density
    for u in range(n_users):
        if mask[u].sum() < min_per_user:
            mask[u, rng.choice(n_items, size=min_per_user, replace=False)] = True
    return np.argwhere(mask).astype(np.int64)


def tiny_instance(seed=0, n_users=6, n_items=8, dim=8, feat_dims=(5, 4), hyper=None, density=0.35):
    """A small model plus its graphs and features."""
    rng = np.random.default_rng(seed)
    pairs = random_pairs(rng, n_users, n_items, density, min_per_user=2)
    feats = {"v": rng.standard_normal((n_items, feat_dims[0])), "t": rng.standard_normal((n_items, feat_dims[1]))}
    graphs = build_graphs(pairs, n_users, n_items, feats, GraphConfig(kc=3, km=4, beta=0.3))
    hyper = hyper or ModelHyper(dim=dim, layers_ui=2, layers_ii=2, epsilon=0.05)
    model = SIGER(n_users, n_items, {m: f.shape[1] for m, f in feats.items()}, hyper, seed=seed)
    return model, GraphTensors.from_graphs(graphs), feature_tensors(feats), pairs


@pytest.fixture(scope="session")
def synthetic():
    table, vis, txt = generate_synthetic(SyntheticSpec())
    return table, vis, txt


@pytest.fixture(scope="session")
def prepared(synthetic):
    table, vis, txt = synthetic
    return PreparedData(split_general(table, seed=0), {"v": vis, "t": txt})
