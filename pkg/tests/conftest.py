import numpy as np
import pytest

from disrec.config import TrainConfig
from disrec.data import InteractionDataset
from disrec.graphs import build_graphs
from disrec.model import init_params

ACCEPTANCE_LINES: list[str] = []


def random_dataset(rng: np.random.Generator, n_users: int, n_items: int, n_groups: int,
                   min_group: int = 2, max_group: int = 4, density: float = 0.3,
                   social_density: float = 0.3) -> InteractionDataset:
    """Small random instance; every group has members and at least one item."""
    ui = [(u, j) for u in range(n_users) for j in range(n_items) if rng.random() < density]
    members, gi = [], []
    for t in range(n_groups):
        size = int(rng.integers(min_group, min(max_group, n_users) + 1))
        members.append(rng.choice(n_users, size=size, replace=False).tolist())
        items = rng.choice(n_items, size=int(rng.integers(1, min(3, n_items) + 1)), replace=False)
        gi += [(t, int(j)) for j in items]
    social = [(a, b) for a in range(n_users) for b in range(a + 1, n_users) if rng.random() < social_density]
    return InteractionDataset(n_users, n_items, n_groups, ui, gi, social, members)


def tiny_setup(seed: int = 0, n_users: int = 6, n_items: int = 8, n_groups: int = 3, d: int = 4,
               layers: int = 2, **config):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n_users, n_items, n_groups)
    cfg = TrainConfig(embedding_size=d, layers=layers, dropout=0.0, seed=seed, **config)
    graphs = build_graphs(ds)
    params = init_params(n_users, n_items, n_groups, cfg, rng)
    return ds, cfg, graphs, params


@pytest.fixture
def tiny():
    return tiny_setup()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
