"""Shared fixtures: the canonical graph, small datasets, a tiny trained model.

Session-scoped so the expensive pieces (simulation, a short training run)
are paid once. Unit tests use deliberately small widths/horizons; the
full-scale pipeline is exercised by the acceptance suite.
"""

import numpy as np
import pytest

from gnnode import canonical_graph
from gnnode.config import substream
from gnnode.model import ModelHyper
from gnnode.simulator import PhysicsConfig, SweepConfig, run_sweep
from gnnode.training import RunArrays, TrainConfig, pretrain


@pytest.fixture(scope="session")
def graph():
    return canonical_graph()


@pytest.fixture(scope="session")
def physics():
    return PhysicsConfig()


@pytest.fixture(scope="session")
def small_trajs(graph, physics):
    """8 training + 2 held-out short runs on the reference physics."""
    train = run_sweep(graph, physics,
                      SweepConfig(n_designs=6, n_edge_cases=2,
                                  horizon_s=62.0),
                      substream(1234, "data", "train"))
    val = run_sweep(graph, physics,
                    SweepConfig(n_designs=2, n_edge_cases=0,
                                horizon_s=62.0, nonuniform_every=0),
                    substream(1234, "data", "val"))
    return train, val


@pytest.fixture(scope="session")
def small_runs(small_trajs, graph):
    train, val = small_trajs
    return ([RunArrays.from_trajectory(t, graph) for t in train],
            [RunArrays.from_trajectory(t, graph) for t in val])


@pytest.fixture(scope="session")
def tiny_model(graph, small_runs):
    """A quickly trained small surrogate plus its stats and imputer."""
    train, val = small_runs
    hyper = ModelHyper(hidden=12, layers=2, substeps=2)
    cfg = TrainConfig(epochs=8, batches_per_epoch=6, k_start=1, k_max=4,
                      warmup_epochs=2, k_double_every=3, val_every=100,
                      micro_batch=4)
    params, stats, tgmi, history = pretrain(
        graph, train, val, hyper, cfg, substream(1234, "pretrain"))
    return {"params": params, "stats": stats, "tgmi": tgmi,
            "history": history}


@pytest.fixture()
def rng():
    return np.random.default_rng(98765)
