import numpy as np
import pytest
import torch

from ndp4nd.graph import Topology, TopologySpec, generate_topology
from ndp4nd.model import ModelConfig, graph_tensors, snapshot_tensors, task_tensors
from ndp4nd.taskgen import (
    ScenarioSpec,
    sample_observations,
    sample_task,
    scenario_preset,
    split_context_target,
)


def empty_topology(n: int) -> Topology:
    return Topology(n=n, adjacency=np.zeros((n, n)), directed=False, kind="random")


def tiny_model_config(state_dim: int = 1, **overrides) -> ModelConfig:
    """A model small enough for finite-difference sweeps over every weight."""
    base = dict(state_dim=state_dim, dim_l=3, dim_z=2, dim_r=2, hidden=4,
                time_dim=2, gat_heads=2, gat_head_dim=2, gat_layers=2,
                t_scale=5.0, latent_step=1.0)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def micro_spec() -> ScenarioSpec:
    """3-node mutualistic scenario with a short horizon."""
    return scenario_preset(
        "mutualistic", node_range=(3, 3), t_observe=5.0, t_max=10.0,
        topology_kinds=("random",), topology_params={"edge_prob": 0.7})


@pytest.fixture(scope="session")
def micro_task(micro_spec):
    return sample_task(micro_spec, seed=42, task_id=0)


@pytest.fixture(scope="session")
def micro_bundle(micro_spec, micro_task):
    """Task tensors for a 3-node task with a 2-snapshot context."""
    obs = sample_observations(micro_task, count=8, noise_sigma=0.0, seed=3)
    context, target = split_context_target(obs, 0.6, seed=4)
    return task_tensors(micro_task, context, target)
