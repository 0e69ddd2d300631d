"""Bundled four-vehicle formation benchmark.

Four point-mass vehicles on a ring of springs hold a 4 x 1.5 rectangle; the
state of each vehicle is (position - reference, velocity), so the origin is a
closed-loop equilibrium of the base-controlled fleet.  The fleet starts below
the reference rectangle with two elliptic obstacles sitting directly on the
straight-line approach paths, so the untrained loop pays a large obstacle
penalty that the learned cells remove by steering around them.  The cell
network adds its input on top of the base springs while the gain budgets keep
the loop certified.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import AgentDims, InterconnectionSpec, Topology, build_from_topology
from .plant import NoiseModel, VehicleFleet, VehicleParams
from .ren import ActivationKind
from .training import LossConfig, TrainingConfig

RING_EDGES = ((0, 1), (1, 2), (2, 3), (0, 3))
REST_LENGTHS = {(0, 1): 4.0, (1, 2): 1.5, (2, 3): 4.0, (0, 3): 1.5}
TARGETS = np.array([[-2.0, 0.75], [2.0, 0.75], [2.0, -0.75], [-2.0, -0.75]])

# formation starts 4 units below the references; obstacles block the direct
# vertical paths of both vehicle columns (x = -2 and x = +2)
START_OFFSET = np.array([0.0, -4.0])
DEFAULT_OBSTACLES = (
    (np.array([-2.0, -2.0]), np.diag([0.25, 1.0])),
    (np.array([2.0, -2.0]), np.diag([0.25, 1.0])),
)


@dataclass
class BenchmarkScenario:
    fleet: VehicleFleet
    spec: InterconnectionSpec
    loss_cfg: LossConfig
    train_cfg: TrainingConfig
    noise: NoiseModel
    gamma_R: float
    state_dim: int
    neuron_dim: int
    act: ActivationKind = ActivationKind.RELU


def benchmark_params() -> VehicleParams:
    return VehicleParams(
        masses=np.ones(4), frictions=np.ones(4), ts=0.05,
        spring_gains={e: 1.0 for e in RING_EDGES},
        ref_gains=np.ones(4),
        rest_lengths=dict(REST_LENGTHS),
        targets=TARGETS.copy())


def benchmark_fleet() -> VehicleFleet:
    topo = Topology(4, RING_EDGES)
    return VehicleFleet(benchmark_params(), topo)


def benchmark_spec() -> InterconnectionSpec:
    topo = Topology(4, RING_EDGES)
    dims = [AgentDims(n=4, m=2, q=8, r=2) for _ in range(4)]
    return build_from_topology(topo, dims)


def benchmark_loss_config(with_obstacles: bool = True) -> LossConfig:
    # quadratic weight: full on the 16 plant states, 0.01 on the 8 inputs
    Q = np.diag(np.concatenate([np.ones(16), 0.01 * np.ones(8)]))
    obstacles = DEFAULT_OBSTACLES if with_obstacles else ()
    return LossConfig(
        Q=Q,
        collision_weight=1.0, collision_distance=0.5,
        obstacle_weight=150.0 if with_obstacles else 0.0, obstacles=obstacles,
        formation_weight=0.0,
        formation_targets=tuple((i, j, REST_LENGTHS[(i, j)])
                                for i, j in RING_EDGES))


def benchmark_noise(std: float = 0.1) -> NoiseModel:
    """Initial state = formation shifted by START_OFFSET plus jitter."""
    mean = np.zeros(16)
    for i in range(4):
        mean[4 * i:4 * i + 2] = START_OFFSET
    return NoiseModel(mean=mean, std=std)


def benchmark_scenario(epochs: int = 100, horizon: int = 100, n_exp: int = 10,
                       learning_rate: float = 1e-3, seed: int = 0,
                       state_dim: int = 25, neuron_dim: int = 25,
                       gamma_R: float = 3.0, with_obstacles: bool = True,
                       act: ActivationKind = ActivationKind.RELU,
                       **train_kwargs) -> BenchmarkScenario:
    return BenchmarkScenario(
        fleet=benchmark_fleet(),
        spec=benchmark_spec(),
        loss_cfg=benchmark_loss_config(with_obstacles),
        train_cfg=TrainingConfig(
            learning_rate=learning_rate, epochs=epochs, n_exp=n_exp,
            horizon=horizon, seed=seed, **train_kwargs),
        noise=benchmark_noise(),
        gamma_R=gamma_R, state_dim=state_dim, neuron_dim=neuron_dim,
        act=act)
