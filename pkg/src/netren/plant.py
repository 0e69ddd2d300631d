"""Plant models and closed-loop simulation of the networked cell controller.

State convention for the vehicle benchmark: each agent carries
``x = (p - p_target, velocity)`` in R^4, so the origin of the stacked state is
the target formation at rest and the subsystem maps satisfy ``f(0, 0) = 0``.
Process noise enters additively with ``w_0 = x_0`` (the initial condition is
the first disturbance sample).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .network import GainAllocation, InterconnectionSpec, Topology
from .ren import ActivationKind, RenDims, build_ren, ren_step

DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    """Closed-loop state left the numeric trust region."""

    def __init__(self, t, norm, epoch=None, sample=None):
        self.t, self.norm, self.epoch, self.sample = t, norm, epoch, sample
        where = f"t={t}"
        if epoch is not None:
            where += f", epoch={epoch}"
        if sample is not None:
            where += f", sample={sample}"
        super().__init__(f"state norm {norm:.3e} exceeded {DIVERGENCE_LIMIT:.0e} ({where})")


@dataclass(frozen=True)
class VehicleParams:
    """Point-mass fleet: masses/frictions per agent, springs per edge.

    ``rest_lengths`` maps an undirected edge (i, j), i < j, to the formation
    distance the spring on that edge maintains; ``targets`` are the absolute
    reference positions the proportional term pulls toward.
    """

    masses: np.ndarray
    frictions: np.ndarray
    ts: float
    spring_gains: dict
    ref_gains: np.ndarray
    rest_lengths: dict
    targets: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "masses", np.asarray(self.masses, dtype=float))
        object.__setattr__(self, "frictions", np.asarray(self.frictions, dtype=float))
        object.__setattr__(self, "ref_gains", np.asarray(self.ref_gains, dtype=float))
        object.__setattr__(self, "targets", np.asarray(self.targets, dtype=float))
        if self.ts <= 0 or np.any(self.masses <= 0) or np.any(self.frictions <= 0):
            raise ValueError("masses, frictions and sampling time must be positive")

    def spring(self, i: int, j: int):
        key = (min(i, j), max(i, j))
        return self.spring_gains[key], self.rest_lengths[key]


def vehicle_step(params: VehicleParams, p, v, F, u, agent: int = 0):
    """One Euler step of a single point mass under quadratic drag."""
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    drag = -params.frictions[agent] * np.linalg.norm(v) * v
    p_next = p + params.ts * v
    v_next = v + params.ts / params.masses[agent] * (drag + np.asarray(F) + np.asarray(u))
    return p_next, v_next


def base_controller_force(params: VehicleParams, topo: Topology, agent: int,
                          positions: np.ndarray) -> np.ndarray:
    """Spring-to-neighbors plus proportional pull to the reference point.

    Spring forces act along the inter-agent unit direction; coincident agents
    (distance below 1e-9) contribute no spring direction.
    """
    p_i = positions[agent]
    force = -params.ref_gains[agent] * (p_i - params.targets[agent])
    for j in topo.neighbors(agent):
        if j == agent:
            continue
        k, delta = params.spring(agent, j)
        diff = p_i - positions[j]
        dist = float(np.linalg.norm(diff))
        if dist < 1e-9:
            continue
        force = force - k * (dist - delta) * diff / dist
    return force


class VehicleFleet:
    """Strictly causal subsystem dynamics of the spring-coupled fleet."""

    def __init__(self, params: VehicleParams, topo: Topology):
        self.params = params
        self.topology = topo
        self.n_agents = topo.n_agents
        self.state_dims = tuple(4 for _ in range(self.n_agents))
        self.input_dims = tuple(2 for _ in range(self.n_agents))
        self.n = 4 * self.n_agents
        self.m = 2 * self.n_agents

    def x_slice(self, i):
        return slice(4 * i, 4 * i + 4)

    def u_slice(self, i):
        return slice(2 * i, 2 * i + 2)

    def positions(self, x: np.ndarray) -> np.ndarray:
        """Absolute positions from the shifted state."""
        dp = x.reshape(self.n_agents, 4)[:, :2]
        return dp + self.params.targets

    def f_agent(self, i: int, x_neigh: np.ndarray, u_i: np.ndarray) -> np.ndarray:
        """Next state of agent i from the stacked neighbor states (sorted,
        including i) and its own input; no noise term."""
        neigh = self.topology.neighbors(i)
        states = x_neigh.reshape(len(neigh), 4)
        positions = {j: states[a, :2] + self.params.targets[j]
                     for a, j in enumerate(neigh)}
        own = states[neigh.index(i)]
        p, v = positions[i], own[2:]
        pos_table = np.array([positions.get(j, self.params.targets[j])
                              for j in range(self.n_agents)])
        F = base_controller_force(self.params, self.topology, i, pos_table)
        p_next, v_next = vehicle_step(self.params, p, v, F, u_i, agent=i)
        return np.concatenate([p_next - self.params.targets[i], v_next])

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Global noise-free update f(x, u)."""
        out = np.empty(self.n)
        for i in range(self.n_agents):
            neigh = self.topology.neighbors(i)
            x_neigh = np.concatenate([x[self.x_slice(j)] for j in neigh])
            out[self.x_slice(i)] = self.f_agent(i, x_neigh, u[self.u_slice(i)])
        return out


@dataclass(frozen=True)
class NoiseModel:
    """Sampler for l2 disturbance sequences: random initial state, optional
    short window of in-run noise."""

    mean: np.ndarray
    std: float
    window: int = 0
    window_std: float = 0.0

    def sample(self, rng: np.random.Generator, horizon: int) -> np.ndarray:
        n = len(self.mean)
        w = np.zeros((horizon + 1, n))
        w[0] = self.mean + self.std * rng.standard_normal(n)
        if self.window > 0:
            w[1:1 + self.window] = self.window_std * rng.standard_normal(
                (min(self.window, horizon), n))
        return w


@dataclass(frozen=True)
class ControllerNetwork:
    """Networked cells realized with certified gain budgets."""

    spec: InterconnectionSpec
    alloc: GainAllocation
    cells: tuple          # one RenMatrices per agent
    act: ActivationKind

    @classmethod
    def from_matrices(cls, spec, alloc, cells, act=ActivationKind.TANH):
        cells = tuple(cells)
        for i, (cell, d) in enumerate(zip(cells, spec.agent_dims)):
            if cell.dims.q != d.q or cell.dims.r != d.r:
                raise ValueError(f"cell {i} dims {cell.dims} do not match "
                                 f"spec partition {d}")
        return cls(spec=spec, alloc=alloc, cells=cells, act=act)

    @classmethod
    def from_thetas(cls, spec, alloc, thetas, state_dim, neuron_dim,
                    act=ActivationKind.TANH):
        cells = []
        for i, d in enumerate(spec.agent_dims):
            dims = RenDims(c=state_dim, s=neuron_dim, q=d.q, r=d.r)
            cells.append(build_ren(thetas[i], alloc.gamma[i], dims))
        return cls.from_matrices(spec, alloc, cells, act=act)

    @property
    def state_dims(self):
        return tuple(cell.dims.c for cell in self.cells)


@dataclass
class RolloutRecord:
    """Time-indexed closed-loop signals, t = 0..T."""

    x: np.ndarray         # (T+1, n)
    u: np.ndarray         # (T+1, m)
    w: np.ndarray         # (T+1, n)
    what: np.ndarray      # (T+1, n)
    v: np.ndarray         # (T+1, q)
    z: np.ndarray         # (T+1, r)
    xi: np.ndarray        # (T+1, sum of cell state dims)

    @property
    def horizon(self) -> int:
        return self.x.shape[0] - 1

    def energies(self, split: int | None = None):
        """(head, tail) state energy around the split index (default T/2)."""
        if split is None:
            split = self.horizon // 2
        sq = np.sum(self.x ** 2, axis=1)
        return float(sq[:split + 1].sum()), float(sq[split + 1:].sum())


def reconstruct_noise(plant, x_t: np.ndarray, x_prev: np.ndarray,
                      u_prev: np.ndarray) -> np.ndarray:
    """Per-agent disturbance reconstruction w_hat_t = x_t - f(x_{t-1}, u_{t-1}).

    Exact recovery of the injected noise when x was generated by the plant.
    """
    what = np.empty(plant.n)
    for i in range(plant.n_agents):
        neigh = plant.topology.neighbors(i)
        x_neigh = np.concatenate([x_prev[plant.x_slice(j)] for j in neigh])
        pred = plant.f_agent(i, x_neigh, u_prev[plant.u_slice(i)])
        what[plant.x_slice(i)] = x_t[plant.x_slice(i)] - pred
    return what


def closed_loop_rollout(plant, controller: ControllerNetwork,
                        noise: np.ndarray, horizon: int | None = None,
                        check_divergence: bool = True) -> RolloutRecord:
    """Simulate plant + networked cells driven by a disturbance sequence.

    ``noise`` is (T+1, n) with ``noise[0]`` the initial state.  Schedule per
    step: advance the plant, reconstruct the disturbance, form cell inputs
    from the *previous* outputs of the neighbors (one-sample communication
    delay, z_{-1} = 0), step each cell, apply u = M_uz z.
    """
    spec = controller.spec
    noise = np.asarray(noise, dtype=float)
    T = noise.shape[0] - 1 if horizon is None else horizon
    if T < 1:
        raise ValueError("horizon must be >= 1")
    if noise.shape != (T + 1, plant.n):
        raise ValueError(f"noise must be ({T + 1}, {plant.n})")

    xi_dims = controller.state_dims
    xi_off = np.concatenate([[0], np.cumsum(xi_dims)])
    rec = RolloutRecord(
        x=np.zeros((T + 1, plant.n)), u=np.zeros((T + 1, plant.m)),
        w=noise.copy(), what=np.zeros((T + 1, plant.n)),
        v=np.zeros((T + 1, spec.q)), z=np.zeros((T + 1, spec.r)),
        xi=np.zeros((T + 1, int(xi_off[-1]))))

    xi = [np.zeros(c) for c in xi_dims]
    z_prev = np.zeros(spec.r)
    for t in range(T + 1):
        if t == 0:
            x_t = noise[0].copy()
            what_t = x_t.copy()
        else:
            x_t = plant.step(rec.x[t - 1], rec.u[t - 1]) + noise[t]
            what_t = reconstruct_noise(plant, x_t, rec.x[t - 1], rec.u[t - 1])
        if check_divergence and np.abs(x_t).max() > DIVERGENCE_LIMIT:
            raise DivergenceError(t, float(np.abs(x_t).max()))
        v_t = spec.M_vz @ z_prev + spec.M_vw @ what_t
        z_t = np.empty(spec.r)
        for i, cell in enumerate(controller.cells):
            xi[i], z_t[spec.z_slice(i)] = ren_step(
                cell, xi[i], v_t[spec.v_slice(i)], controller.act)
        u_t = spec.M_uz @ z_t
        rec.x[t], rec.u[t], rec.what[t], rec.v[t], rec.z[t] = \
            x_t, u_t, what_t, v_t, z_t
        rec.xi[t] = np.concatenate(xi)
        z_prev = z_t
    return rec


# ----------------------------------- export ----------------------------------

def _column_names(n_agents, state_dims, input_dims):
    cols = []
    for i in range(n_agents):
        if state_dims[i] == 4:
            cols += [f"x[{i}].p.x", f"x[{i}].p.y", f"x[{i}].v.x", f"x[{i}].v.y"]
        else:
            cols += [f"x[{i}].{k}" for k in range(state_dims[i])]
    for i in range(n_agents):
        if input_dims[i] == 2:
            cols += [f"u[{i}].x", f"u[{i}].y"]
        else:
            cols += [f"u[{i}].{k}" for k in range(input_dims[i])]
    for i in range(n_agents):
        if state_dims[i] == 4:
            cols += [f"what[{i}].p.x", f"what[{i}].p.y",
                     f"what[{i}].v.x", f"what[{i}].v.y"]
        else:
            cols += [f"what[{i}].{k}" for k in range(state_dims[i])]
    return cols


def rollout_to_csv(record: RolloutRecord, plant) -> str:
    """CSV with one row per time step, 17 significant digits."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t"] + _column_names(
        plant.n_agents, plant.state_dims, plant.input_dims))
    for t in range(record.horizon + 1):
        row = [str(t)]
        row += [f"{val:.17g}" for val in record.x[t]]
        row += [f"{val:.17g}" for val in record.u[t]]
        row += [f"{val:.17g}" for val in record.what[t]]
        writer.writerow(row)
    return buf.getvalue()


def rollout_from_csv(text: str, plant) -> dict:
    """Parse columns back into (T+1, .) arrays keyed x, u, what."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    rows = [list(map(float, row[1:])) for row in reader]
    data = np.asarray(rows)
    n, m = plant.n, plant.m
    if data.shape[1] != 2 * n + m:
        raise ValueError("column count does not match the plant")
    return {"header": header,
            "x": data[:, :n], "u": data[:, n:n + m], "what": data[:, n + m:]}


def rollout_summary(record: RolloutRecord, plant) -> dict:
    """Head/tail energy, max speed and min inter-agent distance."""
    head, tail = record.energies()
    speeds = np.linalg.norm(
        record.x.reshape(record.x.shape[0], plant.n_agents, 4)[:, :, 2:],
        axis=2)
    min_dist = math.inf
    for t in range(record.horizon + 1):
        pos = plant.positions(record.x[t])
        for i in range(plant.n_agents):
            for j in range(i + 1, plant.n_agents):
                min_dist = min(min_dist, float(np.linalg.norm(pos[i] - pos[j])))
    return {
        "horizon": record.horizon,
        "head_energy": head,
        "tail_energy": tail,
        "max_speed": float(speeds.max()),
        "min_inter_agent_distance": min_dist,
    }
