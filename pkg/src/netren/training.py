"""Losses, reverse-mode gradients through the unrolled closed loop, training.

The forward pass is re-expressed in torch (float64) so the chain

    (theta_i, b_i) -> gain budgets -> cell matrices -> closed-loop rollout
                   -> empirical loss

is differentiated exactly by reverse accumulation.  The numpy simulation in
:mod:`netren.plant` stays the independent reference: tests compare the two
forwards and check gradients against central finite differences of the numpy
path.

Since the reconstructed disturbance equals the injected one identically on
generated trajectories, the cell network is driven by the (constant) noise
samples; parameter gradients flow through the control input only.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import network
from .network import InterconnectionSpec, agent_gain_constants
from .plant import ControllerNetwork, DivergenceError, NoiseModel, VehicleFleet, \
    closed_loop_rollout, DIVERGENCE_LIMIT
from .ren import ActivationKind, RenDims, build_ren_torch


@dataclass(frozen=True)
class LossConfig:
    """Stage-cost weights: quadratic tracking plus smooth barrier penalties."""

    Q: np.ndarray
    collision_weight: float = 0.0
    collision_distance: float = 0.5
    obstacle_weight: float = 0.0
    obstacles: tuple = ()          # (center (2,), shape (2,2) PD) pairs
    formation_weight: float = 0.0
    formation_targets: tuple = ()  # (i, j, distance) triples
    barrier_eps: float = 1e-3

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))
        lam_min = float(np.linalg.eigvalsh(self.Q).min())
        if lam_min < -1e-10:
            raise ValueError(f"Q must be PSD (lambda_min={lam_min:.3e})")
        if self.barrier_eps <= 0:
            raise ValueError("barrier_eps must be positive")


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-3
    epochs: int = 100
    n_exp: int = 10
    horizon: int = 100
    seed: int = 0
    momentum: float = 0.0
    resample_noise: bool = False
    debug_certify: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 0:
            raise ValueError("learning rate and epochs must be nonnegative")
        if self.n_exp < 1 or self.horizon < 1:
            raise ValueError("n_exp and horizon must be >= 1")


@dataclass
class TrainableParams:
    """Free parameters: per-agent theta vectors and scalars b; gamma_R fixed."""

    thetas: list
    b: np.ndarray
    gamma_R: float
    state_dim: int
    neuron_dim: int
    act: ActivationKind = ActivationKind.TANH

    def copy(self) -> "TrainableParams":
        return TrainableParams(
            thetas=[t.copy() for t in self.thetas], b=self.b.copy(),
            gamma_R=self.gamma_R, state_dim=self.state_dim,
            neuron_dim=self.neuron_dim, act=self.act)


@dataclass
class GradientRecord:
    theta_grads: list
    b_grads: np.ndarray
    loss: float
    n_rollouts: int


def init_params(spec: InterconnectionSpec, state_dim: int, neuron_dim: int,
                gamma_R: float, rng: np.random.Generator,
                theta_std: float = 0.02,
                act: ActivationKind = ActivationKind.TANH) -> TrainableParams:
    """Random start; every draw is certifiably stabilizing (free map)."""
    thetas = []
    for d in spec.agent_dims:
        dims = RenDims(c=state_dim, s=neuron_dim, q=d.q, r=d.r)
        thetas.append(theta_std * rng.standard_normal(dims.n_theta))
    b = rng.standard_normal(spec.n_agents)
    return TrainableParams(thetas=thetas, b=b, gamma_R=gamma_R,
                           state_dim=state_dim, neuron_dim=neuron_dim, act=act)


def controller_from_params(spec: InterconnectionSpec,
                           params: TrainableParams) -> ControllerNetwork:
    sets = network.compute_index_sets(spec)
    alloc = network.allocate_gains(spec, sets, params.b, params.gamma_R)
    return ControllerNetwork.from_thetas(
        spec, alloc, params.thetas, params.state_dim, params.neuron_dim,
        act=params.act)


# -------------------------------- torch forward -------------------------------

def gains_torch(spec: InterconnectionSpec, b: torch.Tensor, gamma_R: float):
    """Differentiable version of the gain allocation (gamma as function of b).

    The coupling-matrix row/column sums are constants; only b carries grad.
    At a tie between the two branches of the min the first branch is taken.
    """
    sets = network.compute_index_sets(spec)
    h, col_max, row1_max, row0_max = agent_gain_constants(spec, sets)
    gammas = []
    for i in range(spec.n_agents):
        alpha = h[i] + col_max[i] + b[i] ** 2
        bound0 = math.inf if row0_max[i] == 0.0 else 1.0 / row0_max[i]
        if i in sets.out_connected:
            bound1 = gamma_R ** 2 / (row1_max[i] * gamma_R ** 2 + 1.0)
            budget = min(bound1, bound0)
        else:
            if bound0 == math.inf:
                raise ValueError(f"agent {i} has an unbounded gain budget")
            budget = bound0
        gammas.append(torch.sqrt(budget / alpha))
    return gammas


def _fleet_step_torch(fleet: VehicleFleet, x: torch.Tensor, u: torch.Tensor):
    """Batched noise-free plant update, (B, n) x (B, m) -> (B, n)."""
    p = fleet.params
    N = fleet.n_agents
    targets = torch.from_numpy(p.targets)
    xs = x.reshape(-1, N, 4)
    pos = xs[:, :, :2] + targets
    vel = xs[:, :, 2:]
    us = u.reshape(-1, N, 2)
    out = []
    for i in range(N):
        force = -p.ref_gains[i] * (pos[:, i] - targets[i])
        for j in fleet.topology.neighbors(i):
            if j == i:
                continue
            k, delta = p.spring(i, j)
            diff = pos[:, i] - pos[:, j]
            dist = torch.linalg.norm(diff, dim=1, keepdim=True)
            active = (dist >= 1e-9).to(diff.dtype)
            force = force - active * k * (dist - delta) * diff / torch.clamp(dist, min=1e-9)
        speed = torch.linalg.norm(vel[:, i], dim=1, keepdim=True)
        drag = -p.frictions[i] * speed * vel[:, i]
        v_next = vel[:, i] + p.ts / p.masses[i] * (drag + force + us[:, i])
        p_next = xs[:, i, :2] + p.ts * vel[:, i]
        out.append(torch.cat([p_next, v_next], dim=1))
    return torch.cat(out, dim=1)


def _cell_step_torch(mats: dict, xi: torch.Tensor, v: torch.Tensor,
                     act: ActivationKind):
    """Batched cell update: (B, c), (B, q) -> (B, c), (B, r)."""
    base = xi @ mats["C1"].T + v @ mats["D12"].T
    D11 = mats["D11"]
    s = D11.shape[0]
    sig_cols = []
    for i in range(s):
        nu_i = base[:, i]
        if i > 0:
            nu_i = nu_i + torch.stack(sig_cols, dim=1) @ D11[i, :i]
        sig_cols.append(act.apply_torch(nu_i))
    sig = torch.stack(sig_cols, dim=1)
    xi_next = xi @ mats["A1"].T + sig @ mats["B1"].T + v @ mats["B2"].T
    z = xi @ mats["C2"].T + sig @ mats["D21"].T + v @ mats["D22"].T
    return xi_next, z


def stage_loss_torch(cfg: LossConfig, fleet: VehicleFleet,
                     x: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Per-sample stage cost, batched: (B, n), (B, m) -> (B,)."""
    Q = torch.from_numpy(cfg.Q)
    xu = torch.cat([x, u], dim=1)
    total = torch.einsum("bi,ij,bj->b", xu, Q, xu)
    N = fleet.n_agents
    pos = x.reshape(-1, N, 4)[:, :, :2] + torch.from_numpy(fleet.params.targets)
    if cfg.collision_weight > 0.0:
        for i in range(N):
            for j in range(i + 1, N):
                d = torch.linalg.norm(pos[:, i] - pos[:, j], dim=1)
                gap = torch.relu(cfg.collision_distance - d)
                total = total + cfg.collision_weight * gap ** 2 / (d + cfg.barrier_eps)
    if cfg.obstacle_weight > 0.0:
        for center, shape in cfg.obstacles:
            center_t = torch.from_numpy(np.asarray(center, dtype=float))
            inv = torch.from_numpy(np.linalg.inv(np.asarray(shape, dtype=float)))
            for i in range(N):
                diff = pos[:, i] - center_t
                level = torch.einsum("bi,ij,bj->b", diff, inv, diff)
                total = total + cfg.obstacle_weight * torch.relu(1.0 - level) ** 2
    if cfg.formation_weight > 0.0:
        for i, j, dist in cfg.formation_targets:
            d = torch.linalg.norm(pos[:, i] - pos[:, j], dim=1)
            total = total + cfg.formation_weight * (d - dist) ** 2
    return total


def stage_loss(cfg: LossConfig, fleet: VehicleFleet, x: np.ndarray,
               u: np.ndarray) -> float:
    """Nonnegative stage cost of one (x_t, u_t) pair."""
    with torch.no_grad():
        val = stage_loss_torch(
            cfg, fleet,
            torch.from_numpy(np.asarray(x, dtype=float)[None, :]),
            torch.from_numpy(np.asarray(u, dtype=float)[None, :]))
    return float(val[0])


def rollout_loss_torch(fleet: VehicleFleet, spec: InterconnectionSpec,
                       cell_mats: list, act: ActivationKind,
                       noise: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Mean over samples of the horizon-summed stage cost; torch graph kept.

    ``noise`` is (B, T+1, n); sample b's trajectory is driven by noise[b].
    Raises DivergenceError if any state leaves the trust region.
    """
    B, T1, _ = noise.shape
    xi = [torch.zeros(B, cell_mats[i]["A1"].shape[0], dtype=torch.float64)
          for i in range(spec.n_agents)]
    z_prev = torch.zeros(B, spec.r, dtype=torch.float64)
    M_vz = torch.from_numpy(spec.M_vz)
    M_vw = torch.from_numpy(spec.M_vw)
    M_uz = torch.from_numpy(spec.M_uz)
    total = torch.zeros(B, dtype=torch.float64)
    x_prev = u_prev = None
    for t in range(T1):
        if t == 0:
            x_t = noise[:, 0]
        else:
            x_t = _fleet_step_torch(fleet, x_prev, u_prev) + noise[:, t]
        if float(x_t.detach().abs().max()) > DIVERGENCE_LIMIT:
            raise DivergenceError(t, float(x_t.detach().abs().max()))
        what_t = noise[:, t]    # reconstruction is exact on generated paths
        v_t = z_prev @ M_vz.T + what_t @ M_vw.T
        z_parts = []
        for i in range(spec.n_agents):
            xi[i], z_i = _cell_step_torch(
                cell_mats[i], xi[i], v_t[:, spec.v_slice(i)], act)
            z_parts.append(z_i)
        z_t = torch.cat(z_parts, dim=1)
        u_t = z_t @ M_uz.T
        total = total + stage_loss_torch(cfg, fleet, x_t, u_t)
        x_prev, u_prev, z_prev = x_t, u_t, z_t
    return total.mean()


def empirical_loss_torch(fleet: VehicleFleet, spec: InterconnectionSpec,
                         thetas: list, b: torch.Tensor, gamma_R: float,
                         state_dim: int, neuron_dim: int,
                         act: ActivationKind, noise: torch.Tensor,
                         cfg: LossConfig) -> torch.Tensor:
    """Full differentiable chain from (thetas, b) to the empirical loss."""
    gammas = gains_torch(spec, b, gamma_R)
    cell_mats = []
    for i, d in enumerate(spec.agent_dims):
        dims = RenDims(c=state_dim, s=neuron_dim, q=d.q, r=d.r)
        cell_mats.append(build_ren_torch(thetas[i], gammas[i], dims))
    return rollout_loss_torch(fleet, spec, cell_mats, act, noise, cfg)


# ------------------------------- reference path -------------------------------

def empirical_loss(fleet: VehicleFleet, spec: InterconnectionSpec,
                   params: TrainableParams, cfg: LossConfig,
                   noise_samples: np.ndarray) -> float:
    """Loss through the numpy simulation path; gradient-free reference."""
    controller = controller_from_params(spec, params)
    total = 0.0
    for w in noise_samples:
        rec = closed_loop_rollout(fleet, controller, w)
        for t in range(rec.horizon + 1):
            total += stage_loss(cfg, fleet, rec.x[t], rec.u[t])
    return total / len(noise_samples)


def grad_params(fleet: VehicleFleet, spec: InterconnectionSpec,
                params: TrainableParams, cfg: LossConfig,
                noise_samples: np.ndarray) -> GradientRecord:
    """Exact reverse-accumulation gradient of the empirical loss."""
    thetas = [torch.from_numpy(t.copy()).requires_grad_(True)
              for t in params.thetas]
    b = torch.from_numpy(params.b.copy()).requires_grad_(True)
    noise = torch.from_numpy(np.ascontiguousarray(noise_samples, dtype=float))
    loss = empirical_loss_torch(
        fleet, spec, thetas, b, params.gamma_R,
        params.state_dim, params.neuron_dim, params.act, noise, cfg)
    grads = torch.autograd.grad(loss, thetas + [b])
    return GradientRecord(
        theta_grads=[g.numpy().copy() for g in grads[:-1]],
        b_grads=grads[-1].numpy().copy(),
        loss=float(loss.detach()), n_rollouts=noise_samples.shape[0])


# --------------------------------- training -----------------------------------

@dataclass
class TrainingResult:
    params: TrainableParams
    loss_history: np.ndarray       # (epochs + 1,), entry e = loss before step e
    gamma_history: np.ndarray      # (epochs + 1, N)
    certified: bool


def train(fleet: VehicleFleet, spec: InterconnectionSpec,
          params0: TrainableParams, loss_cfg: LossConfig,
          train_cfg: TrainingConfig, noise_model: NoiseModel,
          checkpoint_cb=None) -> TrainingResult:
    """Plain gradient descent over the free parameters (Algorithm-1 loop).

    The per-agent gains are recomputed from b every epoch, so every iterate
    (including the last) is a certified stabilizing controller.  With
    ``debug_certify`` the network LMI is assembled and checked each epoch.
    """
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    params = params0.copy()
    sets = network.compute_index_sets(spec)

    def draw_noise():
        return np.stack([noise_model.sample(rng, train_cfg.horizon)
                         for _ in range(train_cfg.n_exp)])

    noise = draw_noise()
    loss_hist, gamma_hist = [], []
    velocity = None
    certified = True
    for epoch in range(train_cfg.epochs + 1):
        alloc = network.allocate_gains(spec, sets, params.b, params.gamma_R)
        gamma_hist.append(alloc.gamma.copy())
        if train_cfg.debug_certify:
            report = network.certify(spec, alloc)
            certified = certified and report.feasible
            if not report.feasible:
                raise AssertionError(
                    f"certificate failed at epoch {epoch}: "
                    f"lambda_max={report.max_eigenvalue:.3e}")
        try:
            record = grad_params(fleet, spec, params, loss_cfg, noise)
        except DivergenceError as err:
            raise DivergenceError(err.t, err.norm, epoch=epoch) from err
        loss_hist.append(record.loss)
        if epoch == train_cfg.epochs:
            break
        step_dirs = record.theta_grads + [record.b_grads]
        if train_cfg.momentum > 0.0:
            if velocity is None:
                velocity = [np.zeros_like(g) for g in step_dirs]
            velocity = [train_cfg.momentum * v + g
                        for v, g in zip(velocity, step_dirs)]
            step_dirs = velocity
        for t, g in zip(params.thetas, step_dirs[:-1]):
            t -= train_cfg.learning_rate * g
        params.b = params.b - train_cfg.learning_rate * step_dirs[-1]
        if train_cfg.resample_noise:
            noise = draw_noise()
        if checkpoint_cb is not None and train_cfg.checkpoint_every > 0 \
                and (epoch + 1) % train_cfg.checkpoint_every == 0:
            checkpoint_cb(epoch + 1, params, np.asarray(loss_hist))
    return TrainingResult(params=params,
                          loss_history=np.asarray(loss_hist),
                          gamma_history=np.asarray(gamma_hist),
                          certified=certified)


# ------------------------------- serialization --------------------------------

def config_hash(obj) -> str:
    """Stable digest of a JSON-serializable configuration."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, params: TrainableParams, epoch: int, seed: int,
                    cfg_hash: str = ""):
    data = {
        "epoch": epoch,
        "seed": seed,
        "config_hash": cfg_hash,
        "gamma_R": params.gamma_R,
        "state_dim": params.state_dim,
        "neuron_dim": params.neuron_dim,
        "activation": params.act.value,
        "b": params.b.tolist(),
        "thetas": [t.tolist() for t in params.thetas],
    }
    with open(path, "w") as fh:
        json.dump(data, fh)


def load_checkpoint(path):
    with open(path) as fh:
        data = json.load(fh)
    params = TrainableParams(
        thetas=[np.asarray(t, dtype=float) for t in data["thetas"]],
        b=np.asarray(data["b"], dtype=float),
        gamma_R=float(data["gamma_R"]),
        state_dim=int(data["state_dim"]),
        neuron_dim=int(data["neuron_dim"]),
        act=ActivationKind(data.get("activation", "tanh")))
    return params, data


def history_to_csv(values: np.ndarray, names) -> str:
    rows = [",".join(["epoch"] + list(names))]
    values = np.atleast_2d(np.asarray(values, dtype=float).T).T
    for e in range(values.shape[0]):
        rows.append(",".join([str(e)] + [f"{v:.17g}" for v in values[e]]))
    return "\n".join(rows) + "\n"
