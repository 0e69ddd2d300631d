"""Losses, gradient fidelity, and the training loop."""
import numpy as np
import torch

from netren.network import AgentDims, Topology, build_from_topology
from netren.plant import NoiseModel, VehicleFleet, VehicleParams
from netren.training import (LossConfig, TrainingConfig,
                             controller_from_params, empirical_loss,
                             empirical_loss_torch, grad_params, history_to_csv,
                             init_params, load_checkpoint, save_checkpoint,
                             stage_loss, train)


def pair_system():
    """Two vehicles joined by one spring; cells with 4 states, 4 neurons."""
    topo = Topology(2, [(0, 1)])
    spec = build_from_topology(topo, [AgentDims(4, 2, 6, 2),
                                      AgentDims(4, 2, 6, 2)])
    params = VehicleParams(
        masses=np.ones(2), frictions=np.ones(2), ts=0.05,
        spring_gains={(0, 1): 1.0}, ref_gains=np.ones(2),
        rest_lengths={(0, 1): 2.0},
        targets=np.array([[-1.0, 0.0], [1.0, 0.0]]))
    fleet = VehicleFleet(params, topo)
    cfg = LossConfig(
        Q=np.diag(np.concatenate([np.ones(8), 0.01 * np.ones(4)])),
        collision_weight=1.0, collision_distance=0.5,
        formation_weight=0.1, formation_targets=((0, 1, 2.0),))
    noise_model = NoiseModel(mean=np.tile([0.0, -2.0, 0.0, 0.0], 2), std=0.3)
    return fleet, spec, cfg, noise_model


def test_stage_loss_zero_at_equilibrium_without_barriers():
    fleet, spec, _, _ = pair_system()
    cfg = LossConfig(Q=np.eye(12))
    assert stage_loss(cfg, fleet, np.zeros(8), np.zeros(4)) == 0.0


def test_stage_loss_barrier_terms_activate():
    fleet, _, _, _ = pair_system()
    cfg = LossConfig(Q=np.zeros((12, 12)), collision_weight=10.0,
                     collision_distance=3.0)
    # agents at their targets are 2 apart < 3 -> collision barrier active
    assert stage_loss(cfg, fleet, np.zeros(8), np.zeros(4)) > 0.0
    cfg2 = LossConfig(Q=np.zeros((12, 12)), obstacle_weight=5.0,
                      obstacles=((np.array([-1.0, 0.0]), np.eye(2)),))
    assert stage_loss(cfg2, fleet, np.zeros(8), np.zeros(4)) > 0.0


def test_torch_and_numpy_losses_agree():
    fleet, spec, cfg, nm = pair_system()
    rng = np.random.default_rng(0)
    p = init_params(spec, 4, 4, gamma_R=3.0, rng=rng)
    noise = np.stack([nm.sample(rng, 15) for _ in range(3)])
    loss_np = empirical_loss(fleet, spec, p, cfg, noise)
    with torch.no_grad():
        loss_t = float(empirical_loss_torch(
            fleet, spec, [torch.from_numpy(t) for t in p.thetas],
            torch.from_numpy(p.b), p.gamma_R, 4, 4, p.act,
            torch.from_numpy(noise), cfg))
    assert abs(loss_np - loss_t) <= 1e-9 * max(1.0, abs(loss_np))


def test_gradients_match_finite_differences():
    fleet, spec, cfg, nm = pair_system()
    rng = np.random.default_rng(1)
    p = init_params(spec, 4, 4, gamma_R=3.0, rng=rng)
    noise = np.stack([nm.sample(rng, 10) for _ in range(2)])
    rec = grad_params(fleet, spec, p, cfg, noise)
    h = 1e-5
    for kind, i, k in [("theta", 0, 5), ("theta", 1, 40), ("b", 0, None),
                       ("b", 1, None)]:
        pp, pm = p.copy(), p.copy()
        if kind == "theta":
            pp.thetas[i][k] += h
            pm.thetas[i][k] -= h
            g = rec.theta_grads[i][k]
        else:
            pp.b[i] += h
            pm.b[i] -= h
            g = rec.b_grads[i]
        fd = (empirical_loss(fleet, spec, pp, cfg, noise)
              - empirical_loss(fleet, spec, pm, cfg, noise)) / (2 * h)
        assert abs(g - fd) <= 1e-4 * max(1e-8, abs(fd))


def test_zero_learning_rate_keeps_everything_constant():
    fleet, spec, cfg, nm = pair_system()
    rng = np.random.default_rng(2)
    p0 = init_params(spec, 4, 4, gamma_R=3.0, rng=rng)
    tc = TrainingConfig(learning_rate=0.0, epochs=3, n_exp=2, horizon=8, seed=0)
    res = train(fleet, spec, p0, cfg, tc, nm)
    assert np.all(res.loss_history == res.loss_history[0])
    for t0, t1 in zip(p0.thetas, res.params.thetas):
        assert np.array_equal(t0, t1)
    assert np.array_equal(p0.b, res.params.b)


def test_training_reduces_loss_and_stays_certified():
    fleet, spec, cfg, nm = pair_system()
    rng = np.random.default_rng(3)
    p0 = init_params(spec, 4, 4, gamma_R=3.0, rng=rng)
    tc = TrainingConfig(learning_rate=1e-3, epochs=5, n_exp=3, horizon=20,
                        seed=0, debug_certify=True)
    res = train(fleet, spec, p0, cfg, tc, nm)
    assert res.certified
    assert res.loss_history[-1] < res.loss_history[0]
    assert res.loss_history.shape == (6,)
    assert res.gamma_history.shape == (6, 2)


def test_training_is_deterministic():
    fleet, spec, cfg, nm = pair_system()
    histories = []
    for _ in range(2):
        rng = np.random.default_rng(4)
        p0 = init_params(spec, 4, 4, gamma_R=3.0, rng=rng)
        tc = TrainingConfig(learning_rate=1e-3, epochs=3, n_exp=2, horizon=10,
                            seed=7)
        res = train(fleet, spec, p0, cfg, tc, nm)
        histories.append(res.loss_history)
    assert np.array_equal(histories[0], histories[1])


def test_checkpoint_round_trip(tmp_path):
    fleet, spec, cfg, nm = pair_system()
    rng = np.random.default_rng(5)
    p = init_params(spec, 4, 4, gamma_R=3.0, rng=rng)
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, p, epoch=4, seed=9, cfg_hash="abc")
    restored, meta = load_checkpoint(path)
    assert meta["epoch"] == 4 and meta["seed"] == 9
    assert np.array_equal(restored.b, p.b)
    for a, b in zip(restored.thetas, p.thetas):
        assert np.array_equal(a, b)
    assert restored.act == p.act
    # restored params drive the same controller
    c0 = controller_from_params(spec, p)
    c1 = controller_from_params(spec, restored)
    assert np.array_equal(c0.cells[0].A1, c1.cells[0].A1)


def test_history_csv_shape():
    text = history_to_csv(np.array([1.0, 0.5, 0.25]), ["loss"])
    lines = text.strip().split("\n")
    assert lines[0] == "epoch,loss"
    assert len(lines) == 4


def test_every_iterate_gain_is_positive():
    fleet, spec, cfg, nm = pair_system()
    rng = np.random.default_rng(6)
    p0 = init_params(spec, 4, 4, gamma_R=3.0, rng=rng)
    tc = TrainingConfig(learning_rate=1e-2, epochs=4, n_exp=2, horizon=10,
                        seed=0)
    res = train(fleet, spec, p0, cfg, tc, nm)
    assert np.all(res.gamma_history > 0)
