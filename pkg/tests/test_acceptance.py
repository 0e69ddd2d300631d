"""End-to-end acceptance suite.

Each test exercises one release gate at its stated tolerance and prints a
single PASS line on success.  The benchmark training gate (criterion 8) is the
long one (~12 min); run it explicitly or give the suite time.
"""
import time

import numpy as np
import pytest
import torch

from netren import network
from netren.benchmark import (benchmark_fleet, benchmark_noise,
                              benchmark_scenario, benchmark_spec)
from netren.network import (AgentDims, InterconnectionSpec, Topology,
                            allocate_gains, build_from_topology, certify,
                            compute_index_sets, interconnection_violations,
                            with_scaled_gamma)
from netren.plant import (NoiseModel, VehicleFleet, VehicleParams,
                          closed_loop_rollout, reconstruct_noise,
                          rollout_summary)
from netren.ren import ActivationKind, RenDims, build_ren, ren_rollout
from netren.training import (LossConfig, empirical_loss,
                             controller_from_params, grad_params, init_params,
                             train)

torch.set_num_threads(4)

REPORT_LINES = []


def _report(line: str):
    """One pass/fail line per criterion, echoed in the terminal summary."""
    REPORT_LINES.append(line.strip())
    print(line)


def _random_interconnection(rng):
    """Random validated interconnection, N in 2..6, dims <= 4 per agent."""
    n_agents = int(rng.integers(2, 7))
    edges = []
    for i in range(n_agents):
        for j in range(i + 1, n_agents):
            if rng.random() < 0.4:
                edges.append((i, j))
    # keep it connected enough that couplings actually appear
    for i in range(n_agents - 1):
        if rng.random() < 0.5:
            edges.append((i, i + 1))
    topo = Topology(n_agents, set(edges))
    r = [int(rng.integers(1, 5)) for _ in range(n_agents)]
    n = [int(rng.integers(1, 5)) for _ in range(n_agents)]
    m = [int(rng.integers(1, r[i] + 1)) for i in range(n_agents)]
    dims = []
    for i in range(n_agents):
        others = [j for j in topo.neighbors(i) if j != i]
        dims.append(AgentDims(n=n[i], m=m[i],
                              q=n[i] + sum(r[j] for j in others), r=r[i]))
    spec = build_from_topology(topo, dims)
    b = rng.standard_normal(n_agents)
    gamma_R = float(rng.uniform(0.1, 10.0))
    return spec, b, gamma_R


def _sweep(count=100, seed=2024):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        spec, b, gamma_R = _random_interconnection(rng)
        assert interconnection_violations(spec) == []
        sets = compute_index_sets(spec)
        alloc = allocate_gains(spec, sets, b, gamma_R)
        out.append((spec, alloc))
    return out


SWEEP = None


def _get_sweep():
    global SWEEP
    if SWEEP is None:
        SWEEP = _sweep()
    return SWEEP


def test_criterion_1_allocation_soundness_sweep():
    t0 = time.time()
    worst = -np.inf
    for spec, alloc in _get_sweep():
        M = network.assemble_lmi(spec, alloc)
        scale = max(1.0, float(np.linalg.norm(M)))
        lam = float(np.linalg.eigvalsh(M).max()) / scale
        worst = max(worst, lam)
        assert lam <= 1e-8
    elapsed = time.time() - t0
    assert elapsed <= 60.0
    _report(f"CRITERION 1: PASS — 100 random interconnections, worst relative "
          f"lambda_max {worst:.2e} <= 1e-8, {elapsed:.1f}s")


def test_criterion_2_certificate_non_vacuity():
    t0 = time.time()
    rng = np.random.default_rng(7)
    infeasible = 0
    total = 0
    for spec, alloc in _get_sweep():
        i = int(rng.integers(spec.n_agents))
        factor = np.ones(spec.n_agents)
        factor[i] = 10.0
        inflated = with_scaled_gamma(alloc, factor)
        if not certify(spec, inflated).feasible:
            infeasible += 1
        total += 1
    elapsed = time.time() - t0
    share = infeasible / total
    assert share >= 0.95
    assert elapsed <= 60.0
    _report(f"CRITERION 2: PASS — one agent's gain x10 breaks feasibility in "
          f"{share:.0%} of {total} instances (>= 95%), {elapsed:.1f}s")


def test_criterion_3_identity_routing_closed_form():
    """M_vw = I, M_uz^T M_uz = I: the allocation must reduce to the closed
    form gamma_i = sqrt((1/alpha_i) * gamma_R^2 / (rowmax_i gamma_R^2 + 1))."""
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        n_agents = int(rng.integers(2, 6))
        edges = [(i, j) for i in range(n_agents) for j in range(i + 1, n_agents)
                 if rng.random() < 0.5]
        topo = Topology(n_agents, set(edges))
        r = [int(rng.integers(1, 4)) for _ in range(n_agents)]
        q = list(r)  # one w slot per v slot: M_vw = I_q
        M_vz = np.zeros((sum(q), sum(r)))
        q_off = np.concatenate([[0], np.cumsum(q)])
        r_off = np.concatenate([[0], np.cumsum(r)])
        for i in range(n_agents):
            for j in topo.neighbors(i):
                if j == i:
                    continue
                block = rng.standard_normal((q[i], r[j]))
                M_vz[q_off[i]:q_off[i + 1], r_off[j]:r_off[j + 1]] = block
        spec = InterconnectionSpec(
            topology=topo,
            agent_dims=tuple(AgentDims(n=q[i], m=r[i], q=q[i], r=r[i])
                             for i in range(n_agents)),
            M_vz=M_vz, M_vw=np.eye(sum(q)), M_uz=np.eye(sum(r)))
        assert interconnection_violations(spec) == []
        sets = compute_index_sets(spec)
        b = rng.standard_normal(n_agents)
        gamma_R = float(rng.uniform(0.2, 5.0))
        alloc = allocate_gains(spec, sets, b, gamma_R)
        for i in range(n_agents):
            rows = slice(q_off[i], q_off[i + 1])
            cols = slice(r_off[i], r_off[i + 1])
            rowmax = np.abs(M_vz[rows]).sum(axis=1).max()
            colmax = np.abs(M_vz[:, cols]).sum(axis=0).max() if r[i] else 0.0
            alpha = 1.0 + colmax + b[i] ** 2
            expected = np.sqrt(
                (1.0 / alpha) * gamma_R ** 2 / (rowmax * gamma_R ** 2 + 1.0))
            worst = max(worst, abs(alloc.gamma[i] - expected))
            assert abs(alloc.gamma[i] - expected) <= 1e-12
    _report(f"CRITERION 3: PASS — identity-routing closed form matched on 50 "
          f"instances, worst |diff| {worst:.2e} <= 1e-12")


def test_criterion_4_cell_gain_bound():
    t0 = time.time()
    rng = np.random.default_rng(21)
    dims_settings = [RenDims(c=2, s=3, q=2, r=1), RenDims(c=5, s=6, q=3, r=2),
                     RenDims(c=8, s=8, q=4, r=4)]
    worst_margin = np.inf
    for dims in dims_settings:
        for _ in range(50):
            gamma = float(rng.uniform(0.2, 4.0))
            theta = rng.uniform(0.1, 3.0) * rng.standard_normal(dims.n_theta)
            mat = build_ren(theta, gamma, dims)
            act = ActivationKind.TANH if rng.random() < 0.5 \
                else ActivationKind.RELU
            for _ in range(20):
                inputs = rng.standard_normal((50, dims.q))
                _, ratio = ren_rollout(mat, inputs, act)
                worst_margin = min(worst_margin, gamma - ratio)
                assert ratio <= gamma + 1e-9
    elapsed = time.time() - t0
    assert elapsed <= 120.0
    _report(f"CRITERION 4: PASS — 3 dims x 50 theta x 20 sequences, gain "
          f"ratio <= gamma + 1e-9 (tightest margin {worst_margin:.2e}), "
          f"{elapsed:.1f}s")


def test_criterion_5_gradient_fidelity():
    topo = Topology(2, [(0, 1)])
    spec = build_from_topology(topo, [AgentDims(4, 2, 6, 2),
                                      AgentDims(4, 2, 6, 2)])
    params_v = VehicleParams(
        masses=np.ones(2), frictions=np.ones(2), ts=0.05,
        spring_gains={(0, 1): 1.0}, ref_gains=np.ones(2),
        rest_lengths={(0, 1): 2.0},
        targets=np.array([[-1.0, 0.0], [1.0, 0.0]]))
    fleet = VehicleFleet(params_v, topo)
    cfg = LossConfig(
        Q=np.diag(np.concatenate([np.ones(8), 0.01 * np.ones(4)])),
        collision_weight=1.0, collision_distance=0.5,
        formation_weight=0.1, formation_targets=((0, 1, 2.0),))
    rng = np.random.default_rng(31)
    p = init_params(spec, 4, 4, gamma_R=3.0, rng=rng)
    nm = NoiseModel(mean=np.tile([0.0, -2.0, 0.0, 0.0], 2), std=0.3)
    noise = np.stack([nm.sample(rng, 10) for _ in range(2)])
    rec = grad_params(fleet, spec, p, cfg, noise)
    h = 1e-5
    n_th = len(p.thetas[0])
    coords = [("theta", int(rng.integers(2)), int(rng.integers(n_th)))
              for _ in range(18)] + [("b", 0, None), ("b", 1, None)]
    worst = 0.0
    for kind, i, k in coords:
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
        rel = abs(g - fd) / max(1e-8, abs(fd))
        worst = max(worst, rel)
        assert rel <= 1e-4
    _report(f"CRITERION 5: PASS — 20 gradient coordinates vs central finite "
          f"differences, worst relative error {worst:.2e} <= 1e-4")


def test_criterion_6_closed_loop_l2_sanity():
    fleet = benchmark_fleet()
    spec = benchmark_spec()
    rng = np.random.default_rng(41)
    nm = benchmark_noise()
    worst = 0.0
    for _ in range(20):
        p = init_params(spec, 8, 8, gamma_R=3.0, rng=rng)
        controller = controller_from_params(spec, p)
        noise = nm.sample(rng, 500)
        record = closed_loop_rollout(fleet, controller, noise)
        head, tail = record.energies(split=250)
        worst = max(worst, tail / head)
        assert tail < 0.2 * head
    _report(f"CRITERION 6: PASS — 20 untrained controllers, T=500, worst "
          f"tail/head energy {worst:.3f} < 0.2")


def test_criterion_7_noise_round_trip():
    fleet = benchmark_fleet()
    spec = benchmark_spec()
    rng = np.random.default_rng(51)
    worst = 0.0
    for _ in range(10):
        p = init_params(spec, 6, 6, gamma_R=3.0, rng=rng)
        controller = controller_from_params(spec, p)
        noise = NoiseModel(mean=np.zeros(16), std=1.0, window=20,
                           window_std=0.3).sample(rng, 60)
        record = closed_loop_rollout(fleet, controller, noise)
        for t in range(1, 61):
            what = reconstruct_noise(fleet, record.x[t], record.x[t - 1],
                                     record.u[t - 1])
            worst = max(worst, float(np.max(np.abs(what - noise[t]))))
        assert worst <= 1e-12
    _report(f"CRITERION 7: PASS — injected noise recovered on 10 rollouts, "
          f"worst entry error {worst:.2e} <= 1e-12")


@pytest.mark.slow
def test_criterion_8_benchmark_training():
    sc = benchmark_scenario()
    assert sc.train_cfg.epochs == 100 and sc.train_cfg.horizon == 100
    assert sc.train_cfg.n_exp == 10 and sc.train_cfg.learning_rate == 1e-3
    from dataclasses import replace
    sc.train_cfg = replace(sc.train_cfg, debug_certify=True)
    rng = np.random.default_rng(sc.train_cfg.seed)
    p0 = init_params(sc.spec, sc.state_dim, sc.neuron_dim, sc.gamma_R, rng,
                     act=sc.act)
    t0 = time.time()
    result = train(sc.fleet, sc.spec, p0, sc.loss_cfg, sc.train_cfg, sc.noise)
    elapsed = time.time() - t0
    ratio = result.loss_history[-1] / result.loss_history[0]
    assert result.certified          # per-epoch certificate held
    assert ratio <= 0.7
    assert elapsed <= 15 * 60
    # qualitative report (not gated): trained controller on a fresh sample
    controller = controller_from_params(sc.spec, result.params)
    noise = sc.noise.sample(np.random.default_rng(123), 200)
    record = closed_loop_rollout(sc.fleet, controller, noise)
    summary = rollout_summary(record, sc.fleet)
    final_dist = float(np.linalg.norm(record.x[-1].reshape(4, 4)[:, :2],
                                      axis=1).max())
    _report(f"CRITERION 8: PASS — benchmark training, final/initial loss "
          f"{ratio:.3f} <= 0.7, certified every epoch, {elapsed / 60:.1f} min"
          f" (report: final distance to targets {final_dist:.2f}, min "
          f"inter-agent distance {summary['min_inter_agent_distance']:.2f})")


def test_criterion_9_determinism():
    sc = benchmark_scenario(epochs=3, n_exp=2, horizon=20, state_dim=6,
                            neuron_dim=6)
    histories = []
    for _ in range(2):
        rng = np.random.default_rng(sc.train_cfg.seed)
        p0 = init_params(sc.spec, sc.state_dim, sc.neuron_dim, sc.gamma_R,
                         rng, act=sc.act)
        result = train(sc.fleet, sc.spec, p0, sc.loss_cfg, sc.train_cfg,
                       sc.noise)
        histories.append(result.loss_history)
    assert np.array_equal(histories[0], histories[1])
    _report("CRITERION 9: PASS — fixed seed reproduces the loss history "
          "bit-identically across two runs")
