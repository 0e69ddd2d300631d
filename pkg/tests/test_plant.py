"""Fleet dynamics, noise round trip, closed-loop schedule, CSV round trip."""
import numpy as np
import pytest

from netren.benchmark import benchmark_fleet, benchmark_noise, benchmark_spec
from netren.plant import (DivergenceError, NoiseModel,
                          closed_loop_rollout, reconstruct_noise,
                          rollout_from_csv, rollout_summary, rollout_to_csv)
from netren.training import init_params, controller_from_params


def small_controller(seed=0, theta_std=0.02):
    spec = benchmark_spec()
    rng = np.random.default_rng(seed)
    params = init_params(spec, 6, 6, gamma_R=3.0, rng=rng, theta_std=theta_std)
    return benchmark_fleet(), controller_from_params(spec, params)


def test_target_formation_is_equilibrium():
    fleet, controller = small_controller()
    noise = np.zeros((21, fleet.n))
    rec = closed_loop_rollout(fleet, controller, noise)
    assert np.allclose(rec.x, 0.0)
    assert np.allclose(rec.u, 0.0)


def test_rest_lengths_consistent_with_targets():
    fleet = benchmark_fleet()
    p = fleet.params
    for (i, j), delta in p.rest_lengths.items():
        assert abs(np.linalg.norm(p.targets[i] - p.targets[j]) - delta) < 1e-12


def test_noise_reconstruction_is_exact():
    fleet, controller = small_controller()
    rng = np.random.default_rng(1)
    noise = benchmark_noise().sample(rng, 30)
    noise[3] += 0.5 * rng.standard_normal(fleet.n)  # extra mid-run noise
    rec = closed_loop_rollout(fleet, controller, noise)
    for t in range(1, 31):
        what = reconstruct_noise(fleet, rec.x[t], rec.x[t - 1], rec.u[t - 1])
        assert np.max(np.abs(what - noise[t])) <= 1e-12
    assert np.max(np.abs(rec.what - noise)) <= 1e-12


def test_communication_delay_one_sample():
    """v_t is built from z_{t-1}: perturbing the last output cannot affect it."""
    fleet, controller = small_controller()
    rng = np.random.default_rng(2)
    noise = benchmark_noise().sample(rng, 10)
    rec = closed_loop_rollout(fleet, controller, noise)
    spec = controller.spec
    M_vz, M_vw = spec.M_vz, spec.M_vw
    for t in range(1, 11):
        v_expected = M_vz @ rec.z[t - 1] + M_vw @ rec.what[t]
        assert np.allclose(rec.v[t], v_expected, atol=1e-12)
    assert np.allclose(rec.v[0], M_vw @ rec.what[0], atol=1e-12)


def test_untrained_rollout_decays():
    fleet, controller = small_controller()
    rng = np.random.default_rng(3)
    noise = benchmark_noise().sample(rng, 300)
    rec = closed_loop_rollout(fleet, controller, noise)
    head, tail = rec.energies()
    assert tail < head


def test_divergence_raises_with_time_index():
    fleet = benchmark_fleet()
    _, controller = small_controller()
    noise = np.zeros((6, fleet.n))
    noise[0] = 1e7  # beyond the trust region immediately
    with pytest.raises(DivergenceError) as err:
        closed_loop_rollout(fleet, controller, noise)
    assert err.value.t == 0


def test_csv_round_trip():
    fleet, controller = small_controller()
    rng = np.random.default_rng(4)
    noise = benchmark_noise().sample(rng, 12)
    rec = closed_loop_rollout(fleet, controller, noise)
    text = rollout_to_csv(rec, fleet)
    data = rollout_from_csv(text, fleet)
    assert np.array_equal(data["x"], rec.x)
    assert np.array_equal(data["u"], rec.u)
    assert np.array_equal(data["what"], rec.what)


def test_summary_fields():
    fleet, controller = small_controller()
    rng = np.random.default_rng(5)
    noise = benchmark_noise().sample(rng, 40)
    rec = closed_loop_rollout(fleet, controller, noise)
    s = rollout_summary(rec, fleet)
    for key in ("head_energy", "tail_energy", "max_speed",
                "min_inter_agent_distance"):
        assert key in s and np.isfinite(s[key])
    assert s["min_inter_agent_distance"] > 0


def test_noise_model_window():
    nm = NoiseModel(mean=np.zeros(4), std=1.0, window=3, window_std=0.5)
    rng = np.random.default_rng(6)
    w = nm.sample(rng, 10)
    assert w.shape == (11, 4)
    assert np.any(w[1:4] != 0.0)
    assert np.all(w[4:] == 0.0)
