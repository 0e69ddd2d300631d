"""JSON experiment configuration: plant, interconnection, losses, training.

A configuration file fully determines a scenario; missing sections fall back
to the bundled four-vehicle benchmark defaults.  Edge-keyed maps use "i-j"
string keys (i < j) since JSON objects cannot have tuple keys.
"""
from __future__ import annotations

import json

import numpy as np

from . import benchmark
from .network import AgentDims, Topology, build_from_topology
from .plant import NoiseModel, VehicleFleet, VehicleParams
from .ren import ActivationKind
from .training import LossConfig, TrainingConfig


def _edge_key(i: int, j: int) -> str:
    return f"{min(i, j)}-{max(i, j)}"


def _parse_edge(key: str):
    i, j = key.split("-")
    return (int(i), int(j))


def scenario_to_json(sc: benchmark.BenchmarkScenario) -> dict:
    p = sc.fleet.params
    topo = sc.fleet.topology
    lc = sc.loss_cfg
    tc = sc.train_cfg
    return {
        "topology": {
            "n_agents": topo.n_agents,
            "edges": [list(e) for e in sorted(topo.edges)],
        },
        "agent_dims": [{"n": d.n, "m": d.m, "q": d.q, "r": d.r}
                       for d in sc.spec.agent_dims],
        "cells": {
            "state_dim": sc.state_dim,
            "neuron_dim": sc.neuron_dim,
            "activation": sc.act.value,
        },
        "gamma_R": sc.gamma_R,
        "vehicle": {
            "masses": p.masses.tolist(),
            "frictions": p.frictions.tolist(),
            "ts": p.ts,
            "spring_gains": {_edge_key(*e): g for e, g in p.spring_gains.items()},
            "ref_gains": p.ref_gains.tolist(),
            "rest_lengths": {_edge_key(*e): d for e, d in p.rest_lengths.items()},
            "targets": p.targets.tolist(),
        },
        "loss": {
            "Q": lc.Q.tolist(),
            "collision_weight": lc.collision_weight,
            "collision_distance": lc.collision_distance,
            "obstacle_weight": lc.obstacle_weight,
            "obstacles": [{"center": np.asarray(c).tolist(),
                           "shape": np.asarray(S).tolist()}
                          for c, S in lc.obstacles],
            "formation_weight": lc.formation_weight,
            "formation_targets": [list(t) for t in lc.formation_targets],
            "barrier_eps": lc.barrier_eps,
        },
        "noise": {
            "mean": sc.noise.mean.tolist(),
            "std": sc.noise.std,
            "window": sc.noise.window,
            "window_std": sc.noise.window_std,
        },
        "training": {
            "learning_rate": tc.learning_rate,
            "epochs": tc.epochs,
            "n_exp": tc.n_exp,
            "horizon": tc.horizon,
            "seed": tc.seed,
            "momentum": tc.momentum,
            "resample_noise": tc.resample_noise,
            "debug_certify": tc.debug_certify,
            "checkpoint_every": tc.checkpoint_every,
        },
    }


def scenario_from_json(data: dict) -> benchmark.BenchmarkScenario:
    base = scenario_to_json(benchmark.benchmark_scenario())
    merged = dict(base)
    for key, val in data.items():
        if isinstance(val, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **val}
        else:
            merged[key] = val

    topo = Topology(merged["topology"]["n_agents"],
                    [tuple(e) for e in merged["topology"]["edges"]])
    dims = [AgentDims(**d) for d in merged["agent_dims"]]
    spec = build_from_topology(topo, dims)

    veh = merged["vehicle"]
    params = VehicleParams(
        masses=np.asarray(veh["masses"], dtype=float),
        frictions=np.asarray(veh["frictions"], dtype=float),
        ts=float(veh["ts"]),
        spring_gains={_parse_edge(k): float(v)
                      for k, v in veh["spring_gains"].items()},
        ref_gains=np.asarray(veh["ref_gains"], dtype=float),
        rest_lengths={_parse_edge(k): float(v)
                      for k, v in veh["rest_lengths"].items()},
        targets=np.asarray(veh["targets"], dtype=float))
    fleet = VehicleFleet(params, topo)

    lj = merged["loss"]
    loss_cfg = LossConfig(
        Q=np.asarray(lj["Q"], dtype=float),
        collision_weight=float(lj["collision_weight"]),
        collision_distance=float(lj["collision_distance"]),
        obstacle_weight=float(lj["obstacle_weight"]),
        obstacles=tuple((np.asarray(o["center"], dtype=float),
                         np.asarray(o["shape"], dtype=float))
                        for o in lj["obstacles"]),
        formation_weight=float(lj["formation_weight"]),
        formation_targets=tuple((int(i), int(j), float(d))
                                for i, j, d in lj["formation_targets"]),
        barrier_eps=float(lj["barrier_eps"]))

    nj = merged["noise"]
    noise = NoiseModel(mean=np.asarray(nj["mean"], dtype=float),
                       std=float(nj["std"]),
                       window=int(nj["window"]),
                       window_std=float(nj["window_std"]))

    train_cfg = TrainingConfig(**merged["training"])
    cells = merged["cells"]
    return benchmark.BenchmarkScenario(
        fleet=fleet, spec=spec, loss_cfg=loss_cfg, train_cfg=train_cfg,
        noise=noise, gamma_R=float(merged["gamma_R"]),
        state_dim=int(cells["state_dim"]),
        neuron_dim=int(cells["neuron_dim"]),
        act=ActivationKind(cells["activation"]))


def load_scenario(path) -> benchmark.BenchmarkScenario:
    with open(path) as fh:
        return scenario_from_json(json.load(fh))


def save_scenario(sc: benchmark.BenchmarkScenario, path):
    with open(path, "w") as fh:
        json.dump(scenario_to_json(sc), fh, indent=2)
