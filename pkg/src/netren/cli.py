"""Command-line front-end: gain allocation, certification, simulation,
training, and export of plot-ready trajectory data.

Exit codes: 0 success, 2 configuration/validation failure, 3 runtime
divergence.  The environment variable NETREN_THREADS bounds the number of
compute threads.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import network
from .benchmark import benchmark_scenario
from .config import load_scenario, save_scenario, scenario_to_json
from .network import InterconnectionError
from .plant import DivergenceError, closed_loop_rollout, rollout_summary, \
    rollout_to_csv
from .training import (TrainableParams, controller_from_params, config_hash,
                       init_params, load_checkpoint, save_checkpoint,
                       history_to_csv, train)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _apply_thread_env():
    threads = os.environ.get("NETREN_THREADS")
    if threads:
        import torch
        torch.set_num_threads(int(threads))


def _load(args):
    if args.config:
        return load_scenario(args.config)
    return benchmark_scenario()


def _params_for(sc, args) -> TrainableParams:
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
        return params
    rng = np.random.default_rng(args.seed)
    return init_params(sc.spec, sc.state_dim, sc.neuron_dim, sc.gamma_R, rng,
                      act=sc.act)


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gains(args) -> int:
    sc = _load(args)
    sets = network.compute_index_sets(sc.spec)
    b = np.zeros(sc.spec.n_agents)
    if args.checkpoint:
        b = load_checkpoint(args.checkpoint)[0].b
    alloc = network.allocate_gains(sc.spec, sets, b, sc.gamma_R)
    report = network.certify(sc.spec, alloc)
    payload = {
        "gamma_R": sc.gamma_R,
        "b": b.tolist(),
        "alpha": alloc.alpha.tolist(),
        "gamma": alloc.gamma.tolist(),
        "out_connected": list(sets.out_connected),
        "lmi_max_eigenvalue": report.max_eigenvalue,
        "feasible": report.feasible,
    }
    print(json.dumps(payload, indent=2))
    if args.out:
        (_out_dir(args) / "gains.json").write_text(json.dumps(payload, indent=2))
    return EXIT_OK


def cmd_certify(args) -> int:
    sc = _load(args)
    sets = network.compute_index_sets(sc.spec)
    b = np.zeros(sc.spec.n_agents)
    if args.checkpoint:
        b = load_checkpoint(args.checkpoint)[0].b
    alloc = network.allocate_gains(sc.spec, sets, b, sc.gamma_R)
    report = network.certify(sc.spec, alloc)
    print(report.to_json())
    return EXIT_OK if report.feasible else EXIT_CONFIG


def cmd_simulate(args) -> int:
    sc = _load(args)
    params = _params_for(sc, args)
    controller = controller_from_params(sc.spec, params)
    rng = np.random.default_rng(args.seed)
    horizon = args.horizon or sc.train_cfg.horizon
    noise = sc.noise.sample(rng, horizon)
    if args.zero_noise:
        noise = np.zeros_like(noise)
    record = closed_loop_rollout(sc.fleet, controller, noise)
    out = _out_dir(args)
    (out / "trajectory.csv").write_text(rollout_to_csv(record, sc.fleet))
    summary = rollout_summary(record, sc.fleet)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    sc = _load(args)
    from dataclasses import replace
    if args.epochs is not None:
        sc.train_cfg = replace(sc.train_cfg, epochs=args.epochs)
    if args.debug_certify:
        sc.train_cfg = replace(sc.train_cfg, debug_certify=True)
    params0 = _params_for(sc, args)
    out = _out_dir(args)
    chash = config_hash(scenario_to_json(sc))

    def checkpoint_cb(epoch, params, losses):
        save_checkpoint(out / f"checkpoint-{epoch:05d}.json", params, epoch,
                        sc.train_cfg.seed, chash)

    result = train(sc.fleet, sc.spec, params0, sc.loss_cfg, sc.train_cfg,
                   sc.noise, checkpoint_cb=checkpoint_cb)
    save_checkpoint(out / "checkpoint-final.json", result.params,
                    sc.train_cfg.epochs, sc.train_cfg.seed, chash)
    (out / "loss_history.csv").write_text(
        history_to_csv(result.loss_history, ["loss"]))
    (out / "gain_history.csv").write_text(
        history_to_csv(result.gamma_history,
                       [f"gamma[{i}]" for i in range(sc.spec.n_agents)]))
    sets = network.compute_index_sets(sc.spec)
    alloc = network.allocate_gains(sc.spec, sets, result.params.b, sc.gamma_R)
    report = network.certify(sc.spec, alloc)
    (out / "certification.json").write_text(report.to_json())
    print(json.dumps({
        "initial_loss": float(result.loss_history[0]),
        "final_loss": float(result.loss_history[-1]),
        "loss_ratio": float(result.loss_history[-1] / result.loss_history[0]),
        "certified": report.feasible,
        "lmi_max_eigenvalue": report.max_eigenvalue,
    }, indent=2))
    return EXIT_OK if report.feasible else EXIT_CONFIG


def cmd_export(args) -> int:
    sc = _load(args)
    out = _out_dir(args)
    if args.checkpoint:
        params, meta = load_checkpoint(args.checkpoint)
        controller = controller_from_params(sc.spec, params)
        mats = {}
        for i, cell in enumerate(controller.cells):
            for name in ("A1", "B1", "B2", "C1", "D11", "D12", "C2", "D21", "D22"):
                mats[f"cell{i}_{name}"] = getattr(cell, name)
        np.savez(out / "controller_matrices.npz", **mats)
        print(f"wrote {out / 'controller_matrices.npz'}")
    save_scenario(sc, out / "config.json")
    print(f"wrote {out / 'config.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netren",
        description="Distributed cell-network controllers with certified "
                    "network-level L2 gain bounds.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True):
        p.add_argument("--config", type=str, default=None,
                       help="experiment config JSON (default: bundled benchmark)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=str, default=None, help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", type=str, default=None)

    p = sub.add_parser("gains", help="print the per-agent gain allocation")
    common(p)
    p.set_defaults(func=cmd_gains)

    p = sub.add_parser("certify", help="assemble and check the network certificate")
    common(p)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("simulate", help="closed-loop rollout to CSV")
    common(p)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--zero-noise", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="run the training loop")
    common(p)
    p.add_argument("--epochs", type=int, default=None, help="override epochs")
    p.add_argument("--debug-certify", action="store_true",
                   help="re-check the certificate every epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("export", help="export config and controller matrices")
    common(p)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    _apply_thread_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InterconnectionError as err:
        print(json.dumps({"error": "validation", "violations": err.violations}),
              file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, FileNotFoundError, KeyError) as err:
        print(json.dumps({"error": "config", "message": str(err)}),
              file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(json.dumps({"error": "divergence", "message": str(err)}),
              file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
