"""Command-line pipeline: data generation, training, forecasting, UQ.

Subcommands share a configuration layering (packaged defaults, optional
--config JSON, explicit flags) and derive all randomness from the root seed
through named substreams. Dataset locations resolve through --data-root or
the GNNODE_DATA_ROOT environment variable.

Exit codes: 0 success, 2 configuration/usage error, 3 numerical or runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .config import (config_hash, data_root, load_config, substream,
                     write_manifest)
from .data import load_dataset, read_trajectory_csv, write_dataset
from .errors import ConfigError, GnnodeError
from .graph import canonical_graph, ensure_valid, validate
from .model import ModelHyper
from .simulator import (NoiseModel, PhysicsConfig, SweepConfig,
                        generate_pseudo_experimental, run_sweep)
from .tgmi import comparison_report
from .training import (FinetuneConfig, RunArrays, TrainConfig, evaluate_runs,
                       finetune, prepare_experimental_runs, pretrain)


def _say(args, msg):
    if not args.quiet:
        print(msg, flush=True)


def _cfg(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = int(args.seed)
    return load_config(getattr(args, "config", None), overrides)


def _load_ckpt(path):
    from .checkpoint import load_checkpoint
    return load_checkpoint(path)


def _runs_from(trajs, graph):
    return [RunArrays.from_trajectory(t, graph) for t in trajs]


# -- subcommand implementations ----------------------------------------------

def cmd_gen_data(args):
    cfg = _cfg(args)
    seed = cfg["seed"]
    d = cfg["data"]
    graph = canonical_graph()
    ensure_valid(graph)
    physics = PhysicsConfig()
    root = data_root(args.data_root)

    n_edge = min(10, d["n_train"]) if d.get("edge_cases", True) else 0
    sweep_tr = SweepConfig(n_designs=d["n_train"] - n_edge,
                           n_edge_cases=n_edge, horizon_s=d["horizon_s"],
                           nonuniform_every=d.get("nonuniform_every", 5),
                           nonuniform_range=tuple(
                               d.get("nonuniform_dt_range", (0.4, 1.6))))
    sweep_va = SweepConfig(n_designs=d["n_val"], n_edge_cases=0,
                           horizon_s=d["horizon_s"], nonuniform_every=0)
    _say(args, f"generating {d['n_train']} training runs...")
    train = run_sweep(graph, physics, sweep_tr, substream(seed, "data",
                                                          "train"))
    _say(args, f"generating {d['n_val']} held-out runs...")
    val = run_sweep(graph, physics, sweep_va, substream(seed, "data", "val"))
    write_dataset(os.path.join(root, "train"), train,
                  manifest_extra={"seed": seed, "split": "train",
                                  "config_hash": config_hash(cfg)})
    write_dataset(os.path.join(root, "val"), val,
                  manifest_extra={"seed": seed, "split": "val",
                                  "config_hash": config_hash(cfg)})
    _say(args, f"wrote {len(train)}+{len(val)} runs under {root}")
    return 0


def cmd_fit_tgmi(args):
    cfg = _cfg(args)
    graph = canonical_graph()
    trajs = load_dataset(os.path.join(data_root(args.data_root), "train"))
    model, rows = comparison_report(graph, trajs)
    payload = {"holdout": model.report["holdout"],
               "context_ablation": rows,
               "n_runs": len(trajs)}
    out = args.out or "tgmi_report.json"
    with open(out, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    _say(args, f"wrote {out}")
    for row in rows:
        _say(args, f"  {row['node']}: r2={row['r2_context']:.4f} "
                   f"dmae={row['delta_mae']:+.4f}")
    return 0


def cmd_train(args):
    cfg = _cfg(args)
    graph = canonical_graph()
    ensure_valid(graph)
    root = data_root(args.data_root)
    train_trajs = load_dataset(os.path.join(root, "train"))
    val_trajs = load_dataset(os.path.join(root, "val"))
    hyper = ModelHyper(**cfg["model"])
    tcfg = TrainConfig(**cfg["pretrain"])
    rng = substream(cfg["seed"], "pretrain")
    out_dir = args.out or "artifacts"
    train_runs = _runs_from(train_trajs, graph)
    val_runs = _runs_from(val_trajs, graph)
    params, stats, tgmi, history = pretrain(
        graph, train_runs, val_runs, hyper, tcfg, rng, out_dir=out_dir,
        log=(None if args.quiet else print))
    metrics = evaluate_runs(params, graph, stats, tgmi, val_runs,
                            horizons=cfg["horizons"])
    write_manifest(out_dir, "eval_metrics.json", metrics)
    write_manifest(out_dir, "run_manifest.json", {
        "config_hash": config_hash(cfg), "seed": cfg["seed"],
        "graph_hash": graph.graph_hash(), "version": __version__})
    _say(args, json.dumps({"observed": metrics["observed"],
                           "missing": metrics["missing"]}, indent=1))
    return 0


def cmd_finetune(args):
    cfg = _cfg(args)
    f = cfg["finetune"]
    params, graph, stats, tgmi, _ = _load_ckpt(args.checkpoint)
    if stats is None or tgmi is None:
        raise ConfigError("checkpoint lacks normalization stats or imputer")
    physics = PhysicsConfig()
    rng_data = substream(cfg["seed"], "data", "experimental")
    trajs = generate_pseudo_experimental(
        graph, physics, n_runs=f["n_runs"], severity=f["severity"],
        rng=rng_data, noise=NoiseModel())
    runs = prepare_experimental_runs(trajs, graph,
                                     window=f["smooth_window"],
                                     polyorder=f["smooth_polyorder"])
    n_tr, n_va = f["n_train"], f["n_val"]
    if n_tr + n_va >= len(runs):
        raise ConfigError("finetune split exceeds generated run count")
    train_runs = runs[:n_tr]
    val_runs = runs[n_tr:n_tr + n_va]
    test_runs = runs[n_tr + n_va:]

    from .rollout import overall_mae, rollout_runs
    before = overall_mae(
        rollout_runs(params, graph, stats, tgmi, test_runs),
        test_runs, graph, group="observed")

    fcfg = FinetuneConfig(**{k: f[k] for k in (
        "epochs", "batch_size", "micro_batch", "batches_per_epoch", "k",
        "p_tf", "lr_gnn", "lr_actuator", "lr_head", "grad_clip",
        "use_cosine", "val_every")})
    out_dir = args.out or "artifacts"
    tuned, history = finetune(params, graph, stats, tgmi, train_runs,
                              val_runs, fcfg, substream(cfg["seed"],
                                                        "finetune"),
                              out_dir=out_dir,
                              log=(None if args.quiet else print))
    after = overall_mae(
        rollout_runs(tuned, graph, stats, tgmi, test_runs),
        test_runs, graph, group="observed")
    payload = {"test_mae_before_k": before, "test_mae_after_k": after,
               "relative_reduction": 1.0 - after / before}
    write_manifest(out_dir, "finetune_metrics.json", payload)
    _say(args, json.dumps(payload, indent=1))
    return 0


def cmd_rollout(args):
    params, graph, stats, tgmi, _ = _load_ckpt(args.checkpoint)
    traj = read_trajectory_csv(args.run)
    runs = _runs_from([traj], graph)
    from .rollout import rollout_runs
    preds = rollout_runs(params, graph, stats, tgmi, runs)[0]
    out = args.out or "forecast.csv"
    header = ",".join(["t_s"] + graph.plant_names)
    np.savetxt(out, np.column_stack([traj.t, preds]), delimiter=",",
               header=header, comments="", fmt="%.6f")
    _say(args, f"wrote {out}")
    return 0


def cmd_ensemble(args):
    cfg = _cfg(args)
    e = cfg["ensemble"]
    members = args.members or e["members"]
    scale = e["scale"] if args.scale is None else args.scale
    params, graph, stats, tgmi, _ = _load_ckpt(args.checkpoint)
    traj = read_trajectory_csv(args.run)
    run = _runs_from([traj], graph)[0]
    from .rollout import UncertaintySpec, ensemble_rollout
    spec = UncertaintySpec(temp_bias_k=e["temp_bias_k"],
                           flow_rel=e["flow_rel"], power_rel=e["power_rel"],
                           scale=scale)
    res = ensemble_rollout(params, graph, stats, tgmi, run, int(members),
                           spec, cfg["seed"],
                           levels=tuple(e["percentiles"]),
                           threads=args.threads,
                           member_chunk=args.member_chunk)
    out = args.out or "ensemble"
    np.savez(out + "_bands.npz", t=res.t, percentiles=res.percentiles,
             levels=np.array(res.levels))
    summary = {"members": res.members, "levels": list(res.levels),
               "mean_band_width_k": float(res.band_width.mean()),
               "seed": res.seed}
    with open(out + "_summary.json", "w") as fh:
        json.dump(summary, fh, indent=1)
    if args.plot:
        from .rollout import plot_bands
        plot_bands(res, run, graph, out + "_bands.svg")
    _say(args, json.dumps(summary, indent=1))
    return 0


def cmd_eval(args):
    cfg = _cfg(args)
    params, graph, stats, tgmi, _ = _load_ckpt(args.checkpoint)
    trajs = load_dataset(os.path.join(data_root(args.data_root),
                                      args.split))
    runs = _runs_from(trajs, graph)
    metrics = evaluate_runs(params, graph, stats, tgmi, runs,
                            horizons=cfg["horizons"])
    out = args.out or "eval_metrics.json"
    with open(out, "w") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True)
    _say(args, json.dumps({"observed": metrics["observed"],
                           "missing": metrics["missing"]}, indent=1))
    return 0


def cmd_bench(args):
    cfg = _cfg(args)
    b = cfg["bench"]
    params, graph, stats, tgmi, _ = _load_ckpt(args.checkpoint)
    traj = read_trajectory_csv(args.run)
    run = _runs_from([traj], graph)[0]
    from .rollout import benchmark
    rows = benchmark(params, graph, stats, tgmi, run,
                     members_list=args.members or b["members"],
                     threads_list=args.threads_list or b["threads"],
                     seed=cfg["seed"])
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=1)
    for r in rows:
        _say(args, f"threads={r['threads']} M={r['members']:3d} "
                   f"wall={r['wall_s']:8.3f} s speedup={r['speedup']:8.1f}x")
    return 0


def cmd_graph(args):
    graph = canonical_graph()
    report = validate(graph)
    payload = {"hash": graph.graph_hash(), "n_plant": graph.n_plant,
               "violations": report.violations,
               "coverage": report.coverage}
    print(json.dumps(payload, indent=1, sort_keys=True))
    return 0 if report.ok else 3


# -- parser -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="gnnode",
        description="Graph neural-ODE surrogate for multi-loop thermal "
                    "plants: simulation, training, forecasting, UQ.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=False):
        sp.add_argument("--config", help="JSON config overriding defaults")
        sp.add_argument("--seed", type=int, help="root seed override")
        sp.add_argument("--quiet", action="store_true")
        if data:
            sp.add_argument("--data-root",
                            help="dataset root (default: $GNNODE_DATA_ROOT)")

    sp = sub.add_parser("gen-data", help="simulate training/held-out runs")
    common(sp, data=True)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("fit-tgmi", help="fit the imputer, report quality")
    common(sp, data=True)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_fit_tgmi)

    sp = sub.add_parser("train", help="pretrain on the simulated dataset")
    common(sp, data=True)
    sp.add_argument("--out", help="artifact directory (default: artifacts)")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("finetune",
                        help="adapt a checkpoint to the experimental regime")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", help="artifact directory (default: artifacts)")
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("rollout", help="forecast one run from its seeds")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--run", required=True, help="input trajectory CSV")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_rollout)

    sp = sub.add_parser("ensemble", help="percentile bands under input UQ")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--run", required=True)
    sp.add_argument("--members", type=int)
    sp.add_argument("--scale", type=float)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--member-chunk", type=int, default=8)
    sp.add_argument("--plot", action="store_true", help="also write an SVG")
    sp.add_argument("--out", help="output prefix (default: ensemble)")
    sp.set_defaults(fn=cmd_ensemble)

    sp = sub.add_parser("eval", help="horizon metrics on a dataset split")
    common(sp, data=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("bench", help="wall-clock speedup table")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--run", required=True)
    sp.add_argument("--members", type=int, nargs="+")
    sp.add_argument("--threads-list", type=int, nargs="+")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("graph", help="print graph hash/validation report")
    sp.set_defaults(fn=cmd_graph, quiet=False)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except GnnodeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
