"""Command-line interface: mesh/gen/train/report plus a pipeline alias.

Every command is batch and deterministic given its flags and seed; the
environment variable ``MUBC_SEED`` supplies the default seed.  A run
directory contains a ``manifest.json`` (all flags echoed back, file hashes,
and one entry per training cell) and per-cell subdirectories with the
checkpoint, the epoch history CSV, and the per-sample test error CSV.
Completed cells are identified by a hash of their full configuration and are
skipped on re-runs, which makes ``train`` resumable and idempotent.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import fem, metrics, models, sampling, training
from .mesh import (build_graph, classify_nodes, generate_mesh, graph_diameter,
                   mesh_hash, read_mesh, write_mesh)


def _default_seed():
    return int(os.environ.get("MUBC_SEED", "0"))


def _int_list(text):
    return [int(x) for x in text.split(",") if x]


# ---------------------------------------------------------------------------
# commands


def cmd_mesh(args):
    mesh = generate_mesh(args.experiment, args.h)
    write_mesh(mesh, args.out)
    cls = classify_nodes(mesh)
    diam = graph_diameter(build_graph(mesh))
    print(f"mesh written to {args.out}: N_h={mesh.n_nodes} p_b={cls.p_b} "
          f"diameter={diam}")
    return 0


def cmd_gen(args):
    mesh = read_mesh(args.mesh)
    cls = classify_nodes(mesh)
    t_default = args.T
    if t_default is None:
        t_default = max(2, int((args.n - args.test) / 1.5) // 2 * 2)
    mu1_range = (args.mu1_min, args.mu1_max)
    ds = sampling.build_dataset(mesh, cls, args.n, args.test, t_default,
                                args.seed, mu1_range=mu1_range,
                                log=lambda msg: print(msg, file=sys.stderr))
    sampling.write_dataset(ds, args.out)
    print(f"dataset written to {args.out}: {ds.n_samples} samples "
          f"({ds.metadata['n_dropped']} dropped), test={len(ds.test_idx)}")
    return 0


def _ginn_config(args, m):
    return models.GinnConfig(f_features=args.F, rho=args.rho, m=m)


def _cell_dir(out_dir, arch, T, seed):
    return Path(out_dir) / f"{arch}_T{T}_s{seed}"


def _cell_hash(dataset_digest_hex, arch, T, seed, config):
    blob = json.dumps({"dataset": dataset_digest_hex, "arch": arch, "T": T,
                       "seed": seed, "config": config}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _build_model(arch, mesh, dataset, args):
    cls = classify_nodes(mesh)
    io = models.IOSpec.from_dataset(dataset)
    if arch == "ginn":
        graph = build_graph(mesh)
        return models.build_ginn(graph, cls, io, _ginn_config(args, io.m)), cls
    graph = build_graph(mesh)
    ginn_count = models.param_count(
        models.build_ginn(graph, cls, io, _ginn_config(args, io.m)).spec)
    model = models.build_fcnn(mesh.n_nodes, io, budget=ginn_count,
                              conv_filters=args.F)
    print(f"budget rule: ginn={ginn_count} fcnn={models.param_count(model.spec)} "
          f"(H={model.depth})")
    return model, cls


def _run_cell(payload):
    (mesh_path, data_path, arch, T, seed, cfg_dict, out_dir, args_dict) = payload
    args = argparse.Namespace(**args_dict)
    mesh = read_mesh(mesh_path)
    dataset = sampling.read_dataset(data_path)
    model, cls = _build_model(arch, mesh, dataset, args)
    model.init_params(seed)
    config = training.TrainConfig(**{**cfg_dict, "seed": seed})
    tr_idx, va_idx = sampling.resplit(dataset.n_samples, dataset.test_idx, T,
                                      dataset.seed)
    state, history = training.train(model, dataset, cls, config,
                                    train_idx=tr_idx, val_idx=va_idx)

    cell = _cell_dir(out_dir, arch, T, seed)
    cell.mkdir(parents=True, exist_ok=True)
    models.write_checkpoint(state, cell / "checkpoint.mubp")
    with open(cell / "model.json", "w") as f:
        f.write(model.spec.to_json())
    history.to_csv(cell / "history.csv")

    mass, stiff = fem.assemble_p1(mesh)
    x_test, y_test = dataset.split_arrays("test")
    rows = []
    for lo in range(0, x_test.shape[0], 256):
        hi = min(x_test.shape[0], lo + 256)
        pred = model.predict(x_test[lo:hi])
        for i in range(hi - lo):
            tuples = metrics.compute_errors(y_test[lo + i], pred[i], mass, stiff)
            tuples = np.atleast_2d(tuples)
            for fidx in range(tuples.shape[0]):
                rows.append((lo + i, fidx, *tuples[fidx]))
    with open(cell / "errors.csv", "w") as f:
        f.write("sample,field," + ",".join(metrics.METRIC_NAMES) + "\n")
        for row in rows:
            f.write(",".join(repr(v) if isinstance(v, float) else str(v)
                             for v in row) + "\n")

    info = {"arch": arch, "T": T, "seed": seed,
            "hash": _cell_hash(dataset.mesh_digest.hex(), arch, T, seed, cfg_dict),
            "best_val": history.best_val, "best_epoch": history.best_epoch,
            "epochs": history.n_epochs, "stopped_early": history.stopped_early,
            "aborted": history.aborted,
            "trainable_params": models.param_count(model.spec)}
    with open(cell / "cell.json", "w") as f:
        json.dump(info, f, indent=2, sort_keys=True)
    return info


def cmd_train(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = sampling.read_dataset(args.data)
    mesh = read_mesh(args.mesh)
    if mesh_hash(mesh) != dataset.mesh_digest:
        print("error: dataset was generated on a different mesh", file=sys.stderr)
        return 1

    cfg_dict = {"max_epochs": args.max_epochs}
    archs = args.arch.split(",")
    todo, cells = [], []
    for arch in archs:
        for T in args.sizes:
            for seed in args.seeds:
                h = _cell_hash(dataset.mesh_digest.hex(), arch, T, seed, cfg_dict)
                cell = _cell_dir(out_dir, arch, T, seed)
                info_path = cell / "cell.json"
                if info_path.exists():
                    info = json.loads(info_path.read_text())
                    if info.get("hash") == h and not info.get("aborted"):
                        print(f"skip completed cell {cell.name}")
                        cells.append(info)
                        continue
                todo.append((args.mesh, args.data, arch, T, seed, cfg_dict,
                             str(out_dir), {"F": args.F, "rho": args.rho}))

    failures = 0
    if args.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for info in pool.map(_run_cell, todo):
                cells.append(info)
    else:
        for payload in todo:
            try:
                cells.append(_run_cell(payload))
            except Exception as exc:
                print(f"cell {payload[2]}_T{payload[3]}_s{payload[4]} failed: {exc}",
                      file=sys.stderr)
                failures += 1

    manifest = {
        "experiment": dataset.experiment,
        "mesh_file": str(args.mesh), "mesh_hash": dataset.mesh_digest.hex(),
        "dataset_file": str(args.data),
        "train_config": cfg_dict, "model_flags": {"F": args.F, "rho": args.rho},
        "seeds": args.seeds, "sizes": args.sizes, "archs": archs,
        "out_dir": str(out_dir),
        "cells": sorted(cells, key=lambda c: (c["arch"], c["T"], c["seed"])),
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    for info in cells:
        if info.get("aborted"):
            failures += 1
    print(f"{len(cells)} cells complete, {failures} failed")
    return 1 if failures else 0


def _read_errors_csv(path):
    rows = np.genfromtxt(path, delimiter=",", skip_header=1)
    rows = np.atleast_2d(rows)
    return rows


def cmd_report(args):
    runs = Path(args.runs)
    manifest_path = runs / "manifest.json"
    if not manifest_path.exists():
        print(f"error: no manifest.json under {runs}", file=sys.stderr)
        return 1
    manifest = json.loads(manifest_path.read_text())
    if not manifest.get("cells"):
        print("error: manifest lists no completed cells", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    by_arch = {}
    for info in manifest["cells"]:
        cell = _cell_dir(runs, info["arch"], info["T"], info["seed"])
        rows = _read_errors_csv(cell / "errors.csv")
        per_field = rows[:, 2:8]
        by_arch.setdefault(info["arch"], {})[(info["seed"], info["T"])] = per_field

    reports = {}
    for arch, per_sample in by_arch.items():
        report = metrics.aggregate(per_sample)
        reports[arch] = report
        metrics.write_report_csv(metrics.report_rows(arch, report),
                                 out / f"report_{arch}.csv")
    summary = {arch: {str(t): stats for t, stats in rep.size_stats.items()}
               for arch, rep in reports.items()}
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)

    if args.format == "svg":
        for metric in metrics.METRIC_NAMES:
            metrics.plot_error_bands(reports, metric, out / f"report_{metric}.svg")

    _case_dumps(manifest, runs, out)
    print(f"report written to {out}")
    return 0


def _case_dumps(manifest, runs, out):
    """Best/median/worst test-case dumps for each model at the largest T."""
    mesh = read_mesh(manifest["mesh_file"])
    dataset = sampling.read_dataset(manifest["dataset_file"])
    mass, stiff = fem.assemble_p1(mesh)
    x_test, y_test = dataset.split_arrays("test")
    flags = argparse.Namespace(F=manifest["model_flags"]["F"],
                               rho=manifest["model_flags"]["rho"])
    for arch in sorted({c["arch"] for c in manifest["cells"]}):
        cands = [c for c in manifest["cells"] if c["arch"] == arch]
        top_t = max(c["T"] for c in cands)
        seed = min(c["seed"] for c in cands if c["T"] == top_t)
        cell = _cell_dir(runs, arch, top_t, seed)
        model, _ = _build_model(arch, mesh, dataset, flags)
        model.load_state(models.read_checkpoint(cell / "checkpoint.mubp"))
        preds = np.concatenate([model.predict(x_test[lo:lo + 256])
                                for lo in range(0, x_test.shape[0], 256)])
        per_sample = np.array([np.atleast_2d(metrics.compute_errors(
            y_test[i], preds[i], mass, stiff)).mean(axis=0)
            for i in range(x_test.shape[0])])
        ranker = per_sample[:, 4]  # re_L2
        if np.all(np.isnan(ranker)):
            ranker = per_sample[:, 1]
        best, median, worst = metrics.rank_cases(ranker)
        for label, idx in (("best", best), ("median", median), ("worst", worst)):
            metrics.write_case_csv(out / f"cases_{arch}_{label}.csv", mesh.nodes,
                                   y_test[idx], preds[idx])


def cmd_pipeline(args):
    data_path = Path(args.out) / "dataset.mubc"
    Path(args.out).mkdir(parents=True, exist_ok=True)
    gen_args = argparse.Namespace(mesh=args.mesh, n=args.n, test=args.test,
                                  seed=args.seed, T=None, out=str(data_path),
                                  mu1_min=args.mu1_min, mu1_max=args.mu1_max)
    rc = cmd_gen(gen_args)
    if rc:
        return rc
    runs_dir = Path(args.out) / "runs"
    train_args = argparse.Namespace(data=str(data_path), mesh=args.mesh,
                                    arch=args.arch, sizes=args.sizes,
                                    seeds=args.seeds, out=str(runs_dir),
                                    max_epochs=args.max_epochs, F=args.F,
                                    rho=args.rho, jobs=args.jobs)
    rc = cmd_train(train_args)
    if rc:
        return rc
    report_args = argparse.Namespace(runs=str(runs_dir),
                                     out=str(Path(args.out) / "report"),
                                     format=args.format)
    return cmd_report(report_args)


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="mubc",
                                description="boundary-condition PDE surrogates")
    sub = p.add_subparsers(dest="command", required=True)

    mesh_p = sub.add_parser("mesh", help="generate an experiment mesh")
    mesh_p.add_argument("--experiment", required=True,
                        choices=["diffusion", "advdiff"])
    mesh_p.add_argument("--h", type=float, required=True)
    mesh_p.add_argument("--out", required=True)
    mesh_p.set_defaults(func=cmd_mesh)

    gen_p = sub.add_parser("gen", help="generate a solver dataset")
    gen_p.add_argument("--mesh", required=True)
    gen_p.add_argument("--n", type=int, required=True)
    gen_p.add_argument("--test", type=int, required=True)
    gen_p.add_argument("--seed", type=int, default=_default_seed())
    gen_p.add_argument("--T", type=int, default=None)
    gen_p.add_argument("--mu1-min", type=float, default=sampling.MU1_RANGE_ADVDIFF[0])
    gen_p.add_argument("--mu1-max", type=float, default=sampling.MU1_RANGE_ADVDIFF[1])
    gen_p.add_argument("--out", required=True)
    gen_p.set_defaults(func=cmd_gen)

    def add_train_flags(q):
        q.add_argument("--sizes", type=_int_list, default=[64, 256])
        q.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
        q.add_argument("--max-epochs", type=int, default=2000)
        q.add_argument("--F", type=int, default=4)
        q.add_argument("--rho", type=int, default=10)
        q.add_argument("--jobs", type=int, default=1)

    train_p = sub.add_parser("train", help="train model cells over seeds and sizes")
    train_p.add_argument("--data", required=True)
    train_p.add_argument("--mesh", required=True)
    train_p.add_argument("--arch", default="ginn",
                         help="ginn, fcnn, or a comma list of both")
    add_train_flags(train_p)
    train_p.add_argument("--out", required=True)
    train_p.set_defaults(func=cmd_train)

    rep_p = sub.add_parser("report", help="aggregate errors, tables, and plots")
    rep_p.add_argument("--runs", required=True)
    rep_p.add_argument("--out", required=True)
    rep_p.add_argument("--format", choices=["csv", "svg"], default="csv")
    rep_p.set_defaults(func=cmd_report)

    pipe_p = sub.add_parser("pipeline", help="gen + train + report in one go")
    pipe_p.add_argument("--mesh", required=True)
    pipe_p.add_argument("--n", type=int, required=True)
    pipe_p.add_argument("--test", type=int, required=True)
    pipe_p.add_argument("--seed", type=int, default=_default_seed())
    pipe_p.add_argument("--arch", default="ginn,fcnn")
    pipe_p.add_argument("--mu1-min", type=float, default=sampling.MU1_RANGE_ADVDIFF[0])
    pipe_p.add_argument("--mu1-max", type=float, default=sampling.MU1_RANGE_ADVDIFF[1])
    add_train_flags(pipe_p)
    pipe_p.add_argument("--format", choices=["csv", "svg"], default="csv")
    pipe_p.add_argument("--out", required=True)
    pipe_p.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
