"""Experiment driver: train kernels, compress them, and run solver suites.

Verbs: ``train``, ``compress``, ``solve``, ``suite``, ``eval-kernel``; each
takes ``--config`` (preset name or YAML path), ``--seed``, ``--out``.  On
failure a JSON error report goes to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import pathlib
import sys

import numpy as np

from . import compress as cmp
from . import config as cfgmod
from . import krylov, msnn, pde, train
from .errors import GreenprecError


# ---------------------------------------------------------------------------
# Building blocks shared by the verbs
# ---------------------------------------------------------------------------

def generate_problem_anchors(cfg: cfgmod.ExperimentConfig) -> pde.AnchorSet:
    coeffs = cfg.problem.coefficients()
    angles = cfg.problem.anchor_angles
    params = None if angles is None else [(a,) for a in angles]
    return pde.generate_anchors(coeffs, cfg.problem.anchor_grid, params=params,
                                scheme=cfg.problem.scheme)


def train_model(cfg: cfgmod.ExperimentConfig, out_dir, seed=None,
                progress=None):
    """Run the staged protocol; returns the final model."""
    training = cfg.training
    if seed is not None:
        training = dataclasses.replace(training, seed=seed)
    anchors = generate_problem_anchors(cfg)
    coeffs = cfg.problem.coefficients()
    model, reports = train.train_kernel(
        cfg.arch, coeffs, training, anchors, progress=progress,
        out_dir=out_dir)
    if out_dir is not None:
        msnn.save_checkpoint(model, pathlib.Path(out_dir) / "checkpoint_final.npz")
    return model


def eval_kernel_grid(model, grid: pde.Grid, params=None, out_path=None,
                     row_chunk: int = 256) -> np.ndarray:
    """Dense kernel table G[i, j] = G(x_i, x_j) over the grid, streamed to disk.

    With ``out_path`` the table is written incrementally as a .npy memmap;
    the (memmapped) array is returned either way.
    """
    pts = grid.interior_points
    n = pts.shape[0]
    if out_path is not None:
        table = np.lib.format.open_memmap(out_path, mode="w+", dtype=np.float64,
                                          shape=(n, n))
    else:
        table = np.empty((n, n))
    frozen = None if params is None else tuple(np.atleast_1d(params))
    for lo in range(0, n, row_chunk):
        hi = min(lo + row_chunk, n)
        X = np.repeat(pts[lo:hi], n, axis=0)
        Y = np.tile(pts, (hi - lo, 1))
        p = None if frozen is None else np.tile(frozen, (X.shape[0], 1))
        table[lo:hi] = msnn.eval_batch(model, X, Y, params=p).reshape(hi - lo, n)
    if out_path is not None:
        table.flush()
    return table


def write_kernel_slices(model, grid: pde.Grid, sources, out_path, thetas=None):
    """Kernel slices G(., y) for a few sources (and angles), as long-form CSV."""
    pts = grid.interior_points
    dim = pts.shape[1]
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = [f"x{d}" for d in range(dim)] + [f"y{d}" for d in range(dim)]
        header += ["theta", "value"]
        w.writerow(header)
        for y in sources:
            y = np.atleast_1d(np.asarray(y, dtype=float))
            Y = np.tile(y, (pts.shape[0], 1))
            for theta in (thetas if thetas is not None else [None]):
                p = None if theta is None else np.full((pts.shape[0], 1), theta)
                vals = msnn.eval_batch(model, pts, Y, params=p)
                for xi, v in zip(pts, vals):
                    w.writerow(list(xi) + list(y) + ["" if theta is None else theta, v])


def build_compressed_preconditioner(kernel, comp: cfgmod.CompressionConfig,
                                    dim: int, n_axis: int, h: float,
                                    anchor_grid: int, rng=None):
    """Choose sparse vs hierarchical per the decay diagnostic and build it.

    Returns (operator, info) where info records the chosen format and the
    a-posteriori validation result for hierarchical builds.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n = kernel.n
    r = comp.decay_radius_factor * h
    m_max = comp.resolve_m_max(anchor_grid, dim)
    fmt = comp.format
    rule = comp.rank_rule(n_axis, n)
    tree = None
    info = {"n": n, "radius": r, "m_max_bytes": m_max}

    if fmt == "auto":
        rho = cmp.decay_ratio(kernel, r)
        diag = np.abs(kernel.entry_pairs(np.arange(n), np.arange(n)))
        scale = max(float(diag.max()), 1e-300)
        tree = cmp.build_cluster_tree(kernel.points, comp.leaf_max(n_axis, n))
        mem_s = cmp.estimate_sparse_bytes(n, comp.default_sparse_p(dim))
        mem_h = cmp.estimate_hmatrix_bytes(tree, comp.eta, rule)
        fmt = cmp.choose_format(rho / scale, comp.tau_loc, mem_s, mem_h, m_max)
        info["max_decay_ratio"] = float(np.max(rho) / scale)
    info["format"] = fmt

    if fmt == cmp.SPARSE:
        spimat = cmp.build_sparse(kernel, r, comp.default_sparse_p(dim))
        info["memory_bytes"] = spimat.nbytes
        op = krylov.LinearOperator(n=n, apply=spimat.matvec)
        return op, info, spimat

    if tree is None:
        tree = cmp.build_cluster_tree(kernel.points, comp.leaf_max(n_axis, n))
    H = cmp.build_hmatrix(kernel, tree, comp.eta, rule, m_max=m_max, rng=rng)
    eps_h, accepted = cmp.validate_hmatrix(H, kernel, s=comp.validation_samples,
                                           tau=comp.tau, rng=rng)
    info.update(H.stats())
    info["eps_h"] = eps_h
    info["accepted"] = accepted
    op = krylov.LinearOperator(n=n, apply=H.matvec)
    return op, info, H


def _dense_operator_from_table(table):
    return krylov.LinearOperator(n=table.shape[0], apply=lambda v: table @ v)


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------

def _solve_three(A_op, M_op, solver: cfgmod.SolverConfig, res_dir, tag):
    rows = []
    for seed in solver.rhs_seeds:
        b = krylov.make_rhs(A_op.n, seed)
        _, rep = krylov.fgmres(A_op, M=M_op, b=b, m=solver.restart,
                               tol=solver.tol, max_it=solver.max_it)
        rows.append(rep)
        if res_dir is not None:
            rep.save_history_csv(pathlib.Path(res_dir) / f"{tag}_seed{seed}.csv")
    its = [r.iterations for r in rows]
    all_ok = all(r.converged for r in rows)
    return {
        "status": f"{np.mean(its):.1f}" if all_ok else "F",
        "it_mean": float(np.mean(its)),
        "it_std": float(np.std(its)),
        "runs": "/".join(str(r.iterations) + ("" if r.converged else "F") for r in rows),
        "converged": all_ok,
    }


def run_suite(cfg: cfgmod.ExperimentConfig, out_dir, seed=None,
              checkpoint=None, progress=None):
    """Train (or load), then compare unpreconditioned / dense-kernel /
    compressed-kernel FGMRES across the configured grid sizes."""
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res_dir = out / "residuals"
    res_dir.mkdir(exist_ok=True)
    coeffs = cfg.problem.coefficients()
    solver = cfg.solver

    ckpt_path = pathlib.Path(checkpoint) if checkpoint else out / "checkpoint_final.npz"
    if ckpt_path.is_file():
        model = msnn.load_checkpoint(ckpt_path)
        if model.arch != cfg.arch:
            raise GreenprecError("checkpoint architecture does not match the config")
    else:
        model = train_model(cfg, out_dir=out / "training", seed=seed,
                            progress=progress)
        msnn.save_checkpoint(model, ckpt_path)

    thetas = cfg.problem.theta_sweep if cfg.problem.parametric else [None]
    table_rows = []
    rng = np.random.default_rng(20_000 + (seed or cfg.training.seed))
    hstats_written = False

    for N in cfg.problem.grid_sizes:
        grid = pde.make_grid(cfg.problem.dim, N)
        n_total = grid.n_interior
        for theta in thetas:
            pvec = None if theta is None else (theta,)
            A = pde.assemble(grid, coeffs, cfg.problem.scheme, params=pvec)
            A_op = krylov.LinearOperator.from_matrix(A)
            tag_base = f"N{N}" + ("" if theta is None else f"_theta{theta:.4f}")

            kernel = cmp.kernel_from_model(model, grid.interior_points, params=pvec)

            dense_bytes = n_total * n_total * 8
            configs = [("none", None)]
            if dense_bytes <= solver.dense_cap_bytes:
                table = eval_kernel_grid(model, grid, params=pvec)
                configs.append(("dense", _dense_operator_from_table(table)))
            comp_op, comp_info, _ = build_compressed_preconditioner(
                kernel, cfg.compression, cfg.problem.dim, N, grid.h,
                cfg.problem.anchor_grid, rng=rng)
            if not hstats_written and comp_info["format"] == cmp.HMATRIX:
                with open(out / "hmatrix_stats.json", "w") as fh:
                    json.dump(comp_info, fh, indent=2)
                hstats_written = True
            configs.append((comp_info["format"], comp_op))

            for label, M_op in configs:
                summary = _solve_three(A_op, M_op, solver, res_dir,
                                       f"{tag_base}_{label}")
                table_rows.append({
                    "problem": cfg.problem.name, "N": N,
                    "theta": "" if theta is None else theta,
                    "preconditioner": label, **summary})

    with open(out / "iterations.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["problem", "N", "theta",
                                           "preconditioner", "status",
                                           "it_mean", "it_std", "runs",
                                           "converged"])
        w.writeheader()
        w.writerows(table_rows)

    # slice data for kernel figures
    dim = cfg.problem.dim
    slice_grid = pde.make_grid(dim, min(cfg.problem.grid_sizes))
    sources = ([(0.25,), (0.5,), (0.75,)] if dim == 1
               else [(0.25, 0.25), (0.5, 0.5), (0.75, 0.75)])
    write_kernel_slices(model, slice_grid, sources, out / "kernel_slices.csv",
                        thetas=cfg.problem.theta_sweep if cfg.problem.parametric else None)
    return table_rows


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def _cmd_train(args):
    cfg = cfgmod.resolve_config(args.config)
    out = pathlib.Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_model(cfg, out_dir=out, seed=args.seed, progress=_progress_printer())
    print(f"training complete; checkpoint at {out / 'checkpoint_final.npz'}")
    return 0


def _cmd_compress(args):
    cfg = cfgmod.resolve_config(args.config)
    out = pathlib.Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = msnn.load_checkpoint(args.checkpoint)
    N = args.grid_size or cfg.problem.grid_sizes[0]
    grid = pde.make_grid(cfg.problem.dim, N)
    pvec = (args.theta,) if args.theta is not None else None
    kernel = cmp.kernel_from_model(model, grid.interior_points, params=pvec)
    _, info, _ = build_compressed_preconditioner(
        kernel, cfg.compression, cfg.problem.dim, N, grid.h,
        cfg.problem.anchor_grid, rng=np.random.default_rng(args.seed or 0))
    with open(out / "hmatrix_stats.json", "w") as fh:
        json.dump(info, fh, indent=2)
    print(json.dumps(info, indent=2))
    return 0


def _cmd_solve(args):
    cfg = cfgmod.resolve_config(args.config)
    out = pathlib.Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    coeffs = cfg.problem.coefficients()
    N = args.grid_size or cfg.problem.grid_sizes[0]
    grid = pde.make_grid(cfg.problem.dim, N)
    pvec = (args.theta,) if args.theta is not None else None
    A = pde.assemble(grid, coeffs, cfg.problem.scheme, params=pvec)
    A_op = krylov.LinearOperator.from_matrix(A)

    M_op = None
    label = args.preconditioner
    if label != "none":
        if args.checkpoint is None:
            raise GreenprecError("--checkpoint is required with a preconditioner")
        model = msnn.load_checkpoint(args.checkpoint)
        if label == "dense":
            table = eval_kernel_grid(model, grid, params=pvec)
            M_op = _dense_operator_from_table(table)
        else:
            comp = cfg.compression
            if label in ("hmatrix", "sparse"):
                comp = dataclasses.replace(comp, format=label)
            kernel = cmp.kernel_from_model(model, grid.interior_points, params=pvec)
            M_op, info, _ = build_compressed_preconditioner(
                kernel, comp, cfg.problem.dim, N, grid.h,
                cfg.problem.anchor_grid, rng=np.random.default_rng(args.seed or 0))
            label = info["format"]
    summary = _solve_three(A_op, M_op, cfg.solver, out, f"N{N}_{label}")
    with open(out / "iterations.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["problem", "N", "theta",
                                           "preconditioner", "status",
                                           "it_mean", "it_std", "runs",
                                           "converged"])
        w.writeheader()
        w.writerow({"problem": cfg.problem.name, "N": N,
                    "theta": "" if args.theta is None else args.theta,
                    "preconditioner": label, **summary})
    print(f"{cfg.problem.name} N={N} [{label}]: {summary['runs']} "
          f"-> {summary['status']}")
    return 0


def _cmd_suite(args):
    cfg = cfgmod.resolve_config(args.config)
    out = args.out or cfg.output_dir
    rows = run_suite(cfg, out, seed=args.seed, checkpoint=args.checkpoint,
                     progress=_progress_printer())
    for r in rows:
        theta = f" theta={r['theta']:.3f}" if r["theta"] != "" else ""
        print(f"{r['problem']} N={r['N']}{theta} [{r['preconditioner']}]: "
              f"{r['runs']} -> {r['status']}")
    return 0


def _cmd_eval_kernel(args):
    cfg = cfgmod.resolve_config(args.config)
    out = pathlib.Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = msnn.load_checkpoint(args.checkpoint)
    if model.arch != cfg.arch:
        raise GreenprecError("checkpoint architecture does not match the config")
    N = args.grid_size or min(cfg.problem.grid_sizes)
    grid = pde.make_grid(cfg.problem.dim, N)
    pvec = (args.theta,) if args.theta is not None else None
    path = out / f"kernel_N{N}.npy"
    eval_kernel_grid(model, grid, params=pvec, out_path=path)
    print(f"wrote {path}")
    return 0


def _progress_printer():
    def progress(label, epoch, row):
        if epoch % 50 == 0 or "min_seed_weight" in row:
            print(f"[{label}] epoch {epoch}: {row}", flush=True)

    return progress


def build_parser():
    p = argparse.ArgumentParser(prog="greenprec",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, checkpoint=False, grid=False):
        sp.add_argument("--config", required=True,
                        help="preset name or YAML config path")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        if grid:
            sp.add_argument("--grid-size", type=int, default=None,
                            dest="grid_size")
            sp.add_argument("--theta", type=float, default=None)

    common(sub.add_parser("train", help="run the staged training protocol"))
    common(sub.add_parser("compress", help="compress a trained kernel"),
           checkpoint=True, grid=True)
    sp = sub.add_parser("solve", help="solve one system with a chosen preconditioner")
    common(sp, grid=True)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--preconditioner", default="none",
                    choices=["none", "dense", "auto", "hmatrix", "sparse"])
    sp = sub.add_parser("suite", help="run a full iteration-count experiment")
    common(sp)
    sp.add_argument("--checkpoint", default=None)
    common(sub.add_parser("eval-kernel", help="tabulate the kernel on a grid"),
           checkpoint=True, grid=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    handlers = {"train": _cmd_train, "compress": _cmd_compress,
                "solve": _cmd_solve, "suite": _cmd_suite,
                "eval-kernel": _cmd_eval_kernel}
    try:
        return handlers[args.verb](args)
    except Exception as exc:  # error report contract: JSON on stderr, nonzero exit
        report = {"error": type(exc).__name__, "message": str(exc),
                  "verb": args.verb}
        print(json.dumps(report), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
