"""Command-line entry point: ``dssc <subcommand> ...``.

Exit codes: 0 success, 2 validation error, 3 non-convergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as dio
from .core import (
    ConvergenceError,
    DsscError,
    FormatError,
    StochasticAffinity,
    ValidationError,
    unit_normalize_columns,
)
from .dsproj import active_set_project, altproj_project, dual_project
from .metrics import evaluate
from .pipeline import (
    StageError,
    SynthSpec,
    bench_csv,
    bench_projection,
    gaussian_instance,
    lsr_instance,
    report_dict,
    run_pipeline,
    synth,
    tune_eta2,
)
from .selfexpr import ensc_solve, lsr_dense
from .spectral import cluster_pipeline

EXIT_OK, EXIT_VALIDATION, EXIT_CONVERGENCE, EXIT_IO = 0, 2, 3, 4

logger = logging.getLogger("dssc")


def _add_matrix_input(p, name="data", help_="input matrix (CSV points-per-row or .bin)"):
    p.add_argument(name, help=help_)
    p.add_argument("--format", choices=("csv", "bin"), default=None, help="override format detection")
    p.add_argument("--transpose", action="store_true", help="CSV rows are dimensions, not points")


def _build_parser():
    ap = argparse.ArgumentParser(prog="dssc", description="Doubly stochastic subspace clustering")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cluster", help="affinity + spectral clustering (full pipeline)")
    _add_matrix_input(p)
    p.add_argument("--k", type=int, help="number of clusters (default: from --truth)")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--preset", choices=sorted(dio.PRESETS))
    p.add_argument("--method", choices=dio.METHODS)
    p.add_argument("--backend", choices=dio.BACKENDS)
    p.add_argument("--projection", choices=dio.PROJECTIONS)
    p.add_argument("--eta1", type=float)
    p.add_argument("--eta2", type=float)
    p.add_argument("--eta3", type=float)
    p.add_argument("--forbid-diag", action="store_true")
    p.add_argument("--tune-eta2", action="store_true", help="pick eta2 so the affinity has <= k components")
    p.add_argument("--truth", help="ground-truth labels for scoring")
    p.add_argument("--normalize", action="store_true", help="unit-normalize columns first")
    p.add_argument("--seed", type=int, help="seed for supports and k-means")
    p.add_argument("--avg-metrics", action="store_true", help="also report ACC/NMI averaged over k-means restarts")
    p.add_argument("--out", "-o", required=True, help="output directory")

    p = sub.add_parser("selfexpr", help="self-expressive coefficients")
    _add_matrix_input(p)
    p.add_argument("--eta1", type=float, required=True)
    p.add_argument("--eta3", type=float, default=0.0)
    p.add_argument("--keep-diag", action="store_true", help="ridge closed form without the zero-diagonal constraint")
    p.add_argument("--out", "-o", required=True, help="output triplet CSV")

    p = sub.add_parser("project", help="project |C| onto the doubly stochastic matrices")
    _add_matrix_input(p, "cost", "cost matrix: triplet CSV with '# n=' header, or a square dense matrix")
    p.add_argument("--eta2", type=float, required=True)
    p.add_argument("--method", choices=("dual", "active-set", "altproj"), default="active-set")
    p.add_argument("--support-topk", type=int, default=15)
    p.add_argument("--support-perms", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-iter", type=int, default=5000, help="altproj iteration cap")
    p.add_argument("--forbid-diag", action="store_true")
    p.add_argument("--out", "-o", required=True)

    p = sub.add_parser("spectral", help="spectral clustering of an affinity")
    p.add_argument("affinity", help="triplet CSV")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--extra-vec", action="store_true")
    p.add_argument("--restarts", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--laplacian", choices=("auto", "unnorm", "sym", "rw"), default="auto")
    p.add_argument("--out", "-o", help="labels file (default: stdout)")

    p = sub.add_parser("eval", help="score predicted labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--affinity")

    p = sub.add_parser("synth", help="union-of-subspaces data")
    p.add_argument("--subspaces", type=int, default=10)
    p.add_argument("--dim", type=int, default=5)
    p.add_argument("--ambient", type=int, default=15)
    p.add_argument("--per", type=int, default=40, help="points per subspace")
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("csv", "bin"), default=None)
    p.add_argument("--out", "-o", required=True, help="data file")
    p.add_argument("--labels", required=True, help="labels file")

    p = sub.add_parser("bench", help="projection runtime comparison")
    p.add_argument("--sizes", type=int, nargs="+", default=[500])
    p.add_argument("--kinds", nargs="+", choices=("gaussian", "lsr"), default=["gaussian", "lsr"])
    p.add_argument("--methods", nargs="+", choices=("active-set", "dual", "altproj"), default=["active-set", "dual", "altproj"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", "-o", help="CSV output (default: stdout)")
    return ap


def _read_data(args):
    return dio.read_matrix(args.data, format=args.format, transpose=args.transpose)


def _read_cost(args):
    path = Path(args.cost)
    with open(path) as fh:
        first = fh.readline()
    if first.startswith("# n="):
        return dio.read_sparse_affinity(path)
    M = dio.read_matrix(path, format=args.format, transpose=args.transpose).values
    if M.shape[0] != M.shape[1]:
        raise ValidationError(f"cost matrix must be square, got {M.shape}")
    return M


def cmd_cluster(args):
    cfg = dio.load_config(args.config, preset=args.preset)
    params = cfg.params
    for name in ("eta1", "eta2", "eta3"):
        v = getattr(args, name)
        if v is not None:
            params = replace(params, **{name: v})
    cfg = replace(
        cfg,
        method=args.method or cfg.method,
        selfexpr_backend=args.backend or cfg.selfexpr_backend,
        projection=args.projection or cfg.projection,
        params=params,
    )
    if args.forbid_diag:
        cfg = replace(cfg, support=replace(cfg.support, forbid_diag=True))
    if args.seed is not None:
        cfg = replace(cfg, support=replace(cfg.support, seed=args.seed), spectral=replace(cfg.spectral, seed=args.seed))
    cfg = replace(cfg)  # re-validate
    X = _read_data(args)
    if args.normalize:
        X = unit_normalize_columns(X)
    truth = dio.read_labels(args.truth) if args.truth else None
    k = args.k or (len(np.unique(truth)) if truth is not None else None)
    if args.tune_eta2:
        eta2, comps = tune_eta2(X, cfg, k)
        logger.info("tuned eta2=%.6g (%d components)", eta2, comps)
        cfg = replace(cfg, params=replace(cfg.params, eta2=eta2))
    res = run_pipeline(
        cfg, X, k=k, truth=truth, out_dir=args.out, inputs={"data": args.data, "truth": args.truth},
        avg_metrics=args.avg_metrics,
    )
    if res.report is not None:
        print(json.dumps(report_dict(res), sort_keys=True))
    return EXIT_OK


def cmd_selfexpr(args):
    X = _read_data(args)
    if args.eta3 > 0:
        C = ensc_solve(X, args.eta1, args.eta3)
    else:
        C = lsr_dense(X, args.eta1, zero_diag=not args.keep_diag)
    dio.write_sparse_affinity(args.out, C.entries)
    return EXIT_OK


def cmd_project(args):
    C = _read_cost(args)
    if args.method == "altproj":
        dense = C.toarray() if hasattr(C, "toarray") else C
        r = altproj_project(dense, args.eta2, max_iter=args.max_iter, tol=args.tol)
        if not r.converged:
            raise ConvergenceError(f"alternating projections did not converge in {r.iterations} iterations (NC)")
        A = r.matrix
    elif args.method == "dual":
        if args.forbid_diag:
            raise ValidationError("--forbid-diag needs --method active-set")
        A = dual_project(C, args.eta2, tol=args.tol)
    else:
        A = active_set_project(
            C,
            args.eta2,
            tol=args.tol,
            k_top=args.support_topk,
            n_perms=args.support_perms,
            seed=args.seed,
            forbid_diag=args.forbid_diag,
        )
    dio.write_sparse_affinity(args.out, A.entries if isinstance(A, StochasticAffinity) else A)
    return EXIT_OK


def cmd_spectral(args):
    A = dio.read_sparse_affinity(args.affinity)
    labels = cluster_pipeline(
        A, args.k, extra_vec=args.extra_vec, restarts=args.restarts, seed=args.seed, mode=args.laplacian
    )
    if args.out:
        dio.write_labels(args.out, labels)
    else:
        sys.stdout.write("".join(f"{v}\n" for v in labels.labels))
    return EXIT_OK


def cmd_eval(args):
    pred = dio.read_labels(args.pred)
    truth = dio.read_labels(args.truth)
    A = dio.read_sparse_affinity(args.affinity) if args.affinity else None
    report = evaluate(pred, truth, A)
    print(json.dumps(report.as_dict(), sort_keys=True))
    return EXIT_OK


def cmd_synth(args):
    X, y = synth(SynthSpec(args.subspaces, args.dim, args.ambient, args.per, args.sigma, args.seed))
    dio.write_matrix(args.out, X, format=args.format)
    dio.write_labels(args.labels, y)
    return EXIT_OK


def cmd_bench(args):
    instances = []
    for n in args.sizes:
        for kind in args.kinds:
            instances.append(gaussian_instance(n, args.seed) if kind == "gaussian" else lsr_instance(n, args.seed))
    rows, ranking, _ = bench_projection(instances, methods=tuple(args.methods), repeats=args.repeats)
    text = bench_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    for name, order in ranking.items():
        print(f"# {name}: {' < '.join(order)}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "cluster": cmd_cluster,
    "selfexpr": cmd_selfexpr,
    "project": cmd_project,
    "spectral": cmd_spectral,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "bench": cmd_bench,
}


def _exit_code(exc):
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, ConvergenceError):
        return EXIT_CONVERGENCE
    if isinstance(exc, (FormatError, OSError)):
        return EXIT_IO
    return EXIT_VALIDATION


def main(argv=None):
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DsscError, ValueError, OSError) as exc:
        print(f"dssc {args.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
