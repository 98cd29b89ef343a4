"""
End-to-end runs: synthetic data, the full clustering pipeline with on-disk
artifacts, eta2 tuning and the projection benchmark.
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import statistics
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from . import io as dio
from .core import DataMatrix, DsscError, DsscParams, StochasticAffinity, ValidationError
from .dsproj import LsrCost, active_set_project, altproj_project, dual_project
from .jdssc import StopRule, jdssc_solve, safe_tau
from .metrics import evaluate
from .selfexpr import ensc_solve, lsr_dense
from .spectral import ClusterLabels, cluster_pipeline

logger = logging.getLogger(__name__)

FULL_DUAL_MAX_N = 3000
BENCH_MAX_ITER = 5000


class StageError(DsscError):
    """Wraps a failure with the pipeline stage it came from."""

    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.cause = exc


@dataclass(frozen=True)
class SynthSpec:
    num_subspaces: int
    subspace_dim: int
    ambient_dim: int
    points_per_subspace: int
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_subspaces < 1 or self.subspace_dim < 1 or self.points_per_subspace < 1:
            raise ValidationError("subspace count, dimension and size must be positive")
        if not self.subspace_dim < self.ambient_dim:
            raise ValidationError("subspace_dim must be smaller than ambient_dim")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if self.points_per_subspace < self.subspace_dim + 1:
            warnings.warn("fewer points than subspace_dim + 1 per subspace", RuntimeWarning, stacklevel=3)

    @property
    def n(self):
        return self.num_subspaces * self.points_per_subspace


def synth(spec):
    """Union of random linear subspaces with unit-norm points.

    Returns ``(DataMatrix, ClusterLabels)``; bit-identical for a given spec.
    """
    rng = np.random.default_rng(spec.seed)
    blocks = []
    for _ in range(spec.num_subspaces):
        basis, _ = np.linalg.qr(rng.standard_normal((spec.ambient_dim, spec.subspace_dim)))
        pts = basis @ rng.standard_normal((spec.subspace_dim, spec.points_per_subspace))
        if spec.noise_sigma > 0:
            pts = pts + spec.noise_sigma * rng.standard_normal(pts.shape)
        blocks.append(pts)
    X = np.hstack(blocks)
    X = X / np.linalg.norm(X, axis=0)
    labels = np.repeat(np.arange(spec.num_subspaces), spec.points_per_subspace)
    return DataMatrix(X, unit_normalized=True), ClusterLabels(labels, spec.num_subspaces)


# -- affinity computation -----------------------------------------------------


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except DsscError as exc:
        raise StageError(name, exc) from exc


def adssc_affinity(X, cfg):
    """Self-expression then projection; returns ``(StochasticAffinity, info)``."""
    p = cfg.params
    n = X.n
    info = {}
    if cfg.selfexpr_backend == "lsr_woodbury":
        cost = _stage("selfexpr", LsrCost, X, p.eta1)
    elif cfg.selfexpr_backend == "lsr_dense":
        cost = np.abs(_stage("selfexpr", lsr_dense, X, p.eta1, zero_diag=True).toarray())
    else:
        cost = np.abs(_stage("selfexpr", ensc_solve, X, p.eta1, p.eta3).toarray())
    method = cfg.projection
    if method == "auto":
        method = "dual" if n <= FULL_DUAL_MAX_N else "active-set"
    info["projection"] = method
    if method == "dual":
        if cfg.support.forbid_diag:
            raise ValidationError("forbid_diag needs the active-set projection")
        A = _stage("dsproj", dual_project, cost, p.eta2, tol=cfg.tol)
    else:
        A, as_info = _stage(
            "dsproj",
            active_set_project,
            cost,
            p.eta2,
            tol=cfg.tol,
            k_top=cfg.support.k_top,
            n_perms=cfg.support.n_perms,
            seed=cfg.support.seed,
            forbid_diag=cfg.support.forbid_diag,
            return_info=True,
        )
        info["outer_iterations"] = as_info.outer_iterations
        info["support_sizes"] = as_info.support_sizes
    return A, info


def jdssc_affinity(X, cfg):
    p = cfg.params
    if p.tau > safe_tau(X, p):
        p = replace(p, tau=0.99 * safe_tau(X, p))
    res = _stage("jdssc", jdssc_solve, X, p, StopRule(max_iter=cfg.max_iter), raise_on_failure=True)
    return res.affinity, {"iterations": res.iterations, "residuals": res.residuals}


def compute_affinity(X, cfg):
    if cfg.method == "jdssc":
        return jdssc_affinity(X, cfg)
    return adssc_affinity(X, cfg)


# -- full pipeline ------------------------------------------------------------


@dataclass
class PipelineResult:
    labels: ClusterLabels
    affinity: StochasticAffinity
    report: object | None
    info: dict = field(default_factory=dict)
    restart_mean: dict | None = None


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(cfg, k, inputs, info):
    return {
        "config": dio.dump_config(cfg),
        "k": k,
        "seeds": {
            "support": cfg.support.seed,
            "spectral": cfg.spectral.seed,
        },
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)} for name, p in inputs.items() if p},
        "solver_info": info,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj)}")


def run_pipeline(cfg, X, k=None, truth=None, out_dir=None, inputs=None, avg_metrics=False):
    """Affinity, spectral clustering and (with ``truth``) scores.

    ``k`` defaults to ``cfg.params.k`` and then to the number of distinct
    truth labels. With ``out_dir`` the affinity triplets, labels, report
    JSON and a manifest holding the resolved config are written there.
    The labels are those of the best-inertia k-means restart; with
    ``avg_metrics`` (and ``truth``) ACC and NMI averaged over all restarts
    are also reported as ``restart_mean``.
    """
    if truth is not None and not isinstance(truth, ClusterLabels):
        truth = ClusterLabels.from_array(truth)
    k = k or cfg.params.k or (truth.k if truth is not None else None)
    if k is None:
        raise ValidationError("the cluster count k is required")
    if truth is not None and truth.n != X.n:
        raise ValidationError(f"{truth.n} labels for {X.n} points")
    replace(cfg.params, k=k).check_k(X.n)
    t0 = time.perf_counter()
    A, info = compute_affinity(X, cfg)
    info["affinity_seconds"] = time.perf_counter() - t0
    sc = cfg.spectral
    labels, _, runs = _stage(
        "spectral",
        cluster_pipeline,
        A,
        k,
        extra_vec=sc.extra_vec,
        restarts=sc.restarts,
        seed=sc.seed,
        mode=sc.laplacian,
        return_all=True,
    )
    report = evaluate(labels, truth, A) if truth is not None else None
    restart_mean = None
    if avg_metrics and truth is not None:
        scores = [evaluate(lab, truth) for lab, _ in runs]
        restart_mean = {
            "acc": statistics.fmean(r.acc for r in scores),
            "nmi": statistics.fmean(r.nmi for r in scores),
            "restarts": len(scores),
        }
    result = PipelineResult(labels, A, report, info, restart_mean)
    if out_dir is not None:
        write_artifacts(out_dir, cfg, k, result, inputs or {})
    return result


def report_dict(result):
    d = result.report.as_dict()
    if result.restart_mean is not None:
        d["restart_mean"] = result.restart_mean
    return d


def write_artifacts(out_dir, cfg, k, result, inputs):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        dio.write_sparse_affinity(out / "affinity.csv", result.affinity)
        dio.write_labels(out / "labels.txt", result.labels)
        if result.report is not None:
            (out / "report.json").write_text(json.dumps(report_dict(result), sort_keys=True) + "\n")
        info = {k_: v for k_, v in result.info.items() if k_ != "affinity_seconds"}
        manifest = _manifest(cfg, k, inputs, info)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
        (out / "config.ini").write_text(manifest["config"])
    except OSError as exc:
        raise dio.FormatError(f"cannot write artifacts to {out}: {exc}") from exc


# -- eta2 selection -----------------------------------------------------------


def n_components(A):
    """Connected components of the symmetrized support graph."""
    A = A.entries if isinstance(A, StochasticAffinity) else sp.csr_matrix(A)
    G = (abs(A) + abs(A).T) > 0
    return int(connected_components(G, directed=False)[0])


def tune_eta2(X, cfg, k, lo=1e-6, hi=10.0, iters=20):
    """Smallest eta2 (log-bisection) whose affinity has at most ``k`` components.

    Larger eta2 gives denser affinities and hence fewer components. Returns
    ``(eta2, n_components)``.
    """
    if cfg.method != "adssc":
        raise ValidationError("eta2 tuning is implemented for the sequential model")

    def comps(eta2):
        c = replace(cfg, params=replace(cfg.params, eta2=eta2))
        return n_components(adssc_affinity(X, c)[0])

    c_hi = comps(hi)
    if c_hi > k:
        return hi, c_hi
    c_lo = comps(lo)
    if c_lo <= k:
        return lo, c_lo
    llo, lhi = np.log(lo), np.log(hi)
    for _ in range(iters):
        mid = 0.5 * (llo + lhi)
        c_mid = comps(float(np.exp(mid)))
        if c_mid <= k:
            lhi, c_hi = mid, c_mid
        else:
            llo = mid
    return float(np.exp(lhi)), c_hi


# -- projection benchmark -----------------------------------------------------


@dataclass(frozen=True)
class BenchInstance:
    name: str
    cost: object
    eta2: float

    @property
    def n(self):
        return self.cost.shape[0] if hasattr(self.cost, "shape") else self.cost.n


@dataclass(frozen=True)
class BenchRow:
    instance: str
    n: int
    method: str
    seconds: float
    iterations: int
    converged: bool

    def status(self):
        return f"{self.seconds:.4f}" if self.converged else "NC"


def gaussian_instance(n, seed=0, gamma=0.5):
    """Symmetrized |G| of a standard Gaussian matrix, scaled to max entry 1."""
    G = np.abs(np.random.default_rng(seed).standard_normal((n, n)))
    C = 0.5 * (G + G.T)
    return BenchInstance(f"gaussian-{n}", C / C.max(), gamma)


def lsr_instance(n, seed=0, gamma=0.01, eta1=1.0):
    """Ridge coefficients of ten 5-dimensional subspaces in R^15."""
    per = max(1, n // 10)
    X, _ = synth(SynthSpec(10, 5, 15, per, 0.0, seed))
    cost = LsrCost(X, eta1)
    return BenchInstance(f"lsr-{X.n}", cost.row_block(0, X.n), gamma)


def _run_method(method, inst, tol):
    if method == "altproj":
        r = altproj_project(inst.cost, inst.eta2, max_iter=BENCH_MAX_ITER, tol=tol)
        return r.matrix, r.iterations, r.converged
    try:
        if method == "dual":
            A = dual_project(inst.cost, inst.eta2, tol=tol, max_iter=BENCH_MAX_ITER)
            return A, 1, True
        A, info = active_set_project(inst.cost, inst.eta2, tol=tol, return_info=True)
        return A, info.outer_iterations, True
    except DsscError:
        return None, BENCH_MAX_ITER, False


def bench_projection(instances, methods=("active-set", "dual", "altproj"), tol=1e-4, repeats=3, warmup=1):
    """Median wall time of each method on each instance.

    Returns ``(rows, ranking, results)`` where ``ranking`` maps instance
    names to method names sorted fastest first (non-converged methods last)
    and ``results`` holds the last affinity of each run.
    """
    rows, results, ranking = [], {}, {}
    for inst in instances:
        for method in methods:
            for _ in range(warmup):
                _run_method(method, inst, tol)
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                A, iters, ok = _run_method(method, inst, tol)
                times.append(time.perf_counter() - t0)
            rows.append(BenchRow(inst.name, inst.n, method, statistics.median(times), iters, ok))
            results[(inst.name, method)] = A
        mine = [r for r in rows if r.instance == inst.name]
        ranking[inst.name] = [r.method for r in sorted(mine, key=lambda r: (not r.converged, r.seconds))]
    return rows, ranking, results


def bench_csv(rows):
    lines = ["instance,n,method,seconds,iterations,converged"]
    for r in rows:
        lines.append(f"{r.instance},{r.n},{r.method},{r.status()},{r.iterations},{str(r.converged).lower()}")
    return "\n".join(lines) + "\n"
