"""
Matrix, affinity and label files, plus run configuration.

Formats:

* CSV matrices: one data point per row (``transpose=True`` reads rows as
  dimensions instead). No header.
* Binary matrices: 16-byte header (magic ``DSSC``, u32 LE rows, u32 LE
  cols) followed by row-major float64 LE values of the d x n matrix.
* Sparse affinities: first line ``# n=<N>``, then ``i,j,value`` triplets,
  0-based, row-major, values in shortest round-trip decimal form.
* Labels: one integer per line.
* Config: INI-style ``key = value`` text with sections [method], [params],
  [support], [spectral] and optionally [io].
"""

from __future__ import annotations

import configparser
import csv
import io as _stdio
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .core import DataMatrix, DsscParams, FormatError, ValidationError

MAGIC = b"DSSC"
_HEADER = struct.Struct("<4sII")


def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in ("csv", "bin"):
            raise ValidationError(f"unknown matrix format {fmt!r}")
        return fmt
    return "bin" if Path(path).suffix.lower() in (".bin", ".dssc") else "csv"


def _open_read(path, mode="r"):
    try:
        return open(path, mode) if "b" in mode else open(path, mode, newline="")
    except OSError as exc:
        raise FormatError(f"cannot open {path}: {exc}") from exc


def read_matrix(path, format=None, transpose=False):
    """Load a :class:`DataMatrix` (points as columns).

    CSV rows are points unless ``transpose``; binary files store the d x n
    matrix directly and ``transpose`` flips it.
    """
    fmt = _infer_format(path, format)
    if fmt == "bin":
        with _open_read(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, rows, cols = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        body = raw[_HEADER.size:]
        if len(body) != 8 * rows * cols:
            raise FormatError(f"{path}: expected {rows * cols} float64 values, got {len(body) / 8:g}")
        M = np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)
        bad = np.argwhere(~np.isfinite(M))
        if bad.size:
            raise FormatError(f"{path}: non-finite value at row {bad[0][0]}, col {bad[0][1]}")
        M = M.T if transpose else M
    else:
        data = []
        with _open_read(path) as fh:
            width = None
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or all(not c.strip() for c in row):
                    continue
                if width is None:
                    width = len(row)
                elif len(row) != width:
                    raise FormatError(f"{path}: line {lineno} has {len(row)} fields, expected {width}")
                vals = []
                for col, cell in enumerate(row):
                    try:
                        v = float(cell)
                    except ValueError:
                        raise FormatError(f"{path}: cannot parse {cell!r} at row {lineno}, col {col + 1}")
                    if not np.isfinite(v):
                        raise FormatError(f"{path}: non-finite value {cell.strip()!r} at row {lineno}, col {col + 1}")
                    vals.append(v)
                data.append(vals)
        if not data:
            raise FormatError(f"{path}: no data")
        M = np.array(data, dtype=np.float64)
        M = M if transpose else M.T
    try:
        return DataMatrix(M)
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_matrix(path, X, format=None):
    """Write a d x n matrix; the inverse of :func:`read_matrix`."""
    M = X.values if isinstance(X, DataMatrix) else np.asarray(X, dtype=np.float64)
    fmt = _infer_format(path, format)
    if fmt == "bin":
        rows, cols = M.shape
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, rows, cols))
            fh.write(np.ascontiguousarray(M, dtype="<f8").tobytes())
    else:
        with open(path, "w", newline="") as fh:
            for point in M.T:
                fh.write(",".join(repr(float(v)) for v in point) + "\n")


def write_sparse_affinity(path, A):
    """Triplet CSV with a ``# n=<N>`` header, row-major order."""
    A = A.entries if hasattr(A, "entries") else A
    A = sp.csr_matrix(A)
    A.sort_indices()
    n = A.shape[0]
    with open(path, "w", newline="") as fh:
        fh.write(f"# n={n}\n")
        for i in range(n):
            for p in range(A.indptr[i], A.indptr[i + 1]):
                fh.write(f"{i},{A.indices[p]},{float(A.data[p])!r}\n")


def read_sparse_affinity(path):
    with _open_read(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# n="):
        raise FormatError(f"{path}: missing dimension line '# n=<N>'")
    try:
        n = int(lines[0][4:].strip())
    except ValueError:
        raise FormatError(f"{path}: bad dimension line {lines[0]!r}")
    if n <= 0:
        raise FormatError(f"{path}: dimension must be positive, got {n}")
    rows, cols, vals = [], [], []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise FormatError(f"{path}: line {lineno} is not an i,j,value triplet")
        try:
            i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise FormatError(f"{path}: cannot parse line {lineno}: {line!r}")
        if not (0 <= i < n and 0 <= j < n):
            raise FormatError(f"{path}: index ({i}, {j}) out of range on line {lineno}")
        if (i, j) in seen:
            raise FormatError(f"{path}: duplicate entry ({i}, {j}) on line {lineno}")
        if not np.isfinite(v):
            raise FormatError(f"{path}: non-finite value on line {lineno}")
        seen.add((i, j))
        rows.append(i)
        cols.append(j)
        vals.append(v)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=np.float64)
    A.sort_indices()
    return A


def read_labels(path):
    out = []
    with _open_read(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            try:
                out.append(int(s))
            except ValueError:
                raise FormatError(f"{path}: line {lineno} is not an integer: {s!r}")
    return np.array(out, dtype=np.int64)


def write_labels(path, labels):
    labels = labels.labels if hasattr(labels, "labels") else np.asarray(labels)
    with open(path, "w") as fh:
        for v in labels:
            fh.write(f"{int(v)}\n")


# -- configuration ------------------------------------------------------------

# (eta1, eta2, eta3) per dataset and model
PRESETS = {
    "yaleb-jdssc": ("jdssc", 0.25, 0.2, 0.0),
    "yaleb-adssc": ("adssc", 0.5, 0.1, 0.0),
    "coil40-jdssc": ("jdssc", 25.0, 0.01, 0.1),
    "coil40-adssc": ("adssc", 25.0, 0.001, 0.0),
    "coil40-scattered-jdssc": ("jdssc", 0.25, 0.2, 0.0),
    "coil40-scattered-adssc": ("adssc", 50.0, 0.001, 0.0),
    "coil100-jdssc": ("jdssc", 25.0, 0.01, 0.1),
    "coil100-adssc": ("adssc", 50.0, 0.0005, 0.0),
    "coil100-scattered-jdssc": ("jdssc", 0.25, 0.1, 0.0),
    "coil100-scattered-adssc": ("adssc", 0.1, 0.025, 0.0),
    "umist-jdssc": ("jdssc", 1.0, 0.05, 0.0),
    "umist-adssc": ("adssc", 0.5, 0.05, 0.0),
    "umist-scattered-jdssc": ("jdssc", 0.01, 0.2, 0.0),
    "umist-scattered-adssc": ("adssc", 0.5, 0.01, 0.0),
    "orl-jdssc": ("jdssc", 1.0, 0.1, 0.1),
    "orl-adssc": ("adssc", 1.0, 0.05, 0.0),
    "mnist-scattered-adssc": ("adssc", 10.0, 0.001, 0.0),
    "emnist-scattered-adssc": ("adssc", 50.0, 0.001, 0.0),
}

METHODS = ("jdssc", "adssc")
BACKENDS = ("lsr_dense", "lsr_woodbury", "ensc")
PROJECTIONS = ("auto", "dual", "active-set")
LAPLACIANS = ("auto", "unnormalized", "symmetric", "random_walk")

# library defaults for the sequential path on unit-norm data
DEFAULT_ETA1 = 1.0
DEFAULT_ETA2 = 0.015


@dataclass(frozen=True)
class SupportConfig:
    k_top: int = 15
    n_perms: int = 3
    seed: int = 0
    forbid_diag: bool = False


@dataclass(frozen=True)
class SpectralConfig:
    restarts: int = 16
    extra_vec: bool = False
    seed: int = 0
    laplacian: str = "auto"


@dataclass(frozen=True)
class IOConfig:
    data: str | None = None
    labels: str | None = None
    transpose: bool = False
    output: str | None = None


@dataclass(frozen=True)
class RunConfig:
    method: str = "adssc"
    params: DsscParams = field(default_factory=lambda: DsscParams(DEFAULT_ETA1, DEFAULT_ETA2, 0.0))
    selfexpr_backend: str = "lsr_woodbury"
    projection: str = "auto"
    tol: float = 1e-4
    max_iter: int = 20000
    support: SupportConfig = field(default_factory=SupportConfig)
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    io: IOConfig = field(default_factory=IOConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.selfexpr_backend not in BACKENDS:
            raise ValidationError(f"backend must be one of {BACKENDS}, got {self.selfexpr_backend!r}")
        if self.projection not in PROJECTIONS:
            raise ValidationError(f"projection must be one of {PROJECTIONS}, got {self.projection!r}")
        if self.method == "adssc" and self.selfexpr_backend == "lsr_woodbury":
            if self.support.k_top < 0 or self.support.n_perms < 1:
                raise ValidationError("the Woodbury backend needs a support with n_perms >= 1")
        if self.selfexpr_backend == "lsr_woodbury" and self.params.eta3 != 0:
            raise ValidationError("the Woodbury backend is ridge-only; set eta3 = 0 or use ensc")
        if self.spectral.laplacian not in LAPLACIANS:
            raise ValidationError(f"laplacian must be one of {LAPLACIANS}")
        if self.spectral.restarts < 1:
            raise ValidationError("restarts must be >= 1")
        if not self.tol > 0:
            raise ValidationError("tol must be > 0")


_SECTIONS = {
    "method": {"method": str, "backend": str, "projection": str, "tol": float, "max_iter": int},
    "params": {"eta1": float, "eta2": float, "eta3": float, "rho": float, "tau": float, "k": int},
    "support": {"k_top": int, "n_perms": int, "seed": int, "forbid_diag": bool},
    "spectral": {"restarts": int, "extra_vec": bool, "seed": int, "laplacian": str},
    "io": {"data": str, "labels": str, "transpose": bool, "output": str},
}


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _convert(section, key, raw):
    kind = _SECTIONS[section][key]
    try:
        if kind is bool:
            return _parse_bool(raw)
        if kind is int:
            return int(raw)
        return kind(raw)
    except ValueError:
        raise ValidationError(f"[{section}] {key}: expected {kind.__name__}, got {raw!r}")


def preset_config(name):
    if name not in PRESETS:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    method, e1, e2, e3 = PRESETS[name]
    backend = "ensc" if e3 > 0 else "lsr_woodbury"
    return RunConfig(method=method, params=DsscParams(e1, e2, e3), selfexpr_backend=backend)


def parse_config(text, preset=None, strict=True, base=None):
    """Build a :class:`RunConfig` from INI text on top of ``preset``/``base``."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"malformed config: {exc}") from exc
    cfg = base or (preset_config(preset) if preset else RunConfig())
    values = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            if strict:
                raise ValidationError(f"unknown config section [{section}]")
            continue
        for key, raw in cp.items(section):
            if key not in _SECTIONS[section]:
                if strict:
                    raise ValidationError(f"unknown key {key!r} in [{section}]")
                continue
            values[(section, key)] = _convert(section, key, raw)

    def get(section, key, default):
        return values.get((section, key), default)

    p = cfg.params
    params = DsscParams(
        eta1=get("params", "eta1", p.eta1),
        eta2=get("params", "eta2", p.eta2),
        eta3=get("params", "eta3", p.eta3),
        rho=get("params", "rho", p.rho),
        tau=get("params", "tau", p.tau),
        k=get("params", "k", p.k),
    )
    support = SupportConfig(**{f.name: get("support", f.name, getattr(cfg.support, f.name)) for f in fields(SupportConfig)})
    spectral = SpectralConfig(**{f.name: get("spectral", f.name, getattr(cfg.spectral, f.name)) for f in fields(SpectralConfig)})
    iocfg = IOConfig(**{f.name: get("io", f.name, getattr(cfg.io, f.name)) for f in fields(IOConfig)})
    return RunConfig(
        method=get("method", "method", cfg.method),
        params=params,
        selfexpr_backend=get("method", "backend", cfg.selfexpr_backend),
        projection=get("method", "projection", cfg.projection),
        tol=get("method", "tol", cfg.tol),
        max_iter=get("method", "max_iter", cfg.max_iter),
        support=support,
        spectral=spectral,
        io=iocfg,
    )


def load_config(path=None, preset=None, strict=True):
    """Read a config file (or just the preset/defaults when ``path`` is None).

    Paths named under [io] must exist at load time.
    """
    text = ""
    if path is not None:
        with _open_read(path) as fh:
            text = fh.read()
    cfg = parse_config(text, preset=preset, strict=strict)
    for name in ("data", "labels"):
        p = getattr(cfg.io, name)
        if p is not None and not Path(p).exists():
            raise FormatError(f"config references missing file {p}")
    return cfg


def dump_config(cfg):
    """Serialize to INI text that :func:`parse_config` reads back identically."""
    out = _stdio.StringIO()
    p = cfg.params

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, float):
            return repr(v)
        return str(v)

    out.write("[method]\n")
    out.write(f"method = {cfg.method}\nbackend = {cfg.selfexpr_backend}\n")
    out.write(f"projection = {cfg.projection}\ntol = {fmt(cfg.tol)}\nmax_iter = {cfg.max_iter}\n\n")
    out.write("[params]\n")
    for name in ("eta1", "eta2", "eta3", "rho", "tau"):
        out.write(f"{name} = {fmt(float(getattr(p, name)))}\n")
    if p.k is not None:
        out.write(f"k = {p.k}\n")
    out.write("\n[support]\n")
    for f in fields(SupportConfig):
        out.write(f"{f.name} = {fmt(getattr(cfg.support, f.name))}\n")
    out.write("\n[spectral]\n")
    for f in fields(SpectralConfig):
        out.write(f"{f.name} = {fmt(getattr(cfg.spectral, f.name))}\n")
    io_items = [(f.name, getattr(cfg.io, f.name)) for f in fields(IOConfig)]
    io_items = [(k, v) for k, v in io_items if v is not None]
    if io_items:
        out.write("\n[io]\n")
        for k, v in io_items:
            out.write(f"{k} = {fmt(v)}\n")
    return out.getvalue()


def config_to_dict(cfg):
    return asdict(cfg)
