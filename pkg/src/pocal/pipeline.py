"""Configuration, CSV ingestion and the multi-output calibration workflow.

Physical files carry columns ``x_1..x_d, y_1..y_q``; computer files carry
``x_1..x_d, theta_1..theta_m, y_1..y_q``. Every run writes ``result.json``,
``path.csv`` and ``classification.csv`` into the output directory, each via a
temporary file and an atomic rename.
"""
from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from .data import ComputerDataset, PhysicalDataset
from .errors import CalibrationError, ExtrapolationError, SchemaError, ValidationError
from .estimators import build_problem, empirical_model_loss, output_weights
from .kernels import DomainBounds, KernelConfig
from .selection import LambdaPath, classify_variables, compute_path, default_lambda_grid, sobol_total_indices
from .surrogate import estimate_gp_params, estimate_hyperparams, fit_gp, fit_slope_model

log = logging.getLogger(__name__)

SURROGATES = ("ls", "gp")


def parse_vector(text, name: str = "value") -> Optional[tuple]:
    """Comma- or whitespace-separated floats; empty gives None."""
    if text is None:
        return None
    if not isinstance(text, str):
        return tuple(float(v) for v in text)
    parts = [p for p in re.split(r"[,\s]+", text.strip()) if p]
    if not parts:
        return None
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ValidationError(f"{name}: cannot parse {text!r} as numbers") from exc


def parse_lambda_grid(spec: Optional[str]):
    """Parse a lambda grid spec.

    ``auto`` or empty selects the data-driven default grid. ``auto:N`` uses N
    log-spaced points. ``log:LO:HI:N`` gives N log-spaced values in
    [LO, HI]. Anything else is read as an explicit list of values.
    Returns None for the default grid, an int for ``auto:N``, else an array.
    """
    if spec is None:
        return None
    s = str(spec).strip()
    if s in ("", "auto"):
        return None
    try:
        if s.startswith("auto:"):
            n = int(s[5:])
            if n < 1:
                raise ValueError
            return n
        if s.startswith("log:"):
            lo, hi, n = s[4:].split(":")
            lo, hi, n = float(lo), float(hi), int(n)
            if not (0 < lo <= hi) or n < 1:
                raise ValueError
            return np.logspace(np.log10(lo), np.log10(hi), n)
    except ValueError as exc:
        raise ValidationError(f"bad lambda grid spec {spec!r}") from exc
    vals = np.array(parse_vector(s, "lambda_grid"), dtype=float)
    if vals.size == 0 or np.any(~np.isfinite(vals)) or np.any(vals < 0):
        raise ValidationError(f"lambda grid values must be finite and >= 0: {spec!r}")
    return vals


@dataclass(frozen=True)
class RunConfig:
    physical: str
    computer: str
    theta0: tuple
    theta_lower: Optional[tuple] = None
    theta_upper: Optional[tuple] = None
    output_weights: Optional[tuple] = None
    weight_a: float = 0.2
    lambda_grid: Optional[str] = None
    phi: Optional[float] = None
    eta2: Optional[float] = None
    surrogate: str = "ls"
    seed: int = 0
    out: str = "out"
    mc_samples: int = 4096
    sobol_samples: int = 4096
    sobol_floor: float = 0.01
    workers: int = 1

    def __post_init__(self):
        if self.surrogate not in SURROGATES:
            raise ValidationError(f"surrogate must be one of {SURROGATES}, got {self.surrogate!r}")
        if self.phi is not None and not self.phi > 0:
            raise ValidationError("phi must be positive")
        if self.eta2 is not None and not self.eta2 >= 0:
            raise ValidationError("eta2 must be nonnegative")
        if self.mc_samples < 1:
            raise ValidationError("mc_samples must be positive")
        if self.seed < 0:
            raise ValidationError("seed must be nonnegative")
        if not self.theta0:
            raise ValidationError("theta0 is required")
        parse_lambda_grid(self.lambda_grid)

    @classmethod
    def from_file(cls, path: str, **overrides) -> "RunConfig":
        """Read ``key = value`` lines (UTF-8). Relative paths resolve against the file."""
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        except UnicodeDecodeError as exc:
            raise ValidationError(f"config {path} is not valid UTF-8") from exc
        raw = parse_key_values(text, path)
        base = os.path.dirname(os.path.abspath(path))
        for key in ("physical", "computer", "out"):
            if key in raw and not os.path.isabs(raw[key]):
                raw[key] = os.path.join(base, raw[key])
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        for req in ("physical", "computer", "theta0"):
            if req not in raw:
                raise ValidationError(f"missing required config key {req!r}")
        kw = {}
        for k, v in raw.items():
            if k in ("theta0", "theta_lower", "theta_upper", "output_weights"):
                kw[k] = parse_vector(v, k)
            elif k in ("weight_a", "phi", "eta2", "sobol_floor"):
                kw[k] = _to_number(v, k, float)
            elif k in ("seed", "mc_samples", "sobol_samples", "workers"):
                kw[k] = _to_number(v, k, int)
            else:
                kw[k] = str(v).strip() if v is not None else None
        return cls(**kw)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def _to_number(v, key, kind):
    if v is None or isinstance(v, (int, float)) and not isinstance(v, bool):
        return kind(v) if v is not None else None
    try:
        return kind(str(v).strip())
    except ValueError as exc:
        raise ValidationError(f"{key}: cannot parse {v!r}") from exc


def parse_key_values(text: str, source: str = "<config>") -> dict:
    """``key = value`` pairs; ``#`` and ``;`` start comments; keys are case-insensitive."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string("[run]\n" + text, source=source)
    except configparser.Error as exc:
        raise ValidationError(f"malformed config {source}: {exc}") from exc
    return dict(cp["run"])


# ---------------------------------------------------------------------------
# CSV schema

_COL = re.compile(r"^(x|theta|y)_([1-9][0-9]*)$")


@dataclass(frozen=True)
class CsvSchema:
    d: int
    m: int
    q: int

    @property
    def columns(self) -> list:
        return ([f"x_{i + 1}" for i in range(self.d)]
                + [f"theta_{i + 1}" for i in range(self.m)]
                + [f"y_{i + 1}" for i in range(self.q)])

    @classmethod
    def from_header(cls, header: Sequence[str], source: str, computer: bool) -> "CsvSchema":
        counts = {"x": 0, "theta": 0, "y": 0}
        order = []
        for col, name in enumerate(header, start=1):
            mt = _COL.match(name.strip())
            if not mt:
                raise SchemaError(f"{source}: line 1, column {col}: unexpected header {name!r}")
            kind, idx = mt.group(1), int(mt.group(2))
            counts[kind] += 1
            if idx != counts[kind]:
                raise SchemaError(f"{source}: line 1, column {col}: expected {kind}_{counts[kind]}, got {name!r}")
            order.append(kind)
        schema = cls(counts["x"], counts["theta"], counts["y"])
        if [c.strip() for c in header] != schema.columns:
            raise SchemaError(f"{source}: columns must be ordered x_*, theta_*, y_*")
        if schema.d < 1 or schema.q < 1:
            raise SchemaError(f"{source}: need at least one x_ and one y_ column")
        if computer and schema.m < 1:
            raise SchemaError(f"{source}: computer file needs theta_ columns")
        if not computer and schema.m:
            raise SchemaError(f"{source}: physical file must not contain theta_ columns")
        return schema


def read_csv(path: str, computer: bool):
    """Parse a design file into (schema, float matrix)."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise SchemaError(f"{path} is not valid UTF-8") from exc
    if text.startswith("﻿"):
        text = text[1:]
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise SchemaError(f"{path}: empty file (header row is mandatory)")
    schema = CsvSchema.from_header(rows[0], path, computer)
    names = schema.columns
    data = []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(names):
            raise SchemaError(f"{path}: line {line}: expected {len(names)} cells, found {len(row)}")
        vals = []
        for cell, name in zip(row, names):
            c = cell.strip()
            if not c:
                raise SchemaError(f"{path}: line {line}, column {name}: empty cell")
            try:
                v = float(c)
            except ValueError:
                raise SchemaError(f"{path}: line {line}, column {name}: not a number: {cell!r}") from None
            if not np.isfinite(v):
                raise SchemaError(f"{path}: line {line}, column {name}: non-finite value {cell!r}")
            vals.append(v)
        data.append(vals)
    if not data:
        raise SchemaError(f"{path}: no data rows")
    return schema, np.array(data, dtype=float)


def _fmt(v) -> str:
    return repr(float(v))


def atomic_write(path: str, text: str) -> None:
    """Write ``text`` to a sibling temp file, then rename over ``path``."""
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([v if isinstance(v, str) else _fmt(v) for v in r])
    return buf.getvalue()


def _ycols(y):
    return y[:, None] if y.ndim == 1 else y


def write_physical_csv(data: PhysicalDataset, path: str) -> None:
    schema = CsvSchema(data.d, 0, data.q)
    atomic_write(path, _csv_text(schema.columns, np.hstack([data.x, _ycols(data.y)])))


def write_computer_csv(data: ComputerDataset, path: str) -> None:
    schema = CsvSchema(data.d, data.m, data.q)
    atomic_write(path, _csv_text(schema.columns, np.hstack([data.x, data.theta, _ycols(data.y)])))


def read_physical(path: str, bounds: Optional[DomainBounds] = None) -> PhysicalDataset:
    schema, a = read_csv(path, computer=False)
    y = a[:, schema.d:]
    return PhysicalDataset(a[:, : schema.d], y[:, 0] if schema.q == 1 else y, bounds)


def read_computer(path: str, bounds=None, theta_bounds=None) -> ComputerDataset:
    schema, a = read_csv(path, computer=True)
    d, m = schema.d, schema.m
    y = a[:, d + m:]
    return ComputerDataset(a[:, :d], a[:, d:d + m], y[:, 0] if schema.q == 1 else y, bounds, theta_bounds)


def ingest(config: RunConfig):
    """Load and cross-check the physical and computer files of ``config``."""
    for key in ("physical", "computer"):
        p = getattr(config, key)
        if not os.path.isfile(p):
            raise ValidationError(f"{key} file not found: {p}")
    phys = read_physical(config.physical)
    tb = None
    if config.theta_lower is not None or config.theta_upper is not None:
        if config.theta_lower is None or config.theta_upper is None:
            raise ValidationError("theta_lower and theta_upper must be given together")
        tb = DomainBounds(np.array(config.theta_lower), np.array(config.theta_upper))
    comp = read_computer(config.computer, theta_bounds=tb)
    if phys.q != comp.q:
        raise SchemaError(f"physical file has q={phys.q} outputs, computer file has q={comp.q}")
    if phys.d != comp.d:
        raise SchemaError(f"physical file has d={phys.d} inputs, computer file has d={comp.d}")
    if len(config.theta0) != comp.m:
        raise ValidationError(f"theta0 has {len(config.theta0)} entries, computer file has m={comp.m}")
    if config.output_weights is not None and len(config.output_weights) != comp.q:
        raise ValidationError(f"output_weights has {len(config.output_weights)} entries, q={comp.q}")
    return phys, comp


# ---------------------------------------------------------------------------


def interpolate_observations(raw, targets) -> np.ndarray:
    """Piecewise-linear values at ``targets`` for each force level.

    ``raw`` is a sequence with one entry per force level; each entry is a
    sequence of (distance, value) pairs with strictly increasing distances.
    Returns an array of shape (levels, len(targets)). Targets outside the
    measured range raise ExtrapolationError.
    """
    t = np.atleast_1d(np.asarray(targets, dtype=float))
    out = np.empty((len(raw), t.size))
    for k, pts in enumerate(raw):
        pts = np.asarray(pts, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise ValidationError(f"level {k}: expected (distance, value) pairs")
        dist, val = pts[:, 0], pts[:, 1]
        if np.any(np.diff(dist) <= 0):
            raise ValidationError(f"level {k}: distances must be strictly increasing")
        for tv in t:
            if tv < dist[0] or tv > dist[-1]:
                raise ExtrapolationError(
                    f"target distance {tv!r} lies outside the measured range "
                    f"[{dist[0]!r}, {dist[-1]!r}] at level {k}"
                )
        out[k] = np.interp(t, dist, val)
    return out


# ---------------------------------------------------------------------------


@contextmanager
def stage(name: str):
    """Prefix library errors raised inside the block with the stage name."""
    try:
        yield
    except CalibrationError as exc:
        if exc.args and isinstance(exc.args[0], str) and not getattr(exc, "stage", None):
            exc.args = (f"[{name}] {exc.args[0]}",) + exc.args[1:]
        exc.stage = getattr(exc, "stage", None) or name
        raise


@dataclass
class CalibrationRun:
    config: RunConfig
    physical: PhysicalDataset
    computer: ComputerDataset
    problem: object
    path: Optional[LambdaPath] = None
    classification: object = None
    sobol: object = None
    files: dict = field(default_factory=dict)

    @property
    def summary(self) -> dict:
        return _summary(self)


def _fit_surrogates(config: RunConfig, comp: ComputerDataset) -> list:
    def fit(j):
        d = comp.output(j)
        if config.surrogate == "gp":
            return fit_gp(d, estimate_gp_params(d))
        return fit_slope_model(d)

    if config.workers > 1 and comp.q > 1:
        with ThreadPoolExecutor(min(config.workers, comp.q)) as ex:
            return list(ex.map(fit, range(comp.q)))
    return [fit(j) for j in range(comp.q)]


def prepare(config: RunConfig) -> CalibrationRun:
    """Ingest data, fit per-output surrogates and build the calibration problem."""
    with stage("ingest"):
        phys, comp = ingest(config)
    with stage("surrogate"):
        sur = _fit_surrogates(config, comp)
    w = (np.array(config.output_weights, float) if config.output_weights is not None
         else output_weights(comp.q, config.weight_a))
    kernel = None
    if config.phi is not None and config.eta2 is not None:
        kernel = KernelConfig(config.phi, config.eta2, config.mc_samples, config.seed)
    elif config.phi is not None or config.eta2 is not None:
        kernel = _partial_kernels(config, phys)
    with stage("kernel"):
        problem = build_problem(
            phys, sur if comp.q > 1 else sur[0], np.array(config.theta0, float), comp.theta_bounds,
            kernel=kernel, mc_samples=config.mc_samples, seed=config.seed,
            output_weights=w if comp.q > 1 else None, reduce=True, workers=config.workers,
        )
    return CalibrationRun(config, phys, comp, problem)


def _partial_kernels(config, phys):
    out = []
    for j in range(phys.q):
        est = estimate_hyperparams(phys, output=j if phys.q > 1 else None)
        phi = config.phi if config.phi is not None else est.phi
        eta2 = config.eta2 if config.eta2 is not None else est.eta2
        out.append(KernelConfig(phi, eta2, config.mc_samples, config.seed))
    return out


def _grid(config, problem):
    g = parse_lambda_grid(config.lambda_grid)
    if isinstance(g, int):
        return default_lambda_grid(problem, n_points=g)
    return g


def _sobol(run: CalibrationRun):
    """Per-output total indices; a parameter's index is its maximum over outputs."""
    cfg = run.config
    sur = run.problem.surrogate
    tot, se = [], []
    for j, s in enumerate(sur):
        idx = sobol_total_indices(s, run.physical.bounds, run.problem.theta_bounds,
                                  samples=cfg.sobol_samples, seed=[cfg.seed, j])
        tot.append(idx.total)
        se.append(idx.stderr)
    tot, se = np.array(tot), np.array(se)
    best = np.argmax(tot, axis=0)
    cols = np.arange(tot.shape[1])
    return tot[best, cols], se[best, cols]


@dataclass(frozen=True)
class _Sobol:
    total: np.ndarray
    stderr: np.ndarray


def run_path(config: RunConfig, write: bool = True) -> CalibrationRun:
    """λ-path only: writes ``path.csv`` and ``result.json``."""
    run = prepare(config)
    with stage("path"):
        run.path = compute_path(run.problem, _grid(config, run.problem))
    if write:
        _write(run, classification=False)
    return run


def run_sobol(config: RunConfig, write: bool = True) -> CalibrationRun:
    """Sensitivity screening only: writes ``sobol.csv``."""
    run = prepare(config)
    with stage("sobol"):
        run.sobol = _Sobol(*_sobol(run))
    if write:
        os.makedirs(config.out, exist_ok=True)
        rows = [[f"theta_{i + 1}", t, s] for i, (t, s) in enumerate(zip(run.sobol.total, run.sobol.stderr))]
        p = os.path.join(config.out, "sobol.csv")
        atomic_write(p, _csv_text(["parameter", "sobol_total", "sobol_stderr"], rows))
        run.files["sobol"] = p
    return run


def run_calibration(config: RunConfig, write: bool = True) -> CalibrationRun:
    """Full workflow: surrogates, kernels, λ-path, BIC selection, classification, reports."""
    run = prepare(config)
    with stage("path"):
        run.path = compute_path(run.problem, _grid(config, run.problem))
    with stage("sobol"):
        run.sobol = _Sobol(*_sobol(run))
    with stage("classification"):
        run.classification = classify_variables(run.path, run.sobol, config.sobol_floor)
    if write:
        _write(run, classification=True)
    return run


def _summary(run: CalibrationRun) -> dict:
    p, prob = run.path, run.problem
    sel = p.selected
    theta0 = prob.theta0
    out = {
        "theta0": [float(v) for v in theta0],
        "theta_hat": [float(v) for v in sel.theta_hat],
        "support": [f"theta_{i + 1}" for i in sel.support],
        "selected_lambda": sel.lam,
        "selected_index": p.selected_index,
        "loss_theta0": empirical_model_loss(prob, theta0),
        "loss_theta_hat": sel.empirical_loss,
        "bic_selected": sel.bic,
        "theta_lambda0": [float(v) for v in p.entries[0].theta_hat],
        "n": prob.n,
        "q": prob.q,
        "m": prob.m,
        "output_weights": [float(v) for v in prob.output_weights],
        "penalty_weights": [float(v) if np.isfinite(v) else "inf" for v in p.weights],
        "phi": [pk.phi for pk in prob.pk],
        "eta2": [pk.eta2 for pk in prob.pk],
        "surrogate": run.config.surrogate,
        "seed": run.config.seed,
    }
    if run.classification is not None:
        out["classification"] = {f"theta_{i + 1}": lab for i, lab in enumerate(run.classification.labels)}
    return out


def _write(run: CalibrationRun, classification: bool) -> None:
    out = run.config.out
    os.makedirs(out, exist_ok=True)
    m = run.problem.m
    header = ["lambda"] + [f"delta_theta_{i + 1}" for i in range(m)] + ["loss", "bic"]
    rows = [[e.lam, *e.delta, e.empirical_loss, e.bic] for e in run.path.entries]
    files = {"path": os.path.join(out, "path.csv"), "result": os.path.join(out, "result.json")}
    atomic_write(files["path"], _csv_text(header, rows))
    atomic_write(files["result"], json.dumps(run.summary, indent=2, allow_nan=True) + "\n")
    if classification:
        c = run.classification
        sel = run.path.selected
        rows = [[f"theta_{i + 1}", c.sobol_total[i], run.sobol.stderr[i],
                 "yes" if c.adjusted_at_selected_lambda[i] else "no", sel.delta[i], c.labels[i]]
                for i in range(m)]
        files["classification"] = os.path.join(out, "classification.csv")
        atomic_write(files["classification"], _csv_text(
            ["parameter", "sobol_total", "sobol_stderr", "adjusted", "delta_theta", "label"], rows))
    run.files.update(files)
