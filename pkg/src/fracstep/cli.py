"""Configuration, scenario library, run driver and output files.

Configuration files are TOML with the sections ``[mesh]``, ``[model]``
(and ``[model.params]``), ``[scheme]``, ``[[loads]]``, ``[initial]``,
``[output]`` and optionally ``[study]``. See the shipped scenarios in
``fracstep/scenarios`` for complete examples.

Exit codes: 0 ok, 2 validation failure, 3 numeric failure, 4 invariant failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from . import diagnostics as dg
from .errors import ConsistencyFailure, DomainError, FracstepError, InvalidArgument, NumericFailure
from .geometry import Mesh, grid_mesh, interval_mesh
from .materials import BUILTIN_MODELS, BoundaryData, SampleSpec, make_model, validate_model
from .stepper import Problem, SchemeParams, State, initial_state, run

SNAPSHOT_VERSION = "fracstep-snapshot 1"
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_INVARIANT = 0, 2, 3, 4
LOAD_KINDS = ("f_bulk", "f_surf", "h_surf", "q_surf")
INITIAL_FIELDS = ("u0", "v0", "chi0", "c0", "d0", "theta0")


class ConfigError(InvalidArgument):
    """Invalid configuration; ``errors`` lists every problem with its key path."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass(frozen=True)
class MeshSpec:
    kind: str = "interval"
    n_cells: int = 64
    length: float = 1.0
    nx: int = 4
    ny: int = 4
    lx: float = 1.0
    ly: float = 1.0

    def build(self) -> Mesh:
        if self.kind == "interval":
            return interval_mesh(self.n_cells, self.length)
        return grid_mesh(self.nx, self.ny, self.lx, self.ly)

    def to_dict(self):
        if self.kind == "interval":
            return {"kind": self.kind, "n_cells": self.n_cells, "length": self.length}
        return {"kind": self.kind, "nx": self.nx, "ny": self.ny, "lx": self.lx, "ly": self.ly}


@dataclass(frozen=True)
class LoadSpec:
    """One load contribution: ``value * table(t)`` on the given boundary sides.

    ``value`` is a scalar for ``h_surf``/``q_surf`` and a vector with ``dim``
    entries for ``f_bulk``/``f_surf``. An empty ``table`` means constant in
    time. ``sides`` is ignored for ``f_bulk``.
    """

    kind: str
    value: tuple
    sides: tuple = ("all",)
    table: tuple = ()

    def to_dict(self):
        out = {"kind": self.kind, "value": list(self.value) if len(self.value) > 1 else self.value[0]}
        if self.kind != "f_bulk":
            out["sides"] = list(self.sides)
        if self.table:
            out["table"] = [list(r) for r in self.table]
        return out


@dataclass(frozen=True)
class RunConfig:
    mesh: MeshSpec
    model: str
    model_params: dict
    tau: float
    t_end: float
    quasistatic: bool = False
    strict: bool = False
    equilibrated_loads: bool = False
    pin: tuple = ()
    step3_starts: int = 1
    loads: tuple = ()
    initial: dict = field(default_factory=dict)
    output_dir: str = "out"
    snapshot_stride: int = 0
    semistability_trials: int = 0
    rng_seed: int = 0
    study_taus: tuple = ()

    def to_dict(self) -> dict:
        doc = {
            "mesh": self.mesh.to_dict(),
            "model": {"name": self.model, "params": dict(self.model_params)},
            "scheme": {
                "tau": self.tau,
                "t_end": self.t_end,
                "quasistatic": self.quasistatic,
                "strict": self.strict,
                "equilibrated_loads": self.equilibrated_loads,
                "pin": [list(p) for p in self.pin],
                "step3_starts": self.step3_starts,
            },
            "loads": [l.to_dict() for l in self.loads],
            "initial": {k: _plain(v) for k, v in self.initial.items()},
            "output": {
                "directory": self.output_dir,
                "snapshot_stride": self.snapshot_stride,
                "semistability_trials": self.semistability_trials,
                "rng_seed": self.rng_seed,
            },
        }
        if self.study_taus:
            doc["study"] = {"tau_list": list(self.study_taus)}
        return doc


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def _freeze(v):
    if isinstance(v, list):
        return tuple(_freeze(x) for x in v)
    return v


# ---------------------------------------------------------------------------
# parsing and emission
# ---------------------------------------------------------------------------


class _Reader:
    """Typed access to a nested dict that records errors instead of raising."""

    def __init__(self):
        self.errors = []

    def get(self, table, key, path, kind, default=None, required=False):
        if key not in table:
            if required:
                self.errors.append(f"{path}.{key}: missing required key")
            return default
        v = table[key]
        if kind is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if kind is not None and not isinstance(v, kind) or (kind in (int, float) and isinstance(v, bool)):
            self.errors.append(f"{path}.{key}: expected {getattr(kind, '__name__', kind)}, got {v!r}")
            return default
        return v

    def unknown(self, table, allowed, path):
        for k in table:
            if k not in allowed:
                self.errors.append(f"{path}.{k}: unknown key")


def parse_config(text: str) -> RunConfig:
    """Parse and validate a TOML configuration document.

    Syntax errors are raised as :class:`ConfigError` with line and column;
    semantic problems are collected and reported together.
    """
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"parse error: {exc}"]) from None
    return config_from_dict(doc)


def config_from_dict(doc: dict) -> RunConfig:
    r = _Reader()
    r.unknown(doc, ("mesh", "model", "scheme", "loads", "initial", "output", "study"), "config")

    m = doc.get("mesh", {})
    r.unknown(m, ("kind", "n_cells", "length", "nx", "ny", "lx", "ly"), "mesh")
    kind = r.get(m, "kind", "mesh", str, "interval")
    if kind not in ("interval", "grid"):
        r.errors.append(f"mesh.kind: must be 'interval' or 'grid', got {kind!r}")
        kind = "interval"
    mesh = MeshSpec(
        kind=kind,
        n_cells=r.get(m, "n_cells", "mesh", int, 64),
        length=r.get(m, "length", "mesh", float, 1.0),
        nx=r.get(m, "nx", "mesh", int, 4),
        ny=r.get(m, "ny", "mesh", int, 4),
        lx=r.get(m, "lx", "mesh", float, 1.0),
        ly=r.get(m, "ly", "mesh", float, 1.0),
    )
    if kind == "interval" and (mesh.n_cells < 1 or not mesh.length > 0):
        r.errors.append("mesh: need n_cells >= 1 and length > 0")
    if kind == "grid" and (mesh.nx < 1 or mesh.ny < 1 or not (mesh.lx > 0 and mesh.ly > 0)):
        r.errors.append("mesh: need nx, ny >= 1 and positive side lengths")
    dim = 1 if kind == "interval" else 2

    md = doc.get("model", {})
    r.unknown(md, ("name", "params"), "model")
    name = r.get(md, "name", "model", str, "hydride", required=True)
    params = dict(r.get(md, "params", "model", dict, {}))
    if "dim" in params:
        r.errors.append("model.params.dim: the dimension follows from mesh.kind")
        params.pop("dim")
    model = None
    if name not in BUILTIN_MODELS:
        r.errors.append(f"model.name: unknown model {name!r}; choose from {sorted(BUILTIN_MODELS)}")
    else:
        try:
            model = make_model(name, dim=dim, **params)
        except (InvalidArgument, TypeError) as exc:
            r.errors.append(f"model.params: {exc}")

    s = doc.get("scheme", {})
    r.unknown(s, ("tau", "t_end", "quasistatic", "strict", "equilibrated_loads", "pin", "step3_starts"), "scheme")
    tau = r.get(s, "tau", "scheme", float, 0.0, required=True)
    t_end = r.get(s, "t_end", "scheme", float, 0.0, required=True)
    if not tau > 0:
        r.errors.append(f"scheme.tau: must be positive, got {tau}")
    if not t_end > 0:
        r.errors.append(f"scheme.t_end: must be positive, got {t_end}")
    if tau > 0 and t_end > 0:
        n = round(t_end / tau)
        if n < 1 or abs(n * tau - t_end) > 1e-9 * t_end:
            r.errors.append(f"scheme: t_end={t_end} is not an integer multiple of tau={tau}")
    pin = []
    for i, p in enumerate(r.get(s, "pin", "scheme", list, [])):
        if not (isinstance(p, list) and len(p) == 2 and isinstance(p[0], (int, str)) and isinstance(p[1], int)):
            r.errors.append(f"scheme.pin[{i}]: expected [node or side, component], got {p!r}")
            continue
        pin.append((p[0], p[1]))

    loads = []
    for i, ld in enumerate(doc.get("loads", [])):
        path = f"loads[{i}]"
        r.unknown(ld, ("kind", "value", "sides", "table"), path)
        lk = r.get(ld, "kind", path, str, "", required=True)
        if lk not in LOAD_KINDS:
            r.errors.append(f"{path}.kind: must be one of {LOAD_KINDS}, got {lk!r}")
            continue
        val = ld.get("value", 0.0)
        vals = tuple(float(x) for x in (val if isinstance(val, list) else [val]))
        want = dim if lk in ("f_bulk", "f_surf") else 1
        if len(vals) != want:
            r.errors.append(f"{path}.value: expected {want} component(s), got {len(vals)}")
        if lk in ("h_surf", "q_surf") and any(v < 0 for v in vals):
            r.errors.append(f"{path}.value: {lk} must be nonnegative")
        table = tuple(tuple(float(x) for x in row) for row in ld.get("table", []))
        if table and (any(len(row) != 2 for row in table) or any(b[0] <= a[0] for a, b in zip(table, table[1:]))):
            r.errors.append(f"{path}.table: expected [[t, factor], ...] with increasing t")
        elif lk in ("h_surf", "q_surf") and any(row[1] < 0 for row in table):
            r.errors.append(f"{path}.table: factors of {lk} must be nonnegative")
        sides = tuple(r.get(ld, "sides", path, list, ["all"]))
        loads.append(LoadSpec(lk, vals, sides, table))

    ini = doc.get("initial", {})
    r.unknown(ini, INITIAL_FIELDS, "initial")
    initial = {k: _freeze(ini[k]) for k in INITIAL_FIELDS if k in ini}
    _check_initial(initial, model, r)

    o = doc.get("output", {})
    r.unknown(o, ("directory", "snapshot_stride", "semistability_trials", "rng_seed"), "output")
    st = doc.get("study", {})
    r.unknown(st, ("tau_list",), "study")
    taus = tuple(float(x) for x in st.get("tau_list", []))
    if any(b >= a for a, b in zip(taus, taus[1:])):
        r.errors.append("study.tau_list: must be strictly decreasing")

    cfg = RunConfig(
        mesh=mesh,
        model=name,
        model_params=params,
        tau=tau,
        t_end=t_end,
        quasistatic=r.get(s, "quasistatic", "scheme", bool, False),
        strict=r.get(s, "strict", "scheme", bool, False),
        equilibrated_loads=r.get(s, "equilibrated_loads", "scheme", bool, False),
        pin=tuple(pin),
        step3_starts=r.get(s, "step3_starts", "scheme", int, 1),
        loads=tuple(loads),
        initial=initial,
        output_dir=r.get(o, "directory", "output", str, "out"),
        snapshot_stride=r.get(o, "snapshot_stride", "output", int, 0),
        semistability_trials=r.get(o, "semistability_trials", "output", int, 0),
        rng_seed=r.get(o, "rng_seed", "output", int, 0),
        study_taus=taus,
    )
    if cfg.snapshot_stride < 0 or cfg.semistability_trials < 0:
        r.errors.append("output: snapshot_stride and semistability_trials must be nonnegative")
    if not r.errors:
        try:
            build(cfg)
        except InvalidArgument as exc:
            r.errors.append(f"config: {exc}")
    if r.errors:
        raise ConfigError(r.errors)
    return cfg


def _check_initial(initial, model, r):
    for key, v in initial.items():
        try:
            arr = np.asarray(_plain(v), dtype=float)
        except (TypeError, ValueError):
            arr = np.array([np.nan])
        if not np.all(np.isfinite(arr)):
            r.errors.append(f"initial.{key}: expected finite numbers, got {v!r}")
        elif key == "d0" and (arr.min() < 0 or arr.max() > 1):
            r.errors.append(f"initial.d0: values must lie in [0, 1], got range [{arr.min():g}, {arr.max():g}]")
        elif key == "theta0" and arr.min() < 0:
            r.errors.append(f"initial.theta0: must be nonnegative, got {arr.min():g}")


def emit_config(cfg: RunConfig) -> str:
    """TOML text that :func:`parse_config` maps back to ``cfg``."""
    return tomli_w.dumps(cfg.to_dict())


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def scenario_names():
    return sorted(p.name[:-5] for p in resources.files("fracstep.scenarios").iterdir() if p.name.endswith(".toml"))


def scenario_text(name: str) -> str:
    path = resources.files("fracstep.scenarios").joinpath(f"{name}.toml")
    if not path.is_file():
        raise InvalidArgument(f"unknown scenario {name!r}; available: {scenario_names()}")
    return path.read_text()


def load_scenario(name: str) -> RunConfig:
    return parse_config(scenario_text(name))


# ---------------------------------------------------------------------------
# problem construction
# ---------------------------------------------------------------------------


def _facet_mask(mesh: Mesh, sides) -> np.ndarray:
    mask = np.zeros(mesh.n_facets, dtype=bool)
    for s in sides:
        if s == "all":
            mask[:] = True
        else:
            f = mesh.facets_tagged(s)
            if len(f) == 0:
                raise InvalidArgument(f"unknown boundary side {s!r}")
            mask[f] = True
    return mask


def _time_factor(table):
    if not table:
        return lambda t: 1.0
    arr = np.asarray(table, dtype=float)
    return lambda t: float(np.interp(t, arr[:, 0], arr[:, 1]))


def build_boundary_data(cfg: RunConfig, mesh: Mesh) -> BoundaryData:
    parts = {k: [] for k in LOAD_KINDS}
    for ld in cfg.loads:
        n = mesh.n_nodes if ld.kind == "f_bulk" else mesh.n_facets
        mask = np.ones(n, dtype=bool) if ld.kind == "f_bulk" else _facet_mask(mesh, ld.sides)
        base = np.where(mask[:, None], np.asarray(ld.value)[None, :], 0.0)
        if ld.kind in ("h_surf", "q_surf"):
            base = base[:, 0]
        parts[ld.kind].append((base, _time_factor(ld.table)))

    def combine(items):
        if not items:
            return None
        return lambda t: sum(b * f(t) for b, f in items)

    return BoundaryData(**{k: combine(v) for k, v in parts.items()})


def _pin_dofs(cfg: RunConfig, mesh: Mesh):
    out = []
    for where, comp in cfg.pin:
        nodes = mesh.nodes_tagged(where) if isinstance(where, str) else [where]
        out.extend((int(n), int(comp)) for n in nodes)
    return tuple(out)


def build_problem(cfg: RunConfig, tau: float | None = None) -> Problem:
    mesh = cfg.mesh.build()
    model = make_model(cfg.model, dim=mesh.dim, **cfg.model_params)
    params = SchemeParams(
        tau=cfg.tau if tau is None else tau,
        t_end=cfg.t_end,
        quasistatic=cfg.quasistatic,
        pin_dofs=_pin_dofs(cfg, mesh),
        equilibrated_loads=cfg.equilibrated_loads,
        strict=cfg.strict,
        step3_starts=cfg.step3_starts,
    )
    params.n_steps
    return Problem(mesh, model, build_boundary_data(cfg, mesh), params)


def build_initial(cfg: RunConfig, problem: Problem) -> State:
    kw = {}
    for key in INITIAL_FIELDS:
        if key in cfg.initial:
            kw[key] = np.asarray(_plain(cfg.initial[key]), dtype=float)
    return initial_state(problem, **kw)


def build(cfg: RunConfig, tau: float | None = None):
    problem = build_problem(cfg, tau)
    return problem, build_initial(cfg, problem)


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return "%.17g" % x


def write_fields(path, t: float, coords: np.ndarray, fields: dict) -> None:
    """Columnar text file: version line, header, one row per node.

    ``fields`` maps names to (n_nodes,) or (n_nodes, k) arrays; columns of a
    k-component field are named ``name_0 .. name_{k-1}``. The time is
    recorded on the version line.
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    if coords.shape[0] == 1 and coords.shape[1] > 1 and len(fields) and np.ndim(next(iter(fields.values()))) >= 1:
        if len(next(iter(fields.values()))) == coords.shape[1]:
            coords = coords.T
    names = ["x", "y", "z"][: coords.shape[1]]
    cols = [coords[:, i] for i in range(coords.shape[1])]
    for name, arr in fields.items():
        a = np.asarray(arr, dtype=float)
        if a.ndim == 1:
            names.append(name)
            cols.append(a)
        else:
            for j in range(a.shape[1]):
                names.append(f"{name}_{j}")
                cols.append(a[:, j])
    lines = [f"# {SNAPSHOT_VERSION} t={_fmt(t)}", " ".join(names)]
    for row in zip(*cols):
        lines.append(" ".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_fields(path):
    """Inverse of :func:`write_fields`: ``(t, coords, {column: array})``."""
    lines = Path(path).read_text().splitlines()
    head = lines[0]
    if not head.startswith(f"# {SNAPSHOT_VERSION}"):
        raise InvalidArgument(f"{path}: unsupported snapshot format line {head!r}")
    t = float(head.split("t=")[1])
    names = lines[1].split()
    data = np.array([[float(v) for v in ln.split()] for ln in lines[2:]]).reshape(-1, len(names))
    cols = {n: data[:, i] for i, n in enumerate(names)}
    dim = sum(1 for n in names if n in ("x", "y", "z"))
    coords = np.stack([cols.pop(n) for n in ("x", "y", "z")[:dim]], axis=1)
    return t, coords, cols


def write_snapshot(state: State, path, mesh: Mesh) -> None:
    """All nodal fields of ``state``; the strain is recomputed on reading."""
    write_fields(path, state.t, mesh.nodes, {f: getattr(state, f) for f in State.FIELDS})


def _group(cols: dict, name: str):
    if name in cols:
        return cols[name]
    k = 0
    parts = []
    while f"{name}_{k}" in cols:
        parts.append(cols[f"{name}_{k}"])
        k += 1
    if not parts:
        raise InvalidArgument(f"snapshot lacks field {name!r}")
    return np.stack(parts, axis=1)


def read_snapshot(path, problem: Problem) -> State:
    t, coords, cols = read_fields(path)
    if coords.shape != problem.mesh.nodes.shape or not np.array_equal(coords, problem.mesh.nodes):
        raise InvalidArgument(f"{path}: node coordinates do not match the mesh")
    vals = {f: np.array(_group(cols, f)) for f in State.FIELDS}
    return State(t=t, E_e=problem.strain(vals["u"], vals["chi"]), **vals)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def _summarize(checks) -> dict:
    """Per-invariant pass flag, failure count and range of the checked values."""
    out = {}
    for reps in checks:
        for rep in reps:
            s = out.setdefault(
                rep.name,
                {"passed": True, "failures": 0, "tolerance": rep.tolerance, "min": math.inf, "max": -math.inf},
            )
            if not rep.passed:
                s["passed"] = False
                s["failures"] += 1
            s["min"] = min(s["min"], float(rep.value))
            s["max"] = max(s["max"], float(rep.value))
    return out


def write_ledger(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(dg.LEDGER_COLUMNS)
        for r in rows:
            w.writerow([_fmt(v) for v in r.as_list()])


def read_ledger(path) -> list:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        return [dict(zip(header, map(float, row))) for row in rd]


def main_run(cfg: RunConfig, out_dir=None, tau: float | None = None, strict: bool | None = None,
             log=print) -> int:
    """Run a configuration and write ``ledger.csv``, snapshots and ``run_report.json``."""
    if strict is not None:
        cfg = replace(cfg, strict=strict)
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {"config": cfg.to_dict(), "status": "ok", "exit_code": EXIT_OK}

    def finish(code, status, message=""):
        report["exit_code"], report["status"] = code, status
        if message:
            report["message"] = message
            log(message)
        (out / "run_report.json").write_text(json.dumps(report, indent=2, default=float))
        return code

    try:
        problem, init = build(cfg, tau)
    except FracstepError as exc:
        return finish(EXIT_VALIDATION, "validation-failure", str(exc))
    params = problem.params
    report["tau"] = params.tau
    report["tau_admissible"] = problem.tau_admissible
    report["nonconvex_regime"] = problem.nonconvex_regime
    if problem.nonconvex_regime:
        report["notes"] = ["nonconvex-regime: local minimizer only"]
    val = validate_model(problem.model, SampleSpec(seed=cfg.rng_seed))
    report["validation"] = val.to_dict()
    if params.strict and not val.passed:
        failed = [c.name for c in val.checks if not c.passed]
        return finish(EXIT_VALIDATION, "validation-failure", f"model validation failed: {failed}")

    snaps = out / "snapshots"
    snaps.mkdir(exist_ok=True)
    stride = cfg.snapshot_stride
    n = params.n_steps
    write_snapshot(init, snaps / "snapshot_00000.txt", problem.mesh)
    done = [0]

    def progress(k, n_steps, state):
        done[0] = k
        if stride and k % stride == 0 or k == n_steps:
            write_snapshot(state, snaps / f"snapshot_{k:05d}.txt", problem.mesh)

    try:
        traj = run(problem, init, cfg.semistability_trials, cfg.rng_seed, progress, checks=True)
    except ConsistencyFailure as exc:
        report["steps_completed"] = done[0]
        report["failed_invariant"] = exc.invariant
        return finish(EXIT_INVARIANT, "invariant-failure", f"invariant '{exc.invariant}' failed: {exc}")
    except (NumericFailure, DomainError) as exc:
        report["steps_completed"] = done[0]
        step = getattr(exc, "step", None)
        return finish(EXIT_NUMERIC, "numeric-failure", f"numeric failure in step {step} of time step {done[0] + 1}: {exc}")

    write_ledger(out / "ledger.csv", traj.ledger)
    report["n_steps"] = n
    report["initial_semistability"] = traj.initial_semistability.to_dict()
    summary = _summarize(traj.checks)
    report["invariants"] = summary
    report["max_inequality_residual"] = max(r.inequality_residual / r.scale for r in traj.ledger)
    report["max_abs_balance_residual"] = max(abs(r.total_balance_residual) / r.scale for r in traj.ledger)
    bad = [k for k, v in summary.items() if not v["passed"]]
    if bad:
        return finish(EXIT_INVARIANT, "invariant-failure", f"invariants failed: {bad}")
    return finish(EXIT_OK, "ok")


def check_run(cfg: RunConfig, out_dir) -> int:
    """Re-verify a written trajectory from its snapshots and ledger."""
    out = Path(out_dir)
    problem = build_problem(cfg)
    files = sorted((out / "snapshots").glob("snapshot_*.txt"))
    if not files:
        print(f"no snapshots in {out}")
        return EXIT_VALIDATION
    steps = [int(f.stem.split("_")[1]) for f in files]
    states = [read_snapshot(f, problem) for f in files]
    ok = True
    lo, hi = problem.model.chi_box
    for k, s in zip(steps, states):
        if not (np.all(s.d >= 0) and np.all(s.d <= 1) and np.all(s.theta >= -1e-12)
                and np.all(s.chi >= lo) and np.all(s.chi <= hi)):
            print(f"FAIL constraints at snapshot {k}")
            ok = False
        rep = dg.check_semistability(problem, s, 1000, cfg.rng_seed + k)
        if not rep.passed:
            print(f"FAIL semistability at snapshot {k}: {rep.line()}")
            ok = False
    for (k0, s0), (k1, s1) in zip(zip(steps, states), zip(steps[1:], states[1:])):
        if np.any(s1.d > s0.d):
            print(f"FAIL damage increased between snapshots {k0} and {k1}")
            ok = False
        if k1 == k0 + 1:
            for rep in dg.conservation_suite(problem, s0, s1):
                if not rep.passed:
                    print(f"FAIL step {k1}: {rep.line()}")
                    ok = False
    ledger_path = out / "ledger.csv"
    if ledger_path.exists():
        for row in read_ledger(ledger_path):
            if row["inequality_residual"] > 1e-8 * row["scale"] or row["damage_heat_min"] < 0:
                print(f"FAIL ledger row t={row['t']}")
                ok = False
    print("check " + ("passed" if ok else "failed") + f" ({len(files)} snapshots)")
    return EXIT_OK if ok else EXIT_INVARIANT


def study_run(cfg: RunConfig, taus, out_dir=None) -> int:
    taus = list(taus or cfg.study_taus)
    if not taus:
        print("no tau list given (use --taus or [study] tau_list)")
        return EXIT_VALIDATION
    rows = dg.convergence_study(lambda tau: build(cfg, tau), taus)
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "study.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "tau_fine", "diff_u", "diff_chi", "diff_c", "diff_theta"])
        for r in rows:
            w.writerow([_fmt(r.tau), _fmt(r.tau_fine), *(_fmt(getattr(r, f"diff_{x}")) for x in ("u", "chi", "c", "theta"))])
    for r in rows:
        print(f"tau={r.tau:g}->{r.tau_fine:g}: u {r.diff_u:.3e} chi {r.diff_chi:.3e} c {r.diff_c:.3e} theta {r.diff_theta:.3e}")
    for name in ("u", "chi", "c", "theta"):
        orders = dg.observed_orders(rows, name)
        if orders:
            print(f"observed order {name}: " + ", ".join("nan" if math.isnan(o) else f"{o:.2f}" for o in orders))
    return EXIT_OK


def validate_command(cfg: RunConfig) -> int:
    problem = build_problem(cfg)
    rep = validate_model(problem.model, SampleSpec(seed=cfg.rng_seed))
    for c in rep.checks:
        print(c.line())
    print(f"tau_admissible = {problem.tau_admissible:.6g} (tau = {problem.params.tau:g})")
    return EXIT_OK if rep.passed else EXIT_VALIDATION


def _resolve_config(arg: str) -> RunConfig:
    p = Path(arg)
    if p.exists():
        return load_config(p)
    return load_scenario(arg)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="fracstep", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("run", "integrate a scenario and write ledger, snapshots and report"),
        ("validate", "check a model configuration against the sampled assumptions"),
        ("study", "time-step refinement study"),
        ("check", "re-verify a written trajectory"),
    ):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="config file or built-in scenario name")
        sp.add_argument("--out-dir", default=None)
        sp.add_argument("--tau", type=float, default=None, help="override the time step")
        sp.add_argument("--strict", action="store_true", default=None)
        if name == "study":
            sp.add_argument("--taus", type=float, nargs="+", default=None)
    sub.add_parser("list", help="list built-in scenarios")
    args = ap.parse_args(argv)
    if args.command == "list":
        print("\n".join(scenario_names()))
        return EXIT_OK
    try:
        cfg = _resolve_config(args.config)
        if args.tau is not None:
            cfg = replace(cfg, tau=args.tau)
            build_problem(cfg)
    except FracstepError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    try:
        if args.command == "run":
            return main_run(cfg, args.out_dir, strict=args.strict)
        if args.command == "validate":
            return validate_command(cfg)
        if args.command == "study":
            return study_run(cfg, args.taus, args.out_dir)
        return check_run(cfg, args.out_dir or cfg.output_dir)
    except ConsistencyFailure as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVARIANT
    except (NumericFailure, DomainError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_NUMERIC
    except InvalidArgument as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    raise SystemExit(main())
