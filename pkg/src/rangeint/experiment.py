"""Experiment configs, orchestration, record persistence and reports."""
from __future__ import annotations

import csv
import dataclasses
import datetime as _dt
import hashlib
import io
import json
import math
import sys
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import mc, rate
from .lattice import LAWS, derive_seed, get_law, scales_for, simulate_pair, walk_paths
from .torus import QuadratureError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

KINDS = ("tail-scan", "rate-solve", "diagnostics", "trend-compare")
RECORDS = "records.jsonl"
CSV_COLUMNS = ("n", "tau", "c", "p_hat", "ci_low", "ci_high", "minus_log_p_over_tau",
               "solver_rate", "gap")

EXIT_OK, EXIT_VALIDATION, EXIT_PARTIAL, EXIT_NUMERICAL = 0, 1, 2, 3


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


_SPLIT_FIELDS = {f.name for f in dataclasses.fields(mc.SplittingConfig)}
_SOLVER_FIELDS = {f.name for f in dataclasses.fields(rate.SolveOptions)} | {"route", "torus_side"}
_DIAG_FIELDS = {"replicas", "eta", "box_side", "epsilon"}
_TOP_FIELDS = {"kind", "law", "n_grid", "c_grid", "c_units", "replicas", "method", "splitting",
               "solver", "diagnostics", "seed_root", "output_dir", "rate_scaling", "workers"}


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seed_root: int
    output_dir: Path
    law: str = "diagonal"
    n_grid: tuple[int, ...] = ()
    c_grid: tuple[float, ...] = ()
    c_units: str = "cstar"
    replicas: int = 1000
    method: str = "naive"
    splitting: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    rate_scaling: str = "law-density"
    workers: int = 1

    # ---------------------------------------------------------------- parsing
    @classmethod
    def from_mapping(cls, raw: dict, base_dir: Path | None = None,
                     seed_override: int | None = None) -> "ExperimentConfig":
        errs = []
        raw = dict(raw)
        if seed_override is not None:
            raw["seed_root"] = seed_override
        for key in sorted(set(raw) - _TOP_FIELDS):
            errs.append(f"{key}: unknown field")
        kind = raw.get("kind")
        if kind not in KINDS:
            errs.append(f"kind: must be one of {', '.join(KINDS)}, got {kind!r}")
        law = raw.get("law", "diagonal")
        if law not in LAWS:
            errs.append(f"law: unknown law {law!r}")
        seed = raw.get("seed_root")
        if seed is None:
            errs.append("seed_root: required (no wall-clock seeding)")
        elif not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
            errs.append("seed_root: must be an integer in [0, 2^64)")
        out = raw.get("output_dir")
        if not isinstance(out, str) or not out:
            errs.append("output_dir: required path string")
        needs_n = kind in ("tail-scan", "diagnostics", "trend-compare")
        needs_c = kind in ("tail-scan", "rate-solve", "trend-compare")
        n_grid = raw.get("n_grid", [])
        if needs_n:
            if not isinstance(n_grid, list) or not n_grid:
                errs.append("n_grid: must be a nonempty list")
            elif not all(isinstance(v, int) and not isinstance(v, bool) and v >= 2 for v in n_grid):
                errs.append("n_grid: entries must be integers >= 2")
        c_grid = raw.get("c_grid", [])
        if needs_c:
            if not isinstance(c_grid, list) or not c_grid:
                errs.append("c_grid: must be a nonempty list")
            elif not all(isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0
                         for v in c_grid):
                errs.append("c_grid: entries must be positive numbers")
        c_units = raw.get("c_units", "cstar")
        if c_units not in ("cstar", "absolute"):
            errs.append("c_units: must be 'cstar' or 'absolute'")
        method = raw.get("method", "naive")
        if method not in ("naive", "splitting"):
            errs.append("method: must be 'naive' or 'splitting'")
        replicas = raw.get("replicas", 1000)
        if not isinstance(replicas, int) or replicas < 1:
            errs.append("replicas: must be a positive integer")
        elif kind in ("tail-scan", "trend-compare") and method == "naive" and replicas < 100:
            errs.append("replicas: naive estimation needs >= 100")
        scaling = raw.get("rate_scaling", "law-density")
        if scaling not in ("law-density", "none"):
            errs.append("rate_scaling: must be 'law-density' or 'none'")
        workers = raw.get("workers", 1)
        if not isinstance(workers, int) or workers < 1:
            errs.append("workers: must be a positive integer")
        tables = {}
        for name, allowed in (("splitting", _SPLIT_FIELDS), ("solver", _SOLVER_FIELDS),
                              ("diagnostics", _DIAG_FIELDS)):
            sub = raw.get(name, {})
            if not isinstance(sub, dict):
                errs.append(f"{name}: must be a table")
                sub = {}
            for key in sorted(set(sub) - allowed):
                errs.append(f"{name}.{key}: unknown field")
            tables[name] = {k: (tuple(v) if isinstance(v, list) else v) for k, v in sub.items()}
        if not errs and method == "splitting":
            try:
                mc.SplittingConfig(**tables["splitting"])
            except (TypeError, ValueError) as exc:
                errs.append(f"splitting: {exc}")
        if not errs:
            solver = {k: v for k, v in tables["solver"].items() if k not in ("route", "torus_side")}
            try:
                rate.SolveOptions(**solver)
            except (TypeError, ValueError) as exc:
                errs.append(f"solver: {exc}")
            if tables["solver"].get("route", "radial") not in ("radial", "plane", "torus"):
                errs.append("solver.route: must be 'radial', 'plane' or 'torus'")
        if errs:
            raise ConfigError(errs)
        out_path = Path(out)
        if base_dir is not None and not out_path.is_absolute():
            out_path = base_dir / out_path
        return cls(kind=kind, seed_root=int(seed), output_dir=out_path, law=law,
                   n_grid=tuple(int(v) for v in n_grid), c_grid=tuple(float(v) for v in c_grid),
                   c_units=c_units, replicas=int(replicas), method=method,
                   splitting=tables["splitting"], solver=tables["solver"],
                   diagnostics=tables["diagnostics"], rate_scaling=scaling, workers=workers)

    @classmethod
    def load(cls, path, seed_override: int | None = None) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = tomllib.loads(path.read_text())
        except OSError as exc:
            raise ConfigError([f"config: cannot read {path}: {exc}"]) from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"config: parse error: {exc}"]) from exc
        return cls.from_mapping(raw, base_dir=path.parent, seed_override=seed_override)

    # -------------------------------------------------------------- identity
    def canonical(self) -> dict:
        """Result-determining fields with normalized numbers (no paths, no worker count)."""
        d = {
            "kind": self.kind, "law": self.law, "seed_root": self.seed_root,
            "n_grid": list(self.n_grid), "c_grid": [float(c) for c in self.c_grid],
            "c_units": self.c_units, "replicas": self.replicas, "method": self.method,
            "splitting": _normalize(self.splitting), "solver": _normalize(self.solver),
            "diagnostics": _normalize(self.diagnostics), "rate_scaling": self.rate_scaling,
        }
        return d

    def config_hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def c_absolute(self, c: float) -> float:
        return c * rate.feasibility_sup() if self.c_units == "cstar" else c

    def c_solved(self, c_abs: float) -> float:
        """Argument handed to the rate solver for a tail threshold c_abs.

        Under 'law-density' the threshold is divided by the law's lattice density.
        """
        if self.rate_scaling == "law-density":
            return c_abs / get_law(self.law).density
        return c_abs


def _normalize(obj):
    if isinstance(obj, dict):
        return {k: _normalize(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_normalize(v) for v in obj]
    if isinstance(obj, float) and obj.is_integer() and abs(obj) < 2**53:
        return float(obj)
    return obj


def unit_seed(seed_root: int, *labels) -> int:
    """Seed for a unit of work, keyed by the unit's content rather than grid position."""
    return derive_seed(seed_root, *(zlib.crc32(repr(v).encode()) for v in labels))


# ---------------------------------------------------------------- units

@dataclass(frozen=True)
class Unit:
    key: str
    kind: str  # tail | rate | diag
    n: int | None = None
    c: float | None = None
    replica: int | None = None


def plan_units(cfg: ExperimentConfig) -> list[Unit]:
    units = []
    if cfg.kind in ("tail-scan", "trend-compare"):
        for c in cfg.c_grid:
            for n in cfg.n_grid:
                units.append(Unit(f"tail/n={n}/c={c!r}", "tail", n=n, c=c))
    if cfg.kind in ("rate-solve", "trend-compare"):
        for c in cfg.c_grid:
            units.append(Unit(f"rate/c={c!r}", "rate", c=c))
    if cfg.kind == "diagnostics":
        for n in cfg.n_grid:
            for r in range(int(cfg.diagnostics.get("replicas", 4))):
                units.append(Unit(f"diag/n={n}/r={r}", "diag", n=n, replica=r))
    return units


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if hasattr(obj, "value") and not isinstance(obj, (int, str)):
        return obj.value
    return obj


def execute_unit(cfg: ExperimentConfig, unit: Unit, workers: int) -> tuple[dict, list]:
    """Run one unit; returns (payload, seed lineage)."""
    if unit.kind == "tail":
        c_abs = cfg.c_absolute(unit.c)
        seed = unit_seed(cfg.seed_root, "tail", unit.n, unit.c)
        if cfg.method == "naive":
            est = mc.estimate_tail_naive(cfg.law, unit.n, c_abs, cfg.replicas, seed, workers)
        else:
            split = mc.SplittingConfig(**cfg.splitting)
            est = mc.estimate_tail_splitting(cfg.law, unit.n, c_abs, split, seed, workers)
        payload = est.to_dict()
        payload["c_input"] = unit.c
        return payload, [cfg.seed_root, "tail", unit.n, unit.c, seed]
    if unit.kind == "rate":
        c_abs = cfg.c_absolute(unit.c)
        target = cfg.c_solved(c_abs)
        solver = dict(cfg.solver)
        route = solver.pop("route", "radial")
        side = float(solver.pop("torus_side", 16.0))
        opts = rate.SolveOptions(**solver)
        if route == "radial":
            res = rate.solve_rate_radial(target, m=opts.radial_points)
            res.extra.pop("profile", None)
            res.extra.pop("r", None)
        elif route == "plane":
            res = rate.solve_rate_plane(target, opts)
        else:
            res = rate.solve_rate_torus(side, target, opts)
        payload = res.to_dict()
        payload.update({"c_input": unit.c, "c_threshold": c_abs, "c_solved": target,
                        "route": route})
        return payload, [cfg.seed_root]
    # diagnostics
    d = cfg.diagnostics
    seed = unit_seed(cfg.seed_root, "diag", unit.n, unit.replica)
    scales = scales_for(unit.n)
    r1, r2, stat = simulate_pair(cfg.law, unit.n, seed)
    p1, p2 = walk_paths(cfg.law, unit.n, seed)
    eta = float(d.get("eta", 0.5))
    box_side = float(d.get("box_side", 4.0))
    eps = float(d.get("epsilon", 0.01))
    cross = mc.crossing_count([p1, p2], eta, scales)
    occ = mc.box_occupancy(r1, r2, box_side, eps, scales)
    payload = {
        "n": unit.n, "replica": unit.replica, "j_n": stat.j_n, "range_1": len(r1),
        "range_2": len(r2), "crossings": list(cross.count_per_direction),
        "confined": mc.confinement_check([p1, p2], scales.tau),
        "heavy_boxes": len(occ.heavy_boxes), "occupied_boxes": len(occ.per_box_range),
        "eta": eta, "box_side": box_side, "epsilon": eps,
    }
    return payload, [cfg.seed_root, "diag", unit.n, unit.replica, seed]


_NUMERICAL = (ArithmeticError, QuadratureError, mc.DegenerateStageError, np.linalg.LinAlgError)


def read_records(directory) -> list[dict]:
    path = Path(directory) / RECORDS
    if not path.exists():
        return []
    out = []
    with path.open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


@dataclass
class RunSummary:
    completed: int = 0
    skipped: int = 0
    failures: list = field(default_factory=list)
    numerical: bool = False
    partial_estimates: int = 0

    @property
    def exit_code(self) -> int:
        if self.numerical:
            return EXIT_NUMERICAL
        if self.failures or self.partial_estimates:
            return EXIT_PARTIAL
        return EXIT_OK

    def text(self) -> str:
        lines = [f"completed {self.completed}, skipped {self.skipped}, "
                 f"failed {len(self.failures)}"]
        lines += [f"  failed {k}: {msg}" for k, msg in self.failures]
        if self.partial_estimates:
            lines.append(f"  {self.partial_estimates} estimate(s) flagged partial")
        return "\n".join(lines)


def run(cfg: ExperimentConfig, force: bool = False, workers: int | None = None,
        log=print) -> RunSummary:
    """Execute every unit not yet recorded under this config hash; append one line per unit."""
    workers = cfg.workers if workers is None else workers
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    chash = cfg.config_hash()
    done = {(r["config_hash"], r["unit_key"]) for r in read_records(out)}
    summary = RunSummary()
    with (out / RECORDS).open("a") as fh:
        for unit in plan_units(cfg):
            if not force and (chash, unit.key) in done:
                summary.skipped += 1
                continue
            try:
                payload, lineage = execute_unit(cfg, unit, workers)
            except _NUMERICAL as exc:
                summary.failures.append((unit.key, f"{type(exc).__name__}: {exc}"))
                summary.numerical = True
                continue
            except Exception as exc:  # noqa: BLE001 - listed, remaining units still run
                summary.failures.append((unit.key, f"{type(exc).__name__}: {exc}"))
                continue
            if payload.get("partial"):
                summary.partial_estimates += 1
            if payload.get("status") not in (None, "converged", "infeasible"):
                summary.numerical = True
            record = {
                "config_hash": chash, "unit_key": unit.key, "kind": unit.kind,
                "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
                "version": __version__, "seed_lineage": lineage,
                "config": cfg.canonical(), "payload": payload,
            }
            fh.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")
            fh.flush()
            summary.completed += 1
            log(f"done {unit.key}")
    return summary


# ---------------------------------------------------------------- reports

def fmt(x) -> str:
    """17 significant digits; empty for missing values."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return format(x, ".17g")


def _json_text(obj, indent=0) -> str:
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_json_text(v, indent + 1)}"
                 for k, v in sorted(obj.items())]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[" + ", ".join(_json_text(v, indent + 1) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt(obj) if math.isfinite(obj) else "null"
    return json.dumps(obj)


def _latest(records: list[dict]) -> list[dict]:
    """Records of the most recent config hash, last write per unit key."""
    if not records:
        return []
    chash = records[-1]["config_hash"]
    by_key = {}
    for r in records:
        if r["config_hash"] == chash:
            by_key[r["unit_key"]] = r
    return list(by_key.values())


def _float(v):
    if isinstance(v, str):
        return float(v)
    return v


def tail_rows(records: list[dict]) -> tuple[list[dict], dict]:
    """Joined rows (sorted by c, n) and the solver rate per threshold c."""
    tails = [r["payload"] for r in records if r["kind"] == "tail"]
    rates = {}
    for r in records:
        if r["kind"] == "rate":
            p = r["payload"]
            rates[float(p["c_threshold"])] = _float(p["value"])
    rows = []
    for p in sorted(tails, key=lambda p: (p["c"], p["n"])):
        n, c, ph = int(p["n"]), float(p["c"]), float(p["p_hat"])
        tau = math.log(n)
        mlp = -math.log(ph) / tau if ph > 0 else None
        solver = None
        for key, val in rates.items():
            if math.isclose(key, c, rel_tol=1e-12):
                solver = val
        if solver is None:
            warnings.warn(f"no solver result for c={c!r}; gap left empty", stacklevel=2)
        gap = mlp - solver if (mlp is not None and solver is not None
                               and math.isfinite(solver)) else None
        rows.append({"n": n, "tau": tau, "c": c, "p_hat": ph, "ci_low": float(p["ci_low"]),
                     "ci_high": float(p["ci_high"]), "minus_log_p_over_tau": mlp,
                     "solver_rate": solver, "gap": gap})
    return rows, rates


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        w.writerow([fmt(row[k]) for k in CSV_COLUMNS])
    return buf.getvalue()


def report(directory, kind: str) -> tuple[Path, Path]:
    """Write report-<kind>.csv and report-<kind>.json into ``directory``."""
    directory = Path(directory)
    if kind not in KINDS:
        raise ConfigError([f"kind: must be one of {', '.join(KINDS)}"])
    records = _latest(read_records(directory))
    if not records:
        raise FileNotFoundError(f"no records in {directory}")
    csv_path = directory / f"report-{kind}.csv"
    json_path = directory / f"report-{kind}.json"
    summary = {"kind": kind, "config_hash": records[0]["config_hash"],
               "version": __version__}
    if kind in ("tail-scan", "trend-compare"):
        rows, rates = tail_rows(records)
        if not rows:
            raise FileNotFoundError(f"no tail estimates in {directory}")
        csv_text = rows_to_csv(rows)
        trends = {}
        for c in sorted({r["c"] for r in rows}):
            ests = [mc.TailEstimate.from_dict(r["payload"]) for r in records
                    if r["kind"] == "tail" and float(r["payload"]["c"]) == c]
            try:
                tr = mc.rate_trend(ests).to_dict()
            except ValueError as exc:
                tr = {"error": str(exc)}
            tr["solver_rate"] = next((v for k, v in rates.items()
                                      if math.isclose(k, c, rel_tol=1e-12)), None)
            trends[fmt(c)] = tr
        summary["rate_trend"] = trends
        summary["rows"] = len(rows)
    elif kind == "rate-solve":
        cols = ("c_input", "c_threshold", "c_solved", "value", "status", "kkt_residual",
                "constraint_value")
        pay = sorted((r["payload"] for r in records if r["kind"] == "rate"),
                     key=lambda p: p["c_input"])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for p in pay:
            w.writerow([p[k] if isinstance(p[k], str) else fmt(p[k]) for k in cols])
        csv_text = buf.getvalue()
        summary["rates"] = {fmt(p["c_threshold"]): _float(p["value"]) for p in pay}
    else:
        cols = ("n", "replica", "j_n", "range_1", "range_2", "crossings_1", "crossings_2",
                "confined", "heavy_boxes", "occupied_boxes")
        pay = sorted((r["payload"] for r in records if r["kind"] == "diag"),
                     key=lambda p: (p["n"], p["replica"]))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for p in pay:
            vals = dict(p, crossings_1=p["crossings"][0], crossings_2=p["crossings"][1])
            w.writerow([fmt(vals[k]) for k in cols])
        csv_text = buf.getvalue()
        summary["confined_fraction"] = float(np.mean([p["confined"] for p in pay]))
    csv_path.write_text(csv_text)
    json_path.write_text(_json_text(summary) + "\n")
    return csv_path, json_path
