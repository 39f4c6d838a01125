"""Configuration-driven convergence and iteration studies.

An ``Experiment`` owns everything derived from one configuration (coefficient,
reference solution, transfer operators, linearization points, corrector sets)
and caches it in memory and, when ``cache_dir`` is set, on disk. Studies emit
comma-separated tables whose rows are sorted by (H, k) and contain no timing
data unless asked, so reruns produce byte-identical files.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import re
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import relative_errors
from .coefficient import build_coefficient
from .corrector import (
    CorrectorSet,
    LinearizationData,
    assemble_corrector_set,
    build_linearization,
    frechet_coercivity_precheck,
    read_corrector_cache,
    write_corrector_cache,
)
from .fem import RHS, interpolate_function
from .interpolation import TransferOperators, build_transfer
from .mesh import MeshPair, mesh_for
from .solver import (
    MODES,
    MultiscaleBasis,
    SolveTrace,
    load_solution,
    save_solution,
    solve_coarse_fem,
    solve_lod,
    solve_reference,
)

log = logging.getLogger(__name__)

DEFAULT_COARSE = (2, 4, 8, 16, 32, 64)
DEFAULT_K = (1, 2, 3, 4)
TABLE_HEADER = ("model", "linearization", "p_star", "H", "k", "iterations", "e_lod", "e_h", "wall_ms", "status")
ITERATION_HEADER = ("model", "linearization", "p_star", "H", "k", "iteration", "e_lod", "e_h")
# corrector sets are cached densely; larger ones are recomputed instead
CACHE_LIMIT_BYTES = 64 * 2**20

# arithmetic and linear-algebra failures a single study row may run into
ROW_ERRORS = (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError)


@dataclass
class ExperimentConfig:
    model: str = "exp2"
    rhs: str = "default"
    n_fine: int = 128
    coarse: tuple[int, ...] = DEFAULT_COARSE
    ks: tuple[int, ...] = DEFAULT_K
    linearization: str = "kacanov"
    p_star: str = "coarse_fem:32"
    mode: str = "galerkin"
    tol: float = 1e-12
    max_iter: int = 10
    reference_max_iter: int = 50
    seed: int = 42
    stages: int = 1
    cache_dir: str | None = None
    output_dir: str = "results"
    timings: bool = False

    def __post_init__(self):
        self.coarse = tuple(int(n) for n in self.coarse)
        self.ks = tuple(int(k) for k in self.ks)
        self.validate()

    def validate(self) -> None:
        if self.rhs not in RHS:
            raise ValueError(f"unknown rhs {self.rhs!r}; expected one of {sorted(RHS)}")
        if self.linearization not in ("kacanov", "frechet"):
            raise ValueError(f"unknown linearization {self.linearization!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.coarse or not self.ks:
            raise ValueError("coarse and k lists must not be empty")
        for n in self.coarse:
            if n < 1 or self.n_fine % n:
                raise ValueError(f"coarse n={n} does not divide fine n={self.n_fine}")
        if min(self.ks) < 0:
            raise ValueError("k values must be non-negative")
        if self.tol <= 0 or self.max_iter < 1 or self.reference_max_iter < 1 or self.stages < 1:
            raise ValueError("tol, max_iter, reference_max_iter and stages must be positive")
        parse_p_star(self.p_star)

    @classmethod
    def from_mapping(cls, data: dict) -> ExperimentConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def iteration_study_config(**overrides) -> ExperimentConfig:
    """Defaults of the iteration study: exp4, the exp1 load, p* = 0, k = 4."""
    base = dict(model="exp4", rhs="exp1", linearization="kacanov", p_star="zero", ks=(4,))
    base.update(overrides)
    return ExperimentConfig(**base)


# -- linearization points -------------------------------------------------------

_CALL = re.compile(r"^(\w+)\((.*)\)$")


def parse_p_star(spec: str) -> tuple:
    """``zero | g | g1 | reference | coarse_fem[:N] | ulod:N:k:<spec>``.

    The call forms ``coarse_fem(32)`` and ``ulod(16,4,g1)`` are accepted too.
    """
    spec = spec.strip()
    m = _CALL.match(spec)
    if m:
        name, args = m.groups()
        parts = [a.strip() for a in args.split(",", 2)]
        spec = ":".join([name, *parts])
    name, _, rest = spec.partition(":")
    if name in ("zero", "g", "g1", "reference") and not rest:
        return (name,)
    if name == "coarse_fem":
        n = int(rest) if rest else 32
        if n < 1:
            raise ValueError("coarse_fem needs a positive coarse n")
        return (name, n)
    if name == "ulod":
        fields = rest.split(":", 2)
        if len(fields) != 3:
            raise ValueError(f"ulod needs N:k:p_star, got {spec!r}")
        return (name, int(fields[0]), int(fields[1]), parse_p_star(fields[2]))
    raise ValueError(f"unknown linearization point {spec!r}")


def format_p_star(parsed: tuple) -> str:
    if parsed[0] == "ulod":
        return f"ulod:{parsed[1]}:{parsed[2]}:{format_p_star(parsed[3])}"
    return ":".join(str(p) for p in parsed)


def g_function(x, y):
    return 10.0 * x * y**2 * (1.0 - x) * (1.0 - y)


def g1_function(x, y):
    return 0.5 * x * y**2 * (1.0 - x) * (1.0 - y) * np.exp(5.0 * (x + y))


# -- experiment state -----------------------------------------------------------


@dataclass
class LodRun:
    u: np.ndarray
    trace: SolveTrace
    p_star: np.ndarray


class Experiment:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.coeff = build_coefficient(config.model, config.n_fine, config.seed)
        self.f = RHS[config.rhs]
        self.fine = mesh_for(config.n_fine)
        self.cache_dir = Path(config.cache_dir) if config.cache_dir else None
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._transfers: dict[int, TransferOperators] = {}
        self._points: dict[tuple, np.ndarray] = {}
        self._correctors: dict[tuple, CorrectorSet] = {}
        self._reference: np.ndarray | None = None
        self.reference_trace: SolveTrace | None = None

    def transfer(self, n_coarse: int) -> TransferOperators:
        if n_coarse not in self._transfers:
            self._transfers[n_coarse] = build_transfer(MeshPair.from_sizes(n_coarse, self.config.n_fine))
        return self._transfers[n_coarse]

    # reference ----------------------------------------------------------------

    def reference_key(self) -> str:
        h = hashlib.sha256()
        h.update(self.coeff.fingerprint())
        h.update(self.coeff.descriptor.encode())
        cfg = self.config
        h.update(f"{cfg.rhs}|{cfg.n_fine}|{cfg.tol!r}|{cfg.reference_max_iter}".encode())
        return h.hexdigest()[:16]

    def reference_path(self) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"reference_{self.config.model}_{self.reference_key()}.lodu"

    def reference(self) -> np.ndarray:
        if self._reference is not None:
            return self._reference
        path = self.reference_path()
        if path is not None and path.exists():
            try:
                self._reference = load_solution(path)
                return self._reference
            except ValueError as exc:
                warnings.warn(f"ignoring corrupt reference cache {path}: {exc}", RuntimeWarning, stacklevel=2)
        cfg = self.config
        u, trace = solve_reference(self.fine, self.coeff, self.f, cfg.tol, cfg.reference_max_iter)
        if not trace.converged:
            log.warning("reference solve stopped after %d iterations (increment %.2e)",
                        trace.iterations, trace.final_increment)
        self._reference, self.reference_trace = u, trace
        if path is not None:
            save_solution(path, u)
        return u

    # linearization points -------------------------------------------------------

    def p_star(self, spec) -> np.ndarray:
        parsed = parse_p_star(spec) if isinstance(spec, str) else spec
        if parsed in self._points:
            return self._points[parsed]
        name = parsed[0]
        if name == "zero":
            value = np.zeros(self.fine.n_nodes)
        elif name == "g":
            value = interpolate_function(self.fine, g_function)
        elif name == "g1":
            value = interpolate_function(self.fine, g1_function)
        elif name == "reference":
            value = self.reference()
        elif name == "coarse_fem":
            value, _ = solve_coarse_fem(self.transfer(parsed[1]), self.coeff, self.f, self.config.tol,
                                        self.config.max_iter)
        else:
            _, n, k, inner = parsed
            value = self.solve(n, k, self.p_star(inner)).u
        self._points[parsed] = value
        return value

    # correctors ----------------------------------------------------------------

    def _corrector_path(self, n_coarse: int, k: int, lin: LinearizationData) -> Path | None:
        if self.cache_dir is None:
            return None
        name = f"correctors_{n_coarse}_{self.config.n_fine}_k{k}_{lin.kind}_{lin.fingerprint.hex()[:16]}.lodc"
        return self.cache_dir / name

    def correctors(self, n_coarse: int, k: int, lin: LinearizationData) -> CorrectorSet:
        key = (n_coarse, k, lin.kind, lin.fingerprint)
        if key in self._correctors:
            return self._correctors[key]
        path = self._corrector_path(n_coarse, k, lin)
        cs = None
        if path is not None:
            cs = read_corrector_cache(path, n_coarse, self.config.n_fine, k, lin.kind, lin.fingerprint)
        if cs is None:
            tr = self.transfer(n_coarse)
            cs = assemble_corrector_set(tr.pair, k, lin, tr)
            payload = tr.pair.coarse.n_free * self.fine.n_free * 8
            if path is not None and payload <= CACHE_LIMIT_BYTES:
                write_corrector_cache(path, cs)
        self._correctors[key] = cs
        return cs

    # solves ----------------------------------------------------------------

    def solve(self, n_coarse: int, k: int, p_star: np.ndarray, monitor=None) -> LodRun:
        """One LOD run: correctors linearized at p*, Kačanov started at p*."""
        cfg = self.config
        lin = build_linearization(self.coeff, cfg.linearization, p_star)
        if cfg.linearization == "frechet":
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                value = frechet_coercivity_precheck(lin, 1.0 / n_coarse)
            if caught:
                log.warning("H=1/%d: H*sup|beta| = %.3g, corrector problems may be ill-posed", n_coarse, value)
        basis = MultiscaleBasis(self.transfer(n_coarse), self.correctors(n_coarse, k, lin))
        u, trace = solve_lod(basis, self.coeff, self.f, cfg.tol, cfg.max_iter, p_star, cfg.mode, monitor)
        return LodRun(u, trace, p_star)

    def cascade(self, n_coarse: int, k: int, stages: int | None = None, monitor=None) -> list[LodRun]:
        """Iterated LOD: every stage linearizes at the previous stage's solution."""
        stages = self.config.stages if stages is None else stages
        p = self.p_star(self.config.p_star)
        runs = []
        for s in range(stages):
            run = self.solve(n_coarse, k, p, monitor if s == stages - 1 else None)
            runs.append(run)
            p = run.u
        return runs


def iterate_lod(experiment: Experiment, n_coarse: int, k: int, stages: int) -> list[tuple]:
    """``(p*, solution, ErrorReport)`` for each stage of the cascade."""
    if stages < 1:
        raise ValueError("stages must be at least 1")
    tr = experiment.transfer(n_coarse)
    u_ref = experiment.reference()
    return [
        (run.p_star, run.u, relative_errors(u_ref, run.u, tr))
        for run in experiment.cascade(n_coarse, k, stages)
    ]


# -- tables ----------------------------------------------------------------


def format_H(n_coarse: int) -> str:
    return f"{1.0 / n_coarse:.10g}"


def _fmt(x: float | None) -> str:
    return "" if x is None or not np.isfinite(x) else f"{x:.12e}"


def study_order(config: ExperimentConfig) -> list[tuple[int, int]]:
    """(n_coarse, k) pairs sorted by H ascending, then k ascending."""
    return [(n, k) for n in sorted(set(config.coarse), reverse=True) for k in sorted(set(config.ks))]


def write_table(path, header, rows) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([row.get(col, "") for col in header])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    tmp.replace(path)
    return path


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class StudyResult:
    path: Path | None
    rows: list[dict]
    runs: dict

    @property
    def all_ok(self) -> bool:
        return all(r["status"] == "ok" for r in self.rows)


def default_table_name(config: ExperimentConfig, prefix: str = "study") -> str:
    p = re.sub(r"[^\w.-]+", "-", config.p_star)
    return f"{prefix}_{config.model}_{config.linearization}_{p}.csv"


def run_convergence_study(
    config: ExperimentConfig, experiment: Experiment | None = None, path=None
) -> StudyResult:
    """One row per (H, k). Failures are recorded in the status column."""
    exp = experiment or Experiment(config)
    rows, runs = [], {}
    try:
        u_ref = exp.reference()
        exp.p_star(config.p_star)
        setup_error = None
    except ROW_ERRORS as exc:
        log.error("study setup failed: %s", exc)
        setup_error = exc
    for n, k in study_order(config):
        row = {
            "model": config.model,
            "linearization": config.linearization,
            "p_star": config.p_star,
            "H": format_H(n),
            "k": k,
            "status": "failed",
        }
        start = time.perf_counter()
        if setup_error is None:
            try:
                run = exp.cascade(n, k)[-1]
                report = relative_errors(u_ref, run.u, exp.transfer(n))
                runs[(n, k)] = run
                row["iterations"] = run.trace.iterations
                row["e_lod"] = _fmt(report.e_lod)
                row["e_h"] = _fmt(report.e_h)
                finite = np.isfinite(report.e_lod) and np.isfinite(report.e_h)
                if run.trace.converged and finite:
                    row["status"] = "ok"
                else:
                    log.warning("H=1/%d k=%d: no convergence (last increment %.2e)",
                                n, k, run.trace.final_increment)
            except ROW_ERRORS as exc:
                log.error("H=1/%d k=%d failed: %s", n, k, exc)
        if config.timings:
            row["wall_ms"] = f"{1000.0 * (time.perf_counter() - start):.0f}"
        rows.append(row)
        log.info("H=1/%d k=%d e_lod=%s status=%s", n, k, row.get("e_lod", ""), row["status"])
    if path is None and config.output_dir:
        path = Path(config.output_dir) / default_table_name(config)
    if path is not None:
        path = write_table(path, TABLE_HEADER, rows)
    return StudyResult(path, rows, runs)


def run_iteration_study(
    config: ExperimentConfig, experiment: Experiment | None = None, path=None
) -> StudyResult:
    """e_lod and e_h of every Kačanov iterate, iteration 0 being u0 = p*."""
    exp = experiment or Experiment(config)
    u_ref = exp.reference()
    rows, runs = [], {}
    for n, k in study_order(config):
        tr = exp.transfer(n)

        def monitor(it, u, tr=tr):
            return relative_errors(u_ref, u, tr)

        try:
            run = exp.cascade(n, k, monitor=monitor)[-1]
        except ROW_ERRORS as exc:
            log.error("H=1/%d k=%d failed: %s", n, k, exc)
            continue
        runs[(n, k)] = run
        for it, report in enumerate(run.trace.errors):
            rows.append({
                "model": config.model,
                "linearization": config.linearization,
                "p_star": config.p_star,
                "H": format_H(n),
                "k": k,
                "iteration": it,
                "e_lod": _fmt(report.e_lod),
                "e_h": _fmt(report.e_h),
            })
    if path is None and config.output_dir:
        path = Path(config.output_dir) / default_table_name(config, "iterations")
    if path is not None:
        path = write_table(path, ITERATION_HEADER, rows)
    return StudyResult(path, rows, runs)


def loglog_slope(H, e) -> float:
    """Least-squares slope of log e against log H."""
    H, e = np.asarray(H, dtype=float), np.asarray(e, dtype=float)
    return float(np.polyfit(np.log(H), np.log(e), 1)[0])


# -- plots ----------------------------------------------------------------


def _as_number(text: str):
    try:
        return float(text)
    except ValueError:
        return text


def emit_plot(table_path, out_path=None, x: str = "H", y: str = "e_lod", group: str = "k",
              reference_slope: bool | None = None, title: str | None = None) -> Path:
    """SVG plot of ``y`` against ``x`` with one curve per value of ``group``.

    Curves carry the SVG id ``curve-<group><value>``; the order-one guide line
    (drawn for H on the x axis when there are two or more H values) has id
    ``reference-slope``.
    """
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib.figure import Figure

    rows = read_table(table_path)
    if not rows:
        raise ValueError(f"{table_path} has no data rows")
    missing = [c for c in (x, y, group) if c not in rows[0]]
    if missing:
        raise ValueError(f"{table_path} lacks columns: {', '.join(missing)}")
    rows = [r for r in rows if r.get("status", "ok") == "ok" and r[y] and r[x]]
    if not rows:
        raise ValueError(f"{table_path} has no usable rows")
    if reference_slope is None:
        reference_slope = x == "H"

    curves: dict = {}
    for r in rows:
        curves.setdefault(_as_number(r[group]), []).append((float(r[x]), float(r[y])))
    with matplotlib.rc_context({"svg.hashsalt": "qlod", "svg.fonttype": "none"}):
        fig = Figure(figsize=(5.5, 4.2))
        ax = fig.add_subplot()
        for value in sorted(curves, key=lambda v: (isinstance(v, str), v)):
            pts = sorted(curves[value])
            xs, ys = zip(*pts)
            label = f"{group}={value:g}" if isinstance(value, float) else f"{group}={value}"
            tag = f"{value:g}" if isinstance(value, float) else re.sub(r"[^\w.-]+", "-", value)
            ax.plot(xs, ys, marker="o", label=label, gid=f"curve-{group}{tag}")
        xs_all = sorted({p[0] for pts in curves.values() for p in pts})
        if reference_slope and len(xs_all) >= 2:
            x0, x1 = xs_all[0], xs_all[-1]
            y1 = max(p[1] for pts in curves.values() for p in pts if p[0] == x1)
            ax.plot([x0, x1], [y1 * x0 / x1, y1], "k--", lw=1, label="O(H)", gid="reference-slope")
        if x == "H":
            ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.set_xlabel(x)
        ax.set_ylabel(y)
        if title:
            ax.set_title(title)
        ax.legend(fontsize="small")
        ax.grid(True, which="both", alpha=0.3)
        out = Path(out_path) if out_path else Path(table_path).with_suffix(".svg")
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, format="svg", metadata={"Date": None})
    return out


# -- cache maintenance --------------------------------------------------------

CACHE_PATTERNS = ("*.lodc", "*.lodu", "*.tmp")


def cache_entries(cache_dir) -> list[tuple[str, int]]:
    cache_dir = Path(cache_dir)
    if not cache_dir.is_dir():
        return []
    files = sorted({p for pat in CACHE_PATTERNS for p in cache_dir.glob(pat)})
    return [(p.name, p.stat().st_size) for p in files]


def clear_cache(cache_dir) -> int:
    cache_dir = Path(cache_dir)
    count = 0
    if cache_dir.is_dir():
        for pat in CACHE_PATTERNS:
            for p in cache_dir.glob(pat):
                p.unlink()
                count += 1
    return count
