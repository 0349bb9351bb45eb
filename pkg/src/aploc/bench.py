"""Monte-Carlo comparison of localizers on simulated data.

Each trial draws source positions, waveforms and noise from streams keyed
by ``(masterSeed, trialIndex)`` only, so the same trial index sees the same
geometry and noise direction in every SNR / correlation cell and results do
not depend on how trials are scheduled across threads.  Dipole orientations
come from a random tangential field over the grid drawn once per plan; the
``fixed`` orientation mode gives the localizers that field.
"""

import csv
import io
import itertools
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import AplocError
from .forward import (Dipole, build_spherical_grid, default_sensor_array, load_gain_table,
                      precompute_gain)
from .linalg import covariance
from .localizers import Method, ScanObjective, localize
from .simulate import (STREAM_ORIENTATION, STREAM_PLACEMENT, make_rng, make_waveforms,
                       synthesize)

log = logging.getLogger(__name__)

COLUMNS = ("method", "snrDb", "rho", "Q", "trials", "meanErr", "medianErr", "meanSweeps",
           "convergedFrac")


@dataclass(frozen=True)
class Geometry:
    """Synthetic head geometry; lengths in millimetres.

    ``gainPath`` replaces the sphere model with an imported APGAIN table.
    """

    nSensors: int = 102
    sensorRadiusMm: float = 120.0
    gridRadiusMm: float = 64.5
    resolutionMm: float = 6.0
    minSeparationMm: float = 25.0
    minSourceRadiusMm: float = 20.0
    gainPath: str = None

    def build(self):
        if self.gainPath:
            return load_gain_table(self.gainPath)
        sensors = default_sensor_array(self.nSensors, self.sensorRadiusMm / 1000.0)
        grid = build_spherical_grid(self.gridRadiusMm / 1000.0, self.resolutionMm / 1000.0)
        return precompute_gain(grid, sensors)


@dataclass(frozen=True)
class ExperimentPlan:
    """Grid of Monte-Carlo cells.  ``None`` in ``snrGridDb`` means noiseless."""

    methods: tuple
    snrGridDb: tuple = (-10.0, -5.0, 0.0, 5.0, 10.0)
    rhoGrid: tuple = (0.5,)
    QGrid: tuple = (2,)
    trials: int = 100
    N: int = 50
    masterSeed: int = 0
    geometry: Geometry = field(default_factory=Geometry)
    subspaceTruncation: int = None
    maxSweeps: int = 20

    def __post_init__(self):
        objs = tuple(m if isinstance(m, ScanObjective) else _parse_objective(m) for m in self.methods)
        object.__setattr__(self, "methods", objs)
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if not all(0.0 <= r <= 1.0 for r in self.rhoGrid):
            raise ValueError("every rho must lie in [0, 1]")
        if not all(int(q) >= 1 for q in self.QGrid):
            raise ValueError("every Q must be at least 1")
        if self.subspaceTruncation is not None and self.subspaceTruncation < 1:
            raise ValueError("subspaceTruncation must be at least 1")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "geometry" in d:
            d["geometry"] = Geometry(**d["geometry"])
        for k in ("methods", "snrGridDb", "rhoGrid", "QGrid"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["methods"] = [{"kind": m.kind.value, "orientation": m.orientation} for m in self.methods]
        d["geometry"] = asdict(self.geometry)
        for k in ("snrGridDb", "rhoGrid", "QGrid"):
            d[k] = list(d[k])
        return d


def _parse_objective(m):
    if isinstance(m, dict):
        return ScanObjective(m["kind"], m.get("orientation", "free"))
    kind, _, ori = str(m).partition(":")
    return ScanObjective(kind, ori or "free")


@dataclass(frozen=True)
class TrialRecord:
    method: str
    orientation: str
    snrDb: float
    rho: float
    Q: int
    trialIndex: int
    perSourceErrors: tuple
    meanError: float
    sweeps: int
    converged: bool
    wallTime: float
    sweepErrors: tuple = ()
    failed: bool = False
    message: str = ""


@dataclass(frozen=True)
class CellSummary:
    method: str
    snrDb: float
    rho: float
    Q: int
    trials: int
    meanErr: float
    medianErr: float
    meanSweeps: float
    convergedFrac: float


def match_sources(estimated, truth):
    """Minimum-total-distance pairing of estimated and true positions.

    Returns ``(pairing, distances)`` where truth ``j`` is matched to
    estimate ``pairing[j]`` at distance ``distances[j]``.  Exhaustive over
    permutations for up to 6 sources (first optimum in lexicographic order,
    so ties keep the identity), Hungarian assignment above that.
    """
    est = np.asarray(estimated, dtype=np.float64).reshape(-1, 3)
    tru = np.asarray(truth, dtype=np.float64).reshape(-1, 3)
    if len(est) != len(tru):
        raise ValueError(f"{len(est)} estimates for {len(tru)} true sources")
    D = np.linalg.norm(tru[:, None, :] - est[None, :, :], axis=2)
    Q = len(tru)
    if Q <= 6:
        best, best_cost = None, math.inf
        for perm in itertools.permutations(range(Q)):
            cost = D[np.arange(Q), perm].sum()
            if best is None or cost < best_cost * (1.0 - 1e-12):
                best, best_cost = perm, cost
        pairing = np.array(best, dtype=np.intp)
    else:
        _, pairing = linear_sum_assignment(D)
    return pairing, D[np.arange(Q), pairing]


def _place_sources(space, Q, seed, geom, audible):
    rng = make_rng(seed, STREAM_PLACEMENT)
    r = np.linalg.norm(space.points - space.points.mean(axis=0), axis=1) if geom.gainPath else \
        np.linalg.norm(space.points, axis=1)
    cand = np.flatnonzero((r >= geom.minSourceRadiusMm / 1000.0) & audible)
    order = rng.permutation(cand)
    chosen = []
    sep = geom.minSeparationMm / 1000.0
    for g in order:
        if all(np.linalg.norm(space.points[g] - space.points[c]) >= sep for c in chosen):
            chosen.append(int(g))
            if len(chosen) == Q:
                return chosen
    raise AplocError(f"cannot place {Q} sources {geom.minSeparationMm} mm apart")


def random_orientation(L, rng):
    """Random unit moment within the two strongest right-singular directions of ``L``.

    For the sphere model this is a random tangential orientation.
    """
    _, _, Vt = np.linalg.svd(L)
    c = rng.standard_normal(2)
    q = Vt[:2].T @ c
    return q / np.linalg.norm(q)


def orientation_field(space, seed):
    """Random tangential orientation at every grid point (a stand-in for cortical normals)."""
    rng = make_rng(seed, STREAM_ORIENTATION)
    _, _, Vt = np.linalg.svd(space.gain)
    c = rng.standard_normal((space.size, 2))
    q = np.einsum("gki,gk->gi", Vt[:, :2, :], c)
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def make_trial_sources(space, Q, seed, geom, field=None):
    """Random source placement; orientations come from ``field`` when given."""
    audible = space.block_norm2 > 1e-20 * space.block_norm2.max()
    idx = _place_sources(space, Q, seed, geom, audible)
    if field is not None:
        return [Dipole(space.points[g], field[g], index=g) for g in idx]
    rng = make_rng(seed, STREAM_ORIENTATION)
    return [Dipole(space.points[g], random_orientation(space.gain[g], rng), index=g) for g in idx]


def _errors_mm(positions, truth_pos):
    _, d = match_sources(positions, truth_pos)
    return d * 1000.0


def _run_cell_trial(plan, space, field, snr, rho, Q, trial):
    seed = (plan.masterSeed, trial)
    out = []
    try:
        dips = make_trial_sources(space, Q, seed, plan.geometry, field)
        wf = make_waveforms(Q, plan.N, rho, seed)
        ds = synthesize(dips, wf, space, snr, seed)
        C = covariance(ds.Y)
    except AplocError as exc:
        return [_failed(m, snr, rho, Q, trial, exc) for m in plan.methods]
    truth_pos = np.array([d.position for d in dips])
    for m in plan.methods:
        t0 = time.perf_counter()
        try:
            res = localize(m.kind, C, space, Q,
                           orientation_field=field if m.orientation == "fixed" else None,
                           max_sweeps=plan.maxSweeps, truncation=plan.subspaceTruncation)
        except AplocError as exc:
            out.append(_failed(m, snr, rho, Q, trial, exc))
            continue
        err = _errors_mm(res.positions, truth_pos)
        sweep_err = tuple(
            float(np.mean(_errors_mm(space.points[res.indices_after_sweep(k)], truth_pos)))
            for k in range(len(res.history) + 1))
        out.append(TrialRecord(
            m.kind.value, m.orientation, snr, rho, Q, trial, tuple(float(e) for e in err),
            float(np.mean(err)), res.sweeps, res.converged, time.perf_counter() - t0, sweep_err))
    return out


def _failed(m, snr, rho, Q, trial, exc):
    log.warning("trial %d (%s, snr=%s, rho=%s, Q=%d) failed: %s", trial, m.kind.value, snr, rho, Q, exc)
    return TrialRecord(m.kind.value, m.orientation, snr, rho, Q, trial, (), math.nan, 0, False,
                       0.0, (), True, str(exc))


def run_plan(plan, threads=1, space=None):
    """Run every (SNR, rho, Q, trial) cell for every method.

    Returns ``(records, table)``; records are ordered by method, SNR, rho,
    Q, trial and the table holds one :class:`CellSummary` per cell.
    """
    if space is None:
        space = plan.geometry.build()
    field = orientation_field(space, plan.masterSeed)
    jobs = [(snr, rho, int(Q), t) for snr in plan.snrGridDb for rho in plan.rhoGrid
            for Q in plan.QGrid for t in range(plan.trials)]

    def work(job):
        return _run_cell_trial(plan, space, field, *job)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    records = []
    for mi in range(len(plan.methods)):
        records.extend(r[mi] for r in results)
    return records, aggregate(records, plan)


def aggregate(records, plan):
    cells = {}
    for r in records:
        cells.setdefault((r.method, r.orientation, r.snrDb, r.rho, r.Q), []).append(r)
    table = []
    for m in plan.methods:
        for snr in plan.snrGridDb:
            for rho in plan.rhoGrid:
                for Q in plan.QGrid:
                    recs = cells.get((m.kind.value, m.orientation, snr, rho, int(Q)), [])
                    ok = [r for r in recs if not r.failed]
                    errs = np.array([r.meanError for r in ok])
                    name = m.kind.value if m.orientation == "free" else f"{m.kind.value}:fixed"
                    table.append(CellSummary(
                        name, snr, float(rho), int(Q), len(recs),
                        float(errs.mean()) if ok else math.nan,
                        float(np.median(errs)) if ok else math.nan,
                        float(np.mean([r.sweeps for r in ok])) if ok else math.nan,
                        float(np.mean([r.converged for r in recs])) if recs else math.nan))
    return table


def _fmt(v):
    if v is None:
        return "inf"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def table_to_csv(table):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in table:
        w.writerow([_fmt(getattr(row, c)) for c in COLUMNS])
    return buf.getvalue()


def _json_value(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def table_to_json(table):
    rows = [{c: _json_value(getattr(r, c)) for c in COLUMNS} for r in table]
    return json.dumps(rows, indent=2) + "\n"


def table_from_json(text):
    rows = []
    for d in json.loads(text):
        vals = {c: d[c] for c in COLUMNS}
        for c in ("meanErr", "medianErr", "meanSweeps", "convergedFrac"):
            if vals[c] is None:
                vals[c] = math.nan
        rows.append(CellSummary(**vals))
    return rows


def export_results(table, path, fmt="csv"):
    """Write the aggregated table as CSV or JSON (UTF-8, ``\\n`` newlines)."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")
    text = table_to_csv(table) if fmt == "csv" else table_to_json(table)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc

