"""Study runners behind the command line: each returns a StudyReport.

Per-N work fans out through ``mapper`` (any order-preserving map, such as
``ThreadPoolExecutor.map``); records are then assembled in N order.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cone import ParticleConfig, interior_densities, leader_density, sample_from_quantile
from .config import StudyConfig, canonical_json
from .geodesic import (_terms, distance_lower_bound, solve_geodesic, straight_line_distance)
from .jko import jko_convergence_study
from .mobility import ActionDensity, dilate

BAND = 1e-9


@dataclass
class Table:
    name: str
    columns: tuple
    rows: list


@dataclass
class StudyReport:
    kind: str
    records: list
    verdict: bool
    stamp: dict
    verdicts: dict = field(default_factory=dict)
    tables: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def table(self, name: str) -> Table:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(name)


def _stamp(cfg: StudyConfig) -> dict:
    return {"version": __version__, "seed": cfg.seed, "config_hash": cfg.hash}


def _with_hash(cfg, rows):
    h = cfg.hash
    return [{**r, "config_hash": h} for r in rows]


def _endpoint_mode(mode, *measures):
    if mode != "auto":
        return mode
    ends = np.concatenate([np.atleast_1d(mu.quantile(np.array([0.0, 1.0]))) for mu in measures])
    return "exact" if np.all(np.isfinite(ends)) else "clip"


def _solver(cfg):
    # studies record non-convergence instead of aborting
    from dataclasses import replace
    return replace(cfg.solver, strict=False)


def _distance_record(N, a, b, density, cfg):
    opts = _solver(cfg)
    res = solve_geodesic(a, b, density, cfg.rule, opts)
    rep = res.solver_report
    return res, {
        "N": N,
        "distance": res.distance,
        "lower_bound": distance_lower_bound(a, b, density),
        "upper_bound": straight_line_distance(a, b, density, cfg.rule, opts.K, opts.quadrature),
        "kkt_residual": rep.kkt_residual,
        "final_lambda": rep.final_lambda,
        "converged": rep.converged,
    }


def _sandwiched(r, tol=1e-8):
    d, lo, hi = r["distance"], r["lower_bound"], r["upper_bound"]
    return bool(lo - tol * max(1.0, lo) <= d <= hi + tol * max(1.0, hi))


def _endpoints(cfg):
    P = cfg.params
    M = P["mobility"].max_density
    if "a" in P:
        return ParticleConfig(P["a"], M), ParticleConfig(P["b"], M)
    mode = _endpoint_mode(P["endpoints"], P["mu0"], P["mu1"])
    return (sample_from_quantile(P["mu0"], P["N"], M, mode),
            sample_from_quantile(P["mu1"], P["N"], M, mode))


def _cone_rows(cfg_x: ParticleConfig, rule, mobility):
    R_int = interior_densities(cfg_x.x)
    R = np.append(R_int, leader_density(rule, R_int, mobility))
    return [(i, x, r) for i, (x, r) in enumerate(zip(cfg_x.x, R))]


DISTANCE_COLUMNS = ("N", "distance", "lower_bound", "upper_bound", "kkt_residual",
                    "final_lambda", "converged")


def run_distance(cfg: StudyConfig, mapper=map) -> StudyReport:
    P = cfg.params
    density = ActionDensity(P["p"], P["mobility"])
    a, b = _endpoints(cfg)
    _, rec = _distance_record(a.n, a, b, density, cfg)
    ok = rec["converged"] and _sandwiched(rec)
    table = Table("distance", DISTANCE_COLUMNS, [tuple(rec[c] for c in DISTANCE_COLUMNS)])
    return StudyReport("distance", _with_hash(cfg, [rec]), bool(ok), _stamp(cfg),
                       {"converged": rec["converged"], "sandwiched": _sandwiched(rec)},
                       [table], {"distance": rec["distance"], "rule": cfg.rule.value})


def run_geodesic(cfg: StudyConfig, mapper=map) -> StudyReport:
    P = cfg.params
    density = ActionDensity(P["p"], P["mobility"])
    a, b = _endpoints(cfg)
    res, rec = _distance_record(a.n, a, b, density, cfg)
    lam = res.solver_report.final_lambda
    mob = P["mobility"] if lam == 1.0 else dilate(P["mobility"], lam)
    X = res.path.states
    t = _terms(X, P["p"], mob, cfg.rule, cfg.solver.quadrature)
    N1 = X.shape[1]
    R_int = interior_densities(X)
    R = np.concatenate([R_int, leader_density(cfg.rule, R_int, mob)[:, None]], axis=1)
    rows = []
    for k, tk in enumerate(res.path.times):
        for i in range(N1):
            term = t["T"][k, i] / N1 if k < res.path.K else None
            rows.append((tk, i, X[k, i], R[k, i], term))
    tables = [
        Table("geodesic", ("t", "i", "x", "R", "phi_term"), rows),
        Table("cone_a", ("i", "x_i", "R_i"), _cone_rows(a, cfg.rule, mob)),
        Table("cone_b", ("i", "x_i", "R_i"), _cone_rows(b, cfg.rule, mob)),
    ]
    ok = rec["converged"] and _sandwiched(rec)
    summary = {**rec, "rule": cfg.rule.value, "K": res.path.K,
               "report": {k: v for k, v in res.solver_report.as_dict().items()}}
    return StudyReport("geodesic", _with_hash(cfg, [rec]), bool(ok), _stamp(cfg),
                       {"converged": rec["converged"], "sandwiched": _sandwiched(rec)},
                       tables, summary)


GAMMA_COLUMNS = ("N", "distance", "lower_bound", "upper_bound", "gap_to_prev",
                 "kkt_residual", "final_lambda", "converged")


def run_gamma_study(cfg: StudyConfig, mapper=map) -> StudyReport:
    """d^N between quantile samples of mu0 and mu1 for each N in N_list.

    Verdict: every solve converged, every value lies between its lower
    bound and its straight-line upper bound, and successive gaps
    |d^{N_k} - d^{N_{k-1}}| do not grow (up to roundoff). ``strictly_decreasing``
    is reported separately since a flat sequence has zero gaps.
    """
    P = cfg.params
    density = ActionDensity(P["p"], P["mobility"])
    M = P["mobility"].max_density
    mode = _endpoint_mode(P["endpoints"], P["mu0"], P["mu1"])
    notes = []

    def run(N):
        try:
            a = sample_from_quantile(P["mu0"], N, M, mode)
            b = sample_from_quantile(P["mu1"], N, M, mode)
            return _distance_record(N, a, b, density, cfg)[1]
        except (ValueError, RuntimeError) as exc:
            return {"N": N, "error": str(exc)}

    records = []
    for rec in mapper(run, P["N_list"]):
        if "error" in rec:
            notes.append(f"N={rec['N']}: {rec['error']}")
            continue
        prev = records[-1]["distance"] if records else None
        rec["gap_to_prev"] = abs(rec["distance"] - prev) if prev is not None else None
        records.append(rec)
    gaps = [r["gap_to_prev"] for r in records[1:]]
    scale = max([1.0] + [abs(r["distance"]) for r in records])
    verdicts = {
        "complete": not notes,
        "converged": all(r["converged"] for r in records),
        "sandwiched": all(_sandwiched(r) for r in records),
        "gaps_nonincreasing": all(b <= a + BAND * scale for a, b in zip(gaps, gaps[1:])),
        "strictly_decreasing": bool(len(gaps) >= 2 and all(b < a for a, b in zip(gaps, gaps[1:]))),
    }
    verdict = all(verdicts[k] for k in ("complete", "converged", "sandwiched", "gaps_nonincreasing"))
    rows = [tuple(r[c] for c in GAMMA_COLUMNS) for r in records]
    summary = {"rule": cfg.rule.value, "endpoints": mode,
               "surrogate": records[-1]["distance"] if records else None}
    return StudyReport("gamma", _with_hash(cfg, records), bool(verdict), _stamp(cfg), verdicts,
                       [Table("gamma", GAMMA_COLUMNS, rows)], summary, notes)


JKO_COLUMNS = ("N", "n", "J", "F", "dist", "second_moment", "wq_to_ref")


def run_jko_study(cfg: StudyConfig, mapper=map) -> StudyReport:
    P = cfg.params
    density = ActionDensity(2.0, P["mobility"])
    mode = _endpoint_mode(P["endpoints"], P["mu0"])
    rep = jko_convergence_study(P["mu0"], P["F"], P["tau"], P["n_steps"], P["N_list"], P["q"],
                                density, cfg.rule, cfg.solver, endpoints=mode, mapper=mapper)
    records = [{c: getattr(r, c) for c in JKO_COLUMNS} for r in rep.records]
    descent = all(t.descent_holds() for t in rep.trajectories.values())
    verdicts = {"wq_nonincreasing": rep.verdict, "descent": descent, "complete": not rep.notes}
    rows = [tuple(r[c] for c in JKO_COLUMNS) for r in records]
    summary = {"rule": cfg.rule.value, "endpoints": mode, "q": rep.q,
               "wq_table": {str(n): [[N, w] for N, w in v] for n, v in rep.wq_table().items()}}
    return StudyReport("jko", _with_hash(cfg, records), bool(rep.verdict and descent), _stamp(cfg),
                       verdicts, [Table("jko", JKO_COLUMNS, rows)], summary, list(rep.notes))


def run_ftl_study(cfg: StudyConfig, mapper=map) -> StudyReport:
    """Windowed L^1 error against the exact Riemann solution for each N.

    Verdict: the error decreases strictly in N. Trajectory dumps and the
    profile table use the largest N.
    """
    from .ftl import entropy_profiles, ftl_vs_entropy

    P = cfg.params
    law, riem, t = P["law"], P["riemann"], P["t"]

    def run(N):
        dt = P["dt"] or None
        return ftl_vs_entropy(riem, law, N, t, cfg.rule, dt, detail=True)

    comps = list(mapper(run, P["N_list"]))
    records = [{"N": N, "l1_error": c.error} for N, c in zip(P["N_list"], comps)]
    errs = [r["l1_error"] for r in records]
    decreasing = all(b < a for a, b in zip(errs, errs[1:]))
    N_max = P["N_list"][-1]
    traj = [(s.t, i, x, r) for s in comps[-1].states
            for i, (x, r) in enumerate(zip(s.cfg.x, _leader_R(s.cfg.x, law, cfg.rule)))]
    xs, ex, fl = entropy_profiles(riem, law, N_max, t, cfg.rule, P["profile_points"], P["dt"] or None)
    tables = [
        Table("ftl", ("N", "l1_error"), [(r["N"], r["l1_error"]) for r in records]),
        Table(f"ftl_traj_N{N_max}", ("t", "i", "x", "R"), traj),
        Table("ftl_profile", ("x", "rho_exact", "rho_ftl"), list(zip(xs, ex, fl))),
    ]
    summary = {"rule": cfg.rule.value, "riemann": list(riem), "t": t,
               "window": list(comps[-1].window)}
    return StudyReport("ftl", _with_hash(cfg, records), bool(decreasing), _stamp(cfg),
                       {"error_decreasing": decreasing}, tables, summary)


def _leader_R(x, law, rule):
    from .cone import RhoStarRule

    R_int = interior_densities(x)
    lead = R_int[-1] if RhoStarRule(rule) is RhoStarRule.LOOK_BACK else law.argmax()
    return np.append(R_int, lead)


RUNNERS = {
    "distance": run_distance,
    "geodesic": run_geodesic,
    "gamma": run_gamma_study,
    "jko": run_jko_study,
    "ftl": run_ftl_study,
}


def run_study(cfg: StudyConfig, mapper=map) -> StudyReport:
    return RUNNERS[cfg.kind](cfg, mapper)


# ---------------------------------------------------------------------------
# output


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, table: Table, config_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.columns)
        for row in table.rows:
            w.writerow([_cell(v) for v in row])
        fh.write(f"# config_hash={config_hash}\n")


def read_csv(path):
    """(columns, rows of strings) with the footer comment stripped."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return tuple(rows[0]), rows[1:]


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if np.isfinite(v) else repr(v)
    if v is None or isinstance(v, str):
        return v
    return repr(v)


def write_report(report: StudyReport, out_dir) -> list:
    """CSV per table plus ``<kind>_summary.json``; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = report.stamp["config_hash"]
    paths = []
    for t in report.tables:
        p = out / f"{t.name}.csv"
        write_csv(p, t, h)
        paths.append(p)
    doc = {"kind": report.kind, "verdict": report.verdict, "verdicts": report.verdicts,
           "stamp": report.stamp, "summary": report.summary, "notes": report.notes,
           "records": report.records}
    p = out / f"{report.kind}_summary.json"
    p.write_text(json.dumps(_jsonable(doc), sort_keys=True, indent=2) + "\n")
    paths.append(p)
    return paths


def summary_line(report: StudyReport) -> str:
    status = "PASS" if report.verdict else "FAIL"
    return f"{report.kind}: {status} {canonical_json(_jsonable(report.verdicts))}"
