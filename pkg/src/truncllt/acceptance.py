"""The twelve acceptance criteria as runnable checks, one function each.

Every function returns a :class:`CriterionResult`; ``run_all`` runs a selection
in order.  Settings are fixed here so that a run is reproducible from the code
alone.
"""

from __future__ import annotations

import logging
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checks import finite_difference_check, identity_suite
from .decomp import standard_decompositions
from .estimator import BaselineStore, Ensemble, density_estimate, linear_fit, remainder_mass
from .experiments import (delta_bump, derivative_moment_scaling, doeblin_overlap, gaussian_oracle_run,
                          iid_llt_run, local_time_run, norm_scaling, overlap_ladder, small_ball_moment,
                          w_measure_check)
from .model import catalog_entry

log = logging.getLogger(__name__)

SEED = 0


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    measured: str
    tolerance: str
    elapsed: float = 0.0
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"[{verdict}] {self.number:2d} {self.name}: {self.measured} (need {self.tolerance}; {self.elapsed:.1f}s)"

    def row(self) -> dict:
        return {"criterion": self.number, "name": self.name, "passed": self.passed, "measured": self.measured,
                "tolerance": self.tolerance, "elapsed_s": round(self.elapsed, 3)}


def _uniform(d: int):
    return standard_decompositions(d)["uniform"]


def identity_criterion(workers: int = 1) -> CriterionResult:
    out = identity_suite(samples=1000, duality_samples=100_000, seed=SEED)
    failed = [r.name for r in out["results"] if not r.passed]
    ok = out["passed"] and out["elapsed"] <= 120
    worst = max(r.measured for r in out["results"] if r.tolerance < 1e-6)
    return CriterionResult(1, "identity suite", ok,
                           f"worst per-sample gap {worst:.2e}, {len(failed)} failing, {out['elapsed']:.1f}s",
                           "per-sample <= 1e-10, Monte Carlo within 3 SE, <= 120s",
                           detail={"results": [r.line() for r in out["results"]]})


def derivative_criterion(workers: int = 1) -> CriterionResult:
    start = time.perf_counter()
    decomp = _uniform(2)
    results = finite_difference_check(catalog_entry("trig", 2).spec, decomp, n=16, t=1.0, paths=3,
                                      step=1e-6, seed=SEED, tol=1e-4)
    elapsed = time.perf_counter() - start
    worst = max(r.measured for r in results)
    return CriterionResult(2, "derivatives vs finite differences", all(r.passed for r in results) and elapsed <= 60,
                           f"worst relative gap {worst:.2e}", "<= 1e-4, <= 60s",
                           detail={"results": [r.line() for r in results]})


def iid_llt_criterion(workers: int = 1, paths: int = 2_000_000) -> CriterionResult:
    start = time.perf_counter()
    out = iid_llt_run(_uniform(1), [16, 64, 256], paths, p=1, seed=SEED, workers=workers)
    elapsed = time.perf_counter() - start
    at64 = next(r for r in out["rows"] if r["n"] == 64)
    ok = at64["sup_gap"] <= 0.01 and out["non_increasing"] and elapsed <= 600
    gaps = ", ".join(f"n={r['n']}: {r['sup_gap']:.4f}" for r in out["rows"])
    return CriterionResult(3, "iid truncated local limit", ok,
                           f"sup-gap {gaps}; non-increasing {out['non_increasing']}",
                           "sup-gap at n=64 <= 0.01, non-increasing within error bars, <= 600s",
                           detail={"rows": [{k: v for k, v in r.items() if k != "detail"} for r in out["rows"]]})


def _mass(ens: Ensemble, mean: float, scale: float) -> dict:
    ys = mean + scale * np.round(np.arange(-6.0, 6.0 + 1e-9, 0.1), 10)
    est = density_estimate(ens, ys[:, None])
    q = np.array([e.q_hat for e in est])
    se = np.array([e.se for e in est])
    integral = float(np.trapezoid(q, ys))
    return {"integral": integral, "remainder_hat": est[0].remainder_hat,
            "total": integral + est[0].remainder_hat, "se_bound": float(np.trapezoid(se, ys))}


def normalization_criterion(workers: int = 1, paths: int = 1_000_000) -> CriterionResult:
    decomp = _uniform(1)
    cases = {"iid": (catalog_entry("iid", 1), 0.0, 1.0),
             "constant": (catalog_entry("constant", 1, a0=0.5, b0=0.8), 0.5, 0.8)}
    detail = {}
    for name, (entry, mean, scale) in cases.items():
        ens = Ensemble(entry.spec, decomp, np.zeros(1), 64, 1.0, paths, p=1, seed=SEED, workers=workers)
        detail[name] = _mass(ens, mean, scale)
    ok = all(abs(v["total"] - 1.0) <= 0.01 for v in detail.values())
    return CriterionResult(4, "normalization", ok,
                           ", ".join(f"{k}: {v['total']:.4f}" for k, v in detail.items()),
                           "integral + remainder within 1 +- 0.01", detail=detail)


def gaussian_oracle_criterion(workers: int = 1, paths: int = 1_000_000) -> CriterionResult:
    entry = catalog_entry("constant", 2, a0=0.0, b0=1.0)
    decomp = standard_decompositions(2)["matched"]
    ens = Ensemble(entry.spec, decomp, np.zeros(2), 32, 1.0, paths, c=0.45, p=1, seed=SEED, workers=workers)
    out = gaussian_oracle_run(entry, ens, (0.25, 0.5, 1.0))
    ok = out["sup_gap"] <= 0.02 and abs(out["peak_slope"] + 1.0) <= 0.1
    return CriterionResult(5, "Gaussian oracle d=2", ok,
                           f"sup-gap {out['sup_gap']:.4f} (SE {out['se_at_sup']:.4f}), peak slope {out['peak_slope']:.3f}",
                           "sup-gap <= 0.02, peak slope -1 +- 0.1",
                           detail={"peak_heights": out["peak_heights"].tolist()})


def remainder_criterion(workers: int = 1, paths: int = 1_000_000,
                        baselines: BaselineStore | None = None) -> CriterionResult:
    entry = catalog_entry("iid", 1)
    decomp = standard_decompositions(1)["heavy"]
    base = Ensemble(entry.spec, decomp, np.zeros(1), 32, 1.0, paths, c=0.25, p=1, seed=SEED, workers=workers)
    rows = [remainder_mass(base.with_(n=n)) for n in (32, 64, 128)]
    hats = [r["remainder_hat"] for r in rows]
    ses = [r["se"] for r in rows]
    decreasing = all(hats[i + 1] + 2 * math.hypot(ses[i], ses[i + 1]) < hats[i] for i in range(len(hats) - 1))
    # smallest constant for which the bound holds on the whole ladder
    D = max(r["D_ratio"] for r in rows)
    within = all(r["remainder_hat"] <= D * r["remainder_bound"] for r in rows)
    store = BaselineStore() if baselines is None else baselines
    stable, note = store.check("remainder_D/heavy/alpha=0.5/c=0.25/p=1", D)
    held_out = remainder_mass(base.with_(n=256, paths=max(paths // 4, 10_000)))
    rho = rows[0]["rho_used"]
    ok = decreasing and within and stable and abs(rho - 0.0654) < 5e-4
    return CriterionResult(6, "remainder decay", ok,
                           f"remainder {', '.join(f'{h:.4f}' for h in hats)}; D {D:.4f} ({note}); rho {rho:.4f}",
                           "decreasing, below D*(n^-0.2 + exp(-rho n)), D drift <= 20%",
                           detail={"rows": rows, "D": D,
                                   "held_out_n256": {"remainder_hat": held_out["remainder_hat"],
                                                     "D_times_bound": D * held_out["remainder_bound"]}})


def tail_shape_criterion(workers: int = 1, paths: int = 200_000) -> CriterionResult:
    entry = catalog_entry("constant", 1, a0=0.0, b0=1.0)
    decomp = _uniform(1)
    fits = {}
    for t in (0.25, 0.5, 1.0):
        ens = Ensemble(entry.spec, decomp, np.zeros(1), 64, t, paths, p=1, seed=SEED, workers=workers)
        offsets = math.sqrt(t) * np.arange(0.0, 2.5 + 1e-9, 0.25)
        q = np.array([e.q_hat for e in density_estimate(ens, offsets[:, None])])
        if np.any(q <= 0):
            return CriterionResult(7, "tail shape", False, f"non-positive density at t={t}", "R^2 >= 0.99")
        fits[t] = linear_fit(offsets**2 / t, -np.log(q))
    gammas = np.array([f["slope"] for f in fits.values()])
    r2 = min(f["r2"] for f in fits.values())
    spread = float(np.max(np.abs(gammas / gammas.mean() - 1.0)))
    ok = r2 >= 0.99 and spread <= 0.2
    return CriterionResult(7, "tail shape", ok,
                           f"min R^2 {r2:.5f}, gamma {', '.join(f'{g:.3f}' for g in gammas)}",
                           "R^2 >= 0.99, gamma within 20% across t", detail={"fits": {str(k): v for k, v in fits.items()}})


def small_ball_criterion(workers: int = 1, trials: int = 100_000) -> CriterionResult:
    out = small_ball_moment(_uniform(1), ks=(32, 64, 128, 256), p=2, trials=trials, seed=SEED)
    ok = abs(out["slope"] + 2.0) <= 0.2
    return CriterionResult(8, "small-ball moment", ok, f"slope {out['slope']:.3f}", "-2 +- 10%",
                           detail={"means": out["means"], "se": out["se"]})


def moment_scaling_criterion(workers: int = 1) -> CriterionResult:
    moments = derivative_moment_scaling(catalog_entry("trig", 1), _uniform(1), (0.25, 0.5, 1.0), (32, 64, 128),
                                        paths=4000, seed=SEED)
    norms = norm_scaling(catalog_entry("constant", 1), _uniform(1), 128, (0.25, 0.5, 1.0), paths=20_000, seed=SEED)
    ok = moments["ratio"] <= 3.0 and abs(norms["slope"] - 0.5) <= 0.05
    return CriterionResult(9, "moment scaling", ok,
                           f"E|DX|^2/t max/min {moments['ratio']:.3f}, N_d slope {norms['slope']:.4f}",
                           "ratio <= 3, slope 0.5 +- 0.05",
                           detail={"table": moments["table"].tolist(), "N_d": norms["N_d"]})


def local_time_criterion(workers: int = 1, paths: int = 100_000) -> CriterionResult:
    wspec = delta_bump(1)
    report = w_measure_check(wspec)
    entry = catalog_entry("iid", 1)
    ens = Ensemble(entry.spec, _uniform(1), np.zeros(1), 256, 1.0, paths, p=1, seed=SEED, workers=workers)
    out = local_time_run(wspec, ens, report)
    ok = out["relative_gap"] <= 0.05 and all(report[k]["passed"] for k in ("B6", "B7", "B8"))
    return CriterionResult(10, "local time", ok,
                           f"E psi {out['psi_mean']:.4f} (SE {out['se']:.4f}) vs {out['target']:.4f}, "
                           f"gap {out['relative_gap']:.2%}",
                           "within 5%, conditions pass", detail={"additivity_defect": out["additivity_defect"]})


def doeblin_criterion(workers: int = 1, paths: int = 200_000) -> CriterionResult:
    entry = catalog_entry("constant", 1, a0=0.0, b0=1.0)
    ens = Ensemble(entry.spec, _uniform(1), np.zeros(1), 64, 1.0, paths, p=1, seed=SEED, workers=workers)
    single = doeblin_overlap(ens, 0.0, 1.0, entry=entry)
    ladder = overlap_ladder(ens, 0.0, (0.0, 0.5, 1.0, 1.5, 2.0), entry)
    gap = abs(single["gamma_hat"] - single["oracle"])
    ok = gap <= 0.02 and ladder["monotone"]
    return CriterionResult(11, "Doeblin overlap", ok,
                           f"overlap {single['gamma_hat']:.4f} vs {single['oracle']:.4f} "
                           f"(SE bound {single['se_bound']:.4f}); monotone {ladder['monotone']}",
                           "within 0.02, monotone", detail={"ladder": ladder["gammas"]})


def _csv_bytes(root: Path) -> dict:
    return {p.relative_to(root).as_posix().split("/", 1)[1]: p.read_bytes() for p in sorted(root.rglob("*.csv"))}


def reproducibility_criterion(workers: int = 1) -> CriterionResult:
    from .cli import main

    common = ["--set", "scheme.paths=30000", "--set", "scheme.chunk=4096", "--set", "scheme.p=1", "--seed", "42"]
    checks = {}
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for command in ("simulate", "density"):
            runs = {}
            for label, extra in (("a", ["--workers", "1"]), ("b", ["--workers", "1"]), ("c", ["--workers", "3"])):
                root = tmp / command / label
                code = main([command, *common, *extra, "--output", str(root)])
                runs[label] = (code, _csv_bytes(root))
            codes_ok = all(code == 0 for code, _ in runs.values())
            checks[command] = {"repeat_identical": codes_ok and runs["a"][1] == runs["b"][1],
                               "workers_identical": codes_ok and runs["a"][1] == runs["c"][1],
                               "files": sorted(runs["a"][1])}
    ok = all(v["repeat_identical"] and v["workers_identical"] for v in checks.values())
    return CriterionResult(12, "reproducibility", ok,
                           "; ".join(f"{k}: repeat {v['repeat_identical']}, workers {v['workers_identical']}"
                                     for k, v in checks.items()),
                           "bit-identical CSVs across repeats and worker counts", detail=checks)


CRITERIA = {1: identity_criterion, 2: derivative_criterion, 3: iid_llt_criterion, 4: normalization_criterion,
            5: gaussian_oracle_criterion, 6: remainder_criterion, 7: tail_shape_criterion,
            8: small_ball_criterion, 9: moment_scaling_criterion, 10: local_time_criterion,
            11: doeblin_criterion, 12: reproducibility_criterion}


def run_criterion(number: int, workers: int = 1) -> CriterionResult:
    start = time.perf_counter()
    result = CRITERIA[number](workers)
    result.elapsed = time.perf_counter() - start
    log.info("%s", result.line())
    return result


def run_all(workers: int = 1, selected=None) -> list[CriterionResult]:
    numbers = sorted(selected) if selected else sorted(CRITERIA)
    return [run_criterion(k, workers) for k in numbers]
