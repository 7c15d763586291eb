"""Command line entry point: ``truncllt <command> [config] [options]``.

Data go to ``<output>/<run-id>/``; logs go to standard error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checks import identity_suite
from .config import (EXIT_ACCEPTANCE, EXIT_SCHEMA, EXIT_UNREADABLE, ConfigError, ConfigReadError, RunConfig,
                     apply_overrides, build_decomp, build_ensemble, build_model, canonical_json, content_hash,
                     evaluation_points, load_raw, validate_config)
from .estimator import (EstimatorError, density_estimate, density_gradient_estimate, mgf_probe, remainder_mass,
                        tail_probe)
from .experiments import (ExperimentError, delta_bump, gaussian_oracle_run, iid_llt_run, lebesgue_box,
                          local_time_run, overlap_ladder, w_measure_check)
from .scheme import truncation_batch

log = logging.getLogger("truncllt")

COMMANDS = ("simulate", "density", "gradient", "remainder", "tail", "mgf", "iid-llt", "oracle",
            "local-time", "doeblin", "check", "acceptance")


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return int(value)
    return value


def write_csv(path: Path, rows: list[dict]) -> None:
    """RFC 4180 CSV with shortest round-trip float formatting."""
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


class Run:
    """Output directory plus manifest bookkeeping for one command."""

    def __init__(self, command: str, cfg: RunConfig, root: Path, options: dict | None = None):
        self.command = command
        self.cfg = cfg
        # worker count and output root do not affect results, so they stay out of the run id
        inputs = cfg.model_dump(mode="json", exclude={"workers", "output"})
        self.options = options or {}
        payload = {"command": command, "config": inputs, "options": self.options}
        self.input_hash = content_hash(payload)
        self.run_id = f"{command}-{self.input_hash[:12]}"
        self.dir = Path(root) / self.run_id
        self.dir.mkdir(parents=True, exist_ok=True)
        self.outputs: dict[str, str] = {}
        self.summary: dict = {}

    def table(self, name: str, rows: list[dict]) -> Path:
        path = self.dir / name
        write_csv(path, rows)
        self.outputs[name] = hashlib.sha1(path.read_bytes()).hexdigest()
        return path

    def finish(self, status: str) -> Path:
        manifest = {"command": self.command, "run_id": self.run_id, "input_hash": self.input_hash,
                    "config": self.cfg.model_dump(mode="json"), "seed": self.cfg.seed,
                    "workers": self.cfg.workers, "options": self.options, "version": __version__, "status": status,
                    "outputs": dict(sorted(self.outputs.items())), "summary": self.summary}
        path = self.dir / "manifest.json"
        path.write_text(json.dumps(json.loads(canonical_json(manifest)), indent=2, sort_keys=True) + "\n")
        return path


# -- commands -----------------------------------------------------------------------

def _points_rows(ys: np.ndarray, **columns) -> list[dict]:
    rows = []
    for i, y in enumerate(ys):
        row = {f"y_{j + 1}": float(v) for j, v in enumerate(np.atleast_1d(y))}
        row.update({k: v[i] for k, v in columns.items()})
        rows.append(row)
    return rows


def cmd_simulate(run: Run, args) -> int:
    ens = build_ensemble(run.cfg)
    rows, states = [], []
    for index, size in ens.chunks():
        batch = ens.batch(0, index, size)
        on_xi = truncation_batch(batch, ens.t, ens.c_value, ens.p_value)
        value = batch.value_at(ens.t)
        counts = batch.eps_count_at(ens.t)
        for i in range(batch.size):
            row = {"path": index * ens.chunk + i, "chunk": index, "theta": bool(batch.theta[i]),
                   "eps_count": int(counts[i]), "witness": bool(on_xi[i])}
            row.update({f"x_{j + 1}": value[i, j] for j in range(ens.dim)})
            rows.append(row)
        if index == 0:
            for i in range(min(batch.size, 100)):
                for k in range(ens.n + 1):
                    row = {"path": i, "step": k}
                    row.update({f"x_{j + 1}": batch.states[i, k, j] for j in range(ens.dim)})
                    states.append(row)
    run.table("paths.csv", rows)
    run.table("states.csv", states)
    run.summary = {"paths": len(rows), "on_xi": int(sum(r["witness"] for r in rows))}
    return 0


def _dump(run: Run, record: dict) -> None:
    rows = [{"chunk": int(record["chunk"][i]), "theta": bool(record["theta"][i]),
             "on_xi": bool(record["on_xi"][i]), "det_sigma": record["det"][i],
             "inv_sigma_norm": record["inv_norm"][i], "Upsilon": record["Upsilon"][i]}
            for i in range(len(record["Upsilon"]))]
    run.table("weights.csv", rows)


def _density_like(run: Run, args, gradient: bool) -> int:
    cfg = run.cfg
    ens = build_ensemble(cfg)
    ys = evaluation_points(cfg)
    record = {} if args.dump_weights else None
    try:
        if gradient:
            est = density_gradient_estimate(ens, ys, cfg.estimator.coordinate, cfg.estimator.orthant, record)
        else:
            est = density_estimate(ens, ys, cfg.estimator.orthant, record=record)
    except EstimatorError as exc:
        log.error("%s", exc)
        run.summary = {"error": str(exc)}
        return EXIT_ACCEPTANCE
    run.table("gradient.csv" if gradient else "density.csv", [e.row() for e in est])
    if record is not None:
        _dump(run, record)
    run.summary = {"points": len(est), "n_on_xi": est[0].n_on_xi, "remainder_hat": est[0].remainder_hat}
    return 0


def cmd_density(run: Run, args) -> int:
    return _density_like(run, args, False)


def cmd_gradient(run: Run, args) -> int:
    return _density_like(run, args, True)


def cmd_remainder(run: Run, args) -> int:
    out = remainder_mass(build_ensemble(run.cfg))
    run.table("remainder.csv", [out])
    run.summary = out
    return 0


def cmd_tail(run: Run, args) -> int:
    ens = build_ensemble(run.cfg)
    levels = run.cfg.estimator.levels or [0.0, 0.5, 1.0, 1.5, 2.0, 2.5]
    out = tail_probe(ens, levels)
    run.table("tail.csv", [{"level": lv, "prob": p, "se": s} for lv, p, s in zip(out["levels"], out["prob"], out["se"])])
    run.summary = {"fit": out["fit"]}
    return 0


def cmd_mgf(run: Run, args) -> int:
    ens = build_ensemble(run.cfg)
    lambdas = run.cfg.estimator.lambdas or [0.0, 0.5, 1.0, 1.5, 2.0]
    out = mgf_probe(ens, lambdas)
    rows = [{**{f"lambda_{j + 1}": float(v) for j, v in enumerate(lam)}, "mgf": m, "se": s, "overflow": bool(o)}
            for lam, m, s, o in zip(out["lambdas"], out["mgf"], out["se"], out["overflow"])]
    run.table("mgf.csv", rows)
    run.summary = {"fit": out["fit"], "overflow": bool(out["overflow"].any())}
    return 0


def _ensemble_kwargs(cfg: RunConfig) -> dict:
    sc = cfg.scheme
    return {"c": sc.c, "p": sc.p, "seed": cfg.seed, "workers": cfg.workers, "chunk": sc.chunk,
            "method": cfg.estimator.method, "pilot": cfg.estimator.pilot}


def cmd_iid_llt(run: Run, args) -> int:
    cfg = run.cfg
    ys = evaluation_points(cfg) if (cfg.estimator.y or cfg.estimator.grid) else None
    out = iid_llt_run(build_decomp(cfg), cfg.experiment.n_ladder, cfg.scheme.paths, ys, **_ensemble_kwargs(cfg))
    run.table("llt.csv", [{k: v for k, v in r.items() if k != "detail"} for r in out["rows"]])
    points = []
    for r in out["rows"]:
        det = r["detail"]
        points += [{"n": r["n"], **row} for row in _points_rows(out["ys"], q_hat=det["q_hat"], se=det["se"],
                                                                 oracle=det["oracle"], gap=det["gaps"])]
    run.table("llt_points.csv", points)
    run.summary = {"non_increasing": out["non_increasing"], "sup_gaps": [r["sup_gap"] for r in out["rows"]]}
    return 0


def cmd_oracle(run: Run, args) -> int:
    cfg = run.cfg
    entry = build_model(cfg)
    try:
        out = gaussian_oracle_run(entry, build_ensemble(cfg, entry), cfg.experiment.t_grid)
    except ExperimentError as exc:
        log.error("%s", exc)
        return EXIT_SCHEMA
    rows = []
    for r in out["rows"]:
        rows += [{"t": r["t"], **row} for row in _points_rows(r["ys"], q_hat=r["q_hat"], se=r["se"],
                                                               oracle=r["oracle"], gap=r["gaps"])]
    run.table("oracle.csv", rows)
    run.summary = {"sup_gap": out["sup_gap"], "peak_slope": out["peak_slope"]}
    return 0


def cmd_local_time(run: Run, args) -> int:
    cfg = run.cfg
    ex = cfg.experiment
    wspec = delta_bump(cfg.model.dim) if ex.wmeasure == "delta_bump" else lebesgue_box(ex.half_width)
    report = w_measure_check(wspec, ex.delta_ladder)
    rows = [{"condition": key, "passed": report[key]["passed"]} for key in ("B6", "B7", "B8")]
    run.table("conditions.csv", rows)
    try:
        out = local_time_run(wspec, build_ensemble(cfg), report)
    except ExperimentError as exc:
        log.error("%s", exc)
        run.summary = {"error": str(exc)}
        return EXIT_ACCEPTANCE
    run.table("local_time.csv", [{k: v for k, v in out.items() if k != "conditions"}])
    run.summary = {"psi_mean": out["psi_mean"], "target": out["target"], "relative_gap": out["relative_gap"]}
    return 0


def cmd_doeblin(run: Run, args) -> int:
    cfg = run.cfg
    entry = build_model(cfg)
    ens = build_ensemble(cfg, entry)
    offsets = cfg.experiment.offsets
    if cfg.experiment.x_prime is not None:
        shift = np.atleast_1d(np.asarray(cfg.experiment.x_prime, dtype=float)) - ens.x0
        offsets = sorted(set(offsets) | {float(shift[0])})
    out = overlap_ladder(ens, ens.x0, offsets, entry if entry.oracle is not None else None)
    rows = [{"offset": off, "gamma_hat": g, "se_bound": e, "oracle": r["oracle"], "grid_bound": r["grid_bound"]}
            for off, g, e, r in zip(out["offsets"], out["gammas"], out["errors"], out["runs"])]
    run.table("doeblin.csv", rows)
    run.summary = {"monotone": out["monotone"], "gammas": out["gammas"]}
    return 0


def cmd_check(run: Run, args) -> int:
    ex = run.cfg.experiment
    out = identity_suite(ex.identity_samples, ex.duality_samples, run.cfg.seed)
    for res in out["results"]:
        print(res.line())
    run.table("checks.csv", [{"check": r.name, "measured": r.measured, "tolerance": r.tolerance,
                              "passed": r.passed} for r in out["results"]])
    run.summary = {"passed": out["passed"]}
    return 0 if out["passed"] else EXIT_ACCEPTANCE


def cmd_acceptance(run: Run, args) -> int:
    from .acceptance import run_all
    results = run_all(workers=run.cfg.workers, selected=args.only)
    for res in results:
        print(res.line())
    run.table("summary.csv", [res.row() for res in results])
    run.summary = {"passed": all(r.passed for r in results)}
    return 0 if run.summary["passed"] else EXIT_ACCEPTANCE


HANDLERS = {"simulate": cmd_simulate, "density": cmd_density, "gradient": cmd_gradient,
            "remainder": cmd_remainder, "tail": cmd_tail, "mgf": cmd_mgf, "iid-llt": cmd_iid_llt,
            "oracle": cmd_oracle, "local-time": cmd_local_time, "doeblin": cmd_doeblin,
            "check": cmd_check, "acceptance": cmd_acceptance}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="truncllt", description="Truncated local limit theorem toolkit")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("config", nargs="?", help="TOML run configuration (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, help="overrides TRUNCLLT_SEED and the config seed")
    parser.add_argument("--workers", type=int, help="worker threads")
    parser.add_argument("--output", help="output root directory")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a dotted config key (repeatable)")
    parser.add_argument("--dump-weights", action="store_true", help="write per-path weight diagnostics")
    parser.add_argument("--only", type=int, action="append", help="acceptance: run only these criteria")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    raw = load_raw(args.config) if args.config else {"model": {"name": "iid"}}
    overrides = list(args.set)
    env_seed = os.environ.get("TRUNCLLT_SEED")
    if env_seed is not None and args.seed is None:
        overrides.append(f"seed={env_seed}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    if args.output is not None:
        overrides.append(f"output={json.dumps(args.output)}")
    return validate_config(apply_overrides(raw, overrides))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        cfg = resolve_config(args)
    except ConfigReadError as exc:
        log.error("%s", exc)
        return EXIT_UNREADABLE
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_SCHEMA
    options = {"dump_weights": args.dump_weights, "only": sorted(args.only or [])}
    run = Run(args.command, cfg, Path(cfg.output), options)
    log.info("run %s -> %s", args.command, run.dir)
    try:
        code = HANDLERS[args.command](run, args)
    except (ValueError, RuntimeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        run.summary = {"error": str(exc)}
        run.finish("error")
        return EXIT_SCHEMA
    run.finish("ok" if code == 0 else "failed")
    return code


if __name__ == "__main__":
    sys.exit(main())
