"""Experiment runner: stages tails -> induce -> verify -> regularity -> limits -> report.

Each stage reads the resolved :class:`~gmstruct.config.ExperimentConfig`,
writes its artifacts into the output directory, and records wall time in
``manifest.json``.  The manifest is written even when a stage fails, with
the failing stage named.  Standalone ``verify`` re-runs the (deterministic)
construction rather than loading ``structure.json``, so a config + seed is
always the single source of truth.

Exit codes: 0 success; 2 configuration error; 3 numerical failure under
``--strict``; 4 acceptance-threshold failure under ``report --check``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys as _sys
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .errors import ConfigError, GmstructError, InsufficientData, MissingStage
from .inducing import (
    measure_flow_constants,
    return_tail,
    run_construction,
    verify_backward_contraction,
    verify_distortion,
    verify_markov,
    write_structure_json,
)
from .pliss import expansion_tail
from .regularity import regularity_report
from .stats import (
    clt_test,
    correlation,
    fiber_norm,
    fit_power_law,
    large_deviations,
    trig_base,
    write_clt_json,
    write_correlation_csv,
    write_fits_json,
    write_ld_csv,
    write_tail_csv,
)

TOOL_VERSION = "0.1.0"
STAGE_ORDER = ("tails", "induce", "verify", "regularity", "limits", "report")


def _observable(token: str):
    if token == "fiber_norm":
        return fiber_norm()
    return trig_base(int(token[4:]))      # trigK


def _fmt(x):
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# stages


def stage_tails(cfg: ExperimentConfig, out: Path, ctx: dict):
    sys_ = cfg.system()
    curve = expansion_tail(sys_, cfg.grid, cfg.c, cfg.horizon, sigma=cfg.sigma)
    write_tail_csv(out / "tail_E.csv", curve, censored=True)


def stage_induce(cfg: ExperimentConfig, out: Path, ctx: dict):
    sys_ = cfg.system()
    structure = run_construction(sys_, cfg.construction_params(), seed=cfg.seed)
    ctx["structure"] = structure
    write_structure_json(structure, out / "structure.json", sys_)
    write_tail_csv(out / "tail_R.csv", return_tail(structure), censored=False)
    flow = measure_flow_constants(structure)
    flow["gcd_R"] = structure.gcd_R()
    flow["leftover_mass"] = structure.leftover_mass()
    with open(out / "flow.json", "w") as fh:
        json.dump(flow, fh, indent=1)
    if structure.nonconvergent:
        raise GmstructError("induce: construction left more than half the arc "
                            "unpartitioned (NonConvergent)")


def stage_verify(cfg: ExperimentConfig, out: Path, ctx: dict):
    sys_ = cfg.system()
    structure = ctx.get("structure")
    if structure is None:
        structure = run_construction(sys_, cfg.construction_params(), seed=cfg.seed)
        ctx["structure"] = structure
    doc = {
        "markov": verify_markov(structure, sys_, seed=cfg.seed),
        "backward_contraction": verify_backward_contraction(structure, sys_,
                                                            seed=cfg.seed),
        "distortion": verify_distortion(structure, sys_, seed=cfg.seed),
        "construction_violations": structure.violations,
    }
    with open(out / "verify.json", "w") as fh:
        json.dump(doc, fh, indent=1)
    bad = (doc["markov"]["covering_violations"] + doc["markov"]["overlap_violations"]
           + structure.violations)
    if bad:
        raise GmstructError(f"verify: {bad} structure violations detected")


def stage_regularity(cfg: ExperimentConfig, out: Path, ctx: dict):
    rep = regularity_report(cfg.system(), seed=cfg.seed)
    with open(out / "regularity.json", "w") as fh:
        json.dump(rep, fh, indent=1)


def stage_limits(cfg: ExperimentConfig, out: Path, ctx: dict):
    sys_ = cfg.system()
    phi = _observable(cfg.observables[0])
    corr = correlation(sys_, phi, phi, cfg.stats_n_max, cfg.orbit_len,
                       seed=cfg.seed)
    write_correlation_csv(out / "correlation.csv", corr)
    clt = clt_test(sys_, phi, cfg.stats_n_max * 10, cfg.ensemble, seed=cfg.seed)
    write_clt_json(out / "clt.json", clt)
    from .pliss import geometric_grid
    n_grid = [int(n) for n in geometric_grid(cfg.stats_n_max * 10) if n >= 5]
    ld = large_deviations(sys_, phi, cfg.eps, n_grid, max(cfg.ensemble, 10 ** 4),
                          seed=cfg.seed)
    write_ld_csv(out / "ld.csv", ld)
    fits = {}
    for name, curve in (("correlation", corr), ("ld", ld)):
        try:
            fits[name] = fit_power_law(curve)
        except InsufficientData:
            pass
    write_fits_json(out / "fits.json", fits)


# ---------------------------------------------------------------------------
# report


def _read_curve(path, value_col):
    rows = list(csv.DictReader(open(path)))

    class _C:
        n_values = np.array([int(r["n"]) for r in rows])
        values = np.array([float(r[value_col]) for r in rows])

    return _C()


def _maybe_fit(curve, window=None):
    try:
        return fit_power_law(curve, window=window)
    except InsufficientData:
        return None


def build_report(cfg: ExperimentConfig, out: Path) -> dict:
    """Aggregate whatever stage artifacts exist; absent stages are 'pending'."""
    doc = {"pending": [], "fits": {}, "checks": {}}
    present = {name: out / name for name in
               ("tail_E.csv", "tail_R.csv", "structure.json", "flow.json",
                "verify.json", "regularity.json", "correlation.csv",
                "clt.json", "ld.csv")}
    missing = [n for n, p in present.items() if not p.exists()]
    if len(missing) == len(present):
        raise MissingStage(f"no stage outputs in {out}: missing {missing}")

    fits = {}
    tau_e = tau_r = None
    if present["tail_E.csv"].exists():
        tau_e = _maybe_fit(_read_curve(present["tail_E.csv"], "survival"))
        if tau_e:
            fits["tail_E"] = tau_e
            doc["tau_E"] = tau_e.exponent
    else:
        doc["pending"].append("tails")
    if present["tail_R.csv"].exists():
        tau_r = _maybe_fit(_read_curve(present["tail_R.csv"], "survival"))
        if tau_r:
            fits["tail_R"] = tau_r
            doc["tau_R"] = tau_r.exponent
    else:
        doc["pending"].append("induce")
    if tau_e and tau_r:
        doc["tau_comparison"] = (
            f"tau_R vs tau_E: {tau_r.exponent:.4f} vs {tau_e.exponent:.4f} "
            f"(transfer requires tau_R >= tau_E - 0.3)")
        doc["checks"]["tail_transfer"] = bool(
            tau_r.exponent >= tau_e.exponent - 0.3)

    for name, col in (("correlation", "value"), ("ld", "value")):
        p = present[f"{name}.csv"]
        if p.exists():
            fit = _maybe_fit(_read_curve(p, col))
            if fit:
                fits[name] = fit
                doc[f"{name}_exponent"] = fit.exponent
        else:
            doc["pending"].append("limits")

    if present["flow.json"].exists():
        flow = json.load(open(present["flow.json"]))
        doc["flow_constants"] = flow
        doc["checks"]["leftover_small"] = bool(flow["leftover_mass"] < 1e-3)
        doc["checks"]["a0_positive"] = bool(flow["a0"] > 0.0)
        doc["checks"]["c1_positive"] = bool(flow["c1"] > 0.0)

    if present["verify.json"].exists():
        ver = json.load(open(present["verify.json"]))
        doc["verification"] = {
            "P1_markov_violations": ver["markov"]["covering_violations"]
            + ver["markov"]["overlap_violations"],
            "P3_C_fit": ver["backward_contraction"]["C_fit"],
            "P4_eta_fit": ver["distortion"]["eta_fit"],
            "P4_max_residual_factor": ver["distortion"]["max_residual_factor"],
            "construction_violations": ver["construction_violations"],
        }
        doc["checks"]["P1_zero_violations"] = bool(
            doc["verification"]["P1_markov_violations"] == 0
            and ver["construction_violations"] == 0)
        doc["checks"]["P3_finite_C"] = bool(np.isfinite(ver["backward_contraction"]["C_fit"]))
        doc["checks"]["P4_residual_factor_le_2"] = bool(
            ver["distortion"]["max_residual_factor"] <= 2.0)
    else:
        doc["pending"].append("verify")

    if present["regularity.json"].exists():
        reg = json.load(open(present["regularity.json"]))
        doc["regularity"] = {k: reg[k] for k in
                             ("beta_fit", "alpha_fit", "holder_r_squared",
                              "holonomy_J_example", "holonomy_max_rel_err")}
        doc["checks"]["P2_beta_near_lambda_s"] = bool(
            abs(reg["beta_fit"] - cfg.lambda_s) <= 0.02)
        doc["checks"]["P5_holonomy_abs_cont"] = bool(
            reg["holonomy_max_rel_err"] <= 1e-3)
    else:
        doc["pending"].append("regularity")

    if present["clt.json"].exists():
        clt = json.load(open(present["clt.json"]))
        doc["ks_distance"] = clt["ks_distance"]
        doc["sigma2"] = clt["sigma2"]
        bound = 0.08 if cfg.family == "intermittent" else 0.05
        doc["checks"]["clt_ks"] = bool(clt["ks_distance"] <= bound)
    if tau_r is not None and "correlation" in fits:
        doc["correlation_vs_tau"] = (
            f"correlation exponent {fits['correlation'].exponent:.4f} vs "
            f"tau_R - 1 = {tau_r.exponent - 1.0:.4f}")

    doc["pending"] = sorted(set(doc["pending"]))
    doc["fits"] = {name: {"exponent": f.exponent, "intercept": f.intercept,
                          "r_squared": f.r_squared, "window": list(f.window)}
                   for name, f in fits.items()}
    doc["all_checks_pass"] = all(doc["checks"].values()) if doc["checks"] else False
    return doc, fits


def _report_text(doc: dict) -> str:
    lines = ["gibbs-markov structure experiment report", "=" * 41]
    if "tau_comparison" in doc:
        lines.append(doc["tau_comparison"])
    for key in ("tau_E", "tau_R", "correlation_exponent", "ld_exponent",
                "ks_distance", "sigma2"):
        if key in doc:
            lines.append(f"{key:24s} {_fmt(doc[key])}")
    if "correlation_vs_tau" in doc:
        lines.append(doc["correlation_vs_tau"])
    if "verification" in doc:
        for k, v in doc["verification"].items():
            lines.append(f"{k:24s} {v}")
    if "regularity" in doc:
        for k, v in doc["regularity"].items():
            lines.append(f"{k:24s} {v}")
    lines.append("checks:")
    for name, ok in sorted(doc["checks"].items()):
        lines.append(f"  [{'pass' if ok else 'FAIL'}] {name}")
    if doc["pending"]:
        lines.append("pending stages: " + ", ".join(doc["pending"]))
    return "\n".join(lines) + "\n"


def stage_report(cfg: ExperimentConfig, out: Path, ctx: dict):
    doc, fits = build_report(cfg, out)
    with open(out / "report.json", "w") as fh:
        json.dump(doc, fh, indent=1)
    (out / "report.txt").write_text(_report_text(doc))
    if fits:
        write_fits_json(out / "fits.json", fits)
    ctx["report"] = doc


STAGES = {"tails": stage_tails, "induce": stage_induce, "verify": stage_verify,
          "regularity": stage_regularity, "limits": stage_limits,
          "report": stage_report}


# ---------------------------------------------------------------------------
# driver


def _checksums(out: Path) -> dict:
    sums = {}
    for p in sorted(out.iterdir()):
        if p.is_file() and p.name != "manifest.json":
            sums[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    return sums


def _write_manifest(out: Path, cfg, stages: dict, failed: str | None,
                    workers: int):
    doc = {
        "tool_version": TOOL_VERSION,
        "config": cfg.echo() if cfg is not None else None,
        "auto_resolutions": cfg.resolved_rules if cfg is not None else {},
        "workers": workers,
        "stages": stages,
        "failed_stage": failed,
        "checksums": _checksums(out),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=1)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gmstruct",
        description="Gibbs-Markov inducing structures for solenoid models")
    parser.add_argument("subcommand",
                        choices=STAGE_ORDER + ("all",))
    parser.add_argument("--config", required=True, help="dotted-key config file")
    parser.add_argument("--out", default=None, help="output directory "
                        "(default: output_dir from the config)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed (unsigned 64-bit)")
    parser.add_argument("--workers", type=int, default=1,
                        help="global worker-count cap")
    parser.add_argument("--strict", action="store_true",
                        help="escalate numerical failures to exit code 3")
    parser.add_argument("--check", action="store_true",
                        help="with report: exit 4 unless all checks pass")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("--seed", "must be an unsigned 64-bit integer")
            cfg.seed = args.seed
        out = Path(args.out if args.out is not None else cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
    except ConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return 2

    to_run = STAGE_ORDER if args.subcommand == "all" else (args.subcommand,)
    ctx = {}
    stage_log = {}
    failed = None
    code = 0
    for name in to_run:
        start = time.monotonic()
        try:
            STAGES[name](cfg, out, ctx)
            stage_log[name] = {"status": "ok",
                               "wall_time_s": time.monotonic() - start}
        except MissingStage as exc:
            stage_log[name] = {"status": "failed", "error": str(exc),
                               "wall_time_s": time.monotonic() - start}
            print(f"{name}: {exc}", file=_sys.stderr)
            failed = name
            code = 4 if args.check else 3
            break
        except GmstructError as exc:
            stage_log[name] = {"status": "numerical-failure", "error": str(exc),
                               "wall_time_s": time.monotonic() - start}
            print(f"{name}: numerical failure: {exc}", file=_sys.stderr)
            if args.strict:
                failed = name
                code = 3
                break
    _write_manifest(out, cfg, stage_log, failed, args.workers)
    if code == 0 and args.check:
        rep = ctx.get("report")
        if rep is None or not rep["all_checks_pass"]:
            bad = [] if rep is None else [k for k, v in rep["checks"].items() if not v]
            print(f"acceptance checks failed: {bad}", file=_sys.stderr)
            return 4
    return code


if __name__ == "__main__":
    raise SystemExit(main())
