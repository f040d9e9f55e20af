"""Monte Carlo harness: instance generation, trial execution, aggregation and reports."""
from __future__ import annotations

import csv
import json
import math
import os
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from .. import __version__, rmt, solver, stats
from . import io
from .config import ExperimentConfig

THREADS_ENV = "SSMAMP_THREADS"
SEED_RULE = "numpy.random.SeedSequence(entropy=seed, spawn_key=(trial,)).spawn(3) -> (A, x, noise)"

TRAJECTORY_COLUMNS = ("t", "trial", "mse", "chi", "v", "g_mem", "zeta", "sigma_x_pred",
                      "c_theta_tt_pred", "field_var_emp", "tap_r1")
AGGREGATE_COLUMNS = ("t", "quantity", "value", "sem", "n", "provenance")

# acceptance thresholds used by the report checks
MSE_REL_TOL = 0.05
MSE_SEM_FACTOR = 3.0
FIELD_VAR_REL_TOL = 0.05
KURTOSIS_TOL = 0.15
TAP_TOL = 1e-6
SE_CHECK_HORIZON = 10


def pool_width(default: int = 1) -> int:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return default
    try:
        width = int(raw)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    return max(width, 1)


def trial_seed(master: int, trial: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master, spawn_key=(trial,))


def make_instance(cfg: ExperimentConfig, trial: int) -> tuple[solver.ProblemInstance, np.ndarray]:
    """Sample trial ``trial``; returns the instance and its noise vector."""
    inst = solver.synthetic_instance(cfg.ensemble_spec(), cfg.prior_spec(), cfg.k,
                                     trial_seed(cfg.seed, trial))
    inst.seed = [cfg.seed, trial]
    return inst, inst.y - inst.a.a @ inst.x_true


def generate(cfg: ExperimentConfig, out_dir=None) -> list[Path]:
    """Write one instance directory per trial plus ``manifest.json``."""
    root = Path(out_dir or cfg.output_dir)
    dirs = []
    for trial in range(cfg.trials):
        inst, noise = make_instance(cfg, trial)
        d = io.write_instance(root / f"trial_{trial:04d}", inst, cfg.prior_spec(), noise,
                              extra={"seed": cfg.seed, "trial": trial})
        dirs.append(d)
    manifest = {"config": cfg.to_dict(), "seed_rule": SEED_RULE,
                "instances": [{"trial": i, "dir": d.name} for i, d in enumerate(dirs)],
                "metadata": metadata(cfg)}
    try:
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    except OSError as exc:
        raise io.InstanceIOError(f"{root / 'manifest.json'}: {exc}") from exc
    return dirs


def metadata(cfg: ExperimentConfig) -> dict:
    return {"ssmamp": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(), "master_seed": cfg.seed,
            "seed_rule": SEED_RULE, "truncation": cfg.truncation,
            "quad_order": solver.SolverOptions().quad_order}


# ---------------------------------------------------------------------------
# trials
# ---------------------------------------------------------------------------

@dataclass
class TrialResult:
    trial: int
    trajectory: solver.Trajectory = field(repr=False)
    sigma_x_pred: np.ndarray = field(repr=False)
    c_theta_tt_pred: np.ndarray = field(repr=False)
    field_checks: dict = field(default_factory=dict)
    diverged: bool = False
    prediction_error: str | None = None

    def rows(self) -> list[dict]:
        out = []
        for i, r in enumerate(self.trajectory.records):
            out.append({"t": r.t, "trial": self.trial, "mse": r.mse, "chi": r.chi, "v": r.v,
                        "g_mem": r.g_mem, "zeta": r.zeta,
                        "sigma_x_pred": _at(self.sigma_x_pred, i),
                        "c_theta_tt_pred": _at(self.c_theta_tt_pred, i),
                        "field_var_emp": r.field_var_emp, "tap_r1": r.tap_r1})
        return out


def _at(arr, i):
    return float(arr[i]) if i < len(arr) else math.nan


def predict_along(traj: solver.Trajectory, ens: rmt.EnsembleSpec):
    """``sigma_x(t)`` and ``C_theta(t,t)`` predicted from the run's own ``chi``, ``v`` and ``C(t,t)``."""
    n = len(traj.records) - 1  # the last record carries no step
    chi, v = traj.column("chi")[:n], traj.column("v")[:n]
    mse, g = traj.column("mse")[:n], traj.column("g_mem")[:n]
    if n == 0:
        return np.empty(0), np.empty(0)
    zeta = stats.zeta_sequence(chi, ens)
    sig = stats.sigma_x_sequence(chi, v, ens, zeta=zeta)
    if ens.kind is rmt.EnsembleKind.ROW_ORTHOGONAL:
        ct = stats.kappa_recursion(chi, zeta, g, ens, v_seq=v, corr_diag=mse)
    elif ens.kind is rmt.EnsembleKind.IID_GAUSSIAN:
        ct = stats.c_theta_matrix(chi, v, np.diag(mse), ens, diagonal_only=True).diagonal().copy()
    else:
        if traj.correlation is None:
            raise ValueError("custom ensembles need the error correlation matrix")
        ct = stats.c_theta_matrix(chi, v, traj.correlation[:n, :n], ens,
                                  diagonal_only=True).diagonal().copy()
    return sig, ct


def run_trial(cfg: ExperimentConfig, trial: int, instance: solver.ProblemInstance | None = None
              ) -> TrialResult:
    ens, prior = cfg.ensemble_spec(), cfg.prior_spec()
    if instance is None:
        instance, _ = make_instance(cfg, trial)
    opts = cfg.solver_options(keep_fields=tuple(cfg.check_iters),
                              track_errors=ens.kind is rmt.EnsembleKind.CUSTOM)
    traj = solver.run(instance, prior, ens, opts)
    diverged = traj.stop_reason.startswith("diverged")
    try:
        sig, ct = predict_along(traj, ens)
        err = None
    except (ValueError, rmt.DomainError) as exc:
        n = len(traj.records)
        sig, ct, err = np.full(n, math.nan), np.full(n, math.nan), str(exc)
    checks = {}
    if instance.x_true is not None:
        wanted = {t: traj.fields[t] for t in cfg.check_iters if t in traj.fields}
        last_t = traj.records[-1].t - 1
        if "last" in traj.fields and last_t >= 0:
            wanted.setdefault(last_t, traj.fields["last"])
        for t, psi in sorted(wanted.items()):
            if t < len(ct) and np.isfinite(ct[t]) and ct[t] > 0 and np.all(np.isfinite(psi)):
                checks[t] = stats.replica_field_check(psi, instance.x_true, sig[t], ct[t])
    return TrialResult(trial=trial, trajectory=traj, sigma_x_pred=sig, c_theta_tt_pred=ct,
                       field_checks=checks, diverged=diverged, prediction_error=err)


# ---------------------------------------------------------------------------
# aggregation and reports
# ---------------------------------------------------------------------------

def _mean_sem(values):
    vals = np.asarray([x for x in values if x == x], dtype=float)
    if vals.size == 0:
        return math.nan, math.nan, 0
    sem = float(np.std(vals, ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else math.nan
    return float(np.mean(vals)), sem, int(vals.size)


def aggregate(rows: list[dict]) -> dict:
    """Per-iteration mean, standard error and count for each per-trial column."""
    by_t: dict[int, list[dict]] = {}
    for r in rows:
        by_t.setdefault(int(r["t"]), []).append(r)
    out = {}
    for t in sorted(by_t):
        out[t] = {q: _mean_sem(float(r[q]) for r in by_t[t])
                  for q in ("mse", "chi", "field_var_emp", "c_theta_tt_pred", "sigma_x_pred")}
    return out


def se_prediction(cfg: ExperimentConfig, horizon: int):
    """State-evolution MSE curve, or ``None`` with a reason when no closed recursion applies."""
    ens, prior = cfg.ensemble_spec(), cfg.prior_spec()
    try:
        if ens.kind is rmt.EnsembleKind.IID_GAUSSIAN and cfg.path == "amp":
            return stats.amp_state_evolution(prior, ens, horizon), None
        return stats.state_evolution(prior, ens, horizon), None
    except (ValueError, rmt.DomainError) as exc:
        return None, str(exc)


@dataclass
class RunReport:
    config: ExperimentConfig
    rows: list = field(repr=False)
    aggregate: dict = field(repr=False)
    se: stats.StateEvolution | None = field(default=None, repr=False)
    se_error: str | None = None
    checks: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    trials: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return all(v for v in self.checks.values() if v is not None)

    def aggregate_rows(self) -> list[dict]:
        rows = []
        for t, qs in self.aggregate.items():
            for q, (mean, sem, n) in qs.items():
                prov = "predicted" if q in ("c_theta_tt_pred", "sigma_x_pred") else "empirical"
                rows.append({"t": t, "quantity": q, "value": mean, "sem": sem, "n": n,
                             "provenance": prov})
        if self.se is not None:
            for t, val in enumerate(self.se.mse):
                rows.append({"t": t, "quantity": "mse_se", "value": float(val), "sem": math.nan,
                             "n": 1, "provenance": "predicted"})
            for t, val in enumerate(self.se.c_theta):
                rows.append({"t": t, "quantity": "c_theta_tt_se", "value": float(val),
                             "sem": math.nan, "n": 1, "provenance": "predicted"})
        for name, ok in self.checks.items():
            rows.append({"t": -1, "quantity": f"check:{name}",
                         "value": math.nan if ok is None else float(ok), "sem": math.nan,
                         "n": 1, "provenance": "identity"})
        return rows

    def report_lines(self) -> list[str]:
        lines = [f"{k} = {v}" for k, v in sorted(self.metadata.items())]
        lines += [f"config.{k} = {v}" for k, v in self.config.to_dict().items()]
        for name, ok in self.checks.items():
            status = "skipped" if ok is None else ("pass" if ok else "fail")
            lines.append(f"check.{name} = {status}")
        lines += [f"detail.{k} = {v}" for k, v in self.details.items()]
        if self.se_error:
            lines.append(f"se.error = {self.se_error}")
        lines.append(f"passed = {self.passed}")
        return lines

    def write(self, out_dir=None) -> Path:
        root = Path(out_dir or self.config.output_dir)
        root.mkdir(parents=True, exist_ok=True)
        self.config.save(root / "config.json")
        if "csv" in self.config.formats:
            write_csv(root / "trajectories.csv", self.rows, TRAJECTORY_COLUMNS)
            write_csv(root / "aggregate.csv", self.aggregate_rows(), AGGREGATE_COLUMNS)
        if "report" in self.config.formats:
            (root / "report.txt").write_text("\n".join(self.report_lines()) + "\n")
        return root


def write_csv(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow({c: _fmt(r[c]) for c in columns})


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else x


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("t", "trial") else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]


def final_field_rows(rows: list[dict]) -> list[dict]:
    """Per trial, the last row with both an empirical and a predicted field variance."""
    last = {}
    for r in rows:
        if r["field_var_emp"] == r["field_var_emp"] and r["c_theta_tt_pred"] == r["c_theta_tt_pred"]:
            if r["trial"] not in last or r["t"] > last[r["trial"]]["t"]:
                last[r["trial"]] = r
    return [last[k] for k in sorted(last)]


def evaluate_checks(cfg: ExperimentConfig, rows: list[dict], agg: dict, se, trials=None):
    """Pass/fail flags; ``None`` marks a check that does not apply to this configuration."""
    checks, details = {}, {}
    ens = cfg.ensemble_spec()
    # the SE drives chi deterministically; it describes empirical-chi runs only where
    # posterior variance and error coincide along the trajectory (iid ensemble)
    se_applies = ens.kind is rmt.EnsembleKind.IID_GAUSSIAN or cfg.chi_mode == "replica"
    if se is not None and se_applies:
        worst, ok = 0.0, True
        for t in range(min(SE_CHECK_HORIZON, len(se.mse) - 1) + 1):
            if t not in agg:
                continue
            mean, sem, n = agg[t]["mse"]
            pred = float(se.mse[t])
            tol = max(MSE_REL_TOL * pred, MSE_SEM_FACTOR * (sem if sem == sem else 0.0))
            worst = max(worst, abs(mean - pred) / pred)
            ok &= abs(mean - pred) <= tol
        checks["se_mse"] = bool(ok)
        details["se_mse.worst_rel_gap"] = worst
    else:
        checks["se_mse"] = None
    # empirical field variance vs prediction, trial-averaged
    gaps = {}
    for t in sorted(set(cfg.check_iters)):
        if t in agg:
            emp, pred = agg[t]["field_var_emp"][0], agg[t]["c_theta_tt_pred"][0]
            if emp == emp and pred == pred:
                gaps[f"t{t}"] = abs(emp / pred - 1.0)
    finals = final_field_rows(rows)
    if finals:
        emp = np.mean([r["field_var_emp"] for r in finals])
        pred = np.mean([r["c_theta_tt_pred"] for r in finals])
        gaps["final"] = float(abs(emp / pred - 1.0))
    for k, gap in gaps.items():
        details[f"field_var.{k}.rel_gap"] = gap
    checks["field_var"] = all(g < FIELD_VAR_REL_TOL for g in gaps.values()) if gaps else None
    if trials:
        kurt = [abs(fc.excess_kurtosis) for tr in trials for fc in tr.field_checks.values()]
        checks["field_kurtosis"] = bool(max(kurt) < KURTOSIS_TOL) if kurt else None
        if kurt:
            details["field_kurtosis.worst"] = max(kurt)
    # TAP consistency at convergence
    conv_r1 = []
    if trials:
        conv_r1 = [tr.trajectory.records[-1].tap_r1 for tr in trials if tr.trajectory.converged]
    checks["tap_consistency"] = bool(max(conv_r1) < TAP_TOL) if conv_r1 and cfg.record_tap else None
    if conv_r1:
        details["tap_consistency.worst_r1"] = max(conv_r1)
    if trials is not None:
        details["trials.diverged"] = sum(tr.diverged for tr in trials)
        details["trials.converged"] = sum(tr.trajectory.converged for tr in trials)
    details["ensemble"] = ens.kind.value
    return checks, details


def build_report(cfg: ExperimentConfig, results: list[TrialResult]) -> RunReport:
    results = sorted(results, key=lambda r: r.trial)
    rows = [row for r in results for row in r.rows()]
    agg = aggregate(rows)
    horizon = max((len(r.trajectory.records) for r in results), default=1)
    se, se_err = se_prediction(cfg, max(horizon - 1, 1))
    checks, details = evaluate_checks(cfg, rows, agg, se, results)
    return RunReport(config=cfg, rows=rows, aggregate=agg, se=se, se_error=se_err,
                     checks=checks, details=details, metadata=metadata(cfg), trials=results)


def report_from_dir(run_dir) -> RunReport:
    """Rebuild a report from the stored per-trial rows and config."""
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.load(run_dir / "config.json")
    rows = read_csv(run_dir / "trajectories.csv")
    agg = aggregate(rows)
    horizon = max((int(r["t"]) for r in rows), default=1)
    se, se_err = se_prediction(cfg, max(horizon, 1))
    checks, details = evaluate_checks(cfg, rows, agg, se, None)
    return RunReport(config=cfg, rows=rows, aggregate=agg, se=se, se_error=se_err,
                     checks=checks, details=details, metadata=metadata(cfg))


def experiment(cfg: ExperimentConfig, instances_dir=None, workers: int | None = None,
               write: bool = True) -> RunReport:
    """Run all trials (in a thread pool of ``workers`` or ``$SSMAMP_THREADS``) and assemble the report."""
    width = workers if workers is not None else pool_width()

    def one(trial):
        inst = None
        if instances_dir is not None:
            inst, _, _ = io.read_instance(Path(instances_dir) / f"trial_{trial:04d}")
        return run_trial(cfg, trial, inst)

    if width <= 1:
        results = [one(t) for t in range(cfg.trials)]
    else:
        with ThreadPoolExecutor(max_workers=width) as pool:
            results = list(pool.map(one, range(cfg.trials)))
    report = build_report(cfg, results)
    if write:
        report.write()
    return report
