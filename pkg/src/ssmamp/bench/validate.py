"""Cross-module identity checks, runnable as one suite."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .. import rmt, solver
from ..prior import BernoulliGaussian

GRID_ALPHA = (0.25, 0.5, 1.0)
GRID_XI = (1.0, 10.0, 100.0)
KINDS = (rmt.EnsembleKind.IID_GAUSSIAN, rmt.EnsembleKind.ROW_ORTHOGONAL)

COMPOSITION_TOL = 1e-9
REVERSION_TOL = 1e-10
B_TOL = 1e-8
AMP_TOL = 1e-8
SPECIALIZED_TOL = 1e-6
TAP_TOL = 1e-6


@dataclass
class CheckResult:
    module: str
    identity: str
    worst: float
    tol: float
    passed: bool | None  # None: not applicable (reason in note)
    note: str = ""

    def line(self) -> str:
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[self.passed]
        extra = f" ({self.note})" if self.note else ""
        return f"{status} {self.module}: {self.identity} worst={self.worst:.3g} tol={self.tol:g}{extra}"


def _label(ens):
    return f"{ens.kind.value}(alpha={ens.alpha:g}, xi={ens.xi:g})"


def composition_error(ens: rmt.EnsembleSpec, a_coeffs=None, n_terms: int = 30,
                      radius: float = 0.1, n_points: int = 41) -> float:
    """``max |R(Rinv(w)) - w|`` for ``|w| <= radius``, ``Rinv`` the truncated inverse series."""
    a = rmt.r_inverse_coeffs(ens, n_terms) if a_coeffs is None else np.asarray(a_coeffs, float)
    w = np.linspace(-radius, radius, n_points)
    rinv = np.polynomial.polynomial.polyval(w, np.concatenate([[0.0], a]))
    return float(np.max(np.abs(rmt.r_transform(ens, rinv) - w)))


def check_composition(ens, a_coeffs=None, tol=COMPOSITION_TOL) -> CheckResult:
    ident = f"R(Rinv(w)) = w, |w| <= 0.1, {_label(ens)}"
    try:
        worst = composition_error(ens, a_coeffs)
    except rmt.DomainError as exc:
        return CheckResult("rmt", ident, float("nan"), tol, False, str(exc))
    return CheckResult("rmt", ident, worst, tol, bool(worst < tol))


def reversion_error(ens: rmt.EnsembleSpec, n: int = 20) -> float:
    """Closed-form ``a_n`` against Lagrange inversion of the free-cumulant series, relative per order."""
    closed = rmt.r_inverse_coeffs(ens, n)
    oracle = rmt.series_reversion(rmt.free_cumulants(ens, n + 1), n)
    scale = np.maximum(np.abs(closed), np.abs(oracle))
    scale[scale == 0] = 1.0
    return float(np.max(np.abs(closed - oracle) / scale))


def check_reversion(ens, n=20, tol=REVERSION_TOL) -> CheckResult:
    ident = f"closed a_n = Lagrange inversion, n <= {n}, {_label(ens)}"
    try:
        worst = reversion_error(ens, n)
    except (rmt.DomainError, ValueError) as exc:
        return CheckResult("rmt", ident, float("nan"), tol, False, str(exc))
    return CheckResult("rmt", ident, worst, tol, bool(worst < tol))


def b_error(ens: rmt.EnsembleSpec, n_max: int = 10) -> float:
    """Closed-form B coefficients against the numeric expansion, both scaled to O(1) per order.

    Entry ``(i, j)`` is multiplied by ``s^(i+j)`` with ``s`` the decay rate of the closed form.
    """
    closed = rmt.b_coefficients(ens, n_max, method="closed")
    series = rmt.b_coefficients(ens, n_max, method="series")
    if ens.kind is rmt.EnsembleKind.ROW_ORTHOGONAL:
        xi1, xi2 = ens.xi_pair
        s = np.sqrt(abs(xi1 * xi2))
    else:
        s = ens.xi
    p = np.add.outer(np.arange(n_max + 1), np.arange(n_max + 1)).astype(float)
    return float(np.max(np.abs(closed - series) * s**p))


def check_b(ens, n_max=10, tol=B_TOL) -> CheckResult:
    ident = f"closed B coefficients = numeric expansion, orders <= {n_max}, {_label(ens)}"
    try:
        worst = b_error(ens, n_max)
    except (rmt.DomainError, ValueError) as exc:
        return CheckResult("rmt", ident, float("nan"), tol, False, str(exc))
    return CheckResult("rmt", ident, worst, tol, bool(worst < tol))


def path_gap(ens: rmt.EnsembleSpec, path_a: str, path_b: str, k: int, iters: int,
             seed: int = 0, rho: float = 0.1) -> float:
    """Largest componentwise difference of ``m(t)`` between two solver paths over ``iters`` steps."""
    prior = BernoulliGaussian(rho)
    inst = solver.synthetic_instance(ens, prior, k, seed)
    states = []
    for path in (path_a, path_b):
        st = solver.initial_state(inst, prior)
        step = solver._step_fn(path, ens)
        a_coeffs = rmt.r_inverse_coeffs(ens, iters + 1) if step is None else None
        ms = []
        for _ in range(iters):
            if step is None:
                st, _ = solver.ssm_step_general(st, inst, prior, ens, a_coeffs)
            else:
                st, _ = step(st, inst, prior, ens)
            ms.append(st.m_curr.copy())
        states.append(np.array(ms))
    return float(np.max(np.abs(states[0] - states[1])))


def check_paths(ens, path_b, k, iters, tol, label) -> CheckResult:
    ident = f"generic = {label} trajectory, {iters} iterations, K={k}, {_label(ens)}"
    try:
        worst = path_gap(ens, "generic", path_b, k, iters)
    except (solver.SolverError, rmt.DomainError, ValueError) as exc:
        return CheckResult("solver", ident, float("nan"), tol, False, str(exc))
    return CheckResult("solver", ident, worst, tol, bool(worst < tol))


def check_tap_at_convergence(ens, k=1000, seed=0, tol=TAP_TOL) -> CheckResult:
    prior = BernoulliGaussian(0.1)
    inst = solver.synthetic_instance(ens, prior, k, seed)
    traj = solver.run(inst, prior, ens, path="specialized", max_iters=300, tol=1e-10,
                      record_tap=False)
    ident = f"TAP residual at convergence, K={k}, {_label(ens)}"
    if not traj.converged:
        return CheckResult("solver", ident, float("nan"), tol, False, traj.stop_reason)
    r1, _ = solver.tap_residual(inst, traj.m_final, prior, ens)
    return CheckResult("solver", ident, r1, tol, bool(r1 < tol))


def analytic_ensembles(include_singular: bool = False):
    for kind in KINDS:
        for alpha in GRID_ALPHA:
            for xi in GRID_XI:
                if (kind is rmt.EnsembleKind.ROW_ORTHOGONAL and alpha == 1.0
                        and not include_singular):
                    continue
                yield rmt.EnsembleSpec(kind, alpha, xi)


def run_suite(k: int = 1000, iters: int = 30) -> list[CheckResult]:
    """The full oracle suite at default sizes.

    The row-orthogonal ensemble at ``alpha = 1`` is reported as not applicable:
    there ``R`` vanishes identically and has no inverse.
    """
    out = []
    for ens in analytic_ensembles():
        out.append(check_composition(ens))
        out.append(check_reversion(ens))
        out.append(check_b(ens))
    for xi in GRID_XI:
        out.append(CheckResult("rmt", f"R-calculus, row_orthogonal(alpha=1, xi={xi:g})",
                               float("nan"), COMPOSITION_TOL, None,
                               "R is identically zero; no inverse series"))
    out.append(check_paths(rmt.EnsembleSpec.iid_gaussian(0.5, 10.0), "amp", k, iters,
                           AMP_TOL, "AMP"))
    out.append(check_paths(rmt.EnsembleSpec.row_orthogonal(0.5, 10.0), "specialized", k, iters,
                           SPECIALIZED_TOL, "two-field row-orthogonal"))
    out.append(check_tap_at_convergence(rmt.EnsembleSpec.iid_gaussian(0.5, 100.0), k))
    out.append(check_tap_at_convergence(rmt.EnsembleSpec.row_orthogonal(0.5, 1.0), k))
    return out


def main_lines(results) -> tuple[list[str], bool]:
    lines = [r.line() for r in results]
    ok = all(r.passed is not False for r in results)
    return lines, ok


if __name__ == "__main__":  # pragma: no cover
    t0 = time.time()
    lines, ok = main_lines(run_suite())
    print("\n".join(lines))
    print(f"{'all checks passed' if ok else 'FAILURES'} in {time.time() - t0:.1f}s")
