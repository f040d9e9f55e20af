"""Single-step memory iterations and the TAP residual.

Three interchangeable step functions advance a :class:`SolverState` by one
iteration:

* :func:`ssm_step_general` -- the generic recursion with the full history
  ``u(0..t)`` weighted by the inverse-R coefficients,
* :func:`ssm_step_row_orthogonal` -- the two-field recursion for the
  row-orthogonal ensemble (constant memory),
* :func:`amp_step` -- the iid Gaussian case, i.e. AMP with its Onsager term.

Indexing: a state at ``t`` holds ``m(t)``, ``m(t-1)``, ``chi(t)``, ``chi(t-1)``,
``Q(t-1)``, ``zeta(t-1)`` and the memory fields from step ``t-1``. A step
returns the state at ``t+1`` together with a :class:`StepInfo` describing the
quantities of step ``t`` (``psi(t)``, ``v(t)``, ``G(t,t-1)``, ...).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from . import rmt
from .prior import Prior

CHI_FLOOR = 1e-12
DENSE_J_MAX = 4096


def _exp(x: float) -> float:
    return math.exp(x) if x < 709.0 else math.inf


class SolverError(RuntimeError):
    """A step could not be completed (non-finite fields, ``v <= 0``, bad pairing)."""


# ---------------------------------------------------------------------------
# problem instances
# ---------------------------------------------------------------------------

@dataclass
class ProblemInstance:
    """Observation ``y = A x + n`` with derived ``h = xi A^T y``; ``J`` is applied implicitly."""

    a: rmt.SensingMatrix
    y: np.ndarray
    xi: float
    x_true: np.ndarray | None = None
    seed: int | None = None
    h: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.shape != (self.a.n_rows,):
            raise ValueError("y has the wrong length")
        if self.x_true is not None and np.shape(self.x_true) != (self.a.n_cols,):
            raise ValueError("x_true has the wrong length")
        self.h = self.xi * (self.a.a.T @ self.y)

    @property
    def n_cols(self) -> int:
        return self.a.n_cols

    @property
    def ensemble(self) -> rmt.EnsembleSpec:
        return self.a.ensemble

    def apply_j(self, m: np.ndarray) -> np.ndarray:
        """``J m = xi m - xi A^T (A m)``."""
        amat = self.a.a
        return self.xi * (m - amat.T @ (amat @ m))

    def dense_j(self) -> np.ndarray:
        k = self.n_cols
        if k > DENSE_J_MAX:
            raise ValueError(f"dense J only materialised for K <= {DENSE_J_MAX}")
        amat = self.a.a
        return self.xi * (np.eye(k) - amat.T @ amat)


def synthetic_instance(ens: rmt.EnsembleSpec, prior: Prior, n_cols: int, seed) -> ProblemInstance:
    """Sample ``A``, ``x ~ prior`` and Gaussian noise of precision ``xi`` from independent streams."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_a, s_x, s_n = ss.spawn(3)
    n_rows = round(ens.alpha * n_cols)
    a = rmt.sample_matrix(ens, n_rows, n_cols, s_a)
    x = prior.sample(np.random.default_rng(s_x), n_cols)
    noise = np.random.default_rng(s_n).standard_normal(n_rows) / np.sqrt(ens.xi)
    return ProblemInstance(a=a, y=a.a @ x + noise, xi=ens.xi, x_true=x, seed=seed)


# ---------------------------------------------------------------------------
# scalar pieces
# ---------------------------------------------------------------------------

def chi_update(prior: Prior, psi: np.ndarray, v: float, second_moment: float | None = None):
    """Average posterior variance on the field, clipped to ``[1e-12, 10*<x^2>]``.

    Returns ``(chi, degenerate)`` where ``degenerate`` flags a hit on the floor.
    """
    if second_moment is None:
        second_moment = prior.second_moment
    _, var = prior.denoise(psi, v)
    raw = float(np.mean(var))
    chi = min(max(raw, CHI_FLOOR), 10.0 * second_moment)
    return chi, raw < CHI_FLOOR


def memory_coefficient(chi_curr: float, chi_prev: float | None, ens: rmt.EnsembleSpec) -> float:
    """``G(t,t-1) = chi(t)/chi(t-1) * R(chi(t-1))``; zero at ``t = 0`` (``chi_prev=None``)."""
    if chi_prev is None:
        return 0.0
    if not chi_prev > 0:
        raise ValueError("chi_prev must be positive")
    return chi_curr / chi_prev * rmt.r_transform(ens, chi_prev)


def default_v(ens: rmt.EnsembleSpec, chi: float) -> float:
    return ens.xi - rmt.r_transform(ens, chi)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

@dataclass
class SolverState:
    """Inputs to step ``t``; see the module docstring for the index convention."""

    t: int
    m_curr: np.ndarray
    m_prev: np.ndarray
    chi_curr: float
    chi_prev: float | None
    log_q_prev: float = 0.0  # log|Q(t-1)|, Q(-1) = 1
    q_prev_sign: float = 1.0
    zeta_prev: float = 0.0
    # generic path: w(tau)/chi(tau) with w = h + J m(tau) - G m(tau-1), plus log|Q(tau-1)|
    u_history: list = field(default_factory=list)
    u_log_q: list = field(default_factory=list)
    u_q_sign: list = field(default_factory=list)
    chi_history: list = field(default_factory=list)
    # specialised paths: z_i(t-1) and the scalar recursions zeta_i(t-1)
    z1: np.ndarray | None = None
    z2: np.ndarray | None = None
    zeta1_prev: float = 0.0
    zeta2_prev: float = 0.0
    v_override: float | None = None

    @property
    def q_prev(self) -> float:
        return self.q_prev_sign * _exp(self.log_q_prev)


@dataclass
class StepInfo:
    """Quantities of step ``t``."""

    t: int
    chi: float
    v: float
    g_mem: float
    q: float
    log_q: float
    zeta: float
    zeta_prev: float
    sigma_x: float
    psi: np.ndarray
    gamma: np.ndarray
    degenerate: bool = False


def initial_state(instance: ProblemInstance, prior: Prior, chi0: float | None = None) -> SolverState:
    k = instance.n_cols
    zeros = np.zeros(k)
    return SolverState(t=0, m_curr=zeros, m_prev=zeros.copy(),
                       chi_curr=prior.second_moment if chi0 is None else chi0, chi_prev=None)


def _common(state, ens, v_fn):
    chi = state.chi_curr
    r_chi = rmt.r_transform(ens, chi)
    g_mem = memory_coefficient(chi, state.chi_prev, ens)
    v = v_fn(chi) if state.v_override is None else state.v_override
    if not v > 0:
        raise SolverError(f"v(t) = {v} <= 0 at t = {state.t}")
    if r_chi == 0.0:
        raise SolverError("R(chi) = 0: Q(t) vanishes")
    log_q = state.log_q_prev + math.log(abs(r_chi))
    q_sign = state.q_prev_sign * math.copysign(1.0, r_chi)
    return chi, r_chi, g_mem, v, log_q, q_sign


def _finish(state, instance, prior, ens, psi, gamma, chi, r_chi, g_mem, v, log_q, q_sign,
            zeta, damping, chi_fn, **extra):
    if not np.all(np.isfinite(psi)):
        raise SolverError(f"non-finite field at t = {state.t}")
    sigma_x = (zeta * ens.xi - state.zeta_prev * r_chi) / v
    eta, post_var = prior.denoise(psi, v)
    m_next = eta if not damping else damping * state.m_curr + (1.0 - damping) * eta
    if chi_fn is None:
        raw = float(np.mean(post_var))
        chi_next = min(max(raw, CHI_FLOOR), 10.0 * prior.second_moment)
        degenerate = raw < CHI_FLOOR  # same rule as chi_update, without a second denoise pass
    else:
        chi_next, degenerate = chi_fn(state.t + 1), False
    info = StepInfo(t=state.t, chi=chi, v=v, g_mem=g_mem, q=q_sign * _exp(log_q),
                    log_q=log_q, zeta=zeta, zeta_prev=state.zeta_prev, sigma_x=sigma_x,
                    psi=psi, gamma=gamma, degenerate=degenerate)
    new = replace(state, t=state.t + 1, m_curr=m_next, m_prev=state.m_curr, chi_curr=chi_next,
                  chi_prev=chi, log_q_prev=log_q, q_prev_sign=q_sign, zeta_prev=zeta, **extra)
    return new, info


def ssm_step_general(state: SolverState, instance: ProblemInstance, prior: Prior,
                     ens: rmt.EnsembleSpec, a_coeffs: np.ndarray, *, damping: float = 0.0,
                     v_fn=None, chi_fn=None):
    """Generic single-step memory update.

    ``u(t) = (h + J m(t) - G(t,t-1) m(t-1)) / (chi(t) Q(t-1))``,
    ``psi(t) = Q(t)/v(t) * sum_tau a_{t+1-tau} u(tau)``, ``m(t+1) = eta_{v(t)}(psi(t))``.
    ``a_coeffs[n-1] = a_n`` must reach ``n = t+1``. Q-ratios are carried in log form.
    """
    v_fn = v_fn or (lambda c: default_v(ens, c))
    t = state.t
    if a_coeffs.size < t + 1:
        raise SolverError(f"need a_1..a_{t + 1}, only {a_coeffs.size} available")
    chi, r_chi, g_mem, v, log_q, q_sign = _common(state, ens, v_fn)
    gamma = instance.h + instance.apply_j(state.m_curr)
    w = gamma - g_mem * state.m_prev
    hist = state.u_history + [w / chi]
    hist_lq = state.u_log_q + [state.log_q_prev]
    hist_sg = state.u_q_sign + [state.q_prev_sign]

    a = a_coeffs[t::-1]  # a_{t+1-tau} for tau = 0..t
    with np.errstate(divide="ignore"):
        log_a = np.log(np.abs(a))
    log_ratio = log_q - np.asarray(hist_lq)
    weights = np.sign(a) * q_sign * np.asarray(hist_sg) * np.exp(log_a + log_ratio)
    # zeta(t) = Q(t) sum a_{t+1-tau} / (chi(tau) Q(tau-1)); chi(tau) sits inside hist
    chis = np.asarray(state.chi_history + [chi])
    zeta = float(np.sum(weights / chis))
    psi = (weights @ np.vstack(hist)) / v
    return _finish(state, instance, prior, ens, psi, gamma, chi, r_chi, g_mem, v, log_q,
                   q_sign, zeta, damping, chi_fn, u_history=hist, u_log_q=hist_lq,
                   u_q_sign=hist_sg, chi_history=chis.tolist())


def ssm_step_row_orthogonal(state: SolverState, instance: ProblemInstance, prior: Prior,
                            ens: rmt.EnsembleSpec, *, damping: float = 0.0, v_fn=None,
                            chi_fn=None):
    """Two-field recursion ``z_i(t) = (h + J m - xi_i m + G z_i(t-1)) / xi_i``.

    ``m(t+1) = eta_{v(t)}(c(t) [z_1(t) - z_2(t)])`` with
    ``c(t) = (alpha/xi) R(chi(t)) / (chi(t) v(t))``.
    """
    if ens.kind is not rmt.EnsembleKind.ROW_ORTHOGONAL:
        raise SolverError("row-orthogonal step needs a row-orthogonal ensemble")
    xi1, xi2 = ens.xi_pair
    if xi2 == 0.0:
        raise SolverError("xi_2 = 0 (alpha = 1): use the generic path")
    v_fn = v_fn or (lambda c: default_v(ens, c))
    chi, r_chi, g_mem, v, log_q, q_sign = _common(state, ens, v_fn)
    k = instance.n_cols
    z1_prev = state.z1 if state.z1 is not None else np.zeros(k)
    z2_prev = state.z2 if state.z2 is not None else np.zeros(k)
    gamma = instance.h + instance.apply_j(state.m_curr)
    z1 = (gamma - xi1 * state.m_curr + g_mem * z1_prev) / xi1
    z2 = (gamma - xi2 * state.m_curr + g_mem * z2_prev) / xi2
    c = (ens.alpha / ens.xi) * r_chi / (chi * v)
    psi = c * (z1 - z2)
    pre = (ens.alpha / ens.xi) / chi
    zeta1 = r_chi / xi1 * (pre + state.zeta1_prev)
    zeta2 = r_chi / xi2 * (pre + state.zeta2_prev)
    return _finish(state, instance, prior, ens, psi, gamma, chi, r_chi, g_mem, v, log_q, q_sign,
                   zeta1 - zeta2, damping, chi_fn, z1=z1, z2=z2, zeta1_prev=zeta1,
                   zeta2_prev=zeta2)


def amp_step(state: SolverState, instance: ProblemInstance, prior: Prior, ens: rmt.EnsembleSpec,
             *, damping: float = 0.0, v_fn=None, chi_fn=None):
    """AMP: ``z(t) = A^T (y - A m(t)) + G(t,t-1) z(t-1) / xi``, ``m(t+1) = eta_{v(t)}(z(t) + m(t))``."""
    if ens.kind is not rmt.EnsembleKind.IID_GAUSSIAN:
        raise SolverError("AMP step needs the iid Gaussian ensemble")
    v_fn = v_fn or (lambda c: ens.xi * ens.alpha / (ens.alpha + ens.xi * c))
    chi, r_chi, g_mem, v, log_q, q_sign = _common(state, ens, v_fn)
    amat = instance.a.a
    z_prev = state.z1 if state.z1 is not None else np.zeros(instance.n_cols)
    resid = amat.T @ (instance.y - amat @ state.m_curr)
    z = resid + g_mem / ens.xi * z_prev
    psi = z + state.m_curr
    # gamma(t) = h + J m(t) = xi (A^T(y - A m) + m)
    gamma = ens.xi * (resid + state.m_curr)
    zeta1 = r_chi / ens.xi * ((ens.alpha / ens.xi) / chi + state.zeta1_prev)
    return _finish(state, instance, prior, ens, psi, gamma, chi, r_chi, g_mem, v, log_q, q_sign,
                   zeta1, damping, chi_fn, z1=z, zeta1_prev=zeta1)


# ---------------------------------------------------------------------------
# TAP residual
# ---------------------------------------------------------------------------

def tap_residual(instance: ProblemInstance, m: np.ndarray, prior: Prior, ens: rmt.EnsembleSpec,
                 chi: float | None = None, gamma: np.ndarray | None = None,
                 tol: float = 1e-14) -> tuple[float, float]:
    """Residuals of the TAP equations at ``m``.

    ``psi = (h + J m - R(chi) m)/v`` with ``v = xi - R(chi)``; ``r1 = ||m - eta_v(psi)||/sqrt(K)``
    and ``r2 = |chi - <posterior variance at psi>|``. Without ``chi`` every root of the
    scalar self-consistency is bracketed and the one giving the smallest ``r1`` is used.
    """
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise ValueError("m must be finite")
    if gamma is None:
        gamma = instance.h + instance.apply_j(m)

    def implied(c):
        r = rmt.r_transform(ens, c)
        v = ens.xi - r
        if not v > 0:
            raise SolverError(f"v = {v} <= 0 in TAP residual")
        psi = (gamma - r * m) / v
        eta, var = prior.denoise(psi, v)
        return eta, float(np.mean(var))

    if chi is None:
        chi = _solve_tap_chi(implied, m, prior, tol)
    eta, chi_implied = implied(chi)
    r1 = float(np.linalg.norm(m - eta) / np.sqrt(m.size))
    return r1, abs(chi - chi_implied)


def _solve_tap_chi(implied, m, prior, tol, n_grid: int = 128):
    def gap(c):
        try:
            return implied(c)[1] - c
        except SolverError:
            return np.nan

    def bracketed(grid):
        g = np.array([gap(c) for c in grid])
        found = []
        for i in range(grid.size - 1):
            if np.isfinite(g[i]) and np.isfinite(g[i + 1]) and g[i] * g[i + 1] <= 0:
                found.append(optimize.brentq(gap, grid[i], grid[i + 1], xtol=tol,
                                             rtol=4 * np.finfo(float).eps))
        return found, g

    grid = np.geomspace(CHI_FLOOR * 10, 10.0 * prior.second_moment, n_grid)
    roots, gaps = bracketed(grid)
    # a close pair of roots can sit inside one cell; resample around local minima of |gap|
    a = np.abs(gaps)
    for i in range(1, n_grid - 1):
        if np.isfinite(a[i - 1:i + 2]).all() and a[i] <= a[i - 1] and a[i] <= a[i + 1]:
            roots += bracketed(np.geomspace(grid[i - 1], grid[i + 1], 33))[0]
    if not roots:
        raise SolverError("no self-consistent chi for the TAP residual")
    return min(roots, key=lambda c: np.linalg.norm(m - implied(c)[0]))


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

@dataclass
class SolverOptions:
    path: str = "generic"  # generic | specialized | amp
    max_iters: int = 200
    tol: float = 1e-10
    damping: float = 0.0
    chi_mode: str = "empirical"  # empirical | replica
    v_schedule: str = "tap"  # tap: v = xi - R(chi(t)); replica: constant replica v
    record_tap: bool = True
    keep_fields: tuple | str = ()  # iterations whose psi is kept, or "all"
    track_errors: bool = False  # keep m(t) - x to form C(tau, s)
    quad_order: int = 61

    def __post_init__(self):
        if self.path not in ("generic", "specialized", "amp"):
            raise ValueError(f"unknown path {self.path!r}")
        if self.chi_mode not in ("empirical", "replica"):
            raise ValueError(f"unknown chi_mode {self.chi_mode!r}")
        if self.v_schedule not in ("tap", "replica"):
            raise ValueError(f"unknown v_schedule {self.v_schedule!r}")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")


@dataclass
class Record:
    t: int
    mse: float
    chi: float
    v: float = math.nan
    g_mem: float = math.nan
    q: float = math.nan
    zeta: float = math.nan
    sigma_x: float = math.nan
    psi_mean: float = math.nan
    psi_var: float = math.nan
    field_var_emp: float = math.nan
    tap_r1: float = math.nan
    dm: float = math.nan
    degenerate: bool = False


@dataclass
class Trajectory:
    """Per-iteration records ``t = 0..iterations``; step quantities are NaN on the last record."""

    records: list
    converged: bool
    stop_reason: str
    iterations: int
    m_final: np.ndarray = field(repr=False)
    fields: dict = field(default_factory=dict, repr=False)
    damped: bool = False
    options: SolverOptions | None = None
    correlation: np.ndarray | None = field(default=None, repr=False)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)


def _step_fn(path, ens):
    if path == "amp":
        if ens.kind is not rmt.EnsembleKind.IID_GAUSSIAN:
            raise ValueError("path 'amp' requires the iid Gaussian ensemble")
        return amp_step
    if path == "specialized":
        if ens.kind is rmt.EnsembleKind.IID_GAUSSIAN:
            return amp_step
        if ens.kind is rmt.EnsembleKind.ROW_ORTHOGONAL:
            return ssm_step_row_orthogonal
        raise ValueError("no specialised path for custom ensembles")
    return None


def run(instance: ProblemInstance, prior: Prior, ens: rmt.EnsembleSpec,
        options: SolverOptions | None = None, **kw) -> Trajectory:
    """Iterate until ``||m(t+1) - m(t)||/sqrt(K) < tol`` or ``max_iters``.

    A non-finite ``tol`` disables the convergence test. Step errors end the run
    and are reported through ``stop_reason``; the partial trajectory is kept.
    """
    opts = options or SolverOptions(**kw)
    step = _step_fn(opts.path, ens)
    a_coeffs = None
    if step is None:
        n_avail = opts.max_iters + 1
        if ens.kind is rmt.EnsembleKind.CUSTOM:
            n_avail = min(n_avail, len(ens.custom_cumulants) - 1)
        a_coeffs = rmt.r_inverse_coeffs(ens, max(n_avail, 1))

    x = instance.x_true
    k = instance.n_cols
    chi_fn = None
    state = initial_state(instance, prior)
    if opts.chi_mode == "replica":
        from . import stats

        se = stats.state_evolution(prior, ens, opts.max_iters + 2, order=opts.quad_order)
        chi_fn = lambda t: float(se.chi[t])  # noqa: E731
        state.chi_curr = chi_fn(0)
    if opts.v_schedule == "replica":
        from .prior import replica_chi

        state.v_override = replica_chi(prior, ens, order=opts.quad_order)[1]

    def mse_of(m):
        return float(np.mean((m - x) ** 2)) if x is not None else math.nan

    records = [Record(t=0, mse=mse_of(state.m_curr), chi=state.chi_curr)]
    track = opts.track_errors and x is not None
    errors = [state.m_curr - x] if track else None
    fields = {}
    converged, reason = False, "max_iters"
    check_tol = math.isfinite(opts.tol)
    for _ in range(opts.max_iters):
        try:
            if step is None:
                new, info = ssm_step_general(state, instance, prior, ens, a_coeffs,
                                             damping=opts.damping, chi_fn=chi_fn)
            else:
                new, info = step(state, instance, prior, ens, damping=opts.damping,
                                 chi_fn=chi_fn)
            if not np.all(np.isfinite(new.m_curr)):
                raise SolverError(f"non-finite estimate at t = {state.t + 1}")
        except (SolverError, rmt.DomainError, ValueError, FloatingPointError) as exc:
            reason = f"diverged: {exc}"
            break
        rec = records[-1]
        rec.v, rec.g_mem, rec.q, rec.zeta = info.v, info.g_mem, info.q, info.zeta
        rec.sigma_x, rec.degenerate = info.sigma_x, info.degenerate
        rec.psi_mean, rec.psi_var = float(np.mean(info.psi)), float(np.var(info.psi))
        if x is not None:
            rec.field_var_emp = float(np.var(info.psi - info.sigma_x * x))
        if opts.record_tap:
            rec.tap_r1 = tap_residual(instance, state.m_curr, prior, ens, chi=info.chi,
                                      gamma=info.gamma)[0]
        if opts.keep_fields == "all" or info.t in opts.keep_fields:
            fields[info.t] = info.psi.copy()
        fields["last"] = info.psi
        dm = float(np.linalg.norm(new.m_curr - state.m_curr) / np.sqrt(k))
        state = new
        records.append(Record(t=state.t, mse=mse_of(state.m_curr), chi=state.chi_curr, dm=dm))
        if track:
            errors.append(state.m_curr - x)
        if check_tol and dm < opts.tol:
            converged, reason = True, "converged"
            break
    if opts.record_tap and records[-1].t > 0:
        try:
            records[-1].tap_r1 = tap_residual(instance, state.m_curr, prior, ens,
                                              chi=state.chi_curr)[0]
        except SolverError:
            pass
    if "last" in fields:
        fields["last"] = fields["last"].copy()
    corr = None
    if track:
        err = np.array(errors)
        corr = err @ err.T / k
    return Trajectory(records=records, converged=converged, stop_reason=reason,
                      iterations=state.t, m_final=state.m_curr, fields=fields,
                      damped=opts.damping > 0, options=opts, correlation=corr)
