"""Analytic predictors for the field ``psi(t) ~ theta(t) + sigma_x(t) x``.

All predictors are deterministic functions of the scalar sequences
``chi(t)``, ``v(t)`` (and, for the full covariance, a correlation matrix
``C(tau, s)``). Products ``Q(t)/Q(tau-1) = prod_{s=tau..t} R(chi(s))`` are
accumulated in log form so long horizons do not overflow.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import rmt
from .prior import Prior, channel_mse, channel_posterior_variance


def _chis(chi_seq, horizon=None):
    chi = np.asarray(chi_seq, dtype=float)
    if horizon is not None:
        if chi.size < horizon:
            raise ValueError(f"chi sequence has {chi.size} entries, horizon {horizon} requested")
        chi = chi[:horizon]
    if np.any(~(chi > 0)):
        raise ValueError("chi must be positive")
    return chi


def q_sequence(chi_seq, ens: rmt.EnsembleSpec) -> np.ndarray:
    """``Q(t) = Q(t-1) R(chi(t))`` with ``Q(-1) = 1``."""
    return np.cumprod(rmt.r_transform(ens, _chis(chi_seq)))


def _log_ratio(chi, ens):
    """``(sign, log|.|)`` of ``L[t, tau] = Q(t)/Q(tau-1)`` for ``tau <= t`` (zero above)."""
    r = np.atleast_1d(rmt.r_transform(ens, chi))
    logr = np.log(np.abs(r))
    neg = (r < 0).astype(int)
    cum = np.concatenate([[0.0], np.cumsum(logr)])
    cneg = np.concatenate([[0], np.cumsum(neg)])
    t = np.arange(chi.size)
    log_l = cum[t + 1][:, None] - cum[t][None, :]
    sign = np.where((cneg[t + 1][:, None] - cneg[t][None, :]) % 2 == 1, -1.0, 1.0)
    lower = t[:, None] >= t[None, :]
    return np.where(lower, sign, 0.0), np.where(lower, log_l, -np.inf)


def _weighted_inverse_sum(chi, ens, numer):
    """``sum_{tau<=t} a_{t+1-tau} L[t,tau] numer[tau] / chi[tau]`` for every ``t``."""
    T = chi.size
    a = rmt.r_inverse_coeffs(ens, T)
    sign, log_l = _log_ratio(chi, ens)
    t = np.arange(T)
    lag = t[:, None] - t[None, :]
    a_mat = np.where(lag >= 0, a[np.clip(lag, 0, T - 1)], 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(a_mat != 0.0, np.sign(a_mat) * sign * np.exp(np.log(np.abs(a_mat)) + log_l),
                     0.0)
    return w @ (numer / chi)


def zeta_sequence(chi_seq, ens: rmt.EnsembleSpec, horizon: int | None = None) -> np.ndarray:
    """``zeta(t) = Q(t) sum_{tau<=t} a_{t+1-tau} / (chi(tau) Q(tau-1))``."""
    chi = _chis(chi_seq, horizon)
    return _weighted_inverse_sum(chi, ens, np.ones_like(chi))


def g_mem_sequence(chi_seq, ens: rmt.EnsembleSpec) -> np.ndarray:
    """``G(t,t-1) = chi(t)/chi(t-1) R(chi(t-1))`` with ``G(0,-1) = 0``."""
    chi = _chis(chi_seq)
    out = np.zeros(chi.size)
    out[1:] = chi[1:] / chi[:-1] * rmt.r_transform(ens, chi[:-1])
    return out


def default_v_sequence(chi_seq, ens: rmt.EnsembleSpec) -> np.ndarray:
    return ens.xi - np.atleast_1d(rmt.r_transform(ens, _chis(chi_seq)))


def sigma_x_sequence(chi_seq, v_seq, ens: rmt.EnsembleSpec, horizon: int | None = None,
                     zeta=None) -> np.ndarray:
    """``sigma_x(t) = [zeta(t) xi - zeta(t-1) R(chi(t))] / v(t)`` with ``zeta(-1) = 0``."""
    chi = _chis(chi_seq, horizon)
    v = np.asarray(v_seq, dtype=float)[: chi.size]
    if v.size < chi.size:
        raise ValueError("v sequence shorter than chi sequence")
    if np.any(v == 0):
        raise ValueError("v(t) = 0")
    z = zeta_sequence(chi, ens) if zeta is None else np.asarray(zeta, dtype=float)[: chi.size]
    z_prev = np.concatenate([[0.0], z[:-1]])
    return (z * ens.xi - z_prev * rmt.r_transform(ens, chi)) / v


def _b_decay_rate(ens: rmt.EnsembleSpec) -> float:
    """Geometric decay rate ``s`` of ``B(n, n)``, i.e. ``B(n, n) s^(2n) = O(1)``."""
    if ens.kind is rmt.EnsembleKind.ROW_ORTHOGONAL and ens.alpha != 1.0:
        xi1, xi2 = ens.xi_pair
        return float(np.sqrt(abs(xi1 * xi2)))
    return float(ens.xi)


def c_theta_matrix(chi_seq, v_seq, correlation, ens: rmt.EnsembleSpec,
                   b_coeffs: np.ndarray | None = None, diagonal_only: bool = False) -> np.ndarray:
    """Covariance ``C_theta(t, t')`` of the Gaussian part of the field.

    ``correlation[tau, s] = C(tau, s) = <(m(tau) - x)(m(s) - x)>`` must be supplied.
    With ``diagonal_only`` only ``C_theta(t, t)`` is filled (off-diagonal entries are NaN).
    """
    chi = _chis(chi_seq)
    T = chi.size
    v = np.asarray(v_seq, dtype=float)
    corr = np.asarray(correlation, dtype=float)
    if v.shape != (T,) or corr.shape != (T, T):
        raise ValueError(f"expected v of length {T} and a {T}x{T} correlation matrix")
    # Q(t)/Q(tau-1) grows and B(i,j) decays geometrically; both are rescaled by s^(i+j)
    # so neither overflows at long horizons
    s_rate = _b_decay_rate(ens)
    if b_coeffs is None:
        b_scaled = rmt.b_coefficients(ens, T, scale=s_rate)
    else:
        b_coeffs = np.asarray(b_coeffs, dtype=float)
        if b_coeffs.shape[0] < T + 1:
            raise ValueError("B coefficients must reach order T")
        order = np.add.outer(np.arange(b_coeffs.shape[0]), np.arange(b_coeffs.shape[1]))
        with np.errstate(over="ignore", invalid="ignore"):
            b_scaled = np.where(b_coeffs != 0.0, b_coeffs * s_rate**order.astype(float), 0.0)
    zeta = zeta_sequence(chi, ens)
    sig = sigma_x_sequence(chi, v, ens, zeta=zeta)
    zeta_prev = np.concatenate([[0.0], zeta[:-1]])
    # (C(tau,s) - chi(s) zeta(s-1)) / (chi(tau) chi(s)); Q(tau-1) is folded into L below
    numer = (corr - (chi * zeta_prev)[None, :]) / np.outer(chi, chi)
    sign, log_l = _log_ratio(chi, ens)
    idx = np.arange(T)
    lag = idx[:, None] + 1 - idx[None, :]
    lmat = np.where(sign != 0, sign * np.exp(log_l - lag * np.log(s_rate)), 0.0)
    out = np.full((T, T), np.nan) if diagonal_only else np.empty((T, T))
    for t in range(T):
        for tp in (range(T) if not diagonal_only else (t,)):
            bsub = b_scaled[t + 1 - idx[: t + 1]][:, tp + 1 - idx[: tp + 1]]
            acc = lmat[t, : t + 1] @ (bsub * numer[: t + 1, : tp + 1]) @ lmat[tp, : tp + 1]
            out[t, tp] = zeta[tp] / v[tp] * sig[t] + acc / (v[t] * v[tp])
    return out


def kappa_sequence(chi_seq, zeta_seq, g_mem_seq, ens: rmt.EnsembleSpec,
                   corr_diag=None) -> np.ndarray:
    """``kappa(t) = [C(t,t) - chi(t) zeta(t-1) + G(t,t-1)^2 kappa(t-1)] / (xi_1 xi_2)``.

    ``C(t,t)`` defaults to ``chi(t)``, which is the closed form's convention.
    """
    if ens.kind is not rmt.EnsembleKind.ROW_ORTHOGONAL:
        raise ValueError("kappa recursion is specific to the row-orthogonal ensemble")
    xi1, xi2 = ens.xi_pair
    if xi1 * xi2 == 0:
        raise rmt.DomainError("xi_1 xi_2 = 0")
    chi = _chis(chi_seq)
    zeta = np.asarray(zeta_seq, dtype=float)
    g = np.asarray(g_mem_seq, dtype=float)
    cdiag = chi if corr_diag is None else np.asarray(corr_diag, dtype=float)
    kappa = np.empty(chi.size)
    prev_k, prev_z = 0.0, 0.0
    for t in range(chi.size):
        prev_k = (cdiag[t] - chi[t] * prev_z + g[t] ** 2 * prev_k) / (xi1 * xi2)
        kappa[t] = prev_k
        prev_z = zeta[t]
    return kappa


def kappa_recursion(chi_seq, zeta_seq, g_mem_seq, ens: rmt.EnsembleSpec, v_seq=None,
                    corr_diag=None) -> np.ndarray:
    """Diagonal ``C_theta(t,t)`` for the row-orthogonal ensemble via the kappa recursion."""
    chi = _chis(chi_seq)
    zeta = np.asarray(zeta_seq, dtype=float)[: chi.size]
    v = default_v_sequence(chi, ens) if v_seq is None else np.asarray(v_seq, dtype=float)
    kappa = kappa_sequence(chi, zeta, g_mem_seq, ens, corr_diag)
    sig = sigma_x_sequence(chi, v, ens, zeta=zeta)
    r = rmt.r_transform(ens, chi)
    return zeta / v * sig - r**2 / (chi**2 * v**2) * kappa


def response_matrix(chi_seq, ens: rmt.EnsembleSpec) -> np.ndarray:
    """``G(t, tau) = a_{t-tau} prod_{s=tau..t-1} G(s+1, s)`` for ``tau < t``, zero otherwise."""
    chi = _chis(chi_seq)
    T = chi.size
    g = g_mem_sequence(chi, ens)
    a = rmt.r_inverse_coeffs(ens, max(T - 1, 1))
    out = np.zeros((T, T))
    for tau in range(T):
        prod = 1.0
        for t in range(tau + 1, T):
            prod *= g[t]
            out[t, tau] = a[t - tau - 1] * prod
    return out


# ---------------------------------------------------------------------------
# state evolution
# ---------------------------------------------------------------------------

@dataclass
class StateEvolution:
    """Deterministic trajectory: ``c_theta[t] = C_theta(t,t)``, ``mse[t] = C(t,t)`` (``t <= T``),
    ``chi[t]`` the posterior variance driving the memory terms (``t < T``)."""

    c_theta: np.ndarray
    mse: np.ndarray
    chi: np.ndarray
    v: np.ndarray
    sigma_x: np.ndarray
    zeta: np.ndarray


def amp_state_evolution(prior: Prior, ens: rmt.EnsembleSpec, horizon: int,
                        order: int = 61) -> StateEvolution:
    """AMP state evolution: ``C_theta(t,t) = 1/xi + C(t,t)/alpha``,
    ``C(t+1,t+1) = <(eta_{v(t)}(sqrt(C_theta(t,t)) z + x) - x)^2>``, ``v(t) = xi alpha/(alpha + xi chi(t))``.

    ``C(0,0) = <x^2>`` since ``m(0) = 0``.
    """
    if ens.kind is not rmt.EnsembleKind.IID_GAUSSIAN:
        raise ValueError("AMP state evolution needs the iid Gaussian ensemble")
    alpha, xi = ens.alpha, ens.xi
    mse = np.empty(horizon + 1)
    c_theta = np.empty(horizon)
    v = np.empty(horizon)
    mse[0] = prior.second_moment
    for t in range(horizon):
        c_theta[t] = 1.0 / xi + mse[t] / alpha
        v[t] = xi * alpha / (alpha + xi * mse[t])
        mse[t + 1] = channel_mse(prior, c_theta[t], v[t], order=order)
    chi = mse[:horizon]
    zeta = zeta_sequence(chi, ens)
    return StateEvolution(c_theta=c_theta, mse=mse, chi=chi.copy(), v=v,
                          sigma_x=sigma_x_sequence(chi, v, ens, zeta=zeta), zeta=zeta)


def state_evolution(prior: Prior, ens: rmt.EnsembleSpec, horizon: int,
                    order: int = 61) -> StateEvolution:
    """Deterministic ``chi`` and ``C(t,t)`` for both closed-form ensembles.

    Row-orthogonal: the denoiser is not matched to the field during the
    transient (``C_theta(t,t) != 1/v(t)``), so the posterior variance ``chi`` and
    the error ``C`` are tracked separately. With ``psi = sigma_x(t) x + sqrt(C_theta(t,t)) z``:
    ``chi(t+1) = <Var_q(x | psi)>``, ``C(t+1,t+1) = <(eta_{v(t)}(psi) - x)^2>``, and
    ``C_theta(t,t)`` comes from the kappa recursion fed with ``C(t,t)``.
    """
    if ens.kind is rmt.EnsembleKind.IID_GAUSSIAN:
        return amp_state_evolution(prior, ens, horizon, order)
    if ens.kind is not rmt.EnsembleKind.ROW_ORTHOGONAL:
        raise ValueError("state evolution needs the full correlation matrix for custom ensembles")
    xi1, xi2 = ens.xi_pair
    if xi1 * xi2 == 0:
        raise rmt.DomainError("xi_1 xi_2 = 0")
    chi = [prior.second_moment]
    mse = [prior.second_moment]
    c_theta, vs, sig, zetas = [], [], [], []
    kappa, zeta1, zeta2, z_prev = 0.0, 0.0, 0.0, 0.0
    for t in range(horizon):
        c = chi[t]
        r = rmt.r_transform(ens, c)
        v = ens.xi - r
        g = 0.0 if t == 0 else c / chi[t - 1] * rmt.r_transform(ens, chi[t - 1])
        pre = (ens.alpha / ens.xi) / c
        zeta1 = r / xi1 * (pre + zeta1)
        zeta2 = r / xi2 * (pre + zeta2)
        zeta = zeta1 - zeta2
        s = (zeta * ens.xi - z_prev * r) / v
        kappa = (mse[t] - c * z_prev + g**2 * kappa) / (xi1 * xi2)
        ct = zeta / v * s - r**2 / (c**2 * v**2) * kappa
        if not ct > 0:
            raise ValueError(f"predicted field variance {ct} <= 0 at t = {t}")
        c_theta.append(ct)
        vs.append(v)
        sig.append(s)
        zetas.append(zeta)
        chi.append(channel_posterior_variance(prior, ct, v, scale=s, order=order))
        mse.append(channel_mse(prior, ct, v, scale=s, order=order))
        z_prev = zeta
    return StateEvolution(c_theta=np.array(c_theta), mse=np.array(mse),
                          chi=np.array(chi[:horizon]), v=np.array(vs), sigma_x=np.array(sig),
                          zeta=np.array(zetas))


# ---------------------------------------------------------------------------
# field statistics bundle and empirical checks
# ---------------------------------------------------------------------------

@dataclass
class FieldStats:
    horizon: int
    chi_seq: np.ndarray
    v_seq: np.ndarray
    q_seq: np.ndarray
    zeta: np.ndarray
    sigma_x: np.ndarray
    c_theta: np.ndarray  # T x T, or the diagonal only
    kappa: np.ndarray | None = None
    correlation: np.ndarray | None = field(default=None, repr=False)


def predict_field_stats(chi_seq, ens: rmt.EnsembleSpec, v_seq=None, g_mem_seq=None,
                        correlation=None) -> FieldStats:
    """Bundle the predictors. With a correlation matrix the full ``C_theta`` is built;
    otherwise the closed-form diagonal (iid: ``1/xi + chi/alpha``, row-orthogonal: kappa)."""
    chi = _chis(chi_seq)
    v = default_v_sequence(chi, ens) if v_seq is None else np.asarray(v_seq, dtype=float)
    zeta = zeta_sequence(chi, ens)
    sig = sigma_x_sequence(chi, v, ens, zeta=zeta)
    g = g_mem_sequence(chi, ens) if g_mem_seq is None else np.asarray(g_mem_seq, dtype=float)
    kappa = None
    if correlation is not None:
        ct = c_theta_matrix(chi, v, correlation, ens)
    elif ens.kind is rmt.EnsembleKind.ROW_ORTHOGONAL:
        kappa = kappa_sequence(chi, zeta, g, ens)
        ct = kappa_recursion(chi, zeta, g, ens, v_seq=v)
    elif ens.kind is rmt.EnsembleKind.IID_GAUSSIAN:
        ct = c_theta_matrix(chi, v, np.diag(chi), ens).diagonal().copy()
    else:
        raise ValueError("custom ensembles need a correlation matrix")
    return FieldStats(horizon=chi.size, chi_seq=chi, v_seq=v, q_seq=q_sequence(chi, ens),
                      zeta=zeta, sigma_x=sig, c_theta=ct, kappa=kappa, correlation=correlation)


@dataclass
class FieldCheck:
    n: int
    predicted_var: float
    empirical_var: float
    variance_gap: float  # relative
    skewness: float
    excess_kurtosis: float
    ks_statistic: float
    ks_pvalue: float


def replica_field_check(psi, x_true, sigma_x: float, c_theta_tt: float) -> FieldCheck:
    """Compare ``psi - sigma_x x`` with ``N(0, C_theta(t,t))``."""
    if x_true is None:
        raise ValueError("x_true is required")
    resid = np.asarray(psi, dtype=float) - sigma_x * np.asarray(x_true, dtype=float)
    emp = float(np.var(resid))
    ks = sps.kstest(resid, "norm", args=(0.0, np.sqrt(c_theta_tt)))
    return FieldCheck(n=resid.size, predicted_var=float(c_theta_tt), empirical_var=emp,
                      variance_gap=abs(emp - c_theta_tt) / c_theta_tt,
                      skewness=float(sps.skew(resid)),
                      excess_kurtosis=float(sps.kurtosis(resid, fisher=True)),
                      ks_statistic=float(ks.statistic), ks_pvalue=float(ks.pvalue))
