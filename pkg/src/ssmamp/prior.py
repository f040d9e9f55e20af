"""Scalar signal priors, the posterior-mean denoiser and the replica fixed point.

The denoiser works on the scalar pdf ``q(x) ~ p(x) exp(-(v/2)(x - psi)^2)``:
``denoise`` returns its mean and variance.

Gaussian averages are taken with composite Gauss-Legendre panels laid out on
two length scales (the width of the density and the ``1/sqrt(v)`` scale on
which the denoiser bends). Plain Gauss-Hermite misses the sharp transition of
sparse posteriors at high precision.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from . import rmt


class Prior:
    """Base class: priors are mixtures of zero-mean Gaussians (a point mass has variance 0)."""

    second_moment: float

    def components(self) -> list[tuple[float, float]]:
        """``(weight, variance)`` pairs of the Gaussian mixture."""
        raise NotImplementedError

    def denoise(self, psi, v):
        raise NotImplementedError

    def denoise_derivative(self, psi, v):
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        raise NotImplementedError

    def asymptotic_slope(self, v: float) -> float:
        """Slope of ``eta_v`` as ``|psi| -> inf``."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    @staticmethod
    def from_dict(d: dict) -> "Prior":
        kind = d["kind"]
        if kind in ("bernoulli_gaussian", "bg"):
            return BernoulliGaussian(float(d["rho"]))
        if kind == "gaussian":
            return GaussianPrior(float(d.get("variance", 1.0)))
        raise ValueError(f"unknown prior kind {kind!r}")


def _check_v(v):
    v = np.asarray(v, dtype=float)
    if np.any(~(v > 0)):
        raise ValueError("precision v must be positive")
    return v


@dataclass(frozen=True)
class GaussianPrior(Prior):
    variance: float = 1.0

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("variance must be positive")

    @property
    def second_moment(self):
        return self.variance

    def components(self):
        return [(1.0, self.variance)]

    def denoise(self, psi, v):
        v = _check_v(v)
        psi = np.asarray(psi, dtype=float)
        gain = self.variance * v / (1.0 + self.variance * v)
        var = self.variance / (1.0 + self.variance * v)
        return gain * psi, np.broadcast_to(var, np.broadcast(psi, v).shape).copy()

    def denoise_derivative(self, psi, v):
        v = _check_v(v)
        gain = self.variance * v / (1.0 + self.variance * v)
        return np.broadcast_to(gain, np.broadcast(np.asarray(psi), v).shape).copy()

    def asymptotic_slope(self, v):
        return self.variance * v / (1.0 + self.variance * v)

    def sample(self, rng, size):
        return np.sqrt(self.variance) * rng.standard_normal(size)

    def to_dict(self):
        return {"kind": "gaussian", "variance": self.variance}


@dataclass(frozen=True)
class BernoulliGaussian(Prior):
    """``x = 0`` w.p. ``1 - rho``, else ``N(0, 1/rho)``: unit second moment."""

    rho: float

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")

    @property
    def spike_variance(self):
        return 1.0 / self.rho

    @property
    def second_moment(self):
        return 1.0

    def components(self):
        if self.rho == 1.0:
            return [(1.0, self.spike_variance)]
        return [(1.0 - self.rho, 0.0), (self.rho, self.spike_variance)]

    def _parts(self, psi, v):
        v = _check_v(v)
        psi = np.asarray(psi, dtype=float)
        s2 = self.spike_variance
        gain = s2 * v / (s2 * v + 1.0)
        mu1 = gain * psi
        var1 = gain / v
        curv = 0.5 * v * gain  # d(logit)/d(psi^2)
        if self.rho == 1.0:
            logit = np.full(np.broadcast(psi, v).shape, np.inf)
        else:
            logit = (np.log(self.rho / (1.0 - self.rho)) - 0.5 * np.log1p(s2 * v)
                     + curv * psi**2)
        return psi, v, gain, mu1, var1, curv, logit

    def denoise(self, psi, v):
        psi, v, gain, mu1, var1, curv, logit = self._parts(psi, v)
        pi = special.expit(logit)
        mean = pi * mu1
        var = pi * var1 + pi * (1.0 - pi) * mu1**2
        return mean, var

    def denoise_derivative(self, psi, v):
        psi, v, gain, mu1, var1, curv, logit = self._parts(psi, v)
        pi = special.expit(logit)
        dpi = pi * (1.0 - pi) * 2.0 * curv * psi
        return pi * gain + dpi * mu1

    def slope_deficit(self, psi, v):
        """``eta_v(psi) - slope*psi``, computed without cancellation (decays in |psi|)."""
        psi, v, gain, mu1, var1, curv, logit = self._parts(psi, v)
        return -special.expit(-logit) * mu1

    def asymptotic_slope(self, v):
        s2 = self.spike_variance
        return s2 * v / (s2 * v + 1.0)

    def sample(self, rng, size):
        mask = rng.random(size) < self.rho
        return np.where(mask, np.sqrt(self.spike_variance) * rng.standard_normal(size), 0.0)

    def to_dict(self):
        return {"kind": "bernoulli_gaussian", "rho": self.rho}


def denoise(prior: Prior, psi, v):
    """Posterior mean ``eta_v(psi)`` and posterior variance; ``v <= 0`` is an error."""
    return prior.denoise(psi, v)


# ---------------------------------------------------------------------------
# Gaussian expectations
# ---------------------------------------------------------------------------

_SPAN = 12.0


def gaussian_expectation(func, var: float, fine_scale: float, order: int = 61,
                         fine_extent: float | None = None) -> float:
    """``E[func(psi)]`` for ``psi ~ N(0, var)`` by composite Gauss-Legendre.

    Panels of width ``fine_scale/2`` cover ``|psi| <= fine_extent``; panels of
    width ``sqrt(var)/2`` cover the rest of ``|psi| <= 12 sqrt(var)``.
    """
    sd = np.sqrt(var)
    outer = _SPAN * sd
    if fine_extent is None:
        fine_extent = _SPAN * fine_scale
    fine_extent = min(fine_extent, outer)
    h_fine = 0.5 * min(fine_scale, sd)
    fine = np.arange(0.0, fine_extent + h_fine, h_fine)
    fine = fine[fine < fine_extent]
    coarse = np.arange(0.0, outer + 0.5 * sd, 0.5 * sd)
    coarse = coarse[coarse > fine_extent]
    right = np.unique(np.concatenate([fine, [fine_extent], coarse, [outer]]))
    edges = np.concatenate([-right[:0:-1], right])
    x, w = np.polynomial.legendre.leggauss(order)
    lo, hi = edges[:-1, None], edges[1:, None]
    nodes = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
    weights = 0.5 * (hi - lo) * w
    dens = np.exp(-0.5 * nodes**2 / var) / np.sqrt(2.0 * np.pi * var)
    return float(np.sum(weights * dens * func(nodes)))


def _transition_extent(prior, v):
    """Distance past which ``eta_v`` is within float precision of its asymptote."""
    base = 1.0 / np.sqrt(v)
    if isinstance(prior, BernoulliGaussian) and prior.rho < 1.0:
        _, _, gain, _, _, curv, logit0 = prior._parts(0.0, v)
        # logit(psi) = logit0 + curv psi^2 ; 1 - pi < e^-40 beyond this
        extra = max(40.0 - float(logit0), 0.0) / curv
        return np.sqrt(extra) + 4.0 * base
    return _SPAN * base


def channel_mse(prior: Prior, noise_var: float, v: float, scale: float = 1.0,
                order: int = 61) -> float:
    """``E[(eta_v(scale*x + sqrt(noise_var)*z) - x)^2]`` with ``x ~ prior``, ``z ~ N(0,1)``.

    Each Gaussian component of the prior is handled by conditioning on the
    observed ``psi``: the error splits into the conditional variance plus
    ``E[(eta_v(psi) - E[x|psi])^2]``.
    """
    if not noise_var > 0:
        raise ValueError("noise_var must be positive")
    v = float(_check_v(v))
    fine = 1.0 / np.sqrt(v)
    extent = _transition_extent(prior, v)
    total = 0.0
    for weight, tau2 in prior.components():
        s2 = scale**2 * tau2 + noise_var
        k = scale * tau2 / s2
        cond_var = tau2 * noise_var / s2

        def err(psi, k=k):
            return (prior.denoise(psi, v)[0] - k * psi) ** 2

        total += weight * (cond_var + gaussian_expectation(err, s2, fine, order, extent))
    return total


def channel_posterior_variance(prior: Prior, noise_var: float, v: float,
                               scale: float = 1.0, order: int = 61) -> float:
    """``E[Var_q(x)]`` of the denoiser's posterior over the same channel as :func:`channel_mse`."""
    v = float(_check_v(v))
    fine = 1.0 / np.sqrt(v)
    extent = _transition_extent(prior, v)
    total = 0.0
    for weight, tau2 in prior.components():
        s2 = scale**2 * tau2 + noise_var
        total += weight * gaussian_expectation(
            lambda psi: prior.denoise(psi, v)[1], s2, fine, order, extent)
    return total


# ---------------------------------------------------------------------------
# replica fixed point
# ---------------------------------------------------------------------------

class FixedPointError(RuntimeError):
    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


def replica_chi(prior: Prior, ens: rmt.EnsembleSpec, order: int = 61, damping: float = 0.0,
                tol: float = 1e-10, max_iters: int = 10_000) -> tuple[float, float]:
    """Solve ``chi = E[(x - eta_v(theta + x))^2]``, ``theta ~ N(0, 1/v)``, ``v = xi - R(chi)``.

    Iterates the channel map from the prior second moment, so the result is
    the fixed point reached from an uninformed start. The map is increasing in
    chi, hence the iterates descend monotonically; an Aitken extrapolation that
    lands on the far side of the fixed point closes a bracket which brentq
    then polishes. Returns ``(chi, v)``.
    """

    def channel(c):
        v = ens.xi - rmt.r_transform(ens, c)
        if not v > 0:
            raise FixedPointError(f"v = {v} <= 0 at chi = {c}", last=c)
        return channel_mse(prior, 1.0 / v, v, order=order)

    def finish(c):
        return c, ens.xi - rmt.r_transform(ens, c)

    chi = prior.second_moment
    history = [chi]
    for _ in range(max_iters):
        nxt = damping * chi + (1.0 - damping) * channel(chi)
        if abs(nxt - chi) < tol:
            return finish(nxt)
        chi = nxt
        history = history[-2:] + [chi]
        if len(history) == 3 and damping == 0.0:
            c0, c1, c2 = history
            denom = c2 - 2 * c1 + c0
            if c2 < c1 < c0 and denom > 0:
                guess = c2 - (c2 - c1) ** 2 / denom
                # only trust a tight bracket just below the current iterate
                if 0 < guess < c2 and c2 - guess < 100 * (c1 - c2):
                    if channel(guess) - guess >= 0:
                        root = optimize.brentq(lambda c: channel(c) - c, guess, c2,
                                               xtol=tol * 1e-3, rtol=4 * np.finfo(float).eps)
                        return finish(root)
    raise FixedPointError(f"replica fixed point did not converge in {max_iters} iterations",
                          last=chi)
