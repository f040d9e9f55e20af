"""Random-matrix calculus for the coupling matrix ``J = xi*I - xi*A^T A``.

Covers ensemble definitions, sampling of sensing matrices, the R-transform
of the limiting eigenvalue distribution of ``J``, the power series of its
compositional inverse, and the coefficients of the bivariate transform

    B(w, z) = (1/Rinv(w) - 1/Rinv(z))^{-1} (z - w).

All functions are pure; ensemble specs are frozen dataclasses.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

DEFAULT_TRUNCATION = 64
_SERIES_SWITCH = 1e-8


class DomainError(ValueError):
    """Raised when a transform is evaluated outside its analytic domain."""


class EnsembleKind(str, enum.Enum):
    IID_GAUSSIAN = "iid_gaussian"
    ROW_ORTHOGONAL = "row_orthogonal"
    CUSTOM = "custom"


@dataclass(frozen=True)
class EnsembleSpec:
    """Random matrix ensemble with aspect ratio ``alpha = N/K`` and noise precision ``xi``.

    For ``kind == CUSTOM`` the free cumulants ``c_1, c_2, ...`` of the LED of
    ``J`` are given directly in ``custom_cumulants``.
    """

    kind: EnsembleKind
    alpha: float
    xi: float
    custom_cumulants: tuple[float, ...] | None = None
    truncation: int = DEFAULT_TRUNCATION

    def __post_init__(self):
        object.__setattr__(self, "kind", EnsembleKind(self.kind))
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not self.xi > 0.0:
            raise ValueError(f"xi must be positive, got {self.xi}")
        if self.truncation < 1:
            raise ValueError("truncation must be a positive integer")
        if self.kind is EnsembleKind.CUSTOM:
            if not self.custom_cumulants:
                raise ValueError("custom ensemble needs custom_cumulants")
            object.__setattr__(
                self, "custom_cumulants", tuple(float(c) for c in self.custom_cumulants)
            )

    @classmethod
    def iid_gaussian(cls, alpha, xi, truncation=DEFAULT_TRUNCATION):
        return cls(EnsembleKind.IID_GAUSSIAN, alpha, xi, truncation=truncation)

    @classmethod
    def row_orthogonal(cls, alpha, xi, truncation=DEFAULT_TRUNCATION):
        return cls(EnsembleKind.ROW_ORTHOGONAL, alpha, xi, truncation=truncation)

    @classmethod
    def custom(cls, alpha, xi, cumulants, truncation=DEFAULT_TRUNCATION):
        return cls(EnsembleKind.CUSTOM, alpha, xi, tuple(cumulants), truncation)

    @property
    def xi_pair(self) -> tuple[float, float]:
        """``(xi_1, xi_2) = (xi, xi*(alpha-1)/alpha)``; ``xi_2 <= 0``."""
        return self.xi, self.xi * (self.alpha - 1.0) / self.alpha

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value, "alpha": self.alpha, "xi": self.xi,
               "truncation": self.truncation}
        if self.custom_cumulants is not None:
            out["custom_cumulants"] = list(self.custom_cumulants)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleSpec":
        cum = d.get("custom_cumulants")
        return cls(EnsembleKind(d["kind"]), float(d["alpha"]), float(d["xi"]),
                   tuple(cum) if cum is not None else None,
                   int(d.get("truncation", DEFAULT_TRUNCATION)))


@dataclass(frozen=True)
class SensingMatrix:
    a: np.ndarray = field(repr=False)
    ensemble: EnsembleSpec
    seed: int | None = None

    @property
    def n_rows(self) -> int:
        return self.a.shape[0]

    @property
    def n_cols(self) -> int:
        return self.a.shape[1]


# ---------------------------------------------------------------------------
# free cumulants and the R-transform
# ---------------------------------------------------------------------------

def gramian_to_coupling_cumulants(gramian_cumulants, xi):
    """Convert free cumulants of ``A^T A`` into those of ``J = xi*I - xi*A^T A``.

    Uses ``R(w) = xi - xi*Rg(-xi*w)`` where ``Rg`` is the R-transform of the Gramian.
    """
    cg = np.asarray(gramian_cumulants, dtype=float)
    n = np.arange(1, cg.size + 1)
    c = (-1.0) ** n * xi**n * cg
    c[0] = xi - xi * cg[0]
    return c


def free_cumulants(ens: EnsembleSpec, n: int) -> np.ndarray:
    """Free cumulants ``c_1..c_n`` of the LED of ``J`` (R(w) = sum c_k w^(k-1))."""
    if n < 1:
        raise ValueError("n must be >= 1")
    alpha, xi = ens.alpha, ens.xi
    if ens.kind is EnsembleKind.IID_GAUSSIAN:
        c = np.zeros(n)
        k = np.arange(2, n + 1)
        c[1:] = (xi**2 / alpha) * (-xi / alpha) ** (k - 2)
        return c
    if ens.kind is EnsembleKind.ROW_ORTHOGONAL:
        # s(w) = xi - R(w) solves s = xi + w*s^2 - (xi/alpha)*w*s; each pass fixes one order
        b = xi / alpha
        s = np.zeros(n)
        s[0] = xi
        for _ in range(n):
            s2 = np.convolve(s, s)[:n]
            nxt = np.zeros(n)
            nxt[0] = xi
            nxt[1:] = s2[:-1] - b * s[:-1]
            s = nxt
        c = -s
        c[0] = 0.0
        return c
    cum = np.asarray(ens.custom_cumulants, dtype=float)
    if cum.size < n:
        raise ValueError(f"custom ensemble provides {cum.size} cumulants, {n} requested")
    return cum[:n].copy()


def r_transform(ens: EnsembleSpec, omega):
    """R-transform of the LED of ``J``; scalar in, scalar out (arrays are mapped).

    Raises :class:`DomainError` at poles or where the square root in the
    row-orthogonal closed form has a negative argument.
    """
    w = np.asarray(omega, dtype=float)
    out = np.empty_like(w)
    small = np.abs(w) < _SERIES_SWITCH
    if np.any(small):
        c = free_cumulants(ens, 3) if ens.kind is not EnsembleKind.CUSTOM else _padded(ens, 3)
        ws = w[small]
        out[small] = c[0] + c[1] * ws + c[2] * ws**2
    big = ~small
    if np.any(big):
        out[big] = _r_closed(ens, w[big])
    return float(out) if out.ndim == 0 else out


def _padded(ens, n):
    cum = np.zeros(n)
    given = np.asarray(ens.custom_cumulants, dtype=float)[:n]
    cum[: given.size] = given
    return cum


def _r_closed(ens, w):
    alpha, xi = ens.alpha, ens.xi
    if ens.kind is EnsembleKind.IID_GAUSSIAN:
        den = alpha + xi * w
        if np.any(den == 0.0):
            raise DomainError(f"R-transform pole at omega = {-alpha / xi}")
        return xi**2 * w / den
    if ens.kind is EnsembleKind.ROW_ORTHOGONAL:
        if alpha == 1.0:
            # A is orthogonal: J = 0 and its R-transform vanishes identically
            return np.zeros_like(w)
        b = xi / alpha
        disc = (b * w + 1.0) ** 2 - 4.0 * xi * w
        if np.any(disc < 0.0):
            raise DomainError("negative discriminant in row-orthogonal R-transform")
        root = np.sqrt(disc)
        # xi - [(bw+1) - root]/(2w), rewritten without the 0/0 and the xi - xi cancellation
        num = b * w + (b * b * w * w + 2.0 * b * w - 4.0 * xi * w) / (root + 1.0)
        return xi * num / (b * w + 1.0 + root)
    cum = np.asarray(ens.custom_cumulants, dtype=float)
    return np.polynomial.polynomial.polyval(w, cum)


# ---------------------------------------------------------------------------
# power-series reversion and the inverse R-transform
# ---------------------------------------------------------------------------

def _series_reciprocal(p, n):
    """First ``n`` coefficients of ``1/p`` for a power series with ``p[0] != 0``."""
    p = np.asarray(p, dtype=float)
    q = np.zeros(n)
    q[0] = 1.0 / p[0]
    for k in range(1, n):
        m = min(k, p.size - 1)
        q[k] = -np.dot(p[1 : m + 1], q[k - m : k][::-1]) / p[0]
    return q


def series_reversion(coeffs, n_max: int) -> np.ndarray:
    """Compositional inverse of ``f(w) = sum_k coeffs[k] w^k`` up to order ``n_max``.

    ``coeffs[0]`` must vanish and ``coeffs[1]`` must not. Returns ``g_1..g_{n_max}``
    with ``f(g(w)) = w + O(w^{n_max+1})``, computed by Lagrange inversion
    ``[w^n] g = (1/n) [w^{n-1}] (w/f(w))^n`` on a rescaled copy of ``f``.
    """
    f = np.asarray(coeffs, dtype=float)
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if f.size < 2:
        raise ValueError("need at least the constant and linear coefficients")
    if f[0] != 0.0:
        raise ValueError("series has a nonzero constant term; inverse is not analytic at 0")
    if f[1] == 0.0:
        raise ValueError("series has a zero linear term; inverse is not analytic at 0")
    if f.size < n_max + 1:
        f = np.concatenate([f, np.zeros(n_max + 1 - f.size)])
    f = f[: n_max + 1]

    # rescale w -> s*u so that all coefficients of f(s u)/(f_1 s) are O(1)
    k = np.arange(2, n_max + 1)
    ratios = np.abs(f[2:] / f[1])
    nz = ratios > 0
    s = 1.0
    if np.any(nz):
        s = 1.0 / np.max(ratios[nz] ** (1.0 / (k[nz] - 1)))
        # keep s**n_max finite when a coefficient is denormal-small or huge
        bound = 1e250 ** (1.0 / n_max)
        s = min(max(s, 1.0 / bound), bound)
    scaled = f[1:] / f[1] * s ** np.arange(0, n_max)  # f~(u)/u coefficients
    h = _series_reciprocal(scaled, n_max)  # u / f~(u)
    g = np.zeros(n_max)
    hp = np.zeros(n_max)
    hp[0] = 1.0
    for n in range(1, n_max + 1):
        hp = np.convolve(hp, h)[:n_max]
        g[n - 1] = hp[n - 1] / n
    lin = f[1] * s
    return s * g / lin ** np.arange(1, n_max + 1)


def r_inverse_coeffs(ens: EnsembleSpec, n_max: int) -> np.ndarray:
    """Coefficients ``a_1..a_{n_max}`` of ``Rinv(w) = sum_n a_n w^n``."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    n = np.arange(1, n_max + 1, dtype=float)
    alpha, xi = ens.alpha, ens.xi
    if ens.kind is EnsembleKind.IID_GAUSSIAN:
        return (alpha / xi) * xi ** (-n)
    if ens.kind is EnsembleKind.ROW_ORTHOGONAL:
        xi1, xi2 = ens.xi_pair
        if xi2 == 0.0:
            raise DomainError("alpha = 1: R vanishes identically and has no inverse")
        return (alpha / xi) * (xi1 ** (-n) - xi2 ** (-n))
    cum = np.asarray(ens.custom_cumulants, dtype=float)
    if cum.size < n_max + 1:
        raise ValueError(
            f"custom ensemble needs {n_max + 1} cumulants for order {n_max}, has {cum.size}"
        )
    return series_reversion(cum[: n_max + 1], n_max)


def r_inverse(ens: EnsembleSpec, omega, n_terms: int = 30):
    """Evaluate the truncated series ``sum_{n<=n_terms} a_n omega^n``."""
    a = r_inverse_coeffs(ens, n_terms)
    w = np.asarray(omega, dtype=float)
    out = np.polynomial.polynomial.polyval(w, np.concatenate([[0.0], a]))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# bivariate transform B(w, z)
# ---------------------------------------------------------------------------

def b_coefficients_from_inverse(a, n_max: int) -> np.ndarray:
    """Numeric bivariate expansion of ``B`` from inverse coefficients ``a_1..``.

    ``B = F(w) F(z) / D(w, z)`` with ``F = Rinv`` and
    ``D = (F(z) - F(w))/(z - w)``, whose ``(i, j)`` coefficient is ``a_{i+j+1}``.
    Needs ``a`` up to order ``2*n_max + 1``. Returns an ``(n_max+1, n_max+1)``
    array indexed by the powers of ``w`` and ``z``.
    """
    a = np.asarray(a, dtype=float)
    need = 2 * n_max + 1
    if a.size < need:
        raise ValueError(f"need {need} inverse coefficients for order {n_max}, got {a.size}")
    if a[0] == 0.0:
        raise DomainError("a_1 = 0: B has no power-series expansion at the origin")
    a = a[:need]
    # w -> t*u rescaling keeps the triangular solve well conditioned
    n = np.arange(1, need + 1)
    ratios = np.abs(a[1:] / a[0])
    nz = ratios > 0
    t = 1.0
    if np.any(nz):
        t = 1.0 / np.max(ratios[nz] ** (1.0 / (n[1:][nz] - 1)))
    lam = a[0] * t
    ah = a * t**n / lam  # normalised coefficients, ah[0] = 1

    m = n_max + 1
    fser = np.concatenate([[0.0], ah[:n_max]])
    num = np.outer(fser, fser)
    idx = np.add.outer(np.arange(m), np.arange(m))
    den = ah[idx]
    bh = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            acc = num[i, j] - np.sum(den[: i + 1, : j + 1] * bh[i::-1, j::-1])
            bh[i, j] = acc / den[0, 0]
    if not np.all(np.isfinite(bh)):
        raise DomainError("bivariate expansion of B produced non-finite coefficients")
    powers = np.add.outer(np.arange(m), np.arange(m))
    return bh * lam * t * t ** (-powers.astype(float))


def b_coefficients(ens: EnsembleSpec, n_max: int, method: str = "auto",
                   scale: float = 1.0) -> np.ndarray:
    """Coefficients ``Co_{w^n z^k}[B] * scale^(n+k)`` for ``0 <= n, k <= n_max``.

    ``method="closed"`` uses the ensemble closed forms, ``"series"`` the numeric
    expansion built from the Lagrange-reverted free-cumulant series, and
    ``"auto"`` picks closed forms where they exist. A ``scale`` near the decay
    rate keeps high orders representable.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if method == "auto":
        method = "series" if ens.kind is EnsembleKind.CUSTOM else "closed"
    if method == "closed":
        out = np.zeros((n_max + 1, n_max + 1))
        if ens.kind is EnsembleKind.IID_GAUSSIAN:
            out[1, 1] = ens.alpha * (scale / ens.xi) ** 2
        elif ens.kind is EnsembleKind.ROW_ORTHOGONAL:
            xi1, xi2 = ens.xi_pair
            if xi2 == 0.0:
                raise DomainError("alpha = 1: B is undefined for the row-orthogonal ensemble")
            k = np.arange(1, n_max + 1)
            out[k, k] = -((scale * scale / (xi1 * xi2)) ** k.astype(float))
        else:
            raise ValueError("no closed form for custom ensembles")
        return out
    if method != "series":
        raise ValueError(f"unknown method {method!r}")
    order = 2 * n_max + 1
    if ens.kind is EnsembleKind.CUSTOM:
        a = r_inverse_coeffs(ens, order)
    else:
        a = series_reversion(free_cumulants(ens, order + 1), order)
    out = b_coefficients_from_inverse(a, n_max)
    if scale != 1.0:
        out = out * scale ** np.add.outer(np.arange(n_max + 1), np.arange(n_max + 1))
    return out


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def haar_orthonormal_rows(n_rows: int, n_cols: int, rng: np.random.Generator) -> np.ndarray:
    """First ``n_rows`` rows of a Haar-distributed ``n_cols x n_cols`` orthogonal matrix.

    Thin QR of an ``n_cols x n_rows`` Gaussian matrix with the sign fix that
    makes ``diag(R) > 0``; the leading columns of a full Householder QR depend
    only on the leading Gaussian columns, so this equals slicing the full Haar draw.
    """
    g = rng.standard_normal((n_cols, n_rows))
    q, r = np.linalg.qr(g, mode="reduced")
    q *= np.sign(np.diag(r))
    return q.T


def sample_matrix(ens: EnsembleSpec, n_rows: int, n_cols: int, seed) -> SensingMatrix:
    if n_cols < 2:
        raise ValueError("n_cols must be >= 2")
    if n_rows != round(ens.alpha * n_cols):
        raise ValueError(
            f"n_rows={n_rows} inconsistent with alpha={ens.alpha}, n_cols={n_cols}"
        )
    rng = np.random.default_rng(seed)
    if ens.kind is EnsembleKind.IID_GAUSSIAN:
        a = rng.standard_normal((n_rows, n_cols)) / np.sqrt(n_rows)
    elif ens.kind is EnsembleKind.ROW_ORTHOGONAL:
        a = haar_orthonormal_rows(n_rows, n_cols, rng) / np.sqrt(ens.alpha)
    else:
        raise ValueError("sampling is only defined for iid Gaussian and row-orthogonal ensembles")
    return SensingMatrix(a=a, ensemble=ens, seed=seed)
