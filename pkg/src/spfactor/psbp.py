"""Probit stick-breaking machinery for the factor-loading columns.

Each loading column j carries a discrete mixture over atoms theta_{jl} whose
weights are built from probit transforms of Gaussian stick variables
alpha_{jl}(s): w_l(s) = Phi(alpha_l(s)) * prod_{r<l} (1 - Phi(alpha_r(s))).
A multiplicative gamma process shrinks the atom scales across columns so
later factors collapse toward zero.  The closed-form first and second stick
moments here serve as oracles for the process variance and the marginal
moments of the observed data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.special import ndtr
from scipy.stats import norm

from .errors import DegenerateDenominator, IndicatorOutOfRange


@dataclass
class MgpState:
    """Column-shrinkage gammas: tau_j = prod_{h<=j} delta_h (multiplicative mode)."""

    delta: np.ndarray  # (k,) positive
    a1: float = 1.0
    a2: float = 20.0
    multiplicative: bool = True

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=float)
        if np.any(self.delta <= 0):
            raise ValueError("delta entries must be positive")

    def precisions(self) -> np.ndarray:
        return mgp_precisions(self)


def mgp_precisions(mgp: MgpState) -> np.ndarray:
    """Column precisions tau_1..tau_k; cumulative products in multiplicative mode."""
    if mgp.multiplicative:
        return np.cumprod(mgp.delta)
    return mgp.delta.copy()


@dataclass
class StickState:
    """Per-column stick-breaking state over all mO cells.

    In finite mode column j has L[j] components backed by L[j]-1 stick
    variables and the leftover-mass closing rule.  In slice mode all L[j]
    components are real sticks and L[j] is the active truncation, regrown
    each sweep.

    alpha[j], z[j]: (n_sticks_j, n_cells); theta[j]: (L_j,);
    xi: (k, n_cells) int, 1-based component indicators;
    u: (k, n_cells) slice variables, slice mode only.
    """

    alpha: list[np.ndarray]
    z: list[np.ndarray]
    theta: list[np.ndarray]
    xi: np.ndarray
    L: np.ndarray
    u: np.ndarray | None = None
    slice_mode: bool = field(default=False)

    @property
    def k(self) -> int:
        return self.xi.shape[0]

    @property
    def n_cells(self) -> int:
        return self.xi.shape[1]

    def n_sticks(self, j: int) -> int:
        return self.L[j] if self.slice_mode else self.L[j] - 1

    def weights(self, j: int) -> np.ndarray:
        """(L_j, n_cells) weight matrix for column j under the closing rule."""
        return stick_weights_matrix(self.alpha[j], closing=not self.slice_mode)

    def loadings(self) -> np.ndarray:
        return loadings_from_atoms(self)


def stick_weights(alpha_col: np.ndarray) -> np.ndarray:
    """Weights from one stick vector: length L from L-1 sticks, summing to one.

    w_l = Phi(alpha_l) * prod_{r<l} (1 - Phi(alpha_r)) for l < L; the final
    weight takes the remaining mass, so the telescoped sum is exactly one.
    """
    alpha_col = np.asarray(alpha_col, dtype=float)
    v = ndtr(alpha_col)
    w = np.empty(alpha_col.size + 1)
    remaining = 1.0
    for l, vl in enumerate(v):
        w[l] = vl * remaining
        remaining -= w[l]
    w[-1] = remaining
    return w


def stick_weights_matrix(alpha: np.ndarray, closing: bool = True) -> np.ndarray:
    """Vectorized stick weights over cells: alpha (n_sticks, n_cells).

    With `closing` the result has n_sticks+1 rows and columns sum to one;
    without it each stick row is the raw probit stick-breaking weight
    (slice mode, where the tail stays open).
    """
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    n_sticks, n_cells = alpha.shape
    v = ndtr(alpha)
    n_rows = n_sticks + 1 if closing else n_sticks
    w = np.zeros((n_rows, n_cells))
    remaining = np.ones(n_cells)
    for l in range(n_sticks):
        w[l] = v[l] * remaining
        remaining = remaining - w[l]
    if closing:
        w[n_sticks] = remaining
    return w


def loadings_from_atoms(state: StickState) -> np.ndarray:
    """Loading matrix (n_cells, k): lambda_j(s) = theta_{j, xi_j(s)}."""
    lam = np.empty((state.n_cells, state.k))
    for j in range(state.k):
        xi = state.xi[j]
        if np.any(xi < 1) or np.any(xi > state.theta[j].size):
            raise IndicatorOutOfRange(
                f"column {j + 1} has indicators outside 1..{state.theta[j].size}")
        lam[:, j] = state.theta[j][xi - 1]
    return lam


def slice_truncation(weights: np.ndarray, u_min: float) -> int:
    """Smallest per-cell count of sticks whose cumulative weight exceeds 1-u_min,
    maximized over cells.

    `weights` is (L, n_cells) (or a single stream); the caller is responsible
    for extending the streams with fresh prior sticks until every cell
    satisfies the bound.
    """
    if not 0 < u_min < 1:
        raise ValueError("u_min must lie in (0, 1)")
    w = np.asarray(weights, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    cum = np.cumsum(w, axis=0)
    hit = cum > 1.0 - u_min
    if not hit[-1].all():
        raise ValueError("weight streams too short to satisfy the slice bound")
    first = hit.argmax(axis=0) + 1
    return int(first.max())


# -- stick moments and process/marginal moment formulas ------------------------


def beta_moment_1(mu: float, sigma2: float) -> float:
    """E[Phi(alpha)] for alpha ~ N(mu, sigma2): Phi(mu / sqrt(1 + sigma2))."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    return float(ndtr(mu / np.sqrt(1.0 + sigma2)))


def beta_moment_2(mu, cov) -> float:
    """E[Phi(alpha) Phi(alpha')] as the orthant probability P(T1>0, T2>0),
    (T1, T2) ~ N(mu, cov + I); same-cell second moments use cov = [[s2,s2],[s2,s2]].

    Deterministic adaptive quadrature, accurate to well below 1e-8.
    """
    mu = np.asarray(mu, dtype=float).reshape(2)
    C = np.asarray(cov, dtype=float).reshape(2, 2) + np.eye(2)
    s1 = np.sqrt(C[0, 0])
    cond_var = C[1, 1] - C[0, 1] ** 2 / C[0, 0]
    cond_sd = np.sqrt(cond_var)
    slope = C[0, 1] / C[0, 0]

    def integrand(t):
        # t is the standardized T1; T2 | T1 is Gaussian
        cond_mean = mu[1] + slope * s1 * t
        return norm.pdf(t) * ndtr(cond_mean / cond_sd)

    lo = -mu[0] / s1
    val, _ = quad(integrand, lo, np.inf, epsabs=1e-12, epsrel=1e-12, limit=200)
    return float(val)


def psbp_process_variance(G0B: float, beta1: float, beta2: float, L) -> float:
    """Variance of G(B) around its base-measure mean for an L-component column.

    G0B*(1-G0B) * beta2 * (1 - (1 - 2*beta1 + beta2)^L) / (2*beta1 - beta2);
    pass L = inf for the limiting value.
    """
    denom = 2.0 * beta1 - beta2
    if denom <= 0:
        raise DegenerateDenominator("requires 2*beta1 > beta2")
    base = 1.0 - 2.0 * beta1 + beta2
    geo = 1.0 if np.isinf(L) else 1.0 - base ** L
    return G0B * (1.0 - G0B) * beta2 * geo / denom


def psbp_process_covariance(G0B: float, beta1_pair, beta2_cross: float, L) -> float:
    """Covariance of G(B) across two cells sharing atoms but with correlated sticks."""
    b1, b1p = beta1_pair
    denom = b1 + b1p - beta2_cross
    if denom <= 0:
        raise DegenerateDenominator("requires beta1 + beta1' > beta2 cross moment")
    base = 1.0 - b1 - b1p + beta2_cross
    geo = 1.0 if np.isinf(L) else 1.0 - base ** L
    return G0B * (1.0 - G0B) * beta2_cross * geo / denom


def marginal_y_covariance(beta1_pair, beta2_cross: float, L, tau: np.ndarray,
                          eta2_expect: np.ndarray, sigma2_expect: float,
                          same_cell: bool) -> float:
    """Marginal moment of the observed process at one visit.

    Variance (same_cell): E[sigma2] + bracket * sum_j tau_j^-1 E[eta_tj^2]
    with the same-cell bracket; covariance drops the noise term and uses the
    cross-cell bracket.
    """
    tau = np.asarray(tau, dtype=float)
    eta2 = np.asarray(eta2_expect, dtype=float)
    if tau.size == 0:
        return float(sigma2_expect) if same_cell else 0.0
    if np.any(tau <= 0):
        raise ValueError("tau entries must be positive")
    scale = float(np.sum(eta2 / tau))
    if same_cell:
        b1 = beta1_pair[0] if np.ndim(beta1_pair) else float(beta1_pair)
        denom = 2.0 * b1 - beta2_cross
        if denom <= 0:
            raise DegenerateDenominator("requires 2*beta1 > beta2")
        base = 1.0 - 2.0 * b1 + beta2_cross
        geo = 1.0 if np.isinf(L) else 1.0 - base ** L
        return float(sigma2_expect) + beta2_cross * geo / denom * scale
    b1, b1p = beta1_pair
    denom = b1 + b1p - beta2_cross
    if denom <= 0:
        raise DegenerateDenominator("requires beta1 + beta1' > beta2 cross moment")
    base = 1.0 - b1 - b1p + beta2_cross
    geo = 1.0 if np.isinf(L) else 1.0 - base ** L
    return beta2_cross * geo / denom * scale
