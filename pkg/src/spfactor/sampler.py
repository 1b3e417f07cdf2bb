"""Gibbs sampler over all model unknowns.

One sweep scans the full conditionals in a fixed order: omega (binomial) ->
loading columns (u, xi, z, alpha, theta per column) -> eta -> beta -> sigma2
-> kappa -> Upsilon -> delta -> rho -> psi.  Both likelihood families reduce
to a Gaussian working response with a per-cell diagonal precision (1/sigma2
for Gaussian data, the Polya-Gamma draw for binomial), so every conditional
except rho/psi is conjugate; those two use adaptive random-walk Metropolis
on a transformed scale, tuned during burn-in only.
"""

from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.special import ndtr
from scipy.stats import invwishart

from .data import ObservationSet, validate
from .errors import NonPositiveScale
from .kernels import (
    SpatialKernelSpec,
    TemporalKernelSpec,
    psi_bounds,
    spatial_correlation,
    temporal_correlation,
)
from .likelihoods import (
    LikelihoodSpec,
    binomial_log_pmf,
    pg_sample_array,
    truncated_normal,
)
from .psbp import MgpState, StickState, loadings_from_atoms, stick_weights_matrix
from .storage import PosteriorDraws

_LOADINGS_PRIORS = ("psbp-spatial", "psbp-independent", "gaussian-car", "gaussian-iid")
_SHRINKAGES = ("mgp", "independent-gamma")
_MAX_STICKS = 256


@dataclass(frozen=True)
class ModelSpec:
    """Everything that defines the model besides the data: truncation,
    kernels, prior menu, and hyperparameters.

    L=None selects the slice-sampled infinite mixture; an integer fixes a
    finite truncation.  `fixed` names updates to skip (useful for conjugate
    micro-tests); rho is also held when rho_prior == "fixed".
    """

    k: int
    likelihood: LikelihoodSpec = LikelihoodSpec("gaussian")
    L: int | None = None
    spatial_kernel: str = "car"            # car | exponential-gp
    temporal_kernel: str = "exponential"   # exponential | ar1
    loadings_prior: str = "psbp-spatial"
    shrinkage: str = "mgp"
    rho: float = 0.99
    rho_prior: str = "fixed"               # fixed | uniform
    rho_bounds: tuple[float, float] = (0.0, 1.0)
    psi: float | None = None               # fixed value; None -> sampled
    psi_bounds: tuple[float, float] | None = None  # exponential kernel; None -> from data
    psi_beta_shapes: tuple[float, float] = (1.0, 1.0)  # ar1 transformed-beta prior
    a1: float = 1.0
    a2: float = 20.0
    sigma2_a: float = 0.001
    sigma2_b: float = 0.001
    kappa_df: float | None = None          # default O + 1
    kappa_scale: float | np.ndarray | None = None  # default I_O
    upsilon_df: float | None = None        # default k + 1
    upsilon_scale: float | np.ndarray | None = None  # default I_k
    beta_prior_var: float = 1000.0
    pool_sigma2: bool = False
    fixed: frozenset = frozenset()

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.L is not None and self.L < 1:
            raise ValueError("finite truncation L must be at least 1")
        if self.loadings_prior not in _LOADINGS_PRIORS:
            raise ValueError(f"unknown loadings prior {self.loadings_prior!r}")
        if self.shrinkage not in _SHRINKAGES:
            raise ValueError(f"unknown shrinkage {self.shrinkage!r}")
        for name, val in (("a1", self.a1), ("a2", self.a2),
                          ("sigma2_a", self.sigma2_a), ("sigma2_b", self.sigma2_b),
                          ("beta_prior_var", self.beta_prior_var)):
            if val <= 0:
                raise ValueError(f"{name} must be positive")
        if self.loadings_prior.startswith("gaussian") and self.shrinkage == "mgp":
            object.__setattr__(self, "shrinkage", "independent-gamma")

    @property
    def slice_mode(self) -> bool:
        return self.L is None

    @property
    def uses_sticks(self) -> bool:
        return self.loadings_prior.startswith("psbp")

    @property
    def spatial_loadings(self) -> bool:
        return self.loadings_prior in ("psbp-spatial", "gaussian-car")


@dataclass
class ChainState:
    """One full parameter state."""

    beta: np.ndarray                 # (p,)
    eta: np.ndarray                  # (T, k)
    lam: np.ndarray                  # (n_cells, k)
    stick: StickState | None
    mgp: MgpState
    kappa: np.ndarray                # (O, O)
    rho: float
    psi: float
    upsilon: np.ndarray              # (k, k)
    sigma2: np.ndarray | None        # (n_cells,) gaussian only
    omega: np.ndarray | None = None  # (T, n_cells) binomial only

    def copy(self) -> "ChainState":
        stick = None
        if self.stick is not None:
            stick = StickState(
                alpha=[a.copy() for a in self.stick.alpha],
                z=[z.copy() for z in self.stick.z],
                theta=[t.copy() for t in self.stick.theta],
                xi=self.stick.xi.copy(), L=self.stick.L.copy(),
                u=None if self.stick.u is None else self.stick.u.copy(),
                slice_mode=self.stick.slice_mode)
        return ChainState(
            beta=self.beta.copy(), eta=self.eta.copy(), lam=self.lam.copy(),
            stick=stick,
            mgp=MgpState(self.mgp.delta.copy(), self.mgp.a1, self.mgp.a2,
                         self.mgp.multiplicative),
            kappa=self.kappa.copy(), rho=self.rho, psi=self.psi,
            upsilon=self.upsilon.copy(),
            sigma2=None if self.sigma2 is None else self.sigma2.copy(),
            omega=None if self.omega is None else self.omega.copy())


class GibbsSampler:
    """Owns the data-side caches and performs sweeps on a ChainState."""

    def __init__(self, spec: ModelSpec, data: ObservationSet):
        validate(data, family=spec.likelihood.family)
        self.spec = spec
        self.data = data
        self.T = data.T
        self.N = data.n_cells
        self.m = data.m
        self.O = data.O
        self.p = data.p
        self.times = data.times.copy()
        self.y = np.where(data.stacked_mask(), 0.0, data.stacked_y())
        self.obs = ~data.stacked_mask()
        self.trials = data.stacked_trials()
        self.X = data.stacked_covariates()

        self.kappa_df = spec.kappa_df if spec.kappa_df is not None else self.O + 1
        ks = spec.kappa_scale if spec.kappa_scale is not None else np.eye(self.O)
        self.kappa_scale = np.atleast_2d(np.asarray(ks, dtype=float)) * np.eye(self.O) \
            if np.ndim(ks) == 0 else np.asarray(ks, dtype=float)
        self.upsilon_df = spec.upsilon_df if spec.upsilon_df is not None else spec.k + 1
        us = spec.upsilon_scale if spec.upsilon_scale is not None else np.eye(spec.k)
        self.upsilon_scale = np.asarray(us, dtype=float) * np.eye(spec.k) \
            if np.ndim(us) == 0 else np.asarray(us, dtype=float)

        if spec.temporal_kernel == "exponential":
            self.psi_range = spec.psi_bounds or psi_bounds(self.times)
        else:
            self.psi_range = (-1.0, 1.0)

        self._f_cache: tuple | None = None  # (rho, F, F_prec, chol_F, logdet_F)
        self._h_cache: tuple | None = None  # (psi, H, cho, H_inv, logdet_H)
        self.rho_scale = 1.0
        self.psi_scale = 1.0
        self._accept = {"rho": [0, 0], "psi": [0, 0]}

    # -- kernel caches ------------------------------------------------------

    def spatial_ops(self, rho: float):
        """F(rho), its precision, a factor S with S S^T = F, and log|F|."""
        if self._f_cache is not None and self._f_cache[0] == rho:
            return self._f_cache[1:]
        if self.spec.spatial_loadings:
            skind = self.spec.spatial_kernel
            struct = self.data.spatial
            F = spatial_correlation(SpatialKernelSpec(skind, rho), struct)
            if skind == "car":
                prec = np.diag(struct.neighbour_counts) - rho * struct.adjacency
                cho_prec = np.linalg.cholesky(prec)
                logdet_F = -2.0 * float(np.sum(np.log(np.diag(cho_prec))))
                # S = L^-T with L L^T the precision Cholesky gives S S^T = F
                factor = sla.solve_triangular(cho_prec.T, np.eye(self.m), lower=False)
            else:
                prec = np.linalg.inv(F)
                factor = np.linalg.cholesky(F)
                logdet_F = 2.0 * float(np.sum(np.log(np.diag(factor))))
        else:
            F = np.eye(self.m)
            prec = np.eye(self.m)
            factor = np.eye(self.m)
            logdet_F = 0.0
        self._f_cache = (rho, F, prec, factor, logdet_F)
        return self._f_cache[1:]

    def temporal_ops(self, psi: float):
        """H(psi), its Cholesky pair for solves, inverse, and log|H|."""
        if self._h_cache is not None and self._h_cache[0] == psi:
            return self._h_cache[1:]
        H = temporal_correlation(TemporalKernelSpec(self.spec.temporal_kernel, psi),
                                 self.times)
        cho = sla.cho_factor(H, lower=True)
        H_inv = sla.cho_solve(cho, np.eye(self.T))
        logdet_H = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))
        self._h_cache = (psi, H, cho, H_inv, logdet_H)
        return self._h_cache[1:]

    # -- working response -----------------------------------------------------

    def working(self, state: ChainState) -> tuple[np.ndarray, np.ndarray]:
        """Gaussian working response and its diagonal precision, both (T, N)."""
        if self.spec.likelihood.family == "gaussian":
            prec = self.obs / state.sigma2[None, :]
            return self.y, prec
        omega = state.omega
        chi = self.y - self.trials / 2.0
        with np.errstate(divide="ignore", invalid="ignore"):
            ystar = np.where(omega > 0, chi / np.where(omega > 0, omega, 1.0), 0.0)
        return ystar, np.where(omega > 0, omega, 0.0)

    def predictor_offset(self, state: ChainState) -> np.ndarray:
        """X_t beta for all t, shape (T, N)."""
        if self.p == 0:
            return np.zeros((self.T, self.N))
        return self.X @ state.beta

    # -- initialization ------------------------------------------------------

    @staticmethod
    def _guard_spd(mat: np.ndarray, df: float, scale: np.ndarray) -> np.ndarray:
        """Rein in initialization draws from near-improper IW priors.

        A draw from IG(0.001, 0.001) is astronomically large or small with
        high probability; starting the probit stick fields at such a scale
        saturates Phi(alpha) and the chain cannot random-walk back within any
        realistic budget.  Eigenvalues are clamped into a moderate band at
        initialization only; the first sweep's conjugate update (whose
        degrees of freedom are healthy) takes over from there.
        """
        if not np.all(np.isfinite(mat)):
            return scale / (df + scale.shape[0] + 1.0) + 1e-3 * np.eye(scale.shape[0])
        vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
        clipped = np.clip(vals, 1e-2, 1e2)
        if np.array_equal(vals, clipped):
            return mat
        return (vecs * clipped) @ vecs.T

    def init_state(self, rng: np.random.Generator) -> ChainState:
        spec = self.spec
        k = spec.k
        if spec.shrinkage == "mgp":
            delta = np.empty(k)
            delta[0] = rng.gamma(spec.a1, 1.0)
            if k > 1:
                delta[1:] = rng.gamma(spec.a2, 1.0, size=k - 1)
            mgp = MgpState(np.clip(delta, 1e-6, 1e6), spec.a1, spec.a2,
                           multiplicative=True)
        else:
            delta = rng.gamma(spec.a1, 1.0 / spec.a2, size=k)
            mgp = MgpState(np.clip(delta, 1e-6, 1e6), spec.a1, spec.a2,
                           multiplicative=False)
        tau = mgp.precisions()

        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            kappa = np.atleast_2d(invwishart.rvs(self.kappa_df, self.kappa_scale,
                                                 random_state=rng))
        kappa = self._guard_spd(kappa, self.kappa_df, self.kappa_scale)
        if spec.rho_prior == "fixed" or not spec.spatial_loadings:
            rho = spec.rho
        else:
            rho = float(rng.uniform(*spec.rho_bounds))
        if spec.psi is not None:
            psi = spec.psi
        elif spec.temporal_kernel == "exponential":
            psi = float(rng.uniform(*self.psi_range))
        else:
            g, b = spec.psi_beta_shapes
            psi = float(2.0 * rng.beta(g, b) - 1.0)

        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            upsilon = np.atleast_2d(invwishart.rvs(self.upsilon_df, self.upsilon_scale,
                                                   random_state=rng))
        upsilon = self._guard_spd(upsilon, self.upsilon_df, self.upsilon_scale)
        H, _, _, _ = self.temporal_ops(psi)
        cho_H = np.linalg.cholesky(H)
        cho_U = np.linalg.cholesky(upsilon)
        eta = cho_H @ rng.standard_normal((self.T, k)) @ cho_U.T

        beta = rng.normal(0.0, math.sqrt(spec.beta_prior_var), size=self.p)

        sigma2 = None
        if spec.likelihood.family == "gaussian":
            # clip the draw: near-improper IG priors otherwise start the chain
            # at absurd scales (see _guard_spd)
            if spec.pool_sigma2:
                g = rng.gamma(spec.sigma2_a, 1.0 / spec.sigma2_b)
                sigma2 = np.full(self.N, 1.0 / np.clip(g, 1e-2, 1e2))
            else:
                g = rng.gamma(spec.sigma2_a, 1.0 / spec.sigma2_b, size=self.N)
                sigma2 = 1.0 / np.clip(g, 1e-2, 1e2)

        stick = None
        if spec.uses_sticks:
            stick = self._init_sticks(kappa, rho, tau, rng)
            lam = loadings_from_atoms(stick)
        else:
            lam = np.empty((self.N, k))
            _, _, factor, _ = self.spatial_ops(rho)
            cho_k = np.linalg.cholesky(kappa)
            for j in range(k):
                B = factor @ rng.standard_normal((self.m, self.O)) @ cho_k.T
                lam[:, j] = B.flatten(order="F") / math.sqrt(tau[j])

        omega = None
        if spec.likelihood.family == "binomial":
            omega = pg_sample_array(self.trials, np.zeros((self.T, self.N)), rng)

        return ChainState(beta=beta, eta=eta, lam=lam, stick=stick, mgp=mgp,
                          kappa=kappa, rho=rho, psi=psi, upsilon=upsilon,
                          sigma2=sigma2, omega=omega)

    def _draw_alpha_prior(self, kappa, rho, rng, count=1) -> np.ndarray:
        """`count` stick fields from N(0, kappa (x) F(rho)), rows (count, N)."""
        _, _, factor, _ = self.spatial_ops(rho)
        cho_k = np.linalg.cholesky(kappa)
        out = np.empty((count, self.N))
        for r in range(count):
            B = factor @ rng.standard_normal((self.m, self.O)) @ cho_k.T
            out[r] = B.flatten(order="F")
        return out

    def _init_sticks(self, kappa, rho, tau, rng) -> StickState:
        spec = self.spec
        k = spec.k
        alpha, zs, thetas = [], [], []
        xi = np.ones((k, self.N), dtype=int)
        Ls = np.ones(k, dtype=int)
        u = np.zeros((k, self.N)) if spec.slice_mode else None
        for j in range(k):
            max_sticks = _MAX_STICKS if spec.slice_mode else spec.L - 1
            a_rows = []
            undecided = np.arange(self.N)
            xi_j = np.full(self.N, 0, dtype=int)
            l = 0
            while undecided.size and l < max_sticks:
                a = self._draw_alpha_prior(kappa, rho, rng)[0]
                a_rows.append(a)
                l += 1
                hit = rng.uniform(size=undecided.size) < ndtr(a[undecided])
                xi_j[undecided[hit]] = l
                undecided = undecided[~hit]
            if spec.slice_mode:
                if undecided.size:  # force leftovers onto one extra stick
                    a = self._draw_alpha_prior(kappa, rho, rng)[0]
                    a_rows.append(a)
                    l += 1
                    xi_j[undecided] = l
                L_j = max(l, 1)
                if not a_rows:
                    a_rows.append(self._draw_alpha_prior(kappa, rho, rng)[0])
                    L_j = 1
            else:
                xi_j[undecided] = spec.L
                L_j = spec.L
            a_mat = np.array(a_rows) if a_rows else np.empty((0, self.N))
            n_sticks = L_j if spec.slice_mode else L_j - 1
            a_mat = a_mat[:n_sticks] if a_mat.shape[0] >= n_sticks else np.vstack(
                [a_mat, self._draw_alpha_prior(kappa, rho, rng, n_sticks - a_mat.shape[0])])
            theta_j = rng.normal(0.0, 1.0 / math.sqrt(tau[j]), size=L_j)
            z_j = self._sample_z(a_mat, xi_j, rng)
            alpha.append(a_mat)
            zs.append(z_j)
            thetas.append(theta_j)
            xi[j] = xi_j
            Ls[j] = L_j
            if spec.slice_mode:
                w = stick_weights_matrix(a_mat, closing=False)
                u[j] = rng.uniform(0.0, w[xi_j - 1, np.arange(self.N)])
        return StickState(alpha=alpha, z=zs, theta=thetas, xi=xi, L=Ls, u=u,
                          slice_mode=spec.slice_mode)

    @staticmethod
    def _sample_z(alpha_mat: np.ndarray, xi_j: np.ndarray,
                  rng: np.random.Generator) -> np.ndarray:
        """Latent probit draws consistent with the indicators.

        Sticks below the selected component are negative, the selected one is
        positive (when it is a real stick), and later sticks are free draws.
        """
        n_sticks, n_cells = alpha_mat.shape
        if n_sticks == 0:
            return np.empty((0, n_cells))
        lidx = np.arange(1, n_sticks + 1)[:, None]
        below = lidx < xi_j[None, :]
        at = lidx == xi_j[None, :]
        z = alpha_mat + rng.standard_normal(alpha_mat.shape)
        constrained = below | at
        if constrained.any():
            z[constrained] = truncated_normal(alpha_mat[constrained], at[constrained], rng)
        return z

    # -- individual updates ---------------------------------------------------

    def update_polya_gamma(self, state: ChainState, rng) -> None:
        theta = self.predictor_offset(state) + state.eta @ state.lam.T
        state.omega = pg_sample_array(self.trials, theta, rng)

    def update_factors(self, state: ChainState, rng) -> None:
        k = self.spec.k
        yw, prec = self.working(state)
        _, _, H_inv, _ = self.temporal_ops(state.psi)
        U_inv = np.linalg.inv(state.upsilon)
        P = np.kron(H_inv, U_inv)
        b = np.empty(self.T * k)
        r = yw - self.predictor_offset(state)
        for t in range(self.T):
            wl = prec[t][:, None] * state.lam
            P[t * k:(t + 1) * k, t * k:(t + 1) * k] += state.lam.T @ wl
            b[t * k:(t + 1) * k] = wl.T @ r[t]
        cho = sla.cho_factor(P, lower=True)
        mu = sla.cho_solve(cho, b)
        draw = mu + sla.solve_triangular(cho[0].T, rng.standard_normal(self.T * k),
                                         lower=False)
        state.eta = draw.reshape(self.T, k)

    def update_regression(self, state: ChainState, rng) -> None:
        if self.p == 0:
            return
        yw, prec = self.working(state)
        r = yw - state.eta @ state.lam.T
        A = np.eye(self.p) / self.spec.beta_prior_var
        b = np.zeros(self.p)
        for t in range(self.T):
            Xw = prec[t][:, None] * self.X[t]
            A += self.X[t].T @ Xw
            b += Xw.T @ r[t]
        cho = sla.cho_factor(A, lower=True)
        mu = sla.cho_solve(cho, b)
        state.beta = mu + sla.solve_triangular(cho[0].T, rng.standard_normal(self.p),
                                               lower=False)

    def _column_stats(self, state, yw, prec, offset, j):
        """Per-cell linear and quadratic likelihood terms for loading column j."""
        r = yw - offset - state.eta @ state.lam.T + np.outer(state.eta[:, j], state.lam[:, j])
        A = ((prec * r) * state.eta[:, j][:, None]).sum(axis=0)
        B = (prec * (state.eta[:, j] ** 2)[:, None]).sum(axis=0)
        return A, B

    def update_loadings_block(self, state: ChainState, rng) -> None:
        if self.spec.uses_sticks:
            self._update_sticks(state, rng)
        else:
            self._update_gaussian_loadings(state, rng)

    def _alpha_posterior_cho(self, state):
        """Cholesky of kappa^-1 (x) F^-1 + I, shared by all stick updates."""
        _, F_prec, _, _ = self.spatial_ops(state.rho)
        kinv = np.linalg.inv(state.kappa)
        P = np.kron(kinv, F_prec) + np.eye(self.N)
        return sla.cho_factor(P, lower=True)

    @staticmethod
    def _swap_pass(alpha_j, theta_j, xi_j, rng):
        """Adjacent label-swap Metropolis moves over the stick order.

        Swapping the stick fields and atoms of components (l, l+1) while
        relabeling their cells leaves the prior invariant (rows are
        exchangeable) and multiplies the weight term by (1 - Phi(alpha_{l+1}))
        per cell on l and 1/(1 - Phi(alpha_l)) per cell on l+1.  Heavy
        components drift toward the front, which keeps the active truncation
        small; the latent probit draws are regenerated afterwards.
        """
        n_sticks = alpha_j.shape[0]
        if n_sticks < 2:
            return alpha_j, theta_j, xi_j
        phi = ndtr(alpha_j)
        with np.errstate(divide="ignore"):
            log1m = np.log1p(-np.minimum(phi, 1.0 - 1e-16))
        for l in range(n_sticks - 2, -1, -1):
            on_l = xi_j == l + 1
            on_l1 = xi_j == l + 2
            logr = log1m[l + 1][on_l].sum() - log1m[l][on_l1].sum()
            if math.log(rng.uniform()) < logr:
                alpha_j[[l, l + 1]] = alpha_j[[l + 1, l]]
                log1m[[l, l + 1]] = log1m[[l + 1, l]]
                theta_j[[l, l + 1]] = theta_j[[l + 1, l]]
                xi_j[on_l] = l + 2
                xi_j[on_l1] = l + 1
        return alpha_j, theta_j, xi_j

    def _update_sticks(self, state: ChainState, rng) -> None:
        spec = self.spec
        stick = state.stick
        tau = state.mgp.precisions()
        yw, prec = self.working(state)
        offset = self.predictor_offset(state)
        cho_P = self._alpha_posterior_cho(state)
        cells = np.arange(self.N)
        for j in range(spec.k):
            A, B = self._column_stats(state, yw, prec, offset, j)
            alpha_j, theta_j, xi_vec = self._swap_pass(
                stick.alpha[j], stick.theta[j], stick.xi[j].copy(), rng)
            stick.xi[j] = xi_vec
            if spec.slice_mode:
                w = stick_weights_matrix(alpha_j, closing=False)
                u = rng.uniform(0.0, w[stick.xi[j] - 1, cells])
                u_star = float(u.min())
                # grow stick streams until every cell clears the slice bound
                cum = np.cumsum(w, axis=0)
                while cum[-1].min() <= 1.0 - u_star and alpha_j.shape[0] < _MAX_STICKS:
                    new_a = self._draw_alpha_prior(state.kappa, state.rho, rng)[0]
                    alpha_j = np.vstack([alpha_j, new_a])
                    total = cum[-1] if cum.size else np.zeros(self.N)
                    w_new = ndtr(new_a) * (1.0 - total)
                    w = np.vstack([w, w_new])
                    cum = np.vstack([cum, total + w_new])
                    theta_j = np.append(theta_j, rng.normal(0.0, 1.0 / math.sqrt(tau[j])))
                hit = cum > 1.0 - u_star
                hit[-1] = True  # numerical guard at the cap
                L_star = int((hit.argmax(axis=0) + 1).max())
                alpha_j = alpha_j[:L_star]
                w = w[:L_star]
                theta_j = theta_j[:L_star]
                allowed = w > u[None, :]
                n_comp = L_star
                logw = None
            else:
                n_comp = spec.L
                w_closed = stick_weights_matrix(alpha_j, closing=True)
                with np.errstate(divide="ignore"):
                    logw = np.log(w_closed)
                allowed = None
                u = None
                L_star = spec.L

            # component indicators from likelihood-weighted mixture
            loglik = np.outer(theta_j[:n_comp], A) - 0.5 * np.outer(theta_j[:n_comp] ** 2, B)
            logits = loglik if logw is None else loglik + logw
            if allowed is not None:
                logits = np.where(allowed, logits, -np.inf)
            gumbel = -np.log(-np.log(rng.uniform(size=logits.shape)))
            xi_j = np.argmax(logits + gumbel, axis=0) + 1

            z_j = self._sample_z(alpha_j, xi_j, rng)
            if z_j.shape[0]:
                rhs = z_j.T  # (N, n_sticks)
                mu = sla.cho_solve(cho_P, rhs)
                noise = sla.solve_triangular(cho_P[0].T,
                                             rng.standard_normal(rhs.shape), lower=False)
                alpha_j = (mu + noise).T

            counts_B = np.bincount(xi_j - 1, weights=B, minlength=n_comp)
            sums_A = np.bincount(xi_j - 1, weights=A, minlength=n_comp)
            post_prec = tau[j] + counts_B
            post_mean = sums_A / post_prec
            theta_j = post_mean + rng.standard_normal(n_comp) / np.sqrt(post_prec)

            stick.alpha[j] = alpha_j
            stick.z[j] = z_j
            stick.theta[j] = theta_j
            stick.xi[j] = xi_j
            stick.L[j] = L_star
            state.lam[:, j] = theta_j[xi_j - 1]
            if spec.slice_mode:
                w_now = stick_weights_matrix(alpha_j, closing=False)
                stick.u[j] = rng.uniform(0.0, w_now[xi_j - 1, cells])

    def _update_gaussian_loadings(self, state: ChainState, rng) -> None:
        tau = state.mgp.precisions()
        yw, prec = self.working(state)
        offset = self.predictor_offset(state)
        _, F_prec, _, _ = self.spatial_ops(state.rho)
        kinv = np.linalg.inv(state.kappa)
        K_prec = np.kron(kinv, F_prec)
        for j in range(self.spec.k):
            A, B = self._column_stats(state, yw, prec, offset, j)
            P = tau[j] * K_prec + np.diag(B)
            cho = sla.cho_factor(P, lower=True)
            mu = sla.cho_solve(cho, A)
            state.lam[:, j] = mu + sla.solve_triangular(
                cho[0].T, rng.standard_normal(self.N), lower=False)

    def update_variance_components(self, state: ChainState, rng) -> None:
        spec = self.spec
        if spec.likelihood.family == "gaussian" and "sigma2" not in spec.fixed:
            resid = self.y - self.predictor_offset(state) - state.eta @ state.lam.T
            ssq = ((resid ** 2) * self.obs).sum(axis=0)
            cnt = self.obs.sum(axis=0)
            if spec.pool_sigma2:
                shape = spec.sigma2_a + cnt.sum() / 2.0
                rate = spec.sigma2_b + ssq.sum() / 2.0
                state.sigma2 = np.full(self.N, 1.0 / rng.gamma(shape, 1.0 / rate))
            else:
                shape = spec.sigma2_a + cnt / 2.0
                rate = spec.sigma2_b + ssq / 2.0
                state.sigma2 = 1.0 / rng.gamma(shape, 1.0 / rate)
            if np.any(state.sigma2 <= 0):
                raise NonPositiveScale("sigma2 draw collapsed to zero")
        if "kappa" not in spec.fixed:
            self._update_kappa(state, rng)
        if "upsilon" not in spec.fixed:
            self._update_upsilon(state, rng)
        if "delta" not in spec.fixed:
            self._update_delta(state, rng)

    def _spatial_vectors(self, state) -> tuple[np.ndarray, np.ndarray]:
        """Stick fields (or scaled loading columns) as rows, with their scales."""
        if self.spec.uses_sticks:
            rows = [a for a in state.stick.alpha if a.shape[0]]
            if not rows:
                return np.empty((0, self.N)), np.empty(0)
            V = np.vstack(rows)
            return V, np.ones(V.shape[0])
        tau = state.mgp.precisions()
        return state.lam.T.copy(), tau

    def _update_kappa(self, state: ChainState, rng) -> None:
        V, scales = self._spatial_vectors(state)
        _, F_prec, _, _ = self.spatial_ops(state.rho)
        S = self.kappa_scale.copy()
        for v, s in zip(V, scales):
            Bmat = v.reshape(self.O, self.m).T  # (m, O), location-fastest stacking
            S += s * (Bmat.T @ F_prec @ Bmat)
        df = self.kappa_df + V.shape[0] * self.m
        state.kappa = np.atleast_2d(invwishart.rvs(df, S, random_state=rng))

    def _update_upsilon(self, state: ChainState, rng) -> None:
        _, _, H_inv, _ = self.temporal_ops(state.psi)
        S = self.upsilon_scale + state.eta.T @ H_inv @ state.eta
        df = self.upsilon_df + self.T
        state.upsilon = np.atleast_2d(invwishart.rvs(df, S, random_state=rng))

    def _update_delta(self, state: ChainState, rng) -> None:
        spec = self.spec
        if spec.uses_sticks:
            ssq = np.array([float(t @ t) for t in state.stick.theta])
            n_atoms = np.array([t.size for t in state.stick.theta], dtype=float)
        else:
            _, F_prec, _, _ = self.spatial_ops(state.rho)
            kinv = np.linalg.inv(state.kappa)
            K_prec = np.kron(kinv, F_prec)
            ssq = np.einsum("nj,nm,mj->j", state.lam, K_prec, state.lam)
            n_atoms = np.full(spec.k, float(self.N))
        delta = state.mgp.delta
        if state.mgp.multiplicative:
            for h in range(spec.k):
                tau = np.cumprod(delta)
                shape = (spec.a1 if h == 0 else spec.a2) + 0.5 * n_atoms[h:].sum()
                tau_wo = tau[h:] / delta[h]
                rate = 1.0 + 0.5 * float(tau_wo @ ssq[h:])
                delta[h] = rng.gamma(shape, 1.0 / rate)
        else:
            shape = spec.a1 + 0.5 * n_atoms
            rate = spec.a2 + 0.5 * ssq
            state.mgp.delta = rng.gamma(shape, 1.0 / rate)

    # -- correlation parameters (random-walk Metropolis) -------------------------

    def _rho_logtarget(self, state, rho) -> float:
        V, scales = self._spatial_vectors(state)
        if V.shape[0] == 0:
            return 0.0
        _, F_prec, _, logdet_F = self.spatial_ops(rho)
        kinv = np.linalg.inv(state.kappa)
        quad = 0.0
        for v, s in zip(V, scales):
            Bmat = v.reshape(self.O, self.m).T
            quad += s * float(np.sum((Bmat.T @ F_prec @ Bmat) * kinv))
        return -0.5 * V.shape[0] * self.O * logdet_F - 0.5 * quad

    def _psi_logtarget(self, state, psi) -> float:
        _, _, H_inv, logdet_H = self.temporal_ops(psi)
        U_inv = np.linalg.inv(state.upsilon)
        quad = float(np.sum((state.eta.T @ H_inv @ state.eta) * U_inv))
        lp = -0.5 * self.spec.k * logdet_H - 0.5 * quad
        if self.spec.temporal_kernel == "ar1":
            g, b = self.spec.psi_beta_shapes
            lp += (g - 1.0) * math.log1p(psi) + (b - 1.0) * math.log1p(-psi)
        return lp

    @staticmethod
    def _logit_step(value, lo, hi, scale, rng):
        """Random-walk step on logit((value-lo)/(hi-lo)); returns proposal and
        the log proposal-Jacobian correction."""

        def softplus(v):
            return max(v, 0.0) + math.log1p(math.exp(-abs(v)))

        x = math.log(value - lo) - math.log(hi - value)
        x_new = min(max(x + scale * rng.standard_normal(), -700.0), 700.0)
        v_new = lo + (hi - lo) / (1.0 + math.exp(-x_new))
        v_new = min(max(v_new, np.nextafter(lo, hi)), np.nextafter(hi, lo))
        # d v / d x = (hi-lo) sigmoid(x)(1 - sigmoid(x))
        log_jac = (softplus(x) + softplus(-x)) - (softplus(x_new) + softplus(-x_new))
        return v_new, log_jac

    def update_correlation_parameters(self, state: ChainState, rng) -> None:
        spec = self.spec
        if (spec.spatial_loadings and spec.rho_prior == "uniform"
                and "rho" not in spec.fixed):
            lo, hi = spec.rho_bounds
            prop, log_jac = self._logit_step(state.rho, lo, hi, self.rho_scale, rng)
            cur_cache = self._f_cache
            logr = self._rho_logtarget(state, prop) - self._rho_logtarget(state, state.rho) \
                + log_jac
            self._accept["rho"][1] += 1
            if math.log(rng.uniform()) < logr:
                state.rho = prop
                self.spatial_ops(prop)
                self._accept["rho"][0] += 1
            else:
                self._f_cache = cur_cache
        if spec.psi is None and "psi" not in spec.fixed:
            lo, hi = self.psi_range
            prop, log_jac = self._logit_step(state.psi, lo, hi, self.psi_scale, rng)
            cur_cache = self._h_cache
            logr = self._psi_logtarget(state, prop) - self._psi_logtarget(state, state.psi) \
                + log_jac
            self._accept["psi"][1] += 1
            if math.log(rng.uniform()) < logr:
                state.psi = prop
                self.temporal_ops(prop)
                self._accept["psi"][0] += 1
            else:
                self._h_cache = cur_cache

    def adapt_proposals(self) -> None:
        """Retune the random-walk scales toward the 20-60% acceptance window."""
        for name in ("rho", "psi"):
            acc, tot = self._accept[name]
            if tot >= 25:
                rate = acc / tot
                factor = math.exp(rate - 0.4)
                if name == "rho":
                    self.rho_scale = float(np.clip(self.rho_scale * factor, 0.01, 10.0))
                else:
                    self.psi_scale = float(np.clip(self.psi_scale * factor, 0.01, 10.0))
                self._accept[name] = [0, 0]

    # -- sweep and chain --------------------------------------------------------

    def sweep(self, state: ChainState, rng: np.random.Generator) -> None:
        spec = self.spec
        if spec.likelihood.family == "binomial" and "omega" not in spec.fixed:
            self.update_polya_gamma(state, rng)
        if "loadings" not in spec.fixed:
            self.update_loadings_block(state, rng)
        if "eta" not in spec.fixed:
            self.update_factors(state, rng)
        if "beta" not in spec.fixed:
            self.update_regression(state, rng)
        self.update_variance_components(state, rng)
        self.update_correlation_parameters(state, rng)

    def log_likelihood_cells(self, state: ChainState) -> np.ndarray:
        """Per observed cell log density at the current state, in obs_index order."""
        theta = self.predictor_offset(state) + state.eta @ state.lam.T
        if self.spec.likelihood.family == "gaussian":
            ll = -0.5 * np.log(2.0 * np.pi * state.sigma2)[None, :] \
                - 0.5 * (self.y - theta) ** 2 / state.sigma2[None, :]
        else:
            ll = binomial_log_pmf(self.y, self.trials, theta)
        return ll[self.obs]

    def obs_index(self) -> np.ndarray:
        tt, cc = np.nonzero(self.obs)
        return np.column_stack([tt, cc])

    def regenerate_data(self, state: ChainState, rng: np.random.Generator) -> None:
        """Replace the observed data with a draw from the likelihood at `state`
        (successive-conditional testing)."""
        theta = self.predictor_offset(state) + state.eta @ state.lam.T
        if self.spec.likelihood.family == "gaussian":
            self.y = theta + rng.standard_normal(theta.shape) * np.sqrt(state.sigma2)[None, :]
            self.y = np.where(self.obs, self.y, 0.0)
        else:
            pi = 1.0 / (1.0 + np.exp(-theta))
            self.y = rng.binomial(self.trials.astype(int), pi).astype(float)

    def run(self, n_iter: int, burn_in: int = 0, thin: int = 1, seed: int = 0,
            init: ChainState | None = None, chain_id: int = 0,
            record_loglik: bool = True, loglik_dir=None) -> PosteriorDraws:
        if not (n_iter > burn_in >= 0 and thin >= 1):
            raise ValueError("need n_iter > burn_in >= 0 and thin >= 1")
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        state = init.copy() if init is not None else self.init_state(rng)
        spec = self.spec
        n_keep = (n_iter - burn_in) // thin
        obs_index = self.obs_index()
        n_obs = obs_index.shape[0]
        if record_loglik:
            if n_obs * n_keep > 10_000_000:
                tmp = tempfile.NamedTemporaryFile(suffix=".ll", dir=loglik_dir,
                                                  delete=False)
                loglik = np.memmap(tmp.name, dtype=float, mode="w+",
                                   shape=(n_obs, n_keep))
            else:
                loglik = np.empty((n_obs, n_keep))
        else:
            loglik = np.empty((n_obs, 0))

        keep = _DrawBuffer(self, n_keep)
        kept = 0
        for it in range(1, n_iter + 1):
            self.sweep(state, rng)
            if it <= burn_in and it % 50 == 0:
                self.adapt_proposals()
            if it > burn_in and (it - burn_in) % thin == 0:
                if record_loglik:
                    loglik[:, kept] = self.log_likelihood_cells(state)
                keep.add(state, it, kept)
                kept += 1
        acc = {}
        for name, (a, t) in self._accept.items():
            if t:
                acc[name] = a / t
        self.last_state = state
        return keep.finish(chain_id, loglik, obs_index, acc)


class _DrawBuffer:
    """Accumulates retained states into the padded PosteriorDraws arrays."""

    def __init__(self, sampler: GibbsSampler, n_keep: int):
        self.sampler = sampler
        spec = sampler.spec
        k, N, T, p = spec.k, sampler.N, sampler.T, sampler.p
        self.iteration = np.zeros(n_keep, dtype=int)
        self.beta = np.zeros((n_keep, p))
        self.eta = np.zeros((n_keep, T, k))
        self.lam = np.zeros((n_keep, N, k))
        self.sigma2 = np.zeros((n_keep, N))
        self.kappa = np.zeros((n_keep, sampler.O, sampler.O))
        self.upsilon = np.zeros((n_keep, k, k))
        self.delta = np.zeros((n_keep, k))
        self.rho = np.zeros(n_keep)
        self.psi = np.zeros(n_keep)
        self.xi = np.zeros((n_keep, k, N), dtype=int)
        self.weights: list[list[np.ndarray]] = [[] for _ in range(k)] \
            if spec.uses_sticks else []

    def add(self, state: ChainState, it: int, s: int) -> None:
        spec = self.sampler.spec
        self.iteration[s] = it
        self.beta[s] = state.beta
        self.eta[s] = state.eta
        self.lam[s] = state.lam
        if state.sigma2 is not None:
            self.sigma2[s] = state.sigma2
        self.kappa[s] = state.kappa
        self.upsilon[s] = state.upsilon
        self.delta[s] = state.mgp.delta
        self.rho[s] = state.rho
        self.psi[s] = state.psi
        if spec.uses_sticks:
            self.xi[s] = state.stick.xi
            for j in range(spec.k):
                w = stick_weights_matrix(state.stick.alpha[j], closing=True)
                if not state.stick.slice_mode:
                    pass
                self.weights[j].append(w.T.copy())  # (N, L_draw)

    def finish(self, chain_id, loglik, obs_index, acceptance) -> PosteriorDraws:
        sampler = self.sampler
        spec = sampler.spec
        n_keep = self.rho.size
        padded = []
        if spec.uses_sticks:
            for j in range(spec.k):
                lmax = max(w.shape[1] for w in self.weights[j])
                arr = np.zeros((n_keep, sampler.N, lmax))
                for s, w in enumerate(self.weights[j]):
                    arr[s, :, :w.shape[1]] = w
                padded.append(arr)
        return PosteriorDraws(
            family=spec.likelihood.family, loadings_prior=spec.loadings_prior,
            temporal_kernel=spec.temporal_kernel, times=sampler.times,
            m=sampler.m, O=sampler.O, k=spec.k, p=sampler.p,
            iteration=self.iteration,
            chain=np.full(n_keep, chain_id, dtype=int),
            beta=self.beta, eta=self.eta, lam=self.lam, sigma2=self.sigma2,
            kappa=self.kappa, upsilon=self.upsilon, delta=self.delta,
            rho=self.rho, psi=self.psi, xi=self.xi, weights=padded,
            loglik=loglik, obs_index=obs_index, acceptance=acceptance,
            last_trials=None if sampler.trials is None else sampler.trials[-1].copy())


# -- module-level API ----------------------------------------------------------


def init_state(spec: ModelSpec, data: ObservationSet,
               rng: np.random.Generator) -> ChainState:
    return GibbsSampler(spec, data).init_state(rng)


def gibbs_sweep(state: ChainState, spec: ModelSpec, data: ObservationSet,
                rng: np.random.Generator) -> ChainState:
    GibbsSampler(spec, data).sweep(state, rng)
    return state


def run_chain(spec: ModelSpec, data: ObservationSet, n_iter: int,
              burn_in: int = 0, thin: int = 1, seed: int = 0,
              init: ChainState | None = None,
              record_loglik: bool = True) -> PosteriorDraws:
    """Run one chain and return the retained draws.

    Retains every `thin`-th post-burn-in state and the per-cell log-likelihood
    matrix needed for WAIC.
    """
    return GibbsSampler(spec, data).run(n_iter, burn_in, thin, seed, init=init,
                                        record_loglik=record_loglik)


def run_chains(spec: ModelSpec, data: ObservationSet, n_iter: int,
               burn_in: int, thin: int, seed: int, chains: int = 1,
               threads: int = 1, init: ChainState | None = None,
               return_final: bool = False):
    """Run several chains with independent substreams and merge the draws.

    With return_final, also hand back chain 0's final state (checkpointing).
    """
    from .storage import merge_draws

    seeds = [int(s.generate_state(1)[0]) for s in
             np.random.SeedSequence(seed).spawn(chains)]
    if threads > 1 and chains > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(threads, chains)) as pool:
            futures = [pool.submit(_run_one, spec, data, n_iter, burn_in, thin,
                                   s, c, init) for c, s in enumerate(seeds)]
            results = [f.result() for f in futures]
    else:
        results = [_run_one(spec, data, n_iter, burn_in, thin, s, c, init)
                   for c, s in enumerate(seeds)]
    merged = merge_draws([draws for draws, _ in results])
    if return_final:
        return merged, results[0][1]
    return merged


def _run_one(spec, data, n_iter, burn_in, thin, seed, chain_id, init=None):
    sampler = GibbsSampler(spec, data)
    draws = sampler.run(n_iter, burn_in, thin, seed, init=init,
                        chain_id=chain_id)
    return draws, sampler.last_state


# -- checkpointing ---------------------------------------------------------------


def save_checkpoint(path, state: ChainState, rng: np.random.Generator | None = None,
                    sweep_index: int = 0) -> None:
    """Binary-stable ChainState serialization with a format-version header."""
    from .storage import save_state_blob

    meta = {
        "kind": "checkpoint",
        "sweep_index": sweep_index,
        "rho": state.rho, "psi": state.psi,
        "mgp_a1": state.mgp.a1, "mgp_a2": state.mgp.a2,
        "mgp_multiplicative": state.mgp.multiplicative,
        "has_stick": state.stick is not None,
        "slice_mode": bool(state.stick.slice_mode) if state.stick else False,
        "has_sigma2": state.sigma2 is not None,
        "has_omega": state.omega is not None,
        "rng_state": None if rng is None else rng.bit_generator.state,
    }
    arrays = {"beta": state.beta, "eta": state.eta, "lam": state.lam,
              "kappa": state.kappa, "upsilon": state.upsilon,
              "delta": state.mgp.delta}
    if state.sigma2 is not None:
        arrays["sigma2"] = state.sigma2
    if state.omega is not None:
        arrays["omega"] = state.omega
    if state.stick is not None:
        meta["k"] = state.stick.k
        arrays["xi"] = state.stick.xi
        arrays["L"] = state.stick.L
        if state.stick.u is not None:
            arrays["u"] = state.stick.u
        for j in range(state.stick.k):
            arrays[f"alpha_{j}"] = state.stick.alpha[j]
            arrays[f"z_{j}"] = state.stick.z[j]
            arrays[f"theta_{j}"] = state.stick.theta[j]
    save_state_blob(path, meta, arrays)


def load_checkpoint(path) -> tuple[ChainState, dict]:
    from .storage import load_state_blob

    meta, arrays = load_state_blob(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError("container does not hold a checkpoint")
    stick = None
    if meta["has_stick"]:
        k = meta["k"]
        stick = StickState(
            alpha=[arrays[f"alpha_{j}"] for j in range(k)],
            z=[arrays[f"z_{j}"] for j in range(k)],
            theta=[arrays[f"theta_{j}"] for j in range(k)],
            xi=arrays["xi"], L=arrays["L"],
            u=arrays.get("u"), slice_mode=meta["slice_mode"])
    state = ChainState(
        beta=arrays["beta"], eta=arrays["eta"], lam=arrays["lam"], stick=stick,
        mgp=MgpState(arrays["delta"], meta["mgp_a1"], meta["mgp_a2"],
                     meta["mgp_multiplicative"]),
        kappa=arrays["kappa"], rho=meta["rho"], psi=meta["psi"],
        upsilon=arrays["upsilon"],
        sigma2=arrays.get("sigma2"), omega=arrays.get("omega"))
    return state, meta


def assert_stick_consistency(state: ChainState) -> None:
    """Debug invariant: z signs match xi; slice u sits below its own weight;
    closing-rule weights sum to one."""
    stick = state.stick
    if stick is None:
        return
    cells = np.arange(stick.n_cells)
    for j in range(stick.k):
        w = stick_weights_matrix(stick.alpha[j], closing=not stick.slice_mode)
        total = w.sum(axis=0)
        if stick.slice_mode:
            leftover = 1.0 - total
            assert np.all(total <= 1.0 + 1e-12)
            assert stick.u is not None
            w_xi = w[stick.xi[j] - 1, cells]
            assert np.all(stick.u[j] > 0) and np.all(stick.u[j] < w_xi)
        else:
            assert np.max(np.abs(total - 1.0)) <= 1e-12
        z = stick.z[j]
        if z.shape[0] == 0:
            continue
        lidx = np.arange(1, z.shape[0] + 1)[:, None]
        below = lidx < stick.xi[j][None, :]
        at = lidx == stick.xi[j][None, :]
        assert np.all(z[below] < 0)
        assert np.all(z[at] > 0)
