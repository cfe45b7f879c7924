"""Residual maximum likelihood for variance components.

The covariance model is

    Sigma(sigma) = sigma_1^2 Z_1 Z_1' + ... + sigma_s^2 Z_s Z_s' + sigma^2 I,

and the restricted log-likelihood after projecting out a fixed-effects
model X_g (the full treatment matrix for pure-error REML, the
polynomial matrix for response-surface REML) is evaluated in a form
invariant to the choice of error-contrast basis:

    l_R = -1/2 [ (n-p) log 2pi + log|Sigma| + log|X_g' Sigma^-1 X_g|
                 - log|X_g' X_g| + y' C y ],

    C = Sigma^-1 - Sigma^-1 X_g (X_g' Sigma^-1 X_g)^-1 X_g' Sigma^-1.

Maximization is by Fisher scoring on log-variance coordinates with
step halving, a Nelder-Mead fallback, and exact-zero clamping of
components that collapse against the boundary.  When all Z_j Z_j'
commute (balanced nested structures) the problem is rotated once into
their joint eigenbasis, which makes Sigma diagonal and every criterion
evaluation O(n p^2); otherwise a dense Cholesky path is used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize

from .design import matrix_rank
from .errors import (
    ConvergenceError,
    IdentificationError,
    NonPositiveDefiniteError,
    RankDeficientError,
)

LOG2PI = math.log(2.0 * math.pi)

# tag values used by the higher-level fitting entry points
PE_TAG = "pe-reml"
RS_TAG = "rs-reml"


@dataclass
class RemlOptions:
    """Optimizer settings for ``fit_reml``.

    Scoring runs on log-variance coordinates; a component whose value
    falls below ``boundary_ratio`` times the current residual variance
    is clamped to exactly zero and the remaining components are refit.
    """

    max_iter: int = 200
    criterion_tol: float = 1e-10
    param_tol: float = 1e-8
    gradient_tol: float = 1e-6
    boundary_ratio: float = 1e-10
    scoring_fail_limit: int = 5
    step_halvings: int = 40
    multi_start: bool = False
    n_starts: int = 3
    start_floor_ratio: float = 1e-3


@dataclass
class VarianceEstimate:
    """REML variance component estimates and their estimated covariance.

    ``sigma`` is ordered [sigma_1^2, ..., sigma_s^2, sigma^2];
    ``u_matrix`` is the inverse of the expected information over the
    interior (non-boundary) components, with zero rows/columns for
    components clamped at the boundary.
    """

    sigma: np.ndarray
    u_matrix: np.ndarray
    boundary_flags: np.ndarray
    reml_loglik: float
    fixed_model_tag: str
    residual_df: int
    n_iterations: int
    gradient_norm: float
    converged: bool

    @property
    def gamma(self):
        """Variance ratios sigma_j^2 / sigma^2."""
        return self.sigma[:-1] / self.sigma[-1]


class StratumStructure:
    """Random-effects structure with a spectral fast path when available."""

    def __init__(self, Z, n=None):
        self.Z = [np.asarray(Zj, dtype=float) for Zj in Z]
        if self.Z:
            n = self.Z[0].shape[0]
        elif n is None:
            raise ValueError("n is required when there are no blocking strata")
        self.n = n
        self.s = len(self.Z)
        for Zj in self.Z:
            if Zj.shape[0] != n:
                raise ValueError("all Z matrices must have n rows")
        self.M = [Zj @ Zj.T for Zj in self.Z]
        self.unit_index = [np.argmax(Zj, axis=1) for Zj in self.Z]
        self.unit_counts = [Zj.sum(axis=0) for Zj in self.Z]
        self.basis, self.eigvals = self._diagonalize()

    def _diagonalize(self):
        """Joint eigenbasis of the Z_j Z_j', or (None, None) if they don't commute."""
        n, s = self.n, self.s
        if s == 0:
            return np.eye(0), np.ones((n, 1))  # basis unused; weights are sigma^2
        rng = np.random.default_rng(0)
        weights = rng.uniform(1.0, 2.0, size=s)
        S = sum(w * M for w, M in zip(weights, self.M))
        _, Q = np.linalg.eigh(S)
        cols = []
        for M in self.M:
            A = Q.T @ M @ Q
            d = np.diag(A).copy()
            off = A - np.diag(d)
            if np.abs(off).max() > 1e-8 * max(1.0, np.abs(d).max()):
                return None, None
            cols.append(np.clip(d, 0.0, None))
        D = np.column_stack(cols + [np.ones(n)])
        return Q, D

    @property
    def spectral(self):
        return self.eigvals is not None

    def sigma_matrix(self, sigma):
        """Dense Sigma(sigma)."""
        sigma = np.asarray(sigma, dtype=float)
        out = sigma[-1] * np.eye(self.n)
        for s2, M in zip(sigma[:-1], self.M):
            out += s2 * M
        return out


class RemlContext:
    """Precomputed quantities for repeatedly fitting one (X_g, Z) pair.

    Construct once per design and model, then call ``fit`` per response
    vector; the simulation harness relies on this reuse.
    """

    def __init__(self, X_g, Z, tag="custom", structure=None):
        X = np.asarray(X_g, dtype=float)
        if X.ndim != 2:
            raise ValueError("X_g must be a 2-d matrix")
        self.n, self.p = X.shape
        if matrix_rank(X) < self.p:
            raise RankDeficientError(
                f"fixed-effects matrix has rank < {self.p} columns"
            )
        self.tag = tag
        self.structure = structure if structure is not None else StratumStructure(Z, self.n)
        if self.structure.n != self.n:
            raise ValueError("X_g and Z row counts differ")
        self.s = self.structure.s
        self.residual_df = self.n - self.p
        if self.residual_df < 1:
            raise RankDeficientError("no residual degrees of freedom after X_g")
        self.X = X
        sign, logdet = np.linalg.slogdet(X.T @ X)
        self.logdet_xtx = logdet
        # thin QR for OLS residuals (method-of-moments starting values)
        self.q1 = np.linalg.qr(X, mode="reduced")[0]
        if self.structure.spectral and self.s > 0:
            self.Xr = self.structure.basis.T @ X
        else:
            self.Xr = X  # s == 0 or dense path

    # -- response handling ------------------------------------------------

    def rotate(self, y):
        y = np.asarray(y, dtype=float).ravel()
        if len(y) != self.n:
            raise ValueError("response length does not match the design")
        if self.structure.spectral and self.s > 0:
            return self.structure.basis.T @ y
        return y

    def ols_residual(self, y):
        return y - self.q1 @ (self.q1.T @ y)

    # -- criterion, score and information ---------------------------------

    def _weights(self, sigma):
        w = self.structure.eigvals @ sigma
        if w.min() <= 0.0:
            raise NonPositiveDefiniteError(
                "Sigma(sigma) is not positive definite at this sigma"
            )
        return w

    def criterion(self, sigma, yr):
        """Restricted log-likelihood at sigma for a rotated response."""
        sigma = np.asarray(sigma, dtype=float)
        if self.structure.spectral:
            w = self._weights(sigma)
            sw = np.sqrt(w)
            U = self.Xr / sw[:, None]
            G = U.T @ U
            try:
                cG = cho_factor(G, lower=True)
            except np.linalg.LinAlgError as exc:
                raise RankDeficientError(
                    "X_g is rank deficient under the Sigma inner product"
                ) from exc
            yw = yr / sw
            b = U.T @ yw
            ycy = yw @ yw - b @ cho_solve(cG, b)
            logdet = np.log(w).sum() + 2.0 * np.log(np.diag(cG[0])).sum()
        else:
            logdet, ycy = self._dense_parts(sigma, yr)[:2]
        return -0.5 * (
            self.residual_df * LOG2PI + logdet - self.logdet_xtx + ycy
        )

    def _dense_parts(self, sigma, yr, need_score=False):
        st = self.structure
        Sig = st.sigma_matrix(sigma)
        try:
            cS = cho_factor(Sig, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NonPositiveDefiniteError(
                "Sigma(sigma) is not positive definite at this sigma"
            ) from exc
        Xl = solve_triangular(cS[0], self.X, lower=True)
        yl = solve_triangular(cS[0], yr, lower=True)
        G = Xl.T @ Xl
        try:
            cG = cho_factor(G, lower=True)
        except np.linalg.LinAlgError as exc:
            raise RankDeficientError(
                "X_g is rank deficient under the Sigma inner product"
            ) from exc
        b = Xl.T @ yl
        ycy = yl @ yl - b @ cho_solve(cG, b)
        logdet = 2.0 * np.log(np.diag(cS[0])).sum() + 2.0 * np.log(np.diag(cG[0])).sum()
        if not need_score:
            return logdet, ycy
        Si = cho_solve(cS, np.eye(self.n))
        B = Si @ self.X
        C = Si - B @ cho_solve(cG, B.T)
        C = 0.5 * (C + C.T)
        v = C @ yr
        m = self.s + 1
        tr = np.empty(m)
        quad = np.empty(m)
        for j in range(self.s):
            Zj = st.Z[j]
            tr[j] = np.sum((Zj.T @ C) * Zj.T)
            quad[j] = np.sum((Zj.T @ v) ** 2)
        tr[self.s] = np.trace(C)
        quad[self.s] = v @ v
        info = np.empty((m, m))
        CZ = [C @ st.Z[j] for j in range(self.s)]
        for i in range(self.s):
            for j in range(i, self.s):
                W = st.Z[i].T @ CZ[j]
                W2 = st.Z[j].T @ CZ[i]
                info[i, j] = info[j, i] = 0.5 * np.sum(W * W2.T)
            info[i, self.s] = info[self.s, i] = 0.5 * np.sum(CZ[i] * CZ[i])
        info[self.s, self.s] = 0.5 * np.sum(C * C)
        return logdet, ycy, tr, quad, info

    def score(self, sigma, yr):
        """Criterion value, gradient and expected information at sigma.

        Gradient and information are with respect to the natural
        variance coordinates, over all s+1 components.
        """
        sigma = np.asarray(sigma, dtype=float)
        if self.structure.spectral:
            D = self.structure.eigvals
            w = self._weights(sigma)
            sw = np.sqrt(w)
            U = self.Xr / sw[:, None]
            G = U.T @ U
            try:
                cG = cho_factor(G, lower=True)
            except np.linalg.LinAlgError as exc:
                raise RankDeficientError(
                    "X_g is rank deficient under the Sigma inner product"
                ) from exc
            yw = yr / sw
            b = U.T @ yw
            ycy = yw @ yw - b @ cho_solve(cG, b)
            logdet = np.log(w).sum() + 2.0 * np.log(np.diag(cG[0])).sum()
            H = U @ cho_solve(cG, U.T)
            E = (np.eye(self.n) - H) / np.outer(sw, sw)  # C in the eigenbasis
            v = E @ yr
            tr = D.T @ np.diag(E)
            quad = D.T @ (v * v)
            info = 0.5 * (D.T @ (E * E) @ D)
        else:
            logdet, ycy, tr, quad, info = self._dense_parts(sigma, yr, need_score=True)
        crit = -0.5 * (self.residual_df * LOG2PI + logdet - self.logdet_xtx + ycy)
        grad = -0.5 * (tr - quad)
        return crit, grad, info

    def fisher_info(self, sigma):
        """Expected information over all s+1 components at sigma."""
        yr = np.zeros(self.n)
        return self.score(np.asarray(sigma, dtype=float), yr)[2]

    # -- starting values ---------------------------------------------------

    def _start_values(self, y, floor_ratio):
        e = self.ols_residual(y)
        v_tot = float(e @ e) / max(self.residual_df, 1)
        scale = max(v_tot, 1e-12 * (float(y @ y) / self.n + 1.0))
        floor = floor_ratio * scale
        start = np.empty(self.s + 1)
        st = self.structure
        for j in range(self.s):
            means = np.bincount(
                st.unit_index[j], weights=e, minlength=len(st.unit_counts[j])
            ) / st.unit_counts[j]
            bj = float(np.sum(st.unit_counts[j] * means**2)) / len(st.unit_counts[j])
            mbar = self.n / len(st.unit_counts[j])
            start[j] = max((bj - v_tot) / mbar, floor)
        start[self.s] = max(v_tot, floor)
        return start

    # -- maximization ------------------------------------------------------

    def fit(self, y, options=None):
        """Maximize the restricted likelihood over the nonnegative orthant."""
        opts = options or RemlOptions()
        y = np.asarray(y, dtype=float).ravel()
        yr = self.rotate(y)
        start = self._start_values(y, opts.start_floor_ratio)
        starts = [start]
        if opts.multi_start:
            rng = np.random.default_rng(0)
            for _ in range(opts.n_starts - 1):
                starts.append(start * np.exp(rng.uniform(-1.5, 1.5, size=len(start))))

        best = None
        for s0 in starts:
            est = self._fit_from(yr, s0, opts)
            if best is None or est.reml_loglik > best.reml_loglik:
                best = est
        return best

    def _fit_from(self, yr, start, opts):
        m = self.s + 1
        active = list(range(m))
        sigma = np.asarray(start, dtype=float).copy()
        clamped = np.zeros(m, dtype=bool)
        total_iter = 0
        while True:
            sigma, crit, iters, to_clamp = self._maximize_active(yr, sigma, active, opts)
            total_iter += iters
            if not to_clamp:
                break
            for j in to_clamp:
                sigma[j] = 0.0
                clamped[j] = True
                active.remove(j)

        crit, grad, info = self.score(sigma, yr)
        gnorm = float(np.linalg.norm(grad[active]))
        # Line-search-gated scoring stalls once the remaining criterion
        # improvement drops below evaluation noise; ungated Newton steps
        # are locally contractive and drive the gradient itself down.
        # Triggered well below the certificate so interior optima are
        # resolved to full parameter accuracy, not just to the certificate.
        if gnorm > 1e-3 * opts.gradient_tol * (abs(crit) + 1.0):
            sigma, crit, grad, gnorm, extra = self._newton_polish(
                yr, sigma, active, crit, grad, info
            )
            total_iter += extra
            info = self.score(sigma, yr)[2]
        if gnorm > opts.gradient_tol * (abs(crit) + 1.0):
            raise ConvergenceError(
                f"gradient norm {gnorm:.3e} exceeds tolerance at the reported "
                f"optimum (criterion {crit:.6f})",
                sigma=sigma,
                gradient_norm=gnorm,
                n_iterations=total_iter,
            )
        u_act = _invert_information(info[np.ix_(active, active)])
        u = np.zeros((m, m))
        u[np.ix_(active, active)] = u_act
        return VarianceEstimate(
            sigma=sigma,
            u_matrix=u,
            boundary_flags=clamped,
            reml_loglik=crit,
            fixed_model_tag=self.tag,
            residual_df=self.residual_df,
            n_iterations=total_iter,
            gradient_norm=gnorm,
            converged=True,
        )

    def _newton_polish(self, yr, sigma, active, crit, grad, info, max_steps=12):
        """Scoring steps gated on the gradient norm, not the criterion."""
        theta = np.log(sigma[active])
        best = (float(np.linalg.norm(grad[active])), theta.copy(), crit, grad)
        worse = 0
        for step_no in range(1, max_steps + 1):
            x = np.exp(theta)
            g = grad[active] * x
            imat = info[np.ix_(active, active)] * np.outer(x, x)
            try:
                step = cho_solve(cho_factor(imat, lower=True), g)
            except np.linalg.LinAlgError:
                break
            nrm = np.abs(step).max()
            if nrm > 0.5:
                step = step * (0.5 / nrm)
            theta = theta + step
            s = sigma.copy()
            s[active] = np.exp(theta)
            crit, grad, info = self.score(s, yr)
            gnorm = float(np.linalg.norm(grad[active]))
            if gnorm < best[0]:
                best = (gnorm, theta.copy(), crit, grad)
                worse = 0
            else:
                worse += 1
                if worse >= 3:
                    break
        gnorm, theta, crit, grad = best
        out = sigma.copy()
        out[active] = np.exp(theta)
        return out, crit, grad, gnorm, step_no

    def _maximize_active(self, yr, sigma, active, opts):
        """Fisher scoring over the active components; returns a clamp request."""
        m = self.s + 1
        sigma = sigma.copy()
        theta = np.log(sigma[active])

        def assemble(th):
            s = sigma.copy()
            s[active] = np.exp(th)
            return s

        f = self.criterion(assemble(theta), yr)
        fails = 0
        nm_used = 0
        for it in range(1, opts.max_iter + 1):
            crit, grad, info = self.score(assemble(theta), yr)
            x = np.exp(theta)
            g = grad[active] * x
            imat = info[np.ix_(active, active)] * np.outer(x, x)
            try:
                step = cho_solve(cho_factor(imat, lower=True), g)
            except np.linalg.LinAlgError:
                if it == 1:
                    raise IdentificationError(
                        "information matrix is singular at the starting values"
                    ) from None
                step = np.linalg.lstsq(imat, g, rcond=None)[0]
            nrm = np.abs(step).max()
            if nrm > 20.0:
                step = step * (20.0 / nrm)

            alpha, accepted = 1.0, False
            theta_new, f_new = theta, f
            for _ in range(opts.step_halvings):
                cand = theta + alpha * step
                try:
                    f_cand = self.criterion(assemble(cand), yr)
                except NonPositiveDefiniteError:
                    f_cand = -np.inf
                if f_cand >= f:
                    theta_new, f_new, accepted = cand, f_cand, True
                    break
                alpha *= 0.5

            if accepted:
                d_theta = np.abs(theta_new - theta).max()
                d_f = f_new - f
                theta, f = theta_new, f_new
                fails = 0 if d_f > 0 else fails + 1
                # boundary clamp: component collapsed relative to residual scale
                sig_now = assemble(theta)
                resid = sig_now[m - 1]
                to_clamp = [
                    j
                    for pos, j in enumerate(active)
                    if j != m - 1 and sig_now[j] < opts.boundary_ratio * resid
                ]
                if to_clamp:
                    return sig_now, f, it, to_clamp
                if d_f <= opts.criterion_tol * (abs(f) + 1.0) and d_theta <= opts.param_tol:
                    return sig_now, f, it, []
            else:
                fails += 1

            if fails >= opts.scoring_fail_limit:
                if nm_used >= 2:
                    break
                nm_used += 1
                fails = 0
                res = minimize(
                    lambda th: -self._safe_criterion(assemble(th), yr),
                    theta,
                    method="Nelder-Mead",
                    options={
                        "xatol": 1e-10,
                        "fatol": 1e-12,
                        "maxiter": 4000,
                        "maxfev": 4000,
                    },
                )
                if -res.fun > f:
                    theta = res.x
                    f = -res.fun
                sig_now = assemble(theta)
                resid = sig_now[m - 1]
                to_clamp = [
                    j
                    for j in active
                    if j != m - 1 and sig_now[j] < opts.boundary_ratio * resid
                ]
                if to_clamp:
                    return sig_now, f, it, to_clamp

        sig_now = assemble(theta)
        _, grad, _ = self.score(sig_now, yr)
        gnorm = float(np.linalg.norm(grad[active]))
        if gnorm <= opts.gradient_tol * (abs(f) + 1.0):
            return sig_now, f, it, []
        raise ConvergenceError(
            f"no convergence after {it} iterations; last criterion {f:.6f}, "
            f"gradient norm {gnorm:.3e}",
            sigma=sig_now,
            gradient_norm=gnorm,
            n_iterations=it,
        )

    def _safe_criterion(self, sigma, yr):
        try:
            return self.criterion(sigma, yr)
        except NonPositiveDefiniteError:
            return -np.inf


# -- public operations -----------------------------------------------------


def reml_criterion(sigma, X_g, Z, y):
    """Restricted log-likelihood of y at a candidate variance vector.

    The value is invariant to the choice of error-contrast basis and to
    translations of y inside the column space of X_g.

    Args:
        sigma: candidate [sigma_1^2, ..., sigma_s^2, sigma^2], all > 0.
        X_g: fixed-effects matrix that is projected out.
        Z: list of stratum membership matrices (may be empty).
        y: response vector.
    """
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0.0):
        raise NonPositiveDefiniteError(
            "reml_criterion is defined on the interior: sigma must be > 0"
        )
    ctx = RemlContext(X_g, Z)
    return ctx.criterion(sigma, ctx.rotate(y))


def fit_reml(X_g, Z, y, options=None, tag="custom"):
    """REML variance component estimates for the model projected out by X_g.

    Use ``X_g = X_t`` (full treatment matrix) for pure-error REML and
    ``X_g = X`` (polynomial matrix) for response-surface REML.

    Returns:
        VarianceEstimate with the constrained maximizer over the
        nonnegative orthant, boundary flags for clamped components and
        the inverse expected information ``u_matrix``.
    """
    ctx = RemlContext(X_g, Z, tag=tag)
    return ctx.fit(y, options)


def _invert_information(info):
    eig = np.linalg.eigvalsh(info)
    if eig[0] <= 1e-12 * max(eig[-1], 1.0):
        raise IdentificationError(
            "information matrix is singular: a variance component is not "
            "identifiable from the residual likelihood"
        )
    u = np.linalg.inv(info)
    return 0.5 * (u + u.T)


def fisher_info(sigma, X_g, Z):
    """Expected information of the variance components and its inverse.

    Element (i, j) is tr(C dSigma_i C dSigma_j) / 2 with
    dSigma_j = Z_j Z_j' for blocking strata and I for the residual.

    Returns:
        (info, u_matrix) where u_matrix = info^-1.
    """
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0.0):
        raise NonPositiveDefiniteError("fisher_info requires an interior sigma (> 0)")
    ctx = RemlContext(X_g, Z)
    info = ctx.fisher_info(sigma)
    return info, _invert_information(info)
