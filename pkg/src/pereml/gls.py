"""Empirical generalized least squares with plug-in variance components.

Given variance component estimates from either REML variant, the fixed
effects of the polynomial model (or the treatment means, when fitted on
the full treatment matrix) are estimated by

    beta_hat = (X_g' Sigma_hat^-1 X_g)^-1 X_g' Sigma_hat^-1 y,

with Sigma_hat = sigma_hat^2 (sum_j gamma_hat_j Z_j Z_j' + I) and
estimated covariance Psi_hat = (X_g' Sigma_hat^-1 X_g)^-1.  The
Kenward-Roger module replaces ``kr_covariance`` / ``se_kr`` with the
corrected quantities; until then they equal the unadjusted ones.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import DegenerateModelError, RankDeficientError
from .reml import VarianceEstimate


@dataclass
class FixedEffectsFit:
    """Empirical GLS coefficients and their estimated covariance."""

    beta_hat: np.ndarray
    psi_hat: np.ndarray
    kr_covariance: np.ndarray
    se_unadjusted: np.ndarray
    se_kr: np.ndarray
    variance_source: str
    sigma_hat_used: VarianceEstimate
    coef_names: tuple = ()


def assemble_sigma(sigma, Z, n=None):
    """Dense Sigma_hat = sigma^2 (sum_j gamma_j Z_j Z_j' + I).

    Requires sigma^2 > 0 and sigma_j^2 >= 0; positive definite by
    construction.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma[-1] <= 0.0:
        raise DegenerateModelError("residual variance sigma^2 must be positive")
    if np.any(sigma < 0.0):
        raise ValueError("variance components must be nonnegative")
    Z = [np.asarray(Zj, dtype=float) for Zj in Z]
    if Z:
        n = Z[0].shape[0]
    elif n is None:
        raise ValueError("n is required when there are no blocking strata")
    out = sigma[-1] * np.eye(n)
    for s2, Zj in zip(sigma[:-1], Z):
        out += s2 * (Zj @ Zj.T)
    return out


def _solve_spd(G, rhs):
    """Cholesky solve with a warned diagnostic ridge on failure."""
    try:
        return cho_solve(cho_factor(G, lower=True), rhs)
    except np.linalg.LinAlgError:
        ridge = 1e-12 * np.trace(G) / G.shape[0]
        warnings.warn(
            "Gram matrix is numerically singular; retrying with a "
            f"{ridge:.3e} diagnostic ridge",
            RuntimeWarning,
            stacklevel=3,
        )
        try:
            return cho_solve(cho_factor(G + ridge * np.eye(G.shape[0]), lower=True), rhs)
        except np.linalg.LinAlgError as exc:
            raise RankDeficientError(
                "X_g' Sigma^-1 X_g is rank deficient"
            ) from exc


def gls_fit(X_g, sigma_estimate, y, Z, coef_names=()):
    """Empirical GLS fit of y on X_g with plug-in variance components.

    Args:
        X_g: fixed-effects model matrix (polynomial X, or X_t for
            treatment means).
        sigma_estimate: VarianceEstimate (or a raw variance vector).
        y: response vector.
        Z: stratum membership matrices matching sigma_estimate.
        coef_names: optional coefficient names for reporting.

    Returns:
        FixedEffectsFit; ``kr_covariance`` and ``se_kr`` start equal to
        the unadjusted quantities.
    """
    X = np.asarray(X_g, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if isinstance(sigma_estimate, VarianceEstimate):
        sigma = sigma_estimate.sigma
        source = sigma_estimate.fixed_model_tag
        est = sigma_estimate
    else:
        sigma = np.asarray(sigma_estimate, dtype=float)
        source = "custom"
        est = VarianceEstimate(
            sigma=sigma,
            u_matrix=np.zeros((len(sigma), len(sigma))),
            boundary_flags=np.zeros(len(sigma), dtype=bool),
            reml_loglik=np.nan,
            fixed_model_tag=source,
            residual_df=X.shape[0] - X.shape[1],
            n_iterations=0,
            gradient_norm=np.nan,
            converged=True,
        )
    Sig = assemble_sigma(sigma, Z, n=X.shape[0])
    cS = cho_factor(Sig, lower=True)
    Xl = solve_triangular(cS[0], X, lower=True)
    yl = solve_triangular(cS[0], y, lower=True)
    G = Xl.T @ Xl
    psi = _solve_spd(G, np.eye(X.shape[1]))
    psi = 0.5 * (psi + psi.T)
    beta = psi @ (Xl.T @ yl)
    se = np.sqrt(np.diag(psi))
    return FixedEffectsFit(
        beta_hat=beta,
        psi_hat=psi,
        kr_covariance=psi.copy(),
        se_unadjusted=se,
        se_kr=se.copy(),
        variance_source=source,
        sigma_hat_used=est,
        coef_names=tuple(coef_names),
    )


def equivalence_check(X, Z, tol=1e-8, n_probes=3, seed=0):
    """True iff OLS and GLS coefficient maps coincide for every sigma.

    Checks the algebraic criterion that the column space of X is
    invariant under multiplication by each Z_j Z_j', and verifies at a
    few random interior sigma values that the GLS map reproduces OLS
    and that the OLS sandwich covariance equals the GLS covariance.
    """
    X = np.asarray(X, dtype=float)
    Z = [np.asarray(Zj, dtype=float) for Zj in Z]
    n = X.shape[0]
    q1 = np.linalg.qr(X, mode="reduced")[0]

    def residual(mat):
        return mat - q1 @ (q1.T @ mat)

    for Zj in Z:
        MX = Zj @ (Zj.T @ X)
        if np.linalg.norm(residual(MX)) > tol * (np.linalg.norm(MX) + 1.0):
            return False

    rng = np.random.default_rng(seed)
    ols_map = np.linalg.solve(X.T @ X, X.T)
    for _ in range(n_probes):
        sigma = np.concatenate([rng.uniform(0.2, 5.0, size=len(Z)), [rng.uniform(0.2, 5.0)]])
        Sig = assemble_sigma(sigma, Z, n=n)
        Si = np.linalg.inv(Sig)
        G = X.T @ Si @ X
        gls_map = np.linalg.solve(G, X.T @ Si)
        if np.abs(gls_map - ols_map).max() > tol * (np.abs(ols_map).max() + 1.0):
            return False
        sandwich = ols_map @ Sig @ ols_map.T
        psi = np.linalg.inv(G)
        if np.abs(sandwich - psi).max() > tol * (np.abs(psi).max() + 1.0):
            return False
    return True
