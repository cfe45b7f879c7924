"""Kenward-Roger correction of the empirical GLS covariance.

The adjusted covariance is Psi_hat + 2 Lambda_hat with

    Lambda_hat = Psi_hat { sum_ij u_ij (Q_ij - P_i Psi_hat P_j) } Psi_hat,
    P_i  = X_g' (dSigma^-1/dsigma_i^2) X_g,
    Q_ij = X_g' (dSigma^-1/dsigma_i^2) Sigma_hat (dSigma^-1/dsigma_j^2) X_g,

where u_ij is the estimated covariance of the variance component
estimates (inverse expected information of the REML variant that
produced them) and the derivative matrices are the analytic

    dSigma^-1/dsigma_i^2 = -Sigma^-1 (dSigma/dsigma_i^2) Sigma^-1.

If any non-residual component was estimated at the zero boundary the
information is singular there, so Lambda_hat = 0 and the adjusted
covariance equals the unadjusted one (the same convention statistical
software uses).

The generic path works for any variance-components structure; the
balanced split-plot and split-split-plot closed forms are provided as
independent cross-checks of the same quantities.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import KenwardRogerError
from .gls import assemble_sigma

_BOUNDARY_NOTE = (
    "a non-residual variance component is at the zero boundary; "
    "Lambda_hat = 0 and the covariance is returned unadjusted"
)


@dataclass
class KRWorkspace:
    """Intermediate matrices of one Kenward-Roger evaluation."""

    C: np.ndarray
    dsigma_inv: list
    P_list: list
    Q_grid: np.ndarray
    lambda_hat: np.ndarray


def _derivative_mats(Z, n):
    """dSigma/dsigma_i^2: Z_j Z_j' per stratum, identity for the residual."""
    mats = [np.asarray(Zj, dtype=float) @ np.asarray(Zj, dtype=float).T for Zj in Z]
    mats.append(np.eye(n))
    return mats


def _lambda_from_pieces(psi, P_list, Q_grid, u):
    m = len(P_list)
    S = np.zeros_like(psi)
    for i in range(m):
        for j in range(m):
            S += u[i, j] * (Q_grid[i][j] - P_list[i] @ psi @ P_list[j])
    lam = psi @ S @ psi
    return 0.5 * (lam + lam.T)


def _check_adjusted(adjusted):
    if np.any(np.diag(adjusted) < 0.0):
        raise KenwardRogerError(
            "adjusted covariance has a negative diagonal entry"
        )
    return 0.5 * (adjusted + adjusted.T)


def kr_workspace(X_g, Z, sigma, u_matrix, psi=None):
    """Build C, the derivative matrices, P_i, Q_ij and Lambda_hat.

    ``X_g`` is the model whose GLS covariance is being adjusted;
    ``u_matrix`` comes from the information of whichever REML variant
    produced ``sigma``.
    """
    X = np.asarray(X_g, dtype=float)
    n = X.shape[0]
    sigma = np.asarray(sigma, dtype=float)
    Sig = assemble_sigma(sigma, Z, n=n)
    Si = np.linalg.inv(Sig)
    G = X.T @ Si @ X
    if psi is None:
        psi = np.linalg.inv(G)
    C = Si - Si @ X @ np.linalg.solve(G, X.T @ Si)
    C = 0.5 * (C + C.T)
    dmats = _derivative_mats(Z, n)
    dsi = [-Si @ B @ Si for B in dmats]
    P_list = [X.T @ d @ X for d in dsi]
    m = len(dmats)
    p = X.shape[1]
    Q_grid = np.empty((m, m, p, p))
    for i in range(m):
        left = X.T @ dsi[i] @ Sig
        for j in range(m):
            Q_grid[i, j] = left @ dsi[j] @ X
    lam = _lambda_from_pieces(psi, P_list, Q_grid, np.asarray(u_matrix, dtype=float))
    return KRWorkspace(C=C, dsigma_inv=dsi, P_list=P_list, Q_grid=Q_grid, lambda_hat=lam)


def kr_adjust_generic(fit, sigma_estimate, X_g, Z):
    """Psi_hat + 2 Lambda_hat via the analytic matrix-derivative path.

    Args:
        fit: the FixedEffectsFit being adjusted (supplies Psi_hat).
        sigma_estimate: VarianceEstimate carrying sigma and u_matrix.
        X_g: model matrix of the fit (the polynomial X in the paper's
            examples; u_matrix may come from the full treatment model).
        Z: stratum membership matrices.

    Returns:
        the adjusted covariance matrix.
    """
    if np.any(sigma_estimate.boundary_flags[:-1]):
        return fit.psi_hat.copy()
    ws = kr_workspace(
        X_g, Z, sigma_estimate.sigma, sigma_estimate.u_matrix, psi=fit.psi_hat
    )
    return _check_adjusted(fit.psi_hat + 2.0 * ws.lambda_hat)


def with_kr_adjustment(fit, sigma_estimate, X_g, Z, adjuster=kr_adjust_generic, **kw):
    """Return a copy of ``fit`` with kr_covariance and se_kr filled in."""
    adjusted = adjuster(fit, sigma_estimate, X_g, Z, **kw)
    return replace(
        fit,
        kr_covariance=adjusted,
        se_kr=np.sqrt(np.diag(adjusted)),
    )


# -- balanced split-plot closed forms ---------------------------------------


def _splitplot_u_closed(C, Z):
    """u matrix from the printed trace identities (order sigma_1^2, sigma^2)."""
    CZ = C @ Z
    tr_cc = np.sum(C * C)
    tr_zczz = np.sum((Z.T @ CZ) ** 2)
    tr_zcc = np.sum(CZ * CZ)
    c = tr_cc * tr_zczz - tr_zcc**2
    return np.array([[2.0 * tr_cc, -2.0 * tr_zcc], [-2.0 * tr_zcc, 2.0 * tr_zczz]]) / c


def splitplot_pq_closed(X_g, Z, sigma, k):
    """Printed P_1, P_2, Q_11, Q_22, Q_12 for a balanced split-plot."""
    X = np.asarray(X_g, dtype=float)
    Z = np.asarray(Z, dtype=float)
    s1, s0 = float(sigma[0]), float(sigma[1])
    n = X.shape[0]
    M = Z @ Z.T
    Sig = s0 * np.eye(n) + s1 * M
    wp = s0 + k * s1
    a = s1 * (2.0 * s0 + k * s1) / wp**2
    A1 = -M / wp**2
    A2 = (a * M - np.eye(n)) / s0**2
    P1 = X.T @ A1 @ X
    P2 = X.T @ A2 @ X
    Q11 = X.T @ M @ Sig @ M @ X / wp**4
    Q22 = X.T @ (a * M - np.eye(n)) @ Sig @ (a * M - np.eye(n)) @ X / s0**4
    Q12 = -X.T @ M @ Sig @ (a * M - np.eye(n)) @ X / (s0**2 * wp**2)
    return P1, P2, Q11, Q22, Q12


def kr_adjust_splitplot_closed(fit, sigma_estimate, X_g, Z, k=None, u_model_matrix=None):
    """Adjusted covariance from the printed split-plot closed forms.

    Requires a single stratum with equal whole-plot sizes k.  The u
    matrix is recomputed from the printed trace formulas, with the
    annihilator C built on ``u_model_matrix`` (defaults to ``X_g``);
    pass the full treatment matrix there for the pure-error variant.
    """
    if isinstance(Z, (list, tuple)):
        if len(Z) != 1:
            raise ValueError("split-plot closed forms require exactly one stratum")
        Z = Z[0]
    Z = np.asarray(Z, dtype=float)
    counts = Z.sum(axis=0)
    if not np.all(counts == counts[0]):
        raise ValueError("unbalanced whole plots; use kr_adjust_generic")
    if k is None:
        k = int(counts[0])
    elif k != int(counts[0]):
        raise ValueError(f"k={k} does not match the whole-plot size {int(counts[0])}")
    if np.any(sigma_estimate.boundary_flags[:-1]):
        return fit.psi_hat.copy()
    sigma = sigma_estimate.sigma
    X = np.asarray(X_g, dtype=float)
    Xu = X if u_model_matrix is None else np.asarray(u_model_matrix, dtype=float)
    Sig = assemble_sigma(sigma, [Z])
    Si = np.linalg.inv(Sig)
    Gu = Xu.T @ Si @ Xu
    C = Si - Si @ Xu @ np.linalg.solve(Gu, Xu.T @ Si)
    u = _splitplot_u_closed(0.5 * (C + C.T), Z)
    P1, P2, Q11, Q22, Q12 = splitplot_pq_closed(X, Z, sigma, k)
    psi = fit.psi_hat
    Q_grid = [[Q11, Q12], [Q12.T, Q22]]
    lam = _lambda_from_pieces(psi, [P1, P2], Q_grid, u)
    return _check_adjusted(psi + 2.0 * lam)


# -- balanced split-split-plot closed forms ----------------------------------


def _splitsplit_sizes(Z1, Z2, b, k):
    c1 = Z1.sum(axis=0)
    c2 = Z2.sum(axis=0)
    if not (np.all(c1 == c1[0]) and np.all(c2 == c2[0])):
        raise ValueError("unbalanced split-split-plot structure")
    if k is None:
        k = int(c2[0])
    if b is None:
        b = int(c1[0]) // k
    if int(c2[0]) != k or int(c1[0]) != b * k:
        raise ValueError(
            f"structure is not b={b} subplots of k={k} runs per whole plot"
        )
    return b, k


def sigma_inverse_splitsplit_closed(sigma, Z1, Z2, b=None, k=None):
    """Closed-form Sigma^-1 and derivative matrices for a balanced
    split-split-plot with b subplots per whole plot and k runs per subplot.

    Sigma^-1 comes from the two-level Schur-complement identity

        Sigma^-1 = (1/sigma^2) { I
            - sigma^2 sigma_1^2 / [(sigma^2 + k sigma_2^2)
              (sigma^2 + b k sigma_1^2 + k sigma_2^2)] Z_1 Z_1'
            - sigma_2^2 / (sigma^2 + k sigma_2^2) Z_2 Z_2' },

    and the derivative matrices from dSigma^-1/dtheta =
    -Sigma^-1 (dSigma/dtheta) Sigma^-1 evaluated with it.

    Returns:
        (Sigma_inv, [dSigma_inv/dsigma_1^2, dSigma_inv/dsigma_2^2,
        dSigma_inv/dsigma^2]).
    """
    Z1 = np.asarray(Z1, dtype=float)
    Z2 = np.asarray(Z2, dtype=float)
    b, k = _splitsplit_sizes(Z1, Z2, b, k)
    s1, s2, s0 = (float(v) for v in sigma)
    if s0 <= 0.0 or s1 < 0.0 or s2 < 0.0:
        raise ValueError("need sigma^2 > 0 and nonnegative block variances")
    n = Z1.shape[0]
    M1 = Z1 @ Z1.T
    M2 = Z2 @ Z2.T
    d2 = s0 + s2 * k
    d1 = s0 + s1 * b * k + s2 * k
    Si = (np.eye(n) - (s0 * s1) / (d2 * d1) * M1 - s2 / d2 * M2) / s0
    mats = [M1, M2, np.eye(n)]
    dsi = [-Si @ B @ Si for B in mats]
    return Si, dsi


def kr_adjust_splitsplit_closed(
    fit, sigma_estimate, X_g, Z1, Z2, b=None, k=None, u_model_matrix=None
):
    """Adjusted covariance from the closed-form split-split-plot Sigma^-1.

    Same contract as ``kr_adjust_generic``; P, Q, C and the information
    matrix are assembled from the closed-form inverse rather than a
    numeric one.
    """
    Z1 = np.asarray(Z1, dtype=float)
    Z2 = np.asarray(Z2, dtype=float)
    if np.any(sigma_estimate.boundary_flags[:-1]):
        return fit.psi_hat.copy()
    sigma = sigma_estimate.sigma
    Si, dsi = sigma_inverse_splitsplit_closed(sigma, Z1, Z2, b, k)
    X = np.asarray(X_g, dtype=float)
    n = X.shape[0]
    Sig = assemble_sigma(sigma, [Z1, Z2])
    Xu = X if u_model_matrix is None else np.asarray(u_model_matrix, dtype=float)
    Gu = Xu.T @ Si @ Xu
    C = Si - Si @ Xu @ np.linalg.solve(Gu, Xu.T @ Si)
    C = 0.5 * (C + C.T)
    mats = [Z1 @ Z1.T, Z2 @ Z2.T, np.eye(n)]
    info = np.empty((3, 3))
    for i in range(3):
        for j in range(i, 3):
            info[i, j] = info[j, i] = 0.5 * np.sum((C @ mats[i]) * (mats[j] @ C))
    u = np.linalg.inv(info)
    P_list = [X.T @ d @ X for d in dsi]
    Q_grid = [[X.T @ dsi[i] @ Sig @ dsi[j] @ X for j in range(3)] for i in range(3)]
    lam = _lambda_from_pieces(fit.psi_hat, P_list, Q_grid, u)
    return _check_adjusted(fit.psi_hat + 2.0 * lam)
