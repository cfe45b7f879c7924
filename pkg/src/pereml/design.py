"""Multi-stratum designs and model matrix construction.

A design is a set of n runs with q coded factor settings plus one unit
label per run for each of s nested blocking factors (whole plots,
subplots, ...), ordered outermost first.  From a design we build

* the full treatment indicator matrix X_t (one column per distinct
  factor-level combination),
* the second-order polynomial model matrix X with p = 1 + 2q + q(q-1)/2
  columns, and
* the 0/1 unit-membership matrices Z_1 .. Z_s of the blocking strata.

Pure-error variance estimation is only possible when the full treatment
model leaves residual degrees of freedom in which every variance
component is visible; ``pure_error_feasibility`` reports this.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import AmbiguousTreatmentError, NestingError

RANK_RTOL = 1e-10


def matrix_rank(a):
    """Rank via column-pivoted QR with relative tolerance RANK_RTOL."""
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return 0
    r = scipy.linalg.qr(a, mode="r", pivoting=True)[0]
    d = np.abs(np.diag(r))
    if d.size == 0 or d[0] == 0.0:
        return 0
    return int(np.sum(d > RANK_RTOL * d[0]))


def _normalize_units(codes):
    """Relabel unit codes to 0..m-1 in first-appearance order."""
    codes = np.asarray(codes)
    seen = {}
    out = np.empty(len(codes), dtype=np.int64)
    for i, c in enumerate(codes):
        key = c.item() if hasattr(c, "item") else c
        if key not in seen:
            seen[key] = len(seen)
        out[i] = seen[key]
    return out


@dataclass(frozen=True)
class MultiStratumDesign:
    """Runs with factor settings and nested blocking-unit assignments.

    Attributes:
        factor_levels: (n, q) array of coded factor settings.
        stratum_assignments: one length-n integer vector per blocking
            factor, outermost first; unit labels are normalized to
            0..n_j-1 in first-appearance order.
        stratum_names: optional names for the blocking factors.
        allow_crossed: accept non-nested (crossed) blocking factors.
    """

    factor_levels: np.ndarray
    stratum_assignments: tuple = ()
    stratum_names: tuple = ()
    allow_crossed: bool = False

    def __post_init__(self):
        levels = np.atleast_2d(np.asarray(self.factor_levels, dtype=float))
        if levels.ndim != 2 or levels.shape[0] < 1 or levels.shape[1] < 1:
            raise ValueError("factor_levels must be a non-empty n x q matrix")
        if not np.all(np.isfinite(levels)):
            raise ValueError("factor_levels must be finite")
        assigns = tuple(_normalize_units(a) for a in self.stratum_assignments)
        for j, a in enumerate(assigns):
            if len(a) != levels.shape[0]:
                raise ValueError(
                    f"stratum {j}: expected {levels.shape[0]} unit labels, got {len(a)}"
                )
            if a.max() + 1 >= levels.shape[0] and levels.shape[0] > 1:
                raise ValueError(
                    f"stratum {j}: every run is its own unit; "
                    "blocking strata must group runs (n_j < n)"
                )
        names = tuple(self.stratum_names) or tuple(
            f"stratum{j + 1}" for j in range(len(assigns))
        )
        if len(names) != len(assigns):
            raise ValueError("stratum_names length must match stratum_assignments")
        object.__setattr__(self, "factor_levels", levels)
        object.__setattr__(self, "stratum_assignments", assigns)
        object.__setattr__(self, "stratum_names", names)
        if not self.allow_crossed:
            self._check_nesting()

    def _check_nesting(self):
        # each unit of an inner stratum must lie inside one unit of every outer stratum
        for outer_idx in range(len(self.stratum_assignments)):
            outer = self.stratum_assignments[outer_idx]
            for inner_idx in range(outer_idx + 1, len(self.stratum_assignments)):
                inner = self.stratum_assignments[inner_idx]
                parent = {}
                for run in range(self.n_runs):
                    u = inner[run]
                    if u not in parent:
                        parent[u] = outer[run]
                    elif parent[u] != outer[run]:
                        raise NestingError(
                            run,
                            inner_idx,
                            f"unit {u} of stratum {inner_idx} spans units "
                            f"{parent[u]} and {outer[run]} of stratum {outer_idx}",
                        )

    @property
    def n_runs(self):
        return self.factor_levels.shape[0]

    @property
    def n_factors(self):
        return self.factor_levels.shape[1]

    @property
    def n_strata(self):
        return len(self.stratum_assignments)

    @property
    def stratum_sizes(self):
        """Number of units n_j in each blocking stratum."""
        return tuple(int(a.max()) + 1 for a in self.stratum_assignments)

    def units_per_block(self, j):
        """Run counts per unit of stratum j; a scalar if balanced, else an array."""
        counts = np.bincount(self.stratum_assignments[j])
        if np.all(counts == counts[0]):
            return int(counts[0])
        return counts


@dataclass(frozen=True)
class ModelMatrices:
    """Fixed- and random-effects model matrices for one design."""

    X_t: np.ndarray
    t: int
    X: np.ndarray
    p: int
    Z: tuple
    treatment_labels: np.ndarray
    coef_names: tuple


def identify_treatments(design, tolerance=0.0):
    """Group runs into treatments by (near-)equal factor settings.

    Two runs share a treatment iff their factor rows agree componentwise
    within ``tolerance``.  Labels are contiguous integers 1..t in
    first-appearance order.  The paper's designs use exact coded levels,
    so the default is exact matching; a positive tolerance is checked
    for transitivity and rejected if ambiguous.

    Returns:
        (labels, t) with labels a length-n int array in 1..t.
    """
    F = design.factor_levels
    n = F.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    if tolerance < 0:
        raise ValueError("tolerance must be nonnegative")
    if tolerance == 0.0:
        seen = {}
        for i in range(n):
            key = tuple(F[i])
            if key not in seen:
                seen[key] = len(seen) + 1
            labels[i] = seen[key]
        return labels, len(seen)

    # union-find over all pairs within tolerance
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if np.all(np.abs(F[i] - F[j]) <= tolerance):
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    # transitivity check: every within-group pair must itself be within tolerance
    for members in groups.values():
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                i, j = members[a], members[b]
                if np.any(np.abs(F[i] - F[j]) > tolerance):
                    raise AmbiguousTreatmentError(
                        f"runs {i} and {j} are linked through intermediate runs "
                        f"but differ by more than {tolerance}; "
                        "treatment coding is ambiguous at this tolerance"
                    )
    next_label = 0
    rep_label = {}
    for i in range(n):
        r = find(i)
        if r not in rep_label:
            next_label += 1
            rep_label[r] = next_label
        labels[i] = rep_label[r]
    return labels, next_label


def build_full_treatment_matrix(labels, t):
    """0/1 indicator matrix X_t with X_t[i, r-1] = 1 iff run i has treatment r."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 1 or labels.max() > t:
        raise ValueError("treatment labels must lie in 1..t")
    Xt = np.zeros((len(labels), t))
    Xt[np.arange(len(labels)), labels - 1] = 1.0
    return Xt


def second_order_names(q):
    """Coefficient names b0; b1..bq; b11..bqq; brs for r < s."""
    names = ["b0"]
    names += [f"b{r + 1}" for r in range(q)]
    names += [f"b{r + 1}{r + 1}" for r in range(q)]
    for r in range(q):
        for s in range(r + 1, q):
            names.append(f"b{r + 1}{s + 1}")
    return tuple(names)


def build_second_order_matrix(factor_levels):
    """Second-order polynomial model matrix.

    Column order: intercept; linear x_1..x_q; quadratic x_1^2..x_q^2;
    interactions x_r x_s for r < s in lexicographic order, giving
    p = 1 + 2q + q(q-1)/2 columns.
    """
    F = np.atleast_2d(np.asarray(factor_levels, dtype=float))
    n, q = F.shape
    cols = [np.ones(n)]
    cols += [F[:, r] for r in range(q)]
    cols += [F[:, r] ** 2 for r in range(q)]
    for r in range(q):
        for s in range(r + 1, q):
            cols.append(F[:, r] * F[:, s])
    return np.column_stack(cols)


def build_stratum_matrices(design):
    """0/1 unit-membership matrices Z_j, one per blocking stratum."""
    Zs = []
    for a in design.stratum_assignments:
        m = int(a.max()) + 1
        Z = np.zeros((design.n_runs, m))
        Z[np.arange(design.n_runs), a] = 1.0
        Zs.append(Z)
    return Zs


def build_model_matrices(design, tolerance=0.0):
    """Bundle X_t, X and the Z_j for a design."""
    labels, t = identify_treatments(design, tolerance)
    X_t = build_full_treatment_matrix(labels, t)
    X = build_second_order_matrix(design.factor_levels)
    Z = tuple(build_stratum_matrices(design))
    return ModelMatrices(
        X_t=X_t,
        t=t,
        X=X,
        p=X.shape[1],
        Z=Z,
        treatment_labels=labels,
        coef_names=second_order_names(design.n_factors),
    )


@dataclass(frozen=True)
class PureErrorFeasibility:
    """Residual dimensions of the full treatment model and identifiability.

    ``residual_df`` is n - rank(X_t): the total pure-error dimension.
    ``within_df`` is n - rank([X_t | Z_1 | ... | Z_s]): the dimension in
    which only the run-level error is visible.  ``stratum_df[j]`` is
    rank([X_t | Z_j]) - rank(X_t): the number of independent directions
    in which stratum j's block effects survive removal of treatments.
    The design is feasible iff the pure-error REML information matrix
    is nonsingular at an interior point.
    """

    feasible: bool
    residual_df: int
    within_df: int
    stratum_df: tuple
    info_condition: float
    message: str = ""


def pure_error_feasibility(X_t, Z):
    """Check whether pure-error REML can identify every variance component."""
    X_t = np.asarray(X_t, dtype=float)
    Z = [np.asarray(Zj, dtype=float) for Zj in Z]
    n = X_t.shape[0]
    rank_t = matrix_rank(X_t)
    residual_df = n - rank_t
    if Z:
        within_df = n - matrix_rank(np.hstack([X_t] + Z))
    else:
        within_df = residual_df
    stratum_df = tuple(
        matrix_rank(np.hstack([X_t, Zj])) - rank_t for Zj in Z
    )
    if residual_df < len(Z) + 1:
        return PureErrorFeasibility(
            feasible=False,
            residual_df=residual_df,
            within_df=within_df,
            stratum_df=stratum_df,
            info_condition=np.inf,
            message=(
                f"residual dimension {residual_df} is smaller than the "
                f"{len(Z) + 1} variance components"
            ),
        )
    # definitive check: expected information at an interior point
    from .reml import fisher_info

    try:
        info, _ = fisher_info(np.ones(len(Z) + 1), X_t, Z)
    except Exception as exc:
        return PureErrorFeasibility(
            feasible=False,
            residual_df=residual_df,
            within_df=within_df,
            stratum_df=stratum_df,
            info_condition=np.inf,
            message=f"information matrix singular at interior point ({exc})",
        )
    eig = np.linalg.eigvalsh(info)
    cond = np.inf if eig[0] <= 0 else float(eig[-1] / eig[0])
    feasible = eig[0] > 1e-10 * max(eig[-1], 1.0)
    msg = "" if feasible else "information matrix is numerically singular"
    return PureErrorFeasibility(
        feasible=feasible,
        residual_df=residual_df,
        within_df=within_df,
        stratum_df=stratum_df,
        info_condition=cond,
        message=msg,
    )
