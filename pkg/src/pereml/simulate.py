"""Monte Carlo bias studies for the two REML variants.

Responses are generated from the randomization model

    y = X beta_true + (third-order misspecification terms)
        + sum_j Z_j delta_j + eps,
    delta_j ~ N(0, sigma_j^2 I),  eps ~ N(0, sigma^2 I),

with a counter-based generator keyed by (seed, replicate_index) so each
replicate has an independent, reproducible stream.  Every replicate is
fitted with the requested REML variants, the polynomial fixed effects
are re-estimated by empirical GLS, and the estimated standard errors
(optionally Kenward-Roger corrected) are aggregated into relative
biases against the empirical standard errors of the coefficient
estimates across replicates.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .design import build_model_matrices, second_order_names
from .errors import KenwardRogerError, PeremlError
from .gls import gls_fit
from .kenward_roger import kr_adjust_generic
from .reml import PE_TAG, RS_TAG, RemlContext, RemlOptions, StratumStructure

METHODS = (PE_TAG, RS_TAG)


def normalize_coef_key(key, q):
    """Canonical second-order coefficient name ("b0", "b3", "b12", ...)."""
    k = str(key).strip().lower()
    if k in ("intercept", "const"):
        return "b0"
    if k.startswith("b"):
        k = k[1:]
    if not k.isdigit():
        raise ValueError(f"unrecognized coefficient key {key!r}")
    if k == "0":
        return "b0"
    digits = [int(c) for c in k]
    if any(d < 1 or d > q for d in digits):
        raise ValueError(f"coefficient key {key!r} references a factor beyond x{q}")
    if len(digits) == 1:
        return f"b{digits[0]}"
    if len(digits) == 2:
        lo, hi = sorted(digits)
        return f"b{lo}{hi}"
    raise ValueError(
        f"coefficient key {key!r} is not a second-order term; "
        "use extra_terms for third-order effects"
    )


def normalize_extra_key(key, q):
    """Canonical third-order term key: three sorted factor digits."""
    k = str(key).strip().lower()
    if k.startswith("b"):
        k = k[1:]
    if not (k.isdigit() and len(k) == 3):
        raise ValueError(f"extra term key {key!r} must name three factors, e.g. '112'")
    digits = sorted(int(c) for c in k)
    if any(d < 1 or d > q for d in digits):
        raise ValueError(f"extra term key {key!r} references a factor beyond x{q}")
    return "".join(str(d) for d in digits)


@dataclass(frozen=True)
class GeneratorSpec:
    """Ground truth for one simulation scenario."""

    design: object
    beta_true: dict
    sigma_true: np.ndarray
    extra_terms: dict = field(default_factory=dict)
    seed: int = 0
    n_replicates: int = 10000

    def __post_init__(self):
        q = self.design.n_factors
        beta = {normalize_coef_key(k, q): float(v) for k, v in self.beta_true.items()}
        extras = {normalize_extra_key(k, q): float(v) for k, v in self.extra_terms.items()}
        sigma = np.asarray(self.sigma_true, dtype=float)
        if len(sigma) != self.design.n_strata + 1:
            raise ValueError(
                f"sigma_true needs {self.design.n_strata + 1} components "
                f"(one per blocking stratum plus the residual)"
            )
        if np.any(sigma < 0.0):
            raise ValueError("sigma_true components must be nonnegative")
        object.__setattr__(self, "beta_true", beta)
        object.__setattr__(self, "extra_terms", extras)
        object.__setattr__(self, "sigma_true", sigma)

    def beta_vector(self, coef_names):
        """True second-order coefficients aligned to ``coef_names``."""
        return np.array([self.beta_true.get(nm, 0.0) for nm in coef_names])


def mean_response(spec):
    """Noise-free mean X beta_true + third-order terms."""
    F = spec.design.factor_levels
    from .design import build_second_order_matrix

    X = build_second_order_matrix(F)
    names = second_order_names(spec.design.n_factors)
    mu = X @ spec.beta_vector(names)
    for key, coef in spec.extra_terms.items():
        term = np.ones(spec.design.n_runs)
        for c in key:
            term = term * F[:, int(c) - 1]
        mu = mu + coef * term
    return mu


def _replicate_rng(seed, replicate_index):
    key = np.array([seed, replicate_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def simulate_response(spec, replicate_index):
    """One simulated response vector; deterministic in (seed, replicate)."""
    rng = _replicate_rng(spec.seed, replicate_index)
    y = mean_response(spec).copy()
    for j, a in enumerate(spec.design.stratum_assignments):
        n_units = int(a.max()) + 1
        delta = rng.standard_normal(n_units) * math.sqrt(spec.sigma_true[j])
        y += delta[a]
    y += rng.standard_normal(spec.design.n_runs) * math.sqrt(spec.sigma_true[-1])
    return y


def many_small_terms_scenario(spec_base):
    """Scenario with every non-cubic third-order effect small but nonzero.

    Quadratic-by-linear interactions x_r^2 x_s (r != s) get coefficient
    0.5 and three-way products x_r x_s x_t (r < s < t) get 0.25.
    """
    q = spec_base.design.n_factors
    if q < 3:
        raise ValueError("need at least three factors for third-order terms")
    extras = dict(spec_base.extra_terms)
    for r in range(1, q + 1):
        for s in range(1, q + 1):
            if r != s:
                extras[normalize_extra_key(f"{r}{r}{s}", q)] = 0.5
    for r in range(1, q + 1):
        for s in range(r + 1, q + 1):
            for t in range(s + 1, q + 1):
                extras[f"{r}{s}{t}"] = 0.25
    return replace(spec_base, extra_terms=extras)


# -- per-replicate fitting engine --------------------------------------------


class _StudyEngine:
    """Contexts shared across replicates of one scenario."""

    def __init__(self, spec, methods, kr):
        self.spec = spec
        self.methods = tuple(methods)
        self.kr = kr
        mats = build_model_matrices(spec.design)
        self.mats = mats
        self.structure = StratumStructure(list(mats.Z))
        self.coef_names = mats.coef_names
        self.contexts = {}
        for method in self.methods:
            Xg = mats.X_t if method == PE_TAG else mats.X
            self.contexts[method] = RemlContext(
                Xg, list(mats.Z), tag=method, structure=self.structure
            )
        # the GLS fit is always on the polynomial model
        if RS_TAG in self.contexts:
            self.fit_ctx = self.contexts[RS_TAG]
        else:
            self.fit_ctx = RemlContext(
                mats.X, list(mats.Z), tag=RS_TAG, structure=self.structure
            )
        self.p = mats.X.shape[1]
        self.m_comp = self.structure.s + 1
        self.options = RemlOptions()

    def run_replicate(self, r, out, pos):
        y = simulate_response(self.spec, r)
        for method in self.methods:
            slot = out[method]
            try:
                est = self.contexts[method].fit(y, self.options)
                beta, se, se_kr = self._gls_and_kr(est, y)
            except PeremlError:
                slot["failed"][pos] = True
                continue
            slot["sigma"][pos] = est.sigma
            slot["beta"][pos] = beta
            slot["se"][pos] = se
            slot["se_kr"][pos] = se_kr
            slot["boundary"][pos] = bool(np.any(est.boundary_flags[:-1]))

    def _gls_and_kr(self, est, y):
        if self.structure.spectral:
            return self._gls_and_kr_spectral(est, y)
        fit = gls_fit(self.mats.X, est, y, list(self.mats.Z), self.coef_names)
        if not self.kr:
            return fit.beta_hat, fit.se_unadjusted, fit.se_unadjusted
        adj = kr_adjust_generic(fit, est, self.mats.X, list(self.mats.Z))
        return fit.beta_hat, fit.se_unadjusted, np.sqrt(np.diag(adj))

    def _gls_and_kr_spectral(self, est, y):
        ctx = self.fit_ctx
        yr = ctx.rotate(y)
        D = self.structure.eigvals
        w = D @ est.sigma
        sw = np.sqrt(w)
        U = ctx.Xr / sw[:, None]
        cG = cho_factor(U.T @ U, lower=True)
        psi = cho_solve(cG, np.eye(self.p))
        psi = 0.5 * (psi + psi.T)
        beta = psi @ (U.T @ (yr / sw))
        se = np.sqrt(np.diag(psi))
        if not self.kr or np.any(est.boundary_flags[:-1]):
            return beta, se, se.copy()
        # diagonal derivative weights: dSigma^-1/dsigma_i^2 = -d_i / w^2
        m = self.m_comp
        P = [ctx.Xr.T @ (-(D[:, i] / w**2)[:, None] * ctx.Xr) for i in range(m)]
        u = est.u_matrix
        S = np.zeros((self.p, self.p))
        for i in range(m):
            for j in range(m):
                qw = D[:, i] * D[:, j] / w**3
                Qij = ctx.Xr.T @ (qw[:, None] * ctx.Xr)
                S += u[i, j] * (Qij - P[i] @ psi @ P[j])
        lam = psi @ S @ psi
        adjusted = psi + lam + lam.T
        d = np.diag(adjusted)
        if np.any(d < 0.0):
            raise KenwardRogerError("adjusted covariance has a negative diagonal entry")
        return beta, se, np.sqrt(d)


def _empty_slot(m, p, n_comp):
    return {
        "sigma": np.full((m, n_comp), np.nan),
        "beta": np.full((m, p), np.nan),
        "se": np.full((m, p), np.nan),
        "se_kr": np.full((m, p), np.nan),
        "boundary": np.zeros(m, dtype=bool),
        "failed": np.zeros(m, dtype=bool),
    }


def _run_chunk(spec, methods, kr, start, stop):
    engine = _StudyEngine(spec, methods, kr)
    out = {m: _empty_slot(stop - start, engine.p, engine.m_comp) for m in methods}
    for pos, r in enumerate(range(start, stop)):
        engine.run_replicate(r, out, pos)
    return out


# -- aggregation --------------------------------------------------------------


@dataclass
class SimulationReport:
    """Aggregates of one bias study.

    ``relative_bias_pct`` is 100 (mean estimated SE - empirical SE) /
    empirical SE, per coefficient; ``relative_bias_kr_pct`` is the same
    for the Kenward-Roger corrected SEs.  All per-method values are
    keyed by method tag.  Monte Carlo standard errors accompany every
    aggregate; the relative-bias one uses a delta approximation that
    ignores the (positive) covariance between the mean estimated SE and
    the empirical SE, so it is slightly conservative.
    """

    coef_names: tuple
    methods: tuple
    n_replicates: int
    seed: int
    kr_applied: bool
    mean_sigma_hat: dict
    mean_sigma_mc_se: dict
    empirical_se: dict
    mean_estimated_se: dict
    mean_estimated_se_kr: dict
    relative_bias_pct: dict
    relative_bias_kr_pct: dict
    relative_bias_mc_se_pct: dict
    relative_bias_of_beta_pct: dict
    mc_counts: dict
    failure_counts: dict
    boundary_rate: dict

    def row(self, method, name):
        """One coefficient's aggregates for a method, as a dict."""
        i = self.coef_names.index(name)
        return {
            "coef": name,
            "empirical_se": self.empirical_se[method][i],
            "mean_se": self.mean_estimated_se[method][i],
            "mean_se_kr": self.mean_estimated_se_kr[method][i],
            "bias_pct": self.relative_bias_pct[method][i],
            "bias_kr_pct": self.relative_bias_kr_pct[method][i],
            "bias_mc_se_pct": self.relative_bias_mc_se_pct[method][i],
            "beta_bias_pct": self.relative_bias_of_beta_pct[method][i],
        }


def run_bias_study(spec, methods=METHODS, kr=True, n_replicates=None, threads=1):
    """Fit every simulated replicate with each method and aggregate.

    Replicates whose fit fails are counted and excluded per method.
    Results are bit-reproducible for a fixed (spec, seed) regardless of
    ``threads``: generation is keyed per replicate and aggregation runs
    in replicate order.

    Returns:
        SimulationReport.
    """
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; expected subset of {METHODS}")
    m_reps = int(n_replicates if n_replicates is not None else spec.n_replicates)
    if m_reps < 1:
        raise ValueError("need at least one replicate")

    if threads > 1:
        chunk = math.ceil(m_reps / threads)
        ranges = [(s, min(s + chunk, m_reps)) for s in range(0, m_reps, chunk)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(
                pool.map(_run_chunk, *zip(*[(spec, methods, kr, a, b) for a, b in ranges]))
            )
        out = {
            meth: {
                key: np.concatenate([part[meth][key] for part in parts])
                for key in parts[0][meth]
            }
            for meth in methods
        }
        engine = _StudyEngine(spec, methods[:1], kr)  # for names only
        coef_names = engine.coef_names
    else:
        engine = _StudyEngine(spec, methods, kr)
        out = {m: _empty_slot(m_reps, engine.p, engine.m_comp) for m in methods}
        for r in range(m_reps):
            engine.run_replicate(r, out, r)
        coef_names = engine.coef_names

    beta_true = spec.beta_vector(coef_names)
    report = SimulationReport(
        coef_names=tuple(coef_names),
        methods=methods,
        n_replicates=m_reps,
        seed=spec.seed,
        kr_applied=kr,
        mean_sigma_hat={},
        mean_sigma_mc_se={},
        empirical_se={},
        mean_estimated_se={},
        mean_estimated_se_kr={},
        relative_bias_pct={},
        relative_bias_kr_pct={},
        relative_bias_mc_se_pct={},
        relative_bias_of_beta_pct={},
        mc_counts={},
        failure_counts={},
        boundary_rate={},
    )
    for meth in methods:
        slot = out[meth]
        ok = ~slot["failed"]
        n_ok = int(ok.sum())
        if n_ok == 0:
            raise PeremlError(f"all replicates failed for method {meth}")
        sigma = slot["sigma"][ok]
        beta = slot["beta"][ok]
        se = slot["se"][ok]
        se_kr = slot["se_kr"][ok]
        emp = beta.std(axis=0, ddof=1) if n_ok > 1 else np.full(beta.shape[1], np.nan)
        mean_se = se.mean(axis=0)
        mean_se_kr = se_kr.mean(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            bias = 100.0 * (mean_se - emp) / emp
            bias_kr = 100.0 * (mean_se_kr - emp) / emp
            beta_bias = 100.0 * (beta.mean(axis=0) - beta_true) / emp
            var_mean_se = se_kr.var(axis=0, ddof=1) / n_ok if n_ok > 1 else np.nan
            var_emp = emp**2 / (2.0 * max(n_ok - 1, 1))
            bias_mc = 100.0 / emp * np.sqrt(var_mean_se + (mean_se_kr / emp) ** 2 * var_emp)
        report.mean_sigma_hat[meth] = sigma.mean(axis=0)
        report.mean_sigma_mc_se[meth] = (
            sigma.std(axis=0, ddof=1) / math.sqrt(n_ok) if n_ok > 1 else np.full(sigma.shape[1], np.nan)
        )
        report.empirical_se[meth] = emp
        report.mean_estimated_se[meth] = mean_se
        report.mean_estimated_se_kr[meth] = mean_se_kr
        report.relative_bias_pct[meth] = bias
        report.relative_bias_kr_pct[meth] = bias_kr
        report.relative_bias_mc_se_pct[meth] = bias_mc
        report.relative_bias_of_beta_pct[meth] = beta_bias
        report.mc_counts[meth] = n_ok
        report.failure_counts[meth] = int(m_reps - n_ok)
        report.boundary_rate[meth] = float(slot["boundary"][ok].mean())
    return report
