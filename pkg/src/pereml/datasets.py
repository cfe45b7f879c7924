"""Bundled example designs, responses and simulation scenarios.

``table2`` is a hand-constructed split-plot design: 12 whole plots of
five runs, four factors (x1, x2 applied to whole plots), 49 distinct
treatments with the replicated ones appearing only in different whole
plots.  ``table4`` is an I-optimal split-split-plot design: six whole
plots, twelve subplots, 36 runs, 30 distinct treatments.  Both carry
simulated responses and are the regression and acceptance fixtures.

``ceramic_pipe_design`` reconstructs the geometry of the ceramic-pipe
split-plot experiment (12 whole plots of four runs, three of them
replicated center-point whole plots); its responses are not public, so
only design-level properties are testable.
"""

from __future__ import annotations

from io import StringIO

import numpy as np

from .design import MultiStratumDesign
from .simulate import GeneratorSpec

# columns: whole_plot treatment x1 x2 x3 x4 y
_TABLE2 = """\
1 1 -1 -1 -1 -1 29.46
1 2 -1 -1 1 -1 31.50
1 3 -1 -1 -1 1 23.41
1 4 -1 -1 1 1 19.12
1 5 -1 -1 0 0 24.38
2 6 1 -1 -1 -1 53.32
2 7 1 -1 1 -1 50.18
2 8 1 -1 -1 1 55.08
2 9 1 -1 1 1 47.97
2 10 1 -1 0 0 49.08
3 11 -1 1 -1 -1 37.10
3 12 -1 1 1 -1 41.39
3 13 -1 1 -1 1 43.22
3 14 -1 1 1 1 38.18
3 15 -1 1 0 0 38.85
4 16 1 1 -1 -1 39.10
4 17 1 1 1 -1 44.05
4 18 1 1 -1 1 58.19
4 19 1 1 1 1 51.32
4 20 1 1 0 0 47.68
5 21 -1 0 -1 0 37.74
5 22 -1 0 1 0 32.18
5 23 -1 0 0 -1 37.27
5 24 -1 0 0 1 34.25
5 25 -1 0 0 0 36.18
6 26 1 0 -1 0 49.91
6 27 1 0 1 0 50.84
6 28 1 0 0 -1 49.24
6 29 1 0 0 1 54.78
6 30 1 0 0 0 50.45
7 31 0 -1 -1 0 40.63
7 32 0 -1 1 0 46.87
7 33 0 -1 0 -1 47.88
7 34 0 -1 0 1 42.95
7 35 0 -1 0 0 47.16
8 36 0 1 -1 0 48.59
8 37 0 1 1 0 49.21
8 38 0 1 0 -1 48.14
8 39 0 1 0 1 53.42
8 40 0 1 0 0 49.59
9 41 0 0 -1 -1 48.61
9 42 0 0 1 -1 51.91
9 43 0 0 -1 1 55.17
9 44 0 0 1 1 50.13
9 45 0 0 0 0 49.47
10 46 0 0 -1 0 49.08
10 47 0 0 1 0 48.77
10 48 0 0 0 -1 51.00
10 49 0 0 0 1 49.52
10 45 0 0 0 0 49.72
11 41 0 0 -1 -1 41.26
11 42 0 0 1 -1 43.83
11 43 0 0 -1 1 57.94
11 44 0 0 1 1 42.02
11 45 0 0 0 0 40.65
12 46 0 0 -1 0 49.43
12 47 0 0 1 0 46.00
12 48 0 0 0 -1 54.96
12 49 0 0 0 1 55.10
12 45 0 0 0 0 44.45
"""

# columns: whole_plot subplot treatment x1 x2 x3 x4 y
_TABLE4 = """\
1 1 1 0 0 -1 1 50.77
1 1 2 0 0 0 0 49.08
1 1 2 0 0 0 0 50.21
1 2 2 0 0 0 0 47.28
1 2 3 0 0 1 -1 48.64
1 2 2 0 0 0 0 49.18
2 3 4 1 -1 1 1 48.68
2 3 5 1 -1 -1 -1 51.67
2 3 6 1 -1 0 0 50.76
2 4 7 1 0 -1 0 52.02
2 4 8 1 0 1 -1 52.36
2 4 9 1 0 0 1 54.37
3 5 10 -1 -1 0 1 22.13
3 5 11 -1 -1 1 -1 37.65
3 5 12 -1 -1 -1 0 28.17
3 6 13 -1 0 -1 -1 37.88
3 6 14 -1 0 1 1 35.33
3 6 15 -1 0 0 0 37.38
4 7 16 0 -1 0 -1 48.69
4 7 17 0 -1 -1 1 44.92
4 7 18 0 -1 1 0 44.14
4 8 19 0 1 -1 -1 46.72
4 8 20 0 1 1 0 50.06
4 8 21 0 1 0 1 54.69
5 9 22 1 0 1 0 49.46
5 9 23 1 0 0 -1 47.67
5 9 24 1 0 -1 1 55.59
5 10 25 1 1 0 -1 43.34
5 10 26 1 1 -1 0 48.88
5 10 27 1 1 1 1 51.32
6 11 28 -1 1 0 0 43.68
6 11 29 -1 1 -1 1 44.96
6 11 30 -1 1 1 -1 44.26
6 12 14 -1 0 1 1 38.21
6 12 13 -1 0 -1 -1 38.72
6 12 15 -1 0 0 0 39.02
"""


def _load(text, n_strata):
    data = np.loadtxt(StringIO(text))
    strata = [data[:, j].astype(int) for j in range(n_strata)]
    treatments = data[:, n_strata].astype(int)
    factors = data[:, n_strata + 1 : -1]
    y = data[:, -1]
    return strata, treatments, factors, y


def table2():
    """Split-plot example: (design, y) with 60 runs and 12 whole plots."""
    strata, _, factors, y = _load(_TABLE2, 1)
    design = MultiStratumDesign(
        factor_levels=factors,
        stratum_assignments=(strata[0],),
        stratum_names=("whole_plot",),
    )
    return design, y


def table2_treatment_labels():
    """Treatment labels as printed alongside the split-plot example."""
    return _load(_TABLE2, 1)[1]


def table4():
    """Split-split-plot example: (design, y) with 36 runs."""
    strata, _, factors, y = _load(_TABLE4, 2)
    design = MultiStratumDesign(
        factor_levels=factors,
        stratum_assignments=(strata[0], strata[1]),
        stratum_names=("whole_plot", "subplot"),
    )
    return design, y


def table4_treatment_labels():
    return _load(_TABLE4, 2)[1]


def ceramic_pipe_design():
    """Geometry of the ceramic-pipe split-plot experiment.

    Twelve whole plots of four runs: four factorial whole plots crossed
    with a full 2^2 in the subplot factors, four axial whole plots run
    at the subplot center, one center whole plot holding the subplot
    axial runs, and three replicated center-point whole plots.  The
    design has the equivalent-estimation property (OLS = GLS).
    """
    rows = []
    wp = []
    wp_id = 0
    for z1, z2 in ((-1, -1), (1, -1), (-1, 1), (1, 1)):
        wp_id += 1
        for x3, x4 in ((-1, -1), (1, -1), (-1, 1), (1, 1)):
            rows.append((z1, z2, x3, x4))
            wp.append(wp_id)
    for z1, z2 in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        wp_id += 1
        for _ in range(4):
            rows.append((z1, z2, 0, 0))
            wp.append(wp_id)
    wp_id += 1
    for x3, x4 in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        rows.append((0, 0, x3, x4))
        wp.append(wp_id)
    for _ in range(3):
        wp_id += 1
        for _ in range(4):
            rows.append((0, 0, 0, 0))
            wp.append(wp_id)
    return MultiStratumDesign(
        factor_levels=np.array(rows, dtype=float),
        stratum_assignments=(np.array(wp),),
        stratum_names=("whole_plot",),
    )


# true fixed effects used for both worked examples and all simulations
SECTION5_BETA = {
    "b0": 50.0,
    "b1": 8.0,
    "b2": 3.0,
    "b11": -7.0,
    "b22": -3.0,
    "b44": 1.0,
    "b12": -4.0,
    "b14": 2.0,
    "b24": 3.0,
    "b34": -2.0,
}
SECTION5_SIGMA = (4.0, 2.0)
DEFAULT_SEED = 7
SCENARIO_NAMES = ("correct", "beta112", "beta334", "many-small")


def section5_spec(scenario="correct", n_replicates=10000, seed=DEFAULT_SEED):
    """GeneratorSpec for one of the simulation-study scenarios.

    Scenarios: "correct" (second-order model true), "beta112"
    (x1^2 x2 effect of 5, whole-plot misspecification), "beta334"
    (x3^2 x4 effect of 5, subplot misspecification), "many-small"
    (all non-cubic third-order terms at 0.5 / 0.25).
    """
    from .simulate import many_small_terms_scenario

    design, _ = table2()
    spec = GeneratorSpec(
        design=design,
        beta_true=dict(SECTION5_BETA),
        sigma_true=np.array(SECTION5_SIGMA),
        seed=seed,
        n_replicates=n_replicates,
    )
    if scenario == "correct":
        return spec
    if scenario == "beta112":
        return GeneratorSpec(
            design=design,
            beta_true=dict(SECTION5_BETA),
            sigma_true=np.array(SECTION5_SIGMA),
            extra_terms={"112": 5.0},
            seed=seed,
            n_replicates=n_replicates,
        )
    if scenario == "beta334":
        return GeneratorSpec(
            design=design,
            beta_true=dict(SECTION5_BETA),
            sigma_true=np.array(SECTION5_SIGMA),
            extra_terms={"334": 5.0},
            seed=seed,
            n_replicates=n_replicates,
        )
    if scenario == "many-small":
        return many_small_terms_scenario(spec)
    raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIO_NAMES}")
