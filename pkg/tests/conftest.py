import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pereml import (
    build_model_matrices,
    datasets,
    fit_reml,
    gls_fit,
    with_kr_adjustment,
)

DATA_DIR = Path(__file__).resolve().parent.parent / "data"


@dataclass
class FittedExample:
    design: object
    y: np.ndarray
    mats: object
    pe: object
    rs: object
    fit_pe: object
    fit_rs: object


def _fit_example(design, y, kr=True):
    mats = build_model_matrices(design)
    Z = list(mats.Z)
    pe = fit_reml(mats.X_t, Z, y, tag="pe-reml")
    rs = fit_reml(mats.X, Z, y, tag="rs-reml")
    fit_pe = gls_fit(mats.X, pe, y, Z, coef_names=mats.coef_names)
    fit_rs = gls_fit(mats.X, rs, y, Z, coef_names=mats.coef_names)
    if kr:
        fit_pe = with_kr_adjustment(fit_pe, pe, mats.X, Z)
        fit_rs = with_kr_adjustment(fit_rs, rs, mats.X, Z)
    return FittedExample(design, y, mats, pe, rs, fit_pe, fit_rs)


@pytest.fixture(scope="session")
def table2_fitted():
    design, y = datasets.table2()
    return _fit_example(design, y)


@pytest.fixture(scope="session")
def table4_fitted():
    design, y = datasets.table4()
    return _fit_example(design, y)


def coef_index(mats, name):
    return mats.coef_names.index(name)
