"""Dataset and scenario file handling plus report formatting.

Dataset files are UTF-8 comma-separated with a header row: the declared
stratum columns (outermost first), factor columns x1..xq, and a
response column y; one row per run, no missing cells.  Scenario files
are JSON documents describing a GeneratorSpec plus which methods to run
and whether to apply the Kenward-Roger correction.

Text reports round to 4 decimals (the precision of the paper's
tables); CSV and JSON outputs carry full precision, so the text form is
presentation only.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .design import (
    MultiStratumDesign,
    build_model_matrices,
    pure_error_feasibility,
)
from .errors import DataSchemaError
from .gls import gls_fit
from .kenward_roger import with_kr_adjustment
from .reml import PE_TAG, RS_TAG, RemlContext, StratumStructure
from .simulate import GeneratorSpec, METHODS


METHOD_CHOICES = (PE_TAG, RS_TAG, "both")
FORMAT_CHOICES = ("text", "csv", "json")


@dataclass
class RunConfig:
    """Resolved options for one CLI invocation.

    ``model_order`` is reserved; only second-order polynomial models are
    fitted.  ``seed``/``scenario_path`` apply to simulate mode only.
    """

    stratum_columns: tuple = ()
    method: str = "both"
    kr: bool = False
    model_order: int = 2
    output_format: str = "text"
    out_path: str | None = None
    scenario_path: str | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.method not in METHOD_CHOICES:
            raise DataSchemaError(
                f"method must be one of {', '.join(METHOD_CHOICES)}, got {self.method!r}"
            )
        if self.output_format not in FORMAT_CHOICES:
            raise DataSchemaError(
                f"format must be one of {', '.join(FORMAT_CHOICES)}, got {self.output_format!r}"
            )
        if self.model_order != 2:
            raise DataSchemaError("only second-order models are supported")

    @property
    def methods(self):
        if self.method == "both":
            return (RS_TAG, PE_TAG)
        return (self.method,)


# -- dataset files ------------------------------------------------------------


def parse_dataset(path, stratum_columns):
    """Read a dataset file into a design and response vector.

    Args:
        path: CSV file path.
        stratum_columns: names of the blocking columns, outermost first.

    Returns:
        (MultiStratumDesign, y) with run order preserved.

    Raises:
        DataSchemaError: with a 1-based line number for missing columns,
            non-numeric cells, ragged rows or an empty data section.
    """
    path = Path(path)
    stratum_columns = list(stratum_columns)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataSchemaError("empty file: no header row", line=1, path=path) from None
        header = [h.strip() for h in header]
        missing = [c for c in stratum_columns if c not in header]
        if missing:
            raise DataSchemaError(
                f"missing stratum column(s): {', '.join(missing)}", line=1, path=path
            )
        if "y" not in header:
            raise DataSchemaError("missing response column 'y'", line=1, path=path)
        factor_cols = []
        q = 0
        while f"x{q + 1}" in header:
            q += 1
            factor_cols.append(f"x{q}")
        if q == 0:
            raise DataSchemaError("no factor columns x1..xq found", line=1, path=path)
        known = set(stratum_columns) | set(factor_cols) | {"y"}
        unknown = [c for c in header if c not in known]
        if unknown:
            raise DataSchemaError(
                f"unrecognized column(s): {', '.join(unknown)}; expected "
                f"{', '.join(stratum_columns + factor_cols + ['y'])}",
                line=1,
                path=path,
            )
        col_index = {c: header.index(c) for c in known}

        strata_raw = [[] for _ in stratum_columns]
        factors = []
        ys = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataSchemaError(
                    f"expected {len(header)} cells, found {len(row)}",
                    line=lineno,
                    path=path,
                )
            def number(col):
                cell = row[col_index[col]].strip()
                try:
                    return float(cell)
                except ValueError:
                    raise DataSchemaError(
                        f"non-numeric value {cell!r} in column {col!r}",
                        line=lineno,
                        path=path,
                    ) from None
            for j, c in enumerate(stratum_columns):
                strata_raw[j].append(row[col_index[c]].strip())
            factors.append([number(c) for c in factor_cols])
            ys.append(number("y"))
    if not ys:
        raise DataSchemaError("no runs: the data section is empty", line=2, path=path)
    try:
        design = MultiStratumDesign(
            factor_levels=np.array(factors),
            stratum_assignments=tuple(np.array(s) for s in strata_raw),
            stratum_names=tuple(stratum_columns),
        )
    except Exception as exc:
        raise DataSchemaError(str(exc), path=path) from exc
    return design, np.array(ys)


def write_dataset(path, design, y):
    """Write a design and response in the dataset schema (exact round trip)."""
    y = np.asarray(y, dtype=float)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            list(design.stratum_names)
            + [f"x{j + 1}" for j in range(design.n_factors)]
            + ["y"]
        )
        for i in range(design.n_runs):
            row = [str(int(a[i])) for a in design.stratum_assignments]
            row += [repr(float(v)) for v in design.factor_levels[i]]
            row.append(repr(float(y[i])))
            writer.writerow(row)


# -- scenario files ------------------------------------------------------------


@dataclass
class Scenario:
    """A named simulation scenario: generator spec plus analysis choices."""

    name: str
    spec: GeneratorSpec
    methods: tuple = METHODS
    kr: bool = True


def load_scenario(path):
    """Read a scenario JSON file.

    The design is either {"builtin": "table2"|"table4"} or
    {"csv": <path relative to the scenario file>, "strata": [...]}.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataSchemaError(f"invalid JSON: {exc}", path=path) from exc
    if not isinstance(doc, dict):
        raise DataSchemaError("scenario document must be a JSON object", path=path)

    def require(key, types):
        if key not in doc:
            raise DataSchemaError(f"missing scenario field {key!r}", path=path)
        if not isinstance(doc[key], types):
            raise DataSchemaError(f"scenario field {key!r} has the wrong type", path=path)
        return doc[key]

    design_ref = require("design", dict)
    if "builtin" in design_ref:
        from . import datasets

        builtin = design_ref["builtin"]
        if builtin == "table2":
            design, _ = datasets.table2()
        elif builtin == "table4":
            design, _ = datasets.table4()
        else:
            raise DataSchemaError(f"unknown builtin design {builtin!r}", path=path)
    elif "csv" in design_ref:
        strata = design_ref.get("strata")
        if not isinstance(strata, list) or not strata:
            raise DataSchemaError(
                "design.strata must list the stratum columns", path=path
            )
        design, _ = parse_dataset(path.parent / design_ref["csv"], strata)
    else:
        raise DataSchemaError(
            "design must give either 'builtin' or 'csv'", path=path
        )

    sigma = require("sigma_true", list)
    beta = require("beta_true", dict)
    extra = doc.get("extra_terms", {})
    if not isinstance(extra, dict):
        raise DataSchemaError("extra_terms must be an object", path=path)
    try:
        spec = GeneratorSpec(
            design=design,
            beta_true=beta,
            sigma_true=np.asarray(sigma, dtype=float),
            extra_terms=extra,
            seed=int(doc.get("seed", 0)),
            n_replicates=int(doc.get("n_replicates", 10000)),
        )
        if doc.get("many_small_terms", False):
            from .simulate import many_small_terms_scenario

            spec = many_small_terms_scenario(spec)
    except (ValueError, TypeError) as exc:
        raise DataSchemaError(str(exc), path=path) from exc
    methods = tuple(doc.get("methods", list(METHODS)))
    for m in methods:
        if m not in METHODS:
            raise DataSchemaError(f"unknown method {m!r}", path=path)
    return Scenario(
        name=str(doc.get("name", path.stem)),
        spec=spec,
        methods=methods,
        kr=bool(doc.get("kr", True)),
    )


# -- fitting orchestration and reports -----------------------------------------


@dataclass
class FitReport:
    """Per-method variance estimates and coefficient tables for one dataset."""

    coef_names: tuple
    methods: tuple
    variance: dict
    fits: dict
    feasibility: object = None


def build_fit_report(design, y, methods=METHODS, kr=False):
    """Fit the requested REML variants and the polynomial GLS model.

    PE-REML requires ``pure_error_feasibility`` to pass; the caller is
    expected to have checked it (the CLI surfaces the failure message).
    """
    mats = build_model_matrices(design)
    structure = StratumStructure(list(mats.Z))
    names = mats.coef_names
    variance = {}
    fits = {}
    for method in methods:
        Xg = mats.X_t if method == PE_TAG else mats.X
        ctx = RemlContext(Xg, list(mats.Z), tag=method, structure=structure)
        est = ctx.fit(y)
        fit = gls_fit(mats.X, est, y, list(mats.Z), coef_names=names)
        if kr:
            fit = with_kr_adjustment(fit, est, mats.X, list(mats.Z))
        variance[method] = est
        fits[method] = fit
    return FitReport(
        coef_names=names,
        methods=tuple(methods),
        variance=variance,
        fits=fits,
        feasibility=pure_error_feasibility(mats.X_t, list(mats.Z)),
    )


_METHOD_LABEL = {RS_TAG: "RS-REML", PE_TAG: "PE-REML"}


def _sigma_names(n_comp):
    return [f"sigma{j + 1}^2" for j in range(n_comp - 1)] + ["sigma^2"]


def fit_report_rows(report):
    """Coefficient table rows: estimate, SE and KR-SE per method."""
    rows = []
    for i, nm in enumerate(report.coef_names):
        row = {"coef": nm}
        for method in report.methods:
            fit = report.fits[method]
            label = _METHOD_LABEL[method]
            row[f"estimate_{label}"] = float(fit.beta_hat[i])
            row[f"se_{label}"] = float(fit.se_unadjusted[i])
            row[f"se_{label}-KR"] = float(fit.se_kr[i])
        rows.append(row)
    return rows


def format_fit_text(report, kr=True):
    """Console table mirroring the worked examples' layout (4 decimals)."""
    labels = [_METHOD_LABEL[m] for m in report.methods]
    lines = []
    for method in report.methods:
        est = report.variance[method]
        comps = ", ".join(
            f"{nm}={val:.4f}"
            for nm, val in zip(_sigma_names(len(est.sigma)), est.sigma)
        )
        flags = ""
        if est.boundary_flags.any():
            flags = "  [boundary]"
        lines.append(f"Variance components ({_METHOD_LABEL[method]}): {comps}{flags}")
    lines.append("")
    headers = ["Parameter"]
    headers += [f"Est {lab}" for lab in labels]
    headers += [f"SE {lab}" for lab in labels]
    if kr:
        headers += [f"SE {lab}-KR" for lab in labels]
    widths = [max(10, len(h) + 1) for h in headers]
    lines.append("".join(h.rjust(w) for h, w in zip(headers, widths)))
    for row in fit_report_rows(report):
        cells = [row["coef"]]
        cells += [f"{row[f'estimate_{lab}']:.4f}" for lab in labels]
        cells += [f"{row[f'se_{lab}']:.4f}" for lab in labels]
        if kr:
            cells += [f"{row[f'se_{lab}-KR']:.4f}" for lab in labels]
        lines.append("".join(c.rjust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines) + "\n"


def format_fit_csv(report):
    rows = fit_report_rows(report)
    out = []
    cols = list(rows[0].keys())
    out.append(",".join(cols))
    for row in rows:
        out.append(
            ",".join(
                row["coef"] if c == "coef" else repr(row[c]) for c in cols
            )
        )
    return "\n".join(out) + "\n"


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def fit_report_json(report):
    """Full-precision machine-readable form of a fit report."""
    doc = {"coefficients": fit_report_rows(report), "variance_components": {}}
    for method in report.methods:
        est = report.variance[method]
        doc["variance_components"][_METHOD_LABEL[method]] = {
            "sigma": est.sigma,
            "u_matrix": est.u_matrix,
            "boundary_flags": est.boundary_flags.astype(bool),
            "reml_loglik": est.reml_loglik,
            "residual_df": est.residual_df,
            "n_iterations": est.n_iterations,
            "converged": est.converged,
        }
    if report.feasibility is not None:
        doc["pure_error_feasibility"] = {
            "feasible": report.feasibility.feasible,
            "residual_df": report.feasibility.residual_df,
            "within_df": report.feasibility.within_df,
            "stratum_df": list(report.feasibility.stratum_df),
        }
    return json.dumps(_jsonable(doc), indent=2)


# -- simulation reports ---------------------------------------------------------


def sim_report_rows(report):
    rows = []
    for nm in report.coef_names:
        row = {"coef": nm}
        for method in report.methods:
            label = _METHOD_LABEL[method]
            r = report.row(method, nm)
            row[f"empirical_se_{label}"] = float(r["empirical_se"])
            row[f"mean_se_{label}"] = float(r["mean_se"])
            row[f"mean_se_kr_{label}"] = float(r["mean_se_kr"])
            row[f"bias_pct_{label}"] = float(r["bias_pct"])
            row[f"bias_kr_pct_{label}"] = float(r["bias_kr_pct"])
            row[f"bias_mc_se_pct_{label}"] = float(r["bias_mc_se_pct"])
            row[f"beta_bias_pct_{label}"] = float(r["beta_bias_pct"])
        rows.append(row)
    return rows


def format_sim_text(report):
    """Console summary: relative biases (%) of estimated standard errors."""
    lines = [
        f"Replicates: {report.n_replicates}  (seed {report.seed}, "
        f"KR {'on' if report.kr_applied else 'off'})"
    ]
    for method in report.methods:
        label = _METHOD_LABEL[method]
        comps = ", ".join(
            f"{nm}={val:.4f}"
            for nm, val in zip(
                _sigma_names(len(report.mean_sigma_hat[method])),
                report.mean_sigma_hat[method],
            )
        )
        lines.append(
            f"{label}: mean sigma_hat {comps}; failures "
            f"{report.failure_counts[method]}; boundary rate "
            f"{report.boundary_rate[method]:.4f}"
        )
    lines.append("")
    lines.append("Relative biases (%) of estimated standard errors")
    labels = [_METHOD_LABEL[m] for m in report.methods]
    which = "bias_kr_pct" if report.kr_applied else "bias_pct"
    header = ["Parameter"] + labels + [f"mc_se {lab}" for lab in labels]
    widths = [max(11, len(h) + 2) for h in header]
    lines.append("".join(h.rjust(w) for h, w in zip(header, widths)))
    for nm in report.coef_names:
        if nm == "b0":
            continue
        cells = [nm]
        for method in report.methods:
            r = report.row(method, nm)
            cells.append(f"{r[which]:.2f}")
        for method in report.methods:
            r = report.row(method, nm)
            cells.append(f"{r['bias_mc_se_pct']:.2f}")
        lines.append("".join(c.rjust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines) + "\n"


def format_sim_csv(report):
    rows = sim_report_rows(report)
    cols = list(rows[0].keys())
    out = [",".join(cols)]
    for row in rows:
        out.append(
            ",".join(row["coef"] if c == "coef" else repr(row[c]) for c in cols)
        )
    return "\n".join(out) + "\n"


def sim_report_json(report):
    doc = {
        "n_replicates": report.n_replicates,
        "seed": report.seed,
        "kr_applied": report.kr_applied,
        "methods": [_METHOD_LABEL[m] for m in report.methods],
        "mean_sigma_hat": {
            _METHOD_LABEL[m]: report.mean_sigma_hat[m] for m in report.methods
        },
        "mean_sigma_mc_se": {
            _METHOD_LABEL[m]: report.mean_sigma_mc_se[m] for m in report.methods
        },
        "mc_counts": {_METHOD_LABEL[m]: report.mc_counts[m] for m in report.methods},
        "failure_counts": {
            _METHOD_LABEL[m]: report.failure_counts[m] for m in report.methods
        },
        "boundary_rate": {
            _METHOD_LABEL[m]: report.boundary_rate[m] for m in report.methods
        },
        "coefficients": sim_report_rows(report),
    }
    return json.dumps(_jsonable(doc), indent=2)
