"""Analysis orchestration: runs the domain operations and writes the report bundle"""

import logging
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd
import scipy

from .. import __version__
from ..config import NamedThreshold, RunConfig
from ..tools.file_repos import BundleRepository, digest
from .cohort import apply_outlier_exclusion, combine_datasets, load_cohort, reader_positive_rates, validate
from .cost_model import (
    evaluate_cost,
    evaluate_naat_only,
    meets_who_floor,
    prevalence_grid,
    prevalence_sweep,
    round_money,
    workflow_sensitivity,
)
from .errors import ConfigError, DegenerateDataError
from .inference_tests import (
    compare_reader_groups,
    correctness_matrix,
    ks_two_sample,
    mcnemar_exact,
    mrmc_orh_test,
    paired_counts,
    sequential_primary_analysis,
    wald_noninferiority_paired,
)
from .models import (
    BootstrapConfig,
    Cohort,
    CostInputs,
    Endpoint,
    MrmcResult,
    NoninferiorityConfig,
    OperatingPoint,
    ProvenanceEntry,
    StratumSpec,
    TestOutcome,
    ValidationReport,
)
from .operating_point import (
    EPS,
    WHO_MIN_SENSITIVITY,
    WHO_MIN_SPECIFICITY,
    match_individual_reader,
    match_mean_reader,
    reader_performance,
    panel_summary,
    readers_below_curve,
    sens_at_spec,
    spec_at_sens,
    who_compliance,
)
from .roc_metrics import (
    CaseSlice,
    auc,
    auc_score,
    auc_statistic,
    bootstrap_ci,
    curve_frame,
    curve_plot_data,
    partial_auc,
    roc_curve,
    sensitivity_at,
    specificity_at,
)
from .subgroup import abnormality_eval, age_band_specs, default_strata, stratify, technical_issue_groups

logger = logging.getLogger(__name__)

COMBINED = "combined"
ENDPOINTS: Tuple[Endpoint, ...] = ("sensitivity", "specificity")
MATCH_MODES = ("who-sens", "who-spec", "mean-reader", "per-reader")
HISTOGRAM_BIN_WIDTH = 0.05
KS_SLICES = {"all": None, "positive": 1, "negative": 0}

Rows = List[Dict[str, Any]]


def format_percent(value: Optional[float]) -> str:
    return "NA" if value is None else f"{100 * value:.2f}%"


def format_p(value: Optional[float]) -> str:
    if value is None:
        return "-"
    return "<0.0001" if value < 0.0001 else f"{value:.4f}"


def slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name).strip("_") or "unnamed"


def load_inputs(run: RunConfig) -> Cohort:
    if not run.inputs:
        raise ConfigError("no inputs configured: add cases/reads/readers paths under 'inputs'")
    cohorts = [load_cohort(i.cases, i.reads, i.readers) for i in run.inputs]
    return cohorts[0] if len(cohorts) == 1 else combine_datasets(cohorts)


def scope_cohort(cohort: Cohort, params: Dict[str, Any]) -> Cohort:
    """Sub-cohort a provenance entry was computed on"""
    scope = params.get("scope", COMBINED)
    sub = cohort if scope == COMBINED else cohort.for_dataset(scope)
    if "stratum" in params:
        sub = stratify(sub, StratumSpec(**params["stratum"]), params.get("include_excluded", False)).cohort
    if "technical_issue_group" in params:
        groups = dict(technical_issue_groups(sub, params.get("include_excluded", False)))
        sub = groups[params["technical_issue_group"]]
    if "reader_cases" in params:
        sub = sub.restrict(r.case_id for r in sub.reads if r.reader_id == params["reader_cases"])
    return sub


def _statistic(name: str, threshold: Optional[float]) -> Any:
    if name == "auc":
        return auc_statistic
    if name == "sensitivity":
        return sensitivity_at(threshold)
    if name == "specificity":
        return specificity_at(threshold)
    raise ValueError(f"unknown statistic {name!r}")


def paired_for_reader(cohort: Cohort, reader_id: str, endpoint: Endpoint, threshold: float) -> Any:
    psi = correctness_matrix(cohort, [reader_id], endpoint, threshold)
    return paired_counts(psi[0], psi[1])


def rederive(entry: ProvenanceEntry, cohort: Cohort) -> Optional[float]:
    """Recompute one manifest entry from the prepared cohort"""
    p = entry.params
    op = entry.operation
    if op == "cost":
        return getattr(evaluate_cost(CostInputs(**p["inputs"])), p["field"])
    if op == "naat_only":
        return getattr(evaluate_naat_only(p["prevalence"], p["cost_confirmatory_test"]), p["field"])

    sub = scope_cohort(cohort, p)
    if op == "ks":
        values = []
        for name in (p["dataset_a"], p["dataset_b"]):
            part = sub.for_dataset(name)
            values.append([c.dls_tb_score for c in part.cases if p["label"] is None or c.tb_label == p["label"]])
        return getattr(ks_two_sample(*values), p["field"])
    if op == "mrmc":
        psi = correctness_matrix(sub, p["reader_ids"], p["endpoint"], p["threshold"])
        result = mrmc_orh_test(
            psi, NoninferiorityConfig(**p["noninferiority"]), p["endpoint"], gate_alpha=p["gate_alpha"]
        )
        return getattr(result, p["field"])
    if op == "reader_mean":
        perf = reader_performance(sub, p["reader_ids"])
        return float(np.mean([getattr(x, p["metric"]) for x in perf.values()]))
    if op == "paired":
        counts = paired_for_reader(sub, p["reader_id"], p["endpoint"], p["threshold"])
        if p["test"] == "mcnemar":
            return mcnemar_exact(counts)
        return getattr(wald_noninferiority_paired(counts, p["margin"]), p["field"])
    if op == "group_comparison":
        bootstrap = BootstrapConfig(**p["bootstrap"]) if p.get("bootstrap") else None
        result = compare_reader_groups(
            sub, tuple(p["group_a"]), tuple(p["group_b"]), p["endpoint"], bootstrap
        )
        if p["field"] in ("lower", "upper"):
            return getattr(result.ci, p["field"])
        return getattr(result, p["field"])

    if "abnormality" in p:
        data = abnormality_eval(sub, **p["abnormality"])
    else:
        data = CaseSlice.from_cohort(sub)
    if op == "auc":
        return auc_score(data.scores, data.labels)
    if op == "partial_auc":
        return partial_auc(roc_curve(data.scores, data.labels), p["tpr_lo"], p["tpr_hi"])
    if op in ("sensitivity", "specificity"):
        return _statistic(op, p["threshold"])(data)
    if op == "bootstrap":
        ci = bootstrap_ci(_statistic(p["statistic"], p.get("threshold")), data, BootstrapConfig(**p["bootstrap"]))
        return getattr(ci, p["bound"])
    if op == "match":
        chooser = spec_at_sens if p["rule"] == "spec_at_sens" else sens_at_spec
        chosen = chooser(data.scores, data.labels, p["target"])
        return chosen.threshold if p["field"] == "threshold" else getattr(chosen.point, p["field"])
    raise ValueError(f"unknown provenance operation {op!r}")


class EvaluationService:
    """Runs the configured analyses over one prepared cohort and writes the report bundle"""

    def __init__(
        self,
        run: RunConfig,
        out_dir: Path,
        seed: int,
        include_excluded: bool = False,
        cohort: Optional[Cohort] = None,
    ) -> None:
        self.run = run
        self.seed = seed
        self.include_excluded = include_excluded or run.include_excluded_readers
        self.bundle = BundleRepository(out_dir)
        self.bootstrap = run.bootstrap.model_copy(update={"seed": seed})
        self.exclusions: Dict[str, Set[str]] = {}
        self._source = cohort
        self._cohort: Optional[Cohort] = None

    # -- cohort preparation ------------------------------------------------

    @property
    def cohort(self) -> Cohort:
        if self._cohort is None:
            cohort = self._source if self._source is not None else load_inputs(self.run)
            if self.run.exclude_outliers:
                cohort, self.exclusions = apply_outlier_exclusion(cohort)
            tags = cohort.cohort_tags()
            if self.run.primary_reader_cohort not in tags:
                raise ConfigError(
                    f"primary reader cohort {self.run.primary_reader_cohort!r} not among loaded readers {tags}"
                )
            self._cohort = cohort
        return self._cohort

    def scopes(self) -> List[str]:
        datasets = self.cohort.datasets
        return datasets + [COMBINED] if len(datasets) > 1 else datasets

    def primary_scope(self) -> str:
        return self.scopes()[-1]

    def scope(self, name: str) -> Cohort:
        return scope_cohort(self.cohort, {"scope": name})

    def readers(self, cohort: Cohort, tag: str) -> List[str]:
        """Readers of a cohort tag with at least one read in the given cohort"""
        read_by = {r.reader_id for r in cohort.reads}
        return [rid for rid in cohort.reader_ids(self.include_excluded, tag) if rid in read_by]

    def reader_groups(self, cohort: Cohort) -> List[Tuple[str, List[str]]]:
        groups = [(tag, self.readers(cohort, tag)) for tag in self.cohort.cohort_tags()]
        return [(tag, ids) for tag, ids in groups if ids]

    def _bootstrap_params(self) -> Dict[str, Any]:
        return self.bootstrap.model_dump()

    def _ci(
        self,
        output: str,
        key: str,
        statistic: str,
        data: CaseSlice,
        params: Dict[str, Any],
        threshold: Optional[float] = None,
    ) -> Tuple[Optional[float], Optional[float]]:
        try:
            ci = bootstrap_ci(_statistic(statistic, threshold), data, self.bootstrap)
        except DegenerateDataError as e:
            logger.warning("No %s interval for %s: %s", statistic, key, e)
            return None, None
        for bound in ("lower", "upper"):
            self.bundle.record(
                output,
                f"{key}:{statistic}_{bound}",
                "bootstrap",
                {**params, "statistic": statistic, "threshold": threshold, "bootstrap": self._bootstrap_params(), "bound": bound},
                getattr(ci, bound),
            )
        return ci.lower, ci.upper

    def _mrmc(
        self,
        output: str,
        key: str,
        cohort: Cohort,
        params: Dict[str, Any],
        reader_ids: Sequence[str],
        endpoint: Endpoint,
        threshold: float,
    ) -> Optional[MrmcResult]:
        config = self.run.noninferiority
        gate = config.alpha_primary
        try:
            psi = correctness_matrix(cohort, reader_ids, endpoint, threshold)
            result = mrmc_orh_test(psi, config, endpoint, gate_alpha=gate)
        except DegenerateDataError as e:
            logger.warning("Skipping %s %s comparison: %s", key, endpoint, e)
            return None
        base = {
            **params,
            "reader_ids": list(reader_ids),
            "endpoint": endpoint,
            "threshold": threshold,
            "noninferiority": config.model_dump(),
            "gate_alpha": gate,
        }
        for field in ("algorithm_accuracy", "reader_mean_accuracy", "delta", "p_noninferiority", "p_superiority"):
            value = getattr(result, field)
            if value is not None:
                self.bundle.record(output, f"{key}:{endpoint}:{field}", "mrmc", {**base, "field": field}, value)
        return result

    # -- validate ----------------------------------------------------------

    def validate(self) -> ValidationReport:
        report = validate(self.cohort)
        payload = report.model_dump(mode="json")
        payload["excluded_readers"] = {tag: sorted(ids) for tag, ids in sorted(self.exclusions.items())}
        self.bundle.write_json("validation.json", payload)
        return report

    # -- evaluate ----------------------------------------------------------

    def evaluate(self) -> Dict[str, Any]:
        """ROC, operating points, MRMC comparisons and reader panels per dataset and combined"""
        roc_rows: Rows = []
        op_rows: Rows = []
        test_rows: Rows = []
        panel_rows: Rows = []
        reader_rows: Rows = []
        comparison_rows: Rows = []
        results: Dict[Tuple[str, str, str, str], MrmcResult] = {}

        for scope in self.scopes():
            sub = self.scope(scope)
            data = CaseSlice.from_cohort(sub)
            if data.n_pos == 0 or data.n_neg == 0:
                logger.warning("Skipping %s: needs both TB-positive and TB-negative cases", scope)
                continue
            params = {"scope": scope}
            groups = self.reader_groups(sub)
            curve = roc_curve(data.scores, data.labels)
            roc_rows.append(self._roc_row(scope, sub, data, curve, groups))
            op_rows.extend(self._operating_point_rows(scope, data))

            for tag, ids in groups:
                perf = reader_performance(sub, ids)
                below = set(readers_below_curve(curve, perf))
                for rid, point in perf.items():
                    reader_rows.append(
                        {
                            "scope": scope,
                            "reader_cohort": tag,
                            "reader_id": rid,
                            "sensitivity": point.sensitivity,
                            "specificity": point.specificity,
                            "below_curve": rid in below,
                        }
                    )
                for metric in ENDPOINTS:
                    values = [getattr(x, metric) for x in perf.values()]
                    if not values:
                        continue
                    summary = panel_summary(values)
                    panel_rows.append(
                        {"scope": scope, "reader_cohort": tag, "metric": metric, **summary.model_dump(), "n_below_curve": len(below)}
                    )
                    self.bundle.record(
                        "tables/reader_panel.csv",
                        f"{scope}:{tag}:{metric}:mean",
                        "reader_mean",
                        {**params, "reader_ids": list(perf), "metric": metric},
                        summary.mean,
                    )

                for point in self.run.operating_points:
                    key = f"{scope}:{tag}:{point.name}"
                    for endpoint in ENDPOINTS:
                        result = self._mrmc("tables/noninferiority.csv", key, sub, params, ids, endpoint, point.threshold)
                        if result is None:
                            continue
                        results[(scope, tag, point.name, endpoint)] = result
                        test_rows.append(self._test_row(scope, tag, point, result))
                        self.bundle.write_json(
                            f"tests/{slug(scope)}__{slug(tag)}__{slug(point.name)}__{endpoint}.json",
                            _comparison_document(result),
                        )

            comparison_rows.extend(self._reader_cohort_comparison(scope, sub, groups))

        outcome = self._primary_outcome(results)
        excluded_rows = self._excluded_rows()

        self.bundle.write_csv("tables/roc_auc.csv", roc_rows, ROC_COLUMNS)
        self.bundle.write_csv("tables/operating_points.csv", op_rows, OPERATING_POINT_COLUMNS)
        self.bundle.write_csv("tables/noninferiority.csv", test_rows, TEST_COLUMNS)
        self.bundle.write_csv("tables/reader_panel.csv", panel_rows, PANEL_COLUMNS)
        self.bundle.write_csv("tables/readers.csv", reader_rows, READER_COLUMNS)
        self.bundle.write_csv("tables/reader_cohort_comparison.csv", comparison_rows, COMPARISON_COLUMNS)
        self.bundle.write_csv("tables/excluded_readers.csv", excluded_rows, ["reader_cohort", "reader_id", "positive_rate"])
        return {
            "roc": roc_rows,
            "operating_points": op_rows,
            "noninferiority": test_rows,
            "reader_panel": panel_rows,
            "reader_cohort_comparison": comparison_rows,
            "excluded_readers": excluded_rows,
            "primary_outcome": outcome,
        }

    def _roc_row(
        self,
        scope: str,
        sub: Cohort,
        data: CaseSlice,
        curve: Any,
        groups: List[Tuple[str, List[str]]],
    ) -> Dict[str, Any]:
        params = {"scope": scope}
        value = auc(curve)
        self.bundle.record("tables/roc_auc.csv", f"{scope}:auc", "auc", params, value)
        lower, upper = self._ci("tables/roc_auc.csv", scope, "auc", data, params)

        # partial AUC over the primary reader cohort's sensitivity range
        pauc, band = None, (None, None)
        primary = dict(groups).get(self.run.primary_reader_cohort)
        if primary:
            sens = [p.sensitivity for p in reader_performance(sub, primary).values()]
            if sens and min(sens) < max(sens):
                band = (min(sens), max(sens))
                pauc = partial_auc(curve, *band)
                self.bundle.record(
                    "tables/roc_auc.csv",
                    f"{scope}:partial_auc",
                    "partial_auc",
                    {**params, "tpr_lo": band[0], "tpr_hi": band[1]},
                    pauc,
                )

        self.bundle.write_frame(f"roc/{slug(scope)}.csv", curve_frame(curve))
        plot = curve_plot_data(curve)
        plot["auc_ci"] = [lower, upper]
        plot["readers"] = {
            tag: [
                {"reader_id": rid, "fpr": 1.0 - p.specificity, "tpr": p.sensitivity}
                for rid, p in reader_performance(sub, ids).items()
            ]
            for tag, ids in groups
        }
        self.bundle.write_json(f"plots/roc_{slug(scope)}.json", plot)
        return {
            "scope": scope,
            "n_cases": len(data),
            "n_positive": data.n_pos,
            "n_negative": data.n_neg,
            "auc": value,
            "auc_lower": lower,
            "auc_upper": upper,
            "partial_auc": pauc,
            "partial_auc_tpr_lo": band[0],
            "partial_auc_tpr_hi": band[1],
        }

    def _operating_point_rows(self, scope: str, data: CaseSlice) -> Rows:
        rows = []
        params = {"scope": scope}
        output = "tables/operating_points.csv"
        for named in self.run.operating_points:
            t = named.threshold
            key = f"{scope}:{named.name}"
            sens = sensitivity_at(t)(data)
            spec = specificity_at(t)(data)
            self.bundle.record(output, f"{key}:sensitivity", "sensitivity", {**params, "threshold": t}, sens)
            self.bundle.record(output, f"{key}:specificity", "specificity", {**params, "threshold": t}, spec)
            sens_lo, sens_hi = self._ci(output, key, "sensitivity", data, params, t)
            spec_lo, spec_hi = self._ci(output, key, "specificity", data, params, t)
            rows.append(
                {
                    "scope": scope,
                    "operating_point": named.name,
                    "threshold": t,
                    "sensitivity": sens,
                    "sensitivity_lower": sens_lo,
                    "sensitivity_upper": sens_hi,
                    "specificity": spec,
                    "specificity_lower": spec_lo,
                    "specificity_upper": spec_hi,
                    "who_compliant": sens >= WHO_MIN_SENSITIVITY - EPS and spec >= WHO_MIN_SPECIFICITY - EPS,
                }
            )
        return rows

    def _test_row(self, scope: str, tag: str, point: NamedThreshold, result: MrmcResult) -> Dict[str, Any]:
        return {
            "scope": scope,
            "reader_cohort": tag,
            "operating_point": point.name,
            "threshold": point.threshold,
            "endpoint": result.endpoint,
            "n_readers": result.n_readers,
            "n_cases": result.n_cases,
            "algorithm": result.algorithm_accuracy,
            "readers_mean": result.reader_mean_accuracy,
            "delta": result.delta,
            "se": result.se,
            "df": result.df,
            "p_noninferiority": result.p_noninferiority,
            "p_superiority": result.p_superiority,
            "flags": ";".join(result.flags),
        }

    def _primary_outcome(self, results: Dict[Tuple[str, str, str, str], MrmcResult]) -> Optional[TestOutcome]:
        if not self.scopes():
            return None
        key = (self.primary_scope(), self.run.primary_reader_cohort, self.run.primary_operating_point)
        primary = {e: results[(*key, e)] for e in ENDPOINTS if (*key, e) in results}
        if len(primary) != len(ENDPOINTS):
            logger.warning("Primary analysis incomplete for %s; no sequential outcome", ":".join(key))
            return None
        outcome = sequential_primary_analysis(primary, self.run.noninferiority)
        self.bundle.write_json(
            "tests/primary_outcome.json",
            {
                "scope": key[0],
                "reader_cohort": key[1],
                "operating_point": key[2],
                **outcome.model_dump(mode="json"),
            },
        )
        return outcome

    def _reader_cohort_comparison(self, scope: str, sub: Cohort, groups: List[Tuple[str, List[str]]]) -> Rows:
        available = dict(groups)
        a, b = self.run.primary_reader_cohort, self.run.comparison_reader_cohort
        if not b or a not in available or b not in available:
            return []
        rows = []
        for endpoint in ENDPOINTS:
            try:
                result = compare_reader_groups(sub, (a, available[a]), (b, available[b]), endpoint, self.bootstrap)
            except DegenerateDataError as e:
                logger.warning("Skipping %s reader cohort comparison (%s): %s", scope, endpoint, e)
                continue
            params = {
                "scope": scope,
                "group_a": [a, available[a]],
                "group_b": [b, available[b]],
                "endpoint": endpoint,
                "bootstrap": self._bootstrap_params(),
            }
            for field, value in (("difference", result.difference), ("lower", result.ci.lower), ("upper", result.ci.upper)):
                self.bundle.record(
                    "tables/reader_cohort_comparison.csv",
                    f"{scope}:{endpoint}:{field}",
                    "group_comparison",
                    {**params, "field": field},
                    value,
                )
            rows.append(
                {
                    "scope": scope,
                    "group_a": a,
                    "group_b": b,
                    "endpoint": endpoint,
                    "mean_a": result.mean_a,
                    "mean_b": result.mean_b,
                    "difference": result.difference,
                    "lower": result.ci.lower,
                    "upper": result.ci.upper,
                }
            )
        return rows

    def _excluded_rows(self) -> Rows:
        if not self.exclusions:
            return []
        rates = reader_positive_rates(self.cohort, include_excluded=True)
        return [
            {"reader_cohort": tag, "reader_id": rid, "positive_rate": rates[rid]}
            for tag, ids in sorted(self.exclusions.items())
            for rid in sorted(ids)
        ]

    # -- match -------------------------------------------------------------

    def match(self, mode: str, target: Optional[float] = None, match_on: Optional[str] = None) -> Rows:
        """Operating points matched to WHO targets, the mean reader or each reader"""
        if mode not in MATCH_MODES:
            raise ConfigError(f"unknown match mode {mode!r}; choose from {', '.join(MATCH_MODES)}")
        if match_on not in (None, "sensitivity", "specificity"):
            raise ConfigError(f"--match-on must be sensitivity or specificity, got {match_on!r}")

        output = f"tables/match_{mode}.csv"
        rows: Rows = []
        records: List[Dict[str, Any]] = []
        for scope in self.scopes():
            sub = self.scope(scope)
            data = CaseSlice.from_cohort(sub)
            if data.n_pos == 0 or data.n_neg == 0:
                logger.warning("Skipping %s: needs both TB-positive and TB-negative cases", scope)
                continue
            if mode in ("who-sens", "who-spec"):
                axis = "sensitivity" if mode == "who-sens" else "specificity"
                goal = target if target is not None else (0.90 if axis == "sensitivity" else 0.70)
                chosen = self._target(output, {"scope": scope}, f"{scope}:{mode}", data, axis, goal)
                rows.append(self._match_row(scope, None, None, axis, chosen))
                records.append({"scope": scope, **chosen.model_dump(mode="json")})
                continue

            for tag, ids in self.reader_groups(sub):
                axes = [match_on] if match_on else list(ENDPOINTS)
                if mode == "mean-reader":
                    perf = reader_performance(sub, ids)
                    if not perf:
                        continue
                    for axis in axes:
                        chosen = match_mean_reader(data.scores, data.labels, list(perf.values()), axis)
                        self._record_match(output, {"scope": scope}, f"{scope}:{tag}:{axis}", chosen, axis)
                        row = self._match_row(scope, tag, None, axis, chosen)
                        row["reader_sensitivity"] = float(np.mean([x.sensitivity for x in perf.values()]))
                        row["reader_specificity"] = float(np.mean([x.specificity for x in perf.values()]))
                        rows.append(row)
                        records.append({"scope": scope, "reader_cohort": tag, **chosen.model_dump(mode="json")})
                else:
                    for rid in ids:
                        for axis in axes:
                            row = self._per_reader(output, scope, sub, tag, rid, axis)
                            if row:
                                rows.append(row)

        columns = MATCH_COLUMNS if mode != "per-reader" else PER_READER_COLUMNS
        self.bundle.write_csv(output, rows, columns)
        if records:
            self.bundle.write_json(f"tables/match_{mode}.json", records)
        return rows

    def _record_match(
        self, output: str, params: Dict[str, Any], key: str, chosen: OperatingPoint, axis: str
    ) -> None:
        rule = "spec_at_sens" if axis == "sensitivity" else "sens_at_spec"
        base = {**params, "rule": rule, "target": chosen.target}
        for field, value in (
            ("threshold", chosen.threshold),
            ("sensitivity", chosen.point.sensitivity),
            ("specificity", chosen.point.specificity),
        ):
            self.bundle.record(output, f"{key}:{field}", "match", {**base, "field": field}, value)

    def _target(self, output: str, params: Dict[str, Any], key: str, data: CaseSlice, axis: str, goal: float) -> OperatingPoint:
        if axis == "sensitivity":
            chosen = spec_at_sens(data.scores, data.labels, goal)
        else:
            chosen = sens_at_spec(data.scores, data.labels, goal)
        self._record_match(output, params, key, chosen, axis)
        return chosen

    def _match_row(self, scope: str, tag: Optional[str], rid: Optional[str], axis: str, chosen: OperatingPoint) -> Dict[str, Any]:
        return {
            "scope": scope,
            "reader_cohort": tag,
            "match_on": axis,
            "target": chosen.target,
            "threshold": chosen.threshold,
            "sensitivity": chosen.point.sensitivity,
            "specificity": chosen.point.specificity,
            "who_compliant": who_compliance(chosen.point),
        }

    def _per_reader(self, output: str, scope: str, sub: Cohort, tag: str, rid: str, axis: str) -> Optional[Dict[str, Any]]:
        params = {"scope": scope, "reader_cases": rid}
        own = scope_cohort(self.cohort, params)
        perf = reader_performance(own, [rid])
        if rid not in perf:
            logger.warning("Reader %s has too few reads in %s to match", rid, scope)
            return None
        reader = perf[rid]
        data = CaseSlice.from_cohort(own)
        chosen = match_individual_reader(data.scores, data.labels, reader, axis)
        self._record_match(output, params, f"{scope}:{rid}:{axis}", chosen, axis)

        compared: Endpoint = "sensitivity" if axis == "specificity" else "specificity"
        counts = paired_for_reader(own, rid, compared, chosen.threshold)
        margin = self.run.noninferiority.margin
        wald = wald_noninferiority_paired(counts, margin)
        p_mcnemar = mcnemar_exact(counts)
        base = {**params, "reader_id": rid, "endpoint": compared, "threshold": chosen.threshold, "margin": margin}
        self.bundle.record(output, f"{scope}:{rid}:{axis}:delta", "paired", {**base, "test": "wald", "field": "delta"}, wald.delta)
        self.bundle.record(output, f"{scope}:{rid}:{axis}:p_wald", "paired", {**base, "test": "wald", "field": "p_value"}, wald.p_value)
        self.bundle.record(output, f"{scope}:{rid}:{axis}:p_mcnemar", "paired", {**base, "test": "mcnemar"}, p_mcnemar)
        return {
            "scope": scope,
            "reader_cohort": tag,
            "reader_id": rid,
            "match_on": axis,
            "target": chosen.target,
            "threshold": chosen.threshold,
            "algorithm_sensitivity": chosen.point.sensitivity,
            "algorithm_specificity": chosen.point.specificity,
            "reader_sensitivity": reader.sensitivity,
            "reader_specificity": reader.specificity,
            "compared_endpoint": compared,
            "delta": wald.delta,
            "p_wald_noninferiority": wald.p_value,
            "p_mcnemar": p_mcnemar,
            "flags": ";".join(wald.flags),
        }

    # -- subgroups ---------------------------------------------------------

    def subgroup(self) -> Dict[str, Rows]:
        """Strata, technical-issue groups and abnormality ROC analyses"""
        cohort = self.cohort
        specs = list(self.run.strata) or default_strata()
        specs += age_band_specs(cohort, self.run.age_band_edges)

        strata_rows = []
        for spec in specs:
            result = stratify(cohort, spec, self.include_excluded)
            params = {"scope": COMBINED, "stratum": spec.model_dump(mode="json"), "include_excluded": self.include_excluded}
            row = {"stratum": spec.name, "n_unknown": result.n_unknown, "suppressed": result.suppressed}
            if result.suppressed:
                row.update({"n_cases": result.n_cases, "note": f"suppressed (< {spec.min_cases} cases)"})
            else:
                row.update(self._stratum_stats("tables/subgroups.csv", f"stratum:{spec.name}", result.cohort, params))
            strata_rows.append(row)

        issue_rows = []
        for label, sub in technical_issue_groups(cohort, self.include_excluded):
            params = {"scope": COMBINED, "technical_issue_group": label, "include_excluded": self.include_excluded}
            if not sub.cases:
                logger.warning("Technical-issue group %s is empty", label)
                issue_rows.append({"group": label, "n_cases": 0, "note": "empty"})
                continue
            issue_rows.append({"group": label, **self._stratum_stats("tables/technical_issues.csv", f"issues:{label}", sub, params)})

        abnormality_rows = self._abnormality_rows()
        self.bundle.write_csv("tables/subgroups.csv", strata_rows, ["stratum", "n_unknown", "suppressed", *STRATUM_COLUMNS])
        self.bundle.write_csv("tables/technical_issues.csv", issue_rows, ["group", *STRATUM_COLUMNS])
        self.bundle.write_csv("tables/abnormality.csv", abnormality_rows, ABNORMALITY_COLUMNS)
        return {"subgroups": strata_rows, "technical_issues": issue_rows, "abnormality": abnormality_rows}

    def _stratum_stats(self, output: str, key: str, sub: Cohort, params: Dict[str, Any]) -> Dict[str, Any]:
        data = CaseSlice.from_cohort(sub)
        threshold = self.run.primary_threshold
        row: Dict[str, Any] = {"n_cases": len(data), "n_positive": data.n_pos, "n_negative": data.n_neg}
        if data.n_pos and data.n_neg:
            row["auc"] = auc_score(data.scores, data.labels)
            self.bundle.record(output, f"{key}:auc", "auc", params, row["auc"])
            row["auc_lower"], row["auc_upper"] = self._ci(output, key, "auc", data, params)
        elif data.n_pos:
            row["note"] = "sensitivity only"
        elif data.n_neg:
            row["note"] = "specificity only"

        ids = self.readers(sub, self.run.primary_reader_cohort)
        for endpoint, count in (("sensitivity", data.n_pos), ("specificity", data.n_neg)):
            if not count:
                continue
            value = _statistic(endpoint, threshold)(data)
            row[endpoint] = value
            self.bundle.record(output, f"{key}:{endpoint}", endpoint, {**params, "threshold": threshold}, value)
            row[f"{endpoint}_lower"], row[f"{endpoint}_upper"] = self._ci(output, key, endpoint, data, params, threshold)
            if len(ids) >= 2 and count >= 2:
                result = self._mrmc(output, key, sub, params, ids, endpoint, threshold)
                if result is not None:
                    row[f"reader_{endpoint}"] = result.reader_mean_accuracy
                    row[f"p_ni_{endpoint}"] = result.p_noninferiority
        return row

    def _abnormality_rows(self) -> Rows:
        settings = self.run.abnormality
        if not settings.ground_truth_readers:
            return []
        scope = settings.dataset or COMBINED
        sub = self.scope(scope)
        rows = []
        for mode in ("tb_or_abnormal", "abnormal_only"):
            for k in (1, 2, 3):
                spec = {"k_of_3": k, "mode": mode, "ground_truth_readers": list(settings.ground_truth_readers)}
                params = {"scope": scope, "abnormality": spec}
                key = f"abnormality:{mode}:{k}"
                try:
                    data = abnormality_eval(sub, k, mode, settings.ground_truth_readers)
                    value = auc_score(data.scores, data.labels)
                except (DegenerateDataError, ValueError) as e:
                    logger.warning("Skipping abnormality analysis %s k=%d: %s", mode, k, e)
                    continue
                self.bundle.record("tables/abnormality.csv", f"{key}:auc", "auc", params, value)
                lower, upper = self._ci("tables/abnormality.csv", key, "auc", data, params)
                rows.append(
                    {
                        "mode": mode,
                        "k_of_3": k,
                        "n_cases": len(data),
                        "n_positive": data.n_pos,
                        "auc": value,
                        "auc_lower": lower,
                        "auc_upper": upper,
                    }
                )
        return rows

    # -- distribution shift ------------------------------------------------

    def dist_shift(self) -> Dict[str, Any]:
        """Pairwise KS tests across datasets, score summaries and histograms"""
        cohort = self.cohort
        datasets = cohort.datasets
        edges = np.round(np.arange(0.0, 1.0 + HISTOGRAM_BIN_WIDTH / 2, HISTOGRAM_BIN_WIDTH), 2)

        def scores(name: str, label: Optional[int]) -> np.ndarray:
            return np.array(
                [c.dls_tb_score for c in cohort.cases if c.dataset == name and (label is None or c.tb_label == label)]
            )

        matrices: Dict[str, Rows] = {}
        pair_rows: Rows = []
        summary_rows: Rows = []
        histograms: Dict[str, Dict[str, List[int]]] = {name: {} for name in datasets}
        for slice_name, label in KS_SLICES.items():
            values = {name: scores(name, label) for name in datasets}
            for name in datasets:
                v = values[name]
                summary_rows.append(
                    {
                        "dataset": name,
                        "slice": slice_name,
                        "n": int(v.size),
                        "mean": float(v.mean()) if v.size else None,
                        "sd": float(v.std(ddof=1)) if v.size > 1 else None,
                    }
                )
                histograms[name][slice_name] = np.histogram(v, bins=edges)[0].tolist()

            matrix = []
            for i, a in enumerate(datasets):
                row: Dict[str, Any] = {"dataset": a}
                for j, b in enumerate(datasets):
                    if j >= i:
                        row[b] = ""
                        continue
                    if not values[a].size or not values[b].size:
                        row[b] = "NA"
                        continue
                    result = ks_two_sample(values[a], values[b])
                    row[b] = result.p_value
                    pair_rows.append(
                        {
                            "slice": slice_name,
                            "dataset_a": a,
                            "dataset_b": b,
                            "statistic": result.statistic,
                            "p_value": result.p_value,
                            "n1": result.n1,
                            "n2": result.n2,
                        }
                    )
                    for field in ("statistic", "p_value"):
                        self.bundle.record(
                            f"tables/ks_{slice_name}.csv",
                            f"{slice_name}:{a}:{b}:{field}",
                            "ks",
                            {"scope": COMBINED, "dataset_a": a, "dataset_b": b, "label": label, "field": field},
                            getattr(result, field),
                        )
                matrix.append(row)
            matrices[slice_name] = matrix
            self.bundle.write_csv(f"tables/ks_{slice_name}.csv", matrix, ["dataset", *datasets])

        self.bundle.write_csv("tests/ks_pairs.csv", pair_rows, ["slice", "dataset_a", "dataset_b", "statistic", "p_value", "n1", "n2"])
        self.bundle.write_csv("tables/score_summary.csv", summary_rows, ["dataset", "slice", "n", "mean", "sd"])
        self.bundle.write_json(
            "plots/score_histograms.json",
            {"bin_edges": edges.tolist(), "bin_width": HISTOGRAM_BIN_WIDTH, "datasets": histograms},
        )
        return {"matrices": matrices, "pairs": pair_rows, "summary": summary_rows, "datasets": datasets}

    # -- cost --------------------------------------------------------------

    def measured_point(self) -> Tuple[float, float]:
        settings = self.run.cost
        if settings.sensitivity is not None and settings.specificity is not None:
            return settings.sensitivity, settings.specificity
        data = CaseSlice.from_cohort(self.scope(self.primary_scope()))
        t = self.run.primary_threshold
        return sensitivity_at(t)(data), specificity_at(t)(data)

    def cost(self) -> Dict[str, Rows]:
        """Prevalence sweeps for the measured point, reference devices and NAAT alone"""
        settings = self.run.cost
        costs = {
            "cost_confirmatory_test": settings.cost_confirmatory_test,
            "cost_cxr": settings.cost_cxr,
            "cost_cad": settings.cost_cad,
        }
        se, sp = self.measured_point()
        scenarios = [("measured", se, sp)] + [(s.name, s.sensitivity, s.specificity) for s in settings.reference_scenarios]

        rows: Rows = []
        workflow_rows: Rows = []
        plot: Dict[str, Rows] = {}
        for name, sens, spec in scenarios:
            template = CostInputs(prevalence=settings.p_min, sensitivity=sens, specificity=spec, **costs)
            sweep = prevalence_sweep(template, settings.p_min, settings.p_max, settings.step)
            workflow_rows.append(
                {
                    "scenario": name,
                    "sensitivity": sens,
                    "specificity": spec,
                    "workflow_sensitivity": workflow_sensitivity(template),
                    "meets_who_floor": meets_who_floor(template),
                    "cost_per_case_decreasing_in_prevalence": sweep.cost_per_case_decreasing_in_prevalence,
                    "savings_increasing_as_prevalence_falls": sweep.savings_increasing_as_prevalence_falls,
                }
            )
            for result in sweep.rows:
                inputs = template.model_copy(update={"prevalence": result.prevalence}).model_dump()
                for field in ("cost_per_case_detected", "savings_fraction"):
                    self.bundle.record(
                        "cost/cost_sweep.csv",
                        f"{name}:{result.prevalence}:{field}",
                        "cost",
                        {"inputs": inputs, "field": field},
                        getattr(result, field),
                    )
                rows.append(_cost_row(name, result))

        for p in prevalence_grid(settings.p_min, settings.p_max, settings.step):
            result = evaluate_naat_only(p, settings.cost_confirmatory_test)
            self.bundle.record(
                "cost/cost_sweep.csv",
                f"naat_only:{p}:cost_per_case_detected",
                "naat_only",
                {"prevalence": p, "cost_confirmatory_test": settings.cost_confirmatory_test, "field": "cost_per_case_detected"},
                result.cost_per_case_detected,
            )
            rows.append(_cost_row("naat_only", result))

        for row in rows:
            plot.setdefault(row["scenario"], []).append(
                {"p": row["p"], "cost_per_case": row["cost_per_case"], "savings": row["savings"]}
            )
        self.bundle.write_csv("cost/cost_sweep.csv", rows, COST_COLUMNS)
        self.bundle.write_csv("cost/workflow.csv", workflow_rows, list(workflow_rows[0]))
        self.bundle.write_json("plots/cost_curve.json", plot)
        return {"sweep": rows, "workflow": workflow_rows}

    # -- bundle ------------------------------------------------------------

    def config_hash(self) -> str:
        return digest(self.run.model_dump(mode="json", exclude={"out_dir", "seed"}))

    def finalize(self) -> Path:
        """Write manifest.json with config hash, seed, versions and provenance"""
        versions = {
            "tbeval": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
        }
        return self.bundle.write_manifest(self.config_hash(), self.seed, versions)


def _comparison_document(result: MrmcResult) -> Dict[str, Any]:
    return {
        "endpoint": result.endpoint,
        "delta": result.delta,
        "se": result.se,
        "df": result.df,
        "p_ni": result.p_noninferiority,
        "p_sup": result.p_superiority,
        "flags": result.flags,
        "components": {"s_d_squared": result.s_d_squared, "cov2_bar": result.cov2_bar},
        "n_readers": result.n_readers,
        "n_cases": result.n_cases,
        "margin": result.margin,
    }


def _cost_row(scenario: str, result: Any) -> Dict[str, Any]:
    return {
        "scenario": scenario,
        "p": result.prevalence,
        "rate": result.triage_positive_rate,
        "cost_per_patient": round_money(result.cost_per_patient_screened),
        "cost_per_case": round_money(result.cost_per_case_detected),
        "naat_only_cost_per_case": round_money(result.naat_only_cost_per_case),
        "savings": result.savings_fraction,
    }


ROC_COLUMNS = [
    "scope", "n_cases", "n_positive", "n_negative", "auc", "auc_lower", "auc_upper",
    "partial_auc", "partial_auc_tpr_lo", "partial_auc_tpr_hi",
]
OPERATING_POINT_COLUMNS = [
    "scope", "operating_point", "threshold", "sensitivity", "sensitivity_lower", "sensitivity_upper",
    "specificity", "specificity_lower", "specificity_upper", "who_compliant",
]
TEST_COLUMNS = [
    "scope", "reader_cohort", "operating_point", "threshold", "endpoint", "n_readers", "n_cases",
    "algorithm", "readers_mean", "delta", "se", "df", "p_noninferiority", "p_superiority", "flags",
]
PANEL_COLUMNS = [
    "scope", "reader_cohort", "metric", "n_readers", "mean", "median", "q1", "q3", "minimum", "maximum", "n_below_curve",
]
READER_COLUMNS = ["scope", "reader_cohort", "reader_id", "sensitivity", "specificity", "below_curve"]
COMPARISON_COLUMNS = ["scope", "group_a", "group_b", "endpoint", "mean_a", "mean_b", "difference", "lower", "upper"]
MATCH_COLUMNS = [
    "scope", "reader_cohort", "match_on", "target", "threshold", "sensitivity", "specificity",
    "who_compliant", "reader_sensitivity", "reader_specificity",
]
PER_READER_COLUMNS = [
    "scope", "reader_cohort", "reader_id", "match_on", "target", "threshold", "algorithm_sensitivity",
    "algorithm_specificity", "reader_sensitivity", "reader_specificity", "compared_endpoint", "delta",
    "p_wald_noninferiority", "p_mcnemar", "flags",
]
STRATUM_COLUMNS = [
    "n_cases", "n_positive", "n_negative", "auc", "auc_lower", "auc_upper",
    "sensitivity", "sensitivity_lower", "sensitivity_upper", "reader_sensitivity", "p_ni_sensitivity",
    "specificity", "specificity_lower", "specificity_upper", "reader_specificity", "p_ni_specificity", "note",
]
ABNORMALITY_COLUMNS = ["mode", "k_of_3", "n_cases", "n_positive", "auc", "auc_lower", "auc_upper"]
COST_COLUMNS = ["scenario", "p", "rate", "cost_per_patient", "cost_per_case", "naat_only_cost_per_case", "savings"]
