"""Hypothesis tests comparing the standalone model with radiologists.

ORH-style MRMC noninferiority on binary endpoints, paired per-reader tests
(Wald noninferiority, exact McNemar) and two-sample Kolmogorov-Smirnov.
"""

import logging
import math
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import special, stats

from .errors import DegenerateDataError, IncompleteDesignError
from .models import (
    BootstrapConfig,
    Cohort,
    Endpoint,
    EndpointLabel,
    GroupComparison,
    KsResult,
    MrmcResult,
    NoninferiorityConfig,
    PairedCounts,
    TestOutcome,
    WaldResult,
)
from .roc_metrics import CaseSlice, bootstrap_ci

logger = logging.getLogger(__name__)


def endpoint_label(endpoint: Endpoint) -> int:
    """Ground-truth class an endpoint is measured on"""
    if endpoint == "sensitivity":
        return 1
    if endpoint == "specificity":
        return 0
    raise ValueError(f"unknown endpoint {endpoint!r}")


def reader_correctness(
    cohort: Cohort, reader_ids: Sequence[str], endpoint: Endpoint
) -> Tuple[np.ndarray, List[str]]:
    """Reader x case matrix of correct calls on the endpoint subset, with the case ids"""
    label = endpoint_label(endpoint)
    case_ids = [c.case_id for c in cohort.cases if c.tb_label == label]
    if not case_ids:
        raise DegenerateDataError(f"no cases with tb_label={label} for the {endpoint} endpoint")

    calls = {(r.reader_id, r.case_id): r.tb_call for r in cohort.reads}
    matrix = np.zeros((len(reader_ids), len(case_ids)), dtype=float)
    gaps = []
    for j, rid in enumerate(reader_ids):
        for k, cid in enumerate(case_ids):
            call = calls.get((rid, cid))
            if call is None:
                gaps.append((rid, cid))
            else:
                matrix[j, k] = float(call == label)
    if gaps:
        raise IncompleteDesignError(gaps)
    return matrix, case_ids


def correctness_matrix(
    cohort: Cohort, reader_ids: Sequence[str], endpoint: Endpoint, threshold: float
) -> np.ndarray:
    """Row 0 is the model at the threshold, rows 1..J the readers; 1 means correct"""
    readers, case_ids = reader_correctness(cohort, reader_ids, endpoint)
    label = endpoint_label(endpoint)
    score = {c.case_id: c.dls_tb_score for c in cohort.cases}
    algorithm = np.array([float(int(score[cid] >= threshold) == label) for cid in case_ids])
    return np.vstack([algorithm, readers])


def _leave_one_out(values: np.ndarray) -> np.ndarray:
    n = values.shape[-1]
    if n < 2:
        raise DegenerateDataError(f"jackknife needs at least 2 cases, got {n}")
    return (values.sum(axis=-1, keepdims=True) - values) / (n - 1)


def jackknife_covariance_matrix(values: Any) -> np.ndarray:
    """Jackknife covariance of the row means of a (rows x cases) matrix"""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    n = values.shape[1]
    loo = _leave_one_out(values)
    dev = loo - loo.mean(axis=1, keepdims=True)
    return (n - 1) / n * (dev @ dev.T)


def jackknife_covariance(values: Any, a: int, b: int) -> float:
    """Leave-one-case-out covariance between the means of rows a and b"""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    return float(jackknife_covariance_matrix(values[[a, b]])[0, 1])


def _one_sided(statistic: float, se: float, df: float) -> float:
    return float(stats.t.sf(statistic / se, df))


def orh_from_components(
    endpoint: Endpoint,
    d: Any,
    cov2_bar: float,
    n_cases: int,
    config: NoninferiorityConfig,
    gate_alpha: Optional[float] = None,
    algorithm_accuracy: Optional[float] = None,
    reader_mean_accuracy: Optional[float] = None,
) -> MrmcResult:
    """Test from per-reader differences d_j and the mean between-reader covariance"""
    d = np.asarray(d, dtype=float)
    n_readers = d.size
    if n_readers < 2:
        raise DegenerateDataError(f"MRMC test needs at least 2 readers, got {n_readers}")

    flags = []
    delta = float(d.mean())
    # identical differences leave rounding noise in var(); treat them as exactly zero
    s_d_squared = 0.0 if np.ptp(d) == 0 else float(d.var(ddof=1))
    cov2 = max(float(cov2_bar), 0.0)
    if cov2_bar < 0:
        flags.append("cov2_truncated")
    se = math.sqrt(s_d_squared / n_readers + cov2)

    if s_d_squared > 0:
        df = (n_readers - 1) * (1.0 + n_readers * cov2 / s_d_squared) ** 2
    else:
        df = float(n_readers - 1)
        if cov2 > 0:
            flags.append("df_singular")

    margin = config.margin
    if se > 0:
        p_ni = _one_sided(delta + margin, se, df)
    else:
        flags.append("zero_se")
        p_ni = 0.0 if delta + margin > 0 else 1.0

    gate = config.alpha if gate_alpha is None else gate_alpha
    p_sup = None
    if p_ni < gate:
        if se > 0:
            p_sup = _one_sided(delta, se, df)
        else:
            p_sup = 0.0 if delta > 0 else 1.0

    if flags:
        logger.warning("MRMC %s test degenerate: %s", endpoint, ", ".join(flags))
    return MrmcResult(
        endpoint=endpoint,
        delta=delta,
        se=se,
        df=df,
        p_noninferiority=p_ni,
        p_superiority=p_sup,
        s_d_squared=s_d_squared,
        cov2_bar=float(cov2_bar),
        n_readers=n_readers,
        n_cases=n_cases,
        margin=margin,
        algorithm_accuracy=algorithm_accuracy,
        reader_mean_accuracy=reader_mean_accuracy,
        flags=flags,
    )


def mrmc_orh_test(
    psi: Any,
    config: NoninferiorityConfig,
    endpoint: Endpoint = "sensitivity",
    gate_alpha: Optional[float] = None,
) -> MrmcResult:
    """Noninferiority (then superiority) of the model row against the reader average.

    psi has the model in row 0 and one row per reader; columns are cases.
    """
    psi = np.asarray(psi, dtype=float)
    if psi.ndim != 2 or psi.shape[0] < 3:
        raise DegenerateDataError("MRMC test needs the model row and at least 2 reader rows")
    n_cases = psi.shape[1]
    if n_cases < 2:
        raise DegenerateDataError(f"MRMC test needs at least 2 cases, got {n_cases}")

    differences = psi[0] - psi[1:]
    if not config.higher_is_better:
        differences = -differences
    cov = jackknife_covariance_matrix(differences)
    off_diagonal = cov[~np.eye(cov.shape[0], dtype=bool)]

    return orh_from_components(
        endpoint,
        differences.mean(axis=1),
        float(off_diagonal.mean()),
        n_cases,
        config,
        gate_alpha=gate_alpha,
        algorithm_accuracy=float(psi[0].mean()),
        reader_mean_accuracy=float(psi[1:].mean()),
    )


def sequential_primary_analysis(
    results: Mapping[str, MrmcResult], config: NoninferiorityConfig
) -> TestOutcome:
    """Noninferiority at alpha_primary, then superiority at the uncorrected alpha"""
    labels: Dict[str, EndpointLabel] = {}
    for endpoint, result in results.items():
        if result.p_noninferiority >= config.alpha_primary:
            labels[endpoint] = "not_noninferior"
        elif result.p_superiority is not None and result.p_superiority < config.alpha:
            labels[endpoint] = "superior"
        else:
            labels[endpoint] = "noninferior"
    return TestOutcome(labels=labels, alpha_primary=config.alpha_primary, alpha=config.alpha)


def paired_counts(algorithm_correct: Any, reader_correct: Any) -> PairedCounts:
    a = np.asarray(algorithm_correct, dtype=bool)
    r = np.asarray(reader_correct, dtype=bool)
    if a.shape != r.shape:
        raise ValueError("paired correctness vectors must have equal length")
    return PairedCounts(
        n11=int(np.sum(a & r)),
        n10=int(np.sum(a & ~r)),
        n01=int(np.sum(~a & r)),
        n00=int(np.sum(~a & ~r)),
    )


def mcnemar_exact(counts: PairedCounts) -> float:
    """Exact two-sided McNemar p-value on the discordant pairs"""
    m = counts.b + counts.c
    if m == 0:
        return 1.0
    return float(min(1.0, 2.0 * stats.binom.cdf(min(counts.b, counts.c), m, 0.5)))


def wald_noninferiority_paired(counts: PairedCounts, margin: float) -> WaldResult:
    """One-sided Wald test that the model's accuracy is no worse than the reader's minus margin"""
    n = counts.n
    if n < 1:
        raise DegenerateDataError("paired Wald test needs at least one case")
    b, c = counts.b, counts.c
    delta = (b - c) / n
    variance = (b + c - (b - c) ** 2 / n) / n**2
    if variance <= 0:
        p = 0.0 if delta + margin > 0 else 1.0
        return WaldResult(delta=delta, variance=0.0, p_value=p, flags=["zero_variance"])
    z = (delta + margin) / math.sqrt(variance)
    return WaldResult(delta=delta, variance=variance, z=z, p_value=float(stats.norm.sf(z)))


def ks_two_sample(a: Any, b: Any) -> KsResult:
    """Two-sample KS statistic with the small-sample-corrected asymptotic p-value"""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise DegenerateDataError("KS test needs two non-empty samples")

    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    statistic = float(np.max(np.abs(cdf_a - cdf_b)))

    if statistic == 0.0:
        p_value = 1.0
    else:
        root = math.sqrt(a.size * b.size / (a.size + b.size))
        lam = (root + 0.12 + 0.11 / root) * statistic
        p_value = float(np.clip(special.kolmogorov(lam), 0.0, 1.0))
    return KsResult(statistic=statistic, p_value=p_value, n1=int(a.size), n2=int(b.size))


def compare_reader_groups(
    cohort: Cohort,
    group_a: Tuple[str, Sequence[str]],
    group_b: Tuple[str, Sequence[str]],
    endpoint: Endpoint,
    config: Optional[BootstrapConfig] = None,
) -> GroupComparison:
    """Mean accuracy of reader group A minus group B, with a case-bootstrap interval"""
    name_a, ids_a = group_a
    name_b, ids_b = group_b
    if not ids_a or not ids_b:
        raise DegenerateDataError("both reader groups need at least one reader")
    matrix, _ = reader_correctness(cohort, [*ids_a, *ids_b], endpoint)
    split = len(ids_a)

    def difference(data: CaseSlice) -> float:
        return float(data.extra[:, :split].mean() - data.extra[:, split:].mean())

    # one class only, so stratified resampling reduces to plain case resampling
    n_cases = matrix.shape[1]
    data = CaseSlice.of(np.zeros(n_cases), np.ones(n_cases, dtype=int), extra=matrix.T)
    ci = bootstrap_ci(difference, data, config) if config else None
    mean_a = float(matrix[:split].mean())
    mean_b = float(matrix[split:].mean())
    return GroupComparison(
        endpoint=endpoint,
        group_a=name_a,
        group_b=name_b,
        mean_a=mean_a,
        mean_b=mean_b,
        difference=mean_a - mean_b,
        ci=ci,
    )
