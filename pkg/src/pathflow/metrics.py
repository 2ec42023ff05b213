"""Per-gene accuracy metrics and the ensemble uncertainty suite.

Point metrics (Pearson correlation, RMSE) are computed per gene across
samples in log space. Uncertainty metrics treat each (sample, gene) pair
as one prediction backed by an ensemble of generated values: central
empirical intervals for coverage, a Gaussian fit (ensemble mean/variance)
for NLL, and the rank correlation between ensemble variance and absolute
error for usefulness of the variance signal.

A Pearson correlation against a constant column is undefined and reported
as NaN; aggregate statistics skip NaN entries and count them instead of
coercing them to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VAR_FLOOR = 1e-6

TOP_K_DEFAULT = (1000, 500, 200, 100, 50, 20)


def pcc(pred, truth) -> float:
    """Pearson correlation of two equal-length columns; NaN if either is constant."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError(f"column shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.size < 2:
        raise ValueError("pcc needs at least 2 observations")
    dp = pred - pred.mean()
    dt = truth - truth.mean()
    denom = np.sqrt((dp * dp).sum()) * np.sqrt((dt * dt).sum())
    if denom == 0.0:
        return float("nan")
    return float((dp * dt).sum() / denom)


def rmse(pred, truth) -> float:
    """Root mean squared error between two equal-length columns."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError(f"column shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.size < 1:
        raise ValueError("rmse needs at least 1 observation")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def per_gene_pcc(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Column-wise Pearson correlation of two (samples, genes) matrices."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return np.array([pcc(pred[:, g], truth[:, g]) for g in range(pred.shape[1])])


def per_gene_rmse(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return np.sqrt(np.mean((pred - truth) ** 2, axis=0))


def select_top_k(fold_pcc: np.ndarray, k: int) -> np.ndarray:
    """Pick the k genes with the highest fold-averaged out-of-fold PCC.

    ``fold_pcc`` is (folds, genes) with NaN marking undefined correlations.
    NaNs are ignored in the average; a gene undefined in every fold is
    excluded. Ties are broken by ascending gene index so the selection is
    deterministic.
    """
    fold_pcc = np.asarray(fold_pcc, dtype=np.float64)
    if fold_pcc.ndim == 1:
        fold_pcc = fold_pcc[None, :]
    defined = ~np.isnan(fold_pcc)
    eligible = defined.any(axis=0)
    n_eligible = int(eligible.sum())
    if k > n_eligible:
        raise ValueError(f"requested top-{k} but only {n_eligible} genes have a defined PCC")
    with np.errstate(invalid="ignore"):
        avg = np.where(
            eligible,
            np.nansum(np.where(defined, fold_pcc, 0.0), axis=0) / np.maximum(defined.sum(axis=0), 1),
            -np.inf,
        )
    order = np.lexsort((np.arange(avg.size), -avg))
    return order[:k]


def point_prediction(samples: np.ndarray, mode: str = "mean") -> np.ndarray:
    """Collapse an (N, G) ensemble to a point estimate per gene."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise ValueError("samples must be (N, G) with N >= 1")
    if mode == "mean":
        return samples.mean(axis=0)
    if mode == "median":
        return np.median(samples, axis=0)
    if mode == "single":
        return samples[0].copy()
    raise ValueError(f"unknown point prediction mode {mode!r}")


def _stack_ensembles(ensembles) -> np.ndarray:
    """Accept (S, N, G) array, sequence of (N, G) arrays, or SampleSet-likes."""
    if isinstance(ensembles, np.ndarray) and ensembles.ndim == 3:
        return np.asarray(ensembles, dtype=np.float64)
    arrays = []
    for e in ensembles:
        arr = getattr(e, "samples", e)
        arrays.append(np.asarray(arr, dtype=np.float64))
    return np.stack(arrays)


def interval_coverage(ensembles, truths, levels=(0.5, 0.8, 0.9)) -> dict:
    """Fraction of truths inside central ensemble intervals, per level.

    Intervals come from the linear-interpolation empirical quantiles at
    (1 - level)/2 and (1 + level)/2 over each (sample, gene) ensemble.
    """
    samples = _stack_ensembles(ensembles)
    truths = np.asarray(truths, dtype=np.float64)
    s, n, g = samples.shape
    if truths.shape != (s, g):
        raise ValueError(f"truths shape {truths.shape} does not match ensembles {(s, g)}")
    if n < 10:
        raise ValueError(f"ensembles of size {n} are too small for quantile intervals")
    out = {}
    for level in levels:
        if not 0 < level < 1:
            raise ValueError(f"coverage level {level} outside (0, 1)")
        lo = np.quantile(samples, (1.0 - level) / 2.0, axis=1, method="linear")
        hi = np.quantile(samples, (1.0 + level) / 2.0, axis=1, method="linear")
        inside = (truths >= lo) & (truths <= hi)
        out[level] = float(inside.mean())
    return out


def gaussian_nll(ensembles, truths, var_floor: float = VAR_FLOOR) -> float:
    """Mean NLL of truths under per-(sample, gene) Gaussian ensemble fits.

    Variance is the population variance of the ensemble, floored to keep
    degenerate ensembles finite.
    """
    samples = _stack_ensembles(ensembles)
    truths = np.asarray(truths, dtype=np.float64)
    s, n, g = samples.shape
    if truths.shape != (s, g):
        raise ValueError(f"truths shape {truths.shape} does not match ensembles {(s, g)}")
    if n < 2:
        raise ValueError("gaussian_nll needs ensembles of size >= 2")
    mean = samples.mean(axis=1)
    var = np.maximum(samples.var(axis=1), var_floor)
    nll = 0.5 * np.log(2.0 * np.pi * var) + (truths - mean) ** 2 / (2.0 * var)
    return float(nll.mean())


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1 with ties assigned the average of their positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties; NaN if degenerate."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError("length mismatch")
    if a.size < 3:
        raise ValueError("spearman needs at least 3 pairs")
    return pcc(_average_ranks(a), _average_ranks(b))


def variance_error_spearman(ensembles, truths) -> float:
    """Rank correlation between ensemble variance and absolute error per pair."""
    samples = _stack_ensembles(ensembles)
    truths = np.asarray(truths, dtype=np.float64)
    s, n, g = samples.shape
    if truths.shape != (s, g):
        raise ValueError(f"truths shape {truths.shape} does not match ensembles {(s, g)}")
    var = samples.var(axis=1).ravel()
    err = np.abs(truths - samples.mean(axis=1)).ravel()
    return spearman(var, err)


@dataclass
class MetricsReport:
    """Per-gene accuracy plus aggregates over top-K predictive gene sets."""

    genes: tuple[str, ...]
    pcc_per_gene: list
    rmse_per_gene: list
    top_k: dict = field(default_factory=dict)
    undefined_pcc_count: int = 0

    def to_json(self) -> dict:
        return {
            "genes": list(self.genes),
            "pcc_per_gene": [None if np.isnan(v) else float(v) for v in self.pcc_per_gene],
            "rmse_per_gene": [float(v) for v in self.rmse_per_gene],
            "top_k": {
                str(k): {key: float(val) for key, val in agg.items()}
                for k, agg in self.top_k.items()
            },
            "undefined_pcc_count": int(self.undefined_pcc_count),
        }


@dataclass
class UncertaintyReport:
    """Coverage at nominal levels, mean Gaussian NLL, variance-error Spearman."""

    coverage: dict
    nll: float
    spearman_var_err: float

    def to_json(self) -> dict:
        sp = self.spearman_var_err
        return {
            "coverage": {repr(float(k)): float(v) for k, v in self.coverage.items()},
            "gaussian_nll": float(self.nll),
            "spearman_var_err": None if np.isnan(sp) else float(sp),
        }


def compute_metrics_report(
    pred: np.ndarray,
    truth: np.ndarray,
    genes,
    top_k_sizes=TOP_K_DEFAULT,
) -> MetricsReport:
    """Per-gene PCC/RMSE and mean aggregates for each feasible top-K set.

    Gene ranking for the top-K sets uses this report's own per-gene PCC
    (single-evaluation convention); cross-validated selection should call
    select_top_k with per-fold PCC matrices instead.
    """
    pcc_vec = per_gene_pcc(pred, truth)
    rmse_vec = per_gene_rmse(pred, truth)
    eligible = int((~np.isnan(pcc_vec)).sum())
    top_k = {}
    for k in sorted(set(int(k) for k in top_k_sizes), reverse=True):
        if k > eligible:
            continue
        idx = select_top_k(pcc_vec[None, :], k)
        top_k[k] = {
            "mean_pcc": float(np.mean(pcc_vec[idx])),
            "mean_rmse": float(np.mean(rmse_vec[idx])),
        }
    return MetricsReport(
        genes=tuple(genes),
        pcc_per_gene=list(pcc_vec),
        rmse_per_gene=list(rmse_vec),
        top_k=top_k,
        undefined_pcc_count=int(np.isnan(pcc_vec).sum()),
    )
