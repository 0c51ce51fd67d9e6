"""Fixed-effects linear regression: high-dimensional FE absorption by
alternating within-group demeaning, OLS with collinearity dropping,
one- to three-way cluster-robust variance (CR1, inclusion-exclusion),
quantile bin builders, and the shipped preset specifications."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import linalg, stats

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    """FE absorption failed to converge."""


@dataclass(frozen=True)
class BinSet:
    """Quantile bins of one column; the reference bin carries no indicator."""

    column: str
    edges: np.ndarray  # k-1 interior edges, ascending
    k: int
    reference: int

    def __post_init__(self):
        if np.any(np.diff(self.edges) < 0):
            raise ValueError("bin edges must be monotone")
        if not 1 <= self.reference <= self.k:
            raise ValueError("reference bin does not exist")


def quantile_bins(values: np.ndarray, k: int, reference: int = 1) -> tuple[BinSet, np.ndarray]:
    """Assign 1..k quantile bins (inverse-ECDF edges, right-closed, ties to
    the lower bin). Returns the BinSet and per-observation bin ids."""
    values = np.asarray(values, dtype=float)
    if np.unique(values).size < k:
        raise ValueError(
            f"column has fewer than {k} distinct values; use a smaller bin count")
    edges = np.quantile(values, np.arange(1, k) / k, method="inverted_cdf")
    bins = np.searchsorted(edges, values, side="left") + 1
    return BinSet(column="", edges=np.asarray(edges, dtype=float), k=k,
                  reference=reference), bins


def _group_ids(labels) -> tuple[np.ndarray, int]:
    codes, uniques = pd.factorize(np.asarray(labels), sort=True)
    return codes.astype(np.intp), len(uniques)


def absorb_fixed_effects(
    X: np.ndarray,
    groups: Sequence[np.ndarray],
    tol: float = 1e-10,
    max_iter: int = 10_000,
    weights: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """Residualize columns on all FE dimensions by alternating within-group
    demeaning until the max absolute change falls below tol.

    Returns (demeaned copy, iterations). Raises ConvergenceError when
    max_iter passes are exhausted.
    """
    X = np.array(X, dtype=float, copy=True)
    if X.ndim == 1:
        X = X[:, None]
    if not groups:
        return X, 0
    dims = []
    for g in groups:
        codes, n = _group_ids(g)
        counts = (np.bincount(codes, weights=weights, minlength=n)
                  if weights is not None else np.bincount(codes, minlength=n))
        dims.append((codes, n, counts))
    for iteration in range(1, max_iter + 1):
        prev = X.copy()
        for codes, n, counts in dims:
            for j in range(X.shape[1]):
                col = X[:, j] * weights if weights is not None else X[:, j]
                means = np.bincount(codes, weights=col, minlength=n) / counts
                X[:, j] -= means[codes]
        change = np.abs(X - prev).max()
        if change < tol:
            return X, iteration
    raise ConvergenceError(
        f"FE absorption did not converge in {max_iter} iterations "
        f"(last change {change:.3e}, {len(dims)} dimensions, {X.shape[0]} rows)")


def ols(X: np.ndarray, y: np.ndarray, names: Sequence[str] | None = None
        ) -> tuple[np.ndarray, np.ndarray, list[int], list[str]]:
    """Least squares via pivoted QR, dropping collinear columns.

    Returns (coefficients over kept columns, residuals, kept column
    indices, dropped column names).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(k)]
    _, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank_tol = max(n, k) * np.finfo(float).eps * (diag[0] if diag.size and diag[0] > 0 else 1.0)
    rank = int((diag > rank_tol).sum())
    kept = sorted(piv[:rank].tolist())
    dropped = [names[j] for j in sorted(piv[rank:].tolist())]
    if not kept:
        raise ValueError("no usable regressor columns after rank filtering")
    if dropped:
        logger.warning("dropping collinear columns: %s", ", ".join(dropped))
    Xk = X[:, kept]
    beta, *_ = np.linalg.lstsq(Xk, y, rcond=None)
    resid = y - Xk @ beta
    return beta, resid, kept, dropped


def _meat(X: np.ndarray, resid: np.ndarray, codes: np.ndarray, n_groups: int) -> np.ndarray:
    k = X.shape[1]
    scores = np.zeros((n_groups, k))
    Xe = X * resid[:, None]
    for j in range(k):
        scores[:, j] = np.bincount(codes, weights=Xe[:, j], minlength=n_groups)
    return scores.T @ scores


def cluster_vcov(
    X: np.ndarray,
    resid: np.ndarray,
    clusters: Sequence[np.ndarray],
    dof_style: str = "CR1",
) -> tuple[np.ndarray, list[int], bool]:
    """Cluster-robust sandwich VCOV; multi-way via signed inclusion-
    exclusion over every non-empty intersection of the cluster dimensions.

    Each term carries the CR1 small-sample factor G/(G-1)*(N-1)/(N-K)
    computed from its own cluster count. Negative eigenvalues of the
    combined result are truncated to zero (flagged).

    Returns (vcov, clusters per base dimension, psd_repaired).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    if not clusters:
        raise ValueError("need at least one cluster dimension")
    if len(clusters) > 3:
        raise ValueError("at most 3 cluster dimensions supported")
    dims = [_group_ids(c) for c in clusters]
    n_clusters = [g for _, g in dims]
    for d, g in enumerate(n_clusters):
        if g < 2:
            raise ValueError(f"cluster dimension {d} has only {g} cluster")
    bread = np.linalg.inv(X.T @ X)
    vcov = np.zeros((k, k))
    for r in range(1, len(dims) + 1):
        for subset in itertools.combinations(range(len(dims)), r):
            if r == 1:
                codes, g = dims[subset[0]]
            else:
                combined = dims[subset[0]][0].copy()
                for d in subset[1:]:
                    combined = combined * dims[d][1] + dims[d][0]
                codes, g = _group_ids(combined)
            meat = _meat(X, resid, codes, g)
            if dof_style == "CR1":
                c = g / (g - 1) * (n - 1) / (n - k) if g > 1 else 1.0
            elif dof_style == "none":
                c = 1.0
            else:
                raise ValueError(f"unknown dof style {dof_style!r}")
            vcov += (-1.0) ** (r + 1) * c * (bread @ meat @ bread)
    vcov = (vcov + vcov.T) / 2.0
    eigval, eigvec = np.linalg.eigh(vcov)
    repaired = bool((eigval < -1e-12 * max(abs(eigval).max(), 1.0)).any())
    if repaired:
        logger.warning("multi-way VCOV not PSD; truncating negative eigenvalues")
        vcov = (eigvec * np.clip(eigval, 0.0, None)) @ eigvec.T
        vcov = (vcov + vcov.T) / 2.0
    return vcov, n_clusters, repaired


@dataclass(frozen=True)
class RegressionSpec:
    """Declarative regression: outcome, regressors, interactions, bins,
    FE groups, cluster dimensions, filter, and outcome reporting scale."""

    outcome: str
    regressors: tuple[str, ...] = ()
    interactions: tuple[tuple[str, str], ...] = ()
    bins: tuple[Mapping, ...] = ()  # {column, k, reference, interact_with?, descending?}
    fe: tuple[str, ...] = ()
    clusters: tuple[str, ...] = ()
    sample_filter: str | None = None
    scale: float = 1000.0
    weight: str | None = None
    name: str = ""

    def __post_init__(self):
        if not 1 <= len(self.clusters) <= 3:
            raise ValueError("need 1 to 3 cluster columns")
        if any(not c for c in self.fe):
            raise ValueError("FE group labels must be non-empty")


@dataclass
class RegressionResult:
    spec: RegressionSpec
    terms: list[str]
    coef: np.ndarray  # reporting scale applied
    vcov: np.ndarray  # reporting scale applied
    n: int
    n_clusters: list[int]
    fe_iterations: int
    r2_within: float
    dropped: list[str] = field(default_factory=list)
    psd_repaired: bool = False
    degenerate: bool = False

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def tstats(self) -> np.ndarray:
        se = self.se
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(se > 0, self.coef / se, 0.0)

    @property
    def pvalues(self) -> np.ndarray:
        dof = max(min(self.n_clusters) - 1, 1)
        return 2.0 * stats.t.sf(np.abs(self.tstats), dof)

    def coef_for(self, term: str) -> float:
        return float(self.coef[self.terms.index(term)])

    def se_for(self, term: str) -> float:
        return float(self.se[self.terms.index(term)])

    def t_for(self, term: str) -> float:
        return float(self.tstats[self.terms.index(term)])

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for i, term in enumerate(self.terms):
            row = {"term": term, "estimate": self.coef[i], "se": self.se[i],
                   "t": self.tstats[i], "p": self.pvalues[i], "n": self.n}
            for d in range(3):
                row[f"clusters_dim{d + 1}"] = (self.n_clusters[d]
                                               if d < len(self.n_clusters) else "")
            rows.append(row)
        return pd.DataFrame(rows)


def build_design(panel: pd.DataFrame, spec: RegressionSpec) -> tuple[pd.DataFrame, list[str]]:
    """Materialize interaction and bin columns; returns (frame, term names)."""
    frame = panel.copy()
    terms = list(spec.regressors)
    for a, b in spec.interactions:
        name = f"{a}_x_{b}"
        frame[name] = frame[a] * frame[b]
        terms.append(name)
    for binspec in spec.bins:
        column = binspec["column"]
        k = int(binspec.get("k", 10))
        reference = int(binspec.get("reference", k))
        descending = bool(binspec.get("descending", False))
        binset, bins = quantile_bins(frame[column].to_numpy(), k, reference=reference)
        if descending:
            bins = k + 1 - bins
        for j in range(1, k + 1):
            if j == reference:
                continue
            name = f"{column}_bin{j}"
            frame[name] = (bins == j).astype(float)
            terms.append(name)
        other = binspec.get("interact_with")
        if other:
            for j in range(1, k + 1):
                if j == reference:
                    continue
                name = f"{column}_bin{j}_x_{other}"
                frame[name] = frame[f"{column}_bin{j}"] * frame[other]
                terms.append(name)
    return frame, terms


def run_spec(panel: pd.DataFrame, spec: RegressionSpec,
             tol: float = 1e-10, max_iter: int = 10_000) -> RegressionResult:
    """Filter, build the design, absorb FEs, run OLS, and compute the
    cluster-robust VCOV. Outcome coefficients are reported at spec.scale
    (e.g. per 1,000 births)."""
    if spec.sample_filter:
        panel = panel.query(spec.sample_filter)
    if len(panel) == 0:
        raise ValueError("empty sample after filtering")
    frame, terms = build_design(panel, spec)
    missing = [c for c in [spec.outcome, *terms, *spec.fe, *spec.clusters] if c not in frame]
    if missing:
        raise ValueError(f"panel lacks columns: {missing}")
    y = frame[spec.outcome].to_numpy(dtype=float)
    X = frame[terms].to_numpy(dtype=float)
    weights = frame[spec.weight].to_numpy(dtype=float) if spec.weight else None
    if spec.fe:
        groups = [frame[c].to_numpy() for c in spec.fe]
        stacked, iterations = absorb_fixed_effects(
            np.column_stack([y, X]), groups, tol=tol, max_iter=max_iter, weights=weights)
        y_t, X_t = stacked[:, 0], stacked[:, 1:]
    else:
        # no FE group: include an explicit intercept
        X = np.column_stack([np.ones(len(y)), X])
        terms = ["const", *terms]
        y_t, X_t, iterations = y, X, 0
    if weights is not None:
        root = np.sqrt(weights)
        y_t = y_t * root
        X_t = X_t * root[:, None]
    degenerate = bool(np.abs(y_t).max() < 1e-12) if len(y_t) else True
    if degenerate:
        k = X_t.shape[1]
        dims = [_group_ids(frame[c].to_numpy())[1] for c in spec.clusters]
        return RegressionResult(spec=spec, terms=terms, coef=np.zeros(k),
                                vcov=np.zeros((k, k)), n=len(y_t), n_clusters=dims,
                                fe_iterations=iterations, r2_within=0.0, degenerate=True)
    beta, resid, kept, dropped = ols(X_t, y_t, names=terms)
    kept_terms = [terms[j] for j in kept]
    clusters = [frame[c].to_numpy() for c in spec.clusters]
    vcov, n_clusters, repaired = cluster_vcov(X_t[:, kept], resid, clusters)
    sst = float(np.sum(y_t**2))
    ssr = float(np.sum(resid**2))
    r2_within = 1.0 - ssr / sst if sst > 0 else 0.0
    scale = spec.scale
    return RegressionResult(
        spec=spec, terms=kept_terms, coef=beta * scale, vcov=vcov * scale**2,
        n=len(y_t), n_clusters=n_clusters, fe_iterations=iterations,
        r2_within=r2_within, dropped=dropped, psd_repaired=repaired)


def write_result(result: RegressionResult, path) -> None:
    result.to_frame().to_csv(path, index=False, lineterminator="\n")


PRESETS: dict[str, RegressionSpec] = {
    # pooled 9-month in-utero exposure on the LBW dummy, per 1,000 births
    "eq1": RegressionSpec(
        name="eq1", outcome="lbw", regressors=("log_mp_local_full",),
        fe=("admin1", "country_month"), clusters=("admin1",), scale=1000.0),
    # trimester / preconception / postpartum window terms
    "eq2": RegressionSpec(
        name="eq2", outcome="lbw",
        regressors=("log_mp_local_preconception", "log_mp_local_trimester1",
                    "log_mp_local_trimester2", "log_mp_local_trimester3",
                    "log_mp_local_postpartum"),
        fe=("admin1", "country_month"), clusters=("admin1",), scale=1000.0),
    # pair-month passthrough with transport-strength decile interactions;
    # bin 1 = strongest transport, bin 10 (weakest) is the reference
    "eq5": RegressionSpec(
        name="eq5", outcome="log_mp_receiver", regressors=("log_mp_sender",),
        bins=({"column": "current", "k": 10, "reference": 10,
               "interact_with": "log_mp_sender", "descending": True},),
        fe=("pair", "month"), clusters=("sender", "receiver", "month"), scale=1.0),
    "table2_seafood": RegressionSpec(
        name="table2_seafood", outcome="lbw", regressors=("log_mp_local_full",),
        interactions=(("log_mp_local_full", "log_seafood_spending"),),
        fe=("admin1", "country_month"), clusters=("admin1",), scale=1000.0),
    "table2_fishing": RegressionSpec(
        name="table2_fishing", outcome="lbw", regressors=("log_mp_local_full",),
        interactions=(("log_mp_local_full", "log_fishing_hours"),),
        fe=("admin1", "country_month"), clusters=("admin1",), scale=1000.0),
    "table3_aod": RegressionSpec(
        name="table3_aod", outcome="log_aod", regressors=("log_mp_local_full",),
        interactions=(("log_mp_local_full", "log_evaporation"),),
        fe=("grid", "country_month"), clusters=("grid",), scale=1.0),
    "appx_t1_exporters": RegressionSpec(
        name="appx_t1_exporters", outcome="lbw",
        regressors=("log_mp_local_full", "log_mp_exporters"),
        fe=("admin1", "country_month"), clusters=("admin1",), scale=1000.0),
}


def spec_from_dict(name: str, data: Mapping) -> RegressionSpec:
    """Build a RegressionSpec from a declarative mapping (config file)."""
    return RegressionSpec(
        name=name,
        outcome=data["outcome"],
        regressors=tuple(data.get("regressors", ())),
        interactions=tuple((a, b) for a, b in data.get("interactions", ())),
        bins=tuple(dict(b) for b in data.get("bins", ())),
        fe=tuple(data.get("fe", ())),
        clusters=tuple(data.get("clusters", ())),
        sample_filter=data.get("sample_filter"),
        scale=float(data.get("scale", 1000.0)),
        weight=data.get("weight"),
    )
