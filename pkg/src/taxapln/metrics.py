"""Diversity indices, distance geometry, ordination and statistical tests.

Shannon entropy uses natural log; the Simpson index is the Gini-Simpson form
1 - sum(p^2). Both choices are recorded in report metadata.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, stdtr
from scipy.stats import rankdata

from .errors import (
    DegenerateInputError,
    LengthMismatchError,
    SingleClassError,
)
from .ingest import clr_transform, to_proportions

STAR_THRESHOLDS = ((0.0001, "****"), (0.001, "***"), (0.01, "**"), (0.05, "*"))


def significance_stars(p: float) -> str:
    for thresh, stars in STAR_THRESHOLDS:
        if p <= thresh:
            return stars
    return "ns"


# -- alpha diversity -------------------------------------------------------


def shannon_index(p: np.ndarray) -> float:
    """Shannon entropy -sum p log p in nats; zero entries are skipped."""
    p = np.asarray(p, float)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def simpson_index(p: np.ndarray) -> float:
    """Gini-Simpson index 1 - sum p^2."""
    p = np.asarray(p, float)
    return float(1.0 - (p**2).sum())


# -- beta diversity --------------------------------------------------------


def bray_curtis(p: np.ndarray, q: np.ndarray) -> float:
    """Bray-Curtis dissimilarity of two proportion vectors."""
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    if p.shape != q.shape:
        raise LengthMismatchError(f"shapes {p.shape} vs {q.shape}")
    return float(1.0 - np.minimum(p, q).sum())


def aitchison_distance(x: np.ndarray, y: np.ndarray, pseudocount: float = 1.0) -> float:
    """Euclidean distance between CLR-transformed count vectors."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.shape != y.shape:
        raise LengthMismatchError(f"shapes {x.shape} vs {y.shape}")
    cx = clr_transform(x[None, :], pseudocount)[0]
    cy = clr_transform(y[None, :], pseudocount)[0]
    return float(np.linalg.norm(cx - cy))


@dataclass(frozen=True)
class DistanceMatrix:
    values: np.ndarray
    metric: str  # "aitchison" | "bray_curtis"

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise LengthMismatchError("distance matrix must be square")
        if np.abs(v - v.T).max() > 1e-12 or np.abs(np.diagonal(v)).max() != 0.0:
            raise LengthMismatchError("distance matrix must be symmetric with zero diagonal")


def pairwise_distances(counts: np.ndarray, metric: str, pseudocount: float = 1.0) -> DistanceMatrix:
    """Full distance matrix over rows of a count matrix."""
    counts = np.asarray(counts, float)
    n = counts.shape[0]
    if metric == "aitchison":
        clr = clr_transform(counts, pseudocount)
        sq = ((clr[:, None, :] - clr[None, :, :]) ** 2).sum(axis=-1)
        d = np.sqrt(np.maximum(sq, 0.0))
    elif metric == "bray_curtis":
        props = to_proportions(counts)
        d = 1.0 - np.minimum(props[:, None, :], props[None, :, :]).sum(axis=-1)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    d = (d + d.T) / 2.0
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(values=d, metric=metric)


def pcoa(dist: DistanceMatrix, k: int):
    """Classical scaling: Gower double centering plus eigendecomposition.

    Returns (coordinates (n, k'), eigenvalues sorted descending) where
    k' <= k is the number of positive eigenvalues available. Axis signs are
    fixed by making each axis's largest-magnitude coordinate positive.
    """
    d = dist.values
    n = d.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    j = np.eye(n) - np.ones((n, n)) / n
    b = -0.5 * j @ (d**2) @ j
    b = (b + b.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(b)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    tol = max(1e-10 * max(abs(eigvals[0]), 1.0), 0.0)
    positive = eigvals > tol
    n_pos = int(positive.sum())
    k_eff = min(k, n_pos)
    if k_eff == 0:
        return np.zeros((n, 0)), eigvals
    coords = eigvecs[:, :k_eff] * np.sqrt(eigvals[:k_eff])
    for axis in range(k_eff):
        pivot = np.argmax(np.abs(coords[:, axis]))
        if coords[pivot, axis] < 0:
            coords[:, axis] = -coords[:, axis]
    return coords, eigvals


# -- statistical tests -----------------------------------------------------


def mann_whitney_u(a, b, alternative: str = "two-sided"):
    """Rank-sum U with midranks, tie-corrected normal approximation.

    Returns (U of the first sample, p-value). Saturated ties (all values
    identical) give p = 1.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    n1, n2 = len(a), len(b)
    if n1 < 1 or n2 < 1:
        raise DegenerateInputError("both samples must be nonempty")
    combined = np.concatenate([a, b])
    ranks = rankdata(combined)
    r1 = ranks[:n1].sum()
    u1 = r1 - n1 * (n1 + 1) / 2.0
    mu = n1 * n2 / 2.0
    # tie-corrected variance
    _, tie_counts = np.unique(combined, return_counts=True)
    n = n1 + n2
    tie_term = ((tie_counts**3 - tie_counts).sum()) / (n * (n - 1)) if n > 1 else 0.0
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return u1, 1.0
    if alternative == "two-sided":
        z = (abs(u1 - mu) - 0.5) / np.sqrt(var)
        p = 2.0 * (1.0 - ndtr(max(z, 0.0)))
    elif alternative == "greater":
        z = (u1 - mu - 0.5) / np.sqrt(var)
        p = 1.0 - ndtr(z)
    elif alternative == "less":
        z = (u1 - mu + 0.5) / np.sqrt(var)
        p = float(ndtr(z))
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    return float(u1), float(min(max(p, 0.0), 1.0))


def ks_divergence(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|."""
    a = np.sort(np.asarray(a, float))
    b = np.sort(np.asarray(b, float))
    if len(a) == 0 or len(b) == 0:
        raise DegenerateInputError("both samples must be nonempty")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / len(a)
    fb = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.abs(fa - fb).max())


def paired_t_test(a, b, alternative: str = "greater"):
    """One-tailed paired t-test on differences a - b.

    Zero-variance differences are flagged degenerate: p is 0, 1 or 0.5
    depending on the common difference's sign.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape or len(a) < 2:
        raise LengthMismatchError("need paired samples of equal length >= 2")
    d = a - b
    sd = d.std(ddof=1)
    n = len(d)
    if sd == 0.0:
        mean = d.mean()
        if mean > 0:
            p = 0.0 if alternative == "greater" else 1.0
        elif mean < 0:
            p = 1.0 if alternative == "greater" else 0.0
        else:
            p = 0.5
        return float("inf") if mean > 0 else (float("-inf") if mean < 0 else 0.0), p, True
    t = d.mean() / (sd / np.sqrt(n))
    if alternative == "greater":
        p = 1.0 - stdtr(n - 1, t)
    elif alternative == "less":
        p = float(stdtr(n - 1, t))
    else:
        p = 2.0 * (1.0 - stdtr(n - 1, abs(t)))
    return float(t), float(p), False


def auprc(scores, labels) -> float:
    """Step-interpolated average precision over descending score thresholds.

    Tied scores are grouped at a single threshold.
    """
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, int)
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos == 0 or neg == 0:
        raise SingleClassError("need at least one positive and one negative")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels == 1)
    fp = np.cumsum(sorted_labels == 0)
    # keep only the last index of each tied-score block
    distinct = np.flatnonzero(np.diff(sorted_scores) != 0)
    idx = np.concatenate([distinct, [len(sorted_scores) - 1]])
    tp = tp[idx]
    fp = fp[idx]
    precision = tp / (tp + fp)
    recall = tp / pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


# -- report ----------------------------------------------------------------


def diversity_report(original_counts: np.ndarray,
                     synthetic_by_strategy: dict[str, np.ndarray],
                     pcoa_dims: int = 2,
                     pseudocount: float = 1.0) -> dict:
    """Diversity comparison of synthetic cohorts against the original one.

    Per strategy: Shannon/Simpson index distributions, Mann-Whitney p-values
    with star bins, KS divergences, and PCoA coordinates of the combined
    original + synthetic set under Aitchison and Bray-Curtis geometry.
    """
    if not synthetic_by_strategy:
        raise ValueError("at least one strategy required")
    original_counts = np.asarray(original_counts, float)
    # all-zero samples carry no composition; they are skipped, not errors
    original_counts = original_counts[original_counts.sum(axis=1) > 0]
    if original_counts.shape[0] == 0:
        raise DegenerateInputError("no nonempty original samples")
    orig_props = to_proportions(original_counts)
    orig_shannon = np.array([shannon_index(p) for p in orig_props])
    orig_simpson = np.array([simpson_index(p) for p in orig_props])
    report = {
        "metadata": {
            "shannon_log_base": "e",
            "simpson_form": "gini-simpson (1 - sum p^2)",
            "pseudocount": pseudocount,
            "n_original": int(orig_props.shape[0]),
        },
        "strategies": {},
    }
    for name, counts in synthetic_by_strategy.items():
        counts = np.asarray(counts, float)
        n_given = counts.shape[0]
        counts = counts[counts.sum(axis=1) > 0]
        if counts.shape[0] == 0:
            raise DegenerateInputError(f"strategy {name!r} produced only empty samples")
        props = to_proportions(counts)
        shannon = np.array([shannon_index(p) for p in props])
        simpson = np.array([simpson_index(p) for p in props])
        entry: dict = {
            "n_synthetic": int(props.shape[0]),
            "n_skipped_empty": int(n_given - props.shape[0]),
        }
        for metric, orig_vals, syn_vals in (
            ("shannon", orig_shannon, shannon),
            ("simpson", orig_simpson, simpson),
        ):
            _, p = mann_whitney_u(orig_vals, syn_vals)
            entry[metric] = {
                "original_mean": float(orig_vals.mean()),
                "synthetic_mean": float(syn_vals.mean()),
                "mannwhitney_p": p,
                "stars": significance_stars(p),
                "ks": ks_divergence(orig_vals, syn_vals),
                "original_values": orig_vals.tolist(),
                "synthetic_values": syn_vals.tolist(),
            }
        combined = np.vstack([original_counts, counts]).astype(float)
        entry["pcoa"] = {}
        for metric in ("aitchison", "bray_curtis"):
            dist = pairwise_distances(combined, metric, pseudocount)
            coords, eigvals = pcoa(dist, pcoa_dims)
            entry["pcoa"][metric] = {
                "coordinates": coords.tolist(),
                "eigenvalues": eigvals[: max(pcoa_dims, 5)].tolist(),
                "group": (["original"] * orig_props.shape[0]
                          + ["synthetic"] * props.shape[0]),
            }
        report["strategies"][name] = entry
    return report
