"""Augmentation strategies and label-specific orchestration.

Model-based strategies (tree and flat generators, posterior-mixture or prior
sampling) emit exact hierarchical counts. Mixup-family strategies operate on
leaf proportions and are converted back to counts with a fixed total so every
strategy feeds the identical downstream pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateMixError,
    EmptyTrainingSetError,
    InvalidRatioError,
    MissingLabelModelError,
)
from .ingest import multinomial_rows, to_proportions
from .model import PlnTree, levels_from_leaves
from .taxonomy import TaxonomyTree

MODEL_STRATEGIES = ("taxapln", "taxapln_prior", "pln", "pln_prior")
MIXUP_STRATEGIES = ("mixup", "cutmix", "phylomix")


@dataclass
class LabeledDataset:
    """Leaf counts with labels and optional encoded covariates."""

    leaf_counts: np.ndarray
    labels: np.ndarray
    covariates: np.ndarray | None = None
    sample_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        self.leaf_counts = np.asarray(self.leaf_counts)
        self.labels = np.asarray(self.labels, dtype=int)

    @property
    def n(self) -> int:
        return self.leaf_counts.shape[0]


@dataclass
class AugmentedDataset:
    """Original plus synthetic rows with per-row provenance."""

    counts: np.ndarray
    labels: np.ndarray
    covariates: np.ndarray | None
    provenance: list[dict]
    ratio: float
    n_original: int

    @property
    def n_synthetic(self) -> int:
        return self.counts.shape[0] - self.n_original


# -- model-based sampling --------------------------------------------------


def vamp_sample(model, dataset: LabeledDataset, m: int, rng: np.random.Generator,
                indices: np.ndarray | None = None):
    """Posterior-mixture sampling anchored on uniform training draws.

    Returns (leaf counts (m, K_L), anchor covariates or None, anchor indices).
    ``indices`` restricts the anchor pool (e.g. to one label).
    """
    pool = np.arange(dataset.n) if indices is None else np.asarray(indices)
    if len(pool) == 0:
        raise EmptyTrainingSetError("no training samples to anchor on")
    anchors = pool[rng.integers(len(pool), size=m)]
    cov = dataset.covariates[anchors] if dataset.covariates is not None else None
    model_cov = cov if model.config.conditional else None
    if isinstance(model, PlnTree):
        x_levels = levels_from_leaves(model.tree, dataset.leaf_counts[anchors])
        z = model.posterior_latents(x_levels, rng, covariates=model_cov)
        counts = model.decode(z, rng)
        leaves = counts[-1]
    else:
        z = model.posterior_latents(dataset.leaf_counts[anchors], rng, covariates=model_cov)
        leaves = model.decode(z, rng)
    return leaves, cov, anchors


def prior_sample(model, m: int, rng: np.random.Generator,
                 covariates: np.ndarray | None = None) -> np.ndarray:
    """Ancestral sampling from the fitted latent chain, then emission."""
    if isinstance(model, PlnTree):
        z = model.prior_latents(m, rng, covariates=covariates)
        return model.decode(z, rng)[-1]
    z = model.prior_latents(m, rng, covariates=covariates)
    return model.decode(z, rng)


# -- mixup family ----------------------------------------------------------


def vanilla_mixup(x_i: np.ndarray, x_j: np.ndarray, lam: float):
    """Convex combination of two compositions; soft label (lam, 1 - lam)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must be in [0, 1]")
    return lam * np.asarray(x_i, float) + (1.0 - lam) * np.asarray(x_j, float), (lam, 1.0 - lam)


def compositional_cutmix(x_i: np.ndarray, x_j: np.ndarray, rng: np.random.Generator,
                         max_retries: int = 16):
    """Per-taxon donor assignment followed by renormalization.

    The mixing weight is drawn once per pair; each taxon takes donor i with
    that probability. The soft label is the renormalized mass contributed by
    each donor.
    """
    x_i = np.asarray(x_i, float)
    x_j = np.asarray(x_j, float)
    for _ in range(max_retries):
        lam = rng.uniform()
        mask = rng.uniform(size=x_i.shape[0]) < lam
        mixed = np.where(mask, x_i, x_j)
        total = mixed.sum()
        if total > 0:
            mass_i = float(mixed[mask].sum()) / total
            return mixed / total, (mass_i, 1.0 - mass_i)
    raise DegenerateMixError("both donors contributed zero mass repeatedly")


def leaf_descendants(tree: TaxonomyTree) -> dict[tuple[int, int], tuple[int, ...]]:
    """Map every (level, node) to its leaf descendant indices."""
    out: dict[tuple[int, int], tuple[int, ...]] = {}
    last = tree.levels - 1
    for k in range(tree.layer_sizes[last]):
        out[(last, k)] = (k,)
    for lev in range(tree.levels - 2, -1, -1):
        for k, childset in enumerate(tree.children[lev]):
            leaves: list[int] = []
            for j in childset:
                leaves.extend(out[(lev + 1, j)])
            out[(lev, k)] = tuple(sorted(leaves))
    return out


def phylomix(x_i: np.ndarray, x_j: np.ndarray, tree: TaxonomyTree, lam: float,
             rng: np.random.Generator,
             _descendants: dict | None = None):
    """Taxonomy-guided cutmix: donor j replaces whole subtrees of leaves.

    Random nodes are accepted while their leaf sets stay disjoint from the
    running selection and do not overshoot the target fraction (1 - lam) of
    leaves; selection stops at the closest achievable coverage.
    """
    x_i = np.asarray(x_i, float)
    x_j = np.asarray(x_j, float)
    desc = _descendants if _descendants is not None else leaf_descendants(tree)
    n_leaves = tree.n_leaves
    target = int(round((1.0 - lam) * n_leaves))
    covered = np.zeros(n_leaves, dtype=bool)
    n_covered = 0
    nodes = list(desc.keys())
    for pos in rng.permutation(len(nodes)):
        node = nodes[pos]
        leaves = desc[node]
        if n_covered + len(leaves) > target:
            continue
        idx = list(leaves)
        if covered[idx].any():
            continue
        covered[idx] = True
        n_covered += len(leaves)
        if n_covered == target:
            break
    mixed = np.where(covered, x_j, x_i)
    total = mixed.sum()
    if total <= 0:
        mixed = x_i.copy()
        total = mixed.sum()
    return mixed / total, (lam, 1.0 - lam)


# -- orchestration ---------------------------------------------------------


@dataclass(frozen=True)
class AugmentOptions:
    count_total: int = 100_000
    mixup_alpha: float = 2.0  # Beta(alpha, alpha) mixing weight
    cross_label: bool = False
    max_retries: int = 16


def _largest_remainder(m: int, weights: np.ndarray) -> np.ndarray:
    """Integer allocation of m slots proportional to weights."""
    quotas = m * weights / weights.sum()
    base = np.floor(quotas).astype(int)
    rest = m - base.sum()
    if rest > 0:
        frac = quotas - base
        order = np.argsort(-frac, kind="stable")
        base[order[:rest]] += 1
    return base


def augment_dataset(dataset: LabeledDataset, strategy: str, beta: float,
                    rng: np.random.Generator,
                    models: dict[int, object] | None = None,
                    tree: TaxonomyTree | None = None,
                    options: AugmentOptions | None = None) -> AugmentedDataset:
    """Generate round((beta - 1) * n) synthetic rows, split across labels.

    Model strategies draw from per-label fitted generators; mixup strategies
    pair donors within the same label (hard labels) unless ``cross_label``.
    """
    if beta < 1:
        raise InvalidRatioError(f"beta must be >= 1, got {beta}")
    options = options or AugmentOptions()
    n = dataset.n
    m = int(round((beta - 1.0) * n))
    provenance: list[dict] = [{"kind": "real"} for _ in range(n)]
    if m == 0:
        return AugmentedDataset(
            counts=dataset.leaf_counts.copy(),
            labels=dataset.labels.copy(),
            covariates=None if dataset.covariates is None else dataset.covariates.copy(),
            provenance=provenance,
            ratio=beta,
            n_original=n,
        )

    labels = np.unique(dataset.labels)
    label_counts = np.array([(dataset.labels == c).sum() for c in labels], dtype=float)
    alloc = _largest_remainder(m, label_counts)

    syn_counts: list[np.ndarray] = []
    syn_labels: list[int] = []
    syn_cov: list[np.ndarray] = []
    desc = leaf_descendants(tree) if (strategy == "phylomix" and tree is not None) else None

    for c, m_c in zip(labels, alloc):
        if m_c == 0:
            continue
        idx_c = np.flatnonzero(dataset.labels == c)
        if strategy in MODEL_STRATEGIES:
            if models is None or int(c) not in models:
                raise MissingLabelModelError(f"no fitted model for label {c}")
            model = models[int(c)]
            if strategy.endswith("_prior"):
                cov = None
                if dataset.covariates is not None and getattr(model, "config").conditional:
                    anchors = idx_c[rng.integers(len(idx_c), size=m_c)]
                    cov = dataset.covariates[anchors]
                leaves = prior_sample(model, int(m_c), rng, covariates=cov)
                anchors = None
            else:
                sub = LabeledDataset(
                    dataset.leaf_counts, dataset.labels, dataset.covariates
                )
                leaves, cov, anchors = vamp_sample(model, sub, int(m_c), rng, indices=idx_c)
            for r in range(m_c):
                provenance.append({
                    "kind": strategy,
                    "label": int(c),
                    "sources": [int(anchors[r])] if anchors is not None else [],
                })
            syn_counts.append(leaves)
            syn_labels.extend([int(c)] * m_c)
            if dataset.covariates is not None:
                syn_cov.append(cov if cov is not None
                               else dataset.covariates[idx_c[rng.integers(len(idx_c), size=m_c)]])
        elif strategy in MIXUP_STRATEGIES:
            props = to_proportions(dataset.leaf_counts.astype(float))
            rows = np.empty((m_c, dataset.leaf_counts.shape[1]))
            for r in range(m_c):
                if options.cross_label:
                    i = int(rng.integers(n))
                    j = int(rng.integers(n))
                else:
                    i = int(idx_c[rng.integers(len(idx_c))])
                    j = int(idx_c[rng.integers(len(idx_c))])
                    if len(idx_c) > 1:
                        while j == i:
                            j = int(idx_c[rng.integers(len(idx_c))])
                if strategy == "mixup":
                    lam = float(rng.beta(options.mixup_alpha, options.mixup_alpha))
                    mixed, weights = vanilla_mixup(props[i], props[j], lam)
                elif strategy == "cutmix":
                    mixed, weights = compositional_cutmix(
                        props[i], props[j], rng, options.max_retries
                    )
                else:
                    if tree is None:
                        raise ValueError("phylomix needs the taxonomy tree")
                    lam = float(rng.beta(options.mixup_alpha, options.mixup_alpha))
                    mixed, weights = phylomix(props[i], props[j], tree, lam, rng,
                                              _descendants=desc)
                rows[r] = mixed
                provenance.append({
                    "kind": strategy,
                    "label": int(c),
                    "sources": [i, j],
                    "weights": [float(weights[0]), float(weights[1])],
                })
            counts = multinomial_rows(rows, options.count_total, rng)
            syn_counts.append(counts)
            syn_labels.extend([int(c)] * m_c)
            if dataset.covariates is not None:
                anchors = idx_c[rng.integers(len(idx_c), size=m_c)]
                syn_cov.append(dataset.covariates[anchors])
        else:
            raise ValueError(f"unknown strategy {strategy!r}")

    counts = np.vstack([dataset.leaf_counts] + syn_counts)
    labels_out = np.concatenate([dataset.labels, np.asarray(syn_labels, dtype=int)])
    cov_out = None
    if dataset.covariates is not None:
        cov_out = np.vstack([dataset.covariates] + syn_cov)
    return AugmentedDataset(
        counts=counts,
        labels=labels_out,
        covariates=cov_out,
        provenance=provenance,
        ratio=beta,
        n_original=n,
    )
