"""Small self-generated cohorts for tests, examples and desk-scale runs.

Ground truth is a randomized tree-structured generator; labels correspond to
two generators with shifted top-level means, so the model class is
well-specified for the bundled benchmark checks.
"""

from __future__ import annotations

import os

import numpy as np
import pandas as pd

from .augment import LabeledDataset
from .model import PlnTree, PlnTreeConfig
from .seeds import derive_seed
from .taxonomy import TaxonomyTree, parse_lineages

TOY_LINEAGES_L2 = ["A|a", "A|b", "A|c", "B|d", "B|e", "B|f"]
TOY_LINEAGES_L3 = [
    "A|a|u", "A|a|v", "A|b|w", "A|b|x",
    "B|c|y", "B|c|z", "B|d|p", "B|d|q",
]


def toy_tree(levels: int = 2) -> TaxonomyTree:
    if levels == 2:
        return parse_lineages(TOY_LINEAGES_L2)
    if levels == 3:
        return parse_lineages(TOY_LINEAGES_L3)
    raise ValueError("toy trees exist for 2 or 3 levels")


def make_generator(tree: TaxonomyTree, seed: int, base_log_rate: float = 4.0,
                   shift: float = 0.0) -> PlnTree:
    """A PLN-Tree with randomized parameters used as a known ground truth."""
    rng = np.random.default_rng(seed)
    model = PlnTree(tree, PlnTreeConfig(), init_seed=seed)
    params = model.store.params
    k1 = tree.layer_sizes[0]
    params["mu1"].value = base_log_rate + shift + 0.3 * rng.standard_normal(k1)
    chol = 0.1 * rng.standard_normal((k1, k1))
    np.fill_diagonal(chol, np.log(0.4))
    params["chol1"].value = chol
    for lev in range(1, tree.levels):
        w = params[f"dyn{lev}.mean.W"]
        w.value = 0.5 * rng.standard_normal(w.value.shape)
        b = params[f"dyn{lev}.mean.b"]
        b.value = 0.5 * rng.standard_normal(b.value.shape)
        params[f"dyn{lev}.var.W"].value[:] = 0.0
        params[f"dyn{lev}.var.b"].value[:] = -0.5  # softplus(-0.5) ~ 0.47
    return model


def sample_cohort(model: PlnTree, n: int, rng: np.random.Generator) -> np.ndarray:
    """Leaf counts of n samples drawn from the generator's prior."""
    z = model.prior_latents(n, rng)
    return model.decode(z, rng)[-1]


def make_toy_cohort(n: int = 160, seed: int = 0, levels: int = 2,
                    class_shift: float = 0.8):
    """Binary-labeled cohort from two shifted generators.

    Returns (tree, LabeledDataset with covariates, metadata DataFrame).
    """
    tree = toy_tree(levels)
    rng = np.random.default_rng(derive_seed(seed, "toy-cohort"))
    n0 = n // 2
    n1 = n - n0
    gen0 = make_generator(tree, derive_seed(seed, "gen", 0), shift=0.0)
    gen1 = make_generator(tree, derive_seed(seed, "gen", 0), shift=class_shift)
    counts = np.vstack([sample_cohort(gen0, n0, rng), sample_cohort(gen1, n1, rng)])
    empty = counts.sum(axis=1) == 0  # keep every sample usable as a composition
    counts[empty, 0] = 1
    labels = np.concatenate([np.zeros(n0, int), np.ones(n1, int)])
    perm = rng.permutation(n)
    counts, labels = counts[perm], labels[perm]

    ages = np.where(rng.uniform(size=n) < 0.6, "adult", "senior")
    sexes = np.where(rng.uniform(size=n) < 0.5, "F", "M")
    bmi = np.round(rng.uniform(17.0, 35.0, size=n), 1)
    countries = np.where(rng.uniform(size=n) < 0.5, "FR", "US")
    meta = pd.DataFrame({
        "sample_id": [f"S{i:04d}" for i in range(n)],
        "age": ages,
        "sex": sexes,
        "bmi": bmi,
        "country": countries,
        "label": np.where(labels == 1, "case", "control"),
    })
    covariates = np.column_stack([
        (ages == "senior").astype(float),
        (sexes == "M").astype(float),
        (bmi - bmi.min()) / (bmi.max() - bmi.min()),
        (countries == "US").astype(float),
    ])
    dataset = LabeledDataset(
        leaf_counts=counts,
        labels=labels,
        covariates=covariates,
        sample_ids=tuple(meta["sample_id"]),
    )
    return tree, dataset, meta


def write_toy_cohort(dirpath: str, n: int = 160, seed: int = 0, levels: int = 2):
    """Write abundance.tsv (relative, taxa rows) and metadata.csv for the CLI."""
    tree, dataset, meta = make_toy_cohort(n=n, seed=seed, levels=levels)
    os.makedirs(dirpath, exist_ok=True)
    props = dataset.leaf_counts / dataset.leaf_counts.sum(axis=1, keepdims=True)
    table = pd.DataFrame(
        props.T, index=list(tree.leaf_names), columns=list(meta["sample_id"])
    )
    abundance_path = os.path.join(dirpath, "abundance.tsv")
    table.to_csv(abundance_path, sep="\t")
    metadata_path = os.path.join(dirpath, "metadata.csv")
    meta.to_csv(metadata_path, index=False)
    return abundance_path, metadata_path
