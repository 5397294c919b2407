"""Abundance table loading, filtering, count conversion and preprocessing.

Abundance input is TSV/CSV with lineage strings in the first column and one
column per sample (or transposed). Metadata is a CSV with a header of the
form ``sample_id,age,sex,bmi,country,label``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .errors import (
    AllTaxaRemovedError,
    MissingValueError,
    NegativeValueError,
    NonNumericCellError,
    NonPositiveEntryError,
    RowSumViolationError,
    UnknownCategoryError,
    ZeroRowError,
)

ROW_SUM_TOL = 1e-3


@dataclass(frozen=True)
class AbundanceTable:
    """n x p abundance matrix with sample and lineage identifiers."""

    sample_ids: tuple[str, ...]
    taxa_lineages: tuple[str, ...]
    values: np.ndarray
    kind: str  # "relative" | "counts"

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_taxa(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class CovariateMatrix:
    """Encoded covariates with a per-column schema descriptor."""

    sample_ids: tuple[str, ...]
    columns: np.ndarray
    column_names: tuple[str, ...]
    schema: dict
    warnings: tuple[str, ...] = ()


def load_abundance_table(
    source,
    orientation: str = "taxa_rows",
    kind: str = "relative",
    sep: str = "\t",
) -> AbundanceTable:
    """Parse a TSV/CSV abundance table.

    ``orientation="taxa_rows"`` expects lineages as row index and samples as
    columns; ``"samples_rows"`` the transpose. Relative tables whose row sums
    deviate from 1 by less than ``1e-3`` are renormalized, larger deviations
    are rejected.
    """
    df = pd.read_csv(source, sep=sep, index_col=0)
    if orientation == "taxa_rows":
        df = df.T
    elif orientation != "samples_rows":
        raise ValueError(f"unknown orientation {orientation!r}")
    try:
        values = df.to_numpy(dtype=float)
    except (TypeError, ValueError) as exc:
        raise NonNumericCellError(f"non-numeric cell in abundance table: {exc}") from exc
    if np.isnan(values).any():
        raise NonNumericCellError("NaN cell in abundance table")
    if (values < 0).any():
        i, j = np.argwhere(values < 0)[0]
        raise NegativeValueError(f"negative abundance at row {i}, column {j}")
    sample_ids = tuple(str(s) for s in df.index)
    lineages = tuple(str(t) for t in df.columns)
    if kind == "relative":
        sums = values.sum(axis=1)
        bad = np.abs(sums - 1.0) >= ROW_SUM_TOL
        if bad.any():
            raise RowSumViolationError(
                f"row {np.argmax(bad)} sums to {sums[bad][0]:.6f}, expected 1"
            )
        values = values / sums[:, None]
    elif kind != "counts":
        raise ValueError(f"unknown kind {kind!r}")
    return AbundanceTable(sample_ids, lineages, values, kind)


def prevalence_filter(table: AbundanceTable, threshold: float) -> AbundanceTable:
    """Keep taxa present (value > 0) in at least ``threshold * n`` samples.

    The boundary is inclusive: a taxon in exactly the threshold fraction of
    samples is kept. Relative tables are renormalized after column removal.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    presence = (table.values > 0).sum(axis=0)
    keep = presence >= threshold * table.n_samples
    if not keep.any():
        raise AllTaxaRemovedError(f"no taxon passes prevalence {threshold}")
    values = table.values[:, keep]
    if table.kind == "relative":
        sums = values.sum(axis=1)
        if (sums <= 0).any():
            raise ZeroRowError("a sample lost all abundance after filtering")
        values = values / sums[:, None]
    return AbundanceTable(
        table.sample_ids,
        tuple(t for t, k in zip(table.taxa_lineages, keep) if k),
        values,
        table.kind,
    )


def multinomial_rows(
    proportions: np.ndarray, total: int, rng: np.random.Generator
) -> np.ndarray:
    """One multinomial draw per row via sequential conditional binomials.

    The sequential scheme makes draws reproducible under a documented
    generator independent of library-internal multinomial implementations.
    """
    proportions = np.asarray(proportions, dtype=float)
    n, p = proportions.shape
    out = np.zeros((n, p), dtype=np.int64)
    remaining = np.full(n, total, dtype=np.int64)
    mass_left = proportions.sum(axis=1).copy()
    for j in range(p - 1):
        pj = proportions[:, j]
        with np.errstate(invalid="ignore", divide="ignore"):
            q = np.where(mass_left > 0, pj / mass_left, 0.0)
        q = np.clip(q, 0.0, 1.0)
        draw = rng.binomial(remaining, q)
        out[:, j] = draw
        remaining -= draw
        mass_left -= pj
    out[:, -1] = remaining
    return out


def to_counts(table: AbundanceTable, total: int, rng: np.random.Generator) -> AbundanceTable:
    """Convert a relative table to counts by per-row multinomial sampling."""
    if table.kind != "relative":
        raise ValueError("to_counts expects a relative table")
    if total < 1:
        raise ValueError("total must be >= 1")
    counts = multinomial_rows(table.values, total, rng)
    return replace(table, values=counts, kind="counts")


def clr_transform(counts: np.ndarray, pseudocount: float = 1.0) -> np.ndarray:
    """Centered log-ratio transform, row-wise; rows sum to zero."""
    counts = np.asarray(counts, dtype=float)
    if pseudocount < 0:
        raise ValueError("pseudocount must be >= 0")
    if pseudocount == 0 and (counts <= 0).any():
        raise NonPositiveEntryError("zero entry with pseudocount 0")
    logs = np.log(counts + pseudocount)
    return logs - logs.mean(axis=-1, keepdims=True)


def to_proportions(counts: np.ndarray) -> np.ndarray:
    """Normalize rows to the simplex."""
    counts = np.asarray(counts, dtype=float)
    sums = counts.sum(axis=-1, keepdims=True)
    if (sums <= 0).any():
        raise ZeroRowError("row with nonpositive sum")
    return counts / sums


class CovariateEncoder:
    """Schema-driven covariate encoding fit on training records.

    Schema maps field name to one of ``"binary"``, ``"minmax"``, ``"onehot"``
    or ``("ordinal", [category order])``. Min-max statistics and category
    inventories come from the training records only; unseen one-hot
    categories at transform time encode as an all-zero group with a warning.
    """

    def __init__(self, schema: dict):
        self.schema = dict(schema)
        self._state: dict = {}
        self.fitted = False

    def fit(self, records: pd.DataFrame) -> "CovariateEncoder":
        for fld, spec in self.schema.items():
            if fld not in records.columns:
                raise MissingValueError(f"field {fld!r} missing from metadata")
            col = records[fld]
            if col.isna().any():
                raise MissingValueError(f"missing value in field {fld!r}")
            if spec == "binary":
                cats = sorted(col.astype(str).unique())
                if len(cats) > 2:
                    raise UnknownCategoryError(
                        f"binary field {fld!r} has {len(cats)} categories"
                    )
                self._state[fld] = {c: float(i) for i, c in enumerate(cats)}
            elif spec == "minmax":
                vals = col.astype(float)
                self._state[fld] = (float(vals.min()), float(vals.max()))
            elif spec == "onehot":
                self._state[fld] = sorted(col.astype(str).unique())
            elif isinstance(spec, tuple) and spec[0] == "ordinal":
                order = list(spec[1])
                unseen = set(col.astype(str)) - set(order)
                if unseen:
                    raise UnknownCategoryError(
                        f"ordinal field {fld!r} has categories outside the "
                        f"declared order: {sorted(unseen)}"
                    )
                self._state[fld] = {c: float(i) for i, c in enumerate(order)}
            else:
                raise ValueError(f"unknown schema entry for {fld!r}: {spec!r}")
        self.fitted = True
        return self

    def transform(self, records: pd.DataFrame) -> CovariateMatrix:
        if not self.fitted:
            raise RuntimeError("encoder not fitted")
        cols: list[np.ndarray] = []
        names: list[str] = []
        warnings: list[str] = []
        for fld, spec in self.schema.items():
            col = records[fld]
            if col.isna().any():
                raise MissingValueError(f"missing value in field {fld!r}")
            if spec == "binary":
                mapping = self._state[fld]
                vals = col.astype(str)
                unseen = set(vals) - set(mapping)
                if unseen:
                    raise UnknownCategoryError(
                        f"binary field {fld!r}: unseen categories {sorted(unseen)}"
                    )
                cols.append(vals.map(mapping).to_numpy(dtype=float))
                names.append(fld)
            elif spec == "minmax":
                lo, hi = self._state[fld]
                vals = col.astype(float).to_numpy()
                span = hi - lo if hi > lo else 1.0
                cols.append(np.clip((vals - lo) / span, 0.0, 1.0))
                names.append(fld)
            elif spec == "onehot":
                cats = self._state[fld]
                vals = col.astype(str).to_numpy()
                unseen = sorted(set(vals) - set(cats))
                if unseen:
                    warnings.append(
                        f"field {fld!r}: unseen categories {unseen} encoded as zeros"
                    )
                for c in cats:
                    cols.append((vals == c).astype(float))
                    names.append(f"{fld}={c}")
            else:  # ordinal
                mapping = self._state[fld]
                vals = col.astype(str)
                unseen = set(vals) - set(mapping)
                if unseen:
                    raise UnknownCategoryError(
                        f"ordinal field {fld!r}: unseen categories {sorted(unseen)}"
                    )
                cols.append(vals.map(mapping).to_numpy(dtype=float))
                names.append(fld)
        matrix = np.column_stack(cols) if cols else np.zeros((len(records), 0))
        if "sample_id" in records.columns:
            ids = tuple(str(s) for s in records["sample_id"])
        else:
            ids = tuple(str(s) for s in records.index)
        return CovariateMatrix(
            sample_ids=ids,
            columns=matrix,
            column_names=tuple(names),
            schema=self.schema,
            warnings=tuple(warnings),
        )


def encode_covariates(records: pd.DataFrame, schema: dict) -> CovariateMatrix:
    """Fit-and-transform convenience for a single table."""
    return CovariateEncoder(schema).fit(records).transform(records)
