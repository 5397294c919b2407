import io

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taxapln.errors import (
    NegativeValueError,
    NonPositiveEntryError,
    RowSumViolationError,
    UnknownCategoryError,
    ZeroRowError,
)
from taxapln.ingest import (
    CovariateEncoder,
    clr_transform,
    encode_covariates,
    load_abundance_table,
    multinomial_rows,
    prevalence_filter,
    to_counts,
    to_proportions,
)


def _table_from(values, kind="relative"):
    df = pd.DataFrame(
        np.asarray(values).T,
        index=[f"A|t{j}" for j in range(np.asarray(values).shape[1])],
        columns=[f"s{i}" for i in range(np.asarray(values).shape[0])],
    )
    return load_abundance_table(io.StringIO(df.to_csv(sep="\t")), "taxa_rows", kind)


class TestLoadAbundanceTable:
    def test_relative_2x3(self):
        table = _table_from([[0.2, 0.3, 0.5], [0.1, 0.1, 0.8]])
        assert table.kind == "relative"
        assert table.n_samples == 2 and table.n_taxa == 3
        assert np.allclose(table.values.sum(axis=1), 1.0)

    def test_negative_cell_rejected(self):
        with pytest.raises(NegativeValueError):
            _table_from([[0.6, 0.5, -0.1]])

    def test_row_sum_violation(self):
        with pytest.raises(RowSumViolationError):
            _table_from([[0.4, 0.3, 0.2]])  # sums to 0.9

    def test_small_deviation_renormalized(self):
        table = _table_from([[0.2, 0.3, 0.5005]])
        assert np.allclose(table.values.sum(axis=1), 1.0, atol=1e-12)

    def test_samples_rows_orientation(self):
        df = pd.DataFrame(
            [[0.5, 0.5]], index=["s0"], columns=["A|x", "A|y"]
        )
        table = load_abundance_table(
            io.StringIO(df.to_csv(sep="\t")), "samples_rows", "relative"
        )
        assert table.sample_ids == ("s0",)
        assert table.taxa_lineages == ("A|x", "A|y")


class TestPrevalenceFilter:
    def test_threshold_zero_identity(self):
        table = _table_from([[0.2, 0.3, 0.5], [0.0, 0.5, 0.5]])
        out = prevalence_filter(table, 0.0)
        assert out.taxa_lineages == table.taxa_lineages

    def test_boundary_uses_geq(self):
        n = 100
        values = np.full((n, 2), 0.5)
        rare14 = np.zeros(n)
        rare14[:14] = 0.1
        rare15 = np.zeros(n)
        rare15[:15] = 0.1
        mat = np.column_stack([values[:, 0], values[:, 1], rare14, rare15])
        mat = mat / mat.sum(axis=1, keepdims=True)
        table = _table_from(mat)
        out = prevalence_filter(table, 0.15)
        kept = set(out.taxa_lineages)
        assert "A|t2" not in kept  # 14 of 100
        assert "A|t3" in kept  # 15 of 100

    def test_against_column_count_oracle(self, toy_cohort):
        tree, dataset, _ = toy_cohort
        props = dataset.leaf_counts / dataset.leaf_counts.sum(axis=1, keepdims=True)
        df = pd.DataFrame(props.T, index=list(tree.leaf_names),
                          columns=[f"s{i}" for i in range(props.shape[0])])
        table = load_abundance_table(io.StringIO(df.to_csv(sep="\t")))
        out = prevalence_filter(table, 0.15)
        n = props.shape[0]
        expected = [
            name for j, name in enumerate(tree.leaf_names)
            if (props[:, j] > 0).sum() >= 0.15 * n
        ]
        assert list(out.taxa_lineages) == expected

    def test_monotone_in_threshold(self):
        table = _table_from(np.array([
            [0.5, 0.5, 0.0, 0.0],
            [0.4, 0.0, 0.6, 0.0],
            [0.2, 0.3, 0.0, 0.5],
        ]))
        prev = None
        for thresh in (0.0, 0.4, 0.7, 1.0):
            cols = set(prevalence_filter(table, thresh).taxa_lineages)
            if prev is not None:
                assert cols <= prev
            prev = cols


class TestToCounts:
    def test_degenerate_row(self):
        table = _table_from([[1.0, 0.0, 0.0]])
        out = to_counts(table, 100_000, np.random.default_rng(0))
        assert out.values[0].tolist() == [100_000, 0, 0]

    def test_rows_sum_to_total(self, rng):
        props = rng.dirichlet(np.ones(5), size=20)
        table = _table_from(props)
        out = to_counts(table, 100_000, rng)
        assert (out.values.sum(axis=1) == 100_000).all()
        assert out.kind == "counts"

    def test_binomial_moment_oracle(self):
        # mean of taxon 1 over many seeds ~ Binomial(1e5, 0.5) mean
        total, n_seeds = 100_000, 1000
        draws = np.empty(n_seeds)
        props = np.array([[0.5, 0.5]])
        for s in range(n_seeds):
            draws[s] = multinomial_rows(props, total, np.random.default_rng(s))[0, 0]
        se = np.sqrt(total * 0.25 / n_seeds)
        assert abs(draws.mean() - total / 2) < 3 * se

    def test_convergence_to_proportions(self):
        rng = np.random.default_rng(7)
        props = rng.dirichlet(np.ones(6), size=50)
        counts = multinomial_rows(props, 100_000, rng)
        back = counts / counts.sum(axis=1, keepdims=True)
        assert np.abs(back - props).max() < 0.01


class TestClrTransform:
    def test_constant_row(self):
        out = clr_transform(np.array([[5.0, 5.0, 5.0]]), pseudocount=0.0)
        assert np.allclose(out, 0.0)

    def test_known_values(self):
        # shifted entries are (1, e) so the logs are (0, 1), centered at 0.5
        out = clr_transform(np.array([[0.0, np.e - 1.0]]), pseudocount=1.0)
        assert np.allclose(out, [[-0.5, 0.5]])

    def test_rows_sum_to_zero(self, rng):
        counts = rng.integers(0, 100, size=(30, 8)).astype(float)
        out = clr_transform(counts, 1.0)
        assert np.abs(out.sum(axis=1)).max() < 1e-9

    def test_zero_with_zero_pseudocount_rejected(self):
        with pytest.raises(NonPositiveEntryError):
            clr_transform(np.array([[0.0, 1.0]]), pseudocount=0.0)


class TestToProportions:
    def test_simple(self):
        out = to_proportions(np.array([[2.0, 3.0, 5.0]]))
        assert np.allclose(out, [[0.2, 0.3, 0.5]])

    def test_zero_row_rejected(self):
        with pytest.raises(ZeroRowError):
            to_proportions(np.zeros((1, 3)))

    def test_idempotent(self, rng):
        props = rng.dirichlet(np.ones(4), size=10)
        assert np.allclose(to_proportions(props), props)


class TestCovariateEncoding:
    def test_minmax_endpoints(self):
        meta = pd.DataFrame({"bmi": [18.0, 25.0, 32.0]})
        out = encode_covariates(meta, {"bmi": "minmax"})
        assert np.allclose(out.columns[:, 0], [0.0, 0.5, 1.0])

    def test_binary(self):
        meta = pd.DataFrame({"sex": ["F", "M", "F"]})
        out = encode_covariates(meta, {"sex": "binary"})
        assert out.columns[:, 0].tolist() == [0.0, 1.0, 0.0]

    def test_onehot(self):
        meta = pd.DataFrame({"country": ["FR", "US", "FR"]})
        out = encode_covariates(meta, {"country": "onehot"})
        assert out.columns.tolist() == [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]
        assert out.column_names == ("country=FR", "country=US")

    def test_ordinal(self):
        meta = pd.DataFrame({"age": ["adult", "child", "senior"]})
        out = encode_covariates(
            meta, {"age": ("ordinal", ["child", "adult", "senior"])}
        )
        assert out.columns[:, 0].tolist() == [1.0, 0.0, 2.0]

    def test_minmax_frozen_on_training(self):
        enc = CovariateEncoder({"bmi": "minmax"}).fit(
            pd.DataFrame({"bmi": [10.0, 20.0]})
        )
        out = enc.transform(pd.DataFrame({"bmi": [5.0, 15.0, 30.0]}))
        # clipped to the training range
        assert np.allclose(out.columns[:, 0], [0.0, 0.5, 1.0])

    def test_unseen_onehot_warns_zero_group(self):
        enc = CovariateEncoder({"country": "onehot"}).fit(
            pd.DataFrame({"country": ["FR", "US"]})
        )
        out = enc.transform(pd.DataFrame({"country": ["DE"]}))
        assert out.columns[0].tolist() == [0.0, 0.0]
        assert out.warnings

    def test_unseen_binary_rejected(self):
        enc = CovariateEncoder({"sex": "binary"}).fit(
            pd.DataFrame({"sex": ["F", "M"]})
        )
        with pytest.raises(UnknownCategoryError):
            enc.transform(pd.DataFrame({"sex": ["X"]}))

    def test_three_category_binary_rejected(self):
        with pytest.raises(UnknownCategoryError):
            CovariateEncoder({"sex": "binary"}).fit(
                pd.DataFrame({"sex": ["F", "M", "X"]})
            )


@settings(max_examples=50, deadline=None)
@given(
    row=st.lists(st.integers(min_value=0, max_value=500), min_size=2, max_size=8),
)
def test_clr_row_sums_zero_property(row):
    out = clr_transform(np.array([row], dtype=float), pseudocount=1.0)
    assert abs(out.sum()) < 1e-9
