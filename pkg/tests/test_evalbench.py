import numpy as np
import pytest

from taxapln.augment import LabeledDataset
from taxapln.errors import FractionTooSmallError, SingleClassError
from taxapln.evalbench import (
    CvConfig,
    LogisticRegressionClassifier,
    MLPClassifier,
    benchmark_report,
    beta_sweep,
    cross_validate,
    make_classifier,
    stratified_folds,
    subsample_study,
)
from taxapln.model import PlnTreeConfig
from taxapln.toydata import make_toy_cohort

FAST_CFG = dict(
    folds=2,
    repeats=2,
    seed=7,
    beta=1.5,
    strategies=("mixup",),
    classifiers=("logreg",),
    model_epochs=10,
    model_batch=64,
    model_config=PlnTreeConfig(gru_hidden=6, head_hidden=6),
)


@pytest.fixture(scope="module")
def cohort():
    tree, dataset, _ = make_toy_cohort(n=60, seed=19)
    return tree, dataset


class TestLogisticRegression:
    def test_separable_data_perfect_accuracy(self, rng):
        X = np.vstack([rng.normal(-3, 0.3, (30, 2)), rng.normal(3, 0.3, (30, 2))])
        y = np.repeat([0, 1], 30)
        clf = LogisticRegressionClassifier().fit(X, y)
        assert (clf.predict(X) == y).all()

    def test_gradient_norm_small_at_optimum(self, rng):
        X = rng.standard_normal((50, 4))
        y = (X[:, 0] + 0.3 * rng.standard_normal(50) > 0).astype(int)
        clf = LogisticRegressionClassifier().fit(X, y)
        assert clf.gradient_norm(X, y) < 1e-4

    def test_gradient_matches_finite_difference(self, rng):
        # FD on the penalized loss at the optimum must agree with the
        # analytic gradient norm (both near zero)
        X = rng.standard_normal((30, 3))
        y = rng.integers(0, 2, size=30)
        y[:2] = [0, 1]
        clf = LogisticRegressionClassifier(C=0.5).fit(X, y)

        def loss(w, b):
            sign = np.where(y == y.max(), 1.0, -1.0)
            margin = sign * (X @ w + b)
            return np.logaddexp(0, -margin).sum() + 0.5 / 0.5 * (w @ w)

        h = 1e-6
        fd = []
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fd.append((loss(clf.coef_ + e, clf.intercept_)
                       - loss(clf.coef_ - e, clf.intercept_)) / (2 * h))
        fd.append((loss(clf.coef_, clf.intercept_ + h)
                   - loss(clf.coef_, clf.intercept_ - h)) / (2 * h))
        assert np.linalg.norm(fd) < 1e-3

    def test_single_class_rejected(self, rng):
        with pytest.raises(SingleClassError):
            LogisticRegressionClassifier().fit(rng.standard_normal((5, 2)), np.ones(5))

    def test_multiclass_rejected(self, rng):
        with pytest.raises(SingleClassError):
            LogisticRegressionClassifier().fit(
                rng.standard_normal((6, 2)), np.array([0, 1, 2, 0, 1, 2])
            )

    def test_scores_are_probabilities(self, rng):
        X = rng.standard_normal((20, 3))
        y = rng.integers(0, 2, size=20)
        y[:2] = [0, 1]
        s = LogisticRegressionClassifier().fit(X, y).predict_scores(X)
        assert ((s > 0) & (s < 1)).all()


class TestMlp:
    def test_learns_xor(self):
        rng = np.random.default_rng(2)
        base = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        X = np.tile(base, (20, 1)) + 0.05 * rng.standard_normal((80, 2))
        y = np.tile([0, 1, 1, 0], 20)
        clf = MLPClassifier(hidden=(16, 16), max_iter=300, seed=0).fit(X, y)
        assert (clf.predict(X) == y).mean() > 0.95

    def test_seed_determinism(self, rng):
        X = rng.standard_normal((40, 3))
        y = rng.integers(0, 2, size=40)
        y[:2] = [0, 1]
        a = MLPClassifier(hidden=(8, 8), max_iter=20, seed=5).fit(X, y)
        b = MLPClassifier(hidden=(8, 8), max_iter=20, seed=5).fit(X, y)
        assert (a.predict_proba(X) == b.predict_proba(X)).all()

    def test_loss_trace_decreases(self, rng):
        X = rng.standard_normal((60, 4))
        y = (X[:, 0] > 0).astype(int)
        clf = MLPClassifier(hidden=(8, 8), max_iter=60, seed=1).fit(X, y)
        trace = np.asarray(clf.loss_trace)
        assert trace[-10:].mean() < trace[:10].mean()

    def test_single_class_rejected(self, rng):
        with pytest.raises(SingleClassError):
            MLPClassifier().fit(rng.standard_normal((5, 2)), np.zeros(5))


class TestMakeClassifier:
    def test_names(self):
        assert isinstance(make_classifier("logreg"), LogisticRegressionClassifier)
        assert isinstance(make_classifier("mlp", seed=3), MLPClassifier)
        with pytest.raises(ValueError):
            make_classifier("svm")


class TestStratifiedFolds:
    def test_sizes_within_one(self, rng):
        labels = np.repeat([0, 1], [33, 47])
        assignment = stratified_folds(labels, 5, rng)
        for c in (0, 1):
            counts = np.bincount(assignment[labels == c], minlength=5)
            assert counts.max() - counts.min() <= 1

    def test_every_sample_assigned(self, rng):
        labels = rng.integers(0, 2, size=50)
        assignment = stratified_folds(labels, 4, rng)
        assert assignment.shape == (50,)
        assert set(assignment) <= {0, 1, 2, 3}


class TestCrossValidate:
    def test_cell_shapes(self, cohort):
        tree, dataset = cohort
        config = CvConfig(**FAST_CFG)
        result = cross_validate(dataset, tree, config)
        assert set(result.cells) == {("none", "logreg"), ("mixup", "logreg")}
        for vals in result.cells.values():
            assert vals.shape == (2,)
            assert np.isfinite(vals).all()
            assert ((0.0 <= vals) & (vals <= 1.0)).all()

    def test_beta_one_bitwise_equals_baseline(self, cohort):
        tree, dataset = cohort
        config = CvConfig(**{**FAST_CFG, "beta": 1.0})
        result = cross_validate(dataset, tree, config)
        a = result.cells[("none", "logreg")]
        b = result.cells[("mixup", "logreg")]
        assert (a == b).all()

    def test_rerun_bitwise_identical(self, cohort):
        tree, dataset = cohort
        config = CvConfig(**FAST_CFG)
        r1 = cross_validate(dataset, tree, config)
        r2 = cross_validate(dataset, tree, config)
        for key in r1.cells:
            assert (r1.cells[key] == r2.cells[key]).all()

    def test_export_writes_fold_files(self, cohort, tmp_path):
        tree, dataset = cohort
        config = CvConfig(**{**FAST_CFG, "repeats": 1})
        cross_validate(dataset, tree, config, export_dir=str(tmp_path))
        files = sorted(p.name for p in tmp_path.iterdir())
        # repeats x folds x strategies(incl. none) x {train, test}
        assert len(files) == 1 * 2 * 2 * 2


class TestBenchmarkReport:
    def _result(self, cohort, **over):
        tree, dataset = cohort
        config = CvConfig(**{**FAST_CFG, **over})
        return cross_validate(dataset, tree, config)

    def test_identical_strategies_not_significant(self, cohort):
        result = self._result(cohort, beta=1.0)
        report = benchmark_report(result, reference="mixup")
        tests = report["classifiers"]["logreg"]["paired_tests_vs_mixup"]
        assert tests["none"]["degenerate"]
        assert tests["none"]["stars"] == "ns"

    def test_constant_shift_highly_significant(self, cohort):
        result = self._result(cohort, repeats=6)
        result.cells[("mixup", "logreg")] = (
            result.cells[("none", "logreg")] + 0.05
        )
        report = benchmark_report(result, reference="mixup")
        tests = report["classifiers"]["logreg"]["paired_tests_vs_mixup"]
        assert tests["none"]["p"] < 0.0001
        assert tests["none"]["stars"] == "****"

    def test_strategy_order_and_ci(self, cohort):
        tree, dataset = cohort
        config = CvConfig(**{**FAST_CFG, "strategies": ("mixup", "cutmix"),
                             "repeats": 3})
        report = benchmark_report(cross_validate(dataset, tree, config))
        entry = report["classifiers"]["logreg"]["strategies"]
        assert list(entry) == ["none", "mixup", "cutmix"]
        for block in entry.values():
            assert block["ci95"] >= 0.0
            assert len(block["values"]) == 3


class TestSubsampleStudy:
    def test_fraction_too_small(self, cohort):
        tree, dataset = cohort
        config = CvConfig(**FAST_CFG)
        with pytest.raises(FractionTooSmallError):
            subsample_study(dataset, tree, (0.001,), 1, "mixup", "logreg", config)

    def test_row_structure(self, cohort):
        tree, dataset = cohort
        config = CvConfig(**FAST_CFG)
        out = subsample_study(dataset, tree, (0.5, 0.8), 2, "mixup", "logreg",
                              config)
        assert len(out["rows"]) == 4
        kinds = {(r["fraction"], r["training"]) for r in out["rows"]}
        assert kinds == {(0.5, "augmented"), (0.5, "raw"),
                         (0.8, "augmented"), (0.8, "raw")}

    def test_full_fraction_rejected(self, cohort):
        tree, dataset = cohort
        config = CvConfig(**FAST_CFG)
        with pytest.raises(ValueError):
            subsample_study(dataset, tree, (1.0,), 1, "mixup", "logreg", config)


class TestBetaSweep:
    def test_duplicate_betas_identical_rows(self, cohort):
        tree, dataset = cohort
        config = CvConfig(**FAST_CFG)
        out = beta_sweep(dataset, tree, (1.5, 1.5), config)
        half = len(out["rows"]) // 2
        assert out["rows"][:half] == [
            {**r} for r in out["rows"][half:]
        ]

    def test_invalid_beta(self, cohort):
        tree, dataset = cohort
        with pytest.raises(ValueError):
            beta_sweep(dataset, tree, (0.5,), CvConfig(**FAST_CFG))
