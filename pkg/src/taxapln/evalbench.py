"""Bundled classifiers and the repeated cross-validation benchmark.

Only logistic regression and a small MLP ship in-repo; the harness can
export per-fold augmented matrices so external classifiers can be plugged
in. Test folds contain real samples only; generative models and covariate
scalers are fitted on the training fold.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import autodiff as ad
from .augment import (
    MIXUP_STRATEGIES,
    MODEL_STRATEGIES,
    AugmentOptions,
    LabeledDataset,
    augment_dataset,
)
from .errors import FractionTooSmallError, NonFiniteLossError, SingleClassError
from .ingest import clr_transform, to_proportions
from .metrics import auprc, paired_t_test, significance_stars
from .model import FlatPln, PlnTree, PlnTreeConfig, TrainConfig, levels_from_leaves
from .seeds import derive_seed
from .taxonomy import TaxonomyTree


# -- classifiers -----------------------------------------------------------


class LogisticRegressionClassifier:
    """Binary logistic regression with L2 penalty (bias unpenalized)."""

    def __init__(self, C: float = 1.0, max_iter: int = 1000, gtol: float = 1e-6):
        self.C = C
        self.max_iter = max_iter
        self.gtol = gtol
        self.coef_: np.ndarray | None = None
        self.intercept_: float = 0.0

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LogisticRegressionClassifier":
        X = np.asarray(X, float)
        y = np.asarray(y, int)
        classes = np.unique(y)
        if len(classes) < 2:
            raise SingleClassError("logistic regression needs two classes")
        if len(classes) > 2:
            raise SingleClassError("bundled logistic regression is binary only")
        if not np.isfinite(X).all():
            raise NonFiniteLossError("non-finite feature value")
        sign = np.where(y == classes.max(), 1.0, -1.0)
        n, p = X.shape

        def objective(theta):
            w, b = theta[:p], theta[p]
            margin = sign * (X @ w + b)
            loss = np.logaddexp(0.0, -margin).sum() + 0.5 / self.C * (w @ w)
            s = -sign / (1.0 + np.exp(margin))
            grad_w = X.T @ s + w / self.C
            grad_b = s.sum()
            return loss, np.concatenate([grad_w, [grad_b]])

        res = minimize(
            objective,
            np.zeros(p + 1),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": self.max_iter, "gtol": self.gtol, "ftol": 1e-14},
        )
        self.coef_ = res.x[:p]
        self.intercept_ = float(res.x[p])
        self._positive_class = int(classes.max())
        return self

    def gradient_norm(self, X, y) -> float:
        """L2 norm of the penalized-loss gradient at the fitted parameters."""
        X = np.asarray(X, float)
        sign = np.where(np.asarray(y, int) == self._positive_class, 1.0, -1.0)
        margin = sign * (X @ self.coef_ + self.intercept_)
        s = -sign / (1.0 + np.exp(margin))
        grad_w = X.T @ s + self.coef_ / self.C
        return float(np.sqrt((grad_w**2).sum() + s.sum() ** 2))

    def predict_scores(self, X: np.ndarray) -> np.ndarray:
        margin = np.asarray(X, float) @ self.coef_ + self.intercept_
        return 1.0 / (1.0 + np.exp(-margin))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.predict_scores(X) >= 0.5).astype(int)


class MLPClassifier:
    """Two-hidden-layer rectified network with softmax output, Adam-trained."""

    def __init__(self, hidden: tuple[int, int] = (256, 128), max_iter: int = 200,
                 lr: float = 1e-3, seed: int = 0, batch_size: int = 200):
        self.hidden = hidden
        self.max_iter = max_iter
        self.lr = lr
        self.seed = seed
        self.batch_size = batch_size
        self.loss_trace: list[float] = []

    def fit(self, X: np.ndarray, y: np.ndarray) -> "MLPClassifier":
        X = np.asarray(X, float)
        y = np.asarray(y, int)
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise SingleClassError("MLP needs at least two classes")
        if not np.isfinite(X).all():
            raise NonFiniteLossError("non-finite feature value")
        n_classes = len(self.classes_)
        class_index = {c: i for i, c in enumerate(self.classes_)}
        targets = np.array([class_index[c] for c in y])
        onehot = np.eye(n_classes)[targets]

        rng = np.random.default_rng(self.seed)
        store = ad.ParamStore()
        h1, h2 = self.hidden
        fc1 = ad.Dense(store, "fc1", X.shape[1], h1, rng)
        fc2 = ad.Dense(store, "fc2", h1, h2, rng)
        fc3 = ad.Dense(store, "fc3", h2, n_classes, rng)
        self._layers = (fc1, fc2, fc3)
        self._store = store
        opt = ad.Adam(store.params, lr=self.lr)
        n = X.shape[0]
        self.loss_trace = []
        for _ in range(self.max_iter):
            order = rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                logits = self._forward(ad.constant(X[idx]))
                picked = ad.tsum(ad.mul(logits, ad.constant(onehot[idx])), axis=-1)
                loss = ad.tmean(ad.add(ad.logsumexp(logits, axis=-1), ad.neg(picked)))
                if not np.isfinite(loss.value):
                    raise NonFiniteLossError("non-finite MLP loss")
                ad.zero_grad(store.params)
                ad.backward(loss)
                grads = {k: t.grad for k, t in store.params.items() if t.grad is not None}
                opt.step(grads)
                epoch_loss += float(loss.value) * len(idx)
            self.loss_trace.append(epoch_loss / n)
        return self

    def _forward(self, x: ad.Tensor) -> ad.Tensor:
        fc1, fc2, fc3 = self._layers
        return fc3(ad.relu(fc2(ad.relu(fc1(x)))))

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        logits = self._forward(ad.constant(np.asarray(X, float)))
        return ad.softmax(logits, axis=-1).value

    def predict_scores(self, X: np.ndarray) -> np.ndarray:
        """Probability of the largest class label (binary convention)."""
        return self.predict_proba(X)[:, -1]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


def make_classifier(name: str, seed: int = 0):
    if name == "logreg":
        return LogisticRegressionClassifier()
    if name == "mlp":
        return MLPClassifier(seed=seed)
    raise ValueError(f"unknown classifier {name!r}")


# -- cross-validation harness ----------------------------------------------


@dataclass(frozen=True)
class CvConfig:
    folds: int = 5
    repeats: int = 25
    seed: int = 0
    beta: float = 2.0
    strategies: tuple[str, ...] = ("taxapln",)
    preprocessing: str = "clr"  # "clr" | "proportions"
    classifiers: tuple[str, ...] = ("logreg", "mlp")
    model_epochs: int = 2000
    model_batch: int = 512
    mc_samples: int = 1
    count_total: int = 100_000
    clr_pseudocount: float = 1.0
    use_covariate_features: bool = False
    conditional: bool = False
    refit_models_per_fold: bool = True
    model_config: PlnTreeConfig = field(default_factory=PlnTreeConfig)

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


@dataclass
class BenchmarkResult:
    """Per-(strategy, classifier) arrays of mean-over-folds AUPRC, one per repeat."""

    cells: dict[tuple[str, str], np.ndarray]
    config: CvConfig

    def mean(self, strategy: str, classifier: str) -> float:
        return float(self.cells[(strategy, classifier)].mean())


def stratified_folds(labels: np.ndarray, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Fold assignment preserving label ratios within one sample per fold."""
    labels = np.asarray(labels)
    assignment = np.empty(len(labels), dtype=int)
    offset = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        for pos, i in enumerate(idx):
            assignment[i] = (pos + offset) % folds
        offset += len(idx)
    return assignment


def fit_label_models(train: LabeledDataset, strategy: str, tree: TaxonomyTree,
                     config: CvConfig, seed: int) -> dict[int, object]:
    """One generative model per label, fitted on the training rows only."""
    base = strategy.split("_")[0]
    models: dict[int, object] = {}
    mcfg = config.model_config
    if config.conditional and train.covariates is not None:
        mcfg = replace(mcfg, covariate_dim=train.covariates.shape[1])
    else:
        mcfg = replace(mcfg, covariate_dim=0)
    for c in np.unique(train.labels):
        idx = np.flatnonzero(train.labels == c)
        sub_counts = train.leaf_counts[idx]
        sub_cov = train.covariates[idx] if (config.conditional and train.covariates is not None) else None
        fit_seed = derive_seed(seed, "label", int(c))
        tc = TrainConfig(epochs=config.model_epochs, batch_size=config.model_batch,
                         mc_samples=config.mc_samples, seed=fit_seed)
        if base == "taxapln":
            model = PlnTree(tree, mcfg, init_seed=fit_seed)
            model.fit(levels_from_leaves(tree, sub_counts), sub_cov, tc)
        elif base == "pln":
            model = FlatPln(tree.n_leaves, mcfg, init_seed=fit_seed)
            model.fit(sub_counts, sub_cov, tc)
        else:
            raise ValueError(f"unknown model strategy {strategy!r}")
        models[int(c)] = model
    return models


def _features(counts: np.ndarray, covariates: np.ndarray | None, config: CvConfig) -> np.ndarray:
    if config.preprocessing == "clr":
        feats = clr_transform(counts.astype(float), config.clr_pseudocount)
    elif config.preprocessing == "proportions":
        feats = to_proportions(counts.astype(float))
    else:
        raise ValueError(f"unknown preprocessing {config.preprocessing!r}")
    if config.use_covariate_features and covariates is not None:
        feats = np.hstack([feats, covariates])
    return feats


def _augmented_train(train: LabeledDataset, strategy: str, tree: TaxonomyTree,
                     config: CvConfig, repeat: int, fold: int):
    aug_rng = np.random.default_rng(
        derive_seed(config.seed, "augment", repeat, fold, strategy)
    )
    m = int(round((config.beta - 1.0) * train.n))
    if strategy == "none" or m == 0:
        return augment_dataset(train, "mixup", 1.0, aug_rng, tree=tree)
    options = AugmentOptions(count_total=config.count_total)
    if strategy in MODEL_STRATEGIES:
        models = fit_label_models(
            train, strategy, tree, config,
            derive_seed(config.seed, "fit", repeat, fold, strategy),
        )
        return augment_dataset(train, strategy, config.beta, aug_rng,
                               models=models, tree=tree, options=options)
    if strategy in MIXUP_STRATEGIES:
        return augment_dataset(train, strategy, config.beta, aug_rng,
                               tree=tree, options=options)
    raise ValueError(f"unknown strategy {strategy!r}")


def cross_validate(dataset: LabeledDataset, tree: TaxonomyTree, config: CvConfig,
                   export_dir: str | None = None) -> BenchmarkResult:
    """Repeated stratified k-fold benchmark of augmentation strategies.

    The baseline (no augmentation) is always included. Synthetic rows never
    enter a test fold; AUPRC is averaged over folds, one value per repeat.
    """
    strategies = ("none",) + tuple(s for s in config.strategies if s != "none")
    cells = {(s, c): np.zeros(config.repeats)
             for s in strategies for c in config.classifiers}
    for repeat in range(config.repeats):
        fold_rng = np.random.default_rng(derive_seed(config.seed, "folds", repeat))
        assignment = stratified_folds(dataset.labels, config.folds, fold_rng)
        fold_scores = {key: [] for key in cells}
        for fold in range(config.folds):
            test_idx = np.flatnonzero(assignment == fold)
            train_idx = np.flatnonzero(assignment != fold)
            train = LabeledDataset(
                dataset.leaf_counts[train_idx],
                dataset.labels[train_idx],
                dataset.covariates[train_idx] if dataset.covariates is not None else None,
            )
            test_counts = dataset.leaf_counts[test_idx]
            test_labels = dataset.labels[test_idx]
            test_cov = dataset.covariates[test_idx] if dataset.covariates is not None else None
            for strategy in strategies:
                aug = _augmented_train(train, strategy, tree, config, repeat, fold)
                # structural test-fold purity: synthetic sources are training rows
                assert aug.n_original == len(train_idx)
                feats_train = _features(aug.counts, aug.covariates, config)
                feats_test = _features(test_counts, test_cov, config)
                if export_dir is not None:
                    _export_fold(export_dir, repeat, fold, strategy, feats_train,
                                 aug.labels, feats_test, test_labels)
                for clf_name in config.classifiers:
                    clf_seed = derive_seed(config.seed, "clf", repeat, fold, clf_name)
                    clf = make_classifier(clf_name, seed=clf_seed)
                    clf.fit(feats_train, aug.labels)
                    scores = clf.predict_scores(feats_test)
                    fold_scores[(strategy, clf_name)].append(
                        auprc(scores, (test_labels == dataset.labels.max()).astype(int))
                    )
        for key, values in fold_scores.items():
            cells[key][repeat] = float(np.mean(values))
    return BenchmarkResult(cells=cells, config=config)


def _export_fold(export_dir, repeat, fold, strategy, feats_train, labels_train,
                 feats_test, labels_test):
    os.makedirs(export_dir, exist_ok=True)
    stem = f"r{repeat:03d}_f{fold}_{strategy}"
    for name, feats, labels in (
        ("train", feats_train, labels_train),
        ("test", feats_test, labels_test),
    ):
        path = os.path.join(export_dir, f"{stem}_{name}.tsv")
        with open(path, "w") as fh:
            for row, lab in zip(feats, labels):
                fh.write("\t".join(repr(v) for v in row) + f"\t{int(lab)}\n")


def benchmark_report(result: BenchmarkResult, reference: str = "taxapln") -> dict:
    """Mean AUPRC with 95% CI per strategy and one-tailed paired t-tests
    of the reference strategy against every other one."""
    config = result.config
    strategies = sorted({s for s, _ in result.cells},
                        key=lambda s: (s != "none", s))
    # keep config order where available
    ordered = ["none"] + [s for s in config.strategies if s != "none"]
    strategies = [s for s in ordered if any(k[0] == s for k in result.cells)]
    report: dict = {"classifiers": {}, "repeats": config.repeats,
                    "folds": config.folds, "beta": config.beta}
    for clf in config.classifiers:
        entry: dict = {"strategies": {}}
        for s in strategies:
            vals = result.cells[(s, clf)]
            se = vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0
            entry["strategies"][s] = {
                "mean_auprc": float(vals.mean()),
                "ci95": float(1.96 * se),
                "values": vals.tolist(),
            }
        if reference in strategies:
            ref_vals = result.cells[(reference, clf)]
            tests = {}
            for s in strategies:
                if s == reference:
                    continue
                other = result.cells[(s, clf)]
                t, p, degenerate = paired_t_test(ref_vals, other, "greater")
                tests[s] = {
                    "t": t, "p": p, "degenerate": degenerate,
                    "stars": significance_stars(p) if not degenerate else "ns",
                }
            entry["paired_tests_vs_" + reference] = tests
        report["classifiers"][clf] = entry
    return report


def subsample_study(dataset: LabeledDataset, tree: TaxonomyTree,
                    fractions: tuple[float, ...], repeats: int, strategy: str,
                    classifier: str, config: CvConfig) -> dict:
    """AUPRC vs training-set size for augmented and raw training."""
    rows = []
    for frac in fractions:
        if not 0.0 < frac < 1.0:
            # frac = 1 would leave no held-out rows to score
            raise ValueError(f"fraction {frac} outside (0, 1)")
        aug_scores, raw_scores = [], []
        for rep in range(repeats):
            rng = np.random.default_rng(derive_seed(config.seed, "subsample", frac, rep))
            train_idx = []
            for c in np.unique(dataset.labels):
                idx = np.flatnonzero(dataset.labels == c)
                take = int(round(frac * len(idx)))
                if take == 0:
                    raise FractionTooSmallError(
                        f"fraction {frac} eliminates label {c}"
                    )
                train_idx.extend(idx[rng.permutation(len(idx))[:take]])
            train_idx = np.sort(np.asarray(train_idx))
            test_idx = np.setdiff1d(np.arange(dataset.n), train_idx)
            train = LabeledDataset(
                dataset.leaf_counts[train_idx], dataset.labels[train_idx],
                dataset.covariates[train_idx] if dataset.covariates is not None else None,
            )
            for use_aug, bucket in ((True, aug_scores), (False, raw_scores)):
                aug = _augmented_train(
                    train, strategy if use_aug else "none", tree, config, rep, 0
                )
                feats_train = _features(aug.counts, aug.covariates, config)
                feats_test = _features(
                    dataset.leaf_counts[test_idx],
                    dataset.covariates[test_idx] if dataset.covariates is not None else None,
                    config,
                )
                clf = make_classifier(classifier,
                                      seed=derive_seed(config.seed, "subclf", frac, rep))
                clf.fit(feats_train, aug.labels)
                bucket.append(auprc(
                    clf.predict_scores(feats_test),
                    (dataset.labels[test_idx] == dataset.labels.max()).astype(int),
                ))
        for name, scores in (("augmented", aug_scores), ("raw", raw_scores)):
            scores = np.asarray(scores)
            se = scores.std(ddof=1) / np.sqrt(len(scores)) if len(scores) > 1 else 0.0
            rows.append({
                "fraction": frac, "training": name,
                "mean_auprc": float(scores.mean()), "ci95": float(1.96 * se),
            })
    return {"strategy": strategy, "classifier": classifier, "rows": rows}


def beta_sweep(dataset: LabeledDataset, tree: TaxonomyTree,
               betas: tuple[float, ...], config: CvConfig) -> dict:
    """One benchmark cell per augmentation ratio."""
    rows = []
    for beta in betas:
        if beta < 1:
            raise ValueError("betas must be >= 1")
        result = cross_validate(dataset, tree, replace(config, beta=beta))
        for (strategy, clf), vals in result.cells.items():
            rows.append({
                "beta": beta, "strategy": strategy, "classifier": clf,
                "mean_auprc": float(vals.mean()),
            })
    return {"rows": rows}
