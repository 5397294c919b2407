"""Command-line entry point tying the modules into reproducible pipelines.

Every subcommand reads a JSON run configuration, fans the master seed out
into named sub-seeds, writes a config snapshot into the output directory,
and emits only plain TSV/CSV/JSON files. Exit codes: 0 success, 2 config
error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict, dataclass, field

import click
import numpy as np
import pandas as pd

from . import autodiff as ad
from .augment import AugmentOptions, LabeledDataset, augment_dataset
from .errors import ConfigError, DataError, NumericError
from .evalbench import CvConfig, benchmark_report, cross_validate
from .ingest import (
    CovariateEncoder,
    load_abundance_table,
    prevalence_filter,
    to_counts,
)
from .metrics import diversity_report
from .model import (
    FlatPln,
    PlnTree,
    PlnTreeConfig,
    TrainConfig,
    levels_from_leaves,
)
from .seeds import derive_seed
from .taxonomy import parse_lineages

DEFAULT_SCHEMA = {
    "age": ["ordinal", ["child", "schoolage", "adult", "senior"]],
    "sex": "binary",
    "bmi": "minmax",
    "country": "onehot",
}


@dataclass
class RunConfig:
    abundance: str = ""
    metadata: str = ""
    orientation: str = "taxa_rows"
    table_kind: str = "relative"
    depth_range: tuple[int, int] | None = None
    prevalence_threshold: float = 0.15
    count_total: int = 100_000
    seed: int = 0
    out: str = "out"
    strategy: str = "taxapln"
    beta: float = 2.0
    conditional: bool = False
    covariate_schema: dict = field(default_factory=lambda: dict(DEFAULT_SCHEMA))
    epochs: int = 2000
    batch_size: int = 512
    lr: float = 1e-3
    clip: float = 5.0
    mc_samples: int = 1
    gru_hidden: int = 32
    gru_layers: int = 2
    head_hidden: int = 32
    film_hidden: int = 32
    diversity_samples: int = 500
    diversity_strategies: tuple[str, ...] = ("taxapln", "taxapln_prior", "pln",
                                             "mixup", "cutmix", "phylomix")
    cv_folds: int = 5
    cv_repeats: int = 5
    cv_strategies: tuple[str, ...] = ("taxapln",)
    cv_classifiers: tuple[str, ...] = ("logreg", "mlp")
    preprocessing: str = "clr"
    jobs: int = 1

    def model_config(self, covariate_dim: int = 0) -> PlnTreeConfig:
        return PlnTreeConfig(
            gru_hidden=self.gru_hidden,
            gru_layers=self.gru_layers,
            head_hidden=self.head_hidden,
            film_hidden=self.film_hidden,
            covariate_dim=covariate_dim,
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, clip=self.clip,
                           batch_size=self.batch_size,
                           mc_samples=self.mc_samples, seed=seed)


def load_run_config(path: str | None, require_data: bool = True, **overrides) -> RunConfig:
    doc = {}
    if path is not None:
        with open(path) as fh:
            doc = json.load(fh)
    doc.update({k: v for k, v in overrides.items() if v is not None})
    known = {f for f in RunConfig.__dataclass_fields__}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**doc)
    if cfg.depth_range is not None:
        cfg.depth_range = tuple(cfg.depth_range)
    for name in ("diversity_strategies", "cv_strategies", "cv_classifiers"):
        setattr(cfg, name, tuple(getattr(cfg, name)))
    if require_data:
        if not cfg.abundance:
            raise ConfigError("config must set 'abundance'")
        if not cfg.metadata:
            raise ConfigError("config must set 'metadata'")
    if cfg.conditional and not cfg.covariate_schema:
        raise ConfigError("conditional runs need a covariate schema")
    return cfg


def snapshot_config(cfg: RunConfig, outdir: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    doc = asdict(cfg)
    # output location and worker bound do not affect results
    doc.pop("out", None)
    doc.pop("jobs", None)
    with open(os.path.join(outdir, "config_snapshot.json"), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)


def load_cohort(cfg: RunConfig):
    """Load, filter and count-convert the cohort described by the config.

    Returns (tree, LabeledDataset, label names in index order).
    """
    table = load_abundance_table(cfg.abundance, cfg.orientation, cfg.table_kind)
    table = prevalence_filter(table, cfg.prevalence_threshold)
    if table.kind == "relative":
        rng = np.random.default_rng(derive_seed(cfg.seed, "counts"))
        table = to_counts(table, cfg.count_total, rng)
    tree = parse_lineages(list(table.taxa_lineages), cfg.depth_range)
    meta = pd.read_csv(cfg.metadata)
    meta = meta.set_index("sample_id").loc[list(table.sample_ids)].reset_index()
    label_names = sorted(meta["label"].astype(str).unique())
    if len(label_names) < 2:
        raise DataError("need at least two distinct labels")
    label_map = {name: i for i, name in enumerate(label_names)}
    labels = meta["label"].astype(str).map(label_map).to_numpy()
    covariates = None
    if cfg.conditional:
        schema = {
            k: (("ordinal", list(v[1])) if isinstance(v, (list, tuple)) else v)
            for k, v in cfg.covariate_schema.items()
        }
        covariates = CovariateEncoder(schema).fit(meta).transform(meta).columns
    dataset = LabeledDataset(
        leaf_counts=table.values,
        labels=labels,
        covariates=covariates,
        sample_ids=table.sample_ids,
    )
    return tree, dataset, label_names


def _fit_all_labels(cfg: RunConfig, tree, dataset):
    models = {}
    cov_dim = dataset.covariates.shape[1] if (cfg.conditional and dataset.covariates is not None) else 0
    for c in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == c)
        seed = derive_seed(cfg.seed, "fit", int(c))
        model = PlnTree(tree, cfg.model_config(cov_dim), init_seed=seed)
        cov = dataset.covariates[idx] if cov_dim else None
        model.fit(levels_from_leaves(tree, dataset.leaf_counts[idx]), cov,
                  cfg.train_config(seed))
        models[int(c)] = model
    return models


def _write_json(path: str, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)


@click.group()
def main():
    """Taxonomy-aware microbiome augmentation toolkit."""


def _run(cfg_builder, body):
    try:
        cfg = cfg_builder()
        snapshot_config(cfg, cfg.out)
        body(cfg)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(3)
    except NumericError as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        sys.exit(4)


def _common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True),
                      default=None, help="JSON run configuration.")(fn)
    fn = click.option("--out", default=None, help="Output directory.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Master seed.")(fn)
    fn = click.option("--jobs", type=int, default=None, help="Parallel worker bound.")(fn)
    return fn


@main.command()
@_common_options
@click.option("--epochs", type=int, default=None)
def fit(config_path, out, seed, jobs, epochs):
    """Fit one label-specific generative model per class and write checkpoints."""

    def body(cfg: RunConfig):
        tree, dataset, label_names = load_cohort(cfg)
        models = _fit_all_labels(cfg, tree, dataset)
        rows = []
        for c, model in models.items():
            doc = model.to_dict()
            doc["label"] = int(c)
            doc["label_name"] = label_names[c]
            _write_json(os.path.join(cfg.out, f"model_label{c}.json"), doc)
            for epoch, value in enumerate(model.trace):
                rows.append((c, epoch, value))
        with open(os.path.join(cfg.out, "training_trace.csv"), "w") as fh:
            fh.write("label,epoch,elbo\n")
            for c, epoch, value in rows:
                fh.write(f"{c},{epoch},{value!r}\n")
        click.echo(f"wrote {len(models)} checkpoints to {cfg.out}")

    _run(lambda: load_run_config(config_path, out=out, seed=seed, jobs=jobs,
                                 epochs=epochs), body)


def _load_checkpoints(cfg: RunConfig, tree, checkpoint_dir: str):
    models = {}
    for name in sorted(os.listdir(checkpoint_dir)):
        if not (name.startswith("model_label") and name.endswith(".json")):
            continue
        with open(os.path.join(checkpoint_dir, name)) as fh:
            doc = json.load(fh)
        if doc["kind"] == "plntree":
            models[int(doc["label"])] = PlnTree.from_dict(doc, tree)
        else:
            models[int(doc["label"])] = FlatPln.from_dict(doc)
    if not models:
        raise ConfigError(f"no checkpoints found in {checkpoint_dir}")
    return models


@main.command()
@_common_options
@click.option("--checkpoints", "checkpoint_dir", type=click.Path(exists=True),
              required=True, help="Directory holding fit checkpoints.")
@click.option("--beta", type=float, default=None)
@click.option("--strategy", default=None)
def augment(config_path, out, seed, jobs, checkpoint_dir, beta, strategy):
    """Augment the cohort and write counts, provenance and a manifest."""

    def body(cfg: RunConfig):
        tree, dataset, _ = load_cohort(cfg)
        models = None
        if cfg.strategy in ("taxapln", "taxapln_prior", "pln", "pln_prior"):
            models = _load_checkpoints(cfg, tree, checkpoint_dir)
        rng = np.random.default_rng(derive_seed(cfg.seed, "augment"))
        aug = augment_dataset(dataset, cfg.strategy, cfg.beta, rng,
                              models=models, tree=tree,
                              options=AugmentOptions(count_total=cfg.count_total))
        counts_df = pd.DataFrame(
            aug.counts.T, index=list(tree.leaf_names),
            columns=[f"row{i:05d}" for i in range(aug.counts.shape[0])],
        )
        counts_df.to_csv(os.path.join(cfg.out, "augmented_counts.tsv"), sep="\t")
        with open(os.path.join(cfg.out, "provenance.csv"), "w") as fh:
            fh.write("row,kind,label,sources,weights\n")
            for i, prov in enumerate(aug.provenance):
                src = ";".join(str(s) for s in prov.get("sources", []))
                wts = ";".join(repr(w) for w in prov.get("weights", []))
                fh.write(f"{i},{prov['kind']},{prov.get('label', '')},{src},{wts}\n")
        manifest = {
            "strategy": cfg.strategy,
            "beta": cfg.beta,
            "seed": cfg.seed,
            "n_original": aug.n_original,
            "n_synthetic": aug.n_synthetic,
            "taxonomy_hash": tree.content_hash(),
            "model_hashes": {
                str(c): m.to_dict()["taxonomy_hash"] if m.kind == "plntree" else "flat"
                for c, m in (models or {}).items()
            },
        }
        _write_json(os.path.join(cfg.out, "manifest.json"), manifest)
        click.echo(f"{aug.n_synthetic} synthetic rows written to {cfg.out}")

    _run(lambda: load_run_config(config_path, out=out, seed=seed, jobs=jobs,
                                 beta=beta, strategy=strategy), body)


@main.command()
@_common_options
@click.option("--checkpoints", "checkpoint_dir", type=click.Path(exists=True),
              default=None, help="Reuse fitted checkpoints instead of refitting.")
def diversity(config_path, out, seed, jobs, checkpoint_dir):
    """Diversity comparison of synthetic cohorts against the original one."""

    def body(cfg: RunConfig):
        tree, dataset, _ = load_cohort(cfg)
        needs_models = any(
            s in ("taxapln", "taxapln_prior", "pln", "pln_prior")
            for s in cfg.diversity_strategies
        )
        models = None
        if needs_models:
            if checkpoint_dir is not None:
                models = _load_checkpoints(cfg, tree, checkpoint_dir)
            else:
                models = _fit_all_labels(cfg, tree, dataset)
        synthetic = {}
        for strategy in cfg.diversity_strategies:
            rng = np.random.default_rng(derive_seed(cfg.seed, "diversity", strategy))
            beta = 1.0 + cfg.diversity_samples / dataset.n
            aug = augment_dataset(dataset, strategy, beta, rng, models=models,
                                  tree=tree,
                                  options=AugmentOptions(count_total=cfg.count_total))
            synthetic[strategy] = aug.counts[aug.n_original :]
        report = diversity_report(dataset.leaf_counts, synthetic)
        _write_json(os.path.join(cfg.out, "diversity_report.json"), report)
        with open(os.path.join(cfg.out, "diversity_indices.csv"), "w") as fh:
            fh.write("strategy,group,metric,value\n")
            for name, entry in report["strategies"].items():
                for metric in ("shannon", "simpson"):
                    for v in entry[metric]["original_values"]:
                        fh.write(f"{name},original,{metric},{v!r}\n")
                    for v in entry[metric]["synthetic_values"]:
                        fh.write(f"{name},synthetic,{metric},{v!r}\n")
        with open(os.path.join(cfg.out, "pcoa_coordinates.csv"), "w") as fh:
            fh.write("strategy,metric,row,group,axis1,axis2\n")
            for name, entry in report["strategies"].items():
                for metric, block in entry["pcoa"].items():
                    for i, (coords, group) in enumerate(
                        zip(block["coordinates"], block["group"])
                    ):
                        a1 = coords[0] if len(coords) > 0 else 0.0
                        a2 = coords[1] if len(coords) > 1 else 0.0
                        fh.write(f"{name},{metric},{i},{group},{a1!r},{a2!r}\n")
        click.echo(f"diversity report written to {cfg.out}")

    _run(lambda: load_run_config(config_path, out=out, seed=seed, jobs=jobs), body)


@main.command()
@_common_options
@click.option("--beta", type=float, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--export/--no-export", default=False,
              help="Export per-fold augmented matrices for external classifiers.")
def benchmark(config_path, out, seed, jobs, beta, epochs, export):
    """Repeated cross-validation benchmark of augmentation strategies."""

    def body(cfg: RunConfig):
        tree, dataset, _ = load_cohort(cfg)
        cov_dim = dataset.covariates.shape[1] if (cfg.conditional and dataset.covariates is not None) else 0
        cv = CvConfig(
            folds=cfg.cv_folds,
            repeats=cfg.cv_repeats,
            seed=cfg.seed,
            beta=cfg.beta,
            strategies=cfg.cv_strategies,
            preprocessing=cfg.preprocessing,
            classifiers=cfg.cv_classifiers,
            model_epochs=cfg.epochs,
            model_batch=cfg.batch_size,
            mc_samples=cfg.mc_samples,
            count_total=cfg.count_total,
            use_covariate_features=cfg.conditional,
            conditional=cfg.conditional,
            model_config=cfg.model_config(cov_dim),
        )
        export_dir = os.path.join(cfg.out, "fold_export") if export else None
        result = cross_validate(dataset, tree, cv, export_dir=export_dir)
        reference = "taxapln" if "taxapln" in cfg.cv_strategies else cfg.cv_strategies[0]
        report = benchmark_report(result, reference=reference)
        _write_json(os.path.join(cfg.out, "benchmark_report.json"), report)
        with open(os.path.join(cfg.out, "benchmark_results.csv"), "w") as fh:
            fh.write("strategy,classifier,repeat,mean_fold_auprc\n")
            for (strategy, clf), values in sorted(result.cells.items()):
                for rep, v in enumerate(values):
                    fh.write(f"{strategy},{clf},{rep},{v!r}\n")
        if export:
            _write_json(os.path.join(cfg.out, "fold_export", "manifest.json"), {
                "repeats": cv.repeats, "folds": cv.folds,
                "strategies": list(("none",) + tuple(s for s in cv.strategies if s != "none")),
                "preprocessing": cv.preprocessing,
            })
        click.echo(f"benchmark written to {cfg.out}")

    _run(lambda: load_run_config(config_path, out=out, seed=seed, jobs=jobs,
                                 beta=beta, epochs=epochs), body)


@main.command()
@_common_options
@click.option("--probes", type=int, default=100)
@click.option("--threshold", type=float, default=1e-4)
@click.option("--corrupt", is_flag=True, default=False,
              help="Debug negative control: inject a wrong backward rule.")
def gradcheck(config_path, out, seed, jobs, probes, threshold, corrupt):
    """Finite-difference check of the ELBO gradient on a small toy model."""

    def body(cfg: RunConfig):
        from .toydata import toy_tree

        tree = toy_tree(2)
        rng = np.random.default_rng(derive_seed(cfg.seed, "gradcheck"))
        model = PlnTree(tree, PlnTreeConfig(gru_hidden=8, head_hidden=8),
                        init_seed=cfg.seed)
        n = 6
        leaves = rng.poisson(3.0, size=(n, tree.n_leaves))
        leaves[leaves.sum(axis=1) == 0, 0] = 1
        x_levels = levels_from_leaves(tree, leaves)
        noise = [[rng.standard_normal((n, k)) for k in tree.layer_sizes]]

        original_tanh = ad.tanh
        if corrupt:
            def corrupted_tanh(a):
                a = ad.as_tensor(a)
                value = np.tanh(a.value)
                return ad.Tensor(value, (a,), lambda g: (1.1 * g * (1.0 - value**2),))
            ad.tanh = corrupted_tanh
        try:
            err = ad.finite_difference_check(
                lambda: model.elbo(x_levels, noise=noise),
                model.store.params, n_probes=probes, rng=rng,
            )
        finally:
            ad.tanh = original_tanh
        click.echo(f"max relative gradient error: {err:.3e}")
        _write_json(os.path.join(cfg.out, "gradcheck.json"),
                    {"max_relative_error": err, "threshold": threshold,
                     "probes": probes, "corrupt": corrupt})
        if err >= threshold:
            sys.exit(4)

    _run(lambda: load_run_config(config_path, require_data=False, out=out,
                                 seed=seed, jobs=jobs), body)


if __name__ == "__main__":
    main()
