"""Taxonomy-aware generative augmentation for microbiome count data."""

from .augment import (
    AugmentedDataset,
    AugmentOptions,
    LabeledDataset,
    augment_dataset,
    compositional_cutmix,
    phylomix,
    prior_sample,
    vamp_sample,
    vanilla_mixup,
)
from .evalbench import (
    BenchmarkResult,
    CvConfig,
    LogisticRegressionClassifier,
    MLPClassifier,
    benchmark_report,
    cross_validate,
)
from .ingest import (
    AbundanceTable,
    CovariateEncoder,
    clr_transform,
    load_abundance_table,
    prevalence_filter,
    to_counts,
    to_proportions,
)
from .metrics import (
    aitchison_distance,
    auprc,
    bray_curtis,
    diversity_report,
    ks_divergence,
    mann_whitney_u,
    paired_t_test,
    pcoa,
    shannon_index,
    significance_stars,
    simpson_index,
)
from .model import FlatPln, PlnTree, PlnTreeConfig, TrainConfig
from .seeds import derive_seed
from .taxonomy import (
    TaxonomyTree,
    aggregate_counts,
    parse_lineages,
    validate_hierarchy,
)

__version__ = "0.1.0"
