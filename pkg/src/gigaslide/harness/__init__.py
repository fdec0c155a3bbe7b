"""Corpus building, training, evaluation, ablations and reports."""

from .ablation import (
    BASELINE_VARIANTS,
    COMPONENT_VARIANTS,
    ENCODING_VARIANTS,
    HEADLINE,
    LEVEL_VARIANTS,
    AblationResult,
    AblationRow,
    Variant,
    run_ablation_suite,
    select_variants,
)
from .artifacts import load_bundle, load_model, save_bundle, save_model
from .augment import AugmentSpec, apply_augment, sample_augment, transform_cells
from .baseline import NaiveCNN, NaiveConfig
from .corpus import CorpusConfig, SlidePlan, SlideRecord, plan_corpus, preprocess_slide
from .localize import LocalizationEntry, hit_rate, localization_scores, slide_cam
from .metrics import confusion_metrics, pairwise_auc, pearson, roc_auc, roc_curve
from .pipeline import EncoderStage, build_corpus, open_corpus, split_records
from .train import (
    DataSpec,
    EvalReport,
    TrainingConfig,
    TrainingDivergedError,
    TrainResult,
    collate,
    evaluate,
    overfit_single,
    predict,
    train_dsnet,
)


def naive_baseline(train, val, config: TrainingConfig = TrainingConfig(), naive: NaiveConfig | None = None):
    """Train the thumbnail-only dense CNN on the same splits; returns (EvalReport, params, TrainResult)."""
    model = NaiveCNN(naive or NaiveConfig(seed=config.seed))
    res = train_dsnet(model, train, val, config, DataSpec(levels=1))
    return evaluate(model, val, DataSpec(levels=1)), model.num_parameters(), res


__all__ = [
    "BASELINE_VARIANTS",
    "COMPONENT_VARIANTS",
    "ENCODING_VARIANTS",
    "HEADLINE",
    "LEVEL_VARIANTS",
    "AblationResult",
    "AblationRow",
    "Variant",
    "run_ablation_suite",
    "select_variants",
    "load_bundle",
    "load_model",
    "save_bundle",
    "save_model",
    "AugmentSpec",
    "apply_augment",
    "sample_augment",
    "transform_cells",
    "NaiveCNN",
    "NaiveConfig",
    "CorpusConfig",
    "SlidePlan",
    "SlideRecord",
    "plan_corpus",
    "preprocess_slide",
    "LocalizationEntry",
    "hit_rate",
    "localization_scores",
    "slide_cam",
    "confusion_metrics",
    "pairwise_auc",
    "pearson",
    "roc_auc",
    "roc_curve",
    "EncoderStage",
    "build_corpus",
    "open_corpus",
    "split_records",
    "DataSpec",
    "EvalReport",
    "TrainingConfig",
    "TrainingDivergedError",
    "TrainResult",
    "collate",
    "evaluate",
    "overfit_single",
    "predict",
    "train_dsnet",
    "naive_baseline",
]
