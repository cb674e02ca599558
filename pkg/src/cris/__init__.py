"""cris: segmentation backbones with a refinement head trained on an
epoch-interleaved MSE/BCE schedule.

Usage::

    import cris

    splits = cris.split_dataset(cris.synth_shapes(40, (64, 64)))
    model = cris.compose(
        cris.build_backbone(cris.BackboneConfig("unet", base_channels=8, depth=2)),
        cris.build_refinement(cris.RefinementConfig()),
    )
    model, history = cris.train(model, splits, cris.TrainConfig(epochs=4))
    report = cris.evaluate_model(model, splits.train, splits.test)
    print(history.active_losses(), report.dice)
"""

from ._version import __version__

# errors.py
from .errors import (
    CrisError,
    InvalidThresholdError,
    ShapeMismatchError,
    NonBinaryMaskError,
    OutOfRangePixelError,
    ConfigError,
    UnpairedStemError,
    UnreadableFileError,
    DuplicateSampleError,
    EmptyDatasetError,
    DatasetTooSmallError,
    EmptySplitError,
    ManifestMismatchError,
    IntegrityError,
    VersionMismatchError,
    ConfigMismatchError,
    ExperimentSpecError,
)

# tensors.py
from .tensors import ImageTensor, MaskTensor, ProbMap, Sample, Dataset, binarize, validate_pair

# backbones.py
from .backbones import BackboneKind, BackboneConfig, Backbone, build_backbone, backbone_forward

# refinement.py
from .refinement import RefinementConfig, RefinementModule, FullModel, build_refinement, refine, compose

# losses.py
from .losses import EpochLossWeights, epoch_weights, loss_mse, loss_bce, combined_loss

# training.py
from .training import (
    Strategy,
    TrainConfig,
    EpochRecord,
    TrainHistory,
    train_step,
    train,
    predict,
    evaluate_model,
)

# metrics.py
from .metrics import (
    ConfusionCounts,
    PRPoint,
    EvalReport,
    confusion,
    precision,
    recall,
    dice,
    mse_metric,
    pr_curve,
    best_threshold,
)

# data.py
from .data import (
    DatasetLayout,
    SplitSpec,
    DatasetSplits,
    load_dataset,
    write_dataset,
    split_dataset,
    synth_shapes,
)

# tuning.py
from .tuning import SearchSpace, TrialRecord, TrialStatus, sample_config, should_prune, tune

# persistence.py
from .persistence import Checkpoint, save_checkpoint, load_checkpoint, write_manifest, read_manifest

# report.py
from .report import emit_table, emit_pr_plot, emit_prob_maps, load_reports

# experiments.py
from .experiments import ExperimentSpec, load_experiment, run_grid

__all__ = [
    "__version__",
    # errors
    "CrisError", "InvalidThresholdError", "ShapeMismatchError", "NonBinaryMaskError",
    "OutOfRangePixelError", "ConfigError", "UnpairedStemError", "UnreadableFileError",
    "DuplicateSampleError", "EmptyDatasetError", "DatasetTooSmallError", "EmptySplitError",
    "ManifestMismatchError", "IntegrityError", "VersionMismatchError", "ConfigMismatchError",
    "ExperimentSpecError",
    # tensors
    "ImageTensor", "MaskTensor", "ProbMap", "Sample", "Dataset", "binarize", "validate_pair",
    # backbones
    "BackboneKind", "BackboneConfig", "Backbone", "build_backbone", "backbone_forward",
    # refinement
    "RefinementConfig", "RefinementModule", "FullModel", "build_refinement", "refine", "compose",
    # losses
    "EpochLossWeights", "epoch_weights", "loss_mse", "loss_bce", "combined_loss",
    # training
    "Strategy", "TrainConfig", "EpochRecord", "TrainHistory",
    "train_step", "train", "predict", "evaluate_model",
    # metrics
    "ConfusionCounts", "PRPoint", "EvalReport", "confusion", "precision", "recall",
    "dice", "mse_metric", "pr_curve", "best_threshold",
    # data
    "DatasetLayout", "SplitSpec", "DatasetSplits", "load_dataset", "write_dataset",
    "split_dataset", "synth_shapes",
    # tuning
    "SearchSpace", "TrialRecord", "TrialStatus", "sample_config", "should_prune", "tune",
    # persistence
    "Checkpoint", "save_checkpoint", "load_checkpoint", "write_manifest", "read_manifest",
    # report
    "emit_table", "emit_pr_plot", "emit_prob_maps", "load_reports",
    # experiments
    "ExperimentSpec", "load_experiment", "run_grid",
]
