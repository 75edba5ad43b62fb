"""Test-time adaptation to shifts in the joint prior over class and nuisance
labels, with calibration, logit-adjusted training and a synthetic shift
benchmark."""

from .adapt import (
    EmConfig,
    EmResult,
    TestTimeAdapter,
    em_estimate_prior,
    fix_class_marginal,
    importance_weights,
    reweight_posterior,
)
from .calibrate import (
    BCTSCalibrator,
    CalibrationFitConfig,
    CalibrationParams,
    apply_bcts,
    fit_bcts,
    negative_log_likelihood,
)
from .core import (
    JointPrior,
    MetaLabelSpace,
    log_softmax_rows,
    marginalize_classes,
    predict_class,
    softmax_rows,
)
from .harness import SweepConfig, SweepOutput, run_calibration_ablation, run_sweep
from .metrics import GroupAccuracyReport, SweepRecord, group_accuracy, max_group_prob, roc_auc
from .synthdata import (
    AnchorPair,
    GaussianGenerativeSpec,
    LabeledDataset,
    default_anchors,
    gauss_cmnist_spec,
    lambda_prior,
    oracle_posterior,
    sample_dataset,
)
from .train import (
    LinearSoftmaxModel,
    MetaLabelClassifier,
    TrainConfig,
    adjust_nonuniform_marginals,
    predict_logits,
    subsample_balanced,
    train_softmax,
)

__version__ = "0.1.0"
