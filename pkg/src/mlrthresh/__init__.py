"""Mixtures of linear regressions by response thresholding and clustering."""

from .baseline import EMConfig, EMRegressionMixture, em_fit
from .cluster import BandClusterer, ClusterParams, ClusterResult, cluster_points, pca_project, robust_mean
from .exceptions import MLRError
from .model import (
    Dataset,
    ModelInstance,
    NoiseModel,
    make_instance,
    read_dataset,
    sample_dataset,
    validate_assumptions,
    write_dataset,
)
from .recover import (
    NoiseCalibration,
    RecoveryOutput,
    ThresholdedMLR,
    WeightEstimate,
    estimate_direction,
    estimate_magnitude,
    match_and_score,
    recover_weights,
    run_pipeline,
)
from .threshold import (
    BandConfig,
    ThresholdBand,
    ThresholdedSet,
    acceptance_rate,
    apply_threshold,
    compute_band,
    required_raw_samples,
    sample_thresholded,
    target_vectors,
)

__version__ = "0.1.0"

__all__ = [
    "BandClusterer",
    "BandConfig",
    "ClusterParams",
    "ClusterResult",
    "Dataset",
    "EMConfig",
    "EMRegressionMixture",
    "MLRError",
    "ModelInstance",
    "NoiseCalibration",
    "NoiseModel",
    "RecoveryOutput",
    "ThresholdBand",
    "ThresholdedMLR",
    "ThresholdedSet",
    "WeightEstimate",
    "acceptance_rate",
    "apply_threshold",
    "cluster_points",
    "compute_band",
    "em_fit",
    "estimate_direction",
    "estimate_magnitude",
    "make_instance",
    "match_and_score",
    "pca_project",
    "read_dataset",
    "recover_weights",
    "required_raw_samples",
    "robust_mean",
    "run_pipeline",
    "sample_dataset",
    "sample_thresholded",
    "target_vectors",
    "validate_assumptions",
    "write_dataset",
]
