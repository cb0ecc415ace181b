"""Trainable Fisher-vector aggregation with analytic gradients, Siamese
contrastive training, whitened projections, and retrieval evaluation."""

from .errors import SiamFvError
from .fv import (
    AssignmentMatrix,
    FisherVector,
    GmmModel,
    LocalDescriptorSet,
    assignments,
    fv_encode,
    fv_normalize,
    fv_unnormalized,
    posterior,
)
from .gradients import (
    FvGradients,
    GradCheckReport,
    finite_diff_check,
    fv_grads,
    fv_input_grads,
    fv_param_grads,
    normalized_chain,
    tau_partials,
)
from .em import EmConfig, em_fit, em_fit_trace, log_likelihood
from .projection import (
    ProjectionModel,
    fit_lda_whiten,
    fit_pca_whiten,
    project,
    whiten_transform,
)
from .retrieval import (
    GalleryIndex,
    average_precision,
    baseline_pool,
    evaluate_gallery,
    leave_one_out_map,
    mean_average_precision,
    rank,
)
from .training import (
    BackboneModel,
    LabeledPair,
    MiningTuple,
    SiameseModel,
    TrainConfig,
    TrainResult,
    backbone_backward,
    backbone_forward,
    contrastive_loss,
    expand_tuples,
    full_gradient_check,
    loss_backward,
    mine_tuples,
    sgd_step,
    train,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
