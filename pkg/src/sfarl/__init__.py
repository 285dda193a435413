"""Stage-wise image restoration with learned fidelity and regularization terms."""

from .degrade import (
    DegradationOp,
    TrainingSample,
    apply,
    apply_adjoint,
    blur_op,
    composite_rain,
    identity_op,
    make_motion_kernel,
    perturb_kernel,
    synth_deconv_pair,
    synth_denoise_pair,
    synth_multi_degrade,
    synth_rain_pair,
    synth_rain_streaks,
)
from .grids import (
    DctBasis,
    conv2_same,
    conv2_same_adjoint,
    conv_matrix_equiv_check,
    dct_basis,
    normalize_vjp,
    realize_filter,
    rot180,
)
from .influence import RbfGeometry, RbfMixture, fit_weights, make_geometry, rbf_basis_matrix, rbf_deriv, rbf_eval
from .losses import SsimConfig, mse, mse_grad, neg_ssim, neg_ssim_grad, psnr, ssim
from .model import (
    ModelFormatError,
    ModelGeometry,
    SfarlModel,
    StageParams,
    StageTape,
    default_geometry,
    deserialize_model,
    inference_step,
    load_model,
    project_feasible,
    run_inference,
    save_model,
    serialize_model,
)
from .gradients import (
    StageGrads,
    backprop_through_stages,
    fd_oracle,
    stage_input_vjp,
    stage_param_grads,
)
from .training import (
    AdamState,
    TrainConfig,
    adam_step,
    evaluate_model,
    init_model,
    make_batches,
    train_greedy,
    train_joint,
)

__version__ = "0.1.0"
