"""Equivariant networks for grasp scoring, grasp critique and push scoring."""
from .checkpoint import (
    CheckpointError,
    checkpoint_bytes,
    checkpoint_extra,
    load_checkpoint,
    net_from_bytes,
    read_manifest,
    save_checkpoint,
)
from .gradcheck import GradCheckResult, gradient_check, gradient_check_details
from .layers import (
    GroupConv,
    LiftConv,
    OrientationHead,
    conv2d,
    group_conv,
    group_kernel,
    group_max_pool2d,
    group_pool,
    group_upsample2d,
    lift_conv,
    lift_kernel,
    rotate_feature,
    rotate_kernel,
    smooth_leaky,
)
from .nets import (
    CriticNet,
    GraspNet,
    NetConfig,
    PushNet,
    build_net,
    count_params,
    critic_forward,
    critic_input,
    default_config,
    grasp_forward,
    push_forward,
    push_input,
)
