"""From-scratch NCHW deep-learning stack around a multi-branch additive-fusion CNN."""

from .errors import (
    FormatError,
    ShapeError,
    StaleCacheError,
    TrainingError,
    ValidationError,
)
from .kernels import (
    BatchNormParams,
    ConvParams,
    add_fuse,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    global_average_pool_backward,
    global_average_pool_forward,
    linear_softmax_ce,
    maxpool2x2_backward,
    maxpool2x2_forward,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
)
from .model import (
    ModelReport,
    UnionBlock,
    UnionBranch,
    UnionNet,
    branch_forward,
    load_weights,
    model_report,
    parameter_count_closed_form,
    receptive_field,
    save_weights,
    union_block_forward,
    unionnet_backward,
    unionnet_forward,
)
from .optim import (
    NadamConfig,
    NadamState,
    PlateauConfig,
    PlateauState,
    nadam_step,
    plateau_update,
)
from .data import (
    Dataset,
    FoldPlan,
    Sample,
    SplitSpec,
    augment,
    batch_iter,
    bilinear_resize,
    channel_means,
    load_cifar10,
    load_image_folder,
    make_fold_plan,
    read_ppm,
    split_cifar10,
    stratified_split,
    write_ppm,
)
from .train import (
    ClassMetrics,
    EpochRecord,
    EvalResult,
    KFoldResult,
    TrainCheckpoint,
    TrainResult,
    evaluate,
    format_report,
    load_checkpoint,
    metrics_from_confusion,
    read_history,
    run_kfold,
    save_checkpoint,
    train,
    write_history,
    write_report,
)
from .config import RunConfig, load_run_config, resolve_config, write_manifest

__version__ = "0.1.0"
