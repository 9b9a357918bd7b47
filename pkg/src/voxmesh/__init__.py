"""Spatially partitioned 3D U-Net training on a simulated device mesh.

Volumetric tensors are sharded across a grid of in-process workers; every
convolution is preceded by a halo exchange of block margins so the partitioned
network computes exactly what a single device would, which a bundled
single-device oracle verifies bitwise.
"""

from .augment import SynthConfig, augment_pipeline, intensity_delta, remove_tumor, synthesize_tumor
from .data_io import (
    DatasetDir,
    VolumeRecord,
    downsample2_record,
    generate_synthetic_dataset,
    read_spv,
    write_spv,
)
from .errors import VoxmeshError
from .halo import HaloSpec, PaddedBlock, exchange_byte_count, halo_exchange, halo_exchange_backward
from .mesh import DeviceMesh, create_mesh
from .ops import (
    ConvParams,
    concat_channels,
    conv3d_backward,
    conv3d_forward,
    maxpool2_backward,
    maxpool2_forward,
    relu,
    softmax_channels,
    upsample2_backward,
    upsample2_forward,
)
from .sharding import Layout, ShardedTensor, TensorSpec, gather, shard
from .training import (
    LossWeights,
    TrainConfig,
    combined_loss,
    cross_entropy_loss,
    dice_global,
    dice_per_case,
    evaluate,
    sgd_momentum_step,
    soft_dice_loss,
    train_loop,
)
from .unet import LayerGraph, UNetConfig, build, init_params, recipe_for_resolution

__version__ = "0.1.0"

__all__ = [
    "ConvParams",
    "DatasetDir",
    "DeviceMesh",
    "HaloSpec",
    "LayerGraph",
    "Layout",
    "LossWeights",
    "PaddedBlock",
    "ShardedTensor",
    "SynthConfig",
    "TensorSpec",
    "TrainConfig",
    "UNetConfig",
    "VolumeRecord",
    "VoxmeshError",
    "augment_pipeline",
    "build",
    "combined_loss",
    "concat_channels",
    "conv3d_backward",
    "conv3d_forward",
    "create_mesh",
    "cross_entropy_loss",
    "dice_global",
    "dice_per_case",
    "downsample2_record",
    "evaluate",
    "exchange_byte_count",
    "gather",
    "generate_synthetic_dataset",
    "halo_exchange",
    "halo_exchange_backward",
    "init_params",
    "intensity_delta",
    "maxpool2_backward",
    "maxpool2_forward",
    "read_spv",
    "recipe_for_resolution",
    "relu",
    "remove_tumor",
    "sgd_momentum_step",
    "shard",
    "soft_dice_loss",
    "softmax_channels",
    "synthesize_tumor",
    "train_loop",
    "upsample2_backward",
    "upsample2_forward",
    "write_spv",
]
