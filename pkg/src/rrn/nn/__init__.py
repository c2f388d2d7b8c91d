from .layers import (
    EVAL,
    TRAIN,
    BatchNorm,
    DenseBlock,
    Dropout,
    GaussianDropout,
    Layer,
    Linear,
    Param,
    ReLU,
    Sequential,
    dense_block,
    dropout_targeted,
    dropout_variational,
    gaussian_dropout_kl,
    targeted_mask,
)
from .optim import Adam

__all__ = [
    "EVAL", "TRAIN", "Adam", "BatchNorm", "DenseBlock", "Dropout", "GaussianDropout", "Layer",
    "Linear", "Param", "ReLU", "Sequential", "dense_block", "dropout_targeted",
    "dropout_variational", "gaussian_dropout_kl", "targeted_mask",
]
