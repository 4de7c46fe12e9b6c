from .graph import Graph, LayerNode, ParamStore
from .optim import adam_step, glorot_normal_init, learning_rate
from .tensor import (
    Tensor,
    add,
    batchnorm,
    concat,
    conv3d,
    deconv3d,
    maxpool3d,
    mean,
    mse_loss,
    no_grad,
    relu,
    square,
)

__all__ = [
    "Graph", "LayerNode", "ParamStore", "Tensor",
    "adam_step", "glorot_normal_init", "learning_rate",
    "add", "batchnorm", "concat", "conv3d", "deconv3d", "maxpool3d", "mean", "mse_loss", "no_grad", "relu", "square",
]
