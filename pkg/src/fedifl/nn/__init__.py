"""Hand-written numeric layers with explicit forward/backward passes."""

from fedifl.nn.functional import (
    ShapeError,
    batchnorm1d,
    batchnorm1d_backward,
    conv1d,
    conv1d_backward,
    fc,
    fc_backward,
    log_softmax,
    maxpool1d,
    maxpool1d_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    softmax,
    softmax_backward,
)
from fedifl.nn.gradcheck import finite_diff_gradient, relative_error
from fedifl.nn.kernels import BACKEND
from fedifl.nn.layers import (
    BatchNorm1d,
    Conv1d,
    Layer,
    Linear,
    MaxPool1d,
    ReLU,
    Reshape,
    Sequential,
    Sigmoid,
)
from fedifl.nn.optim import clip_grad_norm, sgd_step, step_network
from fedifl.nn.serialize import CodecError, decode_params, encode_params

__all__ = [
    "BACKEND",
    "BatchNorm1d",
    "CodecError",
    "Conv1d",
    "Layer",
    "Linear",
    "MaxPool1d",
    "ReLU",
    "Reshape",
    "Sequential",
    "ShapeError",
    "Sigmoid",
    "batchnorm1d",
    "batchnorm1d_backward",
    "clip_grad_norm",
    "conv1d",
    "conv1d_backward",
    "decode_params",
    "encode_params",
    "fc",
    "fc_backward",
    "finite_diff_gradient",
    "log_softmax",
    "maxpool1d",
    "maxpool1d_backward",
    "relative_error",
    "relu",
    "relu_backward",
    "sgd_step",
    "sigmoid",
    "sigmoid_backward",
    "softmax",
    "softmax_backward",
    "step_network",
]
