"""Minimal numpy neural-network kernel with exact per-example gradients."""

from dpanomaly.nn.model import (
    CROSS_ENTROPY,
    MSE,
    ArchError,
    InputError,
    Model,
    ModelArch,
    build_model,
    conv_autoencoder,
    conv_classifier,
    dense_autoencoder,
    forward_loss,
    lstm_lm,
    per_example_gradients,
    predict_distribution,
)

__all__ = [
    "CROSS_ENTROPY",
    "MSE",
    "ArchError",
    "InputError",
    "Model",
    "ModelArch",
    "build_model",
    "conv_autoencoder",
    "conv_classifier",
    "dense_autoencoder",
    "forward_loss",
    "lstm_lm",
    "per_example_gradients",
    "predict_distribution",
]
