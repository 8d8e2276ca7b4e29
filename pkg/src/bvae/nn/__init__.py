from .layers import (
    Activation,
    Conv2D,
    ConvTranspose2D,
    Dense,
    Flatten,
    Reshape,
    Sequential,
    activation,
    glorot_uniform,
)
from .losses import (
    binary_cross_entropy,
    mean_squared_error,
    reconstruction_loss,
    softmax_cross_entropy,
)
from .adam import Adam
from .gradcheck import grad_check, numerical_gradient, relative_error

__all__ = [
    "Activation", "Conv2D", "ConvTranspose2D", "Dense", "Flatten", "Reshape",
    "Sequential", "activation", "glorot_uniform",
    "binary_cross_entropy", "mean_squared_error", "reconstruction_loss",
    "softmax_cross_entropy", "Adam",
    "grad_check", "numerical_gradient", "relative_error",
]
