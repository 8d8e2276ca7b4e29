"""Convolutional encoder/decoder pair with a Gaussian latent bottleneck.

Encoder: conv(32, stride 2) -> conv(64, stride 2) -> dense 16 -> two linear
heads emitting the latent mean and log-variance.  Decoder mirrors it: dense
to 7*7*64, reshape, two stride-2 transposed convolutions (64 then 32
filters), and a stride-1 convolution down to one channel under a sigmoid
(or relu for synthetic-target training).  Image extents must be divisible
by 4 so the stride-2 pairs compose; 28x28 gives the 3136-unit dense stage.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .nn.layers import (
    Activation,
    Conv2D,
    ConvTranspose2D,
    Dense,
    Flatten,
    Reshape,
    Sequential,
)

LOG_VAR_CLIP = 10.0  # keeps exp(log_var) finite in float32


@dataclass
class LatentBatch:
    """Per-sample latent record: z = mu + exp(log_var / 2) * epsilon."""

    mu: np.ndarray
    log_var: np.ndarray
    epsilon: np.ndarray
    z: np.ndarray


def reparameterize(mu, log_var, epsilon):
    """Differentiable sampling: scale unit noise by the encoded deviation."""
    z = mu + np.exp(0.5 * log_var) * epsilon
    return LatentBatch(mu, log_var, epsilon, z)


class VaeModel:
    def __init__(self, latent_dim=2, output_activation="sigmoid", rng=None,
                 image_shape=(28, 28, 1), conv_filters=(32, 64), trunk_units=16,
                 dtype=np.float32):
        if output_activation not in ("sigmoid", "relu"):
            raise ConfigError(f"output activation must be sigmoid or relu, "
                              f"got {output_activation!r}")
        h, w, channels = image_shape
        if h % 4 or w % 4:
            raise ConfigError(f"image extents must be divisible by 4, got {h}x{w}")
        if rng is None:
            rng = np.random.default_rng(0)
        f1, f2 = conv_filters
        h4, w4 = h // 4, w // 4
        self.latent_dim = latent_dim
        self.image_shape = tuple(image_shape)
        self.output_activation = output_activation

        self.encoder = Sequential([
            Conv2D(channels, f1, rng, stride=2, name="enc_conv1", dtype=dtype),
            Activation("relu"),
            Conv2D(f1, f2, rng, stride=2, name="enc_conv2", dtype=dtype),
            Activation("relu"),
            Flatten(),
            Dense(h4 * w4 * f2, trunk_units, rng, name="enc_dense", dtype=dtype),
            Activation("relu"),
        ])
        self.head_mu = Dense(trunk_units, latent_dim, rng, name="head_mu", dtype=dtype)
        self.head_log_var = Dense(trunk_units, latent_dim, rng, name="head_log_var", dtype=dtype)
        self.decoder = Sequential([
            Dense(latent_dim, h4 * w4 * f2, rng, name="dec_dense", dtype=dtype),
            Activation("relu"),
            Reshape((h4, w4, f2)),
            ConvTranspose2D(f2, f2, rng, stride=2, name="dec_tconv1", dtype=dtype),
            Activation("relu"),
            ConvTranspose2D(f2, f1, rng, stride=2, name="dec_tconv2", dtype=dtype),
            Activation("relu"),
            Conv2D(f1, channels, rng, stride=1, name="dec_conv_out", dtype=dtype),
            Activation(output_activation, name="dec_out_act"),
        ])
        self._clip_mask = None

    # -- forward ---------------------------------------------------------

    def encode(self, x):
        """Latent mean and clipped log-variance for a batch of images."""
        if x.ndim != 4 or x.shape[1:] != self.image_shape:
            raise ShapeError(f"encoder expected (B, {self.image_shape}), got {x.shape}")
        trunk = self.encoder.forward(x)
        mu = self.head_mu.forward(trunk)
        raw = self.head_log_var.forward(trunk)
        self._clip_mask = (raw > -LOG_VAR_CLIP) & (raw < LOG_VAR_CLIP)
        return mu, np.clip(raw, -LOG_VAR_CLIP, LOG_VAR_CLIP)

    def decode(self, z):
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"decoder expected (B, {self.latent_dim}), got {z.shape}")
        return self.decoder.forward(z)

    def encode_mu(self, x, chunk=1024):
        """Deterministic evaluation codes (z = mu), chunked to bound memory."""
        out = np.empty((x.shape[0], self.latent_dim), dtype=x.dtype)
        for lo in range(0, x.shape[0], chunk):
            out[lo:lo + chunk] = self.encode(x[lo:lo + chunk])[0]
        return out

    # -- backward --------------------------------------------------------

    def backward_decoder(self, grad_xhat):
        """Gradient of the decoder output w.r.t. the latent codes."""
        return self.decoder.backward(grad_xhat)

    def backward_encoder(self, grad_mu, grad_log_var):
        """Push head gradients through both heads into the shared trunk."""
        if self._clip_mask is None:
            raise UsageError("backward_encoder without a matching encode")
        grad_log_var = grad_log_var * self._clip_mask
        trunk_grad = self.head_mu.backward(grad_mu)
        trunk_grad = trunk_grad + self.head_log_var.backward(grad_log_var)
        self.encoder.backward(trunk_grad)

    # -- parameter plumbing ------------------------------------------------

    def param_items(self):
        items = self.encoder.param_items("encoder.")
        items += [(f"head_mu.{n}", a) for n, a in self.head_mu.params.items()]
        items += [(f"head_log_var.{n}", a) for n, a in self.head_log_var.params.items()]
        items += self.decoder.param_items("decoder.")
        return items

    def grad_items(self):
        items = self.encoder.grad_items("encoder.")
        items += [(f"head_mu.{n}", g) for n, g in self.head_mu.grads.items()]
        items += [(f"head_log_var.{n}", g) for n, g in self.head_log_var.grads.items()]
        items += self.decoder.grad_items("decoder.")
        return items


def decoder_grid(model, value_range=(-3.0, 3.0), steps=30):
    """Decode a steps x steps lattice over a 2-D latent square.

    Row-major order with the top-left patch at (z1, z2) = (low, high):
    z1 grows left to right, z2 shrinks top to bottom.
    """
    if model.latent_dim != 2:
        raise ConfigError(f"decoder_grid needs a 2-D latent space, got {model.latent_dim}")
    low, high = value_range
    ticks = low + (high - low) * np.arange(steps) / (steps - 1)
    z1 = np.tile(ticks, steps)
    z2 = np.repeat(ticks[::-1], steps)
    z = np.stack([z1, z2], axis=1).astype(np.float32)
    images = np.empty((steps * steps,) + model.image_shape[:2], dtype=np.float32)
    for lo in range(0, len(z), 256):
        images[lo:lo + 256] = model.decode(z[lo:lo + 256])[..., 0]
    return images
