"""Loss functions, all reduced as sum-per-sample then mean-over-batch.

Each returns (loss, gradient) so callers can feed the gradient straight
into a backward pass; per-sample weights scale both.
"""

import numpy as np

from ..errors import ConfigError, ValidationError

BCE_EPS = 1e-7  # probability clamp, matches the usual framework epsilon


def _weights_column(sample_weights, batch, dtype):
    if sample_weights is None:
        return np.ones(batch, dtype=dtype)
    w = np.asarray(sample_weights, dtype=dtype)
    if w.shape != (batch,):
        raise ValidationError(f"sample_weights shape {w.shape} != ({batch},)")
    if np.any(w <= 0):
        raise ValidationError("sample_weights must be positive")
    return w


def softmax_cross_entropy(logits, labels_onehot, sample_weights=None):
    """Weighted categorical cross-entropy on logits.

    loss = mean_b w_b * (-sum_k y log p);  grad_logits = w_b * (p - y) / B.
    """
    batch = logits.shape[0]
    y = np.asarray(labels_onehot, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ValidationError(f"labels shape {y.shape} != logits shape {logits.shape}")
    if np.any(y.sum(axis=-1) <= 0):
        raise ValidationError("every label row needs at least one positive entry")
    w = _weights_column(sample_weights, batch, logits.dtype)

    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_p = shifted - log_z
    per_sample = -(y * log_p).sum(axis=-1)
    loss = float(np.mean(w * per_sample))
    grad = (np.exp(log_p) - y) * (w / batch)[:, None]
    return loss, grad


def binary_cross_entropy(x_hat, target, sample_weights=None):
    """Pixel-summed BCE; predictions are clamped to [eps, 1-eps].

    Returns (loss, grad, clamped_count); the count is a diagnostics figure
    for how many predictions left the open interval.
    """
    batch = x_hat.shape[0]
    w = _weights_column(sample_weights, batch, x_hat.dtype)
    p = x_hat.reshape(batch, -1)
    t = target.reshape(batch, -1).astype(x_hat.dtype)
    clamped_count = int(np.count_nonzero((p < BCE_EPS) | (p > 1.0 - BCE_EPS)))
    p = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    per_sample = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).sum(axis=-1)
    loss = float(np.mean(w * per_sample))
    grad = ((p - t) / (p * (1.0 - p))) * (w / batch)[:, None]
    return loss, grad.reshape(x_hat.shape), clamped_count


def mean_squared_error(x_hat, target, sample_weights=None):
    """Pixel-summed squared error, batch mean."""
    batch = x_hat.shape[0]
    w = _weights_column(sample_weights, batch, x_hat.dtype)
    d = (x_hat.reshape(batch, -1) - target.reshape(batch, -1).astype(x_hat.dtype))
    per_sample = (d * d).sum(axis=-1)
    loss = float(np.mean(w * per_sample))
    grad = 2.0 * d * (w / batch)[:, None]
    return loss, grad.reshape(x_hat.shape)


def reconstruction_loss(x_hat, target, mode, sample_weights=None):
    """Dispatch on mode: 'bce' for sigmoid outputs, 'mse' for relu outputs.

    Returns (loss, grad, diagnostics) where diagnostics carries the BCE
    clamp count (always 0 for mse).
    """
    if mode == "bce":
        return binary_cross_entropy(x_hat, target, sample_weights)
    if mode == "mse":
        loss, grad = mean_squared_error(x_hat, target, sample_weights)
        return loss, grad, 0
    raise ConfigError(f"unknown reconstruction mode {mode!r}")
