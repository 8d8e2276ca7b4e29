"""Training objective pieces: latent-prior divergence and the weighted sum.

Reduction convention everywhere: sum over pixels / latent dimensions,
mean over the batch.  Per-sample weights multiply each term.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn.losses import reconstruction_loss  # noqa: F401  (re-exported)


@dataclass
class LossBreakdown:
    recon: float
    kl: float
    branch: float
    total: float

    def as_dict(self):
        return {"recon": self.recon, "kl": self.kl, "branch": self.branch,
                "total": self.total}


def kl_divergence(mu, log_var, sample_weights=None):
    """Divergence of the encoded diagonal Gaussian from the unit prior.

    Per sample: -0.5 * sum_i (1 + log var_i - var_i - mu_i^2), averaged over
    the batch.  Returns (loss, grad_mu, grad_log_var).
    """
    batch = mu.shape[0]
    if sample_weights is None:
        w = np.ones(batch, dtype=mu.dtype)
    else:
        w = np.asarray(sample_weights, dtype=mu.dtype)
    var = np.exp(log_var)
    per_sample = -0.5 * (1.0 + log_var - var - mu * mu).sum(axis=-1)
    loss = float(np.mean(w * per_sample))
    scale = (w / batch)[:, None]
    grad_mu = mu * scale
    grad_log_var = 0.5 * (var - 1.0) * scale
    return loss, grad_mu, grad_log_var


def total_loss(recon_weight, branch_weight, recon, kl, branch):
    """Combine the three terms; (1, 0) reduces to the plain VAE objective."""
    if recon_weight <= 0:
        raise ConfigError(f"recon_weight must be positive, got {recon_weight}")
    if branch_weight < 0:
        raise ConfigError(f"branch_weight must be nonnegative, got {branch_weight}")
    total = recon_weight * recon + kl + branch_weight * branch
    return LossBreakdown(float(recon), float(kl), float(branch), float(total))
