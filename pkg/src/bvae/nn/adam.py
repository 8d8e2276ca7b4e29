"""Adam optimizer with bias correction, keyed by parameter path."""

import numpy as np

from ..errors import NumericError


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-7):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params_and_grads):
        """Update parameters in place given [(path, param, grad), ...]."""
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for path, param, grad in params_and_grads:
            if grad.shape != param.shape:
                raise NumericError(f"gradient shape mismatch for {path}: "
                                   f"{grad.shape} vs {param.shape}")
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"non-finite gradient for parameter {path}")
            m = self.m.get(path)
            if m is None:
                m = self.m[path] = np.zeros_like(param)
                self.v[path] = np.zeros_like(param)
            v = self.v[path]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            m_hat = m / correct1
            v_hat = v / correct2
            param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_items(self):
        """Moment tensors in insertion order, for checkpointing."""
        return [(path, self.m[path], self.v[path]) for path in self.m]
