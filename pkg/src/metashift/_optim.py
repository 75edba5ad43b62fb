"""First-order optimizer and early-stopping bookkeeping shared by the
classifier trainer and the calibrator."""
import numpy as np


class AdamW:
    """AdamW over a flat parameter vector; ``weight_decay`` is decoupled."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
                 decay_mask=None):
        self.params = np.array(params, dtype=np.float64)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_mask = np.ones_like(self.params) if decay_mask is None else decay_mask
        self.m = np.zeros_like(self.params)
        self.v = np.zeros_like(self.params)
        self.t = 0

    def step(self, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        if self.weight_decay:
            self.params -= self.lr * self.weight_decay * self.decay_mask * self.params
        self.params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return self.params


class EmaEarlyStopping:
    """Stop when the smoothed loss has not improved for ``patience`` epochs.

    Smoothing follows the shadow-variable convention
    ``ema = decay * ema + (1 - decay) * loss``, initialised at the first loss.
    """

    def __init__(self, decay, patience):
        self.decay = decay
        self.patience = patience
        self.ema = None
        self.best = np.inf
        self.bad_epochs = 0
        self.history = []

    def update(self, loss):
        self.ema = loss if self.ema is None else self.decay * self.ema + (1 - self.decay) * loss
        self.history.append(self.ema)
        if self.ema < self.best:
            self.best = self.ema
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience
