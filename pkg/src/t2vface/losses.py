"""Training objectives.

All losses are means over elements/patches so the default weighting
(lambda1 = lambda2 = 100) keeps terms on a comparable scale at any
resolution. Probabilities are clamped to [EPSILON, 1-EPSILON] before any
logarithm, so scores of exactly 0 or 1 stay finite.

Note on the reconstruction term: it penalizes the mean absolute deviation of
the generated image from the ground-truth visible image, |Y - G(X)|.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

EPSILON = 1e-7


@dataclass
class LossWeights:
    lambda1: float = 100.0  # reconstruction weight
    lambda2: float = 100.0  # identity weight; 0 gives the plain adversarial+L1 ablation

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0.0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
            setattr(self, name, v)


@dataclass
class LossReport:
    d_adv: float
    g_adv: float
    l1: float
    d_id: float
    g_id: float
    total_g: float
    total_d: float

    def log_record(self, step, epoch):
        rec = {"step": int(step), "epoch": int(epoch)}
        rec.update(
            {
                "d_adv": self.d_adv,
                "g_adv": self.g_adv,
                "l1": self.l1,
                "d_id": self.d_id,
                "g_id": self.g_id,
                "total_g": self.total_g,
                "total_d": self.total_d,
            }
        )
        return rec


def _scores(x, name):
    t = _tensor(x)
    if torch.any(t < 0.0) or torch.any(t > 1.0):
        raise ValueError(f"{name} must lie in [0, 1] before clamping")
    return t.clamp(EPSILON, 1.0 - EPSILON)


def _tensor(x):
    if hasattr(x, "data") and not torch.is_tensor(x):  # ImageTensor duck-typing
        x = x.data
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(x, dtype=torch.get_default_dtype())


def discriminator_adv_loss(realness_real, realness_fake):
    """-mean(log D(real)) - mean(log(1 - D(fake))): the discriminator's side
    of the conditional adversarial objective, written as a minimization."""
    real = _scores(realness_real, "realness_real")
    fake = _scores(realness_fake, "realness_fake")
    return -(real.log().mean()) - ((1.0 - fake).log().mean())


def generator_adv_loss(realness_fake):
    """Non-saturating generator objective: -mean(log D(fake))."""
    fake = _scores(realness_fake, "realness_fake")
    return -(fake.log().mean())


def l1_loss(y, y_hat):
    a, b = _tensor(y), _tensor(y_hat)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def mse_loss(y, y_hat):
    a, b = _tensor(y), _tensor(y_hat)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def _one_hot_indices(true_id, n_classes):
    """Validate one-hot target rows and return their class indices."""
    t = _tensor(true_id)
    if t.ndim == 1:
        t = t[None, :]
    if t.ndim != 2 or t.shape[-1] != n_classes:
        raise ValueError(f"one-hot must have length {n_classes}, got shape {tuple(t.shape)}")
    ones = torch.ones(t.shape[0], dtype=t.dtype)
    if not torch.allclose(t.sum(dim=-1), ones) or not torch.allclose(t.max(dim=-1).values, ones):
        raise ValueError("identity vectors must be one-hot")
    idx = t.argmax(dim=-1)
    if torch.any(idx == n_classes - 1):
        raise ValueError("true identity must not be the reserved generated class")
    return idx


def cross_entropy_one_hot(logits, target):
    """Softmax cross-entropy against an index (or per-row indices), averaged."""
    t = _tensor(logits)
    if t.ndim == 1:
        t = t[None, :]
    log_probs = torch.log_softmax(t, dim=-1)
    if torch.is_tensor(target):
        idx = target.reshape(-1, 1)
    else:
        idx = torch.full((t.shape[0], 1), int(target), dtype=torch.long)
    return -log_probs.gather(-1, idx).mean()


def identity_loss_discriminator(id_logits_real, true_id, id_logits_fake, include_fake_term=True):
    """Cross-entropy of the identity head: real pairs against the true
    subject, generated pairs against the reserved extra class.

    The generated-pair term can be dropped with include_fake_term=False to
    train the head on real images only.
    """
    real = _tensor(id_logits_real)
    n_classes = real.shape[-1]
    idx = _one_hot_indices(true_id, n_classes)
    loss = cross_entropy_one_hot(real, idx)
    if include_fake_term:
        fake = _tensor(id_logits_fake)
        if fake.shape[-1] != n_classes:
            raise ValueError("real and fake identity logits disagree in length")
        loss = loss + cross_entropy_one_hot(fake, n_classes - 1)
    return loss


def identity_loss_generator(id_logits_fake, true_id):
    """Cross-entropy of generated pairs against the true subject: pushes the
    generator to produce images the identity head recognizes."""
    fake = _tensor(id_logits_fake)
    n_classes = fake.shape[-1]
    idx = _one_hot_indices(true_id, n_classes)
    return cross_entropy_one_hot(fake, idx)


def tvgan_generator_total(g_adv, l1, g_id, weights):
    """Combined generator objective: adversarial + lambda1*L1 + lambda2*identity.

    Works on plain floats and on tensors, so it serves both for reporting and
    inside the training graph. With lambda2 = 0 this is exactly the
    adversarial + L1 ablation objective.
    """
    return g_adv + weights.lambda1 * l1 + weights.lambda2 * g_id
