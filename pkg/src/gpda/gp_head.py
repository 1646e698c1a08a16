"""Variational weight posterior and everything computed from it.

The classifier keeps one weight vector per class label over the d-dimensional
features.  The posterior over those weights is a fully factorized Gaussian
with per-class means ``m_j`` and diagonal covariances ``S_j``; the diagonals
are parameterized through their log so positivity never needs a constraint.

Provided here: the closed-form KL to the standard-normal prior, reparameterized
weight sampling, per-input posterior moments of the latent class scores, the
softmax log-likelihood, and the MAP class-prediction rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor


@dataclass(frozen=True)
class VariationalPosterior:
    """Per-class posterior means and log-diagonal covariances, each (K, d)."""

    m: np.ndarray
    log_s: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        log_s = np.asarray(self.log_s, dtype=np.float64)
        if m.ndim != 2 or m.shape != log_s.shape:
            raise ValueError("m and log_s must be 2-D arrays of identical shape (K, d)")
        if not (np.isfinite(m).all() and np.isfinite(log_s).all()):
            raise dm.NonFiniteError("posterior parameters must be finite")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "log_s", log_s)

    @classmethod
    def initial(cls, n_classes: int, feature_dim: int) -> "VariationalPosterior":
        """Start at the prior: zero means, identity covariances."""
        return cls(np.zeros((n_classes, feature_dim)), np.zeros((n_classes, feature_dim)))

    @property
    def n_classes(self) -> int:
        return self.m.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.m.shape[1]


@dataclass(frozen=True)
class PosteriorMoments:
    """Mean and standard deviation of each class's latent score at one input."""

    mu: np.ndarray
    sigma: np.ndarray


# ---------------------------------------------------------------------------
# Tape cores (shared by the public evaluation API and the training objectives)
# ---------------------------------------------------------------------------


def kl_core(m: Tensor, log_s: Tensor) -> Tensor:
    """KL(q || N(0, I)) = 1/2 sum_j (Tr S_j + ||m_j||^2 - logdet S_j - d)."""
    n_classes, feature_dim = m.value.shape
    return 0.5 * (
        dm.exp(log_s).sum() + (m * m).sum() - log_s.sum() - float(n_classes * feature_dim)
    )


def weight_samples_core(m: Tensor, log_s: Tensor, noise: np.ndarray) -> Tensor:
    """w_j = m_j + S_j^{1/2} eps_j elementwise; ``noise`` broadcasts over (K, d)."""
    return m + dm.exp(log_s * 0.5) * Tensor(noise, op="noise")


def moments_core(m: Tensor, log_s: Tensor, phi: Tensor) -> tuple[Tensor, Tensor]:
    """Batched posterior moments: (n, d) features -> (n, K) mu and sigma."""
    mu = phi @ m.T
    sigma = dm.sqrt((phi * phi) @ dm.exp(log_s).T)
    return mu, sigma


def picked_logprob_core(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """Softmax log-probability of the labelled class per row of ``logits``."""
    picked = (logits * Tensor(onehot, op="onehot")).sum(axis=-1)
    return picked - dm.logsumexp(logits, axis=-1)


# ---------------------------------------------------------------------------
# Public evaluation API
# ---------------------------------------------------------------------------


def kl(q: VariationalPosterior) -> float:
    """Closed-form KL from the posterior to the standard-normal prior (>= 0)."""
    return float(kl_core(Tensor(q.m), Tensor(q.log_s)).value)


def sample_weights(q: VariationalPosterior, noise: np.ndarray) -> np.ndarray:
    """One reparameterized weight draw per standard-normal noise array.

    ``noise`` must end in the (K, d) posterior shape; leading axes give
    independent draws, and the result matches the noise shape.
    """
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-2:] != q.m.shape:
        raise ValueError(f"noise must end in shape {q.m.shape}, got {noise.shape}")
    return weight_samples_core(Tensor(q.m), Tensor(q.log_s), noise).value


def moments(q: VariationalPosterior, phi: np.ndarray) -> PosteriorMoments:
    """mu_j = m_j . phi and sigma_j = sqrt(phi^T S_j phi) for one feature vector."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (q.feature_dim,):
        raise ValueError(f"phi must have shape ({q.feature_dim},), got {phi.shape}")
    mu, sigma = moments_batch(q, phi[None, :])
    return PosteriorMoments(mu[0], sigma[0])


def moments_batch(q: VariationalPosterior, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior moments for a batch of feature rows: (n, K) mu and sigma."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim != 2 or phi.shape[1] != q.feature_dim:
        raise ValueError(f"expected features of shape (n, {q.feature_dim}), got {phi.shape}")
    mu = phi @ q.m.T
    sigma = np.sqrt((phi * phi) @ np.exp(q.log_s).T)
    return mu, sigma


def log_likelihood_softmax(weights: np.ndarray, phi: np.ndarray, y: int) -> float:
    """log softmax likelihood of label ``y``: f_y - log sum_r exp(f_r), f = W phi."""
    weights = np.asarray(weights, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    n_classes = weights.shape[0]
    if not 0 <= int(y) < n_classes:
        raise ValueError(f"label {y} out of range for {n_classes} classes")
    logits = weights @ phi
    mx = logits.max()
    return float(logits[int(y)] - (mx + np.log(np.exp(logits - mx).sum())))


def predict(q: VariationalPosterior, phi: np.ndarray) -> int:
    """MAP class: argmax_j of the posterior mean score (ties -> lowest index)."""
    return int(np.argmax(moments(q, phi).mu))


def predict_batch(q: VariationalPosterior, phi: np.ndarray) -> np.ndarray:
    """MAP class per feature row (ties -> lowest index)."""
    mu, _ = moments_batch(q, phi)
    return np.argmax(mu, axis=1)
