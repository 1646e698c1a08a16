"""Training losses and the two composite objectives of the alternating scheme.

Three terms drive training:

* ``LL`` - stochastic estimate of the source log-likelihood: an average over
  M reparameterized weight draws of the batch log-softmax, rescaled by
  N_S / |B_S| so it estimates the full-dataset sum.
* ``KL`` - closed-form divergence of the weight posterior from its prior.
* ``MS`` - max-separation hinge on unlabeled target samples: the top posterior
  mean must beat the runner-up by a margin plus ``alpha`` times the largest
  posterior standard deviation, otherwise the slack is paid linearly.

The inference objective is ``-LL + KL``; the model objective adds
``lambda * MS``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .featurenet import FeatureNet, features
from .gp_head import (
    VariationalPosterior,
    kl,
    kl_core,
    moments_core,
    picked_logprob_core,
    weight_samples_core,
)

# added to masked-out entries when selecting the runner-up class; large enough
# to never win an argmax, small enough to stay finite
_MASK = -1e30


def ll_core(
    m: Tensor,
    log_s: Tensor,
    phi: Tensor,
    y: np.ndarray,
    noise: np.ndarray,
    n_source_total: int,
) -> Tensor:
    """Monte-Carlo log-likelihood over one labelled batch (tape version)."""
    n_draws = noise.shape[0]
    n_batch = phi.value.shape[0]
    n_classes = m.value.shape[0]
    w = weight_samples_core(m, log_s, noise)  # (M, K, d)
    logits = phi @ w.T  # (n, d) @ (M, d, K) -> (M, n, K)
    onehot = np.eye(n_classes)[np.asarray(y, dtype=np.intp)]  # (n, K)
    logprob = picked_logprob_core(logits, onehot)  # (M, n)
    return logprob.sum() * (float(n_source_total) / (n_draws * n_batch))


def ms_core(m: Tensor, log_s: Tensor, phi: Tensor, alpha: float, margin: float) -> Tensor:
    """Max-separation hinge over one unlabeled batch (tape version)."""
    n_classes = m.value.shape[0]
    if n_classes < 2:
        raise ValueError("max-separation needs at least two classes")
    mu, sigma = moments_core(m, log_s, phi)  # (n, K) each
    n_batch = mu.value.shape[0]
    top_idx = np.argmax(mu.value, axis=1)  # ties -> lowest index
    mask = np.zeros_like(mu.value)
    mask[np.arange(n_batch), top_idx] = _MASK
    runner_up = (mu + Tensor(mask, op="mask")).max(axis=-1)
    top = mu.max(axis=-1)
    slack = dm.hinge(runner_up - top + float(margin) + float(alpha) * sigma.max(axis=-1))
    return slack.sum() * (1.0 / n_batch)


@dataclass(frozen=True)
class LossBreakdown:
    """One evaluation of all loss terms plus the two composite totals."""

    ll: float
    kl: float
    ms: float
    lam: float

    @property
    def total_inference(self) -> float:
        return -self.ll + self.kl

    @property
    def total_model(self) -> float:
        return -self.ll + self.kl + self.lam * self.ms


def ll_estimate(
    q: VariationalPosterior,
    net: FeatureNet,
    source_x: np.ndarray,
    source_y: np.ndarray,
    noise: np.ndarray,
    n_source_total: int | None = None,
) -> float:
    """Stochastic source log-likelihood for a labelled batch.

    ``noise`` holds the reparameterization draws, shaped (M, K, d); with the
    same noise the value is deterministic.  ``n_source_total`` is the size of
    the full source dataset the batch was drawn from (defaults to the batch
    size, i.e. no rescaling).
    """
    source_x = np.asarray(source_x, dtype=np.float64)
    source_y = np.asarray(source_y)
    if source_x.ndim != 2 or source_x.shape[0] == 0:
        raise ValueError("source batch must be a nonempty (n, p) array")
    if source_y.shape != (source_x.shape[0],):
        raise ValueError("labels must be a vector matching the batch size")
    if np.any((source_y < 0) | (source_y >= q.n_classes)):
        raise ValueError(f"labels must lie in [0, {q.n_classes})")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim != 3 or noise.shape[0] < 1 or noise.shape[1:] != q.m.shape:
        raise ValueError(f"noise must have shape (M, {q.n_classes}, {q.feature_dim})")
    if n_source_total is None:
        n_source_total = source_x.shape[0]
    phi = Tensor(features(net, source_x), op="features")
    out = ll_core(Tensor(q.m), Tensor(q.log_s), phi, source_y, noise, n_source_total)
    return float(out.value)


def ms_loss(
    q: VariationalPosterior,
    net: FeatureNet,
    target_x: np.ndarray,
    alpha: float,
    margin: float = 1.0,
) -> float:
    """Mean max-separation hinge over an unlabeled target batch (>= 0)."""
    target_x = np.asarray(target_x, dtype=np.float64)
    if target_x.ndim != 2 or target_x.shape[0] == 0:
        raise ValueError("target batch must be a nonempty (n, p) array")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    phi = Tensor(features(net, target_x), op="features")
    return float(ms_core(Tensor(q.m), Tensor(q.log_s), phi, alpha, margin).value)


def composite_losses(
    q: VariationalPosterior,
    net: FeatureNet,
    source_batch: tuple[np.ndarray, np.ndarray],
    target_batch: np.ndarray,
    noise: np.ndarray,
    config,
    n_source_total: int | None = None,
) -> LossBreakdown:
    """Assemble LL, KL, MS and both composite totals for one pair of batches.

    ``config`` supplies ``lam``, ``alpha`` and ``margin`` (a TrainConfig or
    anything with those attributes).
    """
    source_x, source_y = source_batch
    return LossBreakdown(
        ll=ll_estimate(q, net, source_x, source_y, noise, n_source_total),
        kl=kl(q),
        ms=ms_loss(q, net, target_batch, config.alpha, config.margin),
        lam=config.lam,
    )
