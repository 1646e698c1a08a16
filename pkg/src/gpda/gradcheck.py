"""Finite-difference verification of every loss term's backward pass.

Each check draws a fresh random parameter point on a small fixture problem,
computes the reverse-mode gradient of one loss term, and compares it against
the central-difference oracle.  The relative error is norm-wise:
``max|ad - fd| / max(max|fd|, max|ad|, 1e-12)``; the reported offending
segment is the one holding the worst absolute deviation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import ParamVector, Tensor
from .baselines import _head_logits_core, _cross_entropy_core, _l_adv_core, init_mcda_params
from .featurenet import forward_features
from .gp_head import kl_core
from .objectives import ll_core, ms_core
from .trainer import TrainConfig, init_gpda_params

TERMS = ("kl", "ll", "ms", "gpda_total", "mcda_ls", "mcda_adv")

_FIXTURE = TrainConfig(
    input_dim=3,
    n_classes=3,
    feature_dim=4,
    hidden=(5,),
    activation="tanh",
    mc_samples=3,
    batch_source=6,
    batch_target=5,
)


@dataclass(frozen=True)
class TermCheck:
    term: str
    point: int
    rel_err: float
    worst_segment: str


@dataclass(frozen=True)
class GradcheckReport:
    h: float
    tol: float
    checks: list[TermCheck]

    def worst_by_term(self) -> dict[str, TermCheck]:
        worst: dict[str, TermCheck] = {}
        for c in self.checks:
            if c.term not in worst or c.rel_err > worst[c.term].rel_err:
                worst[c.term] = c
        return worst

    @property
    def passed(self) -> bool:
        return all(c.rel_err <= self.tol for c in self.checks)


def _compare(objective, params: ParamVector, h: float) -> tuple[float, str]:
    _, ad = dm.value_and_grad(objective, params)
    fd = dm.finite_diff_grad(objective, params, h)
    diff = np.abs(ad.values - fd.values)
    scale = max(np.abs(fd.values).max(), np.abs(ad.values).max(), 1e-12)
    worst_segment = ""
    worst_dev = -1.0
    for name, (off, length) in params.layout.items():
        dev = diff[off : off + length].max() if length else 0.0
        if dev > worst_dev:
            worst_dev = dev
            worst_segment = name
    return float(diff.max() / scale), worst_segment


def _random_point(kind: str, rng: np.random.Generator) -> ParamVector:
    cfg = _FIXTURE
    base = init_gpda_params(cfg, rng) if kind == "gpda" else init_mcda_params(cfg, rng)
    # perturb away from the zero-init posterior so log_s gradients are generic
    values = base.values + 0.3 * rng.standard_normal(base.size)
    return base.with_values(values)


def _objective(term: str, rng: np.random.Generator):
    cfg = _FIXTURE
    shape = (cfg.n_classes, cfg.feature_dim)
    xs = rng.normal(0.0, 1.0, size=(cfg.batch_source, cfg.input_dim))
    ys = rng.integers(0, cfg.n_classes, size=cfg.batch_source)
    xt = rng.normal(0.0, 1.0, size=(cfg.batch_target, cfg.input_dim))
    noise = rng.standard_normal((cfg.mc_samples, *shape))
    onehot = np.eye(cfg.n_classes)[ys]
    n_total = 40

    def posterior(t: Tensor):
        return (
            dm.segment_tensor(t, layout, "q.m", shape),
            dm.segment_tensor(t, layout, "q.log_s", shape),
        )

    if term in ("kl", "ll", "ms", "gpda_total"):
        params = _random_point("gpda", rng)
        layout = params.layout

        def f(t: Tensor) -> Tensor:
            m, log_s = posterior(t)
            if term == "kl":
                return kl_core(m, log_s)
            phi_s = forward_features(t, layout, cfg.sizes, cfg.activation, xs)
            if term == "ll":
                return ll_core(m, log_s, phi_s, ys, noise, n_total)
            phi_t = forward_features(t, layout, cfg.sizes, cfg.activation, xt)
            if term == "ms":
                return ms_core(m, log_s, phi_t, cfg.alpha, cfg.margin)
            return (
                kl_core(m, log_s)
                - ll_core(m, log_s, phi_s, ys, noise, n_total)
                + cfg.lam * ms_core(m, log_s, phi_t, cfg.alpha, cfg.margin)
            )

        return f, params

    params = _random_point("mcda", rng)
    layout = params.layout
    head_shape = (cfg.n_classes, cfg.feature_dim)

    def g(t: Tensor) -> Tensor:
        if term == "mcda_ls":
            phi = forward_features(t, layout, cfg.sizes, cfg.activation, xs)
            return _cross_entropy_core(
                _head_logits_core(t, layout, phi, 1, head_shape), onehot
            ) + _cross_entropy_core(_head_logits_core(t, layout, phi, 2, head_shape), onehot)
        phi = forward_features(t, layout, cfg.sizes, cfg.activation, xt)
        return _l_adv_core(
            _head_logits_core(t, layout, phi, 1, head_shape),
            _head_logits_core(t, layout, phi, 2, head_shape),
        )

    return g, params


def run_gradcheck(
    h: float = 1e-5,
    tol: float | None = None,
    seed: int = 0,
    points_per_term: int = 20,
) -> GradcheckReport:
    """Check every loss term at ``points_per_term`` random parameter points."""
    if tol is None:
        tol = 10.0 * h
    rng = np.random.default_rng(seed)
    checks = []
    for term in TERMS:
        for point in range(points_per_term):
            objective, params = _objective(term, rng)
            rel, segment = _compare(objective, params, h)
            checks.append(TermCheck(term, point, rel, segment))
    return GradcheckReport(h=h, tol=tol, checks=checks)
