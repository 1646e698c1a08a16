"""Comparison baselines: source-only training and the MCDA coordinate descent.

MCDA trains a shared feature net G with two softmax classifier heads by
cycling three steps per round on that round's mini-batches:

1. minimize the summed cross-entropy of both heads on source (update all);
2. with G fixed, minimize cross-entropy minus the head discrepancy on target
   (update heads only), pushing the heads apart where they can disagree;
3. with the heads fixed, minimize the discrepancy (update G only), repeated
   ``n`` times on the same mini-batch.

Discrepancy is the normalized L1 distance between the heads' probability
vectors.  Predictions come from the first head.

The default source-only baseline is the main architecture trained with the
separation weight at zero; a plain single-softmax-head variant is provided
for parity with MCDA's head structure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import ParamVector, Tensor
from .featurenet import forward_features, init_feature_params
from .gp_head import picked_logprob_core
from .trainer import (
    AdamState,
    HistoryRow,
    MCDA_MAGIC,
    TrainConfig,
    TrainHistory,
    CheckpointData,
    CheckpointFormatError,
    _EpochSampler,
    _adam_step,
    _group_indices,
    _validate_data,
    write_container,
)


def mcda_discrepancy(p: np.ndarray, p_prime: np.ndarray) -> float:
    """Normalized L1 distance ||p - p'||_1 / K between two class distributions."""
    p = np.asarray(p, dtype=np.float64)
    p_prime = np.asarray(p_prime, dtype=np.float64)
    if p.shape != p_prime.shape or p.ndim != 1:
        raise ValueError("inputs must be probability vectors of the same length")
    for vec in (p, p_prime):
        if np.any(vec < 0) or abs(vec.sum() - 1.0) > 1e-9:
            raise ValueError("inputs must be valid probability distributions")
    return float(np.abs(p - p_prime).sum() / p.size)


def _head_segments(feature_dim: int, n_classes: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        ("h1.W", (n_classes, feature_dim)),
        ("h1.b", (n_classes,)),
        ("h2.W", (n_classes, feature_dim)),
        ("h2.b", (n_classes,)),
    ]


def init_mcda_params(config: TrainConfig, rng: np.random.Generator) -> ParamVector:
    segments = init_feature_params(config.sizes, rng)
    for name, shape in _head_segments(config.feature_dim, config.n_classes):
        if name.endswith(".W"):
            fan_out, fan_in = shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            segments.append((name, rng.uniform(-a, a, size=shape)))
        else:
            segments.append((name, np.zeros(shape)))
    return ParamVector.build(segments)


@dataclass(frozen=True)
class McdaModel:
    """Shared feature net plus two linear softmax heads."""

    sizes: tuple[int, ...]
    activation: str
    n_classes: int
    n: int
    params: ParamVector

    @property
    def feature_dim(self) -> int:
        return self.sizes[-1]

    def _features(self, x: np.ndarray) -> np.ndarray:
        t = Tensor(self.params.values, op="params")
        return forward_features(t, self.params.layout, self.sizes, self.activation, x).value

    def _logits(self, x: np.ndarray, head: int) -> np.ndarray:
        w = self.params.segment(f"h{head}.W").reshape(self.n_classes, self.feature_dim)
        b = self.params.segment(f"h{head}.b")
        return self._features(x) @ w.T + b

    def probabilities(self, x: np.ndarray, head: int = 1) -> np.ndarray:
        """Softmax class probabilities of one head, one row per sample."""
        logits = self._logits(x, head)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Class predictions of the first head (the one evaluated)."""
        return np.argmax(self._logits(x, 1), axis=1)


def evaluate_mcda(model: McdaModel, x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("evaluation set must be a nonempty (n, p) array")
    return float(np.mean(model.predict(x) == np.asarray(y)))


def _head_logits_core(t: Tensor, layout, phi: Tensor, head: int, shape) -> Tensor:
    w = dm.segment_tensor(t, layout, f"h{head}.W", shape)
    b = dm.segment_tensor(t, layout, f"h{head}.b")
    return phi @ w.T + b


def _cross_entropy_core(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """Mean -log p(y) over the batch."""
    n = logits.value.shape[0]
    return -(picked_logprob_core(logits, onehot).sum()) * (1.0 / n)


def _l_adv_core(logits1: Tensor, logits2: Tensor) -> Tensor:
    """Mean normalized L1 distance between the two heads' softmax outputs."""
    n, n_classes = logits1.value.shape
    p1 = dm.exp(logits1 - dm.logsumexp(logits1, axis=-1, keepdims=True))
    p2 = dm.exp(logits2 - dm.logsumexp(logits2, axis=-1, keepdims=True))
    diff = p1 - p2
    l1 = (dm.hinge(diff) + dm.hinge(-diff)).sum()  # sum |p1 - p2| over batch and classes
    return l1 * (1.0 / (n * n_classes))


def train_mcda(config: TrainConfig, data) -> tuple[McdaModel, TrainHistory]:
    """Three-step MCDA coordinate descent, deterministic per seed.

    History rows reuse the shared CSV schema: ``ll`` is the negated source
    cross-entropy L_S, ``ms`` is the adversarial discrepancy L_adv, ``kl`` is
    zero, ``total_inference`` is L_S and ``total_model`` the step-2 objective
    L_S - L_adv.
    """
    config.validate()
    _validate_data(config, data)

    rng = np.random.default_rng(config.seed)
    params = init_mcda_params(config, rng)
    layout = params.layout
    all_idx = np.arange(params.size)
    head_idx = _group_indices(layout, "h")
    net_idx = _group_indices(layout, "net.")
    adam_all = AdamState.zeros(all_idx.size)
    adam_heads = AdamState.zeros(head_idx.size)
    adam_net = AdamState.zeros(net_idx.size)
    history = TrainHistory()

    head_shape = (config.n_classes, config.feature_dim)
    src_sampler = _EpochSampler(data.source_x.shape[0], config.batch_source, rng)
    tgt_sampler = _EpochSampler(data.target_train_x.shape[0], config.batch_target, rng)

    def source_loss(t: Tensor, xs, onehot) -> Tensor:
        phi = forward_features(t, layout, config.sizes, config.activation, xs)
        ce1 = _cross_entropy_core(_head_logits_core(t, layout, phi, 1, head_shape), onehot)
        ce2 = _cross_entropy_core(_head_logits_core(t, layout, phi, 2, head_shape), onehot)
        return ce1 + ce2

    def adversarial_loss(t: Tensor, xt) -> Tensor:
        phi = forward_features(t, layout, config.sizes, config.activation, xt)
        return _l_adv_core(
            _head_logits_core(t, layout, phi, 1, head_shape),
            _head_logits_core(t, layout, phi, 2, head_shape),
        )

    def sub_step(objective, idx, state):
        nonlocal params
        _, grad = dm.value_and_grad(objective, params)
        new_values = params.values.copy()
        new_sub, state = _adam_step(
            new_values[idx],
            grad.values[idx],
            state,
            config.lr,
            config.beta1,
            config.beta2,
            config.adam_epsilon,
        )
        new_values[idx] = new_sub
        params = params.with_values(new_values)
        return state

    for round_index in range(1, config.steps + 1):
        bs = src_sampler.next_batch()
        bt = tgt_sampler.next_batch()
        xs = data.source_x[bs]
        onehot = np.eye(config.n_classes)[data.source_y[bs]]
        xt = data.target_train_x[bt]

        # step 1: cooperative fit of G and both heads on source
        adam_all = sub_step(lambda t: source_loss(t, xs, onehot), all_idx, adam_all)

        # step 2: G fixed, heads maximize target disagreement while staying accurate
        sink: dict = {}

        def step2(t: Tensor) -> Tensor:
            ls = source_loss(t, xs, onehot)
            ladv = adversarial_loss(t, xt)
            sink["ls"] = float(ls.value)
            sink["ladv"] = float(ladv.value)
            return ls - ladv

        adam_heads = sub_step(step2, head_idx, adam_heads)

        # step 3 (x n): heads fixed, G minimizes the disagreement on the same batch
        for _ in range(config.mcda_n):
            adam_net = sub_step(lambda t: adversarial_loss(t, xt), net_idx, adam_net)

        src_acc = tgt_acc = None
        if config.eval_every > 0 and (
            round_index % config.eval_every == 0 or round_index == config.steps
        ):
            model = McdaModel(config.sizes, config.activation, config.n_classes, config.mcda_n, params)
            src_acc = evaluate_mcda(model, data.source_x, data.source_y)
            if data.target_test_x.shape[0] > 0:
                tgt_acc = evaluate_mcda(model, data.target_test_x, data.target_test_y)
        history.append(
            HistoryRow(
                round=round_index,
                ll=-sink["ls"],
                kl=0.0,
                ms=sink["ladv"],
                total_inference=sink["ls"],
                total_model=sink["ls"] - sink["ladv"],
                src_acc=src_acc,
                tgt_acc=tgt_acc,
            )
        )

    model = McdaModel(config.sizes, config.activation, config.n_classes, config.mcda_n, params)
    return model, history


def save_mcda_checkpoint(model: McdaModel, config: TrainConfig, path) -> None:
    meta = {
        "kind": "mcda",
        "sizes": list(model.sizes),
        "activation": model.activation,
        "n_classes": model.n_classes,
        "mcda_n": model.n,
    }
    write_container(path, MCDA_MAGIC, config, meta, model.params)


def mcda_from_checkpoint(ck: CheckpointData) -> McdaModel:
    if ck.kind != "mcda":
        raise CheckpointFormatError(f"expected an mcda checkpoint, got {ck.kind!r}")
    return McdaModel(
        tuple(ck.meta["sizes"]),
        ck.meta["activation"],
        int(ck.meta["n_classes"]),
        int(ck.meta["mcda_n"]),
        ck.params,
    )


# ---------------------------------------------------------------------------
# Source-only baselines
# ---------------------------------------------------------------------------


def train_source_only(config: TrainConfig, data, head: str = "gp"):
    """Train on labelled source data only.

    ``head="gp"`` (default) runs the main architecture with the separation
    weight at zero, so adaptation is the only thing removed; it returns the
    same (net, posterior, history) triple as the adaptive trainer.
    ``head="softmax"`` trains the shared feature net with a single linear
    softmax head by cross-entropy, mirroring MCDA's head structure, and
    returns (model, history).
    """
    if head == "gp":
        from .trainer import train, train_source_only_config

        return train(train_source_only_config(config), data)
    if head != "softmax":
        raise ValueError("head must be 'gp' or 'softmax'")

    config.validate()
    _validate_data(config, data)
    rng = np.random.default_rng(config.seed)
    segments = init_feature_params(config.sizes, rng)
    a = np.sqrt(6.0 / (config.feature_dim + config.n_classes))
    segments.append(("h1.W", rng.uniform(-a, a, size=(config.n_classes, config.feature_dim))))
    segments.append(("h1.b", np.zeros(config.n_classes)))
    params = ParamVector.build(segments)
    layout = params.layout
    head_shape = (config.n_classes, config.feature_dim)
    adam = AdamState.zeros(params.size)
    sampler = _EpochSampler(data.source_x.shape[0], config.batch_source, rng)
    history = TrainHistory()

    for round_index in range(1, config.steps + 1):
        bs = sampler.next_batch()
        xs = data.source_x[bs]
        onehot = np.eye(config.n_classes)[data.source_y[bs]]

        sink: dict = {}

        def objective(t: Tensor) -> Tensor:
            phi = forward_features(t, layout, config.sizes, config.activation, xs)
            ce = _cross_entropy_core(_head_logits_core(t, layout, phi, 1, head_shape), onehot)
            sink["ce"] = float(ce.value)
            return ce

        _, grad = dm.value_and_grad(objective, params)
        new_values, adam = _adam_step(
            params.values,
            grad.values,
            adam,
            config.lr,
            config.beta1,
            config.beta2,
            config.adam_epsilon,
        )
        params = params.with_values(new_values)
        history.append(
            HistoryRow(
                round=round_index,
                ll=-sink["ce"],
                kl=0.0,
                ms=0.0,
                total_inference=sink["ce"],
                total_model=sink["ce"],
            )
        )

    model = McdaModel(config.sizes, config.activation, config.n_classes, 0, _with_duplicate_head(params, head_shape))
    return model, history


def _with_duplicate_head(params: ParamVector, head_shape) -> ParamVector:
    """Clone h1 into h2 so the single-head model satisfies the two-head layout."""
    segments = []
    for name, (off, length) in sorted(params.layout.items(), key=lambda kv: kv[1][0]):
        segments.append((name, params.segment(name)))
    segments.append(("h2.W", params.segment("h1.W")))
    segments.append(("h2.b", params.segment("h1.b")))
    return ParamVector.build(segments)
