"""Alternating optimization driver, evaluation, history, and checkpoints.

Each round draws one source and one target mini-batch and performs two Adam
sub-steps with separate optimizer states:

* step A (variational inference): minimize ``-LL + KL`` over the posterior
  parameters (m, log_s) only;
* step B (model selection): minimize ``-LL + KL + lambda * MS`` over the
  feature-net parameters only (the KL has zero gradient there).

Each sub-step draws fresh reparameterization noise.  Everything is driven by
one seeded generator, so a (config, data) pair reproduces bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .diffmath import Gradient, ParamVector, Tensor
from .featurenet import (
    ACTIVATIONS,
    FeatureNet,
    features,
    forward_features,
    init_feature_params,
    weight_segments,
)
from .gp_head import VariationalPosterior, kl_core, predict_batch
from .objectives import ll_core, ms_core


class TrainingDivergedError(RuntimeError):
    """A loss or gradient became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    """All hyperparameters of a run.

    Defaults follow the reference settings: lam=50, alpha=2, unit margin,
    M=50 posterior draws per step, batches of 32 from each domain, and Adam
    at lr 2e-4 with momenta (0.5, 0.999).
    """

    input_dim: int
    n_classes: int
    feature_dim: int = 16
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    lam: float = 50.0
    alpha: float = 2.0
    margin: float = 1.0
    mc_samples: int = 50
    batch_source: int = 32
    batch_target: int = 32
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    steps: int = 1000
    seed: int = 0
    bayes_error_mode: str = "as_written"
    inference_steps_per_round: int = 1
    model_steps_per_round: int = 1
    eval_every: int = 0
    mcda_n: int = 4

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.feature_dim)

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.input_dim < 1 or self.feature_dim < 1:
            raise ValueError("input_dim and feature_dim must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if min(self.lam, self.alpha, self.lr, self.beta1, self.beta2, self.adam_epsilon) < 0:
            raise ValueError("rates and loss weights must be nonnegative")
        if self.batch_source < 1 or self.batch_target < 1:
            raise ValueError("batch sizes must be at least 1")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.inference_steps_per_round < 1 or self.model_steps_per_round < 1:
            raise ValueError("per-round step counts must be at least 1")
        if self.bayes_error_mode not in ("as_written", "midpoint"):
            raise ValueError("bayes_error_mode must be 'as_written' or 'midpoint'")
        if self.mcda_n < 0:
            raise ValueError("mcda_n must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def config_digest(config: TrainConfig) -> str:
    """Stable hash of the config for checkpoint headers and manifests."""
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators and the step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def _adam_step(
    theta: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
) -> tuple[np.ndarray, AdamState]:
    if not np.isfinite(grad).all():
        raise dm.NonFiniteError("Adam step rejected: non-finite gradient")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_theta, AdamState(m, v, t)


def adam_update(
    params: ParamVector,
    grad: Gradient,
    state: AdamState,
    lr: float,
    beta1: float = 0.5,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParamVector, AdamState]:
    """One bias-corrected Adam update over a whole parameter vector."""
    if grad.values.shape != params.values.shape:
        raise ValueError("gradient and parameter shapes differ")
    new_values, new_state = _adam_step(params.values, grad.values, state, lr, beta1, beta2, eps)
    return params.with_values(new_values), new_state


# ---------------------------------------------------------------------------
# Mini-batch sampling
# ---------------------------------------------------------------------------


class _EpochSampler:
    """Without-replacement batches; reshuffles when an epoch runs dry."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = np.empty(0, dtype=np.intp)
        self._pos = 0

    def next_batch(self) -> np.ndarray:
        if self._pos + self.batch_size > self._order.size:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        batch = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return batch


# ---------------------------------------------------------------------------
# History
# ---------------------------------------------------------------------------

HISTORY_COLUMNS = ("round", "ll", "kl", "ms", "total_inference", "total_model", "src_acc", "tgt_acc")


@dataclass(frozen=True)
class HistoryRow:
    round: int
    ll: float
    kl: float
    ms: float
    total_inference: float
    total_model: float
    src_acc: float | None = None
    tgt_acc: float | None = None


@dataclass
class TrainHistory:
    rows: list[HistoryRow] = field(default_factory=list)

    def append(self, row: HistoryRow) -> None:
        if self.rows and row.round <= self.rows[-1].round:
            raise ValueError("history rounds must be strictly increasing")
        self.rows.append(row)

    def to_csv(self) -> str:
        def cell(x) -> str:
            return "" if x is None else repr(float(x))

        lines = [",".join(HISTORY_COLUMNS)]
        for r in self.rows:
            lines.append(
                ",".join(
                    [
                        str(r.round),
                        cell(r.ll),
                        cell(r.kl),
                        cell(r.ms),
                        cell(r.total_inference),
                        cell(r.total_model),
                        cell(r.src_acc),
                        cell(r.tgt_acc),
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _group_indices(layout: dict[str, tuple[int, int]], prefix: str) -> np.ndarray:
    spans = [
        np.arange(off, off + length)
        for name, (off, length) in sorted(layout.items(), key=lambda kv: kv[1][0])
        if name.startswith(prefix)
    ]
    return np.concatenate(spans) if spans else np.empty(0, dtype=np.intp)


def init_gpda_params(config: TrainConfig, rng: np.random.Generator) -> ParamVector:
    """Feature-net weights plus the posterior at its prior (m=0, log_s=0)."""
    shape = (config.n_classes, config.feature_dim)
    segments = init_feature_params(config.sizes, rng)
    segments.append(("q.m", np.zeros(shape)))
    segments.append(("q.log_s", np.zeros(shape)))
    return ParamVector.build(segments)


def posterior_from_params(params: ParamVector, config: TrainConfig) -> VariationalPosterior:
    shape = (config.n_classes, config.feature_dim)
    return VariationalPosterior(
        params.segment("q.m").reshape(shape), params.segment("q.log_s").reshape(shape)
    )


def _validate_data(config: TrainConfig, data) -> None:
    if data.source_x.shape[0] < 1:
        raise ValueError("need at least one labelled source sample")
    if data.target_train_x.shape[0] < 1:
        raise ValueError("need at least one target training sample")
    if data.source_x.shape[1] != config.input_dim:
        raise ValueError(
            f"config input_dim {config.input_dim} != data dimension {data.source_x.shape[1]}"
        )
    if np.any((data.source_y < 0) | (data.source_y >= config.n_classes)):
        raise ValueError(f"source labels must lie in [0, {config.n_classes})")


def train(config: TrainConfig, data) -> tuple[FeatureNet, VariationalPosterior, TrainHistory]:
    """Run the two-step alternating optimization for ``config.steps`` rounds.

    Logged per round are the components of the model-selection objective as
    evaluated at the start of step B (after that round's inference step);
    accuracies are filled every ``eval_every`` rounds and at the final round
    when ``eval_every > 0``.
    """
    config.validate()
    _validate_data(config, data)

    rng = np.random.default_rng(config.seed)
    params = init_gpda_params(config, rng)
    layout = params.layout
    q_idx = _group_indices(layout, "q.")
    net_idx = _group_indices(layout, "net.")
    adam_q = AdamState.zeros(q_idx.size)
    adam_net = AdamState.zeros(net_idx.size)
    history = TrainHistory()

    shape = (config.n_classes, config.feature_dim)
    n_source_total = data.source_x.shape[0]
    src_sampler = _EpochSampler(n_source_total, config.batch_source, rng)
    tgt_sampler = _EpochSampler(data.target_train_x.shape[0], config.batch_target, rng)

    def posterior_tensors(t: Tensor) -> tuple[Tensor, Tensor]:
        return (
            dm.segment_tensor(t, layout, "q.m", shape),
            dm.segment_tensor(t, layout, "q.log_s", shape),
        )

    def inference_objective(xs, ys, noise):
        def f(t: Tensor) -> Tensor:
            m, log_s = posterior_tensors(t)
            phi = forward_features(t, layout, config.sizes, config.activation, xs)
            return kl_core(m, log_s) - ll_core(m, log_s, phi, ys, noise, n_source_total)

        return f

    def model_objective(xs, ys, xt, noise, sink: dict):
        def f(t: Tensor) -> Tensor:
            m, log_s = posterior_tensors(t)
            phi_s = forward_features(t, layout, config.sizes, config.activation, xs)
            phi_t = forward_features(t, layout, config.sizes, config.activation, xt)
            ll = ll_core(m, log_s, phi_s, ys, noise, n_source_total)
            kl = kl_core(m, log_s)
            ms = ms_core(m, log_s, phi_t, config.alpha, config.margin)
            sink["ll"] = float(ll.value)
            sink["kl"] = float(kl.value)
            sink["ms"] = float(ms.value)
            return kl - ll + config.lam * ms

        return f

    def sub_step(objective, idx: np.ndarray, state: AdamState) -> tuple[ParamVector, AdamState]:
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
        return params.with_values(new_values), state

    for round_index in range(1, config.steps + 1):
        try:
            bs = src_sampler.next_batch()
            bt = tgt_sampler.next_batch()
            xs, ys = data.source_x[bs], data.source_y[bs]
            xt = data.target_train_x[bt]

            for _ in range(config.inference_steps_per_round):
                noise = rng.standard_normal((config.mc_samples, *shape))
                params, adam_q = sub_step(inference_objective(xs, ys, noise), q_idx, adam_q)

            sink: dict = {}
            for _ in range(config.model_steps_per_round):
                noise = rng.standard_normal((config.mc_samples, *shape))
                params, adam_net = sub_step(
                    model_objective(xs, ys, xt, noise, sink), net_idx, adam_net
                )
        except dm.NonFiniteError as err:
            raise TrainingDivergedError(f"training diverged at round {round_index}: {err}") from err

        src_acc = tgt_acc = None
        if config.eval_every > 0 and (
            round_index % config.eval_every == 0 or round_index == config.steps
        ):
            net = FeatureNet(config.sizes, config.activation, params)
            q = posterior_from_params(params, config)
            src_acc = evaluate(net, q, data.source_x, data.source_y)
            if data.target_test_x.shape[0] > 0:
                tgt_acc = evaluate(net, q, data.target_test_x, data.target_test_y)
        history.append(
            HistoryRow(
                round=round_index,
                ll=sink["ll"],
                kl=sink["kl"],
                ms=sink["ms"],
                total_inference=-sink["ll"] + sink["kl"],
                total_model=-sink["ll"] + sink["kl"] + config.lam * sink["ms"],
                src_acc=src_acc,
                tgt_acc=tgt_acc,
            )
        )

    net = FeatureNet(config.sizes, config.activation, params)
    q = posterior_from_params(params, config)
    return net, q, history


def train_source_only_config(config: TrainConfig) -> TrainConfig:
    """The same architecture and schedule with the separation term disabled."""
    return replace(config, lam=0.0)


def predict_batch_model(net: FeatureNet, q: VariationalPosterior, x: np.ndarray) -> np.ndarray:
    """MAP predictions for raw inputs: features then posterior-mean argmax."""
    return predict_batch(q, features(net, x))


def evaluate(net: FeatureNet, q: VariationalPosterior, x: np.ndarray, y: np.ndarray) -> float:
    """Fraction of samples whose MAP prediction matches the label."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("evaluation set must be a nonempty (n, p) array")
    preds = predict_batch_model(net, q, x)
    return float(np.mean(preds == y))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

GPDA_MAGIC = b"GPDA1"
MCDA_MAGIC = b"MCDA1"
CHECKPOINT_VERSION = 1
_CHECKSUM_BYTES = 32  # sha256


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """Unrecognized magic or malformed header."""


class CheckpointVersionError(CheckpointError):
    """Version tag newer than this implementation understands."""


class CheckpointTruncatedError(CheckpointError):
    """File shorter than the header promises."""


class CheckpointChecksumError(CheckpointError):
    """Stored checksum does not match the file contents."""


@dataclass(frozen=True)
class CheckpointData:
    """Raw decoded checkpoint: consumers rebuild their model from it."""

    kind: str  # "gpda" or "mcda"
    version: int
    config: dict
    meta: dict
    params: ParamVector


def write_container(path, magic: bytes, config: TrainConfig, meta: dict, params: ParamVector) -> None:
    header = {
        "config": config.to_dict(),
        "config_digest": config_digest(config),
        "layout": [[name, off, length] for name, (off, length) in params.layout.items()],
        "meta": meta,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(
        [
            magic,
            CHECKPOINT_VERSION.to_bytes(2, "little"),
            len(header_bytes).to_bytes(4, "little"),
            header_bytes,
            params.values.astype("<f8").tobytes(),
        ]
    )
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def save_checkpoint(net: FeatureNet, q: VariationalPosterior, config: TrainConfig, path) -> None:
    """Persist a model losslessly (float64 little-endian, checksummed)."""
    segments = [(name, net.params.segment(name)) for name, _ in weight_segments(net.sizes)]
    segments.append(("q.m", q.m))
    segments.append(("q.log_s", q.log_s))
    params = ParamVector.build(segments)
    meta = {
        "kind": "gpda",
        "sizes": list(net.sizes),
        "activation": net.activation,
        "n_classes": q.n_classes,
        "feature_dim": q.feature_dim,
    }
    write_container(path, GPDA_MAGIC, config, meta, params)


def load_checkpoint(path) -> CheckpointData:
    """Decode and verify a checkpoint file, raising distinct errors per defect."""
    raw = Path(path).read_bytes()
    prefix_len = 5 + 2 + 4
    if len(raw) < prefix_len:
        raise CheckpointTruncatedError(f"{path}: file shorter than the fixed prefix")
    magic = raw[:5]
    if magic == GPDA_MAGIC:
        kind = "gpda"
    elif magic == MCDA_MAGIC:
        kind = "mcda"
    else:
        raise CheckpointFormatError(f"{path}: unrecognized magic {magic!r}")
    version = int.from_bytes(raw[5:7], "little")
    if version > CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: version {version} is newer than supported {CHECKPOINT_VERSION}"
        )
    header_len = int.from_bytes(raw[7:11], "little")
    header_end = prefix_len + header_len
    if len(raw) < header_end:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(raw[prefix_len:header_end].decode("utf-8"))
        layout_list = header["layout"]
        config = header["config"]
        meta = header["meta"]
        digest = header["config_digest"]
    except (ValueError, KeyError) as err:
        raise CheckpointFormatError(f"{path}: malformed header: {err}") from err
    n_values = sum(length for _, _, length in layout_list)
    payload_end = header_end + 8 * n_values
    expected_size = payload_end + _CHECKSUM_BYTES
    if len(raw) < expected_size:
        raise CheckpointTruncatedError(
            f"{path}: expected {expected_size} bytes, found {len(raw)}"
        )
    if len(raw) > expected_size:
        raise CheckpointFormatError(f"{path}: {len(raw) - expected_size} trailing bytes")
    if hashlib.sha256(raw[:payload_end]).digest() != raw[payload_end:expected_size]:
        raise CheckpointChecksumError(f"{path}: checksum mismatch")
    if config_digest(TrainConfig.from_dict(config)) != digest:
        raise CheckpointChecksumError(f"{path}: config digest mismatch")
    values = np.frombuffer(raw[header_end:payload_end], dtype="<f8").astype(np.float64)
    layout = {name: (off, length) for name, off, length in layout_list}
    return CheckpointData(kind, version, config, meta, ParamVector(values, layout))


def model_from_checkpoint(ck: CheckpointData) -> tuple[FeatureNet, VariationalPosterior]:
    """Rebuild the feature net and posterior from decoded checkpoint data."""
    if ck.kind != "gpda":
        raise CheckpointFormatError(f"expected a gpda checkpoint, got {ck.kind!r}")
    sizes = tuple(ck.meta["sizes"])
    net = FeatureNet(sizes, ck.meta["activation"], ck.params)
    shape = (ck.meta["n_classes"], ck.meta["feature_dim"])
    q = VariationalPosterior(
        ck.params.segment("q.m").reshape(shape), ck.params.segment("q.log_s").reshape(shape)
    )
    return net, q
