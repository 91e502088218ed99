"""Training loop: pair sampling, optimisers, learning-rate schedule, metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import LabeledBatch, augment
from .errors import ConfigError, ContractError, DegenerateVectorError, DimensionError, NonFiniteError, NumericAbort
from .gradcheck import finite_difference_check
from .loss import BatchLoss, LossConfig, PairAssignment, gate_penalty, ucl_batch_loss
from .model import ModelConfig, ModelParams, encode, gates_for_pairs, init_params, project

log = logging.getLogger(__name__)

PAIR_STRATEGIES = ("same_class", "random_class", "n_closest")
OPTIMIZERS = ("adamw_like", "sgd_momentum")
SCHEDULES = ("cosine", "constant")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    optimizer: str = "adamw_like"
    base_lr: float = 1e-3
    weight_decay: float = 1e-2
    warmup_epochs: int = 5
    schedule: str = "cosine"
    pair_strategy: str = "random_class"
    closest_n: int = 0
    use_filter: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    augment_noise: float = 0.0
    augment_dropout: float = 0.0
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    adam_epsilon: float = 1e-8
    gradcheck_every: int = 0
    gradcheck_entries: int = 4

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.epochs < 0 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 0 and batch_size >= 2")
        if self.batch_size % 2:
            raise ConfigError(f"batch_size must be even, got {self.batch_size}")
        if self.warmup_epochs < 0 or (self.epochs > 0 and self.warmup_epochs >= self.epochs):
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.pair_strategy not in PAIR_STRATEGIES:
            raise ConfigError(f"pair_strategy must be one of {PAIR_STRATEGIES}")
        if self.closest_n < 0:
            raise ConfigError("closest_n must be >= 0")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigError("base_lr and weight_decay must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# -- pair sampling ----------------------------------------------------------


def closest_classes(class_distances: np.ndarray, n: int) -> list[set[int]]:
    """For each class: itself plus its ``n`` nearest other classes (ties by lower id)."""
    d = np.asarray(class_distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise DimensionError(f"class distance matrix must be square, got {d.shape}")
    out = []
    for c in range(d.shape[0]):
        order = [j for j in np.argsort(d[c], kind="stable") if j != c]
        out.append({c, *(int(j) for j in order[:n])})
    return out


def sample_pairs(
    labels: Sequence[int],
    strategy: str,
    rng: np.random.Generator,
    closest_n: int = 0,
    class_distances: np.ndarray | None = None,
    candidates: list[set[int]] | None = None,
) -> tuple[list[PairAssignment], int]:
    """One pair per anchor row. Returns ``(pairs, skipped_anchor_count)``.

    ``y2`` is drawn uniformly from the candidate classes that still have a
    row other than the anchor in the batch; the positive is then uniform over
    that class's rows (anchor excluded). Anchors with no such class are skipped.
    """
    labels = np.asarray(labels, dtype=np.intp)
    if strategy not in PAIR_STRATEGIES:
        raise ConfigError(f"unknown pair strategy {strategy!r}")
    if strategy == "n_closest" and candidates is None:
        if class_distances is None:
            raise ConfigError("n_closest pairing needs a class distance matrix")
        candidates = closest_classes(class_distances, closest_n)
    n = labels.shape[0]
    K = int(labels.max()) + 1 if n else 0
    if candidates is not None:
        K = max(K, len(candidates))
    counts = np.bincount(labels, minlength=K)
    if strategy == "same_class":
        allowed = np.eye(K, dtype=bool)
    elif strategy == "random_class":
        allowed = np.ones((K, K), dtype=bool)
    else:
        allowed = np.zeros((K, K), dtype=bool)
        for c, cs in enumerate(candidates):
            allowed[c, list(cs)] = True

    # rows available as positives for anchor i in class c: counts[c] minus the anchor itself
    avail = counts[None, :] - (np.arange(K)[None, :] == labels[:, None])
    eligible = allowed[labels] & (avail > 0)
    m = eligible.sum(axis=1)
    ok = np.flatnonzero(m > 0)
    if ok.size == 0:
        return [], n
    pick = rng.integers(0, m[ok])
    y2 = np.argmax(np.cumsum(eligible[ok], axis=1) > pick[:, None], axis=1)

    order = np.argsort(labels, kind="stable")
    start = np.concatenate([[0], np.cumsum(counts)])
    rank = np.empty(n, dtype=np.intp)
    rank[order] = np.arange(n) - start[labels[order]]
    y1 = labels[ok]
    pos = rng.integers(0, avail[ok, y2])
    pos = pos + ((y2 == y1) & (pos >= rank[ok]))
    partner = order[start[y2] + pos]
    pairs = [PairAssignment(int(i), int(j), int(a), int(b)) for i, j, a, b in zip(ok, partner, y1, y2)]
    return pairs, n - ok.size


# -- schedule and optimiser -------------------------------------------------


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warm-up to ``base_lr``, then cosine decay to 0 (or constant)."""
    if step < 0:
        raise ContractError("step must be >= 0")
    warm = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if step < warm:
        return config.base_lr * step / warm
    if config.schedule == "constant" or total <= warm:
        return config.base_lr
    frac = min((step - warm) / (total - warm), 1.0)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptState:
    kind: str
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)


def init_opt_state(params: dict[str, Tensor], kind: str) -> OptState:
    if kind not in OPTIMIZERS:
        raise ConfigError(f"unknown optimizer {kind!r}")
    first = {k: np.zeros_like(p.data) for k, p in params.items()}
    second = {k: np.zeros_like(p.data) for k, p in params.items()} if kind == "adamw_like" else {}
    return OptState(kind, 0, first, second)


def _decays(name: str) -> bool:
    return not name.endswith(".bias")


def optimizer_update(
    params: dict[str, Tensor], grads: dict[str, np.ndarray], opt: OptState, lr: float, config: TrainConfig
) -> None:
    """In-place update. AdamW with decoupled weight decay, or SGD with momentum.

    Biases are not decayed.
    """
    opt.step += 1
    b1, b2 = config.betas
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
        wd = config.weight_decay if _decays(name) else 0.0
        if opt.kind == "adamw_like":
            m, v = opt.first[name], opt.second[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            if wd:
                p.data *= 1.0 - lr * wd
            denom = np.sqrt(v / (1 - b2**opt.step))
            denom += config.adam_epsilon
            p.data -= (lr / (1 - b1**opt.step)) * m / denom
        else:
            vel = opt.first[name]
            vel *= config.momentum
            vel += g
            if wd:
                p.data *= 1.0 - lr * wd
            p.data -= lr * vel


# -- training ---------------------------------------------------------------


@dataclass
class TrainState:
    params: ModelParams
    opt: OptState
    config: TrainConfig
    rng: np.random.Generator
    steps_per_epoch: int = 1
    epoch: int = 0
    step: int = 0
    metrics: list[dict] = field(default_factory=list)
    candidates: list[set[int]] | None = None


def objective(
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    pairs: list[PairAssignment],
    config: TrainConfig,
    update_stats: bool = True,
) -> tuple[Tensor, BatchLoss, float]:
    """Total loss (gated InfoNCE + lambda * gate penalty) for fixed pairs."""
    h = encode(params.encoder, x, "train", update_stats)
    z = project(params.projector, h, "train", update_stats)
    lc = config.loss
    if config.use_filter:
        y1 = [p.y1 for p in pairs]
        y2 = [p.y2 for p in pairs]
        mode = "train" if len(pairs) >= 2 else "eval"
        gates = gates_for_pairs(params.filter, y1, y2, mode, update_stats)
    else:
        gates = np.ones((len(pairs), z.cols))
    bl = ucl_batch_loss(z, y, pairs, gates, lc.temperature)
    total = bl.loss
    penalty = 0.0
    if config.use_filter:
        pen = gate_penalty(params.filter, None, lc.penalty_kind, "train", update_stats=False)
        penalty = pen.item()
        if lc.gate_penalty_coefficient > 0:
            total = total + pen * lc.gate_penalty_coefficient
    return total, bl, penalty


def _diagnostics(state: TrainState, x: np.ndarray, err: Exception) -> dict:
    return {
        "step": state.step,
        "epoch": state.epoch,
        "error": str(err),
        "lr": lr_at(state.step, state.config, state.steps_per_epoch),
        "input_abs_max": float(np.abs(x).max()) if x.size else 0.0,
        "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in state.params.tensors().items()},
        "last_metrics": state.metrics[-3:],
    }


def train_step(state: TrainState, batch: LabeledBatch) -> dict:
    """Forward, backward and update on one batch; appends and returns the metric row."""
    cfg = state.config
    x = batch.x
    if cfg.augment_noise > 0 or cfg.augment_dropout > 0:
        x = augment(x, state.rng, cfg.augment_noise, cfg.augment_dropout)
    pairs, skipped = sample_pairs(batch.y, cfg.pair_strategy, state.rng, cfg.closest_n, candidates=state.candidates)
    if not pairs:
        raise ContractError(f"step {state.step}: no anchor found a positive")
    tensors = state.params.tensors()
    lr = lr_at(state.step, cfg, state.steps_per_epoch)
    try:
        with Tape() as tape:
            total, bl, penalty = objective(state.params, x, batch.y, pairs, cfg)
        if not np.isfinite(total.data).all():
            raise NonFiniteError("loss is not finite")
        tape.backward(total)
    except (NonFiniteError, DegenerateVectorError) as e:
        # a zero-norm feature row mid-training means activations blew up or died
        raise NumericAbort(f"non-finite value at step {state.step}: {e}", _diagnostics(state, x, e)) from e
    grads = tape.gradients(tensors)

    row = {
        "step": state.step,
        "epoch": state.epoch,
        "loss": bl.value,
        "penalty": penalty,
        "lr": lr,
        "skipped_pairs": skipped + bl.skipped_count,
    }
    if cfg.gradcheck_every and state.step % cfg.gradcheck_every == 0:
        report = finite_difference_check(
            lambda: objective(state.params, x, batch.y, pairs, cfg, update_stats=False)[0],
            tensors,
            max_entries=cfg.gradcheck_entries,
            rng=np.random.default_rng(state.step),
        )
        row["gradcheck_max_rel_err"] = report.max_rel_err
    optimizer_update(tensors, grads, state.opt, lr, cfg)
    state.metrics.append(row)
    state.step += 1
    return row


def _validate(config: TrainConfig, dataset: LabeledBatch, mc: ModelConfig, class_distances) -> None:
    if len(dataset) < 2:
        raise ConfigError("dataset needs at least 2 rows")
    if dataset.x.shape[1] != mc.input_width:
        raise DimensionError(f"dataset width {dataset.x.shape[1]} != model input width {mc.input_width}")
    if dataset.num_classes > mc.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, model only {mc.num_classes}")
    if config.pair_strategy == "n_closest":
        if class_distances is None:
            raise ConfigError("n_closest pairing needs class distances")
        if np.shape(class_distances) != (mc.num_classes, mc.num_classes):
            raise DimensionError(f"class distances {np.shape(class_distances)} for {mc.num_classes} classes")


def init_state(
    config: TrainConfig,
    dataset: LabeledBatch,
    model_config: ModelConfig | None = None,
    class_distances: np.ndarray | None = None,
) -> TrainState:
    mc = model_config or ModelConfig(input_width=dataset.x.shape[1], num_classes=max(dataset.num_classes, 2))
    _validate(config, dataset, mc, class_distances)
    params = init_params(mc, config.seed)
    candidates = closest_classes(class_distances, config.closest_n) if config.pair_strategy == "n_closest" else None
    return TrainState(
        params=params,
        opt=init_opt_state(params.tensors(), config.optimizer),
        config=config,
        rng=np.random.default_rng([config.seed, 1]),
        steps_per_epoch=math.ceil(len(dataset) / config.batch_size),
        candidates=candidates,
    )


def train(
    config: TrainConfig,
    dataset: LabeledBatch,
    model_config: ModelConfig | None = None,
    class_distances: np.ndarray | None = None,
    on_step: Callable[[dict], None] | None = None,
    state: TrainState | None = None,
) -> TrainState:
    """Run ``epochs * ceil(n / batch_size)`` steps; each epoch reshuffles.

    Batches are the shuffled rows split into ``ceil(n / batch_size)`` nearly
    equal parts, so no step sees a degenerate remainder batch.
    """
    if state is None:
        state = init_state(config, dataset, model_config, class_distances)
    n = len(dataset)
    while state.epoch < config.epochs:
        perm = state.rng.permutation(n)
        for idx in np.array_split(perm, state.steps_per_epoch):
            row = train_step(state, dataset.subset(idx))
            if on_step is not None:
                on_step(row)
        log.debug("epoch %d done, last loss %.4f", state.epoch, state.metrics[-1]["loss"])
        state.epoch += 1
    return state
