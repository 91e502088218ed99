"""Encoder, projector and feature filter networks.

Desk-scale MLP stand-ins for the vision backbone and heads. Width chain:
``input -> encoder_hidden... -> representation (R) -> projector_hidden -> D``,
and the filter maps a class embedding (width ``E``) through ``E_h`` to ``D``
sigmoid gates.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NormState, Tensor
from .errors import ConfigError, DimensionError, LabelError


@dataclass(frozen=True)
class ModelConfig:
    input_width: int = 160
    encoder_hidden: tuple[int, ...] = (256, 256)
    representation_width: int = 128
    projector_hidden: int = 128
    feature_dim: int = 32
    embedding_dim: int = 64
    gate_hidden: int = 128
    num_classes: int = 25
    norm_momentum: float = 0.1
    norm_epsilon: float = 1e-5
    layernorm_epsilon: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "encoder_hidden", tuple(int(w) for w in self.encoder_hidden))
        if len(self.encoder_hidden) < 1:
            raise ConfigError("encoder needs at least one hidden layer")
        widths = (
            self.input_width,
            *self.encoder_hidden,
            self.representation_width,
            self.projector_hidden,
            self.feature_dim,
            self.embedding_dim,
            self.gate_hidden,
        )
        if any(int(w) < 1 for w in widths):
            raise ConfigError(f"all widths must be >= 1, got {widths}")
        if self.feature_dim < 2:
            raise ConfigError("feature_dim must be >= 2 for the terminal layer norm")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        return d


@dataclass
class Linear:
    weight: Tensor  # (in, out)
    bias: Tensor | None = None  # (1, out); omitted before batch norm, which cancels it

    def __call__(self, x: Tensor) -> Tensor:
        if x.cols != self.weight.rows:
            raise DimensionError(f"linear layer expects width {self.weight.rows}, got {x.cols}")
        out = x @ self.weight
        return out if self.bias is None else out + self.bias


@dataclass
class EncoderParams:
    layers: list[Linear]
    norms: list[NormState]  # one per hidden layer

    @property
    def input_width(self) -> int:
        return self.layers[0].weight.rows


@dataclass
class ProjectorParams:
    hidden: Linear
    norm: NormState
    out: Linear
    layernorm_epsilon: float = 1e-5


@dataclass
class FilterParams:
    embedding: Tensor  # (K, E)
    hidden: Linear
    norm: NormState
    out: Linear

    @property
    def num_classes(self) -> int:
        return self.embedding.rows


@dataclass
class ModelParams:
    config: ModelConfig
    encoder: EncoderParams
    projector: ProjectorParams
    filter: FilterParams = field(repr=False)

    def tensors(self) -> dict[str, Tensor]:
        """Trainable tensors by stable name, in a fixed order."""
        layers = [(f"encoder.{i}", layer) for i, layer in enumerate(self.encoder.layers)]
        layers += [("projector.hidden", self.projector.hidden), ("projector.out", self.projector.out)]
        out: dict[str, Tensor] = {}
        for name, layer in layers:
            out[f"{name}.weight"] = layer.weight
            if layer.bias is not None:
                out[f"{name}.bias"] = layer.bias
        out["filter.embedding"] = self.filter.embedding
        for name, layer in [("filter.hidden", self.filter.hidden), ("filter.out", self.filter.out)]:
            out[f"{name}.weight"] = layer.weight
            if layer.bias is not None:
                out[f"{name}.bias"] = layer.bias
        return out

    def norm_states(self) -> dict[str, NormState]:
        out = {f"encoder.norm{i}": s for i, s in enumerate(self.encoder.norms)}
        out["projector.norm"] = self.projector.norm
        out["filter.norm"] = self.filter.norm
        return out


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, bias: bool = True) -> Linear:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    b = Tensor(np.zeros((1, fan_out)), requires_grad=True) if bias else None
    return Linear(Tensor(w, requires_grad=True), b)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Deterministic initialisation: Xavier-uniform weights, zero biases, N(0, 0.02) embeddings."""
    rng = np.random.default_rng(seed)

    def norm(width):
        return NormState.fresh(width, config.norm_momentum, config.norm_epsilon)

    widths = [config.input_width, *config.encoder_hidden, config.representation_width]
    # no encoder biases: each layer feeds a batch norm (the last one the projector's), which cancels them
    layers = [_xavier(rng, a, b, bias=False) for a, b in zip(widths[:-1], widths[1:])]
    encoder = EncoderParams(layers, [norm(w) for w in config.encoder_hidden])
    projector = ProjectorParams(
        _xavier(rng, config.representation_width, config.projector_hidden, bias=False),
        norm(config.projector_hidden),
        _xavier(rng, config.projector_hidden, config.feature_dim),
        config.layernorm_epsilon,
    )
    emb = rng.normal(0.0, 0.02, size=(config.num_classes, config.embedding_dim))
    filt = FilterParams(
        Tensor(emb, requires_grad=True),
        _xavier(rng, config.embedding_dim, config.gate_hidden, bias=False),
        norm(config.gate_hidden),
        _xavier(rng, config.gate_hidden, config.feature_dim),
    )
    return ModelParams(config, encoder, projector, filt)


def encode(params: EncoderParams, x, mode: str = "eval", update_stats: bool = True) -> Tensor:
    """Representation ``h``: (affine, batch norm, relu) per hidden layer, then a final affine."""
    h = ad.as_tensor(x)
    if h.cols != params.input_width:
        raise DimensionError(f"encoder expects input width {params.input_width}, got {h.cols}")
    for layer, state in zip(params.layers[:-1], params.norms):
        h = ad.relu(ad.batchnorm(layer(h), state, mode, update_stats))
    return params.layers[-1](h)


def project(params: ProjectorParams, h, mode: str = "eval", update_stats: bool = True) -> Tensor:
    """Features ``z``; every row leaves layer-normalised."""
    h = ad.as_tensor(h)
    if h.cols != params.hidden.weight.rows:
        raise DimensionError(f"projector expects width {params.hidden.weight.rows}, got {h.cols}")
    u = ad.relu(ad.batchnorm(params.hidden(h), params.norm, mode, update_stats))
    return ad.layernorm(params.out(u), params.layernorm_epsilon)


def _check_labels(filt: FilterParams, labels) -> np.ndarray:
    y = np.asarray(labels, dtype=np.intp).reshape(-1)
    k = filt.num_classes
    bad = (y < 0) | (y >= k)
    if bad.any():
        raise LabelError(f"class id {int(y[bad][0])} outside [0, {k})")
    return y


def gate_logits_from_embedding(
    filt: FilterParams, e: Tensor, mode: str = "eval", update_stats: bool = True
) -> Tensor:
    u = ad.relu(ad.batchnorm(filt.hidden(e), filt.norm, mode, update_stats))
    return filt.out(u)


def pair_embeddings(filt: FilterParams, y1: Sequence[int], y2: Sequence[int]) -> Tensor:
    """Mean of the two label embeddings for each pair, one row per pair."""
    a = _check_labels(filt, y1)
    b = _check_labels(filt, y2)
    if a.shape != b.shape:
        raise DimensionError(f"{a.size} first labels vs {b.size} second labels")
    return (ad.take_rows(filt.embedding, a) + ad.take_rows(filt.embedding, b)) * 0.5


def pair_gate_logits(filt, y1, y2, mode="eval", update_stats=True) -> Tensor:
    return gate_logits_from_embedding(filt, pair_embeddings(filt, y1, y2), mode, update_stats)


def class_gate_logits(filt, ys, mode="eval", update_stats=True) -> Tensor:
    e = ad.take_rows(filt.embedding, _check_labels(filt, ys))
    return gate_logits_from_embedding(filt, e, mode, update_stats)


def gates_for_pairs(filt, y1, y2, mode="eval", update_stats=True) -> Tensor:
    """Gate rows for many pairs at once (one batch through the filter)."""
    return ad.sigmoid(pair_gate_logits(filt, y1, y2, mode, update_stats))


def gates_for_pair(filt: FilterParams, y1: int, y2: int, norm_mode: str = "eval") -> np.ndarray:
    """1 x D gates for the class pair ``(y1, y2)``."""
    return gates_for_pairs(filt, [y1], [y2], norm_mode, update_stats=False).data


def gates_for_class(filt: FilterParams, y: int, norm_mode: str = "eval") -> np.ndarray:
    """1 x D gates for a single class."""
    return ad.sigmoid(class_gate_logits(filt, [y], norm_mode, update_stats=False)).data


def class_gates(filt: FilterParams, norm_mode: str = "eval") -> np.ndarray:
    """K x D matrix of every class's gates."""
    ys = np.arange(filt.num_classes)
    return ad.sigmoid(class_gate_logits(filt, ys, norm_mode, update_stats=False)).data


def embed(params: ModelParams, x, space: str = "encoder", gate: np.ndarray | None = None) -> np.ndarray:
    """Eval-mode embeddings in ``encoder``, ``projector`` or ``gated`` space."""
    h = encode(params.encoder, x, "eval")
    if space == "encoder":
        return h.data
    z = project(params.projector, h, "eval")
    if space == "projector":
        return z.data
    if space == "gated":
        if gate is None:
            raise ConfigError("gated space needs a gate vector")
        return z.data * np.asarray(gate).reshape(1, -1)
    raise ConfigError(f"unknown embedding space {space!r}")
