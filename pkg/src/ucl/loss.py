"""InfoNCE, the pair-gated universal contrastive loss, and the gate penalty."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import class_gate_logits
from .errors import ConfigError, ContractError, DegenerateVectorError, DimensionError, EmptyBatchError, EmptyNegativeSet

PENALTY_KINDS = ("as_written", "binary_entropy")


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.15
    gate_penalty_coefficient: float = 0.0
    penalty_kind: str = "as_written"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.gate_penalty_coefficient < 0:
            raise ConfigError("gate penalty coefficient must be >= 0")
        if self.penalty_kind not in PENALTY_KINDS:
            raise ConfigError(f"penalty_kind must be one of {PENALTY_KINDS}")


@dataclass(frozen=True)
class PairAssignment:
    anchor_index: int
    positive_index: int
    y1: int
    y2: int

    def __post_init__(self):
        if self.anchor_index == self.positive_index:
            raise ContractError("anchor and positive must be different rows")


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("zero-norm vector in cosine similarity")
    return float(u @ v / (nu * nv))


def infonce_reference(z, z_pos, z_negs, tau: float) -> float:
    """Single-anchor InfoNCE: ``-log softmax`` of the positive among positive+negatives."""
    if tau <= 0:
        raise ContractError("tau must be > 0")
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    z_pos = np.asarray(z_pos, dtype=np.float64).reshape(-1)
    z_negs = np.atleast_2d(np.asarray(z_negs, dtype=np.float64))
    if z_negs.size == 0:
        raise EmptyNegativeSet("no negatives")
    logits = np.array([_cos(z, z_pos)] + [_cos(z, n) for n in z_negs]) / tau
    m = logits.max()
    return float(m + np.log(np.exp(logits - m).sum()) - logits[0])


def build_negative_mask(labels: Sequence[int], pair: PairAssignment) -> np.ndarray:
    labels = np.asarray(labels)
    mask = (labels != pair.y1) & (labels != pair.y2)
    mask[[pair.anchor_index, pair.positive_index]] = False
    return mask


def ucl_pair_loss(z_all, labels, pair: PairAssignment, gate, tau: float) -> float:
    """One direction (anchor -> positive) of the gated loss for a single pair.

    Raises :class:`EmptyNegativeSet` when masking leaves no negatives.
    """
    z_all = np.asarray(z_all, dtype=np.float64)
    gate = np.asarray(gate, dtype=np.float64).reshape(-1)
    if gate.shape[0] != z_all.shape[1]:
        raise DimensionError(f"gate width {gate.shape[0]} != feature width {z_all.shape[1]}")
    mask = build_negative_mask(labels, pair)
    if not mask.any():
        raise EmptyNegativeSet(f"pair {pair} has no negatives")
    zg = z_all * gate
    return infonce_reference(zg[pair.anchor_index], zg[pair.positive_index], zg[mask], tau)


@dataclass
class BatchLoss:
    loss: Tensor  # 1x1; differentiable when computed under a tape
    per_pair: np.ndarray  # mean of both directions, 0 for skipped pairs
    skipped: np.ndarray  # bool per pair

    @property
    def value(self) -> float:
        return self.loss.item()

    @property
    def skipped_count(self) -> int:
        return int(self.skipped.sum())


def ucl_batch_loss(z, labels, pairs: Sequence[PairAssignment], gates, tau: float) -> BatchLoss:
    """Mean gated InfoNCE over both directions of every non-skipped pair.

    ``gates`` holds one row per pair. For each pair, every batch row (anchor,
    positive and negatives) is scaled by that pair's gate before cosine
    similarities are taken, so the whole contrast happens in the pair's
    subspace. The fused weighted cosine avoids materialising a
    pairs x rows x D tensor.
    """
    if not pairs:
        raise ContractError("need at least one pair")
    z = ad.as_tensor(z)
    gates = ad.as_tensor(gates)
    labels = np.asarray(labels)
    n, d = z.shape
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} rows")
    if gates.shape != (len(pairs), d):
        raise DimensionError(f"gates shape {gates.shape}, expected {(len(pairs), d)}")

    anchors = np.array([p.anchor_index for p in pairs])
    positives = np.array([p.positive_index for p in pairs])
    y1 = np.array([p.y1 for p in pairs])
    y2 = np.array([p.y2 for p in pairs])
    neg = (labels[None, :] != y1[:, None]) & (labels[None, :] != y2[:, None])
    skipped = ~neg.any(axis=1)
    if skipped.all():
        raise EmptyBatchError("every pair was skipped: no negatives in the batch")
    keep = np.flatnonzero(~skipped)
    P = keep.size

    # both directions: rows [0, P) anchor->positive, [P, 2P) positive->anchor
    src = np.concatenate([anchors[keep], positives[keep]])
    dst = np.concatenate([positives[keep], anchors[keep]])
    gate_rows = np.concatenate([keep, keep])
    cand = neg[gate_rows].copy()
    cand[np.arange(2 * P), dst] = True

    g2 = ad.take_rows(gates, gate_rows)
    g2 = g2 * g2
    sim = ad.weighted_cosine(g2, ad.take_rows(z, src), z, cand)
    logits = sim * (1.0 / tau)
    terms = ad.masked_logsumexp(logits, cand) - ad.gather(logits, np.arange(2 * P), dst)
    loss = ad.mean(terms)

    per_pair = np.zeros(len(pairs))
    per_pair[keep] = 0.5 * (terms.data[:P, 0] + terms.data[P:, 0])
    return BatchLoss(loss, per_pair, skipped)


def gate_penalty_from_logits(logits, kind: str = "as_written") -> Tensor:
    """Mean over entries of ``g log g`` (as_written) or binary entropy of ``g = sigmoid(logits)``.

    Computed from logits so ``log g`` and ``log(1 - g)`` stay finite when gates saturate.
    """
    logits = ad.as_tensor(logits)
    g = ad.sigmoid(logits)
    log_g = ad.log_sigmoid(logits)
    if kind == "as_written":
        return ad.mean(g * log_g)
    if kind == "binary_entropy":
        log_1mg = ad.log_sigmoid(-logits)
        return -ad.mean(g * log_g + (1.0 - g) * log_1mg)
    raise ConfigError(f"unknown penalty kind {kind!r}")


def gate_penalty(filt, class_ids=None, kind: str = "as_written", mode: str = "eval", update_stats: bool = False) -> Tensor:
    """Gate penalty over the class gates of ``class_ids`` (default: all K classes)."""
    if class_ids is None:
        class_ids = np.arange(filt.num_classes)
    return gate_penalty_from_logits(class_gate_logits(filt, class_ids, mode, update_stats), kind)
