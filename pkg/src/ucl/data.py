"""Synthetic hierarchical datasets, CSV ingestion, augmentation, class distances."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, LabelError, ParseError, SpecError


@dataclass
class LabeledBatch:
    """Samples ``x`` (n x width) with dense class ids ``y``.

    ``classes[i]`` is the external label value of dense id ``i``.
    """

    x: np.ndarray
    y: np.ndarray
    classes: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.intp)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ConfigError(f"x {self.x.shape} and y {self.y.shape} do not line up")
        if not self.classes:
            self.classes = list(range(int(self.y.max()) + 1 if self.y.size else 0))
        if self.y.size and (self.y.min() < 0 or self.y.max() >= len(self.classes)):
            raise LabelError(f"class ids must lie in [0, {len(self.classes)})")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, index) -> LabeledBatch:
        return LabeledBatch(self.x[index], self.y[index], list(self.classes))


@dataclass
class SynthSpec:
    """Hierarchical synthetic data.

    Each superclass owns ``shared_dims_per_super`` coordinates carrying a common
    signal; each class owns ``private_dims_per_class`` more. Noise has standard
    deviation ``noise_sigma`` on a class's own coordinates and
    ``background_scale * noise_sigma`` on every other coordinate.
    """

    superclasses: int = 5
    subclasses_per_super: int = 5
    samples_per_class: int = 200
    input_width: int = 160
    shared_dims_per_super: int = 6
    private_dims_per_class: int = 4
    noise_sigma: float = 0.5
    background_scale: float = 2.0
    signal_scale: float = 2.0
    seed: int = 0
    shared_dims: list[list[int]] | None = None
    private_dims: list[list[int]] | None = None

    @property
    def num_classes(self) -> int:
        return self.superclasses * self.subclasses_per_super

    def layout(self) -> tuple[list[list[int]], list[list[int]]]:
        """Coordinate sets per superclass and per class, validated."""
        S, K = self.superclasses, self.num_classes
        if S < 1 or self.subclasses_per_super < 1 or self.samples_per_class < 1:
            raise SpecError("superclasses, subclasses and samples must be >= 1")
        if self.noise_sigma < 0 or self.background_scale < 0:
            raise SpecError("noise levels must be >= 0")
        shared = self.shared_dims
        if shared is None:
            m = self.shared_dims_per_super
            shared = [list(range(s * m, (s + 1) * m)) for s in range(S)]
        private = self.private_dims
        if private is None:
            off, m = sum(len(d) for d in shared), self.private_dims_per_class
            private = [list(range(off + c * m, off + (c + 1) * m)) for c in range(K)]
        if len(shared) != S or len(private) != K:
            raise SpecError(f"need {S} shared sets and {K} private sets")
        seen: dict[int, str] = {}
        for owner, dims in [(f"superclass {s}", d) for s, d in enumerate(shared)] + [
            (f"class {c}", d) for c, d in enumerate(private)
        ]:
            for j in dims:
                if not 0 <= j < self.input_width:
                    raise SpecError(f"{owner}: coordinate {j} outside input width {self.input_width}")
                if j in seen:
                    raise SpecError(f"coordinate {j} assigned to both {seen[j]} and {owner}")
                seen[j] = owner
        return [list(d) for d in shared], [list(d) for d in private]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthOracle:
    superclass_of: list[int]
    shared_by_super: list[list[int]]
    private_by_class: list[list[int]]
    class_means: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.superclass_of)

    def active_dims(self, c: int) -> list[int]:
        return sorted(self.shared_by_super[self.superclass_of[c]] + self.private_by_class[c])

    def shared_dims(self, a: int, b: int) -> list[int]:
        """Coordinates on which classes ``a`` and ``b`` carry the same signal."""
        if a == b:
            return self.active_dims(a)
        if self.superclass_of[a] == self.superclass_of[b]:
            return list(self.shared_by_super[self.superclass_of[a]])
        return []

    def to_json(self) -> dict:
        return {
            "superclass_of": list(self.superclass_of),
            "shared_by_super": self.shared_by_super,
            "private_by_class": self.private_by_class,
            "class_means": self.class_means.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> SynthOracle:
        return cls(
            list(d["superclass_of"]),
            [list(x) for x in d["shared_by_super"]],
            [list(x) for x in d["private_by_class"]],
            np.asarray(d["class_means"], dtype=np.float64),
        )


def gen_hierarchical(spec: SynthSpec) -> tuple[LabeledBatch, SynthOracle]:
    shared, private = spec.layout()
    rng = np.random.default_rng(spec.seed)
    K, W = spec.num_classes, spec.input_width
    super_signal = [spec.signal_scale * rng.choice([-1.0, 1.0], size=len(d)) for d in shared]
    class_signal = [spec.signal_scale * rng.choice([-1.0, 1.0], size=len(d)) for d in private]

    superclass_of = [c // spec.subclasses_per_super for c in range(K)]
    means = np.zeros((K, W))
    sigma = np.full((K, W), spec.background_scale * spec.noise_sigma)
    for c in range(K):
        s = superclass_of[c]
        means[c, shared[s]] = super_signal[s]
        means[c, private[c]] = class_signal[c]
        sigma[c, shared[s]] = spec.noise_sigma
        sigma[c, private[c]] = spec.noise_sigma

    n = spec.samples_per_class
    y = np.repeat(np.arange(K), n)
    x = means[y] + rng.standard_normal((K * n, W)) * sigma[y]
    oracle = SynthOracle(superclass_of, shared, private, means)
    return LabeledBatch(x, y, list(range(K))), oracle


def augment(x, rng: np.random.Generator, noise_sigma: float = 0.0, dropout_prob: float = 0.0) -> np.ndarray:
    """Additive Gaussian noise, then independent coordinate zeroing."""
    if not 0.0 <= dropout_prob < 1.0:
        raise ConfigError(f"dropout_prob must lie in [0, 1), got {dropout_prob}")
    out = np.array(x, dtype=np.float64)
    if noise_sigma > 0:
        out = out + rng.normal(0.0, noise_sigma, size=out.shape)
    if dropout_prob > 0:
        out = out * (rng.random(out.shape) >= dropout_prob)
    return out


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_table(path, header: bool | None = None) -> LabeledBatch:
    """Read a CSV whose last column is an integer label.

    ``header=None`` treats the first row as a header when any of its cells is
    non-numeric. Labels are re-indexed densely in sorted order; the external
    values are kept in ``LabeledBatch.classes``.
    """
    text = Path(path).read_text(encoding="utf-8")
    rows = [(i + 1, r) for i, r in enumerate(csv.reader(io.StringIO(text))) if r]
    if header is None:
        header = bool(rows) and not all(_is_number(c) for c in rows[0][1])
    if header:
        rows = rows[1:]
    if not rows:
        raise ParseError("no data rows")
    width = len(rows[0][1])
    if width < 2:
        raise ParseError("need at least one feature column and a label column", rows[0][0])
    feats = np.empty((len(rows), width - 1))
    raw = np.empty(len(rows), dtype=np.int64)
    for k, (line, r) in enumerate(rows):
        if len(r) != width:
            raise ParseError(f"expected {width} cells, got {len(r)}", line)
        try:
            feats[k] = [float(c) for c in r[:-1]]
        except ValueError as e:
            raise ParseError(f"non-numeric feature: {e}", line) from None
        try:
            raw[k] = int(r[-1])
        except ValueError:
            raise ParseError(f"label {r[-1]!r} is not an integer", line) from None
    if not np.isfinite(feats).all():
        raise ParseError("non-finite feature value")
    classes, y = np.unique(raw, return_inverse=True)
    return LabeledBatch(feats, y, [int(c) for c in classes])


def write_table(path, batch: LabeledBatch, header: bool = True) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow([f"x{j}" for j in range(batch.x.shape[1])] + ["label"])
    for row, label in zip(batch.x, batch.y):
        w.writerow([repr(float(v)) for v in row] + [batch.classes[label]])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _one_minus_cosine(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    u = np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)
    d = 1.0 - np.clip(u @ u.T, -1.0, 1.0)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def class_distance_matrix(
    source: str,
    *,
    oracle: SynthOracle | None = None,
    features: np.ndarray | None = None,
    labels: Sequence[int] | None = None,
    embeddings: np.ndarray | None = None,
) -> np.ndarray:
    """K x K symmetric class distances with zero diagonal.

    ``oracle_hierarchy``: 0 self, 1 same superclass, 2 otherwise.
    ``class_means``: 1 - cosine of per-class mean feature vectors.
    ``label_embeddings``: 1 - cosine of embedding rows.
    """
    if source == "oracle_hierarchy":
        if oracle is None:
            raise ConfigError("oracle_hierarchy needs an oracle")
        sup = np.asarray(oracle.superclass_of)
        d = np.where(sup[:, None] == sup[None, :], 1.0, 2.0)
        np.fill_diagonal(d, 0.0)
        return d
    if source == "class_means":
        if features is None or labels is None:
            raise ConfigError("class_means needs features and labels")
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels)
        K = int(labels.max()) + 1
        means = np.stack([features[labels == c].mean(axis=0) if (labels == c).any() else np.zeros(features.shape[1]) for c in range(K)])
        return _one_minus_cosine(means)
    if source == "label_embeddings":
        if embeddings is None:
            raise ConfigError("label_embeddings needs an embedding matrix")
        return _one_minus_cosine(np.asarray(embeddings, dtype=np.float64))
    raise ConfigError(f"unknown class distance source {source!r}")


def train_test_split(batch: LabeledBatch, test_fraction: float = 0.2, seed: int = 0) -> tuple[LabeledBatch, LabeledBatch]:
    """Deterministic shuffled split."""
    perm = np.random.default_rng(seed).permutation(len(batch))
    n_test = int(math.floor(len(batch) * test_fraction))
    return batch.subset(np.sort(perm[n_test:])), batch.subset(np.sort(perm[:n_test]))
