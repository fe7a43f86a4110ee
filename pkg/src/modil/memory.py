"""Exemplar memory with a fixed total budget.

Per-class exemplar lists are kept in selection order, so shrinking a class to
a smaller quota is a prefix truncation and never reselects.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


def quota(budget: int, n_seen: int) -> list[int]:
    """Per-class quotas; the remainder goes one each to the lowest class indices."""
    if n_seen < 1:
        raise ValueError("n_seen must be >= 1")
    q, r = divmod(budget, n_seen)
    if q == 0:
        warnings.warn(f"budget {budget} < {n_seen} classes: some classes keep no exemplars", stacklevel=2)
    return [q + 1 if c < r else q for c in range(n_seen)]


def herding_select(features: np.ndarray, q: int) -> list[int]:
    """Greedy herding: each step adds the sample that brings the running
    exemplar mean closest to the class mean. Ties, up to rounding, go to the
    lowest index."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or len(feats) == 0:
        raise ValueError("herding needs a non-empty (N, F) feature array")
    n = len(feats)
    if not 1 <= q <= n:
        raise ValueError(f"q must be in [1, {n}], got {q}")
    mu = feats.mean(axis=0)
    running = np.zeros_like(mu)
    available = np.ones(n, dtype=bool)
    chosen = []
    for k in range(q):
        cand = (running[None, :] + feats) / (k + 1)
        dist = np.linalg.norm(mu[None, :] - cand, axis=1)
        dist[~available] = np.inf
        best = dist.min()
        i = int(np.flatnonzero(dist <= best + 1e-12 * max(best, 1.0))[0])
        chosen.append(i)
        available[i] = False
        running += feats[i]
    return chosen


def random_select(n: int, q: int, seed) -> list[int]:
    if q > n:
        raise ValueError(f"cannot select {q} of {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.permutation(n)[:q].tolist()


def l2_normalize(feats: np.ndarray) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    return feats / np.maximum(np.linalg.norm(feats, axis=-1, keepdims=True), 1e-12)


@dataclass
class ClassPrototype:
    label: int
    mean_feature: np.ndarray | None
    exemplar_mean: np.ndarray


@dataclass
class ExemplarMemory:
    """Stored raw frames per head class, in selection order.

    ``indices`` point back into the dataset the frames came from; they are
    what a run checkpoint persists.
    """

    budget: int
    policy: str = "herding"
    seed: int = 0
    frames: dict[int, np.ndarray] = field(default_factory=dict)
    indices: dict[int, np.ndarray] = field(default_factory=dict)
    cached_features: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.policy not in ("herding", "random"):
            raise ValueError(f"unknown exemplar policy {self.policy!r}")

    @property
    def classes(self) -> list[int]:
        return sorted(self.frames)

    def __len__(self) -> int:
        return sum(len(v) for v in self.indices.values())

    def count(self, c: int) -> int:
        return len(self.indices.get(c, ()))

    def data(self, classes=None) -> tuple[np.ndarray, np.ndarray]:
        """All stored frames with their head labels."""
        classes = self.classes if classes is None else classes
        xs = [self.frames[c] for c in classes if self.count(c)]
        ys = [np.full(self.count(c), c, dtype=np.int64) for c in classes if self.count(c)]
        if not xs:
            return np.zeros((0,)), np.zeros(0, dtype=np.int64)
        return np.concatenate(xs), np.concatenate(ys)

    def truncate(self, c: int, q: int) -> None:
        self.frames[c] = self.frames[c][:q]
        self.indices[c] = self.indices[c][:q]
        if c in self.cached_features:
            self.cached_features[c] = self.cached_features[c][:q]

    def select(self, c: int, frames: np.ndarray, dataset_indices: np.ndarray, q: int,
               features: np.ndarray | None = None) -> None:
        q = min(q, len(frames))
        if q <= 0:
            order = []
        elif self.policy == "herding":
            if features is None:
                raise ValueError("herding selection needs features")
            order = herding_select(l2_normalize(features), q)
        else:
            order = random_select(len(frames), q, np.random.default_rng([self.seed, 31, c]))
        order = np.asarray(order, dtype=np.int64)
        self.frames[c] = frames[order]
        self.indices[c] = np.asarray(dataset_indices)[order]
        if features is not None:
            self.cached_features[c] = np.asarray(features)[order]

    def rebalance(self, new_classes: dict[int, tuple[np.ndarray, np.ndarray]], feature_fn,
                  n_seen_after: int) -> "ExemplarMemory":
        """Shrink old classes to the new quota and fill the new ones.

        ``new_classes`` maps head class -> (frames, dataset indices).
        ``feature_fn`` maps frames to model features; only herding calls it.
        """
        quotas = quota(self.budget, n_seen_after)
        for c in self.classes:
            if c not in new_classes:
                self.truncate(c, quotas[c])
        for c, (frames, idx) in sorted(new_classes.items()):
            feats = feature_fn(frames) if self.policy == "herding" else None
            self.select(c, frames, idx, quotas[c], feats)
        return self

    def class_means(self, feature_fn) -> np.ndarray:
        """L2-normalized exemplar feature mean per stored class, in class order."""
        means = []
        for c in self.classes:
            if self.count(c) == 0:
                raise ValueError(f"class {c} has no exemplars")
            means.append(np.asarray(feature_fn(self.frames[c]), dtype=np.float64).mean(axis=0))
        return l2_normalize(np.stack(means))

    def prototypes(self, feature_fn, class_frames: dict[int, np.ndarray] | None = None) -> list[ClassPrototype]:
        out = []
        for c in self.classes:
            ex = np.asarray(feature_fn(self.frames[c]), dtype=np.float64).mean(axis=0)
            full = None
            if class_frames and c in class_frames:
                full = np.asarray(feature_fn(class_frames[c]), dtype=np.float64).mean(axis=0)
            out.append(ClassPrototype(c, full, ex))
        return out

    def snapshot(self) -> dict:
        return {
            "budget": self.budget,
            "policy": self.policy,
            "seed": self.seed,
            "indices": {str(c): self.indices[c].tolist() for c in self.classes},
        }

    @classmethod
    def restore(cls, snap: dict, samples: np.ndarray) -> "ExemplarMemory":
        mem = cls(snap["budget"], snap["policy"], snap["seed"])
        for key, idx in snap["indices"].items():
            idx = np.asarray(idx, dtype=np.int64)
            mem.indices[int(key)] = idx
            mem.frames[int(key)] = samples[idx]
        return mem


def nme_predict(features: np.ndarray, means: np.ndarray) -> np.ndarray:
    """Nearest normalized class mean; ties resolve to the lowest class."""
    f = l2_normalize(features)
    d = ((f[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1)


def nme_classify(memory: ExemplarMemory, model, x: np.ndarray) -> np.ndarray | int:
    """Predict head classes for frames ``x`` by nearest mean of exemplars."""
    means = memory.class_means(model.extract)
    single = np.ndim(x) == 2
    feats = model.extract(x[None] if single else x)
    pred = np.asarray(memory.classes)[nme_predict(feats, means)]
    return int(pred[0]) if single else pred
