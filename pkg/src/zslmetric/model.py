"""Consistency model: ReLU-linear image embedding and a Mahalanobis score.

An image feature vector ``x`` (length d) is mapped into the p-dimensional
attribute space by ``relu(x @ w_x + b_x)``. Its consistency with an
attribute vector ``y`` is the length of ``(embed(x) - y) @ w_a`` where
``w_a`` is p x m. Lower scores mean more consistent pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError, DimensionError


def _frozen(a, ndim, name):
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise DataError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Model:
    """Learned parameters plus the optional feature standardization.

    ``feature_mean``/``feature_scale`` are applied to raw features before
    the linear map; both are None when the model works on raw features.
    """

    w_x: np.ndarray
    b_x: np.ndarray
    w_a: np.ndarray
    tau: float = 1.0
    feature_mean: Optional[np.ndarray] = None
    feature_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        w_x = _frozen(self.w_x, 2, "w_x")
        b_x = _frozen(self.b_x, 1, "b_x")
        w_a = _frozen(self.w_a, 2, "w_a")
        d, p = w_x.shape
        if b_x.shape != (p,):
            raise DimensionError("b_x length", p, b_x.shape[0])
        if w_a.shape[0] != p:
            raise DimensionError("w_a rows", p, w_a.shape[0])
        if w_a.shape[1] < 1:
            raise DataError("w_a must have at least one column (m >= 1)")
        tau = float(self.tau)
        if not np.isfinite(tau):
            raise DataError("tau must be finite")
        if (self.feature_mean is None) != (self.feature_scale is None):
            raise DataError("feature_mean and feature_scale must be given together")
        object.__setattr__(self, "w_x", w_x)
        object.__setattr__(self, "b_x", b_x)
        object.__setattr__(self, "w_a", w_a)
        object.__setattr__(self, "tau", tau)
        if self.feature_mean is not None:
            mean = _frozen(self.feature_mean, 1, "feature_mean")
            scale = _frozen(self.feature_scale, 1, "feature_scale")
            for name, v in (("feature_mean", mean), ("feature_scale", scale)):
                if v.shape != (d,):
                    raise DimensionError(f"{name} length", d, v.shape[0])
            if np.any(scale <= 0):
                raise DataError("feature_scale entries must be positive")
            object.__setattr__(self, "feature_mean", mean)
            object.__setattr__(self, "feature_scale", scale)

    @property
    def d(self) -> int:
        return self.w_x.shape[0]

    @property
    def p(self) -> int:
        return self.w_x.shape[1]

    @property
    def m(self) -> int:
        return self.w_a.shape[1]

    @property
    def standardized(self) -> bool:
        return self.feature_mean is not None

    def replace(self, **changes) -> "Model":
        fields = dict(
            w_x=self.w_x,
            b_x=self.b_x,
            w_a=self.w_a,
            tau=self.tau,
            feature_mean=self.feature_mean,
            feature_scale=self.feature_scale,
        )
        fields.update(changes)
        return Model(**fields)

    def prepare(self, x) -> np.ndarray:
        """Validate features and apply the stored standardization."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d:
            raise DimensionError("feature vector", self.d, x.shape[-1])
        if self.feature_mean is not None:
            x = (x - self.feature_mean) / self.feature_scale
        return x

    def __eq__(self, other):
        if not isinstance(other, Model):
            return NotImplemented
        if self.standardized != other.standardized or self.tau != other.tau:
            return False
        pairs = [(self.w_x, other.w_x), (self.b_x, other.b_x), (self.w_a, other.w_a)]
        if self.standardized:
            pairs += [(self.feature_mean, other.feature_mean),
                      (self.feature_scale, other.feature_scale)]
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in pairs)

    __hash__ = None


@dataclass(frozen=True)
class Triplet:
    """One (features, attributes, consistency) training unit."""

    x: np.ndarray
    y: np.ndarray
    z: int

    def __post_init__(self):
        if self.z not in (-1, 1):
            raise DataError(f"z must be -1 or +1, got {self.z!r}")


@dataclass(frozen=True, eq=False)
class TripletBatch:
    """Column-stacked triplets: ``x`` is n x d, ``y`` is n x p, ``z`` is n.

    Deliberately carries no class labels: training never sees them.
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray = field(repr=False)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        y = np.atleast_2d(np.asarray(self.y, dtype=np.float64))
        z = np.asarray(self.z).reshape(-1)
        if not (len(x) == len(y) == len(z)):
            raise DataError(f"triplet arrays disagree in length: {len(x)}, {len(y)}, {len(z)}")
        if not np.all(np.isin(z, (-1, 1))):
            raise DataError("z entries must be -1 or +1")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z.astype(np.int64))

    def __len__(self):
        return len(self.z)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return Triplet(self.x[idx], self.y[idx], int(self.z[idx]))
        return TripletBatch(self.x[idx], self.y[idx], self.z[idx])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, TripletBatch):
            return NotImplemented
        return (np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)
                and np.array_equal(self.z, other.z))

    __hash__ = None

    @classmethod
    def from_triplets(cls, triplets: Iterable[Triplet]) -> "TripletBatch":
        triplets = list(triplets)
        if not triplets:
            raise DataError("empty triplet list")
        return cls(np.stack([t.x for t in triplets]),
                   np.stack([t.y for t in triplets]),
                   np.array([t.z for t in triplets]))

    @classmethod
    def concat(cls, batches: Sequence["TripletBatch"]) -> "TripletBatch":
        return cls(np.concatenate([b.x for b in batches]),
                   np.concatenate([b.y for b in batches]),
                   np.concatenate([b.z for b in batches]))


def as_batch(triplets) -> TripletBatch:
    if isinstance(triplets, TripletBatch):
        return triplets
    if isinstance(triplets, Triplet):
        return TripletBatch.from_triplets([triplets])
    return TripletBatch.from_triplets(triplets)


def embed_image(x, model: Model) -> np.ndarray:
    """``max(0, x @ w_x + b_x)``; works on one vector or a row-stacked matrix."""
    x = model.prepare(x)
    return np.maximum(0.0, x @ model.w_x + model.b_x)


def _check_attributes(y, model):
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != model.p:
        raise DimensionError("attribute vector", model.p, y.shape[-1])
    return y


def score_squared(x, y, model: Model):
    """Squared consistency score, evaluated as the quadratic form
    ``diff @ w_a @ w_a.T @ diff`` without a square root."""
    y = _check_attributes(y, model)
    diff = embed_image(x, model) - y
    proj = diff @ model.w_a
    return np.sum(proj * proj, axis=-1)


def score(x, y, model: Model):
    """Consistency score; 0 means the embedded image matches ``y`` exactly."""
    y = _check_attributes(y, model)
    diff = embed_image(x, model) - y
    return np.linalg.norm(diff @ model.w_a, axis=-1)


def metric_distance(a, b, w_a) -> np.ndarray:
    """Pseudo-distance ``||(a - b) @ w_a||`` in attribute space."""
    return np.linalg.norm((np.asarray(a, dtype=np.float64) - b) @ w_a, axis=-1)


def score_matrix(x, ys, model: Model) -> np.ndarray:
    """Scores of every image row in ``x`` against every row of ``ys`` (n x k)."""
    ys = _check_attributes(np.atleast_2d(ys), model)
    proj_x = embed_image(np.atleast_2d(x), model) @ model.w_a
    proj_y = ys @ model.w_a
    diff = proj_x[:, None, :] - proj_y[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))
