"""Pair generation, minibatch SGD with restarts, and hyperparameter search."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .data import Dataset
from .errors import ConfigError, DataError, NumericError
from .model import Model, TripletBatch, as_batch, score_squared
from .objective import HyperParams, criterion, total_loss
from .tasks import class_descriptors, zsl_accuracy, zsl_margin

log = logging.getLogger(__name__)

NEGATIVE_RESAMPLES = 100
INIT_GAIN = 0.1
INIT_BIAS = 0.5


@dataclass(frozen=True)
class PairConfig:
    positives_per_image: int = 1
    negatives_per_image: int = 1
    # a negative must satisfy ||y_neg - y_i|| > min_negative_distance
    min_negative_distance: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.positives_per_image < 1 or self.negatives_per_image < 1:
            raise ConfigError("positives_per_image and negatives_per_image must be >= 1")
        if self.min_negative_distance < 0:
            raise ConfigError("min_negative_distance must be >= 0")


@dataclass(frozen=True)
class GridSpec:
    m_fractions: Tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0, 1.2)
    lambdas: Tuple[float, ...] = (0.05, 0.3, 1.0)
    mus: Tuple[float, ...] = (0.01, 0.1, 1.0, 10.0)
    holdout_class_fraction: float = 0.2
    # independent class holdouts whose validation scores are averaged
    folds: int = 3
    # set to allow values outside the searched ranges
    allow_out_of_range: bool = False

    def __post_init__(self):
        for name in ("m_fractions", "lambdas", "mus"):
            if not getattr(self, name):
                raise ConfigError(f"grid {name} must be non-empty")
        if not 0 < self.holdout_class_fraction < 1:
            raise ConfigError("holdout_class_fraction must be in (0, 1)")
        if self.folds < 1:
            raise ConfigError("folds must be >= 1")
        if self.allow_out_of_range:
            return
        ranges = {"m_fractions": (0.2, 1.2), "lambdas": (0.05, 1.0), "mus": (0.01, 10.0)}
        for name, (lo, hi) in ranges.items():
            bad = [v for v in getattr(self, name) if not lo <= v <= hi]
            if bad:
                raise ConfigError(f"grid {name} values {bad} outside [{lo}, {hi}]")

    def m_values(self, p: int) -> List[int]:
        out = []
        for f in self.m_fractions:
            m = max(1, int(round(f * p)))
            if m not in out:
                out.append(m)
        return out


@dataclass
class TrainReport:
    final_loss: float
    loss_per_epoch: List[float]
    selected_restart: int = 0
    validation_accuracy_per_restart: List[float] = field(default_factory=list)
    wall_time: float = 0.0
    hyperparams: dict = field(default_factory=dict)
    finetune_loss_per_epoch: List[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "final_loss": self.final_loss,
            "loss_per_epoch": self.loss_per_epoch,
            "selected_restart": self.selected_restart,
            "validation_accuracy_per_restart": self.validation_accuracy_per_restart,
            "wall_time_s": self.wall_time,
            "hyperparams": self.hyperparams,
            "finetune_loss_per_epoch": self.finetune_loss_per_epoch,
        }


class ZSLValidation(NamedTuple):
    """Held-out classes: accuracy of nearest-signature classification."""

    features: np.ndarray
    labels: np.ndarray
    descriptors: list


Validation = Union[TripletBatch, ZSLValidation]


def derive_seed(master: int, *path: int) -> int:
    """Independent 64-bit seed for a (master, index, ...) stream."""
    return int(np.random.SeedSequence([int(master), *map(int, path)]).generate_state(1, np.uint64)[0])


def make_pairs(features, attributes, cfg: PairConfig = PairConfig()) -> TripletBatch:
    """One consistent and one inconsistent (image, attributes) pair per image by default.

    Negatives reuse another image's attribute vector lying farther than
    ``cfg.min_negative_distance`` from the image's own.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    attributes = np.atleast_2d(np.asarray(attributes, dtype=np.float64))
    n = len(features)
    if n != len(attributes):
        raise DataError(f"{n} feature rows but {len(attributes)} attribute rows")
    if n < 2:
        raise DataError("need at least two images to draw negatives")
    rng = np.random.default_rng(cfg.seed)
    thr = cfg.min_negative_distance
    rows, ys, zs = [], [], []
    for i in range(n):
        for _ in range(cfg.positives_per_image):
            rows.append(i)
            ys.append(i)
            zs.append(1)
        for _ in range(cfg.negatives_per_image):
            j = None
            for _ in range(NEGATIVE_RESAMPLES):
                cand = int(rng.integers(n - 1))
                cand += cand >= i
                if np.linalg.norm(attributes[cand] - attributes[i]) > thr:
                    j = cand
                    break
            if j is None:
                dist = np.linalg.norm(attributes - attributes[i], axis=1)
                valid = np.flatnonzero(dist > thr)
                if len(valid) == 0:
                    raise DataError(f"image {i}: no attribute vector farther than {thr} "
                                    "is available as a negative")
                j = int(rng.choice(valid))
            rows.append(i)
            ys.append(j)
            zs.append(-1)
    return TripletBatch(features[rows], attributes[ys], np.array(zs))


def standardization_stats(features) -> Tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale[scale < 1e-12] = 1.0
    return mean, scale


def init_model(d: int, p: int, hp: HyperParams, rng: np.random.Generator) -> Model:
    """Normal random weights, positive bias, tau = 1.

    w_x has std ``INIT_GAIN / sqrt(d)`` and b_x starts at ``INIT_BIAS`` so
    every ReLU unit begins in its linear regime; w_a has std ``1 / sqrt(p)``.
    """
    w_x = rng.normal(size=(d, p)) * (INIT_GAIN / math.sqrt(d))
    if hp.identity_metric:
        w_a = np.eye(p)
    else:
        w_a = rng.normal(size=(p, hp.m)) / math.sqrt(p)
    return Model(w_x=w_x, b_x=np.full(p, INIT_BIAS), w_a=w_a, tau=1.0)


def pair_accuracy(batch, model: Model) -> float:
    """Fraction of triplets with sign(tau - S^2) == z."""
    batch = as_batch(batch)
    pred = np.where(model.tau - score_squared(batch.x, batch.y, model) > 0, 1, -1)
    return float(np.mean(pred == batch.z))


def pair_margin(batch, model: Model) -> float:
    """Mean of ``z * (tau - S^2)`` divided by the mean of ``S^2``."""
    batch = as_batch(batch)
    s2 = score_squared(batch.x, batch.y, model)
    scale = float(np.mean(s2))
    return float(np.mean(batch.z * (model.tau - s2)) / scale) if scale > 0 else 0.0


def validation_score(model: Model, validation: Validation) -> Tuple[float, float]:
    """(accuracy, margin); compared lexicographically, so the margin only
    separates candidates of equal accuracy."""
    if isinstance(validation, ZSLValidation):
        args = (validation.features, validation.labels, validation.descriptors, model)
        return zsl_accuracy(*args), zsl_margin(*args)
    return pair_accuracy(validation, model), pair_margin(validation, model)


def validation_accuracy(model: Model, validation: Validation) -> float:
    return validation_score(model, validation)[0]


def best_index(scores: Sequence[Tuple[float, float]]) -> int:
    """First index of the lexicographically largest score."""
    return max(range(len(scores)), key=lambda i: (scores[i], -i))


def sgd_train(triplets, hp: HyperParams, init_seed: int, *, init: Optional[Model] = None,
              standardization=None,
              validate: Optional[Callable[[Model], float]] = None) -> Tuple[Model, TrainReport]:
    """Minibatch SGD on the full criterion, reshuffling every epoch.

    Each step moves by ``learning_rate / len(minibatch)`` times the gradient
    of the minibatch criterion. With ``init`` the run continues from that
    model and keeps its standardization.
    """
    start = time.perf_counter()
    batch = as_batch(triplets)
    if len(batch) == 0:
        raise DataError("no training triplets")
    rng = np.random.default_rng(init_seed)

    if init is None:
        if hp.standardize:
            mean, scale = standardization if standardization is not None else \
                standardization_stats(batch.x)
        else:
            mean = scale = None
        model = init_model(batch.x.shape[1], batch.y.shape[1], hp, rng)
    else:
        mean, scale = init.feature_mean, init.feature_scale
        model = init.replace(feature_mean=None, feature_scale=None)
    xs = batch.x if mean is None else (batch.x - mean) / scale
    work = TripletBatch(xs, batch.y, batch.z)
    if work.x.shape[1] != model.d or work.y.shape[1] != model.p:
        raise DataError(f"triplets are {work.x.shape[1]}/{work.y.shape[1]}-dimensional, "
                        f"model expects {model.d}/{model.p}")

    def finished(raw):
        return raw if mean is None else raw.replace(feature_mean=mean, feature_scale=scale)

    params = [np.array(model.w_x), np.array(model.b_x), np.array(model.w_a), model.tau]
    velocity = [np.zeros_like(params[0]), np.zeros_like(params[1]), np.zeros_like(params[2]), 0.0]
    xs, ys, zs = work.x, work.y, work.z.astype(np.float64)
    n = len(work)
    steps = math.ceil(n / hp.batch_size)
    trained = (0, 1, 3) if hp.identity_metric else (0, 1, 2, 3)
    losses = []
    patience = hp.early_stopping_patience if validate is not None else 0
    best_acc, best_params, stale = -math.inf, None, 0

    def as_model(ps):
        return Model(w_x=ps[0], b_x=ps[1], w_a=ps[2], tau=ps[3])

    for epoch in range(hp.epochs):
        order = rng.permutation(n)
        for step in range(steps):
            idx = order[step * hp.batch_size:(step + 1) * hp.batch_size]
            loss, grads = criterion(xs[idx], ys[idx], zs[idx], *params, hp.lam, hp.mu)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}; "
                                   "the learning rate is probably too large", epoch, step)
            rate = hp.learning_rate / len(idx)
            for k in trained:
                velocity[k] = hp.momentum * velocity[k] - rate * grads[k]
                params[k] = params[k] + velocity[k]
        epoch_loss, _ = criterion(xs, ys, zs, *params, hp.lam, hp.mu, with_grad=False)
        if not (math.isfinite(epoch_loss) and math.isfinite(params[3])
                and all(np.all(np.isfinite(params[k])) for k in range(3))):
            raise NumericError(f"training diverged during epoch {epoch}", epoch, steps - 1)
        losses.append(epoch_loss)
        if patience:
            acc = validate(finished(as_model(params)))
            if acc > best_acc:
                best_acc, best_params, stale = acc, list(params), 0
            else:
                stale += 1
                if stale >= patience:
                    log.info("early stop after epoch %d", epoch)
                    break

    final = as_model(best_params if best_params is not None else params)
    report = TrainReport(final_loss=total_loss(work, final, hp), loss_per_epoch=losses,
                         wall_time=time.perf_counter() - start, hyperparams=hp.as_dict())
    return finished(final), report


def _restart_job(args):
    triplets, hp, seed, standardization, validation = args
    model, report = sgd_train(triplets, hp, seed, standardization=standardization)
    return model, report, validation_score(model, validation)


def _map(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def multi_restart_train(triplets, hp: HyperParams, validation: Validation, *,
                        full_triplets=None, standardization=None,
                        jobs: int = 1) -> Tuple[Model, TrainReport]:
    """Train ``hp.restarts`` models from independent initializations, keep
    the best on ``validation`` and fine-tune it on ``full_triplets``
    (defaults to ``triplets``) for ``hp.finetune_epochs`` epochs."""
    start = time.perf_counter()
    jobs_args = [(triplets, hp, derive_seed(hp.seed, r), standardization, validation)
                 for r in range(hp.restarts)]
    results = _map(_restart_job, jobs_args, jobs)
    scores = [sc for _, _, sc in results]
    accuracies = [acc for acc, _ in scores]
    best = best_index(scores)
    model, report = results[best][0], results[best][1]
    log.info("restart validation accuracies %s -> restart %d", accuracies, best)

    finetune_losses: List[float] = []
    final_loss = report.final_loss
    if hp.finetune_epochs > 0:
        target = triplets if full_triplets is None else full_triplets
        model, ft = sgd_train(target, hp.replace(epochs=hp.finetune_epochs),
                              derive_seed(hp.seed, hp.restarts, 1), init=model)
        finetune_losses, final_loss = ft.loss_per_epoch, ft.final_loss

    return model, TrainReport(final_loss=final_loss, loss_per_epoch=report.loss_per_epoch,
                              selected_restart=best,
                              validation_accuracy_per_restart=accuracies,
                              wall_time=time.perf_counter() - start,
                              hyperparams=hp.as_dict(),
                              finetune_loss_per_epoch=finetune_losses)


def holdout_classes(classes: Sequence[int], fraction: float, seed: int):
    """Split class ids into (kept, held_out); at least one on each side."""
    classes = sorted(int(c) for c in classes)
    if len(classes) < 2:
        raise DataError(f"need at least 2 training classes to hold some out, have {len(classes)}")
    n_held = min(len(classes) - 1, max(1, int(round(fraction * len(classes)))))
    order = np.random.default_rng(seed).permutation(len(classes))
    held = sorted(classes[i] for i in order[:n_held])
    kept = sorted(classes[i] for i in order[n_held:])
    return kept, held


def _training_part(dataset: Dataset) -> Dataset:
    if dataset.labels is not None and "train" in dataset.splits:
        return dataset.split("train")
    return dataset


def _zsl_validation(ds: Dataset) -> ZSLValidation:
    return ZSLValidation(ds.features, ds.labels, class_descriptors(ds.attributes, ds.labels))


def fit(dataset: Dataset, hp: HyperParams, pair_cfg: PairConfig = PairConfig(), *,
        holdout_class_fraction: float = 0.2, jobs: int = 1) -> Tuple[Model, TrainReport]:
    """Train on the "train" split: restarts are validated on held-out
    training classes (or held-out pairs when there are no labels), and the
    winner is fine-tuned on every training image."""
    train = _training_part(dataset)
    standardization = standardization_stats(train.features) if hp.standardize else None
    full = make_pairs(train.features, train.attributes, pair_cfg)
    if train.labels is not None and len(train.classes()) >= 2:
        kept, held = holdout_classes(train.classes(), holdout_class_fraction,
                                     derive_seed(hp.seed, 0xC1A55))
        inner = train.select(kept)
        triplets = make_pairs(inner.features, inner.attributes, pair_cfg)
        validation: Validation = _zsl_validation(train.select(held))
    else:
        order = np.random.default_rng(derive_seed(hp.seed, 0xDA7A)).permutation(train.n)
        n_val = max(2, int(round(holdout_class_fraction * train.n)))
        val_idx, fit_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
        triplets = make_pairs(train.features[fit_idx], train.attributes[fit_idx], pair_cfg)
        validation = make_pairs(train.features[val_idx], train.attributes[val_idx], pair_cfg)
    return multi_restart_train(triplets, hp, validation, full_triplets=full,
                               standardization=standardization, jobs=jobs)


class GridRow(NamedTuple):
    m: int
    lam: float
    mu: float
    validation_accuracy: float
    wall_time_s: float


def _grid_job(args):
    triplets, hp, standardization, validation = args
    start = time.perf_counter()
    model, _ = sgd_train(triplets, hp, derive_seed(hp.seed, 0), standardization=standardization)
    return validation_score(model, validation), time.perf_counter() - start


def grid_points(grid: GridSpec, hp_base: HyperParams, p: int) -> List[HyperParams]:
    ms = [p] if hp_base.identity_metric else grid.m_values(p)
    return [hp_base.replace(m=m, lam=lam, mu=mu)
            for m in ms for lam in grid.lambdas for mu in grid.mus]


def grid_search(dataset: Dataset, grid: GridSpec, hp_base: HyperParams,
                pair_cfg: PairConfig = PairConfig(), *,
                jobs: int = 1) -> Tuple[HyperParams, List[GridRow]]:
    """Score every (m, lam, mu) by zero-shot accuracy on training classes
    held out from fitting, averaged over ``grid.folds`` random holdouts.
    Each (point, fold) is a single seeded run; equal accuracies are
    separated by the averaged validation margin."""
    train = _training_part(dataset)
    if train.labels is None:
        raise DataError("grid search needs class labels on the training split")
    folds = []
    for f in range(grid.folds):
        kept, held = holdout_classes(train.classes(), grid.holdout_class_fraction,
                                     derive_seed(hp_base.seed, 0x6121D, f))
        inner = train.select(kept)
        standardization = standardization_stats(inner.features) if hp_base.standardize else None
        triplets = make_pairs(inner.features, inner.attributes, pair_cfg)
        folds.append((triplets, standardization, _zsl_validation(train.select(held))))
    points = grid_points(grid, hp_base, dataset.p)
    results = _map(_grid_job, [(trip, hp, st, val) for hp in points for trip, st, val in folds], jobs)
    rows, scores = [], []
    for i, hp in enumerate(points):
        part = results[i * grid.folds:(i + 1) * grid.folds]
        acc = float(np.mean([sc[0] for sc, _ in part]))
        margin = float(np.mean([sc[1] for sc, _ in part]))
        scores.append((acc, margin))
        rows.append(GridRow(hp.m, hp.lam, hp.mu, acc, float(sum(w for _, w in part))))
    return points[best_index(scores)], rows
