"""Applications of the consistency score and their evaluation metrics."""

from __future__ import annotations

from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError
from .model import Model, score, score_matrix


class ClassDescriptor(NamedTuple):
    class_id: int
    signature: np.ndarray


class RankedResult(NamedTuple):
    item_index: int
    score: float


def class_descriptors(attributes, labels) -> List[ClassDescriptor]:
    """Mean attribute vector of each class, sorted by class id."""
    attributes = np.atleast_2d(np.asarray(attributes, dtype=np.float64))
    labels = np.asarray(labels).reshape(-1)
    if len(attributes) != len(labels):
        raise DataError(f"{len(attributes)} attribute rows but {len(labels)} labels")
    if len(labels) == 0:
        raise DataError("no samples to build class descriptors from")
    return [ClassDescriptor(int(c), attributes[labels == c].mean(axis=0))
            for c in np.unique(labels)]


def _descriptor_arrays(descriptors):
    if not descriptors:
        raise DataError("empty descriptor set")
    ordered = sorted(descriptors, key=lambda dsc: dsc.class_id)
    ids = np.array([dsc.class_id for dsc in ordered], dtype=np.int64)
    if len(np.unique(ids)) != len(ids):
        raise DataError("duplicate class ids among descriptors")
    return ids, np.stack([np.asarray(dsc.signature, dtype=np.float64) for dsc in ordered])


def zsl_predict(features, descriptors, model: Model) -> np.ndarray:
    """Most consistent class for every row of ``features``.

    Equal scores resolve to the smallest class id.
    """
    ids, sigs = _descriptor_arrays(descriptors)
    scores = score_matrix(np.atleast_2d(features), sigs, model)
    return ids[np.argmin(scores, axis=1)]


def zsl_classify(x, descriptors, model: Model) -> int:
    return int(zsl_predict(np.atleast_2d(x), descriptors, model)[0])


def _check_labels(labels, descriptors):
    labels = np.asarray(labels).reshape(-1)
    if len(labels) == 0:
        raise DataError("empty test set")
    known = {dsc.class_id for dsc in descriptors}
    unknown = sorted(set(labels.tolist()) - known)
    if unknown:
        raise DataError(f"test labels {unknown} have no class descriptor")
    return labels


def zsl_accuracy(features, labels, descriptors, model: Model) -> float:
    labels = _check_labels(labels, descriptors)
    return float(np.mean(zsl_predict(features, descriptors, model) == labels))


def zsl_margin(features, labels, descriptors, model: Model) -> float:
    """Mean of ``(s_wrong - s_true) / (s_wrong + s_true)`` over samples, where
    ``s_wrong`` is the best score among the other classes.

    Lies in [-1, 1], is positive for correct decisions and does not change
    when ``w_a`` is rescaled.
    """
    labels = _check_labels(labels, descriptors)
    ids, sigs = _descriptor_arrays(descriptors)
    if len(ids) < 2:
        return 1.0
    scores = score_matrix(np.atleast_2d(features), sigs, model)
    true_col = np.searchsorted(ids, labels)
    rows = np.arange(len(labels))
    s_true = scores[rows, true_col]
    others = scores.copy()
    others[rows, true_col] = np.inf
    s_wrong = others.min(axis=1)
    total = s_wrong + s_true
    rel = np.where(total > 0, (s_wrong - s_true) / np.where(total > 0, total, 1.0), 0.0)
    return float(np.mean(rel))


def per_class_accuracy(features, labels, descriptors, model: Model) -> Dict[int, float]:
    labels = _check_labels(labels, descriptors)
    pred = zsl_predict(features, descriptors, model)
    return {int(c): float(np.mean(pred[labels == c] == c)) for c in np.unique(labels)}


# -- few-shot ------------------------------------------------------------------

def few_shot_finetune(model: Model, new_triplets, hp, *, epochs: Optional[int] = None,
                      learning_rate: Optional[float] = None, seed: Optional[int] = None) -> Model:
    """Continue SGD from ``model`` on triplets of unseen classes only.

    Defaults: ``hp.finetune_epochs`` epochs at a tenth of ``hp.learning_rate``.
    """
    from .training import derive_seed, sgd_train

    epochs = hp.finetune_epochs if epochs is None else epochs
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    if epochs == 0:
        return model
    lr = hp.learning_rate / 10 if learning_rate is None else learning_rate
    seed = derive_seed(hp.seed, 0xF5) if seed is None else seed
    tuned, _ = sgd_train(new_triplets, hp.replace(epochs=epochs, learning_rate=lr), seed, init=model)
    return tuned


def few_shot_curve(model: Model, test, ks: Sequence[int], hp, seed: int,
                   pair_cfg=None) -> List[Tuple[int, float]]:
    """Accuracy after fine-tuning on k labeled images per unseen class.

    For each class, ``max(ks)`` images are set aside as the support pool;
    every k is evaluated on the same remaining images, so k = 0 is plain
    zero-shot accuracy on that evaluation set.
    """
    from .training import PairConfig, derive_seed, make_pairs

    ks = [int(k) for k in ks]
    if any(k < 0 for k in ks):
        raise ConfigError("k values must be >= 0")
    if test.labels is None:
        raise DataError("few-shot evaluation needs labeled test images")
    descriptors = class_descriptors(test.attributes, test.labels)
    kmax = max(ks)
    rng = np.random.default_rng(seed)
    pools, eval_idx = [], []
    for c in np.unique(test.labels):
        idx = np.flatnonzero(test.labels == c)
        if len(idx) <= kmax:
            raise DataError(f"class {int(c)} has {len(idx)} images; k={kmax} leaves none to evaluate")
        idx = idx[rng.permutation(len(idx))]
        pools.append(idx[:kmax])
        eval_idx.extend(idx[kmax:].tolist())
    eval_idx = np.sort(np.array(eval_idx))
    x_eval, y_eval = test.features[eval_idx], test.labels[eval_idx]

    out = []
    for k in ks:
        tuned = model
        if k > 0:
            support = np.sort(np.concatenate([pool[:k] for pool in pools]))
            cfg = pair_cfg or PairConfig()
            cfg = PairConfig(cfg.positives_per_image, cfg.negatives_per_image,
                             cfg.min_negative_distance, derive_seed(seed, k))
            triplets = make_pairs(test.features[support], test.attributes[support], cfg)
            tuned = few_shot_finetune(model, triplets, hp, seed=derive_seed(seed, k, 1))
        out.append((k, zsl_accuracy(x_eval, y_eval, descriptors, tuned)))
    return out


# -- retrieval -------------------------------------------------------------------

def retrieve(query, gallery, model: Model, *, threshold: Optional[float] = None,
             top_k: Optional[int] = None) -> List[RankedResult]:
    """Gallery items ranked by consistency with an attribute query.

    ``threshold`` keeps items scoring strictly below it; ``top_k`` keeps
    the k best. Exactly one must be given.
    """
    if (threshold is None) == (top_k is None):
        raise ConfigError("give exactly one of threshold or top_k")
    gallery = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if len(gallery) == 0:
        raise DataError("empty gallery")
    scores = np.atleast_1d(score(gallery, np.asarray(query, dtype=np.float64), model))
    order = np.lexsort((np.arange(len(scores)), scores))
    if top_k is not None:
        if top_k < 1:
            raise ConfigError("top_k must be >= 1")
        order = order[:top_k]
    else:
        if threshold < 0:
            raise ConfigError("threshold must be >= 0")
        order = order[scores[order] < threshold]
    return [RankedResult(int(i), float(scores[i])) for i in order]


def average_precision(flags) -> float:
    """Mean of precision@r over the ranks r of relevant items."""
    flags = np.asarray(flags, dtype=np.int64).reshape(-1)
    n_rel = int(flags.sum())
    if n_rel == 0:
        raise DataError("average precision needs at least one relevant item")
    hits = np.cumsum(flags)
    ranks = np.arange(1, len(flags) + 1)
    return float(np.sum((hits / ranks)[flags == 1]) / n_rel)


def pr_curve(flags) -> List[Tuple[float, float]]:
    """(recall, precision) after each rank of the ranking."""
    flags = np.asarray(flags, dtype=np.int64).reshape(-1)
    n_rel = int(flags.sum())
    if n_rel == 0:
        raise DataError("precision-recall curve needs at least one relevant item")
    hits = np.cumsum(flags)
    ranks = np.arange(1, len(flags) + 1)
    return [(float(h / n_rel), float(h / r)) for h, r in zip(hits, ranks)]


def ranked_relevance(query, gallery, gallery_labels, class_id, model: Model) -> np.ndarray:
    ranked = retrieve(query, gallery, model, top_k=len(gallery))
    labels = np.asarray(gallery_labels)
    return np.array([int(labels[r.item_index] == class_id) for r in ranked])


def mean_average_precision(descriptors, gallery, gallery_labels, model: Model):
    """mAP over one attribute query per class; returns (mAP, {class: AP})."""
    if not descriptors:
        raise DataError("no queries")
    labels = np.asarray(gallery_labels).reshape(-1)
    per_class = {}
    for dsc in sorted(descriptors, key=lambda q: q.class_id):
        if not np.any(labels == dsc.class_id):
            raise DataError(f"query class {dsc.class_id} has no gallery images")
        flags = ranked_relevance(dsc.signature, gallery, labels, dsc.class_id, model)
        per_class[dsc.class_id] = average_precision(flags)
    return float(np.mean(list(per_class.values()))), per_class
