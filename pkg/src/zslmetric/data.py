"""Dataset directories, synthetic benchmarks and the model file format.

A dataset directory holds::

    features.csv     N rows of d comma-separated floats
    attributes.csv   N rows of p comma-separated floats in [0, 1]
    labels.csv       optional, N rows with one integer class id
    splits.txt       optional, lines "name: id,id,..."

Lines starting with ``#`` are comments in every file.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, DimensionError
from .model import Model

MODEL_FORMAT = "zslmetric-model"
MODEL_VERSION = 1


class MissingFileError(DataError):
    pass


class MalformedValueError(DataError):
    pass


class RaggedRowsError(DataError):
    pass


class AttributeRangeError(DataError):
    pass


class SplitError(DataError):
    pass


class SplitOverlapError(SplitError):
    pass


class ModelFormatError(DataError):
    pass


def fmt(value: float) -> str:
    """Round-trip-exact decimal form of a float."""
    return format(float(value), ".17g")


def _row(values) -> str:
    return ",".join(fmt(v) for v in values)


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    attributes: np.ndarray
    labels: Optional[np.ndarray] = None
    splits: Mapping[str, Tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        attributes = np.atleast_2d(np.asarray(self.attributes, dtype=np.float64))
        if len(features) != len(attributes):
            raise RaggedRowsError(f"features has {len(features)} rows, attributes has {len(attributes)}")
        if not np.all(np.isfinite(features)):
            raise MalformedValueError("features contain non-finite values")
        bad = np.argwhere(~((attributes >= 0) & (attributes <= 1)))
        if len(bad):
            r, c = bad[0]
            raise AttributeRangeError(f"attribute value {attributes[r, c]!r} outside [0, 1] "
                                      f"at row {r + 1}, column {c + 1}")
        labels = None
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(labels) != len(features):
                raise RaggedRowsError(f"labels has {len(labels)} rows, features has {len(features)}")
        splits = {name: tuple(int(c) for c in ids) for name, ids in self.splits.items()}
        train, test = set(splits.get("train", ())), set(splits.get("test", ()))
        if train & test:
            raise SplitOverlapError(f"classes {sorted(train & test)} appear in both train and test")
        if labels is not None and splits:
            owner: Dict[int, str] = {}
            for name, ids in splits.items():
                for c in ids:
                    if c in owner:
                        raise SplitOverlapError(f"class {c} appears in splits {owner[c]!r} and {name!r}")
                    owner[c] = name
            missing = sorted(set(labels.tolist()) - set(owner))
            if missing:
                raise SplitError(f"classes {missing} are labeled but belong to no split")
        for arr in (features, attributes):
            arr.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "attributes", attributes)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "splits", splits)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def p(self) -> int:
        return self.attributes.shape[1]

    def classes(self, split: Optional[str] = None) -> Tuple[int, ...]:
        if split is None:
            if self.labels is None:
                return ()
            return tuple(int(c) for c in np.unique(self.labels))
        if split not in self.splits:
            raise SplitError(f"dataset has no {split!r} split (have: {sorted(self.splits)})")
        return self.splits[split]

    def mask(self, classes: Sequence[int]) -> np.ndarray:
        if self.labels is None:
            raise DataError("dataset has no class labels")
        return np.isin(self.labels, np.asarray(list(classes), dtype=np.int64))

    def select(self, classes: Sequence[int]) -> "Dataset":
        """Samples of the given classes, keeping only splits restricted to them."""
        keep = self.mask(classes)
        wanted = set(int(c) for c in classes)
        splits = {k: tuple(c for c in v if c in wanted) for k, v in self.splits.items()}
        splits = {k: v for k, v in splits.items() if v}
        return Dataset(self.features[keep], self.attributes[keep], self.labels[keep], splits)

    def split(self, name: str) -> "Dataset":
        return self.select(self.classes(name))

    def equals(self, other: "Dataset") -> bool:
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None
            and np.array_equal(self.labels, other.labels))
        return (np.array_equal(self.features, other.features)
                and np.array_equal(self.attributes, other.attributes)
                and same_labels and dict(self.splits) == dict(other.splits))


def _data_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if line and not line.startswith("#"):
                yield lineno, line


def _read_matrix(path: Path) -> np.ndarray:
    rows = []
    width = None
    for lineno, line in _data_lines(path):
        try:
            row = [float(v) for v in line.split(",")]
        except ValueError:
            raise MalformedValueError(f"{path.name}, line {lineno}: non-numeric value") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise RaggedRowsError(f"{path.name}, line {lineno}: {len(row)} values, expected {width}")
        if not all(np.isfinite(row)):
            raise MalformedValueError(f"{path.name}, line {lineno}: non-finite value")
        rows.append(row)
    if not rows:
        raise DataError(f"{path.name}: no data rows")
    return np.array(rows, dtype=np.float64)


def _read_labels(path: Path) -> np.ndarray:
    labels = []
    for lineno, line in _data_lines(path):
        try:
            labels.append(int(line))
        except ValueError:
            raise MalformedValueError(f"{path.name}, line {lineno}: class id must be an integer") from None
    return np.array(labels, dtype=np.int64)


def _read_splits(path: Path) -> Dict[str, Tuple[int, ...]]:
    splits = {}
    for lineno, line in _data_lines(path):
        name, sep, ids = line.partition(":")
        if not sep or not name.strip():
            raise MalformedValueError(f"{path.name}, line {lineno}: expected 'name: id,id,...'")
        try:
            splits[name.strip()] = tuple(int(v) for v in ids.split(",") if v.strip())
        except ValueError:
            raise MalformedValueError(f"{path.name}, line {lineno}: class ids must be integers") from None
    return splits


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.is_dir():
        raise MissingFileError(f"dataset directory {path} does not exist")
    for required in ("features.csv", "attributes.csv"):
        if not (path / required).is_file():
            raise MissingFileError(f"{path / required} is missing")
    features = _read_matrix(path / "features.csv")
    attributes = _read_matrix(path / "attributes.csv")
    if len(features) != len(attributes):
        raise RaggedRowsError(f"features.csv has {len(features)} rows but attributes.csv "
                              f"has {len(attributes)}")
    bad = np.argwhere(~((attributes >= 0) & (attributes <= 1)))
    if len(bad):
        r, c = bad[0]
        raise AttributeRangeError(f"attributes.csv, row {r + 1}, column {c + 1}: value "
                                  f"{attributes[r, c]!r} outside [0, 1]")
    labels = None
    if (path / "labels.csv").is_file():
        labels = _read_labels(path / "labels.csv")
        if len(labels) != len(features):
            raise RaggedRowsError(f"labels.csv has {len(labels)} rows but features.csv "
                                  f"has {len(features)}")
    splits = _read_splits(path / "splits.txt") if (path / "splits.txt").is_file() else {}
    return Dataset(features, attributes, labels, splits)


def save_dataset(dataset: Dataset, path, header: Optional[str] = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lead = f"# {header}\n" if header else ""

    def write(name, lines):
        with open(path / name, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(lead)
            fh.writelines(line + "\n" for line in lines)

    write("features.csv", (_row(r) for r in dataset.features))
    write("attributes.csv", (_row(r) for r in dataset.attributes))
    if dataset.labels is not None:
        write("labels.csv", (str(int(c)) for c in dataset.labels))
    if dataset.splits:
        write("splits.txt", (f"{k}: {','.join(str(c) for c in v)}" for k, v in dataset.splits.items()))


# -- synthetic benchmarks ---------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 15
    samples_per_class: int = 50
    p: int = 20
    d: int = 64
    attribute_density: float = 0.35
    noise_sigma: float = 0.05
    seed: int = 7
    test_classes: int = 3
    # per-image annotation noise shared along a few random attribute directions
    attribute_noise: float = 0.0
    attribute_noise_rank: int = 3

    def __post_init__(self):
        if self.n_classes < 2:
            raise DataError("n_classes must be >= 2")
        if self.samples_per_class < 1 or self.p < 1 or self.d < 1:
            raise DataError("samples_per_class, p and d must be positive")
        if not 0 < self.attribute_density < 1:
            raise DataError("attribute_density must be in (0, 1)")
        if self.noise_sigma < 0 or self.attribute_noise < 0:
            raise DataError("noise levels must be nonnegative")
        if not 0 <= self.test_classes < self.n_classes:
            raise DataError("test_classes must leave at least one training class")


SYNTH_A = SynthSpec()
SYNTH_B = replace(SYNTH_A, seed=11, attribute_noise=0.25)
PRESETS = {"synth-A": SYNTH_A, "synth-B": SYNTH_B}


def synth_generate_with_mixing(spec: SynthSpec, mixing=None):
    """Generate a synthetic dataset; also returns the p x d mixing map."""
    if spec.d < spec.p:
        warnings.warn(f"d={spec.d} < p={spec.p}: attributes are not linearly recoverable",
                      stacklevel=2)
    rng = np.random.default_rng(spec.seed)
    for _ in range(1000):
        signatures = (rng.random((spec.n_classes, spec.p)) < spec.attribute_density).astype(np.float64)
        if len(np.unique(signatures, axis=0)) == spec.n_classes:
            break
    else:
        raise DataError("could not draw pairwise distinct class signatures in 1000 attempts")

    if mixing is None:
        rank = min(spec.p, spec.d)
        while True:
            mixing = rng.normal(size=(spec.p, spec.d)) / np.sqrt(spec.p)
            if np.linalg.matrix_rank(mixing) == rank:
                break
    else:
        mixing = np.asarray(mixing, dtype=np.float64)
        if mixing.shape != (spec.p, spec.d):
            raise DimensionError("mixing map shape", (spec.p, spec.d), mixing.shape)

    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    clean = signatures[labels]
    features = clean @ mixing
    if spec.noise_sigma > 0:
        features = features + spec.noise_sigma * rng.normal(size=features.shape)
    attributes = clean
    if spec.attribute_noise > 0:
        directions = rng.normal(size=(spec.attribute_noise_rank, spec.p))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        coeffs = rng.normal(size=(len(labels), spec.attribute_noise_rank))
        attributes = np.clip(clean + spec.attribute_noise * coeffs @ directions, 0.0, 1.0)

    order = rng.permutation(spec.n_classes)
    test = tuple(sorted(int(c) for c in order[:spec.test_classes]))
    train = tuple(sorted(int(c) for c in order[spec.test_classes:]))
    splits = {"train": train}
    if test:
        splits["test"] = test
    return Dataset(features, attributes, labels, splits), mixing


def synth_generate(spec: SynthSpec, mixing=None) -> Dataset:
    return synth_generate_with_mixing(spec, mixing)[0]


def planted_model(mixing, m=None) -> Model:
    """Exact linear inverse of a noise-free synthetic mixing: embeds
    ``signature @ mixing`` back onto ``signature``; Euclidean metric."""
    mixing = np.asarray(mixing, dtype=np.float64)
    p = mixing.shape[0]
    w_a = np.eye(p) if m is None else np.eye(p)[:, :m]
    return Model(w_x=np.linalg.pinv(mixing), b_x=np.zeros(p), w_a=w_a)


# -- model files -----------------------------------------------------------

def format_model(model: Model, header: Optional[str] = None) -> str:
    lines = []
    if header:
        lines.append(f"# {header}")
    lines += [f"{MODEL_FORMAT} {MODEL_VERSION}", f"d {model.d}", f"p {model.p}", f"m {model.m}",
              f"tau {fmt(model.tau)}", f"standardization {int(model.standardized)}"]
    if model.standardized:
        lines.append("feature_mean " + _row(model.feature_mean))
        lines.append("feature_scale " + _row(model.feature_scale))
    lines.append("w_x")
    lines += [_row(r) for r in model.w_x]
    lines.append("b_x")
    lines.append(_row(model.b_x))
    lines.append("w_a")
    lines += [_row(r) for r in model.w_a]
    return "\n".join(lines) + "\n"


def save_model(model: Model, path, header: Optional[str] = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_model(model, header))


def parse_model(text: str, source: str = "<model>") -> Model:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise ModelFormatError(f"{source}: unexpected end of file")
        pos += 1
        return lines[pos - 1]

    def keyed(key):
        line = take()
        name, _, value = line.partition(" ")
        if name != key:
            raise ModelFormatError(f"{source}: expected '{key}', found {line[:40]!r}")
        return value

    def floats(line, n, what):
        try:
            vals = [float(v) for v in line.split(",")]
        except ValueError:
            raise ModelFormatError(f"{source}: non-numeric value in {what}") from None
        if len(vals) != n:
            raise DimensionError(f"{source}: {what} length", n, len(vals))
        return vals

    def matrix(key, rows, cols):
        if take() != key:
            raise ModelFormatError(f"{source}: expected '{key}' section")
        out = []
        while pos < len(lines) and lines[pos] not in ("b_x", "w_a"):
            out.append(floats(take(), cols, f"{key} row"))
        if len(out) != rows:
            raise DimensionError(f"{source}: {key} row count", rows, len(out))
        return np.array(out, dtype=np.float64).reshape(rows, cols)

    magic, _, version = take().partition(" ")
    if magic != MODEL_FORMAT:
        raise ModelFormatError(f"{source}: not a model file")
    if version != str(MODEL_VERSION):
        raise ModelFormatError(f"{source}: unsupported model format version {version!r}")
    try:
        d, p, m = int(keyed("d")), int(keyed("p")), int(keyed("m"))
        tau = float(keyed("tau"))
        standardized = int(keyed("standardization"))
    except ValueError:
        raise ModelFormatError(f"{source}: malformed header value") from None
    mean = scale = None
    if standardized:
        mean = floats(keyed("feature_mean"), d, "feature_mean")
        scale = floats(keyed("feature_scale"), d, "feature_scale")
    w_x = matrix("w_x", d, p)
    if take() != "b_x":
        raise ModelFormatError(f"{source}: expected 'b_x' section")
    b_x = floats(take(), p, "b_x")
    w_a = matrix("w_a", p, m)
    if pos != len(lines):
        raise ModelFormatError(f"{source}: trailing content after w_a")
    return Model(w_x=w_x, b_x=b_x, w_a=w_a, tau=tau, feature_mean=mean, feature_scale=scale)


def load_model(path) -> Model:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"model file {path} does not exist")
    return parse_model(path.read_text(encoding="utf-8"), source=path.name)
