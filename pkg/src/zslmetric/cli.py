"""Command-line interface.

Subcommands: train, gridsearch, eval, dimsweep, fewshot, retrieve, synth.
Settings resolve as command-line flags > ``--config`` file > defaults. A
config file is flat ``key = value`` text; keys are the long flag names,
with dashes or underscores.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .data import (PRESETS, fmt, load_dataset, load_model, save_dataset,
                   save_model, synth_generate)
from .errors import ConfigError, DataError, NumericError
from .objective import HyperParams
from .tasks import (class_descriptors, few_shot_curve, mean_average_precision,
                    per_class_accuracy, pr_curve, ranked_relevance, retrieve, zsl_accuracy)
from .training import GridSpec, PairConfig, derive_seed, fit, grid_search

log = logging.getLogger("zslmetric")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# config key -> (section, field, parser)
_FLOAT_LIST = lambda s: tuple(float(v) for v in str(s).split(",") if v.strip())  # noqa: E731
_INT_LIST = lambda s: tuple(int(v) for v in str(s).split(",") if v.strip())  # noqa: E731


def _bool(s):
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


KEYS = {
    "lambda": ("hp", "lam", float),
    "mu": ("hp", "mu", float),
    "m": ("hp", "m", int),
    "learning_rate": ("hp", "learning_rate", float),
    "batch_size": ("hp", "batch_size", int),
    "epochs": ("hp", "epochs", int),
    "restarts": ("hp", "restarts", int),
    "seed": ("hp", "seed", int),
    "momentum": ("hp", "momentum", float),
    "standardize": ("hp", "standardize", _bool),
    "finetune_epochs": ("hp", "finetune_epochs", int),
    "early_stopping_patience": ("hp", "early_stopping_patience", int),
    "positives_per_image": ("pairs", "positives_per_image", int),
    "negatives_per_image": ("pairs", "negatives_per_image", int),
    "min_negative_distance": ("pairs", "min_negative_distance", float),
    "m_fractions": ("grid", "m_fractions", _FLOAT_LIST),
    "lambdas": ("grid", "lambdas", _FLOAT_LIST),
    "mus": ("grid", "mus", _FLOAT_LIST),
    "holdout_class_fraction": ("grid", "holdout_class_fraction", float),
    "folds": ("grid", "folds", int),
    "no_metric": ("run", "no_metric", _bool),
    "no_constraint": ("run", "no_constraint", _bool),
    "jobs": ("run", "jobs", int),
    "data": ("run", "data", str),
    "model": ("run", "model", str),
    "out": ("run", "out", str),
    "m_values": ("run", "m_values", _INT_LIST),
    "k_values": ("run", "k_values", _INT_LIST),
    "repeats": ("run", "repeats", int),
}


@dataclass(frozen=True)
class RunConfig:
    hp: HyperParams = HyperParams()
    pairs: PairConfig = PairConfig()
    grid: GridSpec = GridSpec()
    data: Optional[str] = None
    model: Optional[str] = None
    out: str = "out"
    jobs: int = 1
    no_metric: bool = False
    no_constraint: bool = False
    m_values: tuple = (4, 8, 12, 16, 20, 24)
    k_values: tuple = (0, 1, 2, 5, 10)
    repeats: int = 5

    def training_hp(self) -> HyperParams:
        hp = self.hp
        if self.no_metric:
            hp = hp.replace(identity_metric=True)
        if self.no_constraint:
            hp = hp.replace(lam=0.0)
        return hp

    def training_grid(self) -> GridSpec:
        if self.no_constraint:
            return replace(self.grid, lambdas=(0.0,), allow_out_of_range=True)
        return self.grid

    def pair_config(self) -> PairConfig:
        return replace(self.pairs, seed=derive_seed(self.hp.seed, 0x9A125))

    def fingerprint(self) -> str:
        """Hash of every setting that affects computed results (not paths)."""
        payload = {
            "hp": asdict(self.training_hp()),
            "pairs": asdict(self.pairs),
            "grid": asdict(self.training_grid()),
            "m_values": list(self.m_values),
            "k_values": list(self.k_values),
            "repeats": self.repeats,
            "version": __version__,
        }
        text = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def read_config_file(path) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path.name}, line {lineno}: expected key = value")
        key = key.strip().replace("-", "_")
        if key not in KEYS:
            raise ConfigError(f"{path.name}, line {lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def build_config(settings: Dict[str, object]) -> RunConfig:
    """Turn raw key -> value settings into a validated RunConfig."""
    sections: Dict[str, dict] = {"hp": {}, "pairs": {}, "grid": {}, "run": {}}
    for key, raw in settings.items():
        if raw is None:
            continue
        section, name, parse = KEYS[key]
        try:
            sections[section][name] = parse(raw) if isinstance(raw, str) else raw
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
    run = sections["run"]
    if run.get("jobs", 1) < 1:
        raise ConfigError("jobs must be >= 1")
    if run.get("repeats", 1) < 1:
        raise ConfigError("repeats must be >= 1")
    return RunConfig(hp=HyperParams(**sections["hp"]), pairs=PairConfig(**sections["pairs"]),
                     grid=GridSpec(**sections["grid"]), **run)


def resolve(args) -> RunConfig:
    settings: Dict[str, object] = {}
    if getattr(args, "config", None):
        settings.update(read_config_file(args.config))
    for key in KEYS:
        value = getattr(args, key, None)
        if value is not None and value is not False:
            settings[key] = value
    return build_config(settings)


# -- output helpers ------------------------------------------------------------

def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _header(cfg: RunConfig, command: str) -> str:
    return f"zslmetric {__version__} {command} config={cfg.fingerprint()} seed={cfg.hp.seed}"


def write_csv(path: Path, header: str, columns: List[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {header}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(v) if isinstance(v, float) else v for v in row])


def write_json(path: Path, header: str, payload: dict) -> None:
    payload = {"header": header, **payload}
    path.write_text(json.dumps(payload, indent=2, default=float) + "\n", encoding="utf-8")


def write_config_file(path: Path, header: str, cfg: RunConfig, hp: HyperParams) -> None:
    lines = [f"# {header}",
             f"lambda = {fmt(hp.lam)}", f"mu = {fmt(hp.mu)}", f"m = {hp.m}",
             f"learning_rate = {fmt(hp.learning_rate)}", f"batch_size = {hp.batch_size}",
             f"epochs = {hp.epochs}", f"restarts = {hp.restarts}", f"seed = {hp.seed}",
             f"momentum = {fmt(hp.momentum)}", f"standardize = {int(hp.standardize)}",
             f"finetune_epochs = {hp.finetune_epochs}",
             f"no_metric = {int(cfg.no_metric)}", f"no_constraint = {int(cfg.no_constraint)}"]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _require(value, flag):
    if not value:
        raise ConfigError(f"{flag} is required for this command")
    return value


def _dataset(cfg: RunConfig):
    return load_dataset(_require(cfg.data, "--data"))


def _model_path(cfg: RunConfig) -> Path:
    return Path(cfg.model) if cfg.model else Path(cfg.out) / "model.txt"


# -- commands --------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    dataset = _dataset(cfg)
    out = _out_dir(cfg)
    hp = cfg.training_hp()
    header = _header(cfg, "train")
    model, report = fit(dataset, hp, cfg.pair_config(),
                        holdout_class_fraction=cfg.grid.holdout_class_fraction, jobs=cfg.jobs)
    path = _model_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, path, header=header)
    write_json(out / "train_report.json", header,
               {"config_fingerprint": cfg.fingerprint(), "model_file": str(path),
                "no_metric": cfg.no_metric, "no_constraint": cfg.no_constraint,
                **report.as_dict()})
    log.info("trained model written to %s (final loss %.6g)", path, report.final_loss)
    return EXIT_OK


def cmd_gridsearch(cfg: RunConfig) -> int:
    dataset = _dataset(cfg)
    out = _out_dir(cfg)
    header = _header(cfg, "gridsearch")
    best, rows = grid_search(dataset, cfg.training_grid(), cfg.training_hp(),
                             cfg.pair_config(), jobs=cfg.jobs)
    write_csv(out / "grid.csv", header, ["m", "lambda", "mu", "validation_accuracy", "wall_time_s"],
              [(r.m, float(r.lam), float(r.mu), float(r.validation_accuracy), float(r.wall_time_s))
               for r in rows])
    best = best.replace(identity_metric=False)
    write_config_file(out / "best_config.txt", header, cfg, best)
    log.info("best: m=%d lambda=%g mu=%g", best.m, best.lam, best.mu)
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    dataset = _dataset(cfg)
    model = load_model(_model_path(cfg))
    out = _out_dir(cfg)
    header = _header(cfg, "eval")
    test = dataset.split("test")
    if test.n == 0:
        raise DataError("test split has no images")
    descriptors = class_descriptors(test.attributes, test.labels)
    accuracy = zsl_accuracy(test.features, test.labels, descriptors, model)
    by_class = per_class_accuracy(test.features, test.labels, descriptors, model)
    counts = {c: int(np.sum(test.labels == c)) for c in by_class}
    write_csv(out / "accuracy.csv", header, ["class_id", "n_images", "accuracy"],
              [(c, counts[c], by_class[c]) for c in sorted(by_class)]
              + [("all", test.n, accuracy)])
    m_ap, aps = mean_average_precision(descriptors, test.features, test.labels, model)
    write_csv(out / "average_precision.csv", header, ["class_id", "average_precision"],
              [(c, aps[c]) for c in sorted(aps)] + [("mean", m_ap)])
    pr_rows = []
    for dsc in descriptors:
        flags = ranked_relevance(dsc.signature, test.features, test.labels, dsc.class_id, model)
        pr_rows += [(dsc.class_id, r, p) for r, p in pr_curve(flags)]
    write_csv(out / "pr_curve.csv", header, ["class_id", "recall", "precision"], pr_rows)
    write_json(out / "eval_summary.json", header,
               {"config_fingerprint": cfg.fingerprint(), "zsl_accuracy": accuracy,
                "mean_average_precision": m_ap, "test_classes": list(test.classes("test")),
                "n_test_images": test.n})
    log.info("zsl accuracy %.4f, mAP %.4f", accuracy, m_ap)
    return EXIT_OK


def cmd_dimsweep(cfg: RunConfig) -> int:
    dataset = _dataset(cfg)
    out = _out_dir(cfg)
    header = _header(cfg, "dimsweep")
    if not cfg.m_values or any(m < 1 for m in cfg.m_values):
        raise ConfigError("--m-values must be a non-empty list of positive integers")
    test = dataset.split("test")
    descriptors = class_descriptors(test.attributes, test.labels)
    rows = []
    for m in cfg.m_values:
        model, _ = fit(dataset, cfg.training_hp().replace(m=m), cfg.pair_config(),
                       holdout_class_fraction=cfg.grid.holdout_class_fraction, jobs=cfg.jobs)
        acc = zsl_accuracy(test.features, test.labels, descriptors, model)
        log.info("m=%d accuracy %.4f", m, acc)
        rows.append((m, acc))
    write_csv(out / "dimsweep.csv", header, ["m", "accuracy"], rows)
    return EXIT_OK


def cmd_fewshot(cfg: RunConfig) -> int:
    dataset = _dataset(cfg)
    model = load_model(_model_path(cfg))
    out = _out_dir(cfg)
    header = _header(cfg, "fewshot")
    ks = sorted(set(cfg.k_values))
    if not ks:
        raise ConfigError("--k-values must not be empty")
    test = dataset.split("test")
    curves = [few_shot_curve(model, test, ks, cfg.training_hp(),
                             derive_seed(cfg.hp.seed, 0xF5, r), cfg.pairs)
              for r in range(cfg.repeats)]
    acc = np.array([[a for _, a in curve] for curve in curves])
    rows = [(k, float(acc[:, i].mean()), float(acc[:, i].std()), cfg.repeats)
            for i, k in enumerate(ks)]
    write_csv(out / "fewshot.csv", header, ["k", "accuracy", "accuracy_std", "repeats"], rows)
    return EXIT_OK


def _read_query(path, p: int) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"query file {path} does not exist")
    lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()
             if ln.strip() and not ln.strip().startswith("#")]
    if len(lines) != 1:
        raise DataError(f"{path.name}: expected exactly one attribute row, found {len(lines)}")
    try:
        query = np.array([float(v) for v in lines[0].split(",")])
    except ValueError:
        raise DataError(f"{path.name}: malformed attribute vector") from None
    if len(query) != p:
        raise DataError(f"{path.name}: query has {len(query)} attributes, model expects {p}")
    if not np.all((query >= 0) & (query <= 1)):
        raise DataError(f"{path.name}: attribute values must lie in [0, 1]")
    return query


def cmd_retrieve(cfg: RunConfig, args) -> int:
    dataset = _dataset(cfg)
    model = load_model(_model_path(cfg))
    out = _out_dir(cfg)
    header = _header(cfg, "retrieve")
    if (args.query_file is None) == (args.query_class is None):
        raise ConfigError("give exactly one of --query-file or --query-class")
    if (args.top_k is None) == (args.threshold is None):
        raise ConfigError("give exactly one of --top-k or --threshold")
    gallery = dataset if args.gallery == "all" else dataset.split("test")
    if args.query_file is not None:
        query = _read_query(args.query_file, model.p)
    else:
        if gallery.labels is None or args.query_class not in set(gallery.labels.tolist()):
            raise DataError(f"class {args.query_class} has no images in the {args.gallery} gallery")
        query = gallery.attributes[gallery.labels == args.query_class].mean(axis=0)
    results = retrieve(query, gallery.features, model, threshold=args.threshold, top_k=args.top_k)
    if args.gallery == "all":
        index = np.arange(dataset.n)
    else:
        index = np.flatnonzero(dataset.mask(dataset.classes("test")))
    write_csv(out / "retrieval.csv", header, ["rank", "item_index", "score"],
              [(rank, int(index[r.item_index]), r.score) for rank, r in enumerate(results, 1)])
    return EXIT_OK


def cmd_synth(args) -> int:
    base = PRESETS[args.preset]
    overrides = {k: getattr(args, k) for k in ("n_classes", "samples_per_class", "p", "d",
                                               "attribute_density", "noise_sigma", "seed",
                                               "test_classes", "attribute_noise")
                 if getattr(args, k) is not None}
    spec = replace(base, **overrides)
    out = Path(_require(args.out, "--out"))
    save_dataset(synth_generate(spec), out,
                 header=f"zslmetric {__version__} synth {json.dumps(asdict(spec), sort_keys=True)}")
    log.info("synthetic dataset written to %s", out)
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------

def _common(p: argparse.ArgumentParser, *, training=True):
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--model", help="model file (default: OUT/model.txt)")
    p.add_argument("--out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--jobs", type=int, help="parallel restarts / grid points")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--no-metric", dest="no_metric", action="store_true", default=None,
                   help="fix the metric to the identity (Euclidean distance)")
    p.add_argument("--no-constraint", dest="no_constraint", action="store_true", default=None,
                   help="drop the attribute-prediction term (lambda = 0)")
    p.add_argument("-v", "--verbose", action="store_true")
    if not training:
        return
    g = p.add_argument_group("hyperparameters")
    g.add_argument("--lambda", dest="lambda", type=float)
    g.add_argument("--mu", type=float)
    g.add_argument("--m", type=int, help="metric embedding dimension")
    g.add_argument("--learning-rate", dest="learning_rate", type=float)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--restarts", type=int)
    g.add_argument("--momentum", type=float)
    g.add_argument("--standardize", type=_bool)
    g.add_argument("--finetune-epochs", dest="finetune_epochs", type=int)
    g.add_argument("--early-stopping-patience", dest="early_stopping_patience", type=int)
    g.add_argument("--positives-per-image", dest="positives_per_image", type=int)
    g.add_argument("--negatives-per-image", dest="negatives_per_image", type=int)
    g.add_argument("--min-negative-distance", dest="min_negative_distance", type=float)
    g.add_argument("--holdout-class-fraction", dest="holdout_class_fraction", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zslmetric", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on the train split")
    _common(p)

    p = sub.add_parser("gridsearch", help="search m, lambda, mu on held-out training classes")
    _common(p)
    p.add_argument("--m-fractions", dest="m_fractions", type=_FLOAT_LIST)
    p.add_argument("--lambdas", type=_FLOAT_LIST)
    p.add_argument("--mus", type=_FLOAT_LIST)
    p.add_argument("--folds", type=int, help="class holdouts averaged per grid point")

    p = sub.add_parser("eval", help="zero-shot accuracy, mAP and PR curves on the test split")
    _common(p, training=False)

    p = sub.add_parser("dimsweep", help="test accuracy as a function of m")
    _common(p)
    p.add_argument("--m-values", dest="m_values", type=_INT_LIST)

    p = sub.add_parser("fewshot", help="accuracy after fine-tuning on k images per test class")
    _common(p)
    p.add_argument("--k-values", dest="k_values", type=_INT_LIST)
    p.add_argument("--repeats", type=int)

    p = sub.add_parser("retrieve", help="rank gallery images against an attribute query")
    _common(p, training=False)
    p.add_argument("--query-file", dest="query_file", help="CSV file with one attribute row")
    p.add_argument("--query-class", dest="query_class", type=int,
                   help="use the mean attributes of this class as the query")
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--threshold", type=float, help="keep scores strictly below this (inf allowed)")
    p.add_argument("--gallery", choices=("test", "all"), default="test")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="synth-A")
    p.add_argument("--out", required=True)
    for name, typ in (("n_classes", int), ("samples_per_class", int), ("p", int), ("d", int),
                      ("attribute_density", float), ("noise_sigma", float), ("seed", int),
                      ("test_classes", int), ("attribute_noise", float)):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


COMMANDS = {"train": cmd_train, "gridsearch": cmd_gridsearch, "eval": cmd_eval,
            "dimsweep": cmd_dimsweep, "fewshot": cmd_fewshot}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return cmd_synth(args)
        cfg = resolve(args)
        if args.command == "retrieve":
            return cmd_retrieve(cfg, args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"zslmetric: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"zslmetric: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"zslmetric: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"zslmetric: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
