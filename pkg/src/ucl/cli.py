"""``ucl datagen|train|eval|analyze``.

Machine-readable results go to stdout as JSON; diagnostics go to stderr.
Exit codes: 0 ok, 2 config, 3 numeric abort, 4 shape/compatibility,
5 argument.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import analysis as an
from .alloc import keep_large_allocations
from .checkpoint import atomic_write, load_checkpoint, save_checkpoint
from .data import (
    LabeledBatch,
    SynthOracle,
    SynthSpec,
    class_distance_matrix,
    gen_hierarchical,
    load_table,
    train_test_split,
    write_table,
)
from .errors import CheckpointError, ConfigError, DimensionError, LabelError, NumericAbort, ParseError
from .loss import LossConfig
from .model import ModelConfig, ModelParams, embed, gates_for_pair
from .trainer import TrainConfig, init_state, train

log = logging.getLogger("ucl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_SHAPE, EXIT_ARGUMENT = 0, 2, 3, 4, 5
DISTANCE_SOURCES = ("oracle_hierarchy", "class_means")
SPACES = ("input", "encoder", "projector", "gated")


class ArgumentError(Exception):
    pass


@dataclass
class Paths:
    dataset: str = "data.csv"
    oracle: str | None = None
    checkpoint: str = "checkpoint"
    metrics: str = "metrics.jsonl"
    report: str | None = None


@dataclass
class RunConfig:
    data: SynthSpec
    model: dict  # explicit ModelConfig overrides; widths default to the dataset's
    train: TrainConfig
    paths: Paths
    class_distance_source: str = "oracle_hierarchy"
    base_dir: Path = Path(".")

    def path(self, name: str) -> Path | None:
        value = getattr(self.paths, name)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def oracle_path(self) -> Path:
        return self.path("oracle") or sidecar_path(self.path("dataset"))


def sidecar_path(dataset: Path) -> Path:
    return dataset.with_name(dataset.name + ".oracle.json")


def _strict(section: str, values, allowed) -> dict:
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    return dict(values)


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def parse_config(doc: dict, base_dir: Path = Path(".")) -> RunConfig:
    """Build a RunConfig from a JSON document, rejecting unknown keys."""
    doc = _strict("<root>", doc, {"data", "model", "train", "paths"})
    try:
        spec = SynthSpec(**_strict("data", doc.get("data", {}), _names(SynthSpec)))
        spec.layout()
        model = _strict("model", doc.get("model", {}), _names(ModelConfig))
        ModelConfig(**{**{"input_width": spec.input_width, "num_classes": max(spec.num_classes, 2)}, **model})
        train_doc = _strict("train", doc.get("train", {}), _names(TrainConfig) | {"class_distance_source"})
        source = train_doc.pop("class_distance_source", "oracle_hierarchy")
        if source not in DISTANCE_SOURCES:
            raise ConfigError(f"class_distance_source must be one of {DISTANCE_SOURCES}")
        if "loss" in train_doc:
            train_doc["loss"] = LossConfig(**_strict("train.loss", train_doc["loss"], _names(LossConfig)))
        tc = TrainConfig(**train_doc)
        paths = Paths(**_strict("paths", doc.get("paths", {}), _names(Paths)))
    except TypeError as e:
        raise ConfigError(f"bad config value: {e}") from None
    return RunConfig(spec, model, tc, paths, source, base_dir)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return parse_config(doc, path.parent)


def _json_safe(obj):
    """Replace non-finite floats by strings so the output stays strict JSON."""
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not math.isfinite(obj):
        return str(float(obj))
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, allow_nan=False) + "\n")


def _write_report(path: Path | None, obj: dict, rows: list[list] | None = None, header: list[str] | None = None) -> None:
    """JSON report, or CSV when the path ends in ``.csv`` and flat rows exist."""
    if path is None:
        return
    if path.suffix.lower() == ".csv" and rows is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        atomic_write(path, buf.getvalue().encode("utf-8"))
    else:
        atomic_write(path, (json.dumps(obj, allow_nan=False, indent=2) + "\n").encode("utf-8"))


# -- commands ------------------------------------------------------------------


def cmd_datagen(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out) if args.out else cfg.path("dataset")
    batch, oracle = gen_hierarchical(cfg.data)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(out, batch)
    oracle_out = sidecar_path(out) if args.out else cfg.oracle_path()
    atomic_write(oracle_out, (json.dumps(oracle.to_json()) + "\n").encode("utf-8"))
    _emit({"classes": batch.num_classes, "rows": len(batch), "dims": batch.x.shape[1], "dataset": str(out), "oracle": str(oracle_out)})
    return EXIT_OK


def _model_config(cfg: RunConfig, data: LabeledBatch) -> ModelConfig:
    mc = ModelConfig(**{**{"input_width": data.x.shape[1], "num_classes": max(data.num_classes, 2)}, **cfg.model})
    if mc.input_width != data.x.shape[1]:
        raise DimensionError(f"model input width {mc.input_width} != dataset width {data.x.shape[1]}")
    return mc


def _class_distances(cfg: RunConfig, data: LabeledBatch, num_classes: int) -> np.ndarray | None:
    if cfg.train.pair_strategy != "n_closest":
        return None
    if cfg.class_distance_source == "class_means":
        d = class_distance_matrix("class_means", features=data.x, labels=data.y)
    else:
        path = cfg.oracle_path()
        try:
            oracle = SynthOracle.from_json(json.loads(path.read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise ConfigError(f"n_closest with oracle distances needs {path}") from None
        d = class_distance_matrix("oracle_hierarchy", oracle=oracle)
    if d.shape[0] < num_classes:
        padded = np.full((num_classes, num_classes), np.inf)
        padded[: d.shape[0], : d.shape[0]] = d
        np.fill_diagonal(padded, 0.0)
        d = padded
    return d


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data = load_table(cfg.path("dataset"))
    mc = _model_config(cfg, data)
    dist = _class_distances(cfg, data, mc.num_classes)
    ckpt = cfg.path("checkpoint")
    state = init_state(cfg.train, data, mc, dist)
    try:
        train(cfg.train, data, state=state)
    except NumericAbort as e:
        ckpt.mkdir(parents=True, exist_ok=True)
        diag = ckpt / "diagnostics.json"
        atomic_write(diag, (json.dumps(_json_safe(e.diagnostics), indent=2) + "\n").encode("utf-8"))
        print(f"error: {e}; diagnostics written to {diag}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(state.params, ckpt)
    atomic_write(ckpt / "train_config.json", (json.dumps(cfg.train.to_dict(), indent=2) + "\n").encode("utf-8"))
    metrics = cfg.path("metrics")
    metrics.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(metrics, "".join(json.dumps(row, allow_nan=False) + "\n" for row in state.metrics).encode("utf-8"))
    final = state.metrics[-1]["loss"] if state.metrics else None
    print(f"trained {state.step} steps, final loss {final}", file=sys.stderr)
    _emit({"steps": state.step, "final_loss": final, "checkpoint": str(ckpt), "metrics": str(metrics)})
    return EXIT_OK


def _inputs(args) -> tuple[ModelParams, LabeledBatch, RunConfig | None]:
    cfg = load_config(args.config) if args.config else None
    ckpt = Path(args.checkpoint) if args.checkpoint else (cfg.path("checkpoint") if cfg else None)
    dataset = Path(args.dataset) if args.dataset else (cfg.path("dataset") if cfg else None)
    if ckpt is None or dataset is None:
        raise ArgumentError("need --checkpoint and --dataset (or --config naming them)")
    params = load_checkpoint(ckpt)
    data = load_table(dataset)
    if data.x.shape[1] != params.config.input_width:
        raise DimensionError(f"dataset width {data.x.shape[1]} != checkpoint input width {params.config.input_width}")
    if data.num_classes > params.config.num_classes:
        raise DimensionError(f"dataset has {data.num_classes} classes, checkpoint only {params.config.num_classes}")
    return params, data, cfg


def cmd_eval(args) -> int:
    params, data, _ = _inputs(args)
    if args.train_equals_test:
        train_set = test_set = data
    else:
        train_set, test_set = train_test_split(data, args.test_fraction, args.seed)
    if args.k > len(train_set):
        raise ArgumentError(f"k={args.k} exceeds {len(train_set)} training rows")
    acc = an.knn_eval(embed(params, train_set.x), train_set.y, embed(params, test_set.x), test_set.y, args.k)
    _emit({"knn_accuracy": acc, "k": args.k, "train_rows": len(train_set), "test_rows": len(test_set)})
    return EXIT_OK


def _parse_pair(text: str | None, data: LabeledBatch) -> tuple[int, int]:
    """External labels ``"a,b"`` to dense ids."""
    if text is None:
        raise ArgumentError("this analysis needs --pair a,b")
    try:
        a, b = (int(t) for t in text.split(","))
    except ValueError:
        raise ArgumentError(f"pair must look like 'a,b', got {text!r}") from None
    index = {c: i for i, c in enumerate(data.classes)}
    for c in (a, b):
        if c not in index:
            raise LabelError(f"unknown class {c} in pair {text!r}")
    return index[a], index[b]


def _features(params: ModelParams, data: LabeledBatch, space: str, pair) -> np.ndarray:
    if space == "input":
        return data.x
    if space == "gated":
        if pair is None:
            raise ArgumentError("gated space needs --pair")
        return embed(params, data.x, "projector") * gates_for_pair(params.filter, *pair)
    return embed(params, data.x, space)


def _subspace(args, feats: np.ndarray, data: LabeledBatch, pair, rng: np.random.Generator) -> list[int]:
    D = feats.shape[1]
    d = args.dims or math.ceil(D / 4)
    if args.subspace == "all":
        return list(range(D))
    if args.subspace == "lowest":
        return an.lowest_variance_subspace(feats[an.pair_rows(data.y, pair)], d)
    if args.subspace == "random":
        return sorted(int(j) for j in rng.choice(D, size=d, replace=False))
    if args.subspace == "oracle":
        if args.space != "input" or not args.oracle:
            raise ArgumentError("--subspace oracle needs --space input and --oracle")
        oracle = SynthOracle.from_json(json.loads(Path(args.oracle).read_text(encoding="utf-8")))
        dims = oracle.shared_dims(data.classes[pair[0]], data.classes[pair[1]])
        if not dims:
            raise ArgumentError(f"classes {data.classes[pair[0]]} and {data.classes[pair[1]]} share no oracle dims")
        return dims
    raise ArgumentError(f"unknown subspace {args.subspace!r}")


def cmd_analyze(args) -> int:
    params, data, cfg = _inputs(args)
    report_path = Path(args.out) if args.out else (cfg.path("report") if cfg else None)
    rng = np.random.default_rng(args.seed)
    needs_pair = args.which in ("subspace", "overlap", "saliency") or args.space == "gated"
    pair = _parse_pair(args.pair, data) if needs_pair else None
    rows = header = None

    if args.which == "subspace":
        feats = _features(params, data, args.space, pair)
        d = args.dims or math.ceil(feats.shape[1] / 4)
        dims = an.lowest_variance_subspace(feats[an.pair_rows(data.y, pair)], d)
        result = {"pair": [data.classes[i] for i in pair], "space": args.space, "dims": dims}
        rows, header = [[j] for j in dims], ["dim"]
    elif args.which == "overlap":
        feats = _features(params, data, args.space, pair)
        dims = _subspace(args, feats, data, pair, rng)
        intra, inter = an.similarity_distributions(feats, data.y, pair, dims)
        result = {
            "pair": [data.classes[i] for i in pair],
            "space": args.space,
            "subspace": dims,
            "overlap": an.distribution_overlap(intra, inter),
            "gap": intra.mean - inter.mean,
            "intra": intra.to_json(),
            "inter": inter.to_json(),
        }
        e = intra.bin_edges
        rows = [[e[i], e[i + 1], intra.counts[i], inter.counts[i]] for i in range(len(intra.counts))]
        header = ["bin_lo", "bin_hi", "intra", "inter"]
    elif args.which == "spectrum":
        rep = an.singular_spectrum(_features(params, data, args.space, pair))
        result = {"space": args.space, **rep.to_json()}
        rows = [[i, s, l] for i, (s, l) in enumerate(zip(rep.singular_values, rep.log_values))]
        header = ["index", "singular_value", "log_value"]
    elif args.which == "gates":
        rep = an.gate_report(params.filter, args.threshold)
        result = {"classes": data.classes[: rep.gate_matrix.shape[0]], **rep.to_json()}
        K = rep.gate_matrix.shape[0]
        sim = rep.pairwise_gate_similarity
        rows = [[a, b, sim[a, b]] for a in range(K) for b in range(a, K)]
        header = ["class_a", "class_b", "binary_gate_similarity"]
    elif args.which == "saliency":
        anchor = data.x[np.flatnonzero(data.y == pair[0])[0]]
        positive = data.x[np.flatnonzero(data.y == pair[1])[-1]]
        space = args.space if args.space in ("encoder", "projector", "gated") else "projector"
        gate = gates_for_pair(params.filter, *pair) if space == "gated" else None
        attr = an.clam_saliency(params, anchor, positive, args.views, rng, args.noise, args.dropout, space, gate)
        result = {"pair": [data.classes[i] for i in pair], "space": space, "attribution": attr.tolist()}
        rows, header = [[j, v] for j, v in enumerate(attr)], ["dim", "attribution"]
    elif args.which == "pseudo":
        K = args.clusters or data.num_classes
        km = an.kmeans_pseudo_labels(_features(params, data, args.space, pair), K, args.seed, args.max_iters)
        result = {"clusters": K, "inertia": km.inertia, "iterations": km.iterations, "labels": km.labels.tolist()}
        rows, header = [[i, int(c)] for i, c in enumerate(km.labels)], ["row", "cluster"]
    else:
        raise ArgumentError(f"unknown analysis {args.which!r}")

    _write_report(report_path, result, rows, header)
    _emit(result)
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_ARGUMENT)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ucl", description="Pair-gated contrastive learning lab.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("datagen", help="generate a synthetic hierarchical dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", help="CSV path (default: paths.dataset)")
    g.set_defaults(func=cmd_datagen)

    t = sub.add_parser("train", help="train and write checkpoint + metrics")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    def io_args(sp):
        sp.add_argument("--config")
        sp.add_argument("--checkpoint")
        sp.add_argument("--dataset")
        sp.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="KNN probe on encoder embeddings")
    io_args(e)
    e.add_argument("--probe", choices=["knn"], default="knn")
    e.add_argument("--k", type=int, default=10)
    e.add_argument("--test-fraction", type=float, default=0.2)
    e.add_argument("--train-equals-test", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="run one analysis and write a report")
    io_args(a)
    a.add_argument("--which", required=True, choices=["subspace", "overlap", "spectrum", "gates", "saliency", "pseudo"])
    a.add_argument("--pair", help="external class labels 'a,b'")
    a.add_argument("--space", choices=SPACES, default="encoder")
    a.add_argument("--dims", type=int, help="subspace size (default ceil(D/4))")
    a.add_argument("--subspace", choices=["lowest", "random", "oracle", "all"], default="lowest")
    a.add_argument("--oracle", help="oracle sidecar JSON for --subspace oracle")
    a.add_argument("--threshold", type=float, default=0.5)
    a.add_argument("--views", type=int, default=8)
    a.add_argument("--noise", type=float, default=0.1)
    a.add_argument("--dropout", type=float, default=0.0)
    a.add_argument("--clusters", type=int)
    a.add_argument("--max-iters", type=int, default=100)
    a.add_argument("--out", help="report path (.json or .csv)")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    keep_large_allocations()
    try:
        return args.func(args)
    except (ConfigError, ParseError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DimensionError, CheckpointError) as e:
        print(f"incompatible input: {e}", file=sys.stderr)
        return EXIT_SHAPE
    except (ArgumentError, LabelError) as e:
        print(f"argument error: {e}", file=sys.stderr)
        return EXIT_ARGUMENT


if __name__ == "__main__":
    sys.exit(main())
