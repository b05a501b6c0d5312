"""``tissueseg`` command line: synth, train, eval, infer, graph-dump, gradcheck.

Every subcommand accepts ``--config FILE`` (JSON with ``model``, ``train``,
``synth``, ``data_dir`` and ``out_dir`` sections) followed by overrides of
the form ``--section.key value``.  Overrides win over the file.  The resolved
configuration is written as ``config.json`` into each output directory.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .imageio import FormatError, read_image, write_image, write_label
from .losses import confusion_matrix, metrics_from_confusion
from .serialization import CheckpointError
from .tensor import NonFiniteError, no_grad
from .trm import boundary_ratio

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# Fixed overlay palette, one maximally distinct color per class index.
PALETTE = np.array(
    [
        [230, 25, 75],    # red
        [60, 180, 75],    # green
        [255, 225, 25],   # yellow
        [0, 130, 200],    # blue
        [245, 130, 48],   # orange
        [145, 30, 180],   # purple
        [70, 240, 240],   # cyan
        [240, 50, 230],   # magenta
        [210, 245, 60],   # lime
        [250, 190, 212],  # pink
        [0, 128, 128],    # teal
        [170, 110, 40],   # brown
    ],
    dtype=np.uint8,
)
OVERLAY_ALPHA = 0.5

log = logging.getLogger("tissueseg")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- configuration -------------------------------------------------------------------

def resolve_config(config_path: str | None, overrides: list[str]) -> RunConfig:
    """Load the config file (or defaults) and apply ``--section.key value`` overrides."""
    cfg = RunConfig.load(config_path) if config_path else RunConfig()
    for key, value in parse_overrides(overrides):
        cfg.override(key, value)
    return cfg.validate()


def parse_overrides(tokens: list[str]) -> list[tuple[str, str]]:
    pairs = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"unexpected argument '{tok}'")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"override '{tok}' needs a value")
            value = tokens[i + 1]
            i += 2
        pairs.append((key.replace("-", "_"), value))
    return pairs


def echo_config(out_dir: Path, cfg: RunConfig, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = cfg.to_dict()
    if extra:
        doc["command"] = extra
    (out_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _checkpoint_config(meta: dict, args) -> RunConfig:
    """Run config echoed in a checkpoint, with the model section taken from the checkpoint itself."""
    raw = dict(meta.get("run_config") or {})
    raw["model"] = meta["model_config"]
    cfg = RunConfig.from_dict(raw)
    for key, value in parse_overrides(args.overrides):
        if key.startswith("model."):
            raise UsageError("model settings come from the checkpoint and cannot be overridden")
        cfg.override(key, value)
    if getattr(args, "data_dir", None):
        cfg.data_dir = args.data_dir
    return cfg


# -- commands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import dataset_checksum, write_dataset

    cfg = resolve_config(args.config, args.overrides)
    root = Path(args.data_dir or cfg.data_dir)
    cfg.data_dir = str(root)
    try:
        manifest = write_dataset(root, cfg.synth, force=args.force)
    except FileExistsError as err:
        raise DataError(f"{err} (use --force)") from None
    echo_config(root, cfg, {"name": "synth"})
    counts = {s: len(ids) for s, ids in manifest["splits"].items()}
    print(json.dumps({"data_dir": str(root), "counts": counts, "checksum": dataset_checksum(root)}, sort_keys=True))
    return EXIT_OK


def _load_dataset(root: Path, split: str, num_classes: int):
    from .synth import load_split, read_manifest
    from .training import Dataset

    try:
        manifest = read_manifest(root)
    except (FileNotFoundError, ValueError) as err:
        raise DataError(str(err)) from None
    if manifest["num_classes"] != num_classes:
        raise DataError(f"dataset at {root} has K={manifest['num_classes']} but the model expects K={num_classes}")
    if split not in manifest["splits"]:
        raise DataError(f"dataset at {root} has no split '{split}'")
    try:
        images, labels = load_split(root, split)
    except (OSError, FormatError) as err:
        raise DataError(str(err)) from None
    return Dataset(images, labels)


def cmd_train(args) -> int:
    from .model import SegmentationModel
    from .training import TrainingAborted, train

    cfg = resolve_config(args.config, args.overrides)
    if args.data_dir:
        cfg.data_dir = args.data_dir
    if args.out_dir:
        cfg.out_dir = args.out_dir
    out = Path(cfg.out_dir)
    K = cfg.model.num_classes
    train_data = _load_dataset(Path(cfg.data_dir), "train", K)
    val_data = _load_dataset(Path(cfg.data_dir), "val", K)
    echo_config(out, cfg, {"name": "train", "resume": bool(args.resume)})
    model = SegmentationModel(cfg.model, seed=cfg.train.seed)
    try:
        res = train(model, train_data, val_data, cfg.train, out_dir=out, run_config=cfg, resume=args.resume)
    except TrainingAborted as err:
        print(f"error: training aborted: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as err:
        raise DataError(str(err)) from None
    best = res.history[res.best_epoch - 1] if res.best_epoch else None
    summary = {
        "epochs": len(res.history),
        "best_epoch": res.best_epoch,
        "best_val_loss": res.best_val_loss,
        "best_val_miou": best.val_miou if best else None,
        "best_val_dice": best.val_dice if best else None,
        "stopped_early": res.stopped_early,
        "checkpoint": str(res.checkpoint) if res.checkpoint else None,
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _load_checkpoint_model(path: str):
    from .training import load_model

    try:
        model, meta, _ = load_model(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except (CheckpointError, KeyError, TypeError) as err:
        raise DataError(f"cannot load checkpoint {path}: {err}") from None
    return model.eval(), meta


def evaluation_report(predict, images: np.ndarray, labels: np.ndarray, num_classes: int, batch_size: int = 4) -> dict:
    """Flat metric document for ``predict`` (a batch -> label map function) over a dataset."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for s in range(0, len(images), batch_size):
        cm += confusion_matrix(predict(images[s:s + batch_size]), labels[s:s + batch_size], num_classes)
    report = metrics_from_confusion(cm).to_dict()
    report["num_images"] = int(len(images))
    return report


def cmd_eval(args) -> int:
    model, meta = _load_checkpoint_model(args.checkpoint)
    cfg = _checkpoint_config(meta, args)
    data = _load_dataset(Path(cfg.data_dir), args.split, model.config.num_classes)
    out = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).resolve().parent
    try:
        report = evaluation_report(model.predict, data.images, data.labels, model.config.num_classes,
                                   cfg.train.batch_size)
    except ValueError as err:
        raise DataError(str(err)) from None
    report["split"] = args.split
    report["checkpoint"] = str(args.checkpoint)
    echo_config(out, cfg, {"name": "eval", "split": args.split, "checkpoint": str(args.checkpoint)})
    text = json.dumps(report, indent=2, sort_keys=True)
    (out / f"eval_{args.split}.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


def _read_input_image(path: str) -> np.ndarray:
    try:
        image = read_image(path)
    except FileNotFoundError:
        raise DataError(f"image not found: {path}") from None
    except FormatError as err:
        raise DataError(f"{path}: {err}") from None
    H, W = image.shape[1:]
    if H % 32 or W % 32:
        raise DataError(f"{path}: image size {H}x{W} is not divisible by 32")
    return image


def overlay(image: np.ndarray, label: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend palette colors over a 3 x H x W image in [0, 1]."""
    colors = PALETTE[label % len(PALETTE)].transpose(2, 0, 1).astype(np.float64) / 255.0
    return (1.0 - alpha) * image + alpha * colors


def cmd_infer(args) -> int:
    model, meta = _load_checkpoint_model(args.checkpoint)
    image = _read_input_image(args.image)
    label = model.predict(image[None])[0]
    out = Path(args.out_dir)
    stem = Path(args.image).stem
    echo_config(out, _checkpoint_config(meta, args), {"name": "infer", "image": args.image, "checkpoint": args.checkpoint})
    write_label(out / f"{stem}_label.pgm", label)
    write_image(out / f"{stem}_overlay.ppm", overlay(image, label))
    print(json.dumps({"label": str(out / f"{stem}_label.pgm"), "overlay": str(out / f"{stem}_overlay.ppm"),
                      "classes": np.bincount(label.ravel(), minlength=model.config.num_classes).tolist()}))
    return EXIT_OK


def graph_document(model, image: np.ndarray, class_names: list[str] | None = None) -> dict:
    """Relation graph of one image: nodes, directed edges and the settings that shaped them."""
    with no_grad():
        out = model(image[None])
    g = out.graphs[0]
    K = model.config.num_classes
    names = class_names or [f"class_{c}" for c in range(K)]
    refined = g.refined.data if g.refined is not None else None
    nodes = []
    for c in range(K):
        nodes.append({
            "class_id": c,
            "class_name": names[c],
            "present": bool(g.masks.present[c]),
            "mask_area_px": int(g.masks.masks[c].sum()),
            "embedding": [float(v) for v in g.node_features.data[c]],
            "refined_embedding": None if refined is None else [float(v) for v in refined[c]],
        })
    edges = []
    for k, (i, j) in enumerate(g.edges):
        edge = {
            "i": int(i),
            "j": int(j),
            "boundary_ratio": boundary_ratio(g.masks, int(i), int(j)),
            "feature_norm": float(np.linalg.norm(g.edge_features.data[k])),
        }
        if g.edge_weights is not None:
            edge["weight"] = float(g.edge_weights.data[k])
        edges.append(edge)
    c = model.config
    return {
        "image_size": list(image.shape[1:]),
        "graph_resolution": list(g.masks.masks.shape[1:]),
        "nodes": nodes,
        "edges": edges,
        "config": {
            "tau": c.tau,
            "gnn_variant": c.gnn_variant,
            "gnn_layers": c.gnn_layers,
            "node_dim": c.node_dim,
            "use_edge_weights": c.use_edge_weights,
            "boundary_aware_edges": c.boundary_aware_edges,
        },
    }


def cmd_graph_dump(args) -> int:
    model, meta = _load_checkpoint_model(args.checkpoint)
    image = _read_input_image(args.image)
    doc = graph_document(model, image)
    out = Path(args.out_dir)
    echo_config(out, _checkpoint_config(meta, args), {"name": "graph-dump", "image": args.image,
                                                      "checkpoint": args.checkpoint})
    path = out / f"{Path(args.image).stem}_graph.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    print(json.dumps({"graph": str(path), "nodes_present": sum(n["present"] for n in doc["nodes"]),
                      "edges": len(doc["edges"])}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_scope

    if args.overrides:
        raise UsageError("gradcheck takes no config overrides")
    try:
        report = run_scope(args.scope)
    except KeyError as err:
        raise UsageError(str(err.args[0]) if err.args else f"unknown scope '{args.scope}'") from None
    print(report.table())
    return EXIT_OK if report.passed else EXIT_NUMERIC


# -- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tissueseg",
        description="Tissue-graph-refined segmentation: data, training, evaluation and inspection.",
        epilog="Config overrides: append --section.key value (e.g. --model.num_classes 3 --train.lr 1e-3).",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--data-dir")
    p.add_argument("--force", action="store_true", help="overwrite a dataset built from another config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model; writes best.ckpt, last.ckpt and train_log.csv")
    p.add_argument("--config")
    p.add_argument("--data-dir")
    p.add_argument("--out-dir")
    p.add_argument("--resume", action="store_true", help="continue from last.ckpt in the output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on one split")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--data-dir")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    for name, func, help_text in (
        ("infer", cmd_infer, "label map and color overlay for one PPM image"),
        ("graph-dump", cmd_graph_dump, "JSON dump of the relation graph built for one PPM image"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("checkpoint")
        p.add_argument("image")
        p.add_argument("--out-dir", default=".")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", default="op", help="op | module | full-model-tiny | op:<name>")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    args.overrides = rest
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
