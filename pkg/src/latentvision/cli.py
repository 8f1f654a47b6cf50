"""``latentvision`` command-line interface.

Exit codes: 0 success, 2 usage/configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import classifier as clf
from .codec import compress, find_codec_checkpoint, load_codec, save_codec
from .data import LatentStore, ingest, load_image, pad_to_multiple, precompute_latents
from .errors import ConfigError, DatasetError, LatentVisionError
from .report import plot_accuracy, plot_losses, write_report
from .train import TrainConfig, evaluate, pretrain_codec, train_frozen, train_joint, write_run_outputs

log = logging.getLogger("latentvision")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

RUNSPEC_DEFAULTS = {
    "command": "train",
    "seed": 0,
    "output_dir": None,
    "data": {
        "root": None,
        "manifest": None,
        "train_split": "train",
        "val_split": "val",
        "train_store": None,
        "val_store": None,
        "codec_weights": None,
        "init_classifier": None,
    },
    "train": {
        "mode": None,
        "quality_index": None,
        "epochs": 10,
        "batch_size": 32,
        "learning_rate": None,
        "rd_weight": None,
        "joint_loss_weights": [1.0, 0.0, 0.0],
        "grad_clip": None,
    },
    "classifier": {
        "width_divisor": 1,
        "log_sigma": False,
        "interp": "bilinear",
    },
}


class UsageError(Exception):
    pass


def _unknown_keys(spec: dict, schema: dict, prefix: str = "") -> list[str]:
    bad = []
    for k, v in spec.items():
        if k not in schema:
            bad.append(prefix + k)
        elif isinstance(schema[k], dict):
            if not isinstance(v, dict):
                bad.append(prefix + k)
            else:
                bad += _unknown_keys(v, schema[k], prefix + k + ".")
    return bad


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_runspec(path, overrides: list[str] | None = None) -> dict:
    """Load a YAML run spec, apply ``section.key=value`` overrides, fill defaults."""
    try:
        spec = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read run spec {path}: {exc}") from exc
    if not isinstance(spec, dict):
        raise UsageError("run spec must be a mapping")
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = spec
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    bad = _unknown_keys(spec, RUNSPEC_DEFAULTS)
    if bad:
        raise UsageError("unknown run spec keys: " + ", ".join(sorted(bad)))
    spec = _merge(RUNSPEC_DEFAULTS, spec)
    if spec["command"] != "train":
        raise UsageError(f"run spec command must be 'train', got {spec['command']!r}")
    missing = [k for k in ("mode", "quality_index") if spec["train"][k] is None]
    if spec["output_dir"] is None:
        missing.append("output_dir")
    if missing:
        raise UsageError("missing run spec keys: " + ", ".join(missing))
    return spec


def train_config_from_spec(spec: dict) -> TrainConfig:
    t, c = spec["train"], spec["classifier"]
    return TrainConfig(
        mode=t["mode"], quality_index=int(t["quality_index"]), epochs=int(t["epochs"]),
        batch_size=int(t["batch_size"]), learning_rate=t["learning_rate"], seed=int(spec["seed"]),
        rd_weight=t["rd_weight"], joint_loss_weights=tuple(t["joint_loss_weights"]),
        width_divisor=int(c["width_divisor"]), log_sigma=bool(c["log_sigma"]), interp=c["interp"],
        grad_clip=t["grad_clip"],
    )


def _data_root(value) -> Path:
    root = value or os.environ.get("LATENTVISION_DATA")
    if not root:
        raise UsageError("no dataset root given and LATENTVISION_DATA is unset")
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"dataset root {root} does not exist")
    return root


def _load_weights(path, quality):
    if path is None:
        raise UsageError("codec weights are required")
    try:
        find_codec_checkpoint(path, quality)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    return load_codec(path, quality)


def _image_array(index, split):
    entries = index.split(split)
    if not entries:
        raise UsageError(f"split '{split}' is empty")
    images = [pad_to_multiple(load_image(index.root / e.path)) for e in entries]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise UsageError(f"images in split '{split}' have differing sizes {sorted(shapes)}")
    return np.stack(images), np.array([e.class_id for e in entries], dtype=np.int64)


# commands ---------------------------------------------------------------

def cmd_compress(args) -> int:
    codec = _load_weights(args.weights, args.quality)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, errors = [], []
    for f in args.images:
        f = Path(f)
        try:
            image = pad_to_multiple(load_image(f))
        except Exception as exc:
            errors.append((str(f), str(exc)))
            log.warning("cannot read %s: %s", f, exc)
            continue
        _, _, data = compress(image, codec.config, codec)
        (out / (f.stem + ".lvc")).write_bytes(data)
        h, w = image.shape[1:]
        rows.append((f.name, h, w, len(data), f"{8 * len(data) / (h * w):.6f}"))
    with (out / "bpp.csv").open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("file", "H", "W", "bytes", "bpp"))
        wr.writerows(rows)
    if errors:
        with (out / "errors.csv").open("w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(("file", "error"))
            wr.writerows(errors)
    for r in rows:
        print(f"{r[0]}\t{r[3]} bytes\t{r[4]} bpp")
    return EXIT_OK if rows else EXIT_RUNTIME


def cmd_latents(args) -> int:
    root = _data_root(args.root)
    codec = _load_weights(args.weights, args.quality)
    try:
        index = ingest(root, args.manifest, seed=args.seed)
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc
    store = precompute_latents(index, args.split, codec)
    path = store.write(args.out)
    print(f"{len(store)} records -> {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    spec = resolve_runspec(args.config, args.set)
    if args.out:
        spec["output_dir"] = args.out
    try:
        config = train_config_from_spec(spec)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(spec["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(spec, sort_keys=True))
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("latentvision").addHandler(handler)
    try:
        metrics = _run_training(spec, config, out)
        log.info("wall time %.1f s", metrics.wall_time)
    finally:
        logging.getLogger("latentvision").removeHandler(handler)
        handler.close()
    write_run_outputs(metrics, config, out)
    plot_losses(out / "metrics.csv", out / "loss.png")
    if config.mode != "codec":
        plot_accuracy(out / "metrics.csv", out / "top1.png")
    if config.mode == "codec":
        bpp = metrics.epochs[-1].mean_bpp if metrics.epochs else float("nan")
        print(f"val bpp {bpp:.3f} -> {out}")
    else:
        print(f"best val top-1 {metrics.best_top1:.2f} -> {out}")
    return EXIT_OK


def _run_training(spec, config: TrainConfig, out: Path):
    d = spec["data"]
    if config.mode == "codec":
        index = ingest(_data_root(d["root"]), d["manifest"], seed=config.seed)
        images, _ = _image_array(index, d["train_split"])
        val = _image_array(index, d["val_split"])[0] if index.split(d["val_split"]) else None
        codec, metrics = pretrain_codec(config, images, val, weights_id=out.name or "codec")
        save_codec(codec, out)
        return metrics
    if config.mode == "frozen":
        codec = None
        if d["train_store"] and d["val_store"]:
            train_store, val_store = LatentStore.read(d["train_store"]), LatentStore.read(d["val_store"])
        else:
            codec = _load_weights(d["codec_weights"], config.quality_index)
            index = ingest(_data_root(d["root"]), d["manifest"], seed=config.seed)
            train_store = precompute_latents(index, d["train_split"], codec)
            val_store = precompute_latents(index, d["val_split"], codec)
        if d["codec_weights"] and codec is None:
            codec = _load_weights(d["codec_weights"], config.quality_index)
        model, metrics = train_frozen(config, train_store, val_store, codec, out)
        return metrics
    codec = _load_weights(d["codec_weights"], config.quality_index)
    index = ingest(_data_root(d["root"]), d["manifest"], seed=config.seed)
    images, labels = _image_array(index, d["train_split"])
    val_images, val_labels = _image_array(index, d["val_split"])
    model = clf.load_classifier(d["init_classifier"])[0] if d["init_classifier"] else None
    codec, model, metrics = train_joint(config, images, labels, val_images, val_labels, codec,
                                        model, index.num_classes, out)
    return metrics


def cmd_eval(args) -> int:
    model, extra = clf.load_classifier(args.checkpoint)
    quality = args.quality or extra.get("quality_index")
    if args.store:
        store = LatentStore.read(args.store)
        if quality is not None and store.quality_index != quality:
            raise UsageError(f"store quality {store.quality_index} != requested {quality}")
        if store.latent_channels != model.config.latent_channels:
            raise UsageError(
                f"store has {store.latent_channels} latent channels, checkpoint expects "
                f"{model.config.latent_channels}"
            )
        result = evaluate(model, store)
    else:
        if quality is None:
            raise UsageError("--quality is required when evaluating from images")
        codec = _load_weights(args.weights, quality)
        if codec.config.latent_channels != model.config.latent_channels:
            raise UsageError("codec and checkpoint latent channels differ")
        index = ingest(_data_root(args.root), args.manifest, seed=args.seed)
        images, labels = _image_array(index, args.split)
        result = evaluate(model, (images, labels), codec)
    row = {"top1": result["top1"], "top5": result["top5"], "mean_bpp": result["mean_bpp"],
           "loss": result["loss"]}
    print("\t".join(row))
    print("\t".join(f"{v:.2f}" if k != "loss" else f"{v:.4f}" for k, v in row.items()))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(list(row) + [f"class_{c}" for c in result["per_class_accuracy"]])
        wr.writerow([f"{v:.6f}" for v in row.values()]
                    + [f"{v:.6f}" for v in result["per_class_accuracy"].values()])
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        paths = write_report(args.runs, args.out)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    print(paths["markdown"].read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentvision", description="Image classification on learned-compression latents.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compress", help="encode images to .lvc bitstreams")
    c.add_argument("images", nargs="+")
    c.add_argument("--quality", type=int, required=True, choices=(1, 4, 8))
    c.add_argument("--weights", required=True, help="codec checkpoint file or directory")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compress)

    l = sub.add_parser("latents", help="precompute a latent store for one split")
    l.add_argument("--root", help="dataset root (default: $LATENTVISION_DATA)")
    l.add_argument("--manifest")
    l.add_argument("--split", default="train", choices=("train", "val", "test"))
    l.add_argument("--quality", type=int, required=True, choices=(1, 4, 8))
    l.add_argument("--weights", required=True)
    l.add_argument("--seed", type=int, default=0)
    l.add_argument("--out", required=True)
    l.set_defaults(func=cmd_latents)

    t = sub.add_parser("train", help="run a training job from a YAML run spec")
    t.add_argument("config")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.add_argument("--out", help="override output_dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a classifier checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--store")
    e.add_argument("--root")
    e.add_argument("--manifest")
    e.add_argument("--split", default="val", choices=("train", "val", "test"))
    e.add_argument("--weights")
    e.add_argument("--quality", type=int, choices=(1, 4, 8))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="eval.csv")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="compare runs across quality settings and modes")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", default="report")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"latentvision: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DatasetError) as exc:
        print(f"latentvision: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LatentVisionError as exc:
        print(f"latentvision: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"latentvision: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
