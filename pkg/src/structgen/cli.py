"""Command-line interface.

Subcommands cover the whole workflow: corpus generation, training with
resume, evaluation, reconstruction, sampling, interpolation (whole-shape
and single-part), retrieval, latent editing and OBJ export.  All
commands are seeded and write timestamp-free outputs, so a rerun with
identical arguments produces identical files.

Logging goes to stderr; the level comes from ``--log`` or the
``STRUCTGEN_LOG`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import __version__
from . import autodiff as ad
from . import data as data_mod
from . import geometry as geom
from . import latent as latent_ops
from . import metrics as metrics_mod
from .losses import DEFAULT_BETA
from .model import ModelConfig, ShapeVAE, to_shape_tree
from .shapes import (
    BoxParams,
    ShapeError,
    ShapeTree,
    get_vocabulary,
    load_shape,
    save_shape,
    to_obj,
)
from .training import TrainConfig, train

__all__ = ["main", "build_parser"]

logger = logging.getLogger("structgen.cli")

MODEL_DOC_NAME = "model.json"
SPLITS_NAME = "splits.json"
RUN_DOC_NAME = "run.json"


# ---------------------------------------------------------------------------
# shared helpers


def _setup_logging(level_flag: Optional[str]) -> None:
    level_name = level_flag or os.environ.get("STRUCTGEN_LOG", "WARNING")
    level = getattr(logging, level_name.upper(), None)
    if not isinstance(level, int):
        raise ValueError(f"unknown log level {level_name!r}")
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def _write_run_doc(out_dir: Path, command: str, argv: List[str]) -> None:
    doc = {"version": __version__, "command": command, "argv": argv}
    (out_dir / RUN_DOC_NAME).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _print_json(doc: dict) -> None:
    print(json.dumps(doc, indent=1, sort_keys=True))


def _save_model_doc(out_dir: Path, category: str, model_seed: int, config: ModelConfig) -> None:
    doc = {
        "category": category,
        "model_seed": model_seed,
        "model_config": config.to_dict(),
    }
    (out_dir / MODEL_DOC_NAME).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _load_model(model_dir) -> Tuple[ShapeVAE, str]:
    model_dir = Path(model_dir)
    doc = json.loads((model_dir / MODEL_DOC_NAME).read_text())
    config = ModelConfig.from_dict(doc["model_config"])
    model = ShapeVAE(config, seed=int(doc.get("model_seed", 0)))
    named, _, _ = ad.load_tensors(model_dir / "checkpoint.sgck")
    model.load_arrays({k: v for k, v in named.items() if not k.startswith("adam.")})
    return model, doc["category"]


def _load_split(data_dir, split: str) -> Tuple[List[ShapeTree], List[str]]:
    data_dir = Path(data_dir)
    result = data_mod.ingest_directory(data_dir)
    if result.skipped:
        logger.info("ingest skipped %d file(s)", len(result.skipped))
    if split == "all":
        return result.shapes, result.names
    splits_path = data_dir / SPLITS_NAME
    if not splits_path.exists():
        raise FileNotFoundError(
            f"{splits_path} not found; use --split all or generate the corpus "
            "with the gen-data command"
        )
    wanted = json.loads(splits_path.read_text())
    if split not in wanted:
        raise ValueError(f"split {split!r} not present in {splits_path}")
    keep = set(wanted[split])
    shapes = [s for s, n in zip(result.shapes, result.names) if n in keep]
    names = [n for n in result.names if n in keep]
    if not shapes:
        raise ValueError(f"split {split!r} selected no shapes")
    return shapes, names


def _parse_path(text: str) -> Tuple[int, ...]:
    text = text.strip()
    if not text or text == ".":
        return ()
    for sep in (",", "."):
        if sep in text:
            return tuple(int(p) for p in text.split(sep))
    return (int(text),)


def _parse_vector(text: str, n: int) -> np.ndarray:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != n:
        raise ValueError(f"expected {n} comma-separated numbers, got {text!r}")
    return np.array(parts)


def _decode_to_file(decode, category: str, path: Path, obj: bool) -> None:
    vocab = get_vocabulary(category)
    shape = to_shape_tree(decode, vocab)
    save_shape(shape, path)
    if obj:
        path.with_suffix(".obj").write_text(to_obj(shape))


# ---------------------------------------------------------------------------
# subcommand implementations


def _cmd_gen_data(args, argv) -> int:
    if args.category == "chair":
        config = data_mod.chair_config(per_face=args.per_face)
    elif args.category == "table":
        config = data_mod.table_config(per_face=args.per_face)
    else:
        raise ValueError(f"no generator for category {args.category!r}")
    out = Path(args.out)
    shapes = data_mod.generate_dataset(config, args.count, seed=args.seed, out_dir=out)
    train_idx, val_idx, test_idx = data_mod.split_indices(len(shapes), seed=args.seed)
    splits = {
        "train": [f"shape_{i:05d}.json" for i in sorted(train_idx)],
        "val": [f"shape_{i:05d}.json" for i in sorted(val_idx)],
        "test": [f"shape_{i:05d}.json" for i in sorted(test_idx)],
    }
    (out / SPLITS_NAME).write_text(json.dumps(splits, indent=1, sort_keys=True) + "\n")
    _write_run_doc(out, "gen-data", argv)
    _print_json(
        {
            "category": args.category,
            "count": len(shapes),
            "out": str(out),
            "splits": {k: len(v) for k, v in splits.items()},
        }
    )
    return 0


_TRAIN_KEYS = {
    "epochs": 200,
    "batch_size": 32,
    "lr": 1e-3,
    "lr_halve_every": 50,
    "clip_norm": 5.0,
    "mode": "vae",
    "beta": DEFAULT_BETA,
    "per_face": 9,
    "seed": 0,
    "eval_every": 0,
    "checkpoint_every": 0,
    "threads": 1,
}
_MODEL_KEYS = {
    "feature_dim": 256,
    "hidden_dim": 256,
    "mp_rounds": 2,
    "decode_depth_cap": 4,
    "model_seed": 0,
}
_ABLATIONS = ("no_edges", "no_decoder_mp", "no_normal_loss", "no_consistency_loss")


def _cmd_train(args, argv) -> int:
    file_cfg = {}
    if args.config:
        file_cfg = json.loads(Path(args.config).read_text())

    def pick(key, default):
        val = getattr(args, key)
        if val is None:
            return file_cfg.get(key, default)
        return val

    shapes, _ = _load_split(args.data, args.split)
    category = shapes[0].category
    vocab = get_vocabulary(category)
    ablations = set(args.ablate or []) | {k for k in _ABLATIONS if file_cfg.get(k)}

    model_config = ModelConfig(
        label_count=len(vocab.labels),
        feature_dim=int(pick("feature_dim", _MODEL_KEYS["feature_dim"])),
        hidden_dim=int(pick("hidden_dim", _MODEL_KEYS["hidden_dim"])),
        mp_rounds=int(pick("mp_rounds", _MODEL_KEYS["mp_rounds"])),
        decode_depth_cap=int(pick("decode_depth_cap", _MODEL_KEYS["decode_depth_cap"])),
        no_edges="no_edges" in ablations,
        no_decoder_mp="no_decoder_mp" in ablations,
    )
    halve = pick("lr_halve_every", _TRAIN_KEYS["lr_halve_every"])
    train_config = TrainConfig(
        epochs=int(pick("epochs", _TRAIN_KEYS["epochs"])),
        batch_size=int(pick("batch_size", _TRAIN_KEYS["batch_size"])),
        lr=float(pick("lr", _TRAIN_KEYS["lr"])),
        lr_halve_every=None if halve in (None, "none", 0) else int(halve),
        clip_norm=float(pick("clip_norm", _TRAIN_KEYS["clip_norm"])),
        mode=str(pick("mode", _TRAIN_KEYS["mode"])),
        beta=float(pick("beta", _TRAIN_KEYS["beta"])),
        per_face=int(pick("per_face", _TRAIN_KEYS["per_face"])),
        seed=int(pick("seed", _TRAIN_KEYS["seed"])),
        no_normal_loss="no_normal_loss" in ablations,
        no_consistency_loss="no_consistency_loss" in ablations,
        eval_every=int(pick("eval_every", _TRAIN_KEYS["eval_every"])),
        checkpoint_every=int(pick("checkpoint_every", _TRAIN_KEYS["checkpoint_every"])),
        threads=int(pick("threads", _TRAIN_KEYS["threads"])),
    )
    model_seed = int(pick("model_seed", _MODEL_KEYS["model_seed"]))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = ShapeVAE(model_config, seed=model_seed)
    _save_model_doc(out, category, model_seed, model_config)
    _write_run_doc(out, "train", argv)

    val_shapes = None
    if train_config.eval_every > 0:
        try:
            val_shapes, _ = _load_split(args.data, "val")
        except (FileNotFoundError, ValueError):
            logger.warning("no validation split available; skipping eval rows")

    history = train(
        model,
        shapes,
        train_config,
        out_dir=out,
        val_shapes=val_shapes,
        resume=args.resume,
    )
    last = history[-1] if history else {}
    _print_json(
        {
            "out": str(out),
            "epochs_run": len(history),
            "final_total": last.get("total"),
            "final_step": last.get("step"),
        }
    )
    return 0


def _cmd_eval(args, argv) -> int:
    model, category = _load_model(args.model)
    shapes, _ = _load_split(args.data, args.split)
    for s in shapes:
        if s.category != category:
            raise ValueError(
                f"dataset category {s.category!r} does not match model category {category!r}"
            )
    rows, means = metrics_mod.evaluate_reconstruction(
        model, shapes, per_face=args.per_face, max_depth=args.max_depth
    )
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        metrics_mod.write_metrics_csv(out, rows, means)
    doc = {k: means[k] for k in sorted(means)}
    if args.generation > 0:
        gen = metrics_mod.generation_metrics(
            model,
            shapes,
            n_samples=args.generation,
            seed=args.seed,
            per_face=args.per_face,
            max_depth=args.max_depth,
        )
        doc.update({f"gen_{k}": v for k, v in gen.items()})
    _print_json(doc)
    return 0


def _iter_input_shapes(args) -> List[Tuple[str, ShapeTree]]:
    out = []
    if args.shape:
        for f in args.shape:
            out.append((Path(f).stem, load_shape(f)))
    if args.data:
        shapes, names = _load_split(args.data, args.split)
        out.extend((Path(n).stem, s) for n, s in zip(names, shapes))
    if not out:
        raise ValueError("give --shape and/or --data to select input shapes")
    return out


def _cmd_reconstruct(args, argv) -> int:
    model, category = _load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for stem, shape in _iter_input_shapes(args):
        decode = latent_ops.reconstruct(model, shape, max_depth=args.max_depth)
        path = out / f"{stem}_recon.json"
        _decode_to_file(decode, category, path, args.obj)
        written.append(path.name)
    _write_run_doc(out, "reconstruct", argv)
    _print_json({"out": str(out), "count": len(written)})
    return 0


def _cmd_sample(args, argv) -> int:
    model, category = _load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    decodes, n_empty = latent_ops.sample_decodes(
        model, args.count, seed=args.seed, max_depth=args.max_depth
    )
    for i, decode in enumerate(decodes):
        _decode_to_file(decode, category, out / f"sample_{i:05d}.json", args.obj)
    _write_run_doc(out, "sample", argv)
    _print_json({"out": str(out), "count": len(decodes), "resampled_empties": n_empty})
    return 0


def _cmd_interp(args, argv) -> int:
    model, category = _load_model(args.model)
    shape_a = load_shape(args.shape_a)
    shape_b = load_shape(args.shape_b)
    steps = latent_ops.interpolate(
        model, shape_a, shape_b, steps=args.steps, max_depth=args.max_depth
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (t, decode) in enumerate(steps):
        _decode_to_file(decode, category, out / f"interp_{i:03d}.json", args.obj)
    _write_run_doc(out, "interp", argv)
    _print_json({"out": str(out), "steps": [t for t, _ in steps]})
    return 0


def _cmd_part_interp(args, argv) -> int:
    model, category = _load_model(args.model)
    shape_a = load_shape(args.shape_a)
    shape_b = load_shape(args.shape_b)
    steps = latent_ops.part_interpolate(
        model,
        shape_a,
        shape_b,
        _parse_path(args.path_a),
        _parse_path(args.path_b),
        steps=args.steps,
        max_depth=args.max_depth,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (t, decode) in enumerate(steps):
        _decode_to_file(decode, category, out / f"part_interp_{i:03d}.json", args.obj)
    _write_run_doc(out, "part-interp", argv)
    _print_json({"out": str(out), "steps": [t for t, _ in steps]})
    return 0


def _cmd_nn(args, argv) -> int:
    model, category = _load_model(args.model)
    corpus, names = _load_split(args.data, args.split)
    decodes, _ = latent_ops.sample_decodes(
        model, args.count, seed=args.seed, max_depth=args.max_depth
    )
    lines = ["sample,rank,neighbor,distance"]
    for i, decode in enumerate(decodes):
        cloud = metrics_mod.free_leaf_cloud(decode.root, args.per_face)
        for rank, (idx, dist) in enumerate(
            latent_ops.nearest_in_corpus(cloud, corpus, k=args.k, per_face=args.per_face)
        ):
            lines.append(f"{i},{rank},{names[idx]},{dist!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return 0


def _cmd_edit(args, argv) -> int:
    model, category = _load_model(args.model)
    shape = load_shape(args.shape)
    z0 = model.encode_latent(shape)
    slot_path = _parse_path(args.path)
    initial = model.decode_free(z0, max_depth=args.max_depth)
    node = latent_ops._node_at(initial, slot_path)
    if node is None:
        raise ValueError(f"path {args.path!r} does not resolve in the initial decode")
    c = _parse_vector(args.target_c, 3)
    r = (
        _parse_vector(args.target_r, 3)
        if args.target_r
        else np.asarray(ad.value(node.box_r)).reshape(3)
    )
    q = _parse_vector(args.target_q, 4) if args.target_q else np.array([1.0, 0, 0, 0])
    target = BoxParams(c=c, q=q, r=r)
    result = latent_ops.edit_optimize(
        model,
        z0,
        slot_path,
        target,
        iters=args.iters,
        lr=args.lr,
        per_face=args.per_face,
        max_depth=args.max_depth,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _decode_to_file(result.decode, category, out / "edited.json", args.obj)
    latent_ops.write_trajectory_csv(out / "trajectory.csv", result.rows)
    np.save(out / "z_edited.npy", result.z)
    _write_run_doc(out, "edit", argv)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    _print_json(
        {
            "out": str(out),
            "iters": len(result.rows),
            "objective": result.rows[-1]["objective"] if result.rows else None,
            "warnings": len(result.warnings),
        }
    )
    return 0


def _cmd_export(args, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for stem, shape in _iter_input_shapes(args):
        (out / f"{stem}.obj").write_text(to_obj(shape))
        written += 1
    _print_json({"out": str(out), "count": written})
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="structgen",
        description="Hierarchical part-graph shape VAE: data, training, evaluation, latent tools.",
    )
    parser.add_argument("--log", help="log level (overrides STRUCTGEN_LOG)")
    parser.add_argument("--version", action="version", version=f"structgen {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural shape corpus")
    p.add_argument("--category", default="chair", choices=["chair", "table"])
    p.add_argument("--count", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-face", type=int, default=geom.DEFAULT_PER_FACE, dest="per_face")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a corpus directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--config", help="JSON file with defaults for the flags below")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--ablate", action="append", choices=list(_ABLATIONS))
    for key in _TRAIN_KEYS:
        flag = "--" + key.replace("_", "-")
        if key == "mode":
            p.add_argument(flag, choices=["vae", "ae"])
        elif key in ("lr", "clip_norm", "beta"):
            p.add_argument(flag, type=float, dest=key)
        else:
            p.add_argument(flag, type=int, dest=key)
    for key in _MODEL_KEYS:
        p.add_argument("--" + key.replace("_", "-"), type=int, dest=key)
    p.set_defaults(fn=_cmd_train)

    def add_common(p, data=False, model=True):
        if model:
            p.add_argument("--model", required=True)
        if data:
            p.add_argument("--data", required=True)
            p.add_argument("--split", default="all")
        p.add_argument("--per-face", type=int, default=geom.DEFAULT_PER_FACE, dest="per_face")
        p.add_argument("--max-depth", type=int, default=None, dest="max_depth")
        p.add_argument("--obj", action="store_true", help="also write OBJ files")

    p = sub.add_parser("eval", help="reconstruction and generation metrics")
    add_common(p, data=True)
    p.add_argument("--out", help="per-shape metrics CSV")
    p.add_argument("--generation", type=int, default=0, help="also score N prior samples")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("reconstruct", help="encode and decode shapes")
    add_common(p)
    p.add_argument("--shape", action="append", help="shape JSON file (repeatable)")
    p.add_argument("--data", help="corpus directory")
    p.add_argument("--split", default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_reconstruct)

    p = sub.add_parser("sample", help="decode prior samples")
    add_common(p)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_sample)

    p = sub.add_parser("interp", help="latent interpolation between two shapes")
    add_common(p)
    p.add_argument("--shape-a", required=True, dest="shape_a")
    p.add_argument("--shape-b", required=True, dest="shape_b")
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_interp)

    p = sub.add_parser("part-interp", help="interpolate one part's feature")
    add_common(p)
    p.add_argument("--shape-a", required=True, dest="shape_a")
    p.add_argument("--shape-b", required=True, dest="shape_b")
    p.add_argument("--path-a", required=True, dest="path_a", help="child-index path, e.g. 0.2")
    p.add_argument("--path-b", required=True, dest="path_b")
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_part_interp)

    p = sub.add_parser("nn", help="nearest corpus shapes for prior samples")
    add_common(p, data=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_nn)

    p = sub.add_parser("edit", help="structure-preserving latent edit")
    add_common(p)
    p.add_argument("--shape", required=True)
    p.add_argument("--path", required=True, help="decoder slot path of the part to move")
    p.add_argument("--target-c", required=True, dest="target_c", help="x,y,z")
    p.add_argument("--target-r", dest="target_r", help="x,y,z full extents")
    p.add_argument("--target-q", dest="target_q", help="w,x,y,z quaternion")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_edit)

    p = sub.add_parser("export", help="write OBJ meshes for shapes")
    p.add_argument("--shape", action="append")
    p.add_argument("--data")
    p.add_argument("--split", default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_export)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging(args.log)
        return args.fn(args, argv)
    except (
        ShapeError,
        ValueError,
        TypeError,
        RuntimeError,
        FloatingPointError,
        FileNotFoundError,
        NotADirectoryError,
        IsADirectoryError,
        PermissionError,
        json.JSONDecodeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
