"""Training loop: summed-batch Adam, schedules, checkpoints, CSV logs.

Runs are exactly reproducible: shape order and latent noise come from a
single seeded generator, batches sum per-shape losses with a fixed
accumulation order, and checkpoints store the generator state alongside
the parameters, so a resumed run continues the loss curve of an
uninterrupted one bit for bit.  Log files carry no timestamps and print
floats with ``repr`` so identical runs produce identical logs.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .losses import DEFAULT_BETA, LossBreakdown, PartMatcher, compute_shape_loss
from .model import ModelConfig, ShapeVAE
from .shapes import ShapeTree

__all__ = [
    "TrainConfig",
    "train",
    "evaluate_loss",
    "save_checkpoint",
    "load_checkpoint",
    "run_digest",
]

logger = logging.getLogger("structgen.training")

CHECKPOINT_NAME = "checkpoint.sgck"
META_NAME = "checkpoint_meta.json"
TRAIN_LOG_NAME = "train_log.csv"
VAL_LOG_NAME = "val_log.csv"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; everything that affects the run is here."""

    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    lr_halve_every: Optional[int] = 50  # epochs between halvings; None disables
    clip_norm: float = 5.0
    mode: str = "vae"  # "vae" (sampled latent) or "ae" (mean latent, no KL)
    beta: float = DEFAULT_BETA
    per_face: int = 9
    seed: int = 0
    no_normal_loss: bool = False
    no_consistency_loss: bool = False
    eval_every: int = 0  # validation cadence in epochs; 0 disables
    checkpoint_every: int = 0  # extra checkpoint cadence; final always written
    threads: int = 1

    def __post_init__(self):
        if self.mode not in ("vae", "ae"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.threads < 1:
            raise ValueError("epochs, batch_size and threads must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def current_lr(self, epoch: int) -> float:
        if self.lr_halve_every is None or self.lr_halve_every <= 0:
            return self.lr
        return self.lr * 0.5 ** (epoch // self.lr_halve_every)

    def trajectory_dict(self) -> dict:
        """Settings that determine the optimization path step by step.

        Stop/cadence knobs (epochs, eval_every, checkpoint_every) and
        thread count may differ between the writing and resuming run.
        """
        d = self.to_dict()
        for key in ("epochs", "eval_every", "checkpoint_every", "threads"):
            d.pop(key)
        return d


def run_digest(model_config: ModelConfig, train_config: TrainConfig) -> str:
    doc = {"model": model_config.to_dict(), "train": train_config.trajectory_dict()}
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    out_dir,
    model: ShapeVAE,
    adam: ad.AdamState,
    rng: np.random.Generator,
    train_config: TrainConfig,
    next_epoch: int,
) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = run_digest(model.config, train_config)
    named = dict(model.named_arrays())
    named.update(adam.tensors())
    ad.save_tensors(out_dir / CHECKPOINT_NAME, named, config_digest=digest)
    meta = {
        "format_version": 1,
        "digest": digest,
        "next_epoch": next_epoch,
        "adam_step": adam.step,
        "rng_state": rng.bit_generator.state,
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict(),
    }
    (out_dir / META_NAME).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_checkpoint(out_dir, model: ShapeVAE, train_config: Optional[TrainConfig] = None):
    """Restore parameters and optimizer/rng state written by ``save_checkpoint``.

    Returns ``(adam, rng, next_epoch)``.  If ``train_config`` is given the
    stored run digest must match, which guards against resuming with
    different settings.
    """
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / META_NAME).read_text())
    if train_config is not None:
        digest = run_digest(model.config, train_config)
        if digest != meta["digest"]:
            raise ValueError(
                "checkpoint was written by a run with different settings "
                f"(digest {meta['digest']} != {digest})"
            )
    named, _, _ = ad.load_tensors(out_dir / CHECKPOINT_NAME)
    params = {k: v for k, v in named.items() if not k.startswith("adam.")}
    model.load_arrays(params)
    adam = ad.AdamState.from_tensors(named, step=meta["adam_step"])
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = meta["rng_state"]
    return adam, rng, int(meta["next_epoch"])


# ---------------------------------------------------------------------------
# logging helpers


def _format_cell(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _append_csv(path: Path, header: List[str], row: List) -> None:
    line = ",".join(_format_cell(x) for x in row)
    if not path.exists():
        path.write_text(",".join(header) + "\n" + line + "\n")
    else:
        with open(path, "a") as f:
            f.write(line + "\n")


def _term_columns(model: ShapeVAE) -> List[str]:
    cols = list(LossBreakdown.columns())
    if model.config.no_edges:
        for name in ("xe", "sym", "adj"):
            cols.remove(name)
    return cols


# ---------------------------------------------------------------------------
# loss evaluation


def _shape_loss_grads(model, shape, matcher, config: TrainConfig, eps):
    params = list(model.params.values())
    with ad.Tape() as tape:
        total, breakdown = compute_shape_loss(
            model,
            shape,
            matcher,
            mode=config.mode,
            beta=config.beta,
            eps=eps,
            no_normal_loss=config.no_normal_loss,
            no_consistency_loss=config.no_consistency_loss,
        )
        grads = tape.gradients(total, params)
    return breakdown, grads


def evaluate_loss(
    model: ShapeVAE,
    shapes: Sequence[ShapeTree],
    config: TrainConfig,
    matcher: Optional[PartMatcher] = None,
) -> Dict[str, float]:
    """Mean per-shape loss terms with the deterministic (mean) latent."""
    if matcher is None:
        matcher = PartMatcher(config.per_face)
    sums: Dict[str, float] = {}
    for shape in shapes:
        _, breakdown = compute_shape_loss(
            model,
            shape,
            matcher,
            mode=config.mode,
            beta=config.beta,
            eps=None,
            no_normal_loss=config.no_normal_loss,
            no_consistency_loss=config.no_consistency_loss,
        )
        for key, val in breakdown.as_dict().items():
            sums[key] = sums.get(key, 0.0) + val
    n = max(len(shapes), 1)
    return {k: v / n for k, v in sums.items()}


# ---------------------------------------------------------------------------
# the loop


def train(
    model: ShapeVAE,
    shapes: Sequence[ShapeTree],
    config: TrainConfig,
    out_dir=None,
    val_shapes: Optional[Sequence[ShapeTree]] = None,
    resume: bool = False,
    progress=None,
) -> List[Dict[str, float]]:
    """Optimize ``model`` on ``shapes``; returns one stats row per epoch.

    A batch's loss is the sum of its per-shape losses; gradients are
    accumulated per shape in batch order and applied in one Adam step
    after global-norm clipping.  With ``resume=True`` the run continues
    from the checkpoint in ``out_dir``.  ``progress`` is an optional
    ``fn(row_dict)`` called after every epoch.
    """
    if not shapes:
        raise ValueError("cannot train on an empty dataset")
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    if resume:
        if out_path is None:
            raise ValueError("resume requires an output directory")
        adam, rng, start_epoch = load_checkpoint(out_path, model, config)
    else:
        adam = ad.AdamState()
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((config.seed, 0xBA7C4)))
        )
        start_epoch = 0

    matcher = PartMatcher(config.per_face)
    params = list(model.params.values())
    names = model.parameter_names()
    term_cols = _term_columns(model)
    header = ["epoch", "step", "lr"] + term_cols + ["grad_norm"]
    latent_dim = model.params["vae_mu.w"].data.shape[1]
    history: List[Dict[str, float]] = []
    pool = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None

    try:
        for epoch in range(start_epoch, config.epochs):
            lr = config.current_lr(epoch)
            order = rng.permutation(len(shapes))
            term_sums: Dict[str, float] = {k: 0.0 for k in term_cols}
            norm_sum = 0.0
            n_batches = 0
            for lo in range(0, len(order), config.batch_size):
                batch = order[lo : lo + config.batch_size]
                jobs = []
                for idx in batch:
                    eps = (
                        rng.standard_normal((1, latent_dim))
                        if config.mode == "vae"
                        else None
                    )
                    jobs.append((shapes[int(idx)], eps))
                if pool is not None:
                    results = list(
                        pool.map(
                            lambda job: _shape_loss_grads(model, job[0], matcher, config, job[1]),
                            jobs,
                        )
                    )
                else:
                    results = [
                        _shape_loss_grads(model, shape, matcher, config, eps)
                        for shape, eps in jobs
                    ]
                acc = {name: np.zeros_like(p.data) for name, p in zip(names, params)}
                for breakdown, grads in results:
                    for key, val in breakdown.as_dict().items():
                        if key in term_sums:
                            term_sums[key] += val
                            if not np.isfinite(val):
                                raise RuntimeError(
                                    f"loss term {key!r} became non-finite "
                                    f"({val}) at optimizer step {adam.step + 1}"
                                )
                    for name, g in zip(names, grads):
                        acc[name] += g
                norm_sum += ad.clip_global_norm(acc, config.clip_norm)
                n_batches += 1
                try:
                    ad.adam_step(model.params, acc, adam, lr=lr)
                except FloatingPointError as exc:
                    raise RuntimeError(
                        f"{exc} at optimizer step {adam.step + 1}"
                    ) from exc

            row: Dict[str, float] = {
                "epoch": epoch,
                "step": adam.step,
                "lr": lr,
            }
            for key in term_cols:
                row[key] = term_sums[key] / len(shapes)
            row["grad_norm"] = norm_sum / max(n_batches, 1)
            history.append(row)
            if out_path is not None:
                _append_csv(
                    out_path / TRAIN_LOG_NAME, header, [row[h] for h in header]
                )
            logger.info(
                "epoch %d step %d total %.6f", epoch, adam.step, row["total"]
            )
            if progress is not None:
                progress(row)

            if (
                val_shapes
                and config.eval_every > 0
                and (epoch + 1) % config.eval_every == 0
            ):
                val = evaluate_loss(model, val_shapes, config, matcher)
                val_row = {"epoch": epoch, "step": adam.step}
                val_row.update({k: val[k] for k in term_cols})
                if out_path is not None:
                    _append_csv(
                        out_path / VAL_LOG_NAME,
                        ["epoch", "step"] + term_cols,
                        [val_row[h] for h in ["epoch", "step"] + term_cols],
                    )
            if (
                out_path is not None
                and config.checkpoint_every > 0
                and (epoch + 1) % config.checkpoint_every == 0
            ):
                save_checkpoint(out_path, model, adam, rng, config, epoch + 1)
    finally:
        if pool is not None:
            pool.shutdown()

    if out_path is not None:
        save_checkpoint(out_path, model, adam, rng, config, config.epochs)
    return history
