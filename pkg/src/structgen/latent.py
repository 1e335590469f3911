"""Latent-space operations: sampling, interpolation, retrieval, editing.

Everything here works on the latent vectors of a trained model.  The
editing routine performs structure-preserving manipulation: it anchors
a decoded part by its decoder slot path and optimizes the latent vector
so that part reaches a target box while the decoded relations stay
geometrically consistent and the latent stays near its origin.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import geometry as geom
from .losses import consistency_terms, view_from_free
from .model import FreeDecode, FreeNode, ShapeVAE
from .shapes import BoxParams, ShapeTree

__all__ = [
    "sample_decodes",
    "reconstruct",
    "interpolate",
    "part_interpolate",
    "nearest_in_corpus",
    "EditResult",
    "edit_optimize",
    "write_trajectory_csv",
]

logger = logging.getLogger("structgen.latent")


def sample_decodes(
    model: ShapeVAE,
    count: int,
    seed: int = 0,
    max_depth: Optional[int] = None,
    max_retries: int = 20,
) -> Tuple[List[FreeDecode], int]:
    """Draw latents from the prior and decode them.

    Empty decodes are resampled up to ``max_retries`` times (their count
    is returned); a full run of empties raises.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x5A3))))
    decodes: List[FreeDecode] = []
    n_empty = 0
    for _ in range(count):
        chosen = None
        for _ in range(max_retries):
            z = rng.standard_normal((1, model.latent_dim))
            candidate = model.decode_free(z, max_depth=max_depth)
            if candidate.root is not None:
                chosen = candidate
                break
            n_empty += 1
        if chosen is None:
            raise RuntimeError(f"decoder produced {max_retries} empty samples in a row")
        decodes.append(chosen)
    return decodes, n_empty


def reconstruct(model: ShapeVAE, shape: ShapeTree, max_depth: Optional[int] = None) -> FreeDecode:
    """Decode the posterior mean of a shape."""
    return model.decode_free(model.encode_latent(shape), max_depth=max_depth)


def interpolate(
    model: ShapeVAE,
    shape_a: ShapeTree,
    shape_b: ShapeTree,
    steps: int = 5,
    max_depth: Optional[int] = None,
) -> List[Tuple[float, FreeDecode]]:
    """Decode evenly spaced points on the latent segment between two shapes.

    The endpoints use the embeddings themselves (no arithmetic), so step
    0 and step 1 reproduce the plain reconstructions exactly.
    """
    if steps < 2:
        raise ValueError("interpolation needs at least two steps")
    za = model.encode_latent(shape_a)
    zb = model.encode_latent(shape_b)
    out = []
    for t in np.linspace(0.0, 1.0, steps):
        t = float(t)
        if t == 0.0:
            z = za.copy()
        elif t == 1.0:
            z = zb.copy()
        else:
            z = (1.0 - t) * za + t * zb
        out.append((t, model.decode_free(z, max_depth=max_depth)))
    return out


def part_interpolate(
    model: ShapeVAE,
    shape_a: ShapeTree,
    shape_b: ShapeTree,
    path_a: Tuple[int, ...],
    path_b: Tuple[int, ...],
    steps: int = 5,
    max_depth: Optional[int] = None,
) -> List[Tuple[float, FreeDecode]]:
    """Interpolate one part's encoder feature while the rest of shape A
    stays fixed.

    The feature of the part at ``path_a`` in shape A is blended toward
    the feature of the part at ``path_b`` in shape B; the blended value
    re-enters A's encoding at that node and only the ancestors re-fold.
    """
    if steps < 2:
        raise ValueError("interpolation needs at least two steps")
    rec_a: Dict[Tuple[int, ...], object] = {}
    rec_b: Dict[Tuple[int, ...], object] = {}
    model.encode_shape(shape_a, record=rec_a)
    model.encode_shape(shape_b, record=rec_b)
    if tuple(path_a) not in rec_a:
        raise ValueError(f"path {path_a} does not resolve in the first shape")
    if tuple(path_b) not in rec_b:
        raise ValueError(f"path {path_b} does not resolve in the second shape")
    fa = ad.value(rec_a[tuple(path_a)])
    fb = ad.value(rec_b[tuple(path_b)])
    out = []
    for t in np.linspace(0.0, 1.0, steps):
        t = float(t)
        feat = fa if t == 0.0 else (fb if t == 1.0 else (1.0 - t) * fa + t * fb)
        root_feat = model.reencode_from(shape_a, {tuple(path_a): feat})
        mu, _ = model.bottleneck(root_feat)
        out.append((t, model.decode_free(ad.value(mu), max_depth=max_depth)))
    return out


def nearest_in_corpus(
    query_cloud: geom.Cloud,
    corpus: Sequence[ShapeTree],
    k: int = 1,
    per_face: int = geom.DEFAULT_PER_FACE,
) -> List[Tuple[int, float]]:
    """Indices and distances of the corpus shapes nearest to a cloud.

    Distance is the plain chamfer between whole-shape leaf clouds; ties
    break toward the lower index.
    """
    dists = []
    for i, shape in enumerate(corpus):
        cloud = geom.leaf_cloud(shape.root, per_face)
        d = geom.chamfer(
            query_cloud.points, query_cloud.weights, cloud.points, cloud.weights, squared=False
        )
        dists.append((float(d), i))
    dists.sort()
    return [(i, d) for d, i in dists[: max(k, 0)]]


# ---------------------------------------------------------------------------
# structure-preserving editing


@dataclass
class EditResult:
    z: np.ndarray
    decode: FreeDecode
    rows: List[Dict[str, float]] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)


def _node_at(decode: FreeDecode, slot_path: Tuple[int, ...]) -> Optional[FreeNode]:
    node = decode.root
    if node is None:
        return None
    for slot in slot_path:
        node = next((ch for ch in node.children if ch.slot_path[-1] == slot), None)
        if node is None:
            return None
    return node


def edit_optimize(
    model: ShapeVAE,
    z0: np.ndarray,
    slot_path: Tuple[int, ...],
    target_box: BoxParams,
    iters: int = 500,
    lr: float = 0.01,
    w_target: float = 1.0,
    w_consistency: float = 1.0,
    per_face: int = 9,
    max_depth: Optional[int] = None,
) -> EditResult:
    """Move one decoded part toward a target box by latent optimization.

    Minimizes ``|z - z0|^2 + w_target * chamfer^2(part box, target box)
    + w_consistency * (symmetry + adjacency residuals of the decode)``
    with Adam on ``z``.  The edited part is identified by the decoder
    slot path observed in the initial decode; if a step drops that part
    (or empties the decode) the step is taken without the target term
    and a warning is recorded.
    """
    z0 = np.asarray(ad.value(z0), dtype=np.float64).reshape(1, -1)
    slot_path = tuple(int(s) for s in slot_path)
    target = geom.box_samples(target_box, per_face)
    z = ad.Tensor(z0.copy(), requires_grad=True)
    adam = ad.AdamState()
    result = EditResult(z=z0.copy(), decode=model.decode_free(z0, max_depth=max_depth))
    if _node_at(result.decode, slot_path) is None:
        raise ValueError(f"slot path {slot_path} does not resolve in the initial decode")

    missing_iters = 0
    for it in range(iters):
        with ad.Tape() as tape:
            decode = model.decode_free(z, max_depth=max_depth)
            anchor = ad.sum_(ad.square(z - z0))
            node = _node_at(decode, slot_path)
            if node is not None:
                pa = geom.box_cloud(
                    ad.reshape(node.box_c, (1, 3)),
                    ad.reshape(node.box_q, (1, 4)),
                    ad.reshape(node.box_r, (1, 3)),
                    geom.unit_cube_samples(per_face).points,
                )
                wa = geom.box_weights(np.asarray(ad.value(node.box_r)).reshape(1, 3), per_face)
                box_term = geom.chamfer_batch(pa, wa, target.points[None], target.weights[None])
                box_term = ad.reshape(box_term, ())
            else:
                missing_iters += 1
                box_term = 0.0
            if decode.root is not None:
                sym, adj = consistency_terms(view_from_free(decode.root), per_face)
            else:
                sym, adj = 0.0, 0.0
            sc = sym + adj
            total = anchor + w_target * box_term + w_consistency * sc
            grads = tape.gradients(total, [z])
        ad.adam_step({"z": z}, {"z": grads[0]}, adam, lr=lr)
        result.rows.append(
            {
                "iter": it,
                "objective": float(ad.value(total)),
                "anchor": float(ad.value(anchor)),
                "target": float(ad.value(box_term)),
                "consistency": float(ad.value(sc)),
                "part_present": int(node is not None),
            }
        )

    if missing_iters:
        msg = f"edited part was absent from the decode for {missing_iters} of {iters} iterations"
        result.warnings.append(msg)
        logger.warning(msg)
    result.z = np.array(z.data)
    result.decode = model.decode_free(result.z, max_depth=max_depth)
    final_node = _node_at(result.decode, slot_path)
    if final_node is None:
        msg = "edited part is absent from the final decode"
        result.warnings.append(msg)
        logger.warning(msg)
    elif final_node.exist_p < 0.5:
        msg = f"edited part's existence confidence dropped to {final_node.exist_p:.3f}"
        result.warnings.append(msg)
        logger.warning(msg)
    return result


def write_trajectory_csv(path, rows: List[Dict[str, float]]) -> None:
    header = ["iter", "objective", "anchor", "target", "consistency", "part_present"]
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for key in header:
            val = row[key]
            cells.append(repr(float(val)) if isinstance(val, float) else str(val))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")
