"""Evaluation metrics for reconstructions, relations and generation.

Decoded trees are compared to references through a recursive assignment:
the two roots are paired, and for every paired internal node the
children are matched by minimum summed squared chamfer distance between
their box sample clouds (rectangular cases match the smaller side into
the larger).  On top of that matching the module reports

* ``e_p``   mean part geometry error (plain chamfer over matched pairs,
  root included; 0 when nothing is matched),
* ``e_h``   hierarchy error: unmatched reference plus unmatched decoded
  parts, relative to the reference part count (1 for an empty decode),
* ``e_r``   relation error: one minus the F1 score of the decoded edge
  sets against the reference edges transported through the matching
  (0 when neither side has edges),
* ``e_rc``  mean consistency residual of the decoded relations on the
  decoded geometry (0 when the decode carries no relations),
* ``e_gc``  mean consistency residual of the transported reference
  relations on the decoded geometry, plus the count of reference edges
  that could not be transported because an endpoint went unmatched.

Generation is scored by ``quality`` (how close each sample lies to the
corpus) and ``coverage`` (how close each corpus shape lies to a sample),
both plain chamfer distances between whole-shape leaf clouds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import geometry as geom
from .losses import consistency_edge_values, hungarian, view_from_free
from .model import FreeDecode, FreeNode, ShapeVAE
from .shapes import BoxParams, Part, RelType, ShapeTree

__all__ = [
    "MatchResult",
    "match_trees",
    "shape_metrics",
    "evaluate_reconstruction",
    "generation_metrics",
    "free_leaf_cloud",
    "write_metrics_csv",
    "METRIC_COLUMNS",
]

logger = logging.getLogger("structgen.metrics")

METRIC_COLUMNS = ["e_p", "e_h", "e_r", "e_rc", "e_gc", "gc_skipped", "n_ref", "n_dec", "n_matched"]


def _node_cloud(node: FreeNode, per_face: int) -> geom.Cloud:
    c = np.asarray(ad.value(node.box_c), dtype=np.float64).reshape(3)
    q = np.asarray(ad.value(node.box_q), dtype=np.float64).reshape(4)
    r = np.asarray(ad.value(node.box_r), dtype=np.float64).reshape(3)
    return geom.box_samples(BoxParams(c=c, q=q, r=r), per_face)


def free_leaf_cloud(node: FreeNode, per_face: int = geom.DEFAULT_PER_FACE) -> geom.Cloud:
    """Merged sample cloud of the decoded tree's leaf boxes."""
    leaves = [n for n in node.walk() if n.is_leaf]
    return geom.merge_clouds(_node_cloud(n, per_face) for n in leaves)


@dataclass
class MatchResult:
    """Outcome of the recursive reference/decode assignment."""

    pairs: List[Tuple[Part, FreeNode]] = field(default_factory=list)
    n_ref: int = 0
    n_dec: int = 0
    edge_tp: int = 0
    transported: Dict[Tuple[int, ...], List[Tuple[int, int, RelType]]] = field(
        default_factory=dict
    )
    n_transported: int = 0

    @property
    def n_matched(self) -> int:
        return len(self.pairs)


def _match_children(gt: Part, dec: FreeNode, per_face: int) -> List[Tuple[int, int]]:
    """Assign reference children to decoded children (box-cloud cost)."""
    n, m = len(gt.children), len(dec.children)
    if n == 0 or m == 0:
        return []
    gt_clouds = [geom.box_samples(ch.box, per_face) for ch in gt.children]
    dec_clouds = [_node_cloud(ch, per_face) for ch in dec.children]
    cost = np.empty((n, m))
    for i, gc in enumerate(gt_clouds):
        for j, dc in enumerate(dec_clouds):
            cost[i, j] = geom.chamfer(gc.points, gc.weights, dc.points, dc.weights)
    if n <= m:
        return hungarian(cost)
    flipped = hungarian(cost.T)
    return sorted((gi, dj) for dj, gi in flipped)


def match_trees(gt_root: Part, decode: FreeDecode, per_face: int) -> MatchResult:
    """Recursively match a reference tree against a free decode."""
    result = MatchResult(n_ref=gt_root.count_parts())
    if decode.root is None:
        return result
    result.n_dec = decode.root.count_parts()

    def visit(g: Part, d: FreeNode):
        result.pairs.append((g, d))
        assignment = _match_children(g, d, per_face)
        mapping = dict(assignment)
        moved = []
        for e in g.edges:
            if e.a in mapping and e.b in mapping:
                ia, ib = mapping[e.a], mapping[e.b]
                moved.append((min(ia, ib), max(ia, ib), e.rel))
        if moved:
            result.transported[d.slot_path] = moved
            result.n_transported += len(moved)
        pred = {(min(i, j), max(i, j), rel) for i, j, rel in d.edges}
        result.edge_tp += len(pred & set(moved))
        for gi, dj in assignment:
            visit(g.children[gi], d.children[dj])

    visit(gt_root, decode.root)
    return result


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else 0.0


def shape_metrics(gt: ShapeTree, decode: FreeDecode, per_face: int = geom.DEFAULT_PER_FACE) -> Dict[str, float]:
    """All per-shape metrics for one reference/decode pair."""
    match = match_trees(gt.root, decode, per_face)

    part_errors = []
    for g, d in match.pairs:
        gc = geom.box_samples(g.box, per_face)
        dc = _node_cloud(d, per_face)
        part_errors.append(
            geom.chamfer(gc.points, gc.weights, dc.points, dc.weights, squared=False)
        )
    e_p = _mean(part_errors)

    e_h = (match.n_ref - match.n_matched + match.n_dec - match.n_matched) / match.n_ref

    total_ref_edges = gt.root.count_edges()
    total_dec_edges = (
        sum(len(n.edges) for n in decode.root.walk()) if decode.root is not None else 0
    )
    tp = match.edge_tp
    fn = total_ref_edges - tp
    fp = total_dec_edges - tp
    if total_ref_edges == 0 and total_dec_edges == 0:
        e_r = 0.0
    else:
        e_r = 1.0 - 2.0 * tp / (2.0 * tp + fp + fn)

    if decode.root is None:
        e_rc = 0.0
        e_gc = 0.0
    else:
        dec_vals = consistency_edge_values(
            view_from_free(decode.root), per_face, squared=False
        )
        e_rc = _mean([float(ad.value(v)) for _, v in dec_vals])
        gt_vals = consistency_edge_values(
            view_from_free(decode.root, edges_override=match.transported),
            per_face,
            squared=False,
        )
        e_gc = _mean([float(ad.value(v)) for _, v in gt_vals])

    return {
        "e_p": e_p,
        "e_h": e_h,
        "e_r": e_r,
        "e_rc": e_rc,
        "e_gc": e_gc,
        "gc_skipped": total_ref_edges - match.n_transported,
        "n_ref": match.n_ref,
        "n_dec": match.n_dec,
        "n_matched": match.n_matched,
    }


def evaluate_reconstruction(
    model: ShapeVAE,
    shapes: Sequence[ShapeTree],
    per_face: int = geom.DEFAULT_PER_FACE,
    max_depth: Optional[int] = None,
) -> Tuple[List[Dict[str, float]], Dict[str, float]]:
    """Reconstruct every shape through the posterior mean and score it.

    Returns per-shape metric rows and their means (``gc_skipped`` and the
    count columns are summed/averaged as appropriate).
    """
    rows = []
    for shape in shapes:
        z = model.encode_latent(shape)
        decode = model.decode_free(z, max_depth=max_depth)
        rows.append(shape_metrics(shape, decode, per_face))
    means: Dict[str, float] = {}
    for key in METRIC_COLUMNS:
        means[key] = _mean([row[key] for row in rows])
    means["n_shapes"] = len(rows)
    means["n_empty"] = sum(1 for row in rows if row["n_dec"] == 0)
    return rows, means


def _cross_chamfer(a: List[geom.Cloud], b: List[geom.Cloud]) -> np.ndarray:
    out = np.empty((len(a), len(b)))
    for i, ca in enumerate(a):
        for j, cb in enumerate(b):
            out[i, j] = geom.chamfer(
                ca.points, ca.weights, cb.points, cb.weights, squared=False
            )
    return out


def generation_metrics(
    model: ShapeVAE,
    corpus: Sequence[ShapeTree],
    n_samples: int = 64,
    seed: int = 0,
    per_face: int = geom.DEFAULT_PER_FACE,
    max_depth: Optional[int] = None,
    max_retries: int = 20,
) -> Dict[str, float]:
    """Sample the prior and score the decodes against a corpus.

    ``quality`` is the mean distance from each sample to its nearest
    corpus shape; ``coverage`` the mean distance from each corpus shape
    to its nearest sample.  Empty decodes are resampled (counted in
    ``n_empty``); if every retry comes back empty the run fails.
    """
    if not corpus:
        raise ValueError("generation metrics need a non-empty corpus")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x5A3))))
    sample_clouds = []
    n_empty = 0
    for _ in range(n_samples):
        decode = None
        for _ in range(max_retries):
            z = rng.standard_normal((1, model.latent_dim))
            candidate = model.decode_free(z, max_depth=max_depth)
            if candidate.root is not None:
                decode = candidate
                break
            n_empty += 1
        if decode is None:
            raise RuntimeError(
                f"decoder produced {max_retries} empty samples in a row"
            )
        sample_clouds.append(free_leaf_cloud(decode.root, per_face))
    corpus_clouds = [geom.leaf_cloud(s.root, per_face) for s in corpus]
    d = _cross_chamfer(sample_clouds, corpus_clouds)
    return {
        "quality": float(d.min(axis=1).mean()),
        "coverage": float(d.min(axis=0).mean()),
        "n_samples": n_samples,
        "n_empty": n_empty,
    }


def write_metrics_csv(path, rows: List[Dict[str, float]], means: Optional[Dict[str, float]] = None) -> None:
    """Per-shape rows (indexed) followed by an optional ``mean`` row."""
    lines = [",".join(["shape"] + METRIC_COLUMNS)]
    for i, row in enumerate(rows):
        lines.append(",".join([str(i)] + [repr(float(row[k])) for k in METRIC_COLUMNS]))
    if means is not None:
        lines.append(
            ",".join(["mean"] + [repr(float(means[k])) for k in METRIC_COLUMNS])
        )
    Path(path).write_text("\n".join(lines) + "\n")
