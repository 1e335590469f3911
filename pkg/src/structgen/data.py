"""Procedural shape corpora, dataset IO, splits and ingest.

Two furniture families are provided (chairs and tables).  Both are
built so their relation annotations are *exact*:

* every emitted adjacency edge corresponds to a face-to-face contact
  placed on a sample-grid point of the touching faces, so the measured
  gap is at floating-point noise level;
* symmetric part groups are constructed by transforming a prototype
  box (axis-aligned mirrors, exact-constant ring rotations), so the
  symmetry residual of every reflective/rotational/translational edge
  is at noise level as well.

Adjacency edges are not hand-annotated: after the geometry is placed,
sibling pairs are scanned with :func:`structgen.geometry.detect_adjacency`
and the detections become the edges, which keeps annotation and
detector in agreement by construction.  All shapes are normalized to
the unit sphere before being returned or written.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import geometry as geom
from .shapes import (
    MAX_CHILDREN,
    BoxParams,
    Part,
    RelEdge,
    RelType,
    ShapeError,
    ShapeTree,
    Vocabulary,
    get_vocabulary,
    load_shape,
    normalize_unit_sphere,
    register_vocabulary,
    serialize,
    validate,
)

__all__ = [
    "CHAIR_VOCABULARY",
    "TABLE_VOCABULARY",
    "FamilyConfig",
    "chair_config",
    "table_config",
    "generate_shape",
    "generate_dataset",
    "dataset_stats",
    "split_indices",
    "IngestResult",
    "ingest_directory",
    "write_manifest",
    "load_manifest",
]

logger = logging.getLogger("structgen.data")

_ID_Q = np.array([1.0, 0.0, 0.0, 0.0])

CHAIR_VOCABULARY = Vocabulary(
    category="chair",
    labels=(
        "chair",
        "back",
        "back_frame",
        "back_bar",
        "seat",
        "base",
        "leg",
        "pedestal",
        "foot",
        "arm_group",
        "arm",
        "stretcher",
    ),
    legal_children={
        "chair": ("back", "seat", "base", "arm_group"),
        "back": ("back_frame", "back_bar"),
        "base": ("leg", "pedestal", "foot", "stretcher"),
        "arm_group": ("arm",),
    },
)

TABLE_VOCABULARY = Vocabulary(
    category="table",
    labels=(
        "table",
        "top",
        "base",
        "leg",
        "pedestal",
        "foot",
        "stretcher",
        "shelf",
        "apron",
    ),
    legal_children={
        "table": ("top", "base", "pedestal", "foot"),
        "base": ("leg", "stretcher", "shelf", "apron"),
    },
)

register_vocabulary(CHAIR_VOCABULARY)
register_vocabulary(TABLE_VOCABULARY)

# (cos, sin) of the ring angles and of their half angles (for the part
# quaternions). 90-degree entries are exact integers; 120-degree entries
# are exact in cos and correctly rounded in sin.
_SQRT3_2 = math.sqrt(3.0) / 2.0
_SQRT2_2 = math.sqrt(2.0) / 2.0
_RING4 = ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))
_RING4_HALF = ((1.0, 0.0), (_SQRT2_2, _SQRT2_2), (0.0, 1.0), (-_SQRT2_2, _SQRT2_2))
_RING3 = ((1.0, 0.0), (-0.5, _SQRT3_2), (-0.5, -_SQRT3_2))
_RING3_HALF = ((1.0, 0.0), (0.5, _SQRT3_2), (-0.5, _SQRT3_2))


@dataclass(frozen=True)
class FamilyConfig:
    """Knobs of one procedural family.

    ``per_face`` sets the sample grid used for contact placement,
    adjacency detection and the axis-aligned boxes of internal nodes;
    it must be an odd perfect square root (k x k with k odd >= 3) so
    face centers are sample points.  Style probabilities are drawn per
    shape from the shape's own seeded generator.
    """

    category: str
    per_face: int = geom.DEFAULT_PER_FACE
    leg_styles: Tuple[Tuple[str, float], ...] = (
        ("four", 0.55),
        ("three", 0.20),
        ("pedestal", 0.25),
    )
    p_back: float = 0.9
    max_bars: int = 5
    p_arms: float = 0.35
    p_stretchers: float = 0.45
    p_aprons: float = 0.5
    p_shelf: float = 0.5


def chair_config(**overrides) -> FamilyConfig:
    return replace(FamilyConfig(category="chair"), **overrides)


def table_config(**overrides) -> FamilyConfig:
    cfg = FamilyConfig(
        category="table",
        leg_styles=(("four", 0.6), ("pedestal", 0.4)),
        p_stretchers=0.55,
    )
    return replace(cfg, **overrides)


def _grid(per_face: int) -> np.ndarray:
    """Transverse face-grid offsets, identical to the sampling grid."""
    k = math.isqrt(per_face)
    if k * k != per_face:
        raise ValueError(f"per_face must be a perfect square, got {per_face}")
    if k < 3 or k % 2 == 0:
        raise ValueError("contact placement needs an odd grid of at least 3x3")
    return (np.arange(k) + 0.5) / k - 0.5


def _rot_y(cs: Tuple[float, float], v: Sequence[float]) -> Tuple[float, float, float]:
    c, s = cs
    return (c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2])


def _leaf(label: int, c, r, q=_ID_Q) -> Part:
    return Part(label=label, box=BoxParams(c=np.asarray(c, dtype=np.float64), q=q, r=np.asarray(r, dtype=np.float64)))


def _subtree_leaf_points(part: Part, per_face: int) -> np.ndarray:
    pts = [geom.box_samples(p.box, per_face).points for p in part.walk() if p.is_leaf]
    return np.concatenate(pts)


def _aabb_box(children: Sequence[Part], per_face: int) -> BoxParams:
    pts = np.concatenate([_subtree_leaf_points(ch, per_face) for ch in children])
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    return BoxParams(c=(lo + hi) * 0.5, q=_ID_Q, r=np.maximum(hi - lo, 1e-9))


def _detected_adjacency(children: Sequence[Part], per_face: int) -> List[RelEdge]:
    edges = []
    for i in range(len(children)):
        for j in range(i + 1, len(children)):
            if geom.detect_adjacency(children[i].box, children[j].box, per_face):
                edges.append(RelEdge(i, j, RelType.ADJACENCY))
    return edges


def _internal(label: int, children: Sequence[Part], per_face: int, sym_edges: Sequence[RelEdge]) -> Part:
    edges = list(sym_edges) + _detected_adjacency(children, per_face)
    return Part(label=label, box=_aabb_box(children, per_face), children=list(children), edges=edges)


def _symmetric_columns(k: int, n: int) -> List[int]:
    """n grid-column indices, mirror-symmetric about the center column."""
    n = min(n, k)
    cols: List[int] = []
    if n % 2 == 1:
        cols.append((k - 1) // 2)
    lo, hi = 0, k - 1
    while len(cols) < n:
        cols.extend((lo, hi))
        lo += 1
        hi -= 1
    return sorted(cols)


def _choose(rng: np.random.Generator, options: Tuple[Tuple[str, float], ...]) -> str:
    names = [n for n, _ in options]
    probs = np.array([p for _, p in options], dtype=np.float64)
    probs = probs / probs.sum()
    return names[int(rng.choice(len(names), p=probs))]


# ---------------------------------------------------------------------------
# chair family


def _chair_back(rng, fc: FamilyConfig, L: Dict[str, int], g, rsx, rsz, seat_top) -> Part:
    k = len(g)
    zg = g[k - 1] * rsz
    t_back = rng.uniform(0.03, 0.05)
    height = rng.uniform(0.40, 0.55)
    n_bars = int(rng.integers(0, min(fc.max_bars, k) + 1))
    if n_bars == 0:
        width = rsx * rng.uniform(0.86, 0.96)
        panel = _leaf(L["back_frame"], (0.0, seat_top + 0.5 * height, zg), (width, height, t_back))
        return _internal(L["back"], [panel], fc.per_face, [])
    t_rail = rng.uniform(0.05, 0.09)
    rail_y = seat_top + height - 0.5 * t_rail
    rail = _leaf(L["back_frame"], (0.0, rail_y, zg), (rsx, t_rail, t_back))
    bar_len = (rail_y - 0.5 * t_rail) - seat_top
    bar_w = rng.uniform(0.02, 0.035)
    cols = _symmetric_columns(k, n_bars)
    bars = [
        _leaf(L["back_bar"], (g[c] * rsx, seat_top + 0.5 * bar_len, zg), (bar_w, bar_len, t_back))
        for c in cols
    ]
    sym = [RelEdge(1 + i, 2 + i, RelType.TRANSLATIONAL) for i in range(len(bars) - 1)]
    return _internal(L["back"], [rail] + bars, fc.per_face, sym)


def _four_leg_base(rng, fc, L, g, half_x, half_z, underside_y, label_rail: Optional[str]) -> Part:
    """Four mirrored legs under a horizontal panel, optionally with a
    mirrored pair of connecting rails (chair stretchers / table aprons
    and stretchers attach the same way: rail ends on leg face centers)."""
    k = len(g)
    leg_w = rng.uniform(0.04, 0.06)
    leg_len = rng.uniform(0.35, 0.5)
    xs = (g[0] * half_x, g[k - 1] * half_x)
    zs = (g[0] * half_z, g[k - 1] * half_z)
    leg_y = underside_y - 0.5 * leg_len
    legs = [
        _leaf(L["leg"], (x, leg_y, z), (leg_w, leg_len, leg_w))
        for z in zs
        for x in xs
    ]
    # order: (left,front) (right,front) (left,rear) (right,rear)
    sym = [
        RelEdge(0, 1, RelType.REFLECTIVE),
        RelEdge(2, 3, RelType.REFLECTIVE),
        RelEdge(0, 2, RelType.REFLECTIVE),
        RelEdge(1, 3, RelType.REFLECTIVE),
    ]
    children = list(legs)
    if label_rail is not None and rng.random() < fc.p_stretchers:
        rail_w = rng.uniform(0.025, 0.04)
        rail_h = rng.uniform(0.03, 0.05)
        z_lo = zs[0] + 0.5 * leg_w
        z_hi = zs[1] - 0.5 * leg_w
        length = z_hi - z_lo
        c_z = 0.5 * (z_lo + z_hi)
        for x in xs:
            children.append(_leaf(L[label_rail], (x, leg_y, c_z), (rail_w, rail_h, length)))
        sym.append(RelEdge(4, 5, RelType.REFLECTIVE))
    return _internal(L["base"], children, fc.per_face, sym)


def _ring_parts(label: int, proto_c, proto_r, ring, ring_half, axis_xz=(0.0, 0.0)) -> List[Part]:
    """Rotated copies of a prototype about a vertical axis.

    ``proto_c`` is the prototype center, ``axis_xz`` the rotation axis
    in the xz-plane; the ring tables carry exact (cos, sin) pairs of the
    full and half angles.
    """
    ax, az = axis_xz
    d = (proto_c[0] - ax, proto_c[1], proto_c[2] - az)
    parts = []
    for (c, s), (hc, hs) in zip(ring, ring_half):
        rx, ry, rz = _rot_y((c, s), d)
        center = (ax + rx, ry, az + rz)
        q = np.array([hc, 0.0, hs, 0.0])
        parts.append(_leaf(label, center, proto_r, q=q))
    return parts


def _ring_edges(offset: int, count: int) -> List[RelEdge]:
    edges = [RelEdge(offset + i, offset + i + 1, RelType.ROTATIONAL) for i in range(count - 1)]
    edges.append(RelEdge(offset, offset + count - 1, RelType.ROTATIONAL))
    return edges


def _tripod_base(rng, fc, L, half_x, half_z, underside_y) -> Part:
    radius = rng.uniform(0.35, 0.45) * min(half_x, half_z)
    gap = rng.uniform(0.035, 0.045)
    leg_w = rng.uniform(0.04, 0.06)
    leg_len = rng.uniform(0.35, 0.5)
    leg_y = (underside_y - gap) - 0.5 * leg_len
    legs = _ring_parts(
        L["leg"], (radius, leg_y, 0.0), (leg_w, leg_len, leg_w), _RING3, _RING3_HALF
    )
    sym = [
        RelEdge(0, 1, RelType.ROTATIONAL),
        RelEdge(1, 2, RelType.ROTATIONAL),
        RelEdge(0, 2, RelType.ROTATIONAL),
    ]
    return _internal(L["base"], legs, fc.per_face, sym)


def _pedestal_parts(rng, L, g, underside_y, col_w_range, col_len_range, foot_len_range):
    """Square column whose top face center meets the underside center,
    plus four feet rotated around it, attached on the column's lowest
    side-face grid row."""
    col_w = rng.uniform(*col_w_range)
    col_len = rng.uniform(*col_len_range)
    col_cy = underside_y - 0.5 * col_len
    column = _leaf(L["pedestal"], (0.0, col_cy, 0.0), (col_w, col_len, col_w))
    attach_y = col_cy + g[0] * col_len
    foot_len = rng.uniform(*foot_len_range)
    foot_h = rng.uniform(0.04, 0.06)
    foot_w = rng.uniform(0.04, 0.06)
    proto_c = (0.5 * col_w + 0.5 * foot_len, attach_y, 0.0)
    feet = _ring_parts(L["foot"], proto_c, (foot_len, foot_h, foot_w), _RING4, _RING4_HALF)
    return column, feet


def _pedestal_base(rng, fc, L, g, underside_y) -> Part:
    column, feet = _pedestal_parts(
        rng, L, g, underside_y, (0.06, 0.09), (0.42, 0.52), (0.16, 0.24)
    )
    sym = _ring_edges(1, 4)
    return _internal(L["base"], [column] + feet, fc.per_face, sym)


def _gen_chair(rng: np.random.Generator, fc: FamilyConfig) -> ShapeTree:
    vocab = CHAIR_VOCABULARY
    L = {name: i for i, name in enumerate(vocab.labels)}
    g = _grid(fc.per_face)
    k = len(g)
    rsx = rng.uniform(0.42, 0.52)
    rsy = rng.uniform(0.05, 0.08)
    rsz = rng.uniform(0.38, 0.48)
    seat = _leaf(L["seat"], (0.0, 0.0, 0.0), (rsx, rsy, rsz))
    seat_top = 0.5 * rsy
    seat_bottom = -0.5 * rsy

    children: List[Part] = []
    if rng.random() < fc.p_back:
        children.append(_chair_back(rng, fc, L, g, rsx, rsz, seat_top))
    children.append(seat)

    style = _choose(rng, fc.leg_styles)
    if style == "four":
        base = _four_leg_base(rng, fc, L, g, rsx, rsz, seat_bottom, label_rail="stretcher")
    elif style == "three":
        base = _tripod_base(rng, fc, L, rsx, rsz, seat_bottom)
    else:
        base = _pedestal_base(rng, fc, L, g, seat_bottom)
    children.append(base)

    if rng.random() < fc.p_arms:
        arm_w = rng.uniform(0.035, 0.05)
        arm_h = rng.uniform(0.18, 0.26)
        arm_d = rng.uniform(0.05, 0.09)
        arms = [
            _leaf(L["arm"], (g[0] * rsx, seat_top + 0.5 * arm_h, 0.0), (arm_w, arm_h, arm_d)),
            _leaf(L["arm"], (g[k - 1] * rsx, seat_top + 0.5 * arm_h, 0.0), (arm_w, arm_h, arm_d)),
        ]
        children.append(_internal(L["arm_group"], arms, fc.per_face, [RelEdge(0, 1, RelType.REFLECTIVE)]))

    root = _internal(L["chair"], children, fc.per_face, [])
    shape = ShapeTree(category="chair", root=root)
    normalized, _, _ = normalize_unit_sphere(shape)
    return normalized


# ---------------------------------------------------------------------------
# table family


def _table_rail_pair(rng, L, label: str, g, xs, leg_y, leg_len, leg_w, half_z, row_idx: int):
    """Two rails along z connecting front/rear legs at one grid row of
    the leg faces; returns the parts (rail ends meet leg face centers)."""
    k = len(g)
    rail_w = rng.uniform(0.025, 0.04)
    rail_h = rng.uniform(0.04, 0.06)
    y = leg_y + g[row_idx] * leg_len
    z_lo = g[0] * half_z + 0.5 * leg_w
    z_hi = g[k - 1] * half_z - 0.5 * leg_w
    length = z_hi - z_lo
    c_z = 0.5 * (z_lo + z_hi)
    return [_leaf(L[label], (x, y, c_z), (rail_w, rail_h, length)) for x in xs]


def _gen_table(rng: np.random.Generator, fc: FamilyConfig) -> ShapeTree:
    vocab = TABLE_VOCABULARY
    L = {name: i for i, name in enumerate(vocab.labels)}
    g = _grid(fc.per_face)
    k = len(g)
    rtx = rng.uniform(0.5, 0.7)
    rty = rng.uniform(0.04, 0.06)
    rtz = rng.uniform(0.4, 0.6)
    top = _leaf(L["top"], (0.0, 0.0, 0.0), (rtx, rty, rtz))
    top_bottom = -0.5 * rty

    style = _choose(rng, fc.leg_styles)
    if style == "pedestal":
        # flat hierarchy: the column and feet sit directly under the root
        column, feet = _pedestal_parts(
            rng, L, g, top_bottom, (0.08, 0.12), (0.45, 0.6), (0.2, 0.3)
        )
        children = [top, column] + feet
        sym = _ring_edges(2, 4)
        root = _internal(L["table"], children, fc.per_face, sym)
    else:
        leg_w = rng.uniform(0.04, 0.065)
        leg_len = rng.uniform(0.45, 0.6)
        xs = (g[0] * rtx, g[k - 1] * rtx)
        zs = (g[0] * rtz, g[k - 1] * rtz)
        leg_y = top_bottom - 0.5 * leg_len
        legs = [
            _leaf(L["leg"], (x, leg_y, z), (leg_w, leg_len, leg_w)) for z in zs for x in xs
        ]
        sym = [
            RelEdge(0, 1, RelType.REFLECTIVE),
            RelEdge(2, 3, RelType.REFLECTIVE),
            RelEdge(0, 2, RelType.REFLECTIVE),
            RelEdge(1, 3, RelType.REFLECTIVE),
        ]
        base_children = list(legs)
        if rng.random() < fc.p_aprons:
            aprons = _table_rail_pair(rng, L, "apron", g, xs, leg_y, leg_len, leg_w, rtz, k - 1)
            sym.append(RelEdge(len(base_children), len(base_children) + 1, RelType.REFLECTIVE))
            base_children.extend(aprons)
        has_stretchers = rng.random() < fc.p_stretchers
        if has_stretchers:
            stretchers = _table_rail_pair(rng, L, "stretcher", g, xs, leg_y, leg_len, leg_w, rtz, 0)
            sym.append(RelEdge(len(base_children), len(base_children) + 1, RelType.REFLECTIVE))
            base_children.extend(stretchers)
            if rng.random() < fc.p_shelf:
                # the shelf floats just above the stretchers, clear of the
                # adjacency threshold, so it carries no relations
                st_top = stretchers[0].box.c[1] + 0.5 * stretchers[0].box.r[1]
                sh_h = rng.uniform(0.02, 0.035)
                sh_y = st_top + rng.uniform(0.025, 0.04) + 0.5 * sh_h
                sh_r = (rng.uniform(0.42, 0.52) * rtx, sh_h, rng.uniform(0.42, 0.52) * rtz)
                base_children.append(_leaf(L["shelf"], (0.0, sh_y, 0.0), sh_r))
        base = _internal(L["base"], base_children, fc.per_face, sym)
        root = _internal(L["table"], [top, base], fc.per_face, [])
    shape = ShapeTree(category="table", root=root)
    normalized, _, _ = normalize_unit_sphere(shape)
    return normalized


# ---------------------------------------------------------------------------
# dataset level


def generate_shape(config: FamilyConfig, seed: int, index: int = 0) -> ShapeTree:
    """One deterministic shape; (seed, index) fully determine it."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, index))))
    if config.category == "chair":
        shape = _gen_chair(rng, config)
    elif config.category == "table":
        shape = _gen_table(rng, config)
    else:
        raise ShapeError(f"no generator for category {config.category!r}")
    report = validate(shape, get_vocabulary(config.category))
    if not report.ok:  # pragma: no cover - generator bugs only
        raise ShapeError(f"generated shape invalid: {report}")
    return shape


def generate_dataset(
    config: FamilyConfig,
    count: int,
    seed: int = 0,
    out_dir: Optional[Path] = None,
) -> List[ShapeTree]:
    """Generate ``count`` shapes; optionally write them plus a manifest."""
    shapes = [generate_shape(config, seed, i) for i in range(count)]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        names = []
        for i, shape in enumerate(shapes):
            name = f"shape_{i:05d}.json"
            (out_dir / name).write_text(serialize(shape))
            names.append(name)
        write_manifest(out_dir / "manifest.json", config, seed, names, dataset_stats(shapes))
    return shapes


def dataset_stats(shapes: Sequence[ShapeTree]) -> dict:
    """Aggregate counts used in manifests and reports."""
    if not shapes:
        return {"count": 0}
    label_hist: Dict[str, int] = {}
    edge_hist: Dict[str, int] = {}
    parts = []
    depths = []
    for shape in shapes:
        vocab = get_vocabulary(shape.category)
        parts.append(shape.count_parts())
        depths.append(shape.depth())
        for p in shape.root.walk():
            label_hist[vocab.name(p.label)] = label_hist.get(vocab.name(p.label), 0) + 1
            for e in p.edges:
                edge_hist[e.rel.value] = edge_hist.get(e.rel.value, 0) + 1
    return {
        "count": len(shapes),
        "parts_min": int(min(parts)),
        "parts_max": int(max(parts)),
        "parts_mean": float(np.mean(parts)),
        "depth_min": int(min(depths)),
        "depth_max": int(max(depths)),
        "label_histogram": dict(sorted(label_hist.items())),
        "edge_histogram": dict(sorted(edge_hist.items())),
    }


def config_digest(config: FamilyConfig) -> str:
    """Digest of every generation knob; equal digests mean equal corpora."""
    payload = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def write_manifest(path, config: FamilyConfig, seed: int, files: List[str], stats: dict) -> None:
    doc = {
        "format_version": 1,
        "category": config.category,
        "seed": seed,
        "per_face": config.per_face,
        "config_digest": config_digest(config),
        "files": files,
        "stats": stats,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def split_indices(
    n: int, ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2), seed: int = 0
) -> Tuple[List[int], List[int], List[int]]:
    """Deterministic train/val/test split of ``range(n)``.

    Sizes are ``int(n * ratio)`` for train and val; test takes the rest.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three numbers summing to 1")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x5EED))))
    perm = [int(i) for i in rng.permutation(n)]
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    return (
        perm[:n_train],
        perm[n_train : n_train + n_val],
        perm[n_train + n_val :],
    )


@dataclass
class IngestResult:
    """Shapes accepted from a directory plus the per-file skip reasons."""

    shapes: List[ShapeTree] = field(default_factory=list)
    names: List[str] = field(default_factory=list)
    skipped: List[Tuple[str, str]] = field(default_factory=list)


def ingest_directory(path, normalize: bool = True) -> IngestResult:
    """Load every ``*.json`` shape under ``path`` (sorted by name).

    Files that fail to parse, belong to an unknown category, exceed the
    supported child arity or fail validation are skipped with a logged
    reason rather than aborting the ingest.
    """
    path = Path(path)
    result = IngestResult()
    for file in sorted(path.glob("*.json")):
        if file.name == "manifest.json":
            continue
        try:
            shape = load_shape(file)
        except ShapeError as exc:
            result.skipped.append((file.name, str(exc)))
            logger.info("skipped %s: %s", file.name, exc)
            continue
        arity = max(len(p.children) for p in shape.root.walk())
        if arity > MAX_CHILDREN:
            reason = f"part arity {arity} exceeds the supported maximum of {MAX_CHILDREN}"
            result.skipped.append((file.name, reason))
            logger.info("skipped %s: %s", file.name, reason)
            continue
        try:
            vocab = get_vocabulary(shape.category)
        except ShapeError as exc:
            result.skipped.append((file.name, str(exc)))
            logger.info("skipped %s: %s", file.name, exc)
            continue
        report = validate(shape, vocab)
        if not report.ok:
            reason = "; ".join(f"{path}: {msg}" for path, msg in report.violations[:3])
            result.skipped.append((file.name, reason))
            logger.info("skipped %s: %s", file.name, reason)
            continue
        if normalize:
            shape, _, _ = normalize_unit_sphere(shape)
        result.shapes.append(shape)
        result.names.append(file.name)
    return result
