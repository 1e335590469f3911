"""Part matching and training objectives.

The reconstruction objective compares a teacher-mode decode against its
reference shape.  Reference children are assigned to decoded slots by
an exact Hungarian solve over pairwise chamfer costs; matched slots are
supervised on geometry, normals, labels and leaf flags, unmatched slots
are pulled toward the zero box, and the existence/edge heads are
supervised densely.  Two structure-consistency terms act on the decoded
geometry itself: symmetry edges compare a subtree cloud against the
transformed cloud of its partner, adjacency edges penalise the gap
between leaf clouds.

Per-shape total (beta is the KL weight)::

    total = 20*geo + 10*normal + xp + xe + 0.1*sem + leaf + sym + adj + beta*kl
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import geometry as geom
from .geometry import unit_cube_samples
from .model import DecodedGraph, FreeNode, ShapeVAE, TeacherNode
from .shapes import REL_TYPES, N_REL_TYPES, Part, RelType, ShapeTree, SYMMETRY_TYPES

__all__ = [
    "hungarian",
    "chamfer_cost_matrix",
    "PartMatcher",
    "LossBreakdown",
    "WEIGHT_GEO",
    "WEIGHT_NORMAL",
    "WEIGHT_SEM",
    "DEFAULT_BETA",
    "ConsistencyView",
    "view_from_teacher",
    "view_from_free",
    "view_from_part",
    "consistency_edge_values",
    "consistency_terms",
    "kl_term",
    "compute_shape_loss",
]

WEIGHT_GEO = 20.0
WEIGHT_NORMAL = 10.0
WEIGHT_SEM = 0.1
DEFAULT_BETA = 0.05

_MAX_COLUMNS = 20  # 2^m state table; plenty for the 10-slot decoder


def hungarian(cost) -> List[Tuple[int, int]]:
    """Minimum-cost assignment of rows to distinct columns.

    Exact dynamic program over column subsets (requires ``cols <= 20``).
    Every row must be assigned, so ``rows <= cols``; infeasible or
    non-finite inputs raise ``ValueError``.  Ties are broken
    deterministically toward low column indices during backtracking.
    Returns ``(row, col)`` pairs sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    n, m = cost.shape
    if n == 0:
        return []
    if n > m:
        raise ValueError(f"infeasible assignment: {n} rows but only {m} columns")
    if m > _MAX_COLUMNS:
        raise ValueError(f"hungarian supports at most {_MAX_COLUMNS} columns, got {m}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("assignment cost matrix must be finite")
    size = 1 << m
    masks = np.arange(size)
    stages = []  # stages[i][mask]: min cost of assigning rows < i to exactly `mask`
    f = np.full(size, np.inf)
    f[0] = 0.0
    for i in range(n):
        stages.append(f)
        nf = np.full(size, np.inf)
        for j in range(m):
            bit = 1 << j
            src = masks[(masks & bit) == 0]
            tgt = src | bit
            nf[tgt] = np.minimum(nf[tgt], f[src] + cost[i, j])
        f = nf
    mask = int(np.argmin(f))
    val = f[mask]
    assign: List[int] = [0] * n
    for i in range(n - 1, -1, -1):
        fi = stages[i]
        for j in range(m):
            bit = 1 << j
            if mask & bit and fi[mask ^ bit] + cost[i, j] == val:
                assign[i] = j
                mask ^= bit
                val = fi[mask]
                break
        else:  # pragma: no cover - the DP minimum is always one of the candidates
            raise RuntimeError("assignment backtracking failed")
    return [(i, assign[i]) for i in range(n)]


def chamfer_cost_matrix(pa: np.ndarray, wa: np.ndarray, pb: np.ndarray, wb: np.ndarray) -> np.ndarray:
    """All-pairs weighted squared chamfer; [n,sa,3] x [m,sb,3] -> [n,m]."""
    n, sa, _ = pa.shape
    m, sb, _ = pb.shape
    a = pa.reshape(n * sa, 3)
    b = pb.reshape(m * sb, 3)
    d = np.maximum(
        (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T), 0.0
    ).reshape(n, sa, m, sb)
    da = d.min(axis=3)  # [n, sa, m]
    db = d.min(axis=1)  # [n, m, sb]
    return np.einsum("ns,nsm->nm", wa, da) + np.einsum("ms,nms->nm", wb, db)


class PartMatcher:
    """Assigns reference children to decoded slots by chamfer cost.

    Also owns the sample cache for reference boxes: every part's surface
    cloud is computed once per matcher (and therefore once per training
    run), keyed by part identity.
    """

    def __init__(self, per_face: int = geom.DEFAULT_PER_FACE) -> None:
        self.per_face = per_face
        self.u = unit_cube_samples(per_face)
        self._cache: Dict[int, Tuple[Part, np.ndarray, np.ndarray]] = {}

    def part_cloud(self, part: Part) -> Tuple[np.ndarray, np.ndarray]:
        hit = self._cache.get(id(part))
        if hit is not None and hit[0] is part:
            return hit[1], hit[2]
        cloud = geom.box_samples(part.box, self.per_face)
        self._cache[id(part)] = (part, cloud.points, cloud.weights)
        return cloud.points, cloud.weights

    def children_clouds(self, children: Sequence[Part]) -> Tuple[np.ndarray, np.ndarray]:
        pts, ws = zip(*(self.part_cloud(ch) for ch in children))
        return np.stack(pts), np.stack(ws)

    def __call__(self, children: Sequence[Part], c: np.ndarray, q: np.ndarray, r: np.ndarray):
        gt_pts, gt_w = self.children_clouds(children)
        slot_pts = geom.box_cloud(c, q, r, self.u.points)
        slot_w = geom.box_weights(r, self.per_face)
        cost = chamfer_cost_matrix(gt_pts, gt_w, slot_pts, slot_w)
        return hungarian(cost)


# ---------------------------------------------------------------------------
# reconstruction terms


@dataclass
class LossBreakdown:
    """Per-term values of one shape's (or one batch's mean) objective."""

    geo: float = 0.0
    normal: float = 0.0
    xp: float = 0.0
    xe: float = 0.0
    sem: float = 0.0
    leaf: float = 0.0
    sym: float = 0.0
    adj: float = 0.0
    kl: float = 0.0
    total: float = 0.0

    @classmethod
    def columns(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in self.columns()}


def _accumulate(parts: List[object]):
    """Sum a list of scalar tensors/floats; empty list -> 0.0."""
    if not parts:
        return 0.0
    acc = parts[0]
    for p in parts[1:]:
        acc = acc + p
    return acc


def _weighted_total(pairs: Sequence[Tuple[float, object]]):
    acc = None
    for w, term in pairs:
        if w == 0.0 or (isinstance(term, float) and term == 0.0):
            continue
        contrib = term * w if isinstance(term, ad.Tensor) else w * term
        acc = contrib if acc is None else acc + contrib
    return 0.0 if acc is None else acc


def reconstruction_terms(
    gt_root: Part,
    decoded: TeacherNode,
    matcher: PartMatcher,
    *,
    no_edges: bool = False,
    no_normal: bool = False,
) -> Dict[str, object]:
    """Supervised terms of a teacher decode against its reference.

    Returns scalar tensors (or 0.0 floats for absent terms) keyed
    ``geo/normal/xp/xe/sem/leaf``.  Geometry and normals cover the root
    box and every matched slot; unmatched slots contribute the squared
    raw box head output (pulling them to the zero box); existence and
    edge heads are supervised over all slots / slot pairs.
    """
    u = matcher.u
    per_face = matcher.per_face
    geo_parts: List[object] = []
    normal_parts: List[object] = []
    xp_parts: List[object] = []
    xe_parts: List[object] = []
    sem_parts: List[object] = []
    leaf_parts: List[object] = []

    # Root box supervision (the root has no existence/label slot).
    gt_pts, gt_w = matcher.part_cloud(gt_root)
    dec_pts = geom.box_cloud(decoded.box_c, decoded.box_q, decoded.box_r, u.points)
    dec_w = geom.box_weights(decoded.box_r, per_face)
    geo_parts.append(ad.sum_(geom.chamfer_batch(gt_pts[None], gt_w[None], dec_pts, dec_w)))
    if not no_normal:
        w6 = np.full((1, 6), 1.0 / 6.0)
        gt_n = geom.rotated_normals(gt_root.box.q[None])
        dec_n = geom.rotated_normals(decoded.box_q)
        normal_parts.append(ad.sum_(geom.chamfer_batch(gt_n, w6, dec_n, w6)))
    root_leaf = np.array([1.0 if gt_root.is_leaf else 0.0])
    leaf_parts.append(ad.sum_(ad.bce_with_logits(decoded.leaf_logit, root_leaf)))

    for node in decoded.walk():
        graph = node.graph
        if graph is None:
            continue
        gt = node.gt
        P = ad.value(graph.exist_logits).shape[0]
        gidx = np.array([gi for gi, _ in node.assignment], dtype=np.intp)
        jidx = np.array([j for _, j in node.assignment], dtype=np.intp)

        all_pts, all_w = matcher.children_clouds(gt.children)
        gt_sel_pts, gt_sel_w = all_pts[gidx], all_w[gidx]
        c_sel = ad.take(graph.box_c, jidx)
        q_sel = ad.take(graph.box_q, jidx)
        r_sel = ad.take(graph.box_r, jidx)
        slot_pts = geom.box_cloud(c_sel, q_sel, r_sel, u.points)
        slot_w = geom.box_weights(r_sel, per_face)
        geo_parts.append(ad.sum_(geom.chamfer_batch(gt_sel_pts, gt_sel_w, slot_pts, slot_w)))

        unmatched = np.setdiff1d(np.arange(P, dtype=np.intp), jidx)
        if unmatched.size:
            geo_parts.append(ad.sum_(ad.square(ad.take(graph.box_raw, unmatched))))

        if not no_normal:
            k = len(gidx)
            w6 = np.full((k, 6), 1.0 / 6.0)
            gt_q = np.stack([gt.children[gi].box.q for gi in gidx])
            gt_n = geom.rotated_normals(gt_q)
            dec_n = geom.rotated_normals(q_sel)
            normal_parts.append(ad.sum_(geom.chamfer_batch(gt_n, w6, dec_n, w6)))

        exist_target = np.zeros(P)
        exist_target[jidx] = 1.0
        xp_parts.append(ad.sum_(ad.bce_with_logits(graph.exist_logits, exist_target)))

        if not no_edges:
            slot_of = {int(gi): int(j) for gi, j in node.assignment}
            target = np.zeros((P, P, N_REL_TYPES))
            for e in gt.edges:
                ja, jb = slot_of[e.a], slot_of[e.b]
                t = REL_TYPES.index(e.rel)
                target[ja, jb, t] = 1.0
                target[jb, ja, t] = 1.0
            tri_a, tri_b = np.triu_indices(P, k=1)
            flat_logits = ad.take(
                ad.reshape(graph.edge_logits, (P * P, N_REL_TYPES)), tri_a * P + tri_b
            )
            xe_parts.append(ad.sum_(ad.bce_with_logits(flat_logits, target[tri_a, tri_b])))

        labels = np.array([gt.children[gi].label for gi in gidx], dtype=np.intp)
        sem_parts.append(ad.sum_(ad.softmax_cross_entropy(ad.take(graph.label_logits, jidx), labels)))

        leaf_target = np.array([1.0 if gt.children[gi].is_leaf else 0.0 for gi in gidx])
        leaf_parts.append(ad.sum_(ad.bce_with_logits(ad.take(graph.leaf_logits, jidx), leaf_target)))

    return {
        "geo": _accumulate(geo_parts),
        "normal": _accumulate(normal_parts),
        "xp": _accumulate(xp_parts),
        "xe": _accumulate(xe_parts),
        "sem": _accumulate(sem_parts),
        "leaf": _accumulate(leaf_parts),
    }


# ---------------------------------------------------------------------------
# structure consistency


@dataclass
class ConsistencyView:
    """Minimal tree interface the consistency terms operate on.

    ``box_c``/``box_q``/``box_r`` are ``[1,3]/[1,4]/[1,3]`` rows (plain
    arrays or tape tensors); ``edges`` connect positions in
    ``children``.  Teacher decodes, free decodes and reference shapes
    all project onto this.
    """

    box_c: object
    box_q: object
    box_r: object
    children: List["ConsistencyView"] = field(default_factory=list)
    edges: List[Tuple[int, int, RelType]] = field(default_factory=list)


def view_from_teacher(node: TeacherNode) -> ConsistencyView:
    """Project a teacher decode; children are all decoder slots and the
    edges are the thresholded predicted relations."""
    view = ConsistencyView(box_c=node.box_c, box_q=node.box_q, box_r=node.box_r)
    graph = node.graph
    if graph is None:
        return view
    P = ad.value(graph.exist_logits).shape[0]
    for j in range(P):
        child = node.slot_children.get(j)
        if child is not None:
            sub = view_from_teacher(child)
        else:
            sub = ConsistencyView(
                box_c=graph.box_c[j : j + 1],
                box_q=graph.box_q[j : j + 1],
                box_r=graph.box_r[j : j + 1],
            )
        view.children.append(sub)
    view.edges = [(a, b, REL_TYPES[t]) for a, b, t in graph.hard_edges]
    return view


def view_from_free(node: FreeNode, edges_override: Optional[Dict[Tuple[int, ...], List[Tuple[int, int, RelType]]]] = None) -> ConsistencyView:
    """Project a free decode onto its retained children.

    ``edges_override`` substitutes the edge list per node (keyed by slot
    path); this is how reference relations are transported onto decoded
    geometry for the ground-truth-consistency metric.
    """
    view = ConsistencyView(
        box_c=ad.reshape(node.box_c, (1, 3)),
        box_q=ad.reshape(node.box_q, (1, 4)),
        box_r=ad.reshape(node.box_r, (1, 3)),
        children=[view_from_free(ch, edges_override) for ch in node.children],
    )
    if edges_override is not None:
        view.edges = list(edges_override.get(node.slot_path, []))
    else:
        view.edges = list(node.edges)
    return view


def view_from_part(part: Part) -> ConsistencyView:
    """Project a reference part tree (plain arrays throughout)."""
    return ConsistencyView(
        box_c=part.box.c[None, :],
        box_q=part.box.q[None, :],
        box_r=part.box.r[None, :],
        children=[view_from_part(ch) for ch in part.children],
        edges=[(e.a, e.b, e.rel) for e in part.edges],
    )


def _stack_rows(rows: List[object]):
    return rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)


class _CloudIndex:
    """Batched sample clouds for every node of a view tree.

    All boxes are expanded in one batched call; per-subtree clouds are
    then row gathers, which keeps the traced-op count per consistency
    evaluation small.  Subtree clouds merge the subtree root's box with
    every descendant box at equal total mass per box.
    """

    def __init__(self, view: ConsistencyView, per_face: int):
        u = unit_cube_samples(per_face)
        c_rows: List[object] = []
        q_rows: List[object] = []
        r_rows: List[object] = []
        self._full: Dict[int, List[int]] = {}
        self._leaf: Dict[int, List[int]] = {}

        def walk(v: ConsistencyView):
            i = len(c_rows)
            c_rows.append(v.box_c)
            q_rows.append(v.box_q)
            r_rows.append(v.box_r)
            full, leaf = [i], []
            for ch in v.children:
                f, l = walk(ch)
                full.extend(f)
                leaf.extend(l)
            if not v.children:
                leaf = [i]
            self._full[id(v)] = full
            self._leaf[id(v)] = leaf
            return full, leaf

        walk(view)
        r = _stack_rows(r_rows)
        self._pts = geom.box_cloud(_stack_rows(c_rows), _stack_rows(q_rows), r, u.points)
        self._w = geom.box_weights(r, per_face)
        self._cache: Dict[Tuple[int, bool], Tuple[object, object]] = {}

    def cloud(self, v: ConsistencyView, leaves_only: bool):
        key = (id(v), leaves_only)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        idx = (self._leaf if leaves_only else self._full)[id(v)]
        k = len(idx)
        pts = ad.reshape(ad.take(self._pts, idx), (-1, 3))
        w = ad.reshape(ad.take(self._w, idx) * (1.0 / k), (-1,))
        self._cache[key] = (pts, w)
        return pts, w


def _rotational_components(n: int, edges) -> Dict[int, List[int]]:
    """Connected components of the rotational edges; index -> members."""
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b, rel in edges:
        if rel == RelType.ROTATIONAL:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    comps: Dict[int, List[int]] = {}
    for i in range(n):
        comps.setdefault(find(i), []).append(i)
    return comps


def consistency_edge_values(
    view: ConsistencyView, per_face: int, squared: bool = True
) -> List[Tuple[RelType, object]]:
    """Per-edge consistency residuals over a whole view tree.

    Symmetry edges: chamfer between the partner subtree cloud and the
    edge's transform applied to the source subtree cloud (subtree clouds
    include the subtree root boxes).  Rotational transforms pivot about
    the centroid of the edge's rotational connected component.
    Adjacency edges: smallest pairwise distance between the two leaf
    clouds.  ``squared`` selects squared (training) or plain Euclidean
    (metrics) distances.
    """
    index: Optional[_CloudIndex] = None
    out: List[Tuple[RelType, object]] = []

    def walk(v: ConsistencyView) -> None:
        nonlocal index
        if v.edges:
            if index is None:
                index = _CloudIndex(view, per_face)

            def full(i):
                return index.cloud(v.children[i], leaves_only=False)

            def leaf(i):
                return index.cloud(v.children[i], leaves_only=True)

            comps = _rotational_components(len(v.children), v.edges)
            centroids: Dict[int, object] = {}
            for root, members in comps.items():
                if len(members) > 1:
                    rows = _stack_rows([v.children[i].box_c for i in members])
                    centroids[root] = ad.mean_(rows, axis=0)
            comp_of = {}
            for root, members in comps.items():
                for i in members:
                    comp_of[i] = root

            for a, b, rel in v.edges:
                if rel == RelType.ADJACENCY:
                    pa, _ = leaf(a)
                    pb, _ = leaf(b)
                    val = geom.min_pair_distance(pa, pb)
                    if not squared:
                        val = ad.sqrt(val) if isinstance(val, ad.Tensor) else float(np.sqrt(val))
                else:
                    pa, wa = full(a)
                    pb, wb = full(b)
                    ca = v.children[a].box_c[0]
                    cb = v.children[b].box_c[0]
                    centroid = centroids.get(comp_of[a]) if rel == RelType.ROTATIONAL else None
                    moved = geom.apply_sym_transform(pa, ca, cb, rel, centroid=centroid)
                    val = geom.chamfer(moved, wa, pb, wb, squared=squared)
                out.append((rel, val))
        for ch in v.children:
            walk(ch)

    walk(view)
    return out


def consistency_terms(view: ConsistencyView, per_face: int, squared: bool = True):
    """Summed (symmetry, adjacency) residuals of a view tree."""
    sym_parts: List[object] = []
    adj_parts: List[object] = []
    for rel, val in consistency_edge_values(view, per_face, squared=squared):
        if rel == RelType.ADJACENCY:
            adj_parts.append(val)
        else:
            sym_parts.append(val)
    return _accumulate(sym_parts), _accumulate(adj_parts)


# ---------------------------------------------------------------------------
# full objective


def kl_term(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over dimensions."""
    return 0.5 * ad.sum_(ad.exp(logvar) + ad.square(mu) - 1.0 - logvar)


def compute_shape_loss(
    model: ShapeVAE,
    shape: ShapeTree,
    matcher: PartMatcher,
    *,
    mode: str = "vae",
    beta: float = DEFAULT_BETA,
    eps: Optional[np.ndarray] = None,
    no_normal_loss: bool = False,
    no_consistency_loss: bool = False,
) -> Tuple[object, LossBreakdown]:
    """The full per-shape objective (scalar tensor) plus its breakdown.

    ``mode='vae'`` uses the reparameterised latent with the supplied
    noise ``eps`` (``[1, D]``); ``mode='ae'`` decodes the posterior mean
    and is conventionally paired with ``beta=0``.  The model's own
    ``no_edges`` flag removes the edge and consistency terms; the two
    keyword flags ablate the normal and consistency terms.
    """
    if mode not in ("vae", "ae"):
        raise ValueError(f"unknown mode {mode!r}")
    feat = model.encode_shape(shape)
    mu, logvar = model.bottleneck(feat)
    z = model.sample_latent(mu, logvar, eps if mode == "vae" else None)
    decoded = model.decode_teacher(z, shape.root, matcher)
    no_edges = model.config.no_edges
    rec = reconstruction_terms(
        shape.root, decoded, matcher, no_edges=no_edges, no_normal=no_normal_loss
    )
    if no_edges or no_consistency_loss:
        sym, adj = 0.0, 0.0
    else:
        sym, adj = consistency_terms(view_from_teacher(decoded), matcher.per_face, squared=True)
    kl = kl_term(mu, logvar)
    total = _weighted_total(
        [
            (WEIGHT_GEO, rec["geo"]),
            (WEIGHT_NORMAL, rec["normal"]),
            (1.0, rec["xp"]),
            (1.0, rec["xe"]),
            (WEIGHT_SEM, rec["sem"]),
            (1.0, rec["leaf"]),
            (1.0, sym),
            (1.0, adj),
            (beta, kl),
        ]
    )
    breakdown = LossBreakdown(
        geo=float(ad.value(rec["geo"])),
        normal=float(ad.value(rec["normal"])),
        xp=float(ad.value(rec["xp"])),
        xe=float(ad.value(rec["xe"])),
        sem=float(ad.value(rec["sem"])),
        leaf=float(ad.value(rec["leaf"])),
        sym=float(ad.value(sym)),
        adj=float(ad.value(adj)),
        kl=float(ad.value(kl)),
        total=float(ad.value(total)),
    )
    return total, breakdown
