"""Shape representation: hierarchies of parts with oriented boxes and sibling relationships.

A shape is a tree of parts. Every part carries an oriented bounding box
(center, unit quaternion, full-extent size). An internal part additionally
carries a graph over its children: undirected edges typed as adjacency or
one of three symmetry classes. A pair of children may carry several edges
of distinct types but never two edges of the same type.

Conventions fixed here and used repo-wide:
  - quaternions are scalar-first (w, x, y, z) and unit length,
  - sizes are full extents (the box spans [-r/2, r/2] in its local frame),
  - matrices are row-major numpy arrays, points transform as column vectors,
  - edges are stored canonically with a < b.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

FORMAT_VERSION = 1

MAX_CHILDREN = 10  # decoder slot count; also the ingest arity cap


class ShapeError(ValueError):
    """Raised for malformed shape files, unknown categories and degenerate geometry."""


class RelType(Enum):
    """Sibling relationship types. Wire codes are the serialized names."""

    ADJACENCY = "ADJ"
    REFLECTIVE = "REF"
    ROTATIONAL = "ROT"
    TRANSLATIONAL = "TRANS"

    @classmethod
    def from_wire(cls, code: str) -> "RelType":
        for t in cls:
            if t.value == code:
                return t
        raise ShapeError(f"unknown relationship type {code!r}")


REL_TYPES = tuple(RelType)
N_REL_TYPES = len(REL_TYPES)
SYMMETRY_TYPES = (RelType.REFLECTIVE, RelType.ROTATIONAL, RelType.TRANSLATIONAL)


@dataclass(frozen=True)
class BoxParams:
    """Oriented box: center c, unit quaternion q (w,x,y,z), full-extent size r."""

    c: np.ndarray
    q: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.float64).reshape(3)
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        r = np.asarray(self.r, dtype=np.float64).reshape(3)
        n = float(np.linalg.norm(q))
        if not np.isfinite(n) or n < 1e-12:
            raise ShapeError("quaternion has near-zero norm")
        if abs(n - 1.0) > 1e-6:
            q = q / n
        if np.any(r < 0):
            raise ShapeError("negative box size")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.c, self.q, self.r])

    def allclose(self, other: "BoxParams", tol: float = 0.0) -> bool:
        return (
            np.allclose(self.c, other.c, rtol=0, atol=tol)
            and np.allclose(self.q, other.q, rtol=0, atol=tol)
            and np.allclose(self.r, other.r, rtol=0, atol=tol)
        )


@dataclass(frozen=True)
class RelEdge:
    """Undirected typed edge between sibling indices, canonicalized to a < b."""

    a: int
    b: int
    rel: RelType

    def __post_init__(self):
        a, b = int(self.a), int(self.b)
        if a > b:
            a, b = b, a
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    def key(self):
        return (self.a, self.b, self.rel.value)


def _edge_sort_key(e: RelEdge):
    return (e.a, e.b, REL_TYPES.index(e.rel))


@dataclass(frozen=True)
class Part:
    """One node of a shape tree. A part is a leaf iff it has no children."""

    label: int
    box: BoxParams
    children: tuple = ()
    edges: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        object.__setattr__(
            self, "edges", tuple(sorted(self.edges, key=_edge_sort_key))
        )

    @property
    def is_leaf(self) -> bool:
        return len(self.children) == 0

    def walk(self):
        """Yield parts in preorder."""
        yield self
        for ch in self.children:
            yield from ch.walk()

    def depth(self) -> int:
        if self.is_leaf:
            return 1
        return 1 + max(ch.depth() for ch in self.children)

    def count_parts(self) -> int:
        return sum(1 for _ in self.walk())

    def count_edges(self) -> int:
        return sum(len(p.edges) for p in self.walk())


@dataclass(frozen=True)
class Vocabulary:
    """Category label set plus a parent/child legality table."""

    category: str
    labels: tuple
    legal_children: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(
            self,
            "legal_children",
            {k: tuple(v) for k, v in self.legal_children.items()},
        )

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ShapeError(f"unknown label {label!r} in category {self.category!r}")

    def name(self, idx: int) -> str:
        return self.labels[idx]

    def legal_child_indices(self, parent_idx: int) -> tuple:
        names = self.legal_children.get(self.labels[parent_idx], ())
        return tuple(self.labels.index(n) for n in names)


@dataclass(frozen=True)
class ShapeTree:
    """A category-tagged part hierarchy."""

    category: str
    root: Part

    def parts(self):
        return list(self.root.walk())

    def count_parts(self) -> int:
        return self.root.count_parts()

    def count_edges(self) -> int:
        return self.root.count_edges()

    def depth(self) -> int:
        return self.root.depth()

    def leaves(self):
        return [p for p in self.root.walk() if p.is_leaf]


# vocabulary registry, populated by structgen.data on import
_VOCABULARIES: dict = {}


def register_vocabulary(vocab: Vocabulary):
    _VOCABULARIES[vocab.category] = vocab


def get_vocabulary(category: str) -> Vocabulary:
    if category not in _VOCABULARIES:
        from . import data  # noqa: F401  built-in categories register lazily

    if category not in _VOCABULARIES:
        raise ShapeError(f"unknown category {category!r}")
    return _VOCABULARIES[category]


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "valid"
        return "\n".join(f"{path}: {msg}" for path, msg in self.violations)


def validate(shape: ShapeTree, vocab: Vocabulary | None = None) -> ValidationReport:
    """Structural validity check. The report lists every violated invariant."""
    if vocab is None:
        vocab = get_vocabulary(shape.category)
    out = []

    def visit(part: Part, path: str):
        if not (0 <= part.label < len(vocab)):
            out.append((path, f"unknown label index {part.label}"))
        n = len(part.children)
        if n > MAX_CHILDREN:
            out.append((path, f"arity {n} exceeds {MAX_CHILDREN}"))
        nq = float(np.linalg.norm(part.box.q))
        if abs(nq - 1.0) > 1e-6:
            out.append((path, f"non-unit quaternion (norm {nq:.9g})"))
        if np.any(part.box.r < 0):
            out.append((path, "negative box size"))
        if not np.all(np.isfinite(part.box.as_vector())):
            out.append((path, "non-finite box parameter"))
        seen = set()
        for e in part.edges:
            if e.a == e.b:
                out.append((path, f"self edge at index {e.a}"))
            if not (0 <= e.a < n and 0 <= e.b < n):
                out.append((path, f"dangling edge index ({e.a},{e.b}) with {n} children"))
            if e.key() in seen:
                out.append((path, f"duplicate edge {e.key()}"))
            seen.add(e.key())
        for i, ch in enumerate(part.children):
            visit(ch, f"{path}/{i}")

    visit(shape.root, "root")
    return ValidationReport(out)


# ---------------------------------------------------------------------------
# normalization


def _rotation_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


_CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sx in (-0.5, 0.5) for sy in (-0.5, 0.5) for sz in (-0.5, 0.5)]
)


def box_corners(box: BoxParams) -> np.ndarray:
    """Eight world-space corners of the oriented box, shape [8, 3]."""
    local = _CORNER_SIGNS * box.r
    return local @ _rotation_matrix(box.q).T + box.c


def _map_boxes(part: Part, fn) -> Part:
    return Part(
        label=part.label,
        box=fn(part.box),
        children=tuple(_map_boxes(ch, fn) for ch in part.children),
        edges=part.edges,
    )


def normalize_unit_sphere(shape: ShapeTree):
    """Recenter on the leaf-corner AABB midpoint, scale into the unit sphere.

    Returns (normalized shape, scale, offset) with c' = (c + offset) * scale.
    Idempotent up to 1e-9. Degenerate geometry (zero spatial extent) raises.
    """
    corners = np.concatenate(
        [box_corners(p.box) for p in shape.root.walk() if p.is_leaf]
    )
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    offset = -(lo + hi) / 2.0
    radius = float(np.linalg.norm(corners + offset, axis=1).max())
    if radius < 1e-12:
        raise ShapeError("degenerate geometry: shape has no spatial extent")
    scale = 1.0 / radius

    def fn(box: BoxParams) -> BoxParams:
        return BoxParams(c=(box.c + offset) * scale, q=box.q, r=box.r * scale)

    return ShapeTree(shape.category, _map_boxes(shape.root, fn)), scale, offset


# ---------------------------------------------------------------------------
# serialization: json text with full-precision reals


def _part_to_obj(part: Part, vocab: Vocabulary) -> dict:
    d = {
        "label": vocab.name(part.label),
        "box": {
            "c": [float(v) for v in part.box.c],
            "q": [float(v) for v in part.box.q],
            "r": [float(v) for v in part.box.r],
        },
    }
    if part.edges:
        d["edges"] = [{"a": e.a, "b": e.b, "type": e.rel.value} for e in part.edges]
    if part.children:
        d["children"] = [_part_to_obj(ch, vocab) for ch in part.children]
    return d


def _part_from_obj(d: dict, vocab: Vocabulary) -> Part:
    if not isinstance(d, dict) or "label" not in d or "box" not in d:
        raise ShapeError("part object must carry 'label' and 'box'")
    box = d["box"]
    try:
        bp = BoxParams(
            c=np.array(box["c"], dtype=np.float64),
            q=np.array(box["q"], dtype=np.float64),
            r=np.array(box["r"], dtype=np.float64),
        )
    except (KeyError, TypeError) as exc:
        raise ShapeError(f"malformed box object: {exc}")
    children = tuple(_part_from_obj(ch, vocab) for ch in d.get("children", []))
    edges = tuple(
        RelEdge(int(e["a"]), int(e["b"]), RelType.from_wire(e["type"]))
        for e in d.get("edges", [])
    )
    return Part(label=vocab.index(d["label"]), box=bp, children=children, edges=edges)


def serialize(shape: ShapeTree, vocab: Vocabulary | None = None) -> str:
    """Shape to json text. Reals keep full precision (shortest round-trip repr)."""
    if vocab is None:
        vocab = get_vocabulary(shape.category)
    doc = {
        "format_version": FORMAT_VERSION,
        "category": shape.category,
        "root": _part_to_obj(shape.root, vocab),
    }
    return json.dumps(doc, indent=1)


def deserialize(text: str, vocab: Vocabulary | None = None) -> ShapeTree:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ShapeError(f"parse error at line {exc.lineno} column {exc.colno}: {exc.msg}")
    if not isinstance(doc, dict):
        raise ShapeError("shape file must contain a json object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ShapeError(
            f"unsupported format_version {version!r} (this build reads {FORMAT_VERSION})"
        )
    category = doc.get("category")
    if not isinstance(category, str):
        raise ShapeError("missing category")
    if vocab is None:
        vocab = get_vocabulary(category)
    if "root" not in doc:
        raise ShapeError("missing root part")
    return ShapeTree(category, _part_from_obj(doc["root"], vocab))


def save_shape(shape: ShapeTree, path):
    with open(path, "w") as f:
        f.write(serialize(shape))


def load_shape(path) -> ShapeTree:
    with open(path) as f:
        return deserialize(f.read())


# ---------------------------------------------------------------------------
# mesh export

_BOX_FACE_QUADS = (
    (0, 1, 3, 2),  # -x
    (4, 6, 7, 5),  # +x
    (0, 4, 5, 1),  # -y
    (2, 3, 7, 6),  # +y
    (0, 2, 6, 4),  # -z
    (1, 5, 7, 3),  # +z
)


def to_obj(shape: ShapeTree, vocab: Vocabulary | None = None) -> str:
    """Leaf boxes as triangle meshes, one named group per part (12 tris per box)."""
    if vocab is None:
        vocab = get_vocabulary(shape.category)
    lines = []
    base = 1  # obj indices are 1-based
    counter = {}
    for part in shape.root.walk():
        if not part.is_leaf:
            continue
        name = vocab.name(part.label)
        counter[name] = counter.get(name, 0) + 1
        lines.append(f"g {name}_{counter[name]}")
        for v in box_corners(part.box):
            lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
        for quad in _BOX_FACE_QUADS:
            i, j, k, l = (base + q for q in quad)
            lines.append(f"f {i} {j} {k}")
            lines.append(f"f {i} {k} {l}")
        base += 8
    return "\n".join(lines) + "\n"


def shape_stats(shape: ShapeTree) -> dict:
    parts = shape.parts()
    return {
        "parts": len(parts),
        "leaves": sum(1 for p in parts if p.is_leaf),
        "edges": shape.count_edges(),
        "depth": shape.depth(),
        "max_arity": max(len(p.children) for p in parts),
    }
