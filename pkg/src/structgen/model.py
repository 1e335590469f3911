"""Recursive graph encoder/decoder with a variational bottleneck.

A shape is a tree of part graphs (see :mod:`structgen.shapes`).  The
encoder folds the tree bottom-up: leaf boxes are embedded by a single
affine layer, sibling graphs exchange typed messages for a fixed number
of rounds, and each parent receives a skip-connected max-pool of the
per-round child features.  The decoder mirrors the process top-down: a
parent feature is split into ``n_p`` candidate child slots, slot
existence and pairwise typed edges are predicted, the slots exchange
messages over the thresholded predicted edges, and per-slot heads emit
a label distribution, a leaf probability and an oriented box.

Two decoding modes are provided:

* ``teacher`` mode follows the structure of a reference shape.  A
  matcher callback assigns reference children to decoded slots, and the
  decoder recurses only into slots matched to internal children.  This
  is the mode used for training.
* ``free`` mode thresholds the predicted existence/leaf probabilities
  and recurses until the leaf classifier fires or a depth cap is hit.

All features are row matrices of shape ``[k, feature_dim]`` so the same
code path serves single nodes and batched slots.  Computations run on
tape tensors during training and plain arrays elsewhere.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import geometry as geom
from .autodiff import Tensor
from .shapes import (
    MAX_CHILDREN,
    N_REL_TYPES,
    REL_TYPES,
    BoxParams,
    Part,
    RelEdge,
    RelType,
    ShapeError,
    ShapeTree,
    Vocabulary,
)

__all__ = [
    "ModelConfig",
    "DecodedGraph",
    "TeacherNode",
    "FreeNode",
    "FreeDecode",
    "ShapeVAE",
]

#: Offset added to the raw quaternion head output before normalization so
#: that a zero-initialised head decodes to the identity rotation.
_QUAT_OFFSET = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    ``label_count`` is the size of the semantic vocabulary of the
    category the model is trained on.  ``no_edges`` drops all relation
    handling from both encoder and decoder (child features pass through
    message rounds unchanged and no edges are predicted);
    ``no_decoder_mp`` keeps edge prediction but skips the decoder
    message rounds, so box/label/leaf heads read the initial slot
    features.
    """

    label_count: int
    feature_dim: int = 256
    hidden_dim: int = 256
    max_children: int = MAX_CHILDREN
    mp_rounds: int = 2
    decode_depth_cap: int = 4
    no_edges: bool = False
    no_decoder_mp: bool = False

    def __post_init__(self) -> None:
        if self.label_count < 1:
            raise ValueError("label_count must be positive")
        if self.max_children < 1 or self.max_children > MAX_CHILDREN:
            raise ValueError(f"max_children must be in [1, {MAX_CHILDREN}]")
        if self.mp_rounds < 0:
            raise ValueError("mp_rounds must be non-negative")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def digest(self) -> str:
        """Stable hash used to pair checkpoints with configurations."""
        raw = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(raw).hexdigest()[:16]


@dataclass
class DecodedGraph:
    """One decoded sibling graph (all ``n_p`` candidate slots).

    Logit fields are tape tensors during training; the ``*_p``
    properties expose plain-array probabilities.  ``edge_logits`` is
    symmetric in its first two axes.  ``hard_edges`` lists the
    thresholded predicted relations as ``(slot_a, slot_b, type_index)``
    with ``slot_a < slot_b``; these are the edges message passing and
    the structure-consistency terms operate on.
    """

    init_features: object  # [P, D]
    slot_features: object  # [P, D] after message rounds
    exist_logits: object  # [P]
    edge_logits: object  # [P, P, 4] symmetrized
    label_logits: object  # [P, L]
    leaf_logits: object  # [P]
    box_raw: object  # [P, 10] pre-activation box parameters
    box_c: object  # [P, 3]
    box_q: object  # [P, 4] unit quaternions
    box_r: object  # [P, 3] positive extents
    hard_edges: List[Tuple[int, int, int]]

    @property
    def exist_p(self) -> np.ndarray:
        x = ad.value(self.exist_logits)
        return 1.0 / (1.0 + np.exp(-x))

    @property
    def leaf_p(self) -> np.ndarray:
        x = ad.value(self.leaf_logits)
        return 1.0 / (1.0 + np.exp(-x))

    @property
    def edge_p(self) -> np.ndarray:
        x = ad.value(self.edge_logits)
        return 1.0 / (1.0 + np.exp(-x))

    @property
    def label_probs(self) -> np.ndarray:
        x = ad.value(self.label_logits)
        x = x - x.max(axis=1, keepdims=True)
        e = np.exp(x)
        return e / e.sum(axis=1, keepdims=True)


@dataclass
class TeacherNode:
    """Decoded node that mirrors a reference part during training.

    ``graph`` is ``None`` for reference leaves.  ``assignment`` maps
    reference-child indices to decoded slots; ``slot_children`` holds
    the recursively decoded teacher nodes for slots whose matched
    reference child is internal.
    """

    gt: Part
    feature: object  # [1, D]
    box_raw: object  # [1, 10]
    box_c: object  # [1, 3]
    box_q: object  # [1, 4]
    box_r: object  # [1, 3]
    leaf_logit: object  # [1]
    graph: Optional[DecodedGraph] = None
    assignment: List[Tuple[int, int]] = field(default_factory=list)
    slot_children: Dict[int, "TeacherNode"] = field(default_factory=dict)

    def walk(self):
        yield self
        for j in sorted(self.slot_children):
            yield from self.slot_children[j].walk()


@dataclass
class FreeNode:
    """One retained part of a free-mode decode.

    ``slot_path`` is the sequence of decoder slot indices leading to
    this node (empty for the root); it stays valid across re-decodes of
    nearby latent vectors and is what the latent editor anchors to.
    ``edges`` connect positions in ``children`` (not slot indices).
    """

    slot_path: Tuple[int, ...]
    feature: object  # [1, D]
    box_c: object  # [3]
    box_q: object  # [4]
    box_r: object  # [3]
    leaf_logit: object  # scalar
    exist_p: float
    label_logits: Optional[object] = None  # [L]; None for the root
    children: List["FreeNode"] = field(default_factory=list)
    edges: List[Tuple[int, int, RelType]] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def leaf_p(self) -> float:
        return float(1.0 / (1.0 + np.exp(-float(ad.value(self.leaf_logit)))))

    def walk(self):
        yield self
        for ch in self.children:
            yield from ch.walk()

    def count_parts(self) -> int:
        return sum(1 for _ in self.walk())


@dataclass
class FreeDecode:
    """Result of a free-mode decode.

    ``empty`` is true when the root predicted an internal node but kept
    zero slots, i.e. the latent decodes to no shape at all.
    """

    root: Optional[FreeNode]
    empty: bool

    def count_parts(self) -> int:
        return 0 if self.root is None else self.root.count_parts()


#: Matcher callback used by teacher decoding: receives the reference
#: children and the decoded slot boxes (plain arrays) and returns the
#: list of ``(child_index, slot_index)`` assignments covering every
#: reference child.
MatcherFn = Callable[[Sequence[Part], np.ndarray, np.ndarray, np.ndarray], List[Tuple[int, int]]]


class ShapeVAE:
    """Encoder/decoder pair over shape trees with a Gaussian bottleneck.

    Parameters are float64 tape tensors stored in a name-ordered dict;
    the same instance serves training (inside a tape) and inference.
    """

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        self.config = config
        self.params: Dict[str, Tensor] = {}
        self._rng = np.random.Generator(np.random.PCG64(seed))
        self._build_params()

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------
    def _add(self, name: str, shape: Tuple[int, ...], fan_in: int, bias_fill: float | None = None) -> None:
        if bias_fill is not None:
            data = np.full(shape, bias_fill, dtype=np.float64)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            data = self._rng.uniform(-bound, bound, size=shape)
        self.params[name] = Tensor(data, requires_grad=True)

    def _build_params(self) -> None:
        cfg = self.config
        D, H, L, P = cfg.feature_dim, cfg.hidden_dim, cfg.label_count, cfg.max_children
        E = D + L  # encoder message space carries the label one-hot
        add = self._add
        add("enc_box.w", (10, D), 10)
        add("enc_box.b", (D,), 10, bias_fill=0.0)
        for t in range(cfg.mp_rounds):
            add(f"enc_msg{t}.w", (2 * E + N_REL_TYPES, E), 2 * E + N_REL_TYPES)
            add(f"enc_msg{t}.b", (E,), 1, bias_fill=0.0)
        add("enc_skip.w", ((cfg.mp_rounds + 1) * E, D), (cfg.mp_rounds + 1) * E)
        add("enc_skip.b", (D,), 1, bias_fill=0.0)
        add("vae_mu.w", (D, D), D)
        add("vae_mu.b", (D,), 1, bias_fill=0.0)
        add("vae_logvar.w", (D, D), D)
        add("vae_logvar.b", (D,), 1, bias_fill=0.0)
        add("dec_root.w1", (D, H), D)
        add("dec_root.b1", (H,), 1, bias_fill=0.0)
        add("dec_root.w2", (H, D), H)
        add("dec_root.b2", (D,), 1, bias_fill=0.0)
        add("dec_parts.w", (D, P * D), D)
        add("dec_parts.b", (P * D,), 1, bias_fill=0.0)
        # Existence starts pessimistic so early decodes stay sparse.
        add("dec_exist.w", (D, 1), D)
        add("dec_exist.b", (1,), 1, bias_fill=-1.0)
        add("dec_edge.w1", (2 * D, H), 2 * D)
        add("dec_edge.b1", (H,), 1, bias_fill=0.0)
        add("dec_edge.w2", (H, N_REL_TYPES), H)
        # Relations are rare among slot pairs; a negative prior keeps the
        # initial hard-edge set (and the consistency term built on it) small.
        add("dec_edge.b2", (N_REL_TYPES,), 1, bias_fill=-2.0)
        for t in range(cfg.mp_rounds):
            add(f"dec_msg{t}.w", (2 * D + N_REL_TYPES, D), 2 * D + N_REL_TYPES)
            add(f"dec_msg{t}.b", (D,), 1, bias_fill=0.0)
        add("dec_label.w", (D, L), D)
        add("dec_label.b", (L,), 1, bias_fill=0.0)
        add("dec_leaf.w1", (D, H), D)
        add("dec_leaf.b1", (H,), 1, bias_fill=0.0)
        add("dec_leaf.w2", (H, 1), H)
        add("dec_leaf.b2", (1,), 1, bias_fill=0.0)
        add("dec_box.w1", (D, H), D)
        add("dec_box.b1", (H,), 1, bias_fill=0.0)
        add("dec_box.w2", (H, 10), H)
        add("dec_box.b2", (10,), 1, bias_fill=0.0)

    @property
    def latent_dim(self) -> int:
        return self.params["vae_mu.w"].data.shape[1]

    def parameter_names(self) -> List[str]:
        return list(self.params)

    def named_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_arrays(self, named: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(named)
        extra = set(named) - set(self.params)
        if missing or extra:
            raise ValueError(
                f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, arr in named.items():
            tgt = self.params[name]
            if arr.shape != tgt.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {tgt.data.shape}")
            tgt.data = np.asarray(arr, dtype=np.float64)

    # ------------------------------------------------------------------
    # small layer helpers
    # ------------------------------------------------------------------
    def _affine(self, x, prefix: str):
        return ad.matmul(x, self.params[prefix + ".w"]) + self.params[prefix + ".b"]

    def _mlp2(self, x, prefix: str):
        h = ad.relu(ad.matmul(x, self.params[prefix + ".w1"]) + self.params[prefix + ".b1"])
        return ad.matmul(h, self.params[prefix + ".w2"]) + self.params[prefix + ".b2"]

    # ------------------------------------------------------------------
    # encoder
    # ------------------------------------------------------------------
    def encode_box(self, box: BoxParams):
        """Embed a single box into a ``[1, D]`` feature row."""
        vec = box.as_vector().reshape(1, 10)
        return ad.relu(self._affine(vec, "enc_box"))

    def encode_graph(self, child_features, child_labels: Sequence[int], edges: Sequence[RelEdge]):
        """Fold one sibling graph into its parent feature ``[1, D]``.

        ``child_features`` is ``[n, D]``; labels index the vocabulary.
        Message rounds average typed messages over incident edges;
        nodes without edges keep their features unchanged, so a single
        child with no edges passes through bitwise.
        """
        cfg = self.config
        n = len(child_labels)
        if n == 0:
            raise ShapeError("cannot encode a graph with no children")
        if n > cfg.max_children:
            raise ShapeError(f"graph has {n} children, model supports {cfg.max_children}")
        onehot = np.zeros((n, cfg.label_count), dtype=np.float64)
        for i, lab in enumerate(child_labels):
            if not 0 <= lab < cfg.label_count:
                raise ShapeError(f"label index {lab} out of range for vocabulary of {cfg.label_count}")
            onehot[i, lab] = 1.0
        f = ad.concat([child_features, onehot], axis=1)  # [n, E]
        rounds = [f]
        use_edges = bool(edges) and not cfg.no_edges and n > 1
        if use_edges:
            dst, src, tvec = _directed_edges(edges, n)
            counts = np.bincount(dst, minlength=n).astype(np.float64)
            denom = np.maximum(counts, 1.0)[:, None]
            has = (counts > 0.0).astype(np.float64)[:, None]
            for t in range(cfg.mp_rounds):
                m_in = ad.concat([ad.take(f, dst), ad.take(f, src), tvec], axis=1)
                h = ad.relu(self._affine(m_in, f"enc_msg{t}"))
                pooled = ad.segment_sum(h, dst, n) / denom
                f = has * pooled + (1.0 - has) * f
                rounds.append(f)
        else:
            rounds.extend([f] * cfg.mp_rounds)
        pooled = [ad.reshape(ad.max_along(r, axis=0)[0], (1, -1)) for r in rounds]
        return ad.relu(self._affine(ad.concat(pooled, axis=1), "enc_skip"))

    def encode_shape(self, shape: ShapeTree, record: Optional[Dict[Tuple[int, ...], object]] = None):
        """Fold a whole shape into its root feature ``[1, D]``.

        When ``record`` is given it is filled with the per-node features
        keyed by child-index path from the root.
        """

        def rec(part: Part, path: Tuple[int, ...]):
            if part.is_leaf:
                feat = self.encode_box(part.box)
            else:
                child_feats = ad.concat([rec(ch, path + (i,)) for i, ch in enumerate(part.children)], axis=0)
                feat = self.encode_graph(child_feats, [ch.label for ch in part.children], part.edges)
            if record is not None:
                record[path] = feat
            return feat

        return rec(shape.root, ())

    def reencode_from(self, shape: ShapeTree, replacements: Dict[Tuple[int, ...], object]):
        """Re-fold the tree with some node features replaced.

        Subtrees rooted at a replacement path are not re-encoded; their
        feature is taken from ``replacements`` verbatim and only the
        ancestors recompute.  Paths must resolve in ``shape``.
        """
        for path in replacements:
            node = shape.root
            for idx in path:
                if idx < 0 or idx >= len(node.children):
                    raise ShapeError(f"replacement path {path} does not resolve in shape")
                node = node.children[idx]

        def rec(part: Part, path: Tuple[int, ...]):
            if path in replacements:
                return replacements[path]
            if part.is_leaf:
                return self.encode_box(part.box)
            child_feats = ad.concat([rec(ch, path + (i,)) for i, ch in enumerate(part.children)], axis=0)
            return self.encode_graph(child_feats, [ch.label for ch in part.children], part.edges)

        return rec(shape.root, ())

    # ------------------------------------------------------------------
    # bottleneck
    # ------------------------------------------------------------------
    def bottleneck(self, feature):
        """Map a root feature to ``(mu, logvar)``, each ``[1, D]``."""
        return self._affine(feature, "vae_mu"), self._affine(feature, "vae_logvar")

    def sample_latent(self, mu, logvar, eps: Optional[np.ndarray]):
        """Reparameterised draw; ``eps=None`` returns ``mu`` itself."""
        if eps is None:
            return mu
        return mu + ad.exp(logvar * 0.5) * eps

    def encode_latent(self, shape: ShapeTree) -> np.ndarray:
        """Deterministic inference embedding (the posterior mean)."""
        mu, _ = self.bottleneck(self.encode_shape(shape))
        return ad.value(mu)

    # ------------------------------------------------------------------
    # decoder
    # ------------------------------------------------------------------
    def decode_root_feature(self, z):
        """Expand a latent ``[1, D]`` into the decoder's root feature."""
        return ad.relu(self._mlp2(z, "dec_root"))

    def decode_box(self, features):
        """Per-row oriented boxes from ``[k, D]`` features.

        Returns ``(raw, c, q, r)``: the raw 10-vector head output, then
        center, unit quaternion (identity-offset before normalization)
        and strictly positive extents.
        """
        raw = self._mlp2(features, "dec_box")
        c = raw[:, 0:3]
        q_raw = raw[:, 3:7] + _QUAT_OFFSET
        q = q_raw / ad.l2_norm(q_raw, axis=1, keepdims=True, eps=1e-12)
        r = ad.softplus(raw[:, 7:10])
        return raw, c, q, r

    def decode_leaf_logit(self, features):
        """Leaf-classifier logits ``[k]`` from ``[k, D]`` features."""
        return ad.reshape(self._mlp2(features, "dec_leaf"), (-1,))

    def decode_graph(self, parent_feature) -> DecodedGraph:
        """Expand one parent feature ``[1, D]`` into a slot graph."""
        cfg = self.config
        P = cfg.max_children
        init = ad.reshape(ad.relu(self._affine(parent_feature, "dec_parts")), (P, cfg.feature_dim))
        exist = ad.reshape(self._affine(init, "dec_exist"), (-1,))
        if cfg.no_edges:
            edge_logits = np.full((P, P, N_REL_TYPES), -np.inf)
            hard: List[Tuple[int, int, int]] = []
            feats = init
        else:
            src_i = np.repeat(np.arange(P), P)
            src_j = np.tile(np.arange(P), P)
            pair_in = ad.concat([ad.take(init, src_i), ad.take(init, src_j)], axis=1)
            raw_edges = ad.reshape(self._mlp2(pair_in, "dec_edge"), (P, P, N_REL_TYPES))
            edge_logits = (raw_edges + ad.transpose(raw_edges, (1, 0, 2))) * 0.5
            tri_a, tri_b = np.triu_indices(P, k=1)
            on = ad.value(edge_logits)[tri_a, tri_b, :] >= 0.0
            hard = [
                (int(tri_a[k]), int(tri_b[k]), int(t))
                for k, t in zip(*np.nonzero(on))
            ]
            feats = init
            if not cfg.no_decoder_mp and hard:
                dst, src, tvec = _directed_slot_edges(hard, P)
                counts = np.bincount(dst, minlength=P).astype(np.float64)
                denom = np.maximum(counts, 1.0)[:, None]
                has = (counts > 0.0).astype(np.float64)[:, None]
                for t in range(cfg.mp_rounds):
                    m_in = ad.concat([ad.take(feats, dst), ad.take(feats, src), tvec], axis=1)
                    h = ad.relu(self._affine(m_in, f"dec_msg{t}"))
                    pooled = ad.segment_sum(h, dst, P) / denom
                    feats = has * pooled + (1.0 - has) * feats
        label_logits = self._affine(feats, "dec_label")
        leaf_logits = self.decode_leaf_logit(feats)
        box_raw, box_c, box_q, box_r = self.decode_box(feats)
        return DecodedGraph(
            init_features=init,
            slot_features=feats,
            exist_logits=exist,
            edge_logits=edge_logits,
            label_logits=label_logits,
            leaf_logits=leaf_logits,
            box_raw=box_raw,
            box_c=box_c,
            box_q=box_q,
            box_r=box_r,
            hard_edges=hard,
        )

    # -- teacher mode ---------------------------------------------------
    def decode_teacher(self, z, reference: Part, matcher: MatcherFn) -> TeacherNode:
        """Decode following the structure of ``reference``.

        Every internal reference node triggers exactly one
        :meth:`decode_graph` call; the matcher assigns each reference
        child to a distinct slot and decoding recurses into slots whose
        assigned child is itself internal.
        """
        feat = self.decode_root_feature(z)
        return self._teacher_node(reference, feat, matcher, box=None)

    def _teacher_node(self, gt: Part, feature, matcher: MatcherFn, box) -> TeacherNode:
        if box is None:
            box_raw, box_c, box_q, box_r = self.decode_box(feature)
        else:
            box_raw, box_c, box_q, box_r = box
        node = TeacherNode(
            gt=gt,
            feature=feature,
            box_raw=box_raw,
            box_c=box_c,
            box_q=box_q,
            box_r=box_r,
            leaf_logit=self.decode_leaf_logit(feature),
        )
        if gt.is_leaf:
            return node
        if len(gt.children) > self.config.max_children:
            raise ShapeError(
                f"reference node has {len(gt.children)} children, model supports {self.config.max_children}"
            )
        graph = self.decode_graph(feature)
        pairs = matcher(gt.children, ad.value(graph.box_c), ad.value(graph.box_q), ad.value(graph.box_r))
        _check_assignment(pairs, len(gt.children), self.config.max_children)
        node.graph = graph
        node.assignment = sorted(pairs)
        for gi, j in node.assignment:
            child = gt.children[gi]
            if child.is_leaf:
                continue
            child_box = (
                graph.box_raw[j : j + 1],
                graph.box_c[j : j + 1],
                graph.box_q[j : j + 1],
                graph.box_r[j : j + 1],
            )
            node.slot_children[j] = self._teacher_node(
                child, graph.slot_features[j : j + 1], matcher, box=child_box
            )
        return node

    # -- free mode ------------------------------------------------------
    def decode_free(self, z, max_depth: Optional[int] = None) -> FreeDecode:
        """Threshold-driven decode used for generation and metrics.

        The root is a leaf when its leaf probability reaches 0.5; an
        internal root that keeps no slots yields the empty marker.
        Expansion stops at ``max_depth`` levels below the root
        (defaults to ``config.decode_depth_cap``).
        """
        cap = self.config.decode_depth_cap if max_depth is None else max_depth
        feat = self.decode_root_feature(z)
        box_raw, box_c, box_q, box_r = self.decode_box(feat)
        root = self._free_node(
            feat,
            (box_c[0], box_q[0], box_r[0]),
            slot_path=(),
            depth=0,
            cap=cap,
            label_logits=None,
            exist_p=1.0,
        )
        if root is None:
            return FreeDecode(root=None, empty=True)
        return FreeDecode(root=root, empty=False)

    def _free_node(self, feature, box_cqr, slot_path, depth, cap, label_logits, exist_p) -> Optional[FreeNode]:
        leaf_logit = self.decode_leaf_logit(feature)[0]
        node = FreeNode(
            slot_path=slot_path,
            feature=feature,
            box_c=box_cqr[0],
            box_q=box_cqr[1],
            box_r=box_cqr[2],
            leaf_logit=leaf_logit,
            exist_p=exist_p,
            label_logits=label_logits,
        )
        if float(ad.value(leaf_logit)) >= 0.0 or depth >= cap:
            return node
        graph = self.decode_graph(feature)
        exist = ad.value(graph.exist_logits)
        retained = [j for j in range(self.config.max_children) if exist[j] >= 0.0]
        if not retained:
            if depth == 0:
                return None  # empty-shape marker
            return node
        probs = 1.0 / (1.0 + np.exp(-exist))
        index_of = {j: i for i, j in enumerate(retained)}
        for j in retained:
            child = self._free_node(
                graph.slot_features[j : j + 1],
                (graph.box_c[j], graph.box_q[j], graph.box_r[j]),
                slot_path=slot_path + (j,),
                depth=depth + 1,
                cap=cap,
                label_logits=graph.label_logits[j],
                exist_p=float(probs[j]),
            )
            node.children.append(child)
        for a, b, t in graph.hard_edges:
            if a in index_of and b in index_of:
                node.edges.append((index_of[a], index_of[b], REL_TYPES[t]))
        return node


def _directed_edges(edges: Sequence[RelEdge], n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Expand undirected typed edges into both directed messages."""
    dst, src, types = [], [], []
    for e in edges:
        if e.a >= n or e.b >= n:
            raise ShapeError(f"edge ({e.a}, {e.b}) out of range for {n} children")
        t = REL_TYPES.index(e.rel)
        dst.extend((e.a, e.b))
        src.extend((e.b, e.a))
        types.extend((t, t))
    tvec = np.zeros((len(types), N_REL_TYPES), dtype=np.float64)
    tvec[np.arange(len(types)), types] = 1.0
    return np.asarray(dst, dtype=np.intp), np.asarray(src, dtype=np.intp), tvec


def _directed_slot_edges(hard: Sequence[Tuple[int, int, int]], n: int):
    dst, src, types = [], [], []
    for a, b, t in hard:
        dst.extend((a, b))
        src.extend((b, a))
        types.extend((t, t))
    tvec = np.zeros((len(types), N_REL_TYPES), dtype=np.float64)
    tvec[np.arange(len(types)), types] = 1.0
    return np.asarray(dst, dtype=np.intp), np.asarray(src, dtype=np.intp), tvec


def _check_assignment(pairs: Sequence[Tuple[int, int]], n_children: int, n_slots: int) -> None:
    gis = sorted(gi for gi, _ in pairs)
    js = [j for _, j in pairs]
    if gis != list(range(n_children)):
        raise ValueError("matcher must assign every reference child exactly once")
    if len(set(js)) != len(js) or any(j < 0 or j >= n_slots for j in js):
        raise ValueError("matcher assigned slots outside range or reused a slot")


# ----------------------------------------------------------------------
# converting free decodes to shape trees
# ----------------------------------------------------------------------

def to_shape_tree(decode: FreeDecode, vocab: Vocabulary) -> ShapeTree:
    """Convert a free decode into a concrete :class:`ShapeTree`.

    The root takes the vocabulary's category label.  Child labels are
    the argmax over the parent label's legal children when that set is
    non-empty, otherwise the unrestricted argmax; this keeps emitted
    trees valid under the vocabulary.
    """
    if decode.root is None:
        raise ShapeError("cannot convert an empty decode to a shape")
    root_label = vocab.index(vocab.category)

    def build(node: FreeNode, label: int) -> Part:
        children = []
        legal = vocab.legal_child_indices(label)
        for ch in node.children:
            logits = np.asarray(ad.value(ch.label_logits), dtype=np.float64)
            if legal:
                sub = max(legal, key=lambda i: (logits[i], -i))
                child_label = int(sub)
            else:
                child_label = int(np.argmax(logits))
            children.append(build(ch, child_label))
        edges = [RelEdge(a, b, rel) for a, b, rel in node.edges]
        box = BoxParams(
            c=np.asarray(ad.value(node.box_c), dtype=np.float64),
            q=np.asarray(ad.value(node.box_q), dtype=np.float64),
            r=np.asarray(ad.value(node.box_r), dtype=np.float64),
        )
        return Part(label=label, box=box, children=children, edges=edges)

    return ShapeTree(category=vocab.category, root=build(decode.root, root_label))
