"""Reconstruction and generation metrics: conventions and oracles."""

import numpy as np
import pytest

import structgen.geometry as geom
from structgen import metrics
from structgen.model import FreeDecode, FreeNode
from structgen.shapes import RelType


def _identity_decode(shape, drop_paths=frozenset(), extra_edges=None):
    """A free decode that mirrors the reference exactly.

    ``drop_paths`` removes nodes by child-index path; ``extra_edges``
    maps child-index paths to additional (i, j, rel) tuples.
    """
    extra_edges = extra_edges or {}

    def build(part, path):
        node = FreeNode(
            slot_path=path,
            feature=None,
            box_c=part.box.c.copy(),
            box_q=part.box.q.copy(),
            box_r=part.box.r.copy(),
            leaf_logit=(-5.0 if part.children else 5.0),
            exist_p=1.0,
            label_logits=None,
        )
        kept = []
        index_map = {}
        for i, ch in enumerate(part.children):
            if path + (i,) in drop_paths:
                continue
            index_map[i] = len(kept)
            kept.append(build(ch, path + (i,)))
        node.children = kept
        node.edges = [
            (index_map[e.a], index_map[e.b], e.rel)
            for e in part.edges
            if e.a in index_map and e.b in index_map
        ]
        node.edges += list(extra_edges.get(path, []))
        return node

    return FreeDecode(root=build(shape.root, ()), empty=False)


def _empty_decode():
    return FreeDecode(root=None, empty=True)


# ---------------------------------------------------------------------------
# shape_metrics conventions


def test_identity_decode_scores_zero(chair_corpus16):
    for shape in chair_corpus16[:6]:
        row = metrics.shape_metrics(shape, _identity_decode(shape), per_face=9)
        assert row["e_p"] == 0.0
        assert row["e_h"] == 0.0
        assert row["e_r"] == 0.0
        assert row["e_rc"] <= 1e-9
        assert row["e_gc"] <= 1e-9
        assert row["gc_skipped"] == 0
        assert row["n_ref"] == row["n_dec"] == row["n_matched"] == shape.count_parts()


def test_dropped_leaf_accounting(chair_corpus16):
    shape = chair_corpus16[0]
    root = shape.root
    # drop the first leaf child of the first internal child
    target = None
    for i, ch in enumerate(root.children):
        if ch.children:
            for j, grand in enumerate(ch.children):
                if grand.is_leaf:
                    target = (i, j)
                    break
        if target:
            break
    assert target is not None
    decode = _identity_decode(shape, drop_paths={target})
    row = metrics.shape_metrics(shape, decode, per_face=9)
    n = shape.count_parts()
    dropped_subtree = 1
    assert row["e_h"] == pytest.approx(dropped_subtree / n)
    # edges incident to the dropped child are unmatched on the gt side
    parent = root.children[target[0]]
    lost = sum(1 for e in parent.edges if target[1] in (e.a, e.b))
    total = shape.count_edges()
    tp = total - lost
    expected_e_r = 1.0 - 2 * tp / (2 * tp + lost)
    assert row["e_r"] == pytest.approx(expected_e_r)
    assert row["e_p"] == 0.0  # every matched part is exact


def test_empty_decode_conventions(chair_corpus16):
    shape = chair_corpus16[0]
    row = metrics.shape_metrics(shape, _empty_decode(), per_face=9)
    assert row["e_h"] == 1.0
    assert row["e_r"] == 1.0
    assert row["e_p"] == 0.0  # no matched parts: vacuous mean
    assert row["gc_skipped"] == shape.count_edges()
    assert row["n_dec"] == 0


def test_edge_mismatch_only_on_one_side(chair_corpus16):
    shape = chair_corpus16[0]
    # an invented decoded edge at the root is a false positive
    decode = _identity_decode(
        shape, extra_edges={(): [(0, 1, RelType.TRANSLATIONAL)]}
    )
    row = metrics.shape_metrics(shape, decode, per_face=9)
    total = shape.count_edges()
    assert row["e_r"] == pytest.approx(1.0 - 2 * total / (2 * total + 1))


def test_rectangular_matching_handles_more_gt_than_decoded(chair_corpus16):
    """When the decode keeps fewer children than the reference, matching
    still runs (transposed) and every decoded child is matched."""
    shape = None
    drop = None
    for cand in chair_corpus16:
        for i, ch in enumerate(cand.root.children):
            if ch.children and len(ch.children) >= 3:
                leaf_js = [j for j, g in enumerate(ch.children) if g.is_leaf]
                if len(leaf_js) >= 2:
                    shape = cand
                    drop = {(i, leaf_js[0]), (i, leaf_js[1])}
                    break
        if shape:
            break
    assert shape is not None
    row = metrics.shape_metrics(shape, _identity_decode(shape, drop_paths=drop), per_face=9)
    n = shape.count_parts()
    assert row["n_dec"] == n - 2
    assert row["n_matched"] == n - 2
    assert row["e_h"] == pytest.approx(2 / n)


def test_metric_ranges_on_random_decodes(chair_corpus16, small_model):
    rng = np.random.default_rng(17)
    for shape in chair_corpus16[:5]:
        z = rng.standard_normal((1, small_model.latent_dim))
        decode = small_model.decode_free(z)
        if decode.empty:
            continue
        row = metrics.shape_metrics(shape, decode, per_face=9)
        assert row["e_p"] >= 0.0
        assert 0.0 <= row["e_r"] <= 1.0
        assert row["e_h"] >= 0.0
        assert row["e_rc"] >= 0.0 and row["e_gc"] >= 0.0
        assert row["gc_skipped"] >= 0


def test_shape_metrics_deterministic(chair_corpus16, small_model):
    shape = chair_corpus16[2]
    z = small_model.encode_latent(shape)
    d1 = small_model.decode_free(z)
    d2 = small_model.decode_free(z)
    r1 = metrics.shape_metrics(shape, d1, per_face=9)
    r2 = metrics.shape_metrics(shape, d2, per_face=9)
    assert r1 == r2


# ---------------------------------------------------------------------------
# aggregation


def test_evaluate_reconstruction_aggregates(overfit_pair):
    model, shape = overfit_pair
    rows, means = metrics.evaluate_reconstruction(model, [shape, shape], per_face=9)
    assert len(rows) == 2
    assert means["n_shapes"] == 2
    assert means["n_empty"] == 0
    for key in metrics.METRIC_COLUMNS:
        assert np.isfinite(means[key])
    single = metrics.shape_metrics(
        shape, model.decode_free(model.encode_latent(shape)), per_face=9
    )
    assert means["e_p"] == pytest.approx(single["e_p"])
    assert rows[0] == rows[1] == single


def test_write_metrics_csv_roundtrip(tmp_path):
    rows = [
        {k: float(i) for k in metrics.METRIC_COLUMNS} for i in range(3)
    ]
    means = {k: 1.0 for k in metrics.METRIC_COLUMNS}
    path = tmp_path / "m.csv"
    metrics.write_metrics_csv(path, rows, means)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == ",".join(["shape"] + metrics.METRIC_COLUMNS)
    assert len(lines) == 1 + 3 + 1
    assert lines[-1].startswith("mean")
    # repr floats roundtrip exactly
    assert float(lines[1].split(",")[1]) == 0.0


# ---------------------------------------------------------------------------
# generation metrics


def test_quality_coverage_invariant_to_duplication():
    rng = np.random.default_rng(23)
    gen = [geom.Cloud(rng.standard_normal((6, 3)), np.full(6, 1 / 6)) for _ in range(4)]
    ref = [geom.Cloud(rng.standard_normal((6, 3)), np.full(6, 1 / 6)) for _ in range(5)]

    def quality_coverage(gen_clouds, ref_clouds):
        d = metrics._cross_chamfer(gen_clouds, ref_clouds)
        return float(d.min(axis=1).mean()), float(d.min(axis=0).mean())

    q1, c1 = quality_coverage(gen, ref)
    q2, _ = quality_coverage(gen, ref + ref)  # duplicated references
    assert q1 == pytest.approx(q2, abs=1e-15)
    _, c3 = quality_coverage(gen + gen, ref)  # duplicated generations
    assert c1 == pytest.approx(c3, abs=1e-15)


def test_generation_metrics_deterministic_and_finite(overfit_pair):
    model, shape = overfit_pair
    r1 = metrics.generation_metrics(model, [shape] * 3, n_samples=6, seed=11, per_face=9)
    r2 = metrics.generation_metrics(model, [shape] * 3, n_samples=6, seed=11, per_face=9)
    assert r1 == r2
    assert np.isfinite(r1["quality"]) and np.isfinite(r1["coverage"])
    assert r1["n_samples"] == 6
    assert r1["n_empty"] >= 0


def test_generation_metrics_raise_when_all_empty(chair_corpus16):
    from structgen.model import ModelConfig, ShapeVAE
    from structgen.shapes import get_vocabulary

    vocab = get_vocabulary("chair")
    m = ShapeVAE(
        ModelConfig(label_count=len(vocab.labels), feature_dim=16, hidden_dim=16),
        seed=0,
    )
    # force every decode empty: internal root whose slots all die
    m.params["dec_leaf.b2"].data[:] = -50.0
    m.params["dec_exist.b"].data[:] = -50.0
    with pytest.raises(RuntimeError, match="empty"):
        metrics.generation_metrics(
            m, chair_corpus16[:2], n_samples=4, seed=0, per_face=9
        )
