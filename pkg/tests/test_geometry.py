"""Sampling, chamfer, normals, symmetry transforms, adjacency detection."""

import numpy as np
import pytest

import structgen.autodiff as ad
import structgen.geometry as geom
from structgen.shapes import BoxParams, RelType


IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def _random_box(rng, span=0.6):
    c = rng.uniform(-span, span, 3)
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    r = rng.uniform(0.1, 0.8, 3)
    return BoxParams(c, q, r)


def _brute_chamfer(pa, wa, pb, wb, squared):
    d = np.zeros((len(pa), len(pb)))
    for i in range(len(pa)):
        for j in range(len(pb)):
            d[i, j] = np.sum((pa[i] - pb[j]) ** 2)
    if not squared:
        d = np.sqrt(d)
    return float(wa @ d.min(axis=1) + wb @ d.min(axis=0))


# ---------------------------------------------------------------------------
# sampling


def test_unit_cube_sample_counts_and_weights():
    for per_face in (9, 25, 49):
        u = geom.unit_cube_samples(per_face)
        assert u.points.shape == (6 * per_face, 3)
        assert u.weights.shape == (6 * per_face,)
        assert np.isclose(u.weights.sum(), 1.0)
        # every sample sits on the surface of the half-unit cube
        assert np.allclose(np.abs(u.points).max(axis=1), 0.5)


def test_unit_cube_samples_mirror_symmetric():
    u = geom.unit_cube_samples(25)
    pts = {tuple(np.round(p, 12)) for p in u.points}
    for axis in range(3):
        flip = u.points.copy()
        flip[:, axis] = -flip[:, axis]
        assert {tuple(np.round(p, 12)) for p in flip} == pts


def test_box_weights_proportional_to_face_area():
    r = np.array([2.0, 1.0, 1.0])
    box = BoxParams(np.zeros(3), IDENTITY_Q, r)
    cloud = geom.box_samples(box, per_face=9)
    assert np.isclose(cloud.weights.sum(), 1.0)
    # Faces normal to x have area r1*r2 = 1; the others have area 2.
    per_face_mass = cloud.weights.reshape(6, 9).sum(axis=1)
    big = per_face_mass.max()
    small = per_face_mass.min()
    assert np.isclose(big / small, 2.0)


def test_box_weights_rotation_invariant():
    rng = np.random.default_rng(0)
    for _ in range(10):
        r = rng.uniform(0.2, 2.0, 3)
        c = rng.uniform(-1, 1, 3)
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        w_rot = geom.box_samples(BoxParams(c, q, r), 9).weights
        w_axis = geom.box_samples(BoxParams(np.zeros(3), IDENTITY_Q, r), 9).weights
        assert np.allclose(w_rot, w_axis, atol=1e-15)


# ---------------------------------------------------------------------------
# chamfer


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(1)
    for trial in range(100):
        n, m = rng.integers(1, 51), rng.integers(1, 51)
        pa, pb = rng.standard_normal((n, 3)), rng.standard_normal((m, 3))
        wa = rng.random(n)
        wa /= wa.sum()
        wb = rng.random(m)
        wb /= wb.sum()
        for squared in (True, False):
            got = geom.chamfer(pa, wa, pb, wb, squared=squared)
            want = _brute_chamfer(pa, wa, pb, wb, squared)
            assert abs(got - want) <= 1e-12


def test_chamfer_symmetry_and_identity_exact():
    rng = np.random.default_rng(2)
    for _ in range(25):
        n, m = rng.integers(1, 40), rng.integers(1, 40)
        pa, pb = rng.standard_normal((n, 3)), rng.standard_normal((m, 3))
        wa = rng.random(n)
        wa /= wa.sum()
        wb = rng.random(m)
        wb /= wb.sum()
        assert geom.chamfer(pa, wa, pb, wb) == geom.chamfer(pb, wb, pa, wa)
        assert geom.chamfer(pa, wa, pa, wa) == 0.0
        assert geom.chamfer(pa, wa, pa, wa, squared=False) == 0.0


def test_chamfer_traced_matches_plain_bitwise():
    rng = np.random.default_rng(3)
    pa, pb = rng.standard_normal((12, 3)), rng.standard_normal((9, 3))
    wa = np.full(12, 1 / 12)
    wb = np.full(9, 1 / 9)
    plain = geom.chamfer(pa, wa, pb, wb)
    with ad.Tape():
        t = ad.Tensor(pa, requires_grad=True)
        traced = geom.chamfer(t, wa, pb, wb)
    assert ad.value(traced) == plain


def test_chamfer_batch_matches_loop():
    rng = np.random.default_rng(4)
    pa = rng.standard_normal((5, 8, 3))
    pb = rng.standard_normal((5, 6, 3))
    wa = np.full((5, 8), 1 / 8)
    wb = np.full((5, 6), 1 / 6)
    batch = geom.chamfer_batch(pa, wa, pb, wb)
    for k in range(5):
        single = geom.chamfer(pa[k], wa[k], pb[k], wb[k])
        assert np.isclose(ad.value(batch)[k], single, atol=1e-15)


def test_min_pair_distance_matches_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(50):
        pa = rng.standard_normal((rng.integers(1, 30), 3))
        pb = rng.standard_normal((rng.integers(1, 30), 3))
        want = min(
            float(np.sum((a - b) ** 2)) for a in pa for b in pb
        )
        assert abs(geom.min_pair_distance(pa, pb) - want) <= 1e-15


# ---------------------------------------------------------------------------
# normals


def test_normal_distance_45_degree_value():
    q45 = geom.quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), np.pi / 4)
    val = float(geom.normal_distance(IDENTITY_Q, q45))
    # Four of six normals sit 45 degrees from their nearest counterpart
    # (squared distance 2 - sqrt(2) each way); the y normals coincide.
    expected = 2 * (4 * (2 - np.sqrt(2))) / 6
    assert val == pytest.approx(expected, abs=1e-12)
    assert val == pytest.approx(0.7810485835025398, abs=1e-12)


def test_normal_distance_invariant_under_cube_rotations():
    rng = np.random.default_rng(6)
    group = geom.cube_rotation_group()
    assert group.shape == (24, 3, 3)
    for trial in range(5):
        q1 = rng.standard_normal(4)
        q1 /= np.linalg.norm(q1)
        q2 = rng.standard_normal(4)
        q2 /= np.linalg.norm(q2)
        base = float(geom.normal_distance(q1, q2))
        for m in group:
            qr = geom.quat_from_matrix(geom.rotation_from_quat(q1) @ m)
            val = float(geom.normal_distance(qr, q2))
            assert abs(val - base) <= 1e-12
        for m in group:
            qr = geom.quat_from_matrix(geom.rotation_from_quat(q2) @ m)
            val = float(geom.normal_distance(q1, qr))
            assert abs(val - base) <= 1e-12


def test_cube_rotation_group_is_a_group():
    group = geom.cube_rotation_group()
    seen = {tuple(np.round(m, 9).ravel()) for m in group}
    assert len(seen) == 24
    for m in group:
        assert np.allclose(m @ m.T, np.eye(3), atol=1e-12)
        assert np.isclose(np.linalg.det(m), 1.0)
    # closure under composition
    for a in group[:6]:
        for b in group[:6]:
            assert tuple(np.round(a @ b, 9).ravel()) in seen


# ---------------------------------------------------------------------------
# symmetry transforms


def test_reflection_maps_constructed_pair_exactly():
    rng = np.random.default_rng(7)
    for _ in range(20):
        r = rng.uniform(0.1, 0.5, 3)
        ci = rng.uniform(-1, -0.2, 3)
        cj = ci.copy()
        cj[0] = -cj[0]  # partner mirrored across the x=0 plane... but the
        # transform is defined by the pair itself, so any mirror plane works.
        pts = geom.box_samples(BoxParams(ci, IDENTITY_Q, r), 9).points
        # reflect the cloud through the perpendicular bisector plane of (ci, cj)
        n = (cj - ci) / np.linalg.norm(cj - ci)
        mid = (ci + cj) / 2
        partner = pts - 2 * ((pts - mid) @ n)[:, None] * n
        moved = geom.apply_sym_transform(pts, ci, cj, RelType.REFLECTIVE)
        assert np.allclose(moved, partner, atol=1e-12)


def test_translation_maps_constructed_pair_exactly():
    rng = np.random.default_rng(8)
    for _ in range(20):
        ci = rng.uniform(-1, 1, 3)
        cj = rng.uniform(-1, 1, 3)
        pts = rng.standard_normal((30, 3))
        moved = geom.apply_sym_transform(pts, ci, cj, RelType.TRANSLATIONAL)
        assert np.allclose(moved, pts + (cj - ci), atol=1e-15)


def test_rotation_about_centroid_maps_ring_exactly():
    # Four boxes in a ring about the y-axis through the centroid.
    angles = [0, np.pi / 2, np.pi, 3 * np.pi / 2]
    centers = np.array([[np.cos(a), 0.3, np.sin(a)] for a in angles])
    centroid = centers.mean(axis=0)
    pts = geom.box_samples(BoxParams(centers[0], IDENTITY_Q, np.full(3, 0.2)), 9).points
    moved = geom.apply_sym_transform(
        pts, centers[0], centers[1], RelType.ROTATIONAL, centroid=centroid
    )
    # the moved cloud must sit around centers[1] at the same radius
    d0 = np.linalg.norm(pts - centers[0], axis=1)
    d1 = np.linalg.norm(moved - centers[1], axis=1)
    assert np.allclose(np.sort(d0), np.sort(d1), atol=1e-12)
    assert np.allclose(moved.mean(axis=0), centers[1], atol=1e-12)


def test_rho_tau_matrix_matches_apply_sym_transform():
    rng = np.random.default_rng(9)
    for rel in (RelType.REFLECTIVE, RelType.TRANSLATIONAL, RelType.ROTATIONAL):
        for _ in range(10):
            bi = _random_box(rng)
            bj = _random_box(rng)
            centroid = rng.uniform(-1, 1, 3) if rel == RelType.ROTATIONAL else None
            m = geom.rho_tau(bi, bj, rel, centroid=centroid)
            pts = rng.standard_normal((15, 3))
            via_matrix = geom.apply_affine(m, pts)
            direct = geom.apply_sym_transform(pts, bi.c, bj.c, rel, centroid=centroid)
            assert np.allclose(via_matrix, direct, atol=1e-12)


def test_symmetric_pair_consistency_below_1e9():
    """A cloud mapped by its own relation lands on the partner cloud."""
    rng = np.random.default_rng(10)
    for _ in range(10):
        r = rng.uniform(0.1, 0.4, 3)
        ci = rng.uniform(-1.0, -0.2, 3)

        # translation partner
        delta = rng.uniform(0.5, 1.0, 3)
        a = geom.box_samples(BoxParams(ci, IDENTITY_Q, r), 9)
        b = geom.box_samples(BoxParams(ci + delta, IDENTITY_Q, r), 9)
        moved = geom.apply_sym_transform(a.points, ci, ci + delta, RelType.TRANSLATIONAL)
        assert geom.chamfer(moved, a.weights, b.points, b.weights) <= 1e-9

        # reflection partner about the bisector plane of the two centers
        cj = ci + np.array([2 * abs(ci[0]), 0.0, 0.0])
        n = np.array([1.0, 0.0, 0.0])
        mid = (ci + cj) / 2
        refl_pts = a.points - 2 * ((a.points - mid) @ n)[:, None] * n
        moved = geom.apply_sym_transform(a.points, ci, cj, RelType.REFLECTIVE)
        assert geom.chamfer(
            moved, a.weights, refl_pts, a.weights
        ) <= 1e-9


def test_degenerate_pair_gives_identity():
    pts = np.random.default_rng(11).standard_normal((10, 3))
    c = np.array([0.3, 0.3, 0.3])
    for rel in (RelType.REFLECTIVE, RelType.TRANSLATIONAL, RelType.ROTATIONAL):
        moved = geom.apply_sym_transform(pts, c, c.copy(), rel)
        assert np.array_equal(moved, pts)


# ---------------------------------------------------------------------------
# adjacency


def test_detect_adjacency_touching_and_separated():
    r = np.array([0.2, 0.2, 0.2])
    a = BoxParams(np.zeros(3), IDENTITY_Q, r)
    touching = BoxParams(np.array([0.2, 0.0, 0.0]), IDENTITY_Q, r)
    near = BoxParams(np.array([0.203, 0.0, 0.0]), IDENTITY_Q, r)  # 3mm gap, under 5%
    far = BoxParams(np.array([0.5, 0.0, 0.0]), IDENTITY_Q, r)
    assert geom.detect_adjacency(a, touching)
    assert geom.detect_adjacency(a, near)
    assert not geom.detect_adjacency(a, far)


def test_quaternion_helpers_roundtrip():
    rng = np.random.default_rng(12)
    for _ in range(25):
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        m = geom.rotation_from_quat(q)
        q2 = geom.quat_from_matrix(np.asarray(m))
        # same rotation up to global sign
        assert min(np.abs(q2 - q).max(), np.abs(q2 + q).max()) < 1e-12
        qa = rng.standard_normal(4)
        qa /= np.linalg.norm(qa)
        prod = geom.quat_multiply(qa, q)
        assert np.allclose(
            geom.rotation_from_quat(prod),
            np.asarray(geom.rotation_from_quat(qa)) @ np.asarray(m),
            atol=1e-12,
        )


def test_merge_clouds_renormalizes_weights():
    rng = np.random.default_rng(13)
    clouds = [
        geom.Cloud(rng.standard_normal((4, 3)), np.full(4, 0.25)),
        geom.Cloud(rng.standard_normal((6, 3)), np.full(6, 1 / 6)),
    ]
    merged = geom.merge_clouds(clouds)
    assert merged.points.shape == (10, 3)
    assert np.isclose(merged.weights.sum(), 1.0)
