"""Tape-based reverse-mode differentiation: gradient and optimizer checks."""

import numpy as np
import pytest

import structgen.autodiff as ad


EPS = 1e-5
RTOL = 1e-4


def _rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def _fd_check(build, arrays, seed, floor=1e-6):
    """Compare tape gradients of ``build(*tensors)`` against central differences.

    ``build`` must reduce to a scalar tensor. Every entry of every input
    array is perturbed; the max relative error is returned.
    """
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        loss = build(*tensors)
        grads = tape.gradients(loss, tensors)
    worst = 0.0
    for t, g in zip(tensors, grads):
        flat = t.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + EPS
            hi = float(ad.value(build(*tensors)))
            flat[i] = orig - EPS
            lo = float(ad.value(build(*tensors)))
            flat[i] = orig
            fd[i] = (hi - lo) / (2 * EPS)
        worst = max(worst, _rel_err(np.asarray(g).reshape(-1), fd, floor))
    return worst


def _weighted_sum(rng, shape):
    w = rng.standard_normal(shape)
    return lambda t: ad.sum_(t * w)


CASES = []


def case(fn):
    CASES.append(fn)
    return fn


@case
def _case_add(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    w = rng.standard_normal((3, 4))
    return [a, b], lambda x, y: ad.sum_((x + y) * w)


@case
def _case_add_broadcast(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((1, 4))
    w = rng.standard_normal((3, 4))
    return [a, b], lambda x, y: ad.sum_((x + y) * w)


@case
def _case_sub(rng):
    a, b = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
    w = rng.standard_normal((2, 5))
    return [a, b], lambda x, y: ad.sum_((x - y) * w)


@case
def _case_mul_broadcast(rng):
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 1))
    w = rng.standard_normal((4, 3))
    return [a, b], lambda x, y: ad.sum_(x * y * w)


@case
def _case_div(rng):
    a = rng.standard_normal((3, 3))
    b = rng.uniform(0.5, 2.0, (3, 3)) * np.where(rng.random((3, 3)) < 0.5, -1, 1)
    w = rng.standard_normal((3, 3))
    return [a, b], lambda x, y: ad.sum_(x / y * w)


@case
def _case_matmul(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    w = rng.standard_normal((3, 2))
    return [a, b], lambda x, y: ad.sum_((x @ y) * w)


@case
def _case_neg_square_sqrt(rng):
    a = rng.uniform(0.2, 2.0, (2, 4))
    w = rng.standard_normal((2, 4))
    return [a], lambda x: ad.sum_((ad.sqrt(x) + ad.square(-x)) * w)


@case
def _case_relu(rng):
    # Keep values away from the kink so central differences are valid.
    a = rng.standard_normal((4, 4))
    a[np.abs(a) < 0.05] = 0.3
    w = rng.standard_normal((4, 4))
    return [a], lambda x: ad.sum_(ad.relu(x) * w)


@case
def _case_sigmoid_tanh(rng):
    a = rng.standard_normal((3, 3))
    w = rng.standard_normal((3, 3))
    return [a], lambda x: ad.sum_((ad.sigmoid(x) + ad.tanh(x)) * w)


@case
def _case_exp_log(rng):
    a = rng.uniform(0.3, 2.5, (3, 3))
    w = rng.standard_normal((3, 3))
    return [a], lambda x: ad.sum_((ad.exp(x) * 0.1 + ad.log(x)) * w)


@case
def _case_softplus(rng):
    a = rng.standard_normal((5,)) * 3
    w = rng.standard_normal((5,))
    return [a], lambda x: ad.sum_(ad.softplus(x) * w)


@case
def _case_sum_axes(rng):
    a = rng.standard_normal((3, 4))
    w0 = rng.standard_normal((4,))
    w1 = rng.standard_normal((3, 1))
    return [a], lambda x: ad.sum_(ad.sum_(x, axis=0) * w0) + ad.sum_(
        ad.sum_(x, axis=1, keepdims=True) * w1
    )


@case
def _case_mean(rng):
    a = rng.standard_normal((4, 3))
    w = rng.standard_normal((3,))
    return [a], lambda x: ad.sum_(ad.mean_(x, axis=0) * w) + ad.mean_(x)


@case
def _case_max_min_along(rng):
    a = rng.standard_normal((5, 4))
    # Separate the extremes so the argmax never flips under the probe.
    a[0] += 3.0
    a[-1] -= 3.0
    wa = rng.standard_normal((4,))
    wb = rng.standard_normal((4,))

    def build(x):
        mx, _ = ad.max_along(x, axis=0)
        mn, _ = ad.min_along(x, axis=0)
        return ad.sum_(mx * wa) + ad.sum_(mn * wb)

    return [a], build


@case
def _case_concat(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 3))
    w = rng.standard_normal((6, 3))
    return [a, b], lambda x, y: ad.sum_(ad.concat([x, y], axis=0) * w)


@case
def _case_reshape_transpose(rng):
    a = rng.standard_normal((2, 6))
    w = rng.standard_normal((3, 4))
    return [a], lambda x: ad.sum_(
        ad.transpose(ad.reshape(x, (4, 3)), (1, 0)) * w
    )


@case
def _case_take(rng):
    a = rng.standard_normal((5, 3))
    idx = np.array([0, 2, 2, 4, 1])
    w = rng.standard_normal((5, 3))
    return [a], lambda x: ad.sum_(ad.take(x, idx) * w)


@case
def _case_getitem(rng):
    a = rng.standard_normal((4, 5))
    w = rng.standard_normal((2, 5))
    return [a], lambda x: ad.sum_(ad.getitem(x, slice(1, 3)) * w)


@case
def _case_segment_sum(rng):
    a = rng.standard_normal((6, 3))
    seg = np.array([0, 0, 1, 2, 2, 2])
    w = rng.standard_normal((4, 3))
    return [a], lambda x: ad.sum_(ad.segment_sum(x, seg, 4) * w)


@case
def _case_bce(rng):
    logits = rng.standard_normal((6,)) * 2
    targets = rng.random((6,))
    return [logits], lambda x: ad.sum_(ad.bce_with_logits(x, targets))


@case
def _case_softmax_xent(rng):
    logits = rng.standard_normal((4, 5))
    labels = rng.integers(0, 5, size=4)
    return [logits], lambda x: ad.sum_(ad.softmax_cross_entropy(x, labels))


@case
def _case_l2_norm(rng):
    a = rng.standard_normal((3, 4)) + 0.5
    w = rng.standard_normal((3, 1))
    return [a], lambda x: ad.sum_(ad.l2_norm(x, axis=1, keepdims=True) * w)


@case
def _case_softmax(rng):
    a = rng.standard_normal((3, 4))
    w = rng.standard_normal((3, 4))
    return [a], lambda x: ad.sum_(ad.softmax(x, axis=-1) * w)


@pytest.mark.parametrize("builder", CASES, ids=lambda f: f.__name__.lstrip("_"))
def test_primitive_gradients_match_finite_differences(builder):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        arrays, build = builder(rng)
        worst = max(worst, _fd_check(build, arrays, seed))
    assert worst < RTOL, f"max rel err {worst:.3e}"


def test_backward_bit_deterministic():
    rng = np.random.default_rng(2)
    a = ad.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    b = ad.Tensor(rng.standard_normal((4, 4)), requires_grad=True)

    def run():
        with ad.Tape() as tape:
            loss = ad.sum_(ad.tanh(a @ b) * ad.sigmoid(a + b))
            return [np.asarray(g).copy() for g in tape.gradients(loss, [a, b])]

    g1, g2 = run(), run()
    for x, y in zip(g1, g2):
        assert np.array_equal(x, y)


def test_max_routing_stable_under_small_perturbation():
    rng = np.random.default_rng(3)
    base = rng.standard_normal((5, 3))
    base[2] += 4.0  # row 2 is the argmax everywhere
    gaps = np.sort(base, axis=0)[-1] - np.sort(base, axis=0)[-2]

    def grads_for(arr):
        t = ad.Tensor(arr, requires_grad=True)
        with ad.Tape() as tape:
            mx, idx = ad.max_along(t, axis=0)
            loss = ad.sum_(mx)
            (g,) = tape.gradients(loss, [t])
        return np.asarray(g), np.asarray(idx)

    g0, idx0 = grads_for(base.copy())
    perturbed = base.copy()
    perturbed[0] += gaps * 0.4  # stays below the winner by > gap/2
    g1, idx1 = grads_for(perturbed)
    assert np.array_equal(idx0, idx1)
    assert np.array_equal(g0, g1)
    mx0 = base.max(axis=0)
    mx1 = perturbed.max(axis=0)
    assert np.array_equal(mx0, mx1)


def test_unused_parameter_gets_zero_gradient():
    a = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    unused = ad.Tensor(np.ones((3,)), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_(a * a)
        ga, gu = tape.gradients(loss, [a, unused])
    assert np.array_equal(np.asarray(ga), 2 * np.ones((2, 2)))
    assert np.array_equal(np.asarray(gu), np.zeros((3,)))


def test_value_passthrough():
    t = ad.Tensor(np.arange(3.0))
    assert np.array_equal(ad.value(t), np.arange(3.0))
    assert ad.value(2.5) == 2.5
    arr = np.ones(4)
    assert ad.value(arr) is arr


# ---------------------------------------------------------------------------
# optimizer


def test_adam_single_step_matches_closed_form():
    p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    g = np.array([0.5, -1.5])
    state = ad.AdamState()
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    ad.adam_step({"p": p}, {"p": g}, state, lr=lr, beta1=b1, beta2=b2, eps=eps)
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    m_hat = m / (1 - b1)
    v_hat = v / (1 - b2)
    expected = np.array([1.0, -2.0]) - lr * m_hat / (np.sqrt(v_hat) + eps)
    assert np.allclose(p.data, expected, atol=1e-15)
    assert state.step == 1


def test_adam_two_steps_track_moments():
    p = ad.Tensor(np.array([0.3]), requires_grad=True)
    state = ad.AdamState()
    g1, g2 = np.array([0.2]), np.array([-0.4])
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8

    x = np.array([0.3])
    m = np.zeros(1)
    v = np.zeros(1)
    for step, g in ((1, g1), (2, g2)):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + eps)

    ad.adam_step({"p": p}, {"p": g1}, state, lr=lr)
    ad.adam_step({"p": p}, {"p": g2}, state, lr=lr)
    assert np.allclose(p.data, x, atol=1e-15)


def test_adam_rejects_nonfinite_gradient():
    p = ad.Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(FloatingPointError):
        ad.adam_step({"p": p}, {"p": np.array([1.0, np.nan])}, ad.AdamState(), lr=1e-3)


def test_clip_global_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([0.0, 4.0])}
    norm = ad.clip_global_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    clipped = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    assert clipped == pytest.approx(1.0)

    grads2 = {"a": np.array([0.3])}
    norm2 = ad.clip_global_norm(grads2, 1.0)
    assert norm2 == pytest.approx(0.3)
    assert grads2["a"][0] == pytest.approx(0.3)  # under the cap: untouched


# ---------------------------------------------------------------------------
# checkpoint container


def test_tensor_container_bit_exact_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    named = {
        "w1": rng.standard_normal((7, 3)),
        "b": rng.standard_normal((3,)),
        "scalarish": np.array([np.pi]),
    }
    path = tmp_path / "t.sgck"
    ad.save_tensors(path, named, config_digest="abc123")
    back, digest, version = ad.load_tensors(path)
    assert digest == "abc123"
    assert set(back) == set(named)
    for k in named:
        assert np.array_equal(back[k], named[k])
        assert back[k].dtype == np.float64


def test_tensor_container_rejects_garbage(tmp_path):
    path = tmp_path / "bad.sgck"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(Exception):
        ad.load_tensors(path)
