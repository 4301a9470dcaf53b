import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dialrank import autograd as ag


# ---------------------------------------------------------------------------
# independent oracles


def matmul_oracle(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def conv_block_oracle(x, w, b):
    c, h, wd = x.shape
    f = w.shape[0]
    h2, w2 = h - 2, wd - 2
    conv = np.zeros((f, h2, w2))
    for fi in range(f):
        for i in range(h2):
            for j in range(w2):
                s = b[fi]
                for ci in range(c):
                    for di in range(3):
                        for dj in range(3):
                            s += x[ci, i + di, j + dj] * w[fi, ci, di, dj]
                conv[fi, i, j] = max(s, 0.0)
    hp, wp = -(-h2 // 2), -(-w2 // 2)
    pooled = np.zeros((f, hp, wp))
    for fi in range(f):
        for i in range(hp):
            for j in range(wp):
                cells = [conv[fi, r, cc]
                         for r in range(2 * i, min(2 * i + 2, h2))
                         for cc in range(2 * j, min(2 * j + 2, w2))]
                pooled[fi, i, j] = max(cells)
    return pooled.reshape(-1)


def lstm_oracle(x, wx, wh, b):
    """Scalar-by-scalar gate unrolling, independent of the vectorized kernel."""
    steps, _ = x.shape
    hidden = wh.shape[0]
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    h = [0.0] * hidden
    c = [0.0] * hidden
    states = []
    for t in range(steps):
        z = [0.0] * (4 * hidden)
        for j in range(4 * hidden):
            z[j] = b[j]
            for i in range(x.shape[1]):
                z[j] += x[t, i] * wx[i, j]
            for i in range(hidden):
                z[j] += h[i] * wh[i, j]
        new_h, new_c = [0.0] * hidden, [0.0] * hidden
        for i in range(hidden):
            gi = sig(z[i])
            gf = sig(z[hidden + i])
            gg = math.tanh(z[2 * hidden + i])
            go = sig(z[3 * hidden + i])
            new_c[i] = gf * c[i] + gi * gg
            new_h[i] = go * math.tanh(new_c[i])
        h, c = new_h, new_c
        states.append(list(h))
    return np.array(states)


def adam_oracle(p0, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar reference Adam for a single parameter over a gradient sequence."""
    p, m, v = p0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p -= lr * mhat / (math.sqrt(vhat) + eps)
    return p


# ---------------------------------------------------------------------------
# forward values


def test_matmul_identity():
    a = ag.tensor(np.eye(2))
    b = ag.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ag.matmul(a, b).data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_orthogonal_selection():
    out = ag.matmul(ag.tensor([[1.0, 0.0]]), ag.tensor([[0.0], [5.0]]))
    assert np.array_equal(out.data, [[0.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    got = ag.matmul(ag.tensor(a), ag.tensor(b)).data
    assert np.max(np.abs(got - matmul_oracle(a, b))) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ag.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ag.matmul(ag.tensor(np.ones((2, 3))), ag.tensor(np.ones((2, 3))))


def test_cosine_self_is_one():
    v = ag.tensor([1.0, -2.0, 0.5])
    assert ag.cosine(v, v).item() == pytest.approx(1.0, abs=1e-12)


def test_cosine_orthogonal_is_zero():
    assert ag.cosine(ag.tensor([1.0, 0.0]), ag.tensor([0.0, 1.0])).item() == 0.0


def test_cosine_matches_formula():
    a, b = np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0])
    want = float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    assert abs(ag.cosine(ag.tensor(a), ag.tensor(b)).item() - want) < 1e-12


def test_cosine_zero_vector_rule():
    assert ag.cosine(ag.tensor([0.0, 0.0]), ag.tensor([1.0, 1.0])).item() == 0.0


def test_elementwise_examples():
    assert np.array_equal(ag.relu(ag.tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert ag.sigmoid(ag.tensor(0.0)).item() == pytest.approx(0.5, abs=1e-15)
    assert np.allclose(ag.sub_from_one(ag.tensor([0.2, 1.0])).data, [0.8, 0.0], atol=1e-15)


def test_pool_examples():
    t = ag.tensor([[1.0, 5.0], [3.0, 2.0]])
    assert np.array_equal(ag.pool(t, 1, "max").data, [5.0, 3.0])
    assert np.array_equal(ag.pool(ag.tensor([[2.0, 4.0]]), 1, "mean").data, [3.0])


def test_pool_max_tie_routes_to_lowest_index():
    t = ag.tensor([[7.0, 7.0]], requires_grad=True)
    with ag.Tape() as tape:
        tape.backward(ag.asum(ag.pool(t, 1, "max")))
    assert np.array_equal(t.grad, [[1.0, 0.0]])


def test_pool_empty_axis_is_domain_error():
    with pytest.raises(ag.DomainError):
        ag.pool(ag.tensor(np.zeros((2, 0))), 1, "max")


def test_softmax_examples():
    assert np.allclose(ag.softmax(ag.tensor([4.2, 4.2, 4.2])).data, [1 / 3] * 3, atol=1e-15)
    assert np.array_equal(ag.softmax(ag.tensor([0.0])).data, [1.0])
    v = np.array([1.0, 2.0, 3.0])
    want = np.exp(v) / np.exp(v).sum()
    assert np.max(np.abs(ag.softmax(ag.tensor(v)).data - want)) < 1e-12


def test_conv_block_zero_input_zero_bias():
    x = ag.tensor(np.zeros((2, 6, 6)))
    w = ag.tensor(np.random.default_rng(1).normal(size=(8, 2, 3, 3)))
    b = ag.tensor(np.zeros(8))
    assert np.array_equal(ag.conv2d_block(x, w, b).data, np.zeros(8 * 2 * 2))


def test_conv_block_identity_center_kernel():
    # 3x3 input, delta kernel at the center: the block reduces to ReLU(center)
    x = np.arange(9.0).reshape(1, 3, 3) - 4.0
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = ag.conv2d_block(ag.tensor(x), ag.tensor(w), ag.tensor(np.zeros(1)))
    assert out.data.shape == (1,)
    assert out.data[0] == max(x[0, 1, 1], 0.0)


def test_conv_block_matches_nested_loop_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 9, 8))
    w = rng.normal(size=(4, 2, 3, 3))
    b = rng.normal(size=4)
    got = ag.conv2d_block(ag.tensor(x), ag.tensor(w), ag.tensor(b)).data
    assert np.max(np.abs(got - conv_block_oracle(x, w, b))) < 1e-12


def test_conv_block_too_small_is_error():
    with pytest.raises(ag.ShapeError):
        ag.conv2d_block(ag.tensor(np.zeros((1, 2, 2))), ag.tensor(np.zeros((1, 1, 3, 3))),
                        ag.tensor(np.zeros(1)))


def test_lstm_zero_params_zero_states():
    x = ag.tensor(np.random.default_rng(3).normal(size=(4, 3)))
    states, last = ag.lstm_sequence(x, ag.tensor(np.zeros((3, 8))),
                                    ag.tensor(np.zeros((2, 8))), ag.tensor(np.zeros(8)))
    assert np.array_equal(states.data, np.zeros((4, 2)))
    assert np.array_equal(last.data, np.zeros(2))


def test_lstm_t1_equals_single_cell_step():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 3))
    wx, wh, b = rng.normal(size=(3, 8)), rng.normal(size=(2, 8)), rng.normal(size=8)
    states, last = ag.lstm_sequence(ag.tensor(x), ag.tensor(wx), ag.tensor(wh), ag.tensor(b))
    assert np.max(np.abs(states.data - lstm_oracle(x, wx, wh, b))) < 1e-12
    assert np.array_equal(last.data, states.data[0])


def test_lstm_matches_unrolled_gate_oracle():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4))
    wx, wh, b = rng.normal(size=(4, 12)), rng.normal(size=(3, 12)), rng.normal(size=12)
    states, last = ag.lstm_sequence(ag.tensor(x), ag.tensor(wx), ag.tensor(wh), ag.tensor(b))
    want = lstm_oracle(x, wx, wh, b)
    assert np.max(np.abs(states.data - want)) < 1e-10
    assert np.max(np.abs(last.data - want[-1])) < 1e-10


def test_lstm_empty_sequence_is_domain_error():
    with pytest.raises(ag.DomainError):
        ag.lstm_sequence(ag.tensor(np.zeros((0, 3))), ag.tensor(np.zeros((3, 8))),
                         ag.tensor(np.zeros((2, 8))), ag.tensor(np.zeros(8)))


# ---------------------------------------------------------------------------
# backward pass


def test_backward_sum_gives_ones():
    w = ag.tensor([1.0, 2.0, 3.0], requires_grad=True)
    with ag.Tape() as tape:
        tape.backward(ag.asum(w))
    assert np.array_equal(w.grad, [1.0, 1.0, 1.0])


def test_backward_self_cosine_is_constant():
    w = ag.tensor([0.3, -1.2, 2.0], requires_grad=True)
    with ag.Tape() as tape:
        tape.backward(ag.cosine(w, w))
    assert np.max(np.abs(w.grad)) < 1e-12


def test_backward_rejects_non_scalar_loss():
    w = ag.tensor([1.0, 2.0], requires_grad=True)
    with ag.Tape() as tape:
        out = ag.relu(w)
        with pytest.raises(ag.UsageError):
            tape.backward(out)


def test_fanout_accumulates():
    w = ag.tensor([0.5, -0.7], requires_grad=True)
    with ag.Tape() as tape:
        tape.backward(ag.asum(ag.add(w, w)))
    two_use = w.grad.copy()
    w.zero_grad()
    with ag.Tape() as tape:
        tape.backward(ag.asum(w))
    assert np.allclose(two_use, 2.0 * w.grad, atol=1e-15)


def test_adam_zero_gradient_is_identity():
    p = ag.tensor([1.0, 2.0], requires_grad=True)
    state = ag.AdamState([p])
    ag.adam_step([p], [np.zeros(2)], state)
    assert np.array_equal(p.data, [1.0, 2.0])
    assert np.array_equal(state.m[0], np.zeros(2))
    assert np.array_equal(state.v[0], np.zeros(2))


def test_adam_first_step_direction_and_magnitude():
    # bias-corrected first step moves by ~lr against the gradient sign
    g = np.array([0.4, -3.0])
    p = ag.tensor([0.0, 0.0], requires_grad=True)
    ag.adam_step([p], [g], ag.AdamState([p]), lr=1e-3)
    want = -1e-3 * g / (np.abs(g) + 1e-8)
    assert np.max(np.abs(p.data - want)) < 1e-12


def test_adam_two_steps_match_scalar_reference():
    grads = [0.3, -0.9]
    p = ag.tensor([2.0], requires_grad=True)
    state = ag.AdamState([p])
    for g in grads:
        ag.adam_step([p], [np.array([g])], state, lr=1e-3)
    assert abs(p.data[0] - adam_oracle(2.0, grads)) < 1e-12


def test_clip_grad_norm():
    grads = [np.array([3.0, 4.0])]
    total = ag.clip_grad_norm(grads, 1.0)
    assert total == pytest.approx(5.0)
    assert np.allclose(grads[0], [0.6, 0.8])


# ---------------------------------------------------------------------------
# finite-difference gradient checks, one per op family


def _fd_case(name, make):
    params, fn = make()
    err = ag.grad_check(fn, params)
    assert err < 1e-4, f"{name}: finite-difference mismatch {err}"


def test_gradcheck_matmul_add_relu():
    rng = np.random.default_rng(10)
    a = ag.tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = ag.tensor(rng.normal(size=(4, 2)), requires_grad=True)
    c = ag.tensor(rng.normal(size=(3, 2)), requires_grad=True)
    _fd_case("matmul", lambda: ([a, b, c], lambda: ag.asum(ag.relu(ag.add(ag.matmul(a, b), c)))))


def test_gradcheck_mul_sigmoid_tanh_subone():
    rng = np.random.default_rng(11)
    a = ag.tensor(rng.normal(size=5), requires_grad=True)
    b = ag.tensor(rng.normal(size=5), requires_grad=True)

    def fn():
        return ag.asum(ag.mul(ag.sigmoid(a), ag.sub_from_one(ag.tanh(b))))

    _fd_case("pointwise", lambda: ([a, b], fn))


def test_gradcheck_cosine():
    rng = np.random.default_rng(12)
    a = ag.tensor(rng.normal(size=6), requires_grad=True)
    b = ag.tensor(rng.normal(size=6), requires_grad=True)
    _fd_case("cosine", lambda: ([a, b], lambda: ag.cosine(a, b)))


def test_gradcheck_cosine_matrix():
    rng = np.random.default_rng(13)
    a = ag.tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = ag.tensor(rng.normal(size=(5, 4)), requires_grad=True)
    w = rng.normal(size=(3, 5))

    def fn():
        return ag.asum(ag.mul(ag.cosine_matrix(a, b), ag.tensor(w)))

    _fd_case("cosine_matrix", lambda: ([a, b], fn))


def test_gradcheck_cosine_matrix_batched_shared():
    rng = np.random.default_rng(14)
    a = ag.tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = ag.tensor(rng.normal(size=(5, 4)), requires_grad=True)
    w = rng.normal(size=(2, 3, 5))

    def fn():
        return ag.asum(ag.mul(ag.cosine_matrix(a, b), ag.tensor(w)))

    _fd_case("cosine_matrix_batched", lambda: ([a, b], fn))


def test_gradcheck_softmax_pool():
    rng = np.random.default_rng(15)
    v = ag.tensor(rng.normal(size=6), requires_grad=True)
    t = ag.tensor(rng.normal(size=(4, 5)), requires_grad=True)
    w = rng.normal(size=4)
    mix = rng.normal(size=6)

    def fn():
        part1 = ag.asum(ag.mul(ag.softmax(v), ag.tensor(mix)))
        part2 = ag.asum(ag.mul(ag.pool(t, 1, "max"), ag.tensor(w)))
        part3 = ag.asum(ag.pool(t, 0, "mean"))
        return ag.add(ag.add(part1, part2), part3)

    _fd_case("softmax_pool", lambda: ([v, t], fn))


def test_gradcheck_conv_block():
    rng = np.random.default_rng(16)
    x = ag.tensor(rng.normal(size=(2, 7, 6)), requires_grad=True)
    w = ag.tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)
    b = ag.tensor(rng.normal(size=3) * 0.1, requires_grad=True)
    out_w = rng.normal(size=3 * 3 * 2)

    def fn():
        return ag.asum(ag.mul(ag.conv2d_block(x, w, b), ag.tensor(out_w)))

    _fd_case("conv2d_block", lambda: ([x, w, b], fn))


def test_gradcheck_lstm():
    rng = np.random.default_rng(17)
    x = ag.tensor(rng.normal(size=(4, 3)), requires_grad=True)
    wx = ag.tensor(rng.normal(size=(3, 8)) * 0.5, requires_grad=True)
    wh = ag.tensor(rng.normal(size=(2, 8)) * 0.5, requires_grad=True)
    b = ag.tensor(rng.normal(size=8) * 0.1, requires_grad=True)
    mix = rng.normal(size=(4, 2))

    def fn():
        states, last = ag.lstm_sequence(x, wx, wh, b)
        return ag.add(ag.asum(ag.mul(states, ag.tensor(mix))), ag.asum(last))

    _fd_case("lstm", lambda: ([x, wx, wh, b], fn))


def test_gradcheck_fused_row_ops():
    rng = np.random.default_rng(18)
    x = ag.tensor(rng.normal(size=(3, 4, 5)), requires_grad=True)
    s = ag.tensor(rng.uniform(0.1, 1.0, size=3), requires_grad=True)
    mask = (rng.uniform(size=(3, 4)) > 0.3).astype(float)
    mask[:, 0] = 1.0

    def fn():
        scaled = ag.scale_rows(x, s)
        masked = ag.mask_rows(scaled, mask)
        return ag.asum(ag.masked_mean_rows(masked, mask))

    _fd_case("row_ops", lambda: ([x, s], fn))


def test_gradcheck_lookup_and_losses():
    rng = np.random.default_rng(19)
    table = ag.tensor(rng.normal(size=(7, 4)), requires_grad=True)
    ids = np.array([[1, 2, 2], [5, 0, 6]])
    mask = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
    logits = ag.tensor(rng.normal(size=4), requires_grad=True)
    y = np.array([1.0, 0.0, 1.0, 0.0])

    def fn():
        emb = ag.rows_lookup(table, ids, mask)
        flat = ag.reshape(emb, (6, 4))
        probs = ag.sigmoid(ag.pool(flat, 1, "mean"))
        kp = ag.bce_probs(probs, np.array([1, 0, 0, 1, 0, 1.0]))
        rs = ag.bce_with_logits(logits, y)
        return ag.add(kp, rs)

    _fd_case("lookup_losses", lambda: ([table, logits], fn))


def test_gradcheck_concat_stack_take():
    rng = np.random.default_rng(20)
    a = ag.tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = ag.tensor(rng.normal(size=(2, 3)), requires_grad=True)
    w = rng.normal(size=(2, 2, 3))

    def fn():
        stacked = ag.stack([a, b], axis=0)
        both = ag.asum(ag.mul(stacked, ag.tensor(w)))
        row = ag.asum(ag.take_row(ag.concat([a, b], axis=0), 3))
        return ag.add(both, row)

    _fd_case("concat_stack_take", lambda: ([a, b], fn))


# ---------------------------------------------------------------------------
# properties


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_softmax_is_probability_vector(vals):
    s = ag.softmax(ag.tensor(vals)).data
    assert np.all(s >= 0)
    assert abs(s.sum() - 1.0) < 1e-12


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8),
       st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8))
def test_cosine_bounded(xs, ys):
    n = min(len(xs), len(ys))
    c = ag.cosine(ag.tensor(xs[:n]), ag.tensor(ys[:n])).item()
    assert -1.0 - 1e-12 <= c <= 1.0 + 1e-12


@settings(max_examples=25)
@given(st.integers(0, 2 ** 31 - 1))
def test_forward_and_grad_deterministic(seed):
    def run():
        rng = np.random.default_rng(seed)
        x = ag.tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = ag.tensor(rng.normal(size=(4, 2)), requires_grad=True)
        with ag.Tape() as tape:
            out = ag.asum(ag.relu(ag.matmul(x, w)))
            tape.backward(out)
        return out.item(), x.grad.copy(), w.grad.copy()

    v1, g1, g2 = run()
    v2, h1, h2 = run()
    assert v1 == v2
    assert np.array_equal(g1, h1)
    assert np.array_equal(g2, h2)
