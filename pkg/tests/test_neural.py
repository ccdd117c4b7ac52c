import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from codeseed import neural as nn

EPS = 3e-5
TOL = 1e-6


def _u(rng, *shape):
    return rng.uniform(-1.0, 1.0, shape)


def check_all(f, params, eps=EPS):
    """Fill grads via f(grad=True) then compare each parameter against central differences."""
    for p in params:
        p.zero_grad()
    f(True)
    return max(nn.grad_check(lambda: f(False), p, eps) for p in params)


class TestLayerGradients:
    def test_embedding(self, rng):
        E = nn.Parameter("E", _u(rng, 7, 4))
        ids = np.array([[1, 3, 3], [6, 0, 1]])
        R = _u(rng, 2, 3, 4)

        def f(grad):
            out = nn.embed_lookup(E.value, ids)
            if grad:
                nn.embed_backward(E, ids, R)
            return float((out * R).sum())

        assert check_all(f, [E]) < TOL

    def test_rnn_cell(self, rng):
        B, D, H = 3, 4, 5
        x = nn.Parameter("x", _u(rng, B, D))
        h0 = nn.Parameter("h0", _u(rng, B, H))
        W, U = nn.Parameter("W", _u(rng, D, H)), nn.Parameter("U", _u(rng, H, H))
        R = _u(rng, B, H)

        def f(grad):
            h = nn.rnn_cell(x.value, h0.value, W.value, U.value)
            if grad:
                dx, dh, dW, dU = nn.rnn_cell_backward(R, x.value, h0.value, h, W.value, U.value)
                for p, g in ((x, dx), (h0, dh), (W, dW), (U, dU)):
                    p.accumulate(g)
            return float((h * R).sum())

        assert check_all(f, [x, h0, W, U]) < TOL

    def test_gru_cell(self, rng):
        B, D, H = 3, 4, 5
        x = nn.Parameter("x", _u(rng, B, D))
        h0 = nn.Parameter("h0", _u(rng, B, H))
        ps = [nn.Parameter(n, _u(rng, D if n.startswith("W") else H, H)) for n in nn.GruParams._fields]
        R = _u(rng, B, H)

        def f(grad):
            p = nn.GruParams(*(q.value for q in ps))
            h, cache = nn.gru_cell_forward(x.value, h0.value, p)
            if grad:
                dx, dh, grads = nn.gru_cell_backward(R, cache, p)
                x.accumulate(dx)
                h0.accumulate(dh)
                for q, g in zip(ps, grads):
                    q.accumulate(g)
            return float((h * R).sum())

        assert check_all(f, [x, h0, *ps]) < TOL

    @pytest.mark.parametrize("batched", [False, True])
    def test_attention(self, rng, batched):
        shape = (2, 6, 5) if batched else (6, 5)
        H = nn.Parameter("H", _u(rng, *shape))
        Wa, va = nn.Parameter("W_a", _u(rng, 5, 3)), nn.Parameter("v_a", _u(rng, 3))
        R = _u(rng, *shape[:-2], 5)

        def f(grad):
            p = nn.AttentionParams(Wa.value, va.value)
            ctx, _, cache = nn.attention_pool(H.value, p)
            if grad:
                dH, dW, dv = nn.attention_backward(R, cache, p)
                H.accumulate(dH)
                Wa.accumulate(dW)
                va.accumulate(dv)
            return float((ctx * R).sum())

        assert check_all(f, [H, Wa, va]) < TOL

    def test_dense_softmax_ce(self, rng):
        x = nn.Parameter("x", _u(rng, 4, 5))
        W, b = nn.Parameter("W", _u(rng, 5, 7)), nn.Parameter("b", _u(rng, 7))
        y = np.array([0, 3, 6, 3])

        def f(grad):
            p = nn.dense_softmax(x.value, W.value, b.value)
            if grad:
                d = nn.softmax_ce_backward(p, y)
                x.accumulate(d @ W.value.T)
                W.accumulate(x.value.T @ d)
                b.accumulate(d.sum(0))
            return nn.cross_entropy(p, y)

        assert check_all(f, [x, W, b]) < TOL


class TestGruClosedForm:
    def test_zero_params_halve_state(self):
        h = np.array([[0.3, -1.2, 4.0]])
        p = nn.GruParams(*(np.zeros((3, 3)) for _ in range(6)))
        np.testing.assert_array_equal(nn.gru_cell(np.ones((1, 3)), h, p), 0.5 * h)

    def test_scalar_half_weights(self):
        p = nn.GruParams(*(np.full((1, 1), 0.5) for _ in range(6)))
        out = nn.gru_cell(np.ones((1, 1)), np.zeros((1, 1)), p)
        z = 1 / (1 + math.exp(-0.5))
        assert out[0, 0] == pytest.approx(z * math.tanh(0.5), abs=1e-15)
        assert abs(z - 0.622459) < 1e-6 and abs(math.tanh(0.5) - 0.462117) < 1e-6
        assert abs(out[0, 0] - 0.28764914) < 1e-8

    def test_batch_rows_independent(self, rng):
        p = nn.GruParams(*(_u(rng, 3, 3) for _ in range(6)))
        x, h = _u(rng, 4, 3), _u(rng, 4, 3)
        full = nn.gru_cell(x, h, p)
        for i in range(4):
            np.testing.assert_allclose(nn.gru_cell(x[i:i + 1], h[i:i + 1], p), full[i:i + 1], rtol=1e-14)


class TestAttention:
    def test_zero_scores_mean_pool(self, rng):
        H = _u(rng, 5, 4)
        ctx, a, _ = nn.attention_pool(H, nn.AttentionParams(np.zeros((4, 2)), np.zeros(2)))
        np.testing.assert_allclose(a, np.full(5, 0.2))
        np.testing.assert_allclose(ctx, H.mean(0))

    @given(st.integers(0, 10_000))
    def test_weights_form_distribution(self, seed):
        rng = np.random.default_rng(seed)
        H = rng.normal(size=(3, 7, 4)) * 5
        _, a, _ = nn.attention_pool(H, nn.AttentionParams(rng.normal(size=(4, 3)), rng.normal(size=3)))
        assert np.all(a >= 0)
        np.testing.assert_allclose(a.sum(-1), 1.0, rtol=1e-12)


class TestPrimitives:
    def test_sigmoid_extremes(self):
        out = nn.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_softmax_shift_invariant(self, rng):
        z = _u(rng, 3, 6)
        np.testing.assert_allclose(nn.softmax(z), nn.softmax(z + 700.0), rtol=1e-12)

    def test_cross_entropy_floor(self):
        p = np.array([[1.0, 0.0]])
        assert nn.cross_entropy(p, [1]) == pytest.approx(-math.log(1e-12))
        assert nn.cross_entropy(p, [0]) == 0.0

    def test_embed_range_check(self):
        with pytest.raises(IndexError):
            nn.embed_lookup(np.zeros((3, 2)), [3])

    def test_frozen_embedding_gets_no_gradient(self):
        E = nn.Parameter("E", np.ones((3, 2)), trainable=False)
        nn.embed_backward(E, [0, 1], np.ones((2, 2)))
        assert not E.grad.any()

    def test_glorot_limits(self, rng):
        w = nn.glorot(rng, (30, 70))
        assert np.abs(w).max() <= math.sqrt(6 / 100)
        assert w.dtype == np.float64


class TestDropout:
    def test_monte_carlo_mean_and_rate(self):
        rng = np.random.default_rng(1)
        m = nn.dropout_mask((200_000,), 0.5, rng)
        assert set(np.unique(m)) == {0.0, 2.0}
        assert abs((m == 0).mean() - 0.5) < 0.005
        assert abs(m.mean() - 1.0) < 0.01

    def test_eval_is_identity(self, rng):
        x = _u(rng, 4, 4)
        assert nn.dropout(x, 0.5, training=False) is x
        assert nn.dropout(x, 0.0, training=True, rng=rng) is x

    def test_seeded_reproducible(self):
        a = nn.dropout(np.ones(50), 0.3, True, np.random.default_rng(7))
        b = nn.dropout(np.ones(50), 0.3, True, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            nn.dropout_mask((2,), 1.0, np.random.default_rng(0))
        with pytest.raises(ValueError):
            nn.dropout(np.ones(2), 0.5, True)


class TestAdam:
    def test_two_steps_by_hand(self):
        p = nn.Parameter("w", np.array([1.0, -2.0]))
        s = nn.AdamState.like(p, lr=0.1)
        g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 3.0])
        w = p.value.copy()
        m = v = np.zeros(2)
        for t, g in enumerate((g1, g2), 1):
            p.grad[...] = g
            nn.adam_step(p, s)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            np.testing.assert_allclose(p.value, w, rtol=1e-14)
        assert s.t == 2

    def test_first_step_is_lr_times_sign(self):
        p = nn.Parameter("w", np.zeros(3))
        p.grad[...] = [4.0, -0.01, 0.0]
        nn.adam_step(p, nn.AdamState.like(p, lr=0.01))
        np.testing.assert_allclose(p.value, [-0.01, 0.01, 0.0], rtol=1e-5)

    def test_frozen_raises(self):
        p = nn.Parameter("w", np.zeros(2), trainable=False)
        with pytest.raises(nn.FreezeError):
            nn.adam_step(p, nn.AdamState.like(p))

    def test_optimizer_skips_frozen(self):
        a = nn.Parameter("a", np.ones(2))
        b = nn.Parameter("b", np.ones(2), trainable=False)
        a.grad[...] = 1.0
        opt = nn.Adam([a, b], lr=0.5)
        opt.step()
        assert a.value[0] < 1.0
        np.testing.assert_array_equal(b.value, 1.0)
        assert [p.name for p in opt.params] == ["a"]

    def test_frozen_accumulate_noop(self):
        p = nn.Parameter("w", np.zeros(2))
        p.freeze()
        p.accumulate(np.ones(2))
        assert not p.grad.any()


class TestClipAndCheck:
    def test_clip_global_norm(self):
        a, b = nn.Parameter("a", np.zeros(2)), nn.Parameter("b", np.zeros(1))
        a.grad[...] = [3.0, 0.0]
        b.grad[...] = [4.0]
        assert nn.clip_global_norm([a, b], 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8], rtol=1e-9)
        assert nn.clip_global_norm([a, b], 10.0) == pytest.approx(1.0, rel=1e-9)

    def test_grad_check_detects_wrong_gradient(self):
        p = nn.Parameter("w", np.array([1.0, 2.0]))
        p.grad[...] = [2.0, 4.0]
        assert nn.grad_check(lambda: float((p.value**2).sum()), p) < 1e-9
        p.grad[...] = [2.0, 4.1]
        assert nn.grad_check(lambda: float((p.value**2).sum()), p) > 1e-3

    def test_grad_check_non_finite(self):
        p = nn.Parameter("w", np.array([0.0]))
        with pytest.raises(FloatingPointError):
            nn.grad_check(lambda: float("nan"), p)
