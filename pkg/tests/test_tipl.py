import numpy as np
import pytest

from weightpath import svdcodec, tipl
from weightpath.tipl import TiplConfig, TiplError, forward, init_model, train


TINY = TiplConfig(d_token=3, context_len=4, embed_dim=8, layers=1, heads=1,
                  dropout=0.0)


class TestConfig:
    def test_embed_heads_divisibility(self):
        with pytest.raises(TiplError, match="divisible"):
            TiplConfig(d_token=4, embed_dim=10, heads=4)

    def test_context_len_minimum(self):
        with pytest.raises(TiplError, match="context_len"):
            TiplConfig(d_token=4, context_len=1)

    def test_roundtrip_dict(self):
        cfg = TiplConfig(d_token=5, layers=2)
        assert tipl.config_from_dict(tipl.config_dict(cfg)) == cfg


class TestInit:
    def test_deterministic(self):
        m1, m2 = init_model(TINY, 7), init_model(TINY, 7)
        assert all(np.array_equal(m1.params[k], m2.params[k]) for k in m1.params)
        m3 = init_model(TINY, 8)
        assert any(not np.array_equal(m1.params[k], m3.params[k])
                   for k in m1.params)

    def test_biases_zero_ln_gains_one(self):
        m = init_model(TINY, 0)
        assert np.array_equal(m.params["tok.b"], np.zeros(8))
        assert np.array_equal(m.params["head.b"], np.zeros(3))
        assert np.array_equal(m.params["L0.ln1.g"], np.ones(8))
        assert np.array_equal(m.params["lnf.g"], np.ones(8))

    def test_parameter_count_formula(self):
        d, e, k, layers = 16, 128, 20, 3
        cfg = TiplConfig(d_token=d, context_len=k, embed_dim=e, layers=layers)
        m = init_model(cfg, 0)
        per_layer = (2 * e                       # ln1
                     + 4 * (e * e + e)           # attn q/k/v/o
                     + 2 * e                     # ln2
                     + e * 4 * e + 4 * e         # ff.w1/b1
                     + 4 * e * e + e)            # ff.w2/b2
        expected = (d * e + e) + k * e + layers * per_layer \
            + 2 * e + (e * d + d)
        assert m.n_params() == expected


class TestForward:
    def test_output_shape(self):
        m = init_model(TINY, 1)
        seg = np.random.default_rng(0).standard_normal((3, 3))
        assert forward(m, seg).shape == (3, 3)

    def test_segment_longer_than_context_rejected(self):
        m = init_model(TINY, 1)
        with pytest.raises(TiplError, match="exceeds context_len"):
            forward(m, np.zeros((5, 3)))

    def test_bad_token_dim_rejected(self):
        m = init_model(TINY, 1)
        with pytest.raises(TiplError):
            forward(m, np.zeros((2, 4)))

    def test_causality_bit_exact(self):
        m = init_model(TINY, 2)
        rng = np.random.default_rng(3)
        seg = rng.standard_normal((4, 3))
        base = forward(m, seg)
        for j in range(1, 4):
            pert = seg.copy()
            pert[j] += rng.standard_normal(3)
            out = forward(m, pert)
            assert np.array_equal(out[:j], base[:j])
            assert not np.array_equal(out[j:], base[j:])

    def test_zero_model_outputs_head_bias(self):
        m = init_model(TINY, 0)
        for k in m.params:
            m.params[k] = np.zeros_like(m.params[k])
        bias = np.array([1.5, -2.0, 0.25])
        m.params["head.b"] = bias
        out = forward(m, np.random.default_rng(1).standard_normal((4, 3)))
        assert np.array_equal(out, np.tile(bias, (4, 1)))

    def test_inference_deterministic_despite_dropout_config(self):
        cfg = TiplConfig(d_token=3, context_len=4, embed_dim=8, layers=1,
                         heads=1, dropout=0.5)
        m = init_model(cfg, 4)
        seg = np.random.default_rng(5).standard_normal((4, 3))
        assert np.array_equal(forward(m, seg), forward(m, seg))


class TestGradients:
    def test_matches_finite_differences(self):
        cfg = TiplConfig(d_token=2, context_len=4, embed_dim=8, layers=1,
                         heads=2, dropout=0.0)
        m = init_model(cfg, 9)
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 4, 2))
        tgt = rng.standard_normal((2, 4, 2))

        def loss_at(params):
            tape = tipl.Tape()
            leaves = {k: tape.leaf(v) for k, v in params.items()}
            pred = tipl._forward_var(leaves, cfg, x, False, None)
            t = tape.leaf(tgt, requires_grad=False)
            err = pred - t
            return tape, leaves, (err * err).mean()

        tape, leaves, loss = loss_at(m.params)
        grads = tipl.backward(tape, loss)
        worst = 0.0
        eps = 1e-6
        for name in m.params:
            g = tipl.grad_of(grads, leaves[name])
            flat = m.params[name].reshape(-1)
            picks = rng.choice(flat.size, size=min(4, flat.size), replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + eps
                _, _, lp = loss_at(m.params)
                flat[i] = orig - eps
                _, _, lm = loss_at(m.params)
                flat[i] = orig
                fd = (lp.value - lm.value) / (2 * eps)
                rel = abs(g.reshape(-1)[i] - fd) / max(abs(fd), 1e-3)
                worst = max(worst, rel)
        assert worst < 1e-3


class TestTrain:
    def test_rejects_short_trajectory(self):
        m = init_model(TINY, 0)
        with pytest.raises(TiplError, match="fewer than 2"):
            train(m, [np.zeros((1, 3))])

    def test_loss_history_nonnegative_and_deterministic(self):
        cfg = TiplConfig(d_token=2, context_len=4, embed_dim=8, layers=1,
                         heads=1, dropout=0.1, batch_size=8,
                         batches_per_iter=10, iters=3, warmup_steps=5)
        trajs = [np.random.default_rng(s).standard_normal((12, 2))
                 for s in range(3)]
        m = init_model(cfg, 0)
        _, h1 = train(m, trajs, seed=5)
        _, h2 = train(m, trajs, seed=5)
        assert h1 == h2
        assert all(v >= 0.0 for v in h1)

    def test_overfits_single_short_trajectory(self):
        cfg = TiplConfig(d_token=2, context_len=8, embed_dim=16, layers=1,
                         heads=1, dropout=0.0, lr=3e-3, warmup_steps=50,
                         weight_decay=0.0, batch_size=16, batches_per_iter=200,
                         iters=10, grad_clip=1.0)
        traj = np.random.default_rng(0).standard_normal((6, 2))
        _, hist = train(init_model(cfg, 0), [traj], seed=0)
        assert hist[-1] < 1e-6

    def test_learns_linear_code_dynamics(self):
        # u_{t+1} = G u_t with spectral radius 0.9: train MSE <= 1e-3
        d = 4
        rng = np.random.default_rng(1)
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        g_mat = 0.9 * q
        trajs = []
        for _ in range(8):
            u = rng.standard_normal(d)
            rows = [u]
            for _ in range(30):
                u = g_mat @ u
                rows.append(u)
            trajs.append(np.array(rows))
        corpus = np.vstack(trajs)
        mu, sd = corpus.mean(axis=0), corpus.std(axis=0)
        strajs = [(t - mu) / sd for t in trajs]
        cfg = TiplConfig(d_token=d, context_len=10, embed_dim=32, layers=1,
                         heads=1, dropout=0.0, lr=2e-3, warmup_steps=50,
                         weight_decay=0.0, batch_size=32, batches_per_iter=150,
                         iters=8, grad_clip=1.0)
        _, hist = train(init_model(cfg, 1), strajs, seed=1)
        assert hist[-1] <= 1e-3


class TestRollout:
    def _fitted(self):
        rng = np.random.default_rng(2)
        corpus = rng.standard_normal((20, 10))
        basis = svdcodec.fit_basis(corpus, 3)
        cfg = TiplConfig(d_token=3, context_len=4, embed_dim=8, layers=1,
                         heads=1, dropout=0.0)
        return basis, init_model(cfg, 3), corpus

    def test_k_zero_empty(self):
        basis, m, corpus = self._fitted()
        out = tipl.rollout(m, basis, corpus[:5], 0)
        assert out.shape == (0, 10)

    def test_shapes_and_window_slides(self):
        basis, m, corpus = self._fitted()
        out = tipl.rollout(m, basis, corpus[:6], 10)
        assert out.shape == (10, 10)
        assert np.all(np.isfinite(out))

    def test_basis_model_mismatch(self):
        basis, m, corpus = self._fitted()
        bad = svdcodec.fit_basis(np.random.default_rng(4).standard_normal((20, 10)), 2)
        with pytest.raises(TiplError, match="d_token"):
            tipl.rollout(m, bad, corpus[:5], 1)

    def test_first_step_matches_forward(self):
        basis, m, corpus = self._fitted()
        prefix = corpus[:3]
        codes = svdcodec.standardize(basis, svdcodec.encode(basis, prefix))
        expected = svdcodec.decode(
            basis, svdcodec.destandardize(basis, forward(m, codes)[-1]))
        out = tipl.rollout(m, basis, prefix, 1)
        assert np.allclose(out[0], expected, atol=1e-12)
