import math

import numpy as np
import pytest

from pedro import tensor as T
from pedro.model import Adapter, AdapterStateMissing, ModelConfig, SequenceOverflowError, Transformer
from pedro.pedro import PedroAdapter

SMALL = ModelConfig(vocab_size=20, d_model=16, n_heads=2, d_ffn=24, n_layers=2, max_seq_len=64)


def _sharp_model(seed=0, config=SMALL):
    # a larger init spreads the logits so greedy argmax has no near-ties
    return Transformer(config, seed=seed, init_std=0.3).freeze()


def _gelu_loop(x):
    return np.vectorize(lambda v: 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))))(x)


def _rms(x, w, eps):
    return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps) * w


class TestAttention:
    def test_single_token_is_value_projection(self):
        with T.precision(64):
            m = _sharp_model()
            x = np.random.default_rng(0).normal(size=(1, 1, 16))
            out = m.attention_forward(T.tensor(x), 0).data
        layer = m.layers[0]
        np.testing.assert_allclose(out, x @ layer.w_v.data @ layer.w_o.data, rtol=1e-12, atol=1e-14)

    def test_cache_matches_full_sequence(self):
        m = _sharp_model()
        toks = np.array([3, 7, 1, 12])
        full = m.forward(toks).data[-1]
        cache = m.new_cache()
        m.forward(toks[:3], cache=cache)
        last = m.forward(toks[3:], cache=cache).data[-1]
        assert cache.length == 4
        np.testing.assert_allclose(last, full, atol=1e-5)

    def test_causal_mask_exact(self):
        m = _sharp_model()
        a = np.array([4, 9, 2, 11, 5])
        b = a.copy()
        b[3] = 17
        la, lb = m.forward(a).data, m.forward(b).data
        np.testing.assert_array_equal(la[:3], lb[:3])
        assert not np.allclose(la[3], lb[3])

    def test_matches_dense_oracle(self):
        with T.precision(64):
            m = _sharp_model(seed=3)
            x = np.random.default_rng(1).normal(size=(1, 5, 16))
            got = m.attention_forward(T.tensor(x), 1).data[0]
        layer = m.layers[1]
        q, k, v = (x[0] @ getattr(layer, n).data for n in ("w_q", "w_k", "w_v"))
        dh, H = 8, 2
        out = np.zeros((5, 16))
        for h in range(H):
            sl = slice(h * dh, (h + 1) * dh)
            qh, kh = q[:, sl].copy(), k[:, sl].copy()
            for t in range(5):
                for j in range(dh // 2):
                    theta = t * 10000.0 ** (-2 * j / dh)
                    c, s = math.cos(theta), math.sin(theta)
                    for arr in (qh, kh):
                        x1, x2 = arr[t, j], arr[t, j + dh // 2]
                        arr[t, j], arr[t, j + dh // 2] = x1 * c - x2 * s, x2 * c + x1 * s
            for t in range(5):
                sc = np.array([qh[t] @ kh[u] / math.sqrt(dh) for u in range(t + 1)])
                p = np.exp(sc - sc.max())
                p /= p.sum()
                out[t, sl] = p @ v[: t + 1, sl]
        np.testing.assert_allclose(got, out @ layer.w_o.data, rtol=1e-9, atol=1e-12)


class TestFFN:
    def test_zero_gate_gives_zero(self):
        m = _sharp_model()
        m.layers[0].w_g.data[:] = 0.0
        out = m.ffn_forward(T.tensor(np.ones((1, 3, 16))), 0).data
        np.testing.assert_array_equal(out, 0.0)

    def test_identity_hook_is_bit_exact(self):
        m = _sharp_model()
        ad = PedroAdapter(SMALL, r=2, seed=0)
        x = T.tensor(np.random.default_rng(0).normal(size=(1, 4, 16)))
        state = ad.prefill(0, x, np.array([4]))
        np.testing.assert_array_equal(state["u"].data, 1.0)
        np.testing.assert_array_equal(m.ffn_forward(x, 0).data, m.ffn_forward(x, 0, ad, state).data)

    def test_matches_dense_oracle(self):
        with T.precision(64):
            m = _sharp_model(seed=5)
            x = np.random.default_rng(2).normal(size=(1, 3, 16))
            got = m.ffn_forward(T.tensor(x), 0).data[0]
        layer = m.layers[0]
        want = (_gelu_loop(x[0] @ layer.w_g.data) * (x[0] @ layer.w_u.data)) @ layer.w_d.data
        np.testing.assert_allclose(got, want, atol=1e-6)


class TestForward:
    def test_shape_and_finite(self):
        logits = _sharp_model().forward(np.arange(7)).data
        assert logits.shape == (7, 20)
        assert np.all(np.isfinite(logits))

    def test_deterministic_across_builds(self):
        toks = np.array([1, 5, 9, 2])
        a = Transformer(SMALL, seed=11).forward(toks).data
        b = Transformer(SMALL, seed=11).forward(toks).data
        np.testing.assert_array_equal(a, b)

    def test_init_cross_entropy_near_uniform(self):
        m = Transformer(SMALL, seed=0)
        rng = np.random.default_rng(0)
        toks = rng.integers(0, 20, size=(8, 32))
        ce = T.cross_entropy(m.forward(toks[:, :-1]), toks[:, 1:]).item()
        assert abs(ce - math.log(20)) / math.log(20) < 0.10

    def test_bare_adapter_is_bit_identical(self):
        m = _sharp_model()
        toks = np.array([2, 4, 6, 8, 10])
        np.testing.assert_array_equal(m.forward(toks).data, m.forward(toks, adapter=Adapter()).data)

    @pytest.mark.parametrize("bad", [[-1, 2], [3, 20]])
    def test_out_of_range_ids(self, bad):
        with pytest.raises(ValueError):
            _sharp_model().forward(np.array(bad))

    def test_overflow(self):
        with pytest.raises(SequenceOverflowError):
            _sharp_model().forward(np.zeros(65, dtype=int))

    def test_decode_without_state(self):
        m = _sharp_model()
        ad = PedroAdapter(SMALL, r=2)
        cache = m.new_cache()
        m.forward(np.array([1, 2]), cache=cache)
        with pytest.raises(AdapterStateMissing):
            m.forward(np.array([3]), adapter=ad, cache=cache)


def _greedy_uncached(m, prompt, n, adapter=None):
    seq = list(prompt)
    for _ in range(n):
        with T.no_grad():
            # prompt_lens pins the adapter's pooled positions to the prompt
            logits = m.forward(np.array(seq), adapter=adapter, prompt_lens=[len(prompt)]).data[-1]
        seq.append(int(np.argmax(logits)))
    return np.array(seq[len(prompt):])


class TestGenerate:
    def test_cache_equivalence_100_prompts(self):
        m = _sharp_model(seed=2)
        rng = np.random.default_rng(0)
        for _ in range(100):
            prompt = rng.integers(0, 20, size=int(rng.integers(1, 9)))
            np.testing.assert_array_equal(m.generate(prompt, 5), _greedy_uncached(m, prompt, 5))

    def test_cache_equivalence_with_trained_pedro(self):
        m = _sharp_model(seed=4)
        ad = PedroAdapter(SMALL, r=3, seed=1)
        rng = np.random.default_rng(3)
        for p in ad.omega():
            p.data = rng.normal(0, 0.3, size=p.shape).astype(p.data.dtype)
        for _ in range(20):
            prompt = rng.integers(0, 20, size=6)
            np.testing.assert_array_equal(m.generate(prompt, 4, adapter=ad), _greedy_uncached(m, prompt, 4, ad))

    def test_beam_scores_are_logprob_sums(self):
        with T.precision(64):
            m = _sharp_model(seed=6)
            prompt = np.array([3, 1, 4, 1, 5])
            out, score = m.generate(prompt, 4, beam=3, return_scores=True)
            seq = np.concatenate([prompt, out])
            lp = T.log_softmax(m.forward(seq[:-1]), axis=-1).data
        oracle = sum(lp[len(prompt) - 1 + j, out[j]] for j in range(4))
        assert score == pytest.approx(oracle, abs=1e-9)

    def test_beam_returns_best_survivor(self):
        from pedro.model import Generation

        m = _sharp_model(seed=6)
        gen = Generation(m, np.array([3, 1, 4]), 4, beam=3)
        while not gen.done:
            gen.step()
        assert gen.best_score == max(gen.scores)
        greedy_score = m.generate(np.array([3, 1, 4]), 4, return_scores=True)[1]
        assert gen.best_score >= greedy_score - 1e-6

    def test_ties_pick_lowest_id(self):
        m = _sharp_model()
        m.lm_head.data[:] = 0.0
        np.testing.assert_array_equal(m.generate(np.array([5]), 3), [0, 0, 0])

    def test_generation_errors(self):
        m = _sharp_model()
        with pytest.raises(ValueError):
            m.generate(np.array([1]), 0)
        with pytest.raises(ValueError):
            m.generate(np.array([1]), 2, beam=0)
        with pytest.raises(SequenceOverflowError):
            m.generate(np.zeros(60, dtype=int), 5)

    def test_cache_holds_prompt_plus_generated(self):
        from pedro.model import Generation

        m = _sharp_model()
        gen = Generation(m, np.array([1, 2, 3]), 6)
        while not gen.done:
            gen.step()
        assert gen.cache.length == 9

    def test_vector_generator_called_once_per_layer(self):
        m = _sharp_model()
        ad = PedroAdapter(SMALL, r=2)
        for n in (1, 7, 20):
            ad.reset_counters()
            m.generate(np.array([1, 2, 3]), n, beam=3, adapter=ad)
            assert ad.counters["prefill"] == SMALL.n_layers
