import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pedro import tensor as T
from pedro.model import ModelConfig, Transformer
from pedro.pedro import (PedroAdapter, VectorGenerator, apply_attention_mod, apply_ffn_mod,
                         count_trainable_params, generate_vectors, normalize_targets, pool, target_dims)
from pedro.rational import fixed_activation, gelu_rational

SMALL = ModelConfig(vocab_size=20, d_model=8, n_heads=2, d_ffn=16, n_layers=2, max_seq_len=64)
LLAMA2_7B = ModelConfig(vocab_size=32000, d_model=4096, n_heads=32, d_ffn=11008, n_layers=32, max_seq_len=4096)

H = np.array([[1.0, 2.0], [3.0, 4.0]])


def _vg(rng, d=8, r=3, splits=(("q", 8), ("v", 8), ("u", 16)), act=None):
    vg = VectorGenerator.init(d, r, list(splits), act or fixed_activation("gelu"), rng=rng)
    vg.w_up.data = rng.normal(size=vg.w_up.shape).astype(vg.w_up.dtype)
    vg.b_up.data = rng.normal(size=vg.b_up.shape).astype(vg.b_up.dtype)
    return vg


class TestPool:
    @pytest.mark.parametrize("mode,want", [("last_token", [3, 4]), ("mean", [2, 3]), ("max", [3, 4])])
    def test_examples(self, mode, want):
        np.testing.assert_array_equal(pool(H, mode).data, want)

    def test_prompt_lens_exclude_later_positions(self):
        h = np.array([[[1.0, 5.0], [3.0, 0.0], [9.0, 9.0]]])
        for mode, want in [("last_token", [3, 0]), ("mean", [2, 2.5]), ("max", [3, 5])]:
            np.testing.assert_allclose(pool(h, mode, [2]).data[0], want)

    def test_empty_prompt(self):
        with pytest.raises(ValueError):
            pool(np.zeros((0, 2)), "mean")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            pool(H, "median")


class TestGenerateVectors:
    def test_fresh_generator_gives_ones(self, rng):
        vg = VectorGenerator.init(8, 3, target_dims(SMALL, ("q", "v", "u")), gelu_rational(), rng=rng)
        out = generate_vectors(vg, rng.normal(size=(5, 8)))
        assert [k for k in out] == ["q", "v", "u"]
        for k, n in (("q", 8), ("v", 8), ("u", 16)):
            np.testing.assert_array_equal(out[k].data, np.ones(n))

    def test_output_length(self, rng):
        vg = VectorGenerator.init(8, 3, target_dims(SMALL, ("q", "v", "u")), gelu_rational(), rng=rng)
        assert vg.out_dim == 2 * 8 + 16 == 32
        assert vg.w_down.shape == (8, 3) and vg.w_up.shape == (3, 32)
        np.testing.assert_array_equal(vg.w_up.data, 0.0)
        assert abs(vg.w_down.data.std() - 0.02) < 0.01

    def test_matches_straight_line_oracle(self, rng):
        with T.precision(64):
            vg = _vg(rng)
            h = rng.normal(size=(4, 8))
            got = generate_vectors(vg, h)
        z = h[-1] @ vg.w_down.data
        from scipy.special import erf

        flat = (0.5 * z * (1 + erf(z / np.sqrt(2)))) @ vg.w_up.data + vg.b_up.data
        np.testing.assert_allclose(got["q"].data, flat[:8], atol=1e-6)
        np.testing.assert_allclose(got["v"].data, flat[8:16], atol=1e-6)
        np.testing.assert_allclose(got["u"].data, flat[16:], atol=1e-6)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            generate_vectors(_vg(rng), rng.normal(size=(4, 6)))

    def test_r_zero_rejected(self, rng):
        with pytest.raises(ValueError):
            VectorGenerator.init(8, 0, [("q", 8)], gelu_rational(), rng=rng)
        with pytest.raises(ValueError):
            PedroAdapter(SMALL, r=0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**16))
    def test_deterministic_and_batched_rows_match(self, n, seed):
        rng = np.random.default_rng(seed)
        vg = _vg(rng)
        h = rng.normal(size=(3, n, 8))
        batched = generate_vectors(vg, h)
        for b in range(3):
            single = generate_vectors(vg, h[b])
            again = generate_vectors(vg, h[b])
            np.testing.assert_array_equal(single["u"].data, again["u"].data)
            np.testing.assert_allclose(batched["u"].data[b], single["u"].data, rtol=1e-5, atol=1e-6)


class TestApplyMods:
    def test_ones_unchanged(self, rng):
        q, v = T.tensor(rng.normal(size=(3, 4))), T.tensor(rng.normal(size=(3, 4)))
        state = {"q": T.tensor(np.ones(4)), "v": T.tensor(np.ones(4)), "u": T.tensor(np.ones(6))}
        q2, v2 = apply_attention_mod(q, v, state)
        np.testing.assert_array_equal(q2.data, q.data)
        np.testing.assert_array_equal(v2.data, v.data)
        u = T.tensor(rng.normal(size=(3, 6)))
        np.testing.assert_array_equal(apply_ffn_mod(u, state).data, u.data)

    def test_doubling_lq_doubles_scores(self, rng):
        q, k = T.tensor(rng.normal(size=(3, 4))), rng.normal(size=(3, 4))
        q2, _ = apply_attention_mod(q, q, {"q": T.tensor(2 * np.ones(4)), "v": T.tensor(np.ones(4))})
        np.testing.assert_allclose(q2.data @ k.T, 2 * (q.data @ k.T), rtol=1e-6)

    def test_loop_oracle_2x4(self, rng):
        q, v = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        lq, lv = rng.normal(size=4), rng.normal(size=4)
        q2, v2 = apply_attention_mod(T.tensor(q), T.tensor(v), {"q": T.tensor(lq), "v": T.tensor(lv)})
        for m in range(2):
            for n in range(4):
                assert q2.data[m, n] == pytest.approx(lq[n] * q[m, n], rel=1e-6)
                assert v2.data[m, n] == pytest.approx(lv[n] * v[m, n], rel=1e-6)

    def test_ffn_loop_oracle_and_zero(self, rng):
        u, lu = rng.normal(size=(3, 5)), rng.normal(size=5)
        got = apply_ffn_mod(T.tensor(u), {"u": T.tensor(lu)}).data
        for m in range(3):
            for n in range(5):
                assert got[m, n] == pytest.approx(lu[n] * u[m, n], rel=1e-6, abs=1e-6)
        model = Transformer(SMALL, seed=0)
        ad = PedroAdapter(SMALL, r=2)
        x = T.tensor(rng.normal(size=(1, 3, 8)))
        state = {"u": T.tensor(np.zeros((1, 1, 16)))}
        np.testing.assert_array_equal(model.ffn_forward(x, 0, ad, state).data, 0.0)

    def test_missing_state(self, rng):
        with pytest.raises(ValueError):
            apply_attention_mod(T.tensor(np.ones((1, 2))), T.tensor(np.ones((1, 2))), None)
        with pytest.raises(ValueError):
            apply_ffn_mod(T.tensor(np.ones((1, 2))), None)


class TestCounts:
    def test_llama2_7b_weights_only(self):
        assert count_trainable_params(LLAMA2_7B, r=12) == 8_945_664

    def test_llama2_7b_with_bias(self):
        assert count_trainable_params(LLAMA2_7B, r=12, include_bias=True) == 9_560_064

    def test_with_activation_coefficients(self):
        assert count_trainable_params(LLAMA2_7B, r=12, include_bias=True, include_activation=True) == 9_560_064 + 12 * 32

    def test_matches_allocated_parameters(self):
        ad = PedroAdapter(SMALL, r=3)
        allocated = sum(p.data.size for p in ad.parameters())
        assert allocated == count_trainable_params(SMALL, 3, include_bias=True, include_activation=True)

    def test_target_set_sizes(self):
        assert sum(n for _, n in target_dims(SMALL, ("u", "q", "k", "v", "g"))) == 3 * 8 + 2 * 16
        assert normalize_targets(["u", "q"]) == ("q", "u")
        with pytest.raises(ValueError):
            normalize_targets([])
        with pytest.raises(ValueError):
            normalize_targets(["o"])


class TestAdapter:
    def test_identity_at_init(self):
        m = Transformer(SMALL, seed=1).freeze()
        rng = np.random.default_rng(0)
        for preset in ({}, {"pooler": "mean"}, {"targets": ("q", "k", "v", "g", "u")}, {"activations": "relu"}):
            ad = PedroAdapter(SMALL, r=4, seed=3, **preset)
            for _ in range(5):
                toks = rng.integers(0, 20, size=int(rng.integers(1, 10)))
                np.testing.assert_array_equal(m.forward(toks, adapter=ad).data, m.forward(toks).data)

    def test_call_count_independent_of_max_new(self):
        m = Transformer(SMALL, seed=1).freeze()
        ad = PedroAdapter(SMALL, r=2)
        for n in (1, 4, 16):
            ad.reset_counters()
            m.generate(np.array([1, 2, 3, 4]), n, adapter=ad)
            assert ad.counters["prefill"] == SMALL.n_layers
            assert ad.counters["decode"] == 0

    def test_prompt_dependence_after_perturbation(self, rng):
        m = Transformer(SMALL, seed=1).freeze()
        ad = PedroAdapter(SMALL, r=3, seed=0)
        for p in ad.omega():
            p.data = p.data + rng.normal(0, 0.5, size=p.shape).astype(p.data.dtype)
        _, s1 = m.forward(np.array([1, 2, 3]), adapter=ad, return_state=True)
        _, s2 = m.forward(np.array([4, 5, 6]), adapter=ad, return_state=True)
        _, s3 = m.forward(np.array([1, 2, 3]), adapter=ad, return_state=True)
        assert not np.allclose(s1[0]["q"].data, s2[0]["q"].data)
        np.testing.assert_array_equal(s1[1]["u"].data, s3[1]["u"].data)

    def test_layers_have_distinct_activation_parameters(self):
        ad = PedroAdapter(SMALL, r=2)
        a0, a1 = ad.vgs[0].activation, ad.vgs[1].activation
        assert a0.a is not a1.a and a0.b is not a1.b
        np.testing.assert_array_equal(a0.a.data, a1.a.data)
        a0.a.data[0] += 1.0
        assert a1.a.data[0] != a0.a.data[0]

    def test_parameter_names(self):
        names = [n for n, _ in PedroAdapter(SMALL, r=2).named_parameters()]
        assert names[:5] == ["vg.0.w_down", "vg.0.w_up", "vg.0.b_up", "vg.0.act.a", "vg.0.act.b"]
        fixed = [n for n, _ in PedroAdapter(SMALL, r=2, activations="relu").named_parameters()]
        assert not any(".act." in n for n in fixed)

    def test_mixed_layer_activations(self):
        ad = PedroAdapter(SMALL, r=2, activations=["relu", "gelu"])
        assert [vg.activation.kind for vg in ad.vgs] == ["relu", "gelu"]
        assert ad.theta() == []
        with pytest.raises(ValueError):
            PedroAdapter(SMALL, r=2, activations=["relu"])

    def test_decode_mac_counter(self):
        m = Transformer(SMALL, seed=1).freeze()
        ad = PedroAdapter(SMALL, r=2)
        m.generate(np.array([1, 2]), 5, adapter=ad)
        assert ad.counters["extra_macs_decode"] == 5 * ad.extra_mac_per_decode_step() == 5 * 2 * 32
