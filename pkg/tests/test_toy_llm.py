import numpy as np
import pytest

from metok.data_io import RunConfig, TextEmbedding, gen_synthetic
from metok.kernels import Rng64
from metok.schedule import PruneSchedule
from metok.toy_llm import (
    apply_kv_policy,
    attention_ratio_trace,
    build_prefill_input,
    decode,
    init_model,
    prefill,
    sinusoidal_positions,
)
from metok.vision import TokenStream, run_vision_stage


def make_stream(n_key, n_nonkey, dim, seed=0):
    """Hand-built token stream: n_key key-group tokens then n_nonkey non-key ones."""
    rng = Rng64(seed)
    n = n_key + n_nonkey
    return TokenStream(
        tokens=rng.next_unit_array(n * dim).reshape(n, dim),
        event_id=np.repeat([0, 1], [n_key, n_nonkey]),
        frame_id=np.arange(n),
        key_event=np.repeat([True, False], [n_key, n_nonkey]),
        key_frame=np.ones(n, dtype=bool),
        grid_pos=np.zeros((n, 2), dtype=np.int64),
        frame_strides=np.ones(n, dtype=np.int64),
    )


def make_text(m, dim, seed=1):
    rng = Rng64(seed)
    return TextEmbedding(
        vector=rng.next_unit_array(dim),
        token_ids=np.array([rng.next_raw() % 256 for _ in range(m)]),
    )


def disabled_schedule(layers):
    return PruneSchedule(
        l1=layers, l2=layers + 1, l3=layers + 2, r=0.5, alpha=0.5,
        total_layers=layers, n_key=0, n_nonkey=0,
    )


class TestInitModel:
    def test_same_config_same_checksum(self):
        cfg = RunConfig(layers=3, heads=2, d_model=16, seed=5)
        assert init_model(cfg).checksum() == init_model(cfg).checksum()

    def test_different_seed_different_checksum(self):
        a = init_model(RunConfig(layers=3, heads=2, d_model=16, seed=5))
        b = init_model(RunConfig(layers=3, heads=2, d_model=16, seed=6))
        assert a.checksum() != b.checksum()

    def test_head_dim(self):
        m = init_model(RunConfig(layers=1, heads=4, d_model=64))
        assert m.head_dim == 16


class TestPrefill:
    def test_disabled_schedule_keeps_lengths(self):
        cfg = RunConfig(layers=4, heads=2, d_model=16, seed=3)
        model = init_model(cfg)
        stream = make_stream(10, 5, 8)
        inp = build_prefill_input(model, stream, make_text(4, 8))
        res = prefill(model, inp, disabled_schedule(4))
        assert res.layer_lengths == [19, 19, 19, 19]
        assert res.cache.entry_counts() == [19, 19, 19, 19]

    def test_noop_schedule_bitwise_equals_disabled(self):
        # r=1 with the last boundary beyond the stack never filters anything
        cfg = RunConfig(layers=6, heads=2, d_model=16, seed=3)
        model = init_model(cfg)
        stream = make_stream(8, 4, 8)
        text = make_text(3, 8)
        inp_a = build_prefill_input(model, stream, text)
        inp_b = build_prefill_input(model, stream, text)
        # full retention needs r=1, alpha=1, and both drop branches out of reach
        noop = PruneSchedule(
            l1=2, l2=7, l3=8, r=1.0, alpha=1.0, total_layers=6, n_key=8, n_nonkey=4
        )
        res_a = prefill(model, inp_a, noop)
        res_b = prefill(model, inp_b, disabled_schedule(6))
        assert res_a.layer_lengths == res_b.layer_lengths
        assert np.array_equal(res_a.final_logits, res_b.final_logits)
        assert np.array_equal(res_a.hidden, res_b.hidden)

    def test_tiered_lengths_hand_case(self):
        cfg = RunConfig(layers=20, heads=4, d_model=32, seed=7)
        model = init_model(cfg)
        stream = make_stream(100, 40, 16)
        inp = build_prefill_input(model, stream, make_text(6, 16))
        sched = PruneSchedule(
            l1=3, l2=10, l3=19, r=0.55, alpha=0.5, total_layers=20,
            n_key=100, n_nonkey=40,
        )
        res = prefill(model, inp, sched)
        want = [146] * 3 + [72] * 7 + [37] * 9 + [6]
        assert res.layer_lengths == want
        assert res.cache.entry_counts() == want

    def test_equal_importance_keeps_earliest(self):
        cfg = RunConfig(layers=4, heads=2, d_model=16, seed=9)
        model = init_model(cfg)
        for layer in range(4):
            model.wq[layer][:] = 0.0  # uniform attention -> equal importance
        stream = make_stream(6, 4, 8)
        inp = build_prefill_input(model, stream, make_text(2, 8))
        sched = PruneSchedule(
            l1=1, l2=2, l3=3, r=0.5, alpha=0.5, total_layers=4, n_key=6, n_nonkey=4
        )
        res = prefill(model, inp, sched)
        # layer 1 keeps ceil(.5*6)=3 key and ceil(.25*4)=1 non-key, earliest first
        kept = res.cache.position_ids[1]
        assert kept.tolist() == [0, 1, 2, 6, 10, 11]

    def test_text_positions_never_pruned(self):
        cfg = RunConfig(layers=8, heads=2, d_model=16, seed=2)
        model = init_model(cfg)
        stream = make_stream(20, 10, 8)
        inp = build_prefill_input(model, stream, make_text(5, 8))
        sched = PruneSchedule(
            l1=1, l2=3, l3=5, r=0.4, alpha=0.5, total_layers=8, n_key=20, n_nonkey=10
        )
        res = prefill(model, inp, sched)
        for layer in range(8):
            assert int(res.cache.is_text[layer].sum()) == 5


class TestKvPolicyAndDecode:
    def _prefilled(self, layers=6, seed=11, n_key=12, n_nonkey=6, m=4):
        cfg = RunConfig(layers=layers, heads=2, d_model=16, seed=seed)
        model = init_model(cfg)
        stream = make_stream(n_key, n_nonkey, 8, seed=seed + 1)
        inp = build_prefill_input(model, stream, make_text(m, 8, seed=seed + 2))
        sched = PruneSchedule(
            l1=2, l2=4, l3=5, r=0.5, alpha=0.5, total_layers=layers,
            n_key=n_key, n_nonkey=n_nonkey,
        )
        return model, prefill(model, inp, sched), sched

    def test_drop_matches_neg_inf_masking(self):
        model, res, sched = self._prefilled()
        dropped = apply_kv_policy(res.cache, sched.kv_drop_layer(), "drop")
        flagged = apply_kv_policy(res.cache, sched.kv_drop_layer(), "neg_inf")
        out_a = decode(model, dropped, 6, res.final_logits)
        out_b = decode(model, flagged, 6, res.final_logits)
        assert np.array_equal(out_a.tokens, out_b.tokens)
        assert float(np.max(np.abs(out_a.logits - out_b.logits))) <= 1e-9

    def test_policy_off_is_bitwise_noop(self):
        model, res, _ = self._prefilled()
        plain = apply_kv_policy(res.cache, model.layers, "drop")
        out_a = decode(model, plain, 5, res.final_logits)
        out_b = decode(model, apply_kv_policy(res.cache, model.layers, "drop"), 5, res.final_logits)
        assert np.array_equal(out_a.tokens, out_b.tokens)
        assert np.array_equal(out_a.logits, out_b.logits)

    def test_deterministic_tokens(self):
        model, res, sched = self._prefilled(seed=21)
        a = decode(model, apply_kv_policy(res.cache, sched.l1), 8, res.final_logits)
        model2, res2, sched2 = self._prefilled(seed=21)
        b = decode(model2, apply_kv_policy(res2.cache, sched2.l1), 8, res2.final_logits)
        assert np.array_equal(a.tokens, b.tokens)
        assert np.array_equal(a.logits, b.logits)

    def test_causality_prefix_stable(self):
        model, res, sched = self._prefilled(seed=31)
        long = decode(model, apply_kv_policy(res.cache, sched.l1), 7, res.final_logits)
        short = decode(model, apply_kv_policy(res.cache, sched.l1), 4, res.final_logits)
        assert np.array_equal(long.tokens[:4], short.tokens)
        assert np.array_equal(long.logits[:4], short.logits)

    def test_steps_validation(self):
        model, res, sched = self._prefilled()
        with pytest.raises(ValueError):
            decode(model, apply_kv_policy(res.cache, sched.l1), 0, res.final_logits)

    def test_token_count_matches_steps(self):
        model, res, sched = self._prefilled()
        out = decode(model, apply_kv_policy(res.cache, sched.l1), 9, res.final_logits)
        assert out.tokens.shape == (9,)
        assert out.logits.shape[0] == 9


class TestAttentionRatios:
    def test_dropped_layers_have_zero_visual(self):
        cfg = RunConfig(layers=6, heads=2, d_model=16, seed=4)
        model = init_model(cfg)
        stream = make_stream(12, 6, 8)
        inp = build_prefill_input(model, stream, make_text(4, 8))
        sched = PruneSchedule(
            l1=2, l2=4, l3=5, r=0.5, alpha=0.5, total_layers=6, n_key=12, n_nonkey=6
        )
        res = prefill(model, inp, sched)
        out = decode(model, apply_kv_policy(res.cache, sched.l1), 5, res.final_logits)
        ratios = attention_ratio_trace(out)
        assert np.allclose(ratios.sum(axis=-1), 1.0, atol=1e-12)
        for layer in range(sched.l1, 6):
            assert ratios[layer, 0] == 0.0
            assert ratios[layer, 1] == 1.0

    def test_uniform_attention_mass_proportional_to_counts(self):
        cfg = RunConfig(layers=2, heads=2, d_model=16, seed=6)
        model = init_model(cfg)
        for layer in range(2):
            model.wq[layer][:] = 0.0
        stream = make_stream(30, 0, 8)
        inp = build_prefill_input(model, stream, make_text(10, 8))
        res = prefill(model, inp, disabled_schedule(2))
        out = decode(model, apply_kv_policy(res.cache, 2), 2, res.final_logits)
        ratios = attention_ratio_trace(out)
        assert ratios[0, 0] == pytest.approx(0.75, abs=1e-12)
        assert ratios[0, 1] == pytest.approx(0.25, abs=1e-12)

    def test_requires_a_forward(self):
        model, = (init_model(RunConfig(layers=2, heads=2, d_model=16)),)
        stream = make_stream(4, 0, 8)
        inp = build_prefill_input(model, stream, make_text(2, 8))
        res = prefill(model, inp, disabled_schedule(2))
        out = decode(model, apply_kv_policy(res.cache, 2), 1, res.final_logits)
        with pytest.raises(ValueError):
            attention_ratio_trace(out)


class TestPositionalEncoding:
    def test_odd_width(self):
        pe = sinusoidal_positions(np.arange(4), 7)
        assert pe.shape == (4, 7)
        assert np.all(np.isfinite(pe))

    def test_original_ids_survive_pruning(self):
        # the same position id encodes identically whether or not others were pruned
        pe_all = sinusoidal_positions(np.arange(10), 16)
        pe_some = sinusoidal_positions(np.array([0, 3, 7]), 16)
        assert np.array_equal(pe_some, pe_all[[0, 3, 7]])

    def test_full_pipeline_smoke(self):
        emb, text = gen_synthetic(8, 4, 4, 12, seed=13, num_segments=2, text_len=5)
        cfg = RunConfig(k=2, layers=6, heads=2, d_model=16, layer_boundaries=(2, 4, 5), seed=13)
        stream, _ = run_vision_stage(emb, text, cfg)
        model = init_model(cfg)
        inp = build_prefill_input(model, stream, text)
        n_key, n_nonkey = stream.group_counts()
        sched = PruneSchedule.from_config(cfg, n_key, n_nonkey)
        res = prefill(model, inp, sched)
        out = decode(model, apply_kv_policy(res.cache, sched.l1), 4, res.final_logits)
        assert out.tokens.shape == (4,)
