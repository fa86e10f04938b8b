import numpy as np
import pytest

from ppa import encoder as enc, numerics as nx
from ppa.tokenizer import CLS, SEP

TOY = enc.EncoderConfig()


@pytest.fixture(scope="module")
def params():
    return enc.init_params(TOY, seed=0)


class TestConfig:
    def test_heads_must_divide_hidden(self):
        with pytest.raises(ValueError):
            enc.EncoderConfig(hidden_size=64, num_heads=5)

    def test_parameter_count_matches_formula(self, params):
        assert params.parameter_count() == enc.parameter_count_formula(TOY)

    def test_full_scale_count_near_published_size(self):
        count = enc.parameter_count_formula(enc.FULL_SCALE_CONFIG)
        assert abs(count - 172e6) / 172e6 <= 0.02


class TestForward:
    def test_minimal_input(self, params):
        hidden, h = enc.forward(params, [CLS])
        assert hidden.shape == (1, TOY.hidden_size)
        assert h.shape == (TOY.hidden_size,)
        assert np.all(np.isfinite(h.data))

    def test_position_sensitivity(self, params):
        a = enc.forward(params, [CLS, 10, 11])[1].data
        b = enc.forward(params, [CLS, 11, 10])[1].data
        assert not np.allclose(a, b)

    def test_bilingual_positions_run_continuously(self, params):
        # two-segment input gets positions 0..len-1; truncating changes later states
        ids = [CLS, 10, 11, SEP, 12, 13, SEP]
        segs = [0, 0, 0, 0, 1, 1, 1]
        hidden, _ = enc.forward(params, ids, segs)
        assert hidden.shape == (7, TOY.hidden_size)
        # same tokens with positions implicitly reset would equal a fresh forward
        # of the second half; verify continuous numbering by comparing against it
        second_half, _ = enc.forward(params, [CLS, 12, 13], [0, 1, 1])
        assert not np.allclose(hidden.data[4:6], second_half.data[1:3])

    def test_first_token_must_be_cls(self, params):
        with pytest.raises(enc.InputFormatError):
            enc.forward(params, [10, 11])

    def test_over_length_rejected(self, params):
        with pytest.raises(enc.SequenceTooLongError):
            enc.forward(params, [CLS] + [10] * TOY.max_positions)

    def test_batch_permutation_covariance(self, params):
        x = [CLS, 10, 11, 12]
        y = [CLS, 20, 21, 22]
        ids_xy, _, m_xy = enc.pad_batch([x, y])
        ids_yx, _, m_yx = enc.pad_batch([y, x])
        h_xy, s_xy = enc.encode_batch(params, ids_xy, pad_mask=m_xy)
        h_yx, s_yx = enc.encode_batch(params, ids_yx, pad_mask=m_yx)
        assert np.array_equal(h_xy.data[0], h_yx.data[1])
        assert np.array_equal(h_xy.data[1], h_yx.data[0])
        assert np.array_equal(s_xy.data[0], s_yx.data[1])

    def test_padding_does_not_change_real_rows(self, params):
        short = [CLS, 10, 11]
        longer = [CLS, 20, 21, 22, 23, 24]
        ids, _, mask = enc.pad_batch([short, longer])
        _, sent = enc.encode_batch(params, ids, pad_mask=mask)
        alone, alone_sent = enc.forward(params, short)
        np.testing.assert_allclose(sent.data[0], alone_sent.data, atol=2e-5)

    def test_gradients_reach_every_parameter(self, params):
        p = params.copy()
        ids, segs, mask = enc.pad_batch([[CLS, 10, 11, SEP, 12, SEP], [CLS, 20, 21, SEP, 22, SEP]],
                                        [[0, 0, 0, 0, 1, 1], [0, 0, 0, 0, 1, 1]])
        hidden, sent = enc.encode_batch(p, ids, segs, mask)
        z = enc.project(p, sent)
        # drive every head path: hidden + projection + mlm bias; the z term
        # must be non-spherical or the normalize projects its gradient out
        rng = np.random.default_rng(0)
        probe = nx.Tensor(rng.standard_normal(z.data.shape).astype(np.float32))
        flat = nx.reshape(hidden, (hidden.data.shape[0] * hidden.data.shape[1], TOY.hidden_size))
        logits = nx.add(nx.matmul(flat, nx.transpose(p["tok_emb"], (1, 0))), p["mlm_bias"])
        loss = nx.add(nx.reduce_sum(nx.mul(z, probe)), nx.reduce_mean(nx.mul(logits, logits)))
        loss.backward()
        for name, t in p.named().items():
            assert t.grad is not None, name
            g = t.grad
            if name == "tok_emb":
                g = np.delete(g, 0, axis=0)  # padding row may stay at zero
            if name == "seg_emb":
                continue  # second row only trained when segment 1 occurs; covered here anyway
            assert np.any(g != 0), f"zero gradient for {name}"


class TestProjection:
    def test_constructed_weights_select_coordinates(self):
        p = enc.init_params(enc.EncoderConfig(hidden_size=4, num_heads=2, proj_size=2,
                                              ff_size=8, vocab_size=16), seed=1)
        p["proj_w1"].data = np.eye(4, dtype=np.float32)
        w2 = np.zeros((4, 2), dtype=np.float32)
        w2[0, 0] = 1.0
        w2[2, 1] = 1.0
        p["proj_w2"].data = w2
        h = nx.Tensor(np.array([3.0, 1.0, 4.0, 1.0], dtype=np.float32))
        z = enc.project(p, h).data
        h_norm = h.data / np.linalg.norm(h.data)
        expect = np.array([h_norm[0], h_norm[2]])
        expect /= np.linalg.norm(expect)
        np.testing.assert_allclose(z, expect, atol=1e-6)

    def test_scale_invariance(self, params):
        rng = np.random.default_rng(0)
        h = rng.standard_normal(TOY.hidden_size).astype(np.float32)
        z1 = enc.project(params, nx.Tensor(h)).data
        z2 = enc.project(params, nx.Tensor(5.0 * h)).data
        np.testing.assert_allclose(z1, z2, atol=1e-6)

    def test_output_unit_norm(self, params):
        rng = np.random.default_rng(1)
        for _ in range(5):
            h = nx.Tensor(rng.standard_normal(TOY.hidden_size).astype(np.float32))
            assert abs(np.linalg.norm(enc.project(params, h).data) - 1.0) < 1e-6


class TestSentenceEmbed:
    def test_deterministic(self, params):
        text = [10, 11, 12, 13, 14]
        a = enc.sentence_embed(params, text)
        b = enc.sentence_embed(params, text)
        assert np.array_equal(a, b)

    def test_self_cosine_is_one(self, params):
        z = enc.sentence_embed(params, [10, 11, 12])
        assert abs(float(z @ z) - 1.0) < 1e-6

    def test_batch_matches_single(self, params):
        texts = [[10, 11, 12], [20, 21, 22, 23, 24]]
        batch = enc.sentence_embed_batch(params, texts)
        for i, t in enumerate(texts):
            np.testing.assert_allclose(batch[i], enc.sentence_embed(params, t), atol=2e-5)

    def test_mean_pool_config(self):
        cfg = enc.EncoderConfig(mean_pool=True)
        p = enc.init_params(cfg, seed=2)
        z = enc.sentence_embed(p, [10, 11, 12])
        assert abs(np.linalg.norm(z) - 1.0) < 1e-6


class TestGradCheckBlocks:
    def test_attention_block_gradients(self):
        cfg = enc.EncoderConfig(num_layers=1, hidden_size=8, num_heads=2, ff_size=16,
                                vocab_size=32, max_positions=16, proj_size=4)
        p = enc.init_params(cfg, seed=3)
        ids, _, mask = enc.pad_batch([[CLS, 10, 11, 12, 13]])
        names = ["layer0.wq", "layer0.wk", "layer0.wv", "layer0.wo", "layer0.w_ff1"]

        def block(*weights):
            q = p.copy()
            for name, w in zip(names, weights):
                q.tensors[name] = w
            hidden, _ = enc.encode_batch(q, ids, pad_mask=mask)
            return hidden

        shapes = [p[n].data.shape for n in names]
        rng = np.random.default_rng(0)

        def op(*ws):
            return block(*ws)

        rep = nx.grad_check(op, shapes, seed=5, max_coords=24, input_scale=0.2)
        assert rep.passed, str(rep)

    def test_serialization_round_trip(self, params, tmp_path):
        path = tmp_path / "enc.bin"
        nx.save_tensors(path, params.as_arrays(), meta={"config": params.config.__dict__})
        arrays, meta = nx.load_tensors(path)
        fresh = enc.init_params(TOY, seed=99)
        fresh.load_arrays(arrays)
        for k in params.named():
            assert np.array_equal(fresh[k].data, params[k].data)
