import math

import pytest
import torch

from hyperinfini.attention import ConfigError, attention_mask, causal_attention, prompt_attention, rope_apply
from hyperinfini.model import ModelConfig, TinyLM, backbone_param_count
from hyperinfini.numeric import Rng


def loop_attention(q, k, v, window=None):
    """Masked softmax attention, one query/head at a time."""
    b, tq, h, dk = q.shape
    tk = k.shape[1]
    out = torch.zeros(b, tq, h, v.shape[-1], dtype=torch.float64)
    for bi in range(b):
        for hi in range(h):
            for i in range(tq):
                qpos = i + tk - tq
                scores = []
                for j in range(tk):
                    visible = j <= qpos and (window is None or qpos - j < window)
                    if visible:
                        s = sum(q[bi, i, hi, t].item() * k[bi, j, hi, t].item() for t in range(dk))
                        scores.append((j, s / math.sqrt(dk)))
                top = max(s for _, s in scores)
                weights = [(j, math.exp(s - top)) for j, s in scores]
                total = sum(w for _, w in weights)
                for j, w in weights:
                    out[bi, i, hi] += (w / total) * v[bi, j, hi]
    return out


class TestCausalAttention:
    def test_single_position_returns_v(self):
        rng = Rng(0)
        q, k, v = rng.normal(1, 1, 2, 4), rng.normal(1, 1, 2, 4), rng.normal(1, 1, 2, 4)
        assert torch.allclose(causal_attention(q, k, v), v, atol=1e-15, rtol=0)

    def test_identical_keys_give_uniform_weights(self):
        rng = Rng(1)
        q = rng.normal(1, 5, 1, 4)
        k = rng.normal(1, 1, 1, 4).expand(1, 5, 1, 4)
        v = rng.normal(1, 5, 1, 3)
        out = causal_attention(q, k, v)
        expected = torch.stack([v[0, : i + 1, 0].mean(0) for i in range(5)])
        assert torch.allclose(out[0, :, 0], expected, atol=1e-12, rtol=0)

    @pytest.mark.parametrize("window", [None, 1, 2, 3])
    def test_against_loop_oracle(self, window):
        rng = Rng(2)
        q, k, v = rng.normal(2, 4, 2, 4), rng.normal(2, 4, 2, 4), rng.normal(2, 4, 2, 3)
        assert torch.allclose(causal_attention(q, k, v, window), loop_attention(q, k, v, window), atol=1e-10, rtol=0)

    def test_queries_are_the_trailing_positions(self):
        rng = Rng(3)
        q, k, v = rng.normal(1, 2, 1, 4), rng.normal(1, 5, 1, 4), rng.normal(1, 5, 1, 2)
        assert torch.allclose(causal_attention(q, k, v, 3), loop_attention(q, k, v, 3), atol=1e-10, rtol=0)

    def test_mask_shape_and_rule(self):
        m = attention_mask(2, 4, window=2)
        assert m.tolist() == [[False, True, True, False], [False, False, True, True]]

    def test_zero_window_rejected(self):
        x = torch.zeros(1, 1, 1, 2)
        with pytest.raises(ConfigError):
            causal_attention(x, x, x, window=0)


class TestRope:
    def test_position_zero_is_identity(self):
        x = Rng(4).normal(3, 2, 8)
        assert torch.equal(rope_apply(x, torch.zeros(3, dtype=torch.long)), x)

    def test_norm_preserved(self):
        x = Rng(5).normal(6, 3, 8)
        out = rope_apply(x, torch.arange(6) * 17)
        assert torch.allclose(out.norm(dim=-1), x.norm(dim=-1), atol=1e-10, rtol=0)

    def test_relative_offset(self):
        rng = Rng(6)
        q, k = rng.normal(1, 1, 16), rng.normal(1, 1, 16)

        def score(i, j):
            return (rope_apply(q, torch.tensor([i])) * rope_apply(k, torch.tensor([j]))).sum().item()

        assert score(3, 1) == pytest.approx(score(7, 5), abs=1e-10)
        assert score(3, 1) != pytest.approx(score(3, 2), abs=1e-6)

    def test_odd_width_rejected(self):
        with pytest.raises(ConfigError):
            rope_apply(torch.zeros(2, 1, 5), torch.arange(2))


class TestPromptAttention:
    def test_zero_gate_contributes_nothing(self):
        rng = Rng(7)
        q = rng.normal(1, 3, 2, 4)
        out = prompt_attention(q, rng.normal(5, 2, 4), rng.normal(5, 2, 4), torch.zeros(2, dtype=torch.float64))
        assert torch.equal(out, torch.zeros_like(out))

    def test_gate_sweep_is_monotone_towards_prompt_value(self):
        rng = Rng(8)
        q = rng.normal(1, 3, 1, 4)
        pv = rng.normal(1, 1, 4)
        pk = rng.normal(1, 1, 4)
        norms = []
        for g in (0.0, 1.0, 4.0):
            out = prompt_attention(q, pk, pv, torch.tensor([g], dtype=torch.float64))
            norms.append(out.norm().item())
            # with a single prompt the softmax is 1, so the output is tanh(g) * v
            assert torch.allclose(out[0, :, 0], math.tanh(g) * pv[0, 0].expand(3, 4), atol=1e-12)
        assert norms[0] < norms[1] < norms[2]

    def test_prompt_output_ignores_token_keys(self):
        rng = Rng(9)
        q = rng.normal(1, 4, 1, 4)
        pk, pv = rng.normal(3, 1, 4), rng.normal(3, 1, 4)
        gate = torch.ones(1, dtype=torch.float64)
        out = prompt_attention(q, pk, pv, gate)
        # each row depends only on its own query; permuting rows permutes outputs
        perm = torch.tensor([2, 0, 3, 1])
        assert torch.allclose(prompt_attention(q[:, perm], pk, pv, gate), out[:, perm], atol=1e-14)


def small_model(seed=0, **kw):
    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, **kw)
    return TinyLM(cfg, seed=seed).double()


class TestTinyLM:
    def test_deterministic_logits(self):
        tok = torch.tensor([[65]])
        a, _ = small_model()(tok)
        b, _ = small_model()(tok)
        assert torch.equal(a, b)

    def test_causality(self):
        model = small_model()
        gen = torch.Generator().manual_seed(0)
        tok = torch.randint(0, 256, (1, 12), generator=gen)
        base, _ = model(tok)
        for t in range(11):
            alt = tok.clone()
            alt[0, t + 1:] = torch.randint(0, 256, (11 - t,), generator=gen)
            out, _ = model(alt)
            assert torch.equal(out[0, : t + 1], base[0, : t + 1])

    def test_activations_exposed_for_every_layer(self):
        model = small_model()
        _, acts = model(torch.arange(5).unsqueeze(0), return_activations=True)
        assert len(acts.hidden) == 3 and len(acts.q) == len(acts.k) == len(acts.v) == 2
        assert acts.q[0].shape == (1, 5, 2, 8)

    def test_unknown_token_rejected(self):
        with pytest.raises(IndexError):
            small_model()(torch.tensor([[259]]))

    def test_param_count_closed_form(self):
        for n, d, h, mult in [(2, 16, 2, 2.0), (4, 128, 4, 2.0), (3, 32, 4, 1.5)]:
            cfg = ModelConfig(n_layers=n, d_model=d, n_heads=h, ffn_mult=mult)
            assert backbone_param_count(cfg) == sum(p.numel() for p in TinyLM(cfg).parameters())

    @pytest.mark.parametrize("kw", [{"n_layers": 1}, {"d_model": 15}, {"vocab": 100}, {"d_model": 12, "n_heads": 4}])
    def test_invalid_configs(self, kw):
        base = {"n_layers": 2, "d_model": 16, "n_heads": 2}
        base.update(kw)
        with pytest.raises(ConfigError):
            ModelConfig(**base).validate()
