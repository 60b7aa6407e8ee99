"""Tiny LLaMA-style decoder used as the frozen backbone.

Pre-RMSNorm blocks, rotary positions, SwiGLU feed-forward, untied output
head. The forward pass runs layer by layer over the whole sequence so that
callers can generate a layer's adapters from earlier layers' hidden states.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from . import tokenizer
from .adapters import LayerAdapters, lora_apply, padapter_apply
from .attention import ConfigError, causal_attention, prompt_attention, rope_apply
from .infini import MemoryCounters, SegmentPlan, segmented_attention


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    vocab: int = tokenizer.VOCAB_SIZE
    ffn_mult: float = 2.0
    max_local_window: int | None = None  # sliding window for dense attention; None = full causal
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    init_std: float = 0.02

    @property
    def d_key(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_value(self) -> int:
        return self.d_key

    @property
    def ffn_hidden(self) -> int:
        return int(round(self.ffn_mult * self.d_model))

    def validate(self) -> None:
        if self.n_layers < 2:
            raise ConfigError("model.n_layers must be >= 2")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"model.d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.d_key % 2:
            raise ConfigError(f"per-head width {self.d_key} must be even for rotary positions")
        if self.vocab < tokenizer.VOCAB_SIZE:
            raise ConfigError(f"model.vocab must be >= {tokenizer.VOCAB_SIZE}")
        if self.max_local_window is not None and self.max_local_window < 1:
            raise ConfigError("model.max_local_window must be >= 1")
        if self.ffn_hidden < 1:
            raise ConfigError("model.ffn_mult too small")


def backbone_param_count(cfg: ModelConfig) -> int:
    d, f = cfg.d_model, cfg.ffn_hidden
    per_layer = 4 * d * d + 3 * d * f + 2 * d
    return cfg.vocab * d * 2 + cfg.n_layers * per_layer + d


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: Tensor) -> Tensor:
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


@dataclass
class InfiniContext:
    """Per-forward settings for segmented attention."""

    plan: SegmentPlan
    mode: str  # "inf" or "qf-inf"
    beta: Tensor  # [n_layers, heads]
    w_g: Tensor | None  # [n_layers, heads, dv]
    query_mask: Tensor | None
    detach_memory: bool = False
    counters: MemoryCounters = field(default_factory=MemoryCounters)
    memories: list = field(default_factory=list)


@dataclass
class LayerActivations:
    hidden: list[Tensor]  # hidden[j] is the input of block j; hidden[n_layers] the final residual
    q: list[Tensor] = field(default_factory=list)  # un-rotated [B, T, H, dk]
    k: list[Tensor] = field(default_factory=list)
    v: list[Tensor] = field(default_factory=list)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.attn_norm = RMSNorm(d, cfg.norm_eps)
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)
        self.ffn_norm = RMSNorm(d, cfg.norm_eps)
        self.w_gate = nn.Linear(d, cfg.ffn_hidden, bias=False)
        self.w_up = nn.Linear(d, cfg.ffn_hidden, bias=False)
        self.w_down = nn.Linear(cfg.ffn_hidden, d, bias=False)

    def proj(self, name: str, x: Tensor, adapters: LayerAdapters | None) -> Tensor:
        lin = getattr(self, "w" + name)
        if adapters is not None and name in adapters.lora:
            a, b = adapters.lora[name]
            return lora_apply(x, lin.weight, a, b, adapters.lora_scale)
        return lin(x)

    def ffn(self, x: Tensor) -> Tensor:
        return self.w_down(F.silu(self.w_gate(x)) * self.w_up(x))

    def _prompt_kv(self, adapters: LayerAdapters):
        cfg = self.cfg
        e = adapters.prompt
        kp = self.proj("k", e, None)
        vp = self.proj("v", e, None)
        shape = e.shape[:-1] + (cfg.n_heads, cfg.d_key)
        return kp.reshape(shape), vp.reshape(shape)

    def forward(self, h: Tensor, layer: int, adapters: LayerAdapters | None = None,
                infini: InfiniContext | None = None, acts: LayerActivations | None = None) -> Tensor:
        cfg = self.cfg
        bsz, n_tok, _ = h.shape
        x = self.attn_norm(h)
        q = self.proj("q", x, adapters).view(bsz, n_tok, cfg.n_heads, cfg.d_key)
        k = self.proj("k", x, adapters).view(bsz, n_tok, cfg.n_heads, cfg.d_key)
        v = self.proj("v", x, adapters).view(bsz, n_tok, cfg.n_heads, cfg.d_value)
        if acts is not None:
            acts.q.append(q)
            acts.k.append(k)
            acts.v.append(v)

        extra = None
        if adapters is not None and adapters.prompt is not None:
            kp, vp = self._prompt_kv(adapters)
            gate = adapters.gate
            extra = lambda q_rot: prompt_attention(q_rot, kp, vp, gate)  # noqa: E731

        if infini is None:
            pos = torch.arange(n_tok)
            q_rot = rope_apply(q, pos, cfg.rope_base)
            attn = causal_attention(q_rot, rope_apply(k, pos, cfg.rope_base), v, cfg.max_local_window)
            if extra is not None:
                attn = attn + extra(q_rot)
        else:
            attn, mem = segmented_attention(
                q, k, v, infini.plan, infini.mode,
                beta=infini.beta[layer],
                w_g=None if infini.w_g is None else infini.w_g[layer],
                query_mask=infini.query_mask,
                d_model=cfg.d_model,
                rope_base=cfg.rope_base,
                local_extra=extra,
                counters=infini.counters,
                detach_memory=infini.detach_memory,
            )
            infini.memories.append(mem)
        h = h + self.proj("o", attn.reshape(bsz, n_tok, cfg.d_model), adapters)

        x = self.ffn_norm(h)
        f = self.ffn(x)
        if adapters is not None and adapters.padapter is not None:
            l1, l2 = adapters.padapter
            f = padapter_apply(x, f, l1, l2, adapters.activation)
        return h + f


AdapterProvider = Callable[[int, list], "LayerAdapters | None"]


class TinyLM(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.norm = RMSNorm(cfg.d_model, cfg.norm_eps)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab, bias=False)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("norm.weight"):
                    p.fill_(1.0)
                else:
                    std = self.cfg.init_std
                    if name.endswith(("wo.weight", "w_down.weight")):
                        std = std / (2 * self.cfg.n_layers) ** 0.5
                    p.copy_(torch.randn(p.shape, generator=gen) * std)

    def forward(self, tokens: Tensor, adapters: AdapterProvider | None = None,
                infini: InfiniContext | None = None, return_activations: bool = False):
        """Logits [B, T, vocab] plus activations.

        ``adapters(j, hidden)`` is called right before block j with the
        hidden states computed so far and returns that layer's adapters.
        """
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab):
            raise IndexError(f"token id out of range for vocabulary of {self.cfg.vocab}")
        h = self.embed(tokens)
        acts = LayerActivations(hidden=[h])
        for j, block in enumerate(self.blocks):
            layer_adapters = adapters(j, acts.hidden) if adapters is not None else None
            h = block(h, j, layer_adapters, infini, acts if return_activations else None)
            acts.hidden.append(h)
        logits = self.lm_head(self.norm(h))
        return logits, acts
