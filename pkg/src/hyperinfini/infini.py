"""Segmented attention with a full-context and a query-focused compressive memory.

Per layer and head the memory holds

* ``m_all``   [dk, dv]  sum of sigma(K)^T V over compressed tokens,
* ``m_query`` [dk, dv]  the same with V scaled by query relevance alpha,
* ``z``       [dk]      sum of sigma(K) over compressed tokens,

where sigma is ELU+1. All functions broadcast over leading batch/head dims.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch
from torch import Tensor

from .attention import ConfigError, causal_attention, rope_apply
from .numeric import DimensionError, elu_plus_one

INFINI_MODES = ("off", "inf", "qf-inf")


class MemoryContractError(RuntimeError):
    pass


@dataclass
class SegmentPlan:
    segment_len: int
    window: int | None = None  # local KV pad target F; 2 * segment_len when unset

    def __post_init__(self):
        if self.segment_len < 1:
            raise ConfigError("segment_len must be >= 1")
        if self.window is None:
            self.window = 2 * self.segment_len
        if not self.segment_len <= self.window <= 2 * self.segment_len:
            raise ConfigError(
                f"window must lie in [segment_len, 2*segment_len] = "
                f"[{self.segment_len}, {2 * self.segment_len}], got {self.window}"
            )

    @property
    def cache_len(self) -> int:
        return self.window - self.segment_len

    def boundaries(self, n_tokens: int) -> list[tuple[int, int]]:
        return [(s, min(s + self.segment_len, n_tokens)) for s in range(0, n_tokens, self.segment_len)]


def segment_input(tokens, plan: SegmentPlan) -> list:
    """Split a sequence into contiguous segments of ``plan.segment_len`` (last may be shorter)."""
    return [tokens[a:b] for a, b in plan.boundaries(len(tokens))]


# -- memory operations ------------------------------------------------------


def relevance_scale(q_query_mean: Tensor | None, k_cache: Tensor, v_cache: Tensor, d_model: int) -> Tensor:
    """V_hat_i = sigmoid(mean(Q_query) . K_i / sqrt(d_model)) * V_i.

    ``q_query_mean`` [..., dk]; ``k_cache`` [..., c, dk]; ``v_cache`` [..., c, dv].
    """
    if q_query_mean is None:
        raise MemoryContractError("query-instruction state missing: the query must precede the document")
    if k_cache.shape[-2] == 0:
        raise MemoryContractError("relevance_scale called with an empty cache")
    scores = (k_cache @ q_query_mean.unsqueeze(-1)) / math.sqrt(d_model)  # [..., c, 1]
    return torch.sigmoid(scores) * v_cache


@dataclass
class LayerMemory:
    m_all: Tensor
    m_query: Tensor | None
    z: Tensor
    q_sum: Tensor  # running sum of query-instruction attention queries
    q_count: Tensor  # [batch]
    compressed: int = 0  # tokens compressed so far

    @classmethod
    def empty(cls, batch: int, heads: int, dk: int, dv: int, query_memory: bool, dtype) -> "LayerMemory":
        z = torch.zeros(batch, heads, dk, dtype=dtype)
        return cls(
            m_all=torch.zeros(batch, heads, dk, dv, dtype=dtype),
            m_query=torch.zeros(batch, heads, dk, dv, dtype=dtype) if query_memory else None,
            z=z,
            q_sum=torch.zeros(batch, heads, dk, dtype=dtype),
            q_count=torch.zeros(batch, dtype=dtype),
        )

    def q_ins_mean(self) -> Tensor | None:
        if bool((self.q_count == 0).any()):
            return None
        return self.q_sum / self.q_count.view(-1, *([1] * (self.q_sum.dim() - 1)))

    def nbytes(self) -> int:
        tensors = [self.m_all, self.m_query, self.z, self.q_sum, self.q_count]
        return sum(t.numel() * t.element_size() for t in tensors if t is not None)


def update_memory(m_all: Tensor, m_query: Tensor | None, z: Tensor,
                  k_cache: Tensor, v_cache: Tensor, v_hat: Tensor | None = None):
    """One additive compression step; returns new (m_all, m_query, z)."""
    if k_cache.shape[:-1] != v_cache.shape[:-1]:
        raise DimensionError(f"update_memory: K {tuple(k_cache.shape)} and V {tuple(v_cache.shape)} disagree")
    if m_all.shape[-2:] != (k_cache.shape[-1], v_cache.shape[-1]):
        raise DimensionError(f"update_memory: memory {tuple(m_all.shape)} does not fit K/V widths")
    sk = elu_plus_one(k_cache)
    skt = sk.transpose(-1, -2)
    m_all = m_all + skt @ v_cache
    if m_query is not None:
        if v_hat is None:
            raise MemoryContractError("query-focused memory needs relevance-scaled values")
        m_query = m_query + skt @ v_hat
    z = z + sk.sum(dim=-2)
    return m_all, m_query, z


def retrieve(m_all: Tensor, m_query: Tensor | None, z: Tensor, q: Tensor):
    """A = sigma(Q) M / (sigma(Q) z), row-wise; ``q`` is [..., L, dk]."""
    if bool((z.sum(dim=-1) == 0).any()):
        raise MemoryContractError("retrieval before any token was compressed")
    sq = elu_plus_one(q)
    # floor keeps denom**2 out of the subnormal range so the backward pass stays finite
    # when very large |Q| or |K| underflow sigma; ordinary denominators are untouched
    denom = (sq @ z.unsqueeze(-1)).clamp_min(torch.finfo(q.dtype).tiny ** 0.5)
    a_all = (sq @ m_all) / denom
    a_query = None if m_query is None else (sq @ m_query) / denom
    return a_all, a_query


def inject(a_query: Tensor | None, a_all: Tensor, a_local: Tensor, w_g: Tensor | None, beta: Tensor) -> Tensor:
    """Gate retrieved content into the local attention output.

    gamma = sigmoid(W_g . A_query) is one scalar per position; with no
    query-focused memory (plain compressive attention) A_ret is A_all.
    ``w_g`` and ``beta`` must already broadcast against [..., L, dv].
    """
    # g*a + (1-g)*b written as b + g*(a-b) so equal inputs come back bit-exact
    if a_query is None:
        a_ret = a_all
    else:
        gamma = torch.sigmoid((a_query * w_g).sum(dim=-1, keepdim=True))
        a_ret = a_all + gamma * (a_query - a_all)
    return a_local + torch.sigmoid(beta) * (a_ret - a_local)


# -- segmented driver -------------------------------------------------------


@dataclass
class MemoryCounters:
    peak_kv: int = 0  # largest number of KV positions attended locally (cache + segment)
    peak_cache: int = 0  # largest carried-over KV cache
    segments: int = 0
    memory_bytes: int = 0
    per_layer_bytes: list[int] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "peak_kv": self.peak_kv,
            "peak_cache": self.peak_cache,
            "segments": self.segments,
            "memory_bytes": self.memory_bytes,
        }


def segmented_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    plan: SegmentPlan,
    mode: str,
    beta: Tensor,
    w_g: Tensor | None,
    query_mask: Tensor | None,
    d_model: int,
    rope_base: float = 10000.0,
    local_extra: Callable[[Tensor], Tensor] | None = None,
    counters: MemoryCounters | None = None,
    detach_memory: bool = False,
) -> tuple[Tensor, LayerMemory]:
    """Run one layer's attention segment by segment.

    q/k/v are un-rotated [B, T, H, d]. For each segment s:

    1. the cached KV of segment s-1 is compressed into memory (query-focused
       memory scaled by relevance to the mean query-instruction state);
    2. local causal attention runs over [cache || segment] with positions
       local to that window;
    3. once anything has been compressed, memory retrieval is gated into
       the local output.

    ``query_mask`` [B, T] marks the prepended query instruction.
    """
    if mode not in ("inf", "qf-inf"):
        raise ConfigError(f"segmented attention mode must be 'inf' or 'qf-inf', got {mode!r}")
    bsz, n_tok, heads, dk = q.shape
    dv = v.shape[-1]
    qf = mode == "qf-inf"
    if qf and query_mask is None:
        raise MemoryContractError("qf-inf needs the query-instruction span")
    if qf and n_tok > plan.segment_len and bool(query_mask[:, plan.segment_len:].any()):
        raise MemoryContractError(
            f"the prepended query instruction must end within the first segment ({plan.segment_len} tokens)"
        )
    mem = LayerMemory.empty(bsz, heads, dk, dv, qf, q.dtype)
    beta_b = beta.view(1, heads, 1, 1)
    wg_b = None if w_g is None else w_g.view(1, heads, 1, dv)
    cache_k = cache_v = None
    outputs = []
    for s0, s1 in plan.boundaries(n_tok):
        qs = q[:, s0:s1].transpose(1, 2)  # [B,H,L,dk]
        ks = k[:, s0:s1]
        vs = v[:, s0:s1]
        if cache_k is not None:
            # compress the previous segment before attending locally
            kc = cache_k.transpose(1, 2)
            vc = cache_v.transpose(1, 2)
            if detach_memory:
                kc, vc = kc.detach(), vc.detach()
            v_hat = None
            if qf:
                qmean = mem.q_ins_mean()
                if detach_memory and qmean is not None:
                    qmean = qmean.detach()
                v_hat = relevance_scale(qmean, kc, vc, d_model)
            mem.m_all, mem.m_query, mem.z = update_memory(mem.m_all, mem.m_query, mem.z, kc, vc, v_hat)
            mem.compressed += kc.shape[-2]
        pad = plan.cache_len
        if cache_k is not None and pad > 0:
            keys = torch.cat([cache_k[:, -pad:], ks], dim=1)
            vals = torch.cat([cache_v[:, -pad:], vs], dim=1)
        else:
            keys, vals = ks, vs
        n_keys = keys.shape[1]
        seg = s1 - s0
        pos = torch.arange(n_keys)
        q_rot = rope_apply(q[:, s0:s1], pos[n_keys - seg:], rope_base)
        k_rot = rope_apply(keys, pos, rope_base)
        a_local = causal_attention(q_rot, k_rot, vals, window=plan.window)
        if local_extra is not None:
            a_local = a_local + local_extra(q_rot)
        if counters is not None:
            counters.peak_kv = max(counters.peak_kv, n_keys)
            counters.peak_cache = max(counters.peak_cache, n_keys - seg)
        if mem.compressed:
            a_all, a_query = retrieve(mem.m_all, mem.m_query, mem.z, qs)
            a = inject(a_query, a_all, a_local.transpose(1, 2), wg_b, beta_b).transpose(1, 2)
        else:
            a = a_local
        outputs.append(a)
        if qf:
            qm = query_mask[:, s0:s1].to(q.dtype)
            if bool(qm.any()):
                mem.q_sum = mem.q_sum + torch.einsum("bl,bhld->bhd", qm, qs)
                mem.q_count = mem.q_count + qm.sum(dim=1)
        cache_k, cache_v = ks, vs
    if counters is not None:
        counters.segments = len(outputs)
    return torch.cat(outputs, dim=1), mem
