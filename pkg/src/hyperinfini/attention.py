"""Rotary positions and masked softmax attention shared by the dense and
segmented attention paths."""

from __future__ import annotations

import math

import torch
from torch import Tensor


class ConfigError(ValueError):
    pass


def rope_apply(x: Tensor, positions: Tensor, base: float = 10000.0) -> Tensor:
    """Rotate ``x`` [..., T, H, dk] by ``positions`` [T].

    Dimension i is paired with i + dk/2 (half-split layout); each pair is a
    plane rotated by ``position * base**(-2i/dk)``.
    """
    dk = x.shape[-1]
    if dk % 2:
        raise ConfigError(f"rotary embedding needs an even head width, got {dk}")
    half = dk // 2
    inv_freq = base ** (-torch.arange(half, dtype=torch.float64) * 2.0 / dk)
    angles = positions.to(torch.float64)[:, None] * inv_freq[None, :]  # [T, half]
    cos = angles.cos().to(x.dtype)[:, None, :]
    sin = angles.sin().to(x.dtype)[:, None, :]
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def attention_mask(n_query: int, n_key: int, window: int | None, device=None) -> Tensor:
    """Boolean [n_query, n_key] visibility.

    Queries are the last ``n_query`` of the ``n_key`` positions; key j is
    visible to query i when it is not in the future and fewer than ``window``
    positions back.
    """
    offset = n_key - n_query
    qpos = torch.arange(n_query, device=device)[:, None] + offset
    kpos = torch.arange(n_key, device=device)[None, :]
    visible = kpos <= qpos
    if window is not None:
        visible &= (qpos - kpos) < window
    return visible


def causal_attention(q: Tensor, k: Tensor, v: Tensor, window: int | None = None) -> Tensor:
    """softmax(QK^T / sqrt(dk) + mask) V for q [B,Tq,H,dk], k/v [B,Tk,H,d]."""
    if window is not None and window < 1:
        raise ConfigError("attention window must be >= 1")
    dk = q.shape[-1]
    scores = torch.einsum("bqhd,bkhd->bhqk", q, k) / math.sqrt(dk)
    mask = attention_mask(q.shape[1], k.shape[1], window, device=q.device)
    scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return torch.einsum("bhqk,bkhd->bqhd", weights, v)


def prompt_attention(q: Tensor, prompt_k: Tensor, prompt_v: Tensor, gate: Tensor) -> Tensor:
    """Gated attention onto soft-prompt positions (zero-init gating).

    ``prompt_k``/``prompt_v`` are [P, H, d] or per-example [B, P, H, d]. The
    softmax runs over the prompt positions alone and the result is scaled by
    ``tanh(gate)`` per head, so a zero gate contributes exactly nothing.
    Prompt positions only serve as keys/values; they never act as queries.
    """
    if prompt_k.dim() == 3:
        prompt_k = prompt_k.unsqueeze(0).expand(q.shape[0], -1, -1, -1)
        prompt_v = prompt_v.unsqueeze(0).expand(q.shape[0], -1, -1, -1)
    dk = q.shape[-1]
    scores = torch.einsum("bqhd,bphd->bhqp", q, prompt_k) / math.sqrt(dk)
    weights = torch.softmax(scores, dim=-1)
    out = torch.einsum("bhqp,bphd->bqhd", weights, prompt_v)
    return out * torch.tanh(gate).view(1, 1, -1, 1)
