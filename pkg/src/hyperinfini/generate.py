"""Greedy and nucleus (top-p) decoding.

There is no incremental KV cache: every step re-runs the full forward pass,
which keeps the segmented-memory path identical between training and
decoding.
"""

from __future__ import annotations

import torch
from torch import Tensor

from . import tokenizer
from .numeric import Rng
from .prompting import Batch, PromptSpans, collate

DEFAULT_TEMPERATURE = 0.1
DEFAULT_TOP_P = 0.75


def sample_top_p(logits: Tensor, temperature: float, top_p: float, generator: torch.Generator | None) -> int:
    """Sample from the smallest set of tokens whose probability mass reaches ``top_p``."""
    if not 0.0 < top_p <= 1.0:
        raise ValueError("top_p must lie in (0, 1]")
    if temperature <= 0:
        raise ValueError("temperature must be positive (use greedy decoding instead)")
    probs = torch.softmax(logits.double() / temperature, dim=-1)
    sorted_p, order = torch.sort(probs, descending=True)
    mass_before = torch.cumsum(sorted_p, dim=-1) - sorted_p
    keep = mass_before < top_p
    keep[0] = True
    kept = sorted_p * keep
    choice = torch.multinomial(kept / kept.sum(), 1, generator=generator)
    return int(order[choice])


@torch.no_grad()
def generate_batch(model, prompts: list[tuple[list[int], PromptSpans]], max_new: int = 16,
                   greedy: bool = True, temperature: float = DEFAULT_TEMPERATURE,
                   top_p: float = DEFAULT_TOP_P, rng: Rng | None = None) -> list[list[int]]:
    """Continue each prompt until EOS or ``max_new`` tokens; returns the new tokens (EOS stripped)."""
    model.eval()
    gen = (rng or Rng(0)).torch
    base = collate(prompts)
    lengths = [len(t) for t, _ in prompts]
    bsz = len(prompts)
    width = max(lengths) + max_new
    tokens = torch.full((bsz, width), tokenizer.PAD, dtype=torch.long)
    tokens[:, : base.tokens.shape[1]] = base.tokens
    pad_extra = width - base.tokens.shape[1]
    qmask = torch.nn.functional.pad(base.query_mask, (0, pad_extra))
    dmask = torch.nn.functional.pad(base.document_mask, (0, pad_extra))
    cur = list(lengths)
    done = [False] * bsz
    outputs: list[list[int]] = [[] for _ in range(bsz)]
    for _ in range(max_new):
        live = max(cur)
        batch = Batch(tokens[:, :live], qmask[:, :live], dmask[:, :live],
                      torch.zeros(bsz, live, dtype=torch.bool), tokens[:, :live], base.spans)
        logits = model(batch).logits
        for i in range(bsz):
            if done[i]:
                continue
            row = logits[i, cur[i] - 1]
            nxt = int(row.argmax()) if greedy else sample_top_p(row, temperature, top_p, gen)
            if nxt == tokenizer.EOS:
                done[i] = True
                continue
            tokens[i, cur[i]] = nxt
            outputs[i].append(nxt)
            cur[i] += 1
        if all(done):
            break
    return outputs


def generate_top_p(model, prompt: tuple[list[int], PromptSpans], temperature: float = DEFAULT_TEMPERATURE,
                   p: float = DEFAULT_TOP_P, max_new: int = 16, rng: Rng | None = None,
                   greedy: bool = False) -> list[int]:
    return generate_batch(model, [prompt], max_new, greedy, temperature, p, rng)[0]
