"""Prompt layout with the query instruction placed before and after the document."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from . import tokenizer

TEMPLATE_VERSION = "v1"


@dataclass(frozen=True)
class PromptTemplate:
    # v1 renders "### Query:\n{q}\n\n### Document:\n{d}\n\n### Query:\n{q}\n\n### Summary:\n"
    query_header: str = "### Query:\n"
    document_header: str = "\n\n### Document:\n"
    repeat_header: str = "\n\n### Query:\n"
    summary_header: str = "\n\n### Summary:\n"
    version: str = TEMPLATE_VERSION


DEFAULT_TEMPLATE = PromptTemplate()


@dataclass
class PromptSpans:
    """Half-open token ranges inside one encoded prompt."""

    query: tuple[int, int]
    document: tuple[int, int]
    query_repeat: tuple[int, int] | None
    target_start: int  # first answer position, i.e. the prompt length


def build_prompt_with_repeat(query: str, document: str, template: PromptTemplate = DEFAULT_TEMPLATE,
                             repeat_query: bool = True, bos: bool = True) -> tuple[list[int], PromptSpans]:
    """Token layout [BOS][query][document][query again][summary cue].

    With ``repeat_query=False`` the second query block is dropped.
    """
    if not query:
        raise ValueError("query must be non-empty")
    toks: list[int] = [tokenizer.BOS] if bos else []

    def put(text: str) -> tuple[int, int]:
        start = len(toks)
        toks.extend(tokenizer.encode(text))
        return start, len(toks)

    put(template.query_header)
    q_span = put(query)
    put(template.document_header)
    d_span = put(document)
    r_span = None
    if repeat_query:
        put(template.repeat_header)
        r_span = put(query)
    put(template.summary_header)
    return toks, PromptSpans(query=q_span, document=d_span, query_repeat=r_span, target_start=len(toks))


class SpanError(ValueError):
    pass


def validate_spans(spans: PromptSpans, n_tokens: int) -> None:
    """Spans must be ordered query < document < repeated query and lie inside the sequence."""
    q0, q1 = spans.query
    d0, d1 = spans.document
    if not 0 <= q0 < q1 <= d0 <= d1 <= n_tokens:
        raise SpanError(f"malformed prompt spans {spans} for {n_tokens} tokens")
    if spans.query_repeat is not None:
        r0, r1 = spans.query_repeat
        if not d1 <= r0 < r1 <= n_tokens:
            raise SpanError(f"document must end before the appended query span: {spans}")
    if not spans.target_start <= n_tokens:
        raise SpanError(f"target start {spans.target_start} beyond {n_tokens} tokens")


@dataclass
class Batch:
    tokens: torch.Tensor  # [B, T] right-padded
    query_mask: torch.Tensor  # [B, T] prepended query instruction
    document_mask: torch.Tensor
    target_mask: torch.Tensor  # [B, T] positions whose next token is a summary token
    targets: torch.Tensor  # [B, T] next-token ids (PAD where unused)
    spans: list[PromptSpans]

    def __len__(self) -> int:
        return self.tokens.shape[0]


def collate(items: list[tuple[list[int], PromptSpans]], answers: list[list[int]] | None = None) -> Batch:
    """Right-pad prompts (plus optional answer tokens) into a batch.

    Right padding is exact under causal attention: padded positions come
    after every real position and never influence it.
    """
    seqs = []
    for i, (toks, _) in enumerate(items):
        seqs.append(list(toks) + (list(answers[i]) if answers is not None else []))
    width = max(len(s) for s in seqs)
    bsz = len(seqs)
    tokens = torch.full((bsz, width), tokenizer.PAD, dtype=torch.long)
    targets = torch.full((bsz, width), tokenizer.PAD, dtype=torch.long)
    qm = torch.zeros(bsz, width, dtype=torch.bool)
    dm = torch.zeros(bsz, width, dtype=torch.bool)
    tm = torch.zeros(bsz, width, dtype=torch.bool)
    for i, seq in enumerate(seqs):
        n = len(seq)
        tokens[i, :n] = torch.tensor(seq, dtype=torch.long)
        targets[i, : n - 1] = tokens[i, 1:n]
        spans = items[i][1]
        qm[i, spans.query[0]: spans.query[1]] = True
        dm[i, spans.document[0]: spans.document[1]] = True
        if answers is not None and n > spans.target_start:
            tm[i, spans.target_start - 1: n - 1] = True
    return Batch(tokens, qm, dm, tm, targets, [s for _, s in items])
