"""Frozen backbone + adapters + HyperExpert + compressive memory, composed."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
from torch import Tensor

from .adapters import AdapterConfig, AdapterSet, adapter_param_count
from .attention import ConfigError
from .hyperexpert import HyperConfig, HyperExpert, hyper_param_count
from .infini import INFINI_MODES, MemoryCounters, SegmentPlan
from .model import InfiniContext, ModelConfig, TinyLM, backbone_param_count
from .prompting import Batch, validate_spans


@dataclass
class InfiniConfig:
    mode: str = "off"  # off | inf | qf-inf
    segment_len: int = 32
    window: int | None = None
    detach_memory: bool = False
    beta_init: float = 0.0

    def validate(self) -> None:
        if self.mode not in INFINI_MODES:
            raise ConfigError(f"infini.mode must be one of {INFINI_MODES}, got {self.mode!r}")
        if self.mode != "off":
            self.plan()

    def plan(self) -> SegmentPlan:
        return SegmentPlan(self.segment_len, self.window)


class InfiniParams(nn.Module):
    def __init__(self, cfg: InfiniConfig, n_layers: int, n_heads: int, d_value: int):
        super().__init__()
        self.beta = nn.Parameter(torch.full((n_layers, n_heads), float(cfg.beta_init)))
        self.w_g = nn.Parameter(torch.zeros(n_layers, n_heads, d_value)) if cfg.mode == "qf-inf" else None


@dataclass
class ForwardOutput:
    logits: Tensor
    hidden: list[Tensor]
    generated: dict[int, dict[str, Tensor]] = field(default_factory=dict)
    counters: MemoryCounters | None = None
    memories: list = field(default_factory=list)
    activations: object = None


def trainable_param_count(model_cfg: ModelConfig, adapter: AdapterConfig, hyper: HyperConfig,
                          infini: InfiniConfig) -> int:
    """Closed-form number of trainable scalars for a configuration."""
    n, h = model_cfg.n_layers, model_cfg.n_heads
    generated = hyper.generated_layers(adapter, n)
    total = adapter_param_count(adapter, model_cfg.d_model, h, n, generated)
    total += hyper_param_count(hyper, adapter, model_cfg.d_model, n)
    if infini.mode != "off":
        total += n * h
        if infini.mode == "qf-inf":
            total += n * h * model_cfg.d_value
    return total


class QFSModel(nn.Module):
    def __init__(self, model_cfg: ModelConfig, adapter: AdapterConfig | None = None,
                 hyper: HyperConfig | None = None, infini: InfiniConfig | None = None, seed: int = 0):
        super().__init__()
        adapter = adapter or AdapterConfig(kind="none")
        hyper = hyper or HyperConfig(mode="off")
        infini = infini or InfiniConfig()
        model_cfg.validate()
        adapter.validate(model_cfg.d_model, model_cfg.n_layers)
        hyper.validate(model_cfg.n_layers, model_cfg.d_model)
        infini.validate()
        self.model_cfg, self.adapter_cfg, self.hyper_cfg, self.infini_cfg = model_cfg, adapter, hyper, infini
        self.seed = seed
        self.backbone = TinyLM(model_cfg, seed)
        self.backbone.requires_grad_(False)
        generated = hyper.generated_layers(adapter, model_cfg.n_layers)
        self.adapters = AdapterSet(adapter, model_cfg.d_model, model_cfg.n_heads, model_cfg.n_layers,
                                   generated, seed=seed + 1)
        self.hyper = (HyperExpert(hyper, adapter, model_cfg.d_model, model_cfg.n_layers, seed=seed + 2)
                      if hyper.mode != "off" else None)
        self.infini = (InfiniParams(infini, model_cfg.n_layers, model_cfg.n_heads, model_cfg.d_value)
                       if infini.mode != "off" else None)
        self.dropout_gen = torch.Generator().manual_seed(seed + 3)

    # -- bookkeeping ---------------------------------------------------------

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for name, p in self.named_parameters() if not name.startswith("backbone.")]

    def num_trainable(self) -> int:
        return sum(p.numel() for p in self.trainable_parameters())

    def closed_form_trainable(self) -> int:
        return trainable_param_count(self.model_cfg, self.adapter_cfg, self.hyper_cfg, self.infini_cfg)

    def num_backbone(self) -> int:
        return backbone_param_count(self.model_cfg)

    # -- forward -------------------------------------------------------------

    def _span_mask(self, batch: Batch) -> Tensor:
        which = self.hyper_cfg.input
        if which == "query":
            return batch.query_mask
        if which == "document":
            return batch.document_mask
        return batch.query_mask | batch.document_mask

    def forward(self, batch: Batch, return_activations: bool = False) -> ForwardOutput:
        tokens = batch.tokens
        for spans in batch.spans:
            validate_spans(spans, tokens.shape[1])
        generated: dict[int, dict[str, Tensor]] = {}
        cache: dict[tuple[int, int], dict[str, Tensor]] = {}
        span = self._span_mask(batch) if self.hyper is not None else None

        def provider(j: int, hidden: list[Tensor]):
            overlay = None
            if self.hyper is not None and j in self.hyper.generated:
                src = self.hyper.source_layer(j)
                enc_idx = self.hyper.encoder_index(j)
                key = (src, enc_idx)
                if key not in cache:
                    pooled = self.hyper.pool(hidden[src], span)
                    h = self.hyper.encode(pooled, enc_idx, self.training, self.dropout_gen)
                    cache[key] = self.hyper.decode(h)
                overlay = cache[key]
                generated[j] = overlay
            return self.adapters.layer(j, overlay)

        infini = None
        if self.infini is not None:
            infini = InfiniContext(
                plan=self.infini_cfg.plan(),
                mode=self.infini_cfg.mode,
                beta=self.infini.beta,
                w_g=self.infini.w_g,
                query_mask=batch.query_mask,
                detach_memory=self.infini_cfg.detach_memory,
            )
        uses_adapters = self.adapter_cfg.kind != "none"
        logits, acts = self.backbone(tokens, provider if uses_adapters else None, infini, return_activations)
        out = ForwardOutput(logits=logits, hidden=acts.hidden, generated=generated,
                            activations=acts if return_activations else None)
        if infini is not None:
            infini.counters.memory_bytes = sum(m.nbytes() for m in infini.memories)
            infini.counters.per_layer_bytes = [m.nbytes() for m in infini.memories]
            out.counters = infini.counters
            out.memories = infini.memories
        return out
