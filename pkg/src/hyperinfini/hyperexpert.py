"""Query-conditioned hypernetwork that emits adapter tensors for the upper layers.

Encoder: h = Dropout(ReLU(W0 mean(H_query) + b0)), one per generated layer
("per-layer") or one for all ("shared"). Decoder: affine maps from h to the
adapter tensors, always shared across generated layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
from torch import Tensor

from .adapters import AdapterConfig
from .attention import ConfigError
from .numeric import dropout, mean_pool, rms_norm

HYPER_MODES = ("off", "parallel", "sequential")
ENCODER_MODES = ("per-layer", "shared")
INPUT_SPANS = ("query", "document", "query+document")


@dataclass
class HyperConfig:
    mode: str = "parallel"
    encoders: str = "per-layer"
    split: int | None = None  # first generated layer l; n_layers // 2 when unset
    bottleneck: int = 64
    dropout: float = 0.1
    input: str = "query"

    def split_layer(self, n_layers: int) -> int:
        return n_layers // 2 if self.split is None else self.split

    def validate(self, n_layers: int, d_model: int) -> None:
        if self.mode not in HYPER_MODES:
            raise ConfigError(f"hyper.mode must be one of {HYPER_MODES}, got {self.mode!r}")
        if self.encoders not in ENCODER_MODES:
            raise ConfigError(f"hyper.encoders must be one of {ENCODER_MODES}, got {self.encoders!r}")
        if self.input not in INPUT_SPANS:
            raise ConfigError(f"hyper.input must be one of {INPUT_SPANS}, got {self.input!r}")
        if self.mode != "off":
            l = self.split_layer(n_layers)
            if not 0 < l < n_layers:
                raise ConfigError(f"hyper.split must satisfy 0 < l < {n_layers}, got {l}")
            if not 1 <= self.bottleneck < d_model:
                raise ConfigError(f"hyper.bottleneck must lie in [1, {d_model - 1}]")
            if not 0.0 <= self.dropout < 1.0:
                raise ConfigError("hyper.dropout must lie in [0, 1)")

    def generated_layers(self, adapter: AdapterConfig, n_layers: int) -> list[int]:
        if self.mode == "off":
            return []
        l = self.split_layer(n_layers)
        return [j for j in adapter.adapted_layers(n_layers) if j >= l]


# -- functional forms -------------------------------------------------------


def encode_query(h_query: Tensor, w0: Tensor, b0: Tensor, rate: float = 0.0,
                 train: bool = False, rng=None, mask: Tensor | None = None) -> Tensor:
    """h = Dropout(ReLU(W0 mean(H_query) + b0)) for H_query [Lq, d] (or batched with ``mask``)."""
    if mask is None:
        if h_query.shape[-2] == 0:
            raise ValueError("encode_query: empty query span")
        mask = torch.ones(h_query.shape[:-1], dtype=torch.bool)
    pooled = mean_pool(h_query, mask)
    return dropout(torch.relu(pooled @ w0.T + b0), rate, rng, train)


def decode_affine(h: Tensor, w: Tensor, b: Tensor, shape: tuple[int, ...]) -> Tensor:
    """reshape(W h + b) to ``shape``; batched over h's leading dims."""
    out = h @ w.T + b
    return out.reshape(*h.shape[:-1], *shape)


def decode_lora(h: Tensor, w: Tensor, b: Tensor, rank: int, in_features: int) -> Tensor:
    return decode_affine(h, w, b, (rank, in_features))


def decode_prompt(h: Tensor, wp: Tensor, bp: Tensor, prompt_len: int, d_model: int) -> Tensor:
    return decode_affine(h, wp, bp, (prompt_len, d_model))


def decode_padapter(h: Tensor, w_l1: Tensor, b_l1: Tensor, w_l2: Tensor, b_l2: Tensor,
                    bottleneck: int, d_model: int) -> tuple[Tensor, Tensor]:
    return (decode_affine(h, w_l1, b_l1, (bottleneck, d_model)),
            decode_affine(h, w_l2, b_l2, (d_model, bottleneck)))


# -- module -----------------------------------------------------------------


class HyperExpert(nn.Module):
    def __init__(self, cfg: HyperConfig, adapter: AdapterConfig, d_model: int, n_layers: int, seed: int = 0):
        super().__init__()
        cfg.validate(n_layers, d_model)
        if adapter.kind == "none":
            raise ConfigError("hyper generation needs an adapter kind")
        self.cfg = cfg
        self.adapter = adapter
        self.d_model = d_model
        self.n_layers = n_layers
        self.generated = cfg.generated_layers(adapter, n_layers)
        if not self.generated:
            raise ConfigError("hyper generation selected but no adapted layer lies at or above the split")
        b = cfg.bottleneck
        gen = torch.Generator().manual_seed(seed)
        n_enc = len(self.generated) if cfg.encoders == "per-layer" else 1
        self.encoders = nn.ModuleList(nn.Linear(d_model, b) for _ in range(n_enc))
        for enc in self.encoders:
            bound = 1.0 / math.sqrt(d_model)
            with torch.no_grad():
                enc.weight.copy_((torch.rand(enc.weight.shape, generator=gen) * 2 - 1) * bound)
                enc.bias.copy_((torch.rand(enc.bias.shape, generator=gen) * 2 - 1) * bound)
        self.shapes = self._target_shapes()
        self.decoders = nn.ModuleDict()
        for name, shape in self.shapes.items():
            lin = nn.Linear(b, math.prod(shape))
            self._init_decoder(lin, name, gen)
            self.decoders[name] = lin

    def _target_shapes(self) -> dict[str, tuple[int, int]]:
        a, d = self.adapter, self.d_model
        if a.kind == "lora":
            return {f"{t}_A": (a.rank, d) for t in a.targets}
        if a.kind == "prompt":
            return {"E": (a.prompt_len, d)}
        bpa = a.bottleneck_width(d)
        return {"L1": (bpa, d), "L2": (d, bpa)}

    def _init_decoder(self, lin: nn.Linear, name: str, gen: torch.Generator) -> None:
        b, d = self.cfg.bottleneck, self.d_model
        with torch.no_grad():
            if name == "L2":
                # generated parallel adapter starts as the identity branch
                lin.weight.zero_()
                lin.bias.zero_()
                return
            if name == "E":
                target_std = 1.0
                lin.bias.copy_(torch.randn(lin.bias.shape, generator=gen))
            else:
                target_std = 1.0 / math.sqrt(3 * d)
                lin.bias.copy_((torch.rand(lin.bias.shape, generator=gen) * 2 - 1) / math.sqrt(d))
            lin.weight.copy_(torch.randn(lin.weight.shape, generator=gen) * target_std / math.sqrt(b))

    def encoder_index(self, layer: int) -> int:
        return self.generated.index(layer) if self.cfg.encoders == "per-layer" else 0

    def source_layer(self, layer: int) -> int:
        """Which hidden state feeds the generation of ``layer``'s adapter."""
        return self.cfg.split_layer(self.n_layers) if self.cfg.mode == "parallel" else layer

    def encode(self, pooled: Tensor, enc_idx: int, train: bool = False, rng=None) -> Tensor:
        enc = self.encoders[enc_idx]
        return dropout(torch.relu(pooled @ enc.weight.T + enc.bias), self.cfg.dropout, rng, train)

    def decode(self, h: Tensor) -> dict[str, Tensor]:
        return {
            name: decode_affine(h, lin.weight, lin.bias, self.shapes[name])
            for name, lin in self.decoders.items()
        }

    def pool(self, hidden: Tensor, span_mask: Tensor) -> Tensor:
        """Mean over the conditioning span of the RMS-normalised hidden state."""
        return mean_pool(rms_norm(hidden), span_mask)


def hyper_param_count(cfg: HyperConfig, adapter: AdapterConfig, d_model: int, n_layers: int) -> int:
    """Closed-form HyperExpert size: encoders plus the shared decoder."""
    if cfg.mode == "off":
        return 0
    n_gen = len(cfg.generated_layers(adapter, n_layers))
    b = cfg.bottleneck
    n_enc = n_gen if cfg.encoders == "per-layer" else 1
    enc = n_enc * (b * d_model + b)
    if adapter.kind == "lora":
        out = len(adapter.targets) * adapter.rank * d_model
    elif adapter.kind == "prompt":
        out = adapter.prompt_len * d_model
    else:
        out = 2 * adapter.bottleneck_width(d_model) * d_model
    return enc + out * b + out
