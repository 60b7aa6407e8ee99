"""Regular (non-generated) PEFT adapters: LoRA, parallel adapter, gated prompts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .attention import ConfigError
from .numeric import DimensionError

ADAPTER_KINDS = ("none", "lora", "padapter", "prompt")
LORA_TARGETS = ("q", "k", "v", "o")
ACTIVATIONS = {"relu": torch.relu, "identity": lambda x: x, "gelu": F.gelu, "silu": F.silu}


@dataclass
class AdapterConfig:
    kind: str = "lora"
    rank: int = 8
    scale: float = 1.0
    targets: tuple[str, ...] = ("q", "k")
    bottleneck: int | None = None  # parallel adapter width; d/4 when unset
    activation: str = "relu"
    prompt_len: int = 10
    prompt_start: int = 2  # first prompted layer

    def validate(self, d_model: int, n_layers: int) -> None:
        if self.kind not in ADAPTER_KINDS:
            raise ConfigError(f"adapter.kind must be one of {ADAPTER_KINDS}, got {self.kind!r}")
        if self.kind == "lora":
            if not 1 <= self.rank <= d_model:
                raise ConfigError(f"adapter.rank must lie in [1, {d_model}], got {self.rank}")
            bad = [t for t in self.targets if t not in LORA_TARGETS]
            if bad or not self.targets:
                raise ConfigError(f"adapter.targets must be a non-empty subset of {LORA_TARGETS}, got {self.targets}")
        if self.kind == "padapter":
            if not 1 <= self.bottleneck_width(d_model) <= d_model:
                raise ConfigError("adapter.bottleneck must lie in [1, d_model]")
            if self.activation not in ACTIVATIONS:
                raise ConfigError(f"adapter.activation must be one of {sorted(ACTIVATIONS)}")
        if self.kind == "prompt":
            if self.prompt_len < 1:
                raise ConfigError("adapter.prompt_len must be >= 1")
            if not 0 <= self.prompt_start < n_layers:
                raise ConfigError(f"adapter.prompt_start must lie in [0, {n_layers - 1}]")

    def bottleneck_width(self, d_model: int) -> int:
        return self.bottleneck if self.bottleneck is not None else max(1, d_model // 4)

    def adapted_layers(self, n_layers: int) -> list[int]:
        if self.kind == "none":
            return []
        if self.kind == "prompt":
            return list(range(self.prompt_start, n_layers))
        return list(range(n_layers))


# -- functional forms -------------------------------------------------------


def lora_apply(x: Tensor, weight: Tensor, a: Tensor, b: Tensor, scale: float = 1.0) -> Tensor:
    """x W^T + scale * (x A^T) B^T with W frozen.

    ``a`` is [r, k] (regular) or [batch, r, k] (generated per example);
    ``b`` is [d, r].
    """
    d, k = weight.shape
    r = b.shape[-1]
    if a.shape[-2:] != (r, k) or b.shape != (d, r):
        raise DimensionError(
            f"lora: W {tuple(weight.shape)} incompatible with A {tuple(a.shape)} and B {tuple(b.shape)}"
        )
    base = x @ weight.detach().T
    if a.dim() == 3:
        low = torch.einsum("btk,brk->btr", x, a)
    else:
        low = x @ a.T
    return base + scale * (low @ b.T)


def padapter_apply(h: Tensor, ffn_out: Tensor, l1: Tensor, l2: Tensor, activation: str = "relu") -> Tensor:
    """ffn(h) + L2 act(L1 h): a bottleneck branch parallel to the feed-forward sublayer.

    ``l1`` is [b_pa, d] and ``l2`` is [d, b_pa], optionally with a leading
    per-example batch dimension.
    """
    act = ACTIVATIONS[activation]
    if l1.dim() == 3:
        mid = act(torch.einsum("btd,bmd->btm", h, l1))
        return ffn_out + torch.einsum("btm,bdm->btd", mid, l2)
    return ffn_out + act(h @ l1.T) @ l2.T


# -- parameter containers ---------------------------------------------------


@dataclass
class LayerAdapters:
    """Adapter tensors in effect for one layer during one forward pass."""

    lora: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)  # target -> (A, B)
    lora_scale: float = 1.0
    padapter: tuple[Tensor, Tensor] | None = None  # (L1, L2)
    activation: str = "relu"
    prompt: Tensor | None = None  # E: [K, d] or [batch, K, d]
    gate: Tensor | None = None  # [heads]


def _uniform_init(shape, fan_in: int, generator: torch.Generator) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(*shape, generator=generator) * 2 - 1) * bound


class AdapterSet(nn.Module):
    """Trainable adapter tensors for every adapted layer.

    Layers listed in ``generated`` get only the tensors that stay regular
    under hypernetwork generation: LoRA B matrices and prompt gates. Their
    LoRA A / prompt E / adapter weights come from the HyperExpert overlay.
    """

    def __init__(self, cfg: AdapterConfig, d_model: int, n_heads: int, n_layers: int,
                 generated: list[int] | tuple[int, ...] = (), seed: int = 0):
        super().__init__()
        cfg.validate(d_model, n_layers)
        self.cfg = cfg
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.generated = tuple(generated)
        gen = torch.Generator().manual_seed(seed)
        self.params = nn.ParameterDict()
        for j in cfg.adapted_layers(n_layers):
            is_gen = j in self.generated
            if cfg.kind == "lora":
                for t in cfg.targets:
                    if not is_gen:
                        self.params[f"l{j}_{t}_A"] = nn.Parameter(_uniform_init((cfg.rank, d_model), d_model, gen))
                    self.params[f"l{j}_{t}_B"] = nn.Parameter(torch.zeros(d_model, cfg.rank))
            elif cfg.kind == "padapter" and not is_gen:
                bpa = cfg.bottleneck_width(d_model)
                self.params[f"l{j}_L1"] = nn.Parameter(_uniform_init((bpa, d_model), d_model, gen))
                self.params[f"l{j}_L2"] = nn.Parameter(torch.zeros(d_model, bpa))
            elif cfg.kind == "prompt":
                if not is_gen:
                    self.params[f"l{j}_E"] = nn.Parameter(torch.randn(cfg.prompt_len, d_model, generator=gen))
                self.params[f"l{j}_gate"] = nn.Parameter(torch.zeros(n_heads))

    def layer(self, j: int, overlay: dict[str, Tensor] | None = None) -> LayerAdapters | None:
        """Resolve layer ``j``'s adapters, taking generated tensors from ``overlay``."""
        cfg = self.cfg
        if j not in cfg.adapted_layers(self.n_layers):
            return None
        overlay = overlay or {}
        p = self.params
        if cfg.kind == "lora":
            lora = {}
            for t in cfg.targets:
                a = overlay[f"{t}_A"] if j in self.generated else p[f"l{j}_{t}_A"]
                lora[t] = (a, p[f"l{j}_{t}_B"])
            return LayerAdapters(lora=lora, lora_scale=cfg.scale)
        if cfg.kind == "padapter":
            if j in self.generated:
                pair = (overlay["L1"], overlay["L2"])
            else:
                pair = (p[f"l{j}_L1"], p[f"l{j}_L2"])
            return LayerAdapters(padapter=pair, activation=cfg.activation)
        e = overlay["E"] if j in self.generated else p[f"l{j}_E"]
        return LayerAdapters(prompt=e, gate=p[f"l{j}_gate"])


def adapter_param_count(cfg: AdapterConfig, d_model: int, n_heads: int, n_layers: int,
                        generated: list[int] | tuple[int, ...] = ()) -> int:
    """Closed-form count of the regular trainable adapter scalars."""
    total = 0
    for j in cfg.adapted_layers(n_layers):
        is_gen = j in generated
        if cfg.kind == "lora":
            per_target = d_model * cfg.rank + (0 if is_gen else cfg.rank * d_model)
            total += per_target * len(cfg.targets)
        elif cfg.kind == "padapter":
            total += 0 if is_gen else 2 * cfg.bottleneck_width(d_model) * d_model
        elif cfg.kind == "prompt":
            total += n_heads + (0 if is_gen else cfg.prompt_len * d_model)
    return total
