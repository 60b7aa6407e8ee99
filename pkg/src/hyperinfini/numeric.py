"""Dense tensor primitives with reverse-mode gradients.

Everything here is a thin, shape-checked layer over ``torch`` autograd. The
functions exist so downstream code (and the tests) can name the exact
operation a formula uses, and so the finite-difference oracle used across
the test-suite lives in one place.
"""

from __future__ import annotations

import random
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor


class DimensionError(ValueError):
    pass


class Rng:
    """Seeded generator pair.

    ``torch`` draws come from a CPU ``torch.Generator`` (MT19937), python-level
    draws (data synthesis, shuffling) from ``random.Random`` (also MT19937).
    Both are bit-reproducible across runs for a given seed.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.torch = torch.Generator(device="cpu").manual_seed(self.seed)
        self.py = random.Random(self.seed)

    def spawn(self, offset: int) -> "Rng":
        return Rng((self.seed * 1_000_003 + offset) % (2**63))

    def normal(self, *shape: int, std: float = 1.0, dtype=torch.float64) -> Tensor:
        return torch.randn(*shape, generator=self.torch, dtype=dtype) * std

    def uniform(self, *shape: int, low: float = 0.0, high: float = 1.0, dtype=torch.float64) -> Tensor:
        return torch.rand(*shape, generator=self.torch, dtype=dtype) * (high - low) + low


def _shape(t: Tensor) -> tuple[int, ...]:
    return tuple(t.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {_shape(a)} by {_shape(b)}")
    return a @ b


def add(a: Tensor, b: Tensor | float) -> Tensor:
    if isinstance(b, Tensor) and b.dim() > 0 and _shape(a) != _shape(b):
        raise DimensionError(f"add: shapes {_shape(a)} and {_shape(b)} differ")
    return a + b


def mul(a: Tensor, b: Tensor | float) -> Tensor:
    if isinstance(b, Tensor) and b.dim() > 0 and _shape(a) != _shape(b):
        raise DimensionError(f"mul: shapes {_shape(a)} and {_shape(b)} differ")
    return a * b


def elu_plus_one(x: Tensor) -> Tensor:
    """ELU(alpha=1) shifted by one: x + 1 for x >= 0, exp(x) otherwise."""
    # exp(x) directly: elu(x) + 1 cancels to zero for very negative x
    return torch.where(x > 0, x + 1.0, torch.exp(torch.clamp(x, max=0.0)))


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def softmax(x: Tensor) -> Tensor:
    return torch.softmax(x, dim=-1)


def rms_norm(x: Tensor, weight: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    out = x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    return out if weight is None else out * weight


def dropout(x: Tensor, rate: float, rng: Rng | torch.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; the identity when ``train`` is false or ``rate`` is 0."""
    if not train or rate <= 0.0:
        return x
    if rate >= 1.0:
        return torch.zeros_like(x)
    gen = rng.torch if isinstance(rng, Rng) else rng
    keep = torch.rand(x.shape, generator=gen, dtype=torch.float32) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return torch.cat(list(tensors), dim=axis)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= x.shape[0]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for shape {_shape(x)}")
    return x[start:stop]


def transpose(x: Tensor) -> Tensor:
    if x.dim() != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {_shape(x)}")
    return x.transpose(0, 1)


def embedding(table: Tensor, ids: Tensor) -> Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"token id out of range for vocabulary of {table.shape[0]}")
    return F.embedding(ids, table)


def mean_pool(x: Tensor, mask: Tensor) -> Tensor:
    """Mean of the rows of ``x`` selected by ``mask``.

    Accepts ``x`` of shape [L, d] with mask [L], or a batch [B, L, d] with
    mask [B, L]; every batch row must select at least one position.
    """
    mask = mask.to(torch.bool)
    if x.shape[:-1] != mask.shape:
        raise DimensionError(f"mean_pool: mask shape {_shape(mask)} does not match {_shape(x)}")
    counts = mask.sum(dim=-1)
    if bool((counts == 0).any()):
        raise ValueError("mean_pool: mask selects no positions (empty span)")
    w = mask.to(x.dtype).unsqueeze(-1)
    return (x * w).sum(dim=-2) / counts.to(x.dtype).unsqueeze(-1)


def backward(loss: Tensor, params: Sequence[Tensor]) -> dict[int, Tensor]:
    """Gradients of a scalar ``loss`` for each tensor in ``params``.

    Returns a map keyed by position in ``params``; tensors unreachable from
    the loss get zeros of their own shape.
    """
    if loss.dim() != 0:
        raise DimensionError(f"backward needs a scalar loss, got shape {_shape(loss)}")
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    return {i: (torch.zeros_like(p) if g is None else g) for i, (p, g) in enumerate(zip(params, grads))}


def finite_difference_grad(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-6) -> Tensor:
    """Central-difference gradient of scalar ``fn()`` w.r.t. ``param`` (perturbed in place)."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(a: Tensor, b: Tensor, floor: float = 1e-10) -> float:
    num = (a - b).norm().item()
    den = max(a.norm().item(), b.norm().item())
    if den < floor:
        return num
    return num / den


def gradient_check(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> list[float]:
    """Relative error between autograd and central differences, one per param."""
    loss = fn()
    analytic = backward(loss, params)
    return [
        relative_error(analytic[i].detach(), finite_difference_grad(fn, p, eps))
        for i, p in enumerate(params)
    ]
