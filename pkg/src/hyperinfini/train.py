"""Masked LM objective, warmup + cosine schedule and the AdamW training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor

from . import tokenizer
from .attention import ConfigError
from .data import Example
from .numeric import Rng
from .prompting import DEFAULT_TEMPLATE, Batch, PromptTemplate, build_prompt_with_repeat, collate
from .system import QFSModel

log = logging.getLogger(__name__)

METRIC_FIELDS = ["epoch", "split", "loss", "exact_match", "rouge1", "rouge2", "rougeL", "rougeLsum", "lr", "seconds"]


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    warmup_epochs: float = 1.0
    batch_size: int = 32
    lr: float = 0.006
    weight_decay: float = 0.02
    epochs: int = 3
    seed: int = 0
    schedule: str = "cosine"  # cosine | constant
    clip_norm: float = 1.0
    eval_generation: bool = False  # exact-match / ROUGE on the validation split each epoch
    max_new_tokens: int = 16

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("train.batch_size and train.epochs must be >= 1")
        if self.lr < 0 or self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ConfigError("train.lr, train.weight_decay and train.warmup_epochs must be >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError("train.schedule must be 'cosine' or 'constant'")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("train.clip_norm must be positive")


def masked_loss(logits: Tensor, targets: Tensor, target_mask: Tensor) -> Tensor:
    """Mean next-token cross-entropy over the positions in ``target_mask``."""
    n = int(target_mask.sum())
    if n == 0:
        raise ValueError("masked_loss: target mask is empty")
    flat = target_mask.reshape(-1)
    sel_logits = logits.reshape(-1, logits.shape[-1])[flat]
    sel_targets = targets.reshape(-1)[flat]
    return F.cross_entropy(sel_logits, sel_targets, reduction="mean")


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int, schedule: str = "cosine") -> float:
    """Linear warmup to ``base_lr`` over ``warmup_steps``, then cosine decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if schedule == "constant":
        return base_lr
    decay_steps = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / decay_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def encode_examples(examples: list[Example], repeat_query: bool = True,
                    template: PromptTemplate = DEFAULT_TEMPLATE, max_doc_bytes: int | None = None,
                    all_references: bool = True):
    """(prompt tokens, spans, answer tokens) triples; one per reference when ``all_references``."""
    items = []
    for ex in examples:
        doc = ex.document
        if max_doc_bytes is not None:
            doc = doc.encode("utf-8")[:max_doc_bytes].decode("utf-8", errors="ignore")
        toks, spans = build_prompt_with_repeat(ex.query, doc, template, repeat_query)
        refs = ex.summaries if all_references else ex.summaries[:1]
        for ref in refs:
            items.append((toks, spans, tokenizer.encode(ref) + [tokenizer.EOS]))
    return items


def make_batch(items) -> Batch:
    return collate([(t, s) for t, s, _ in items], [a for _, _, a in items])


def iterate_batches(items, batch_size: int, rng: Rng | None):
    order = list(range(len(items)))
    if rng is not None:
        rng.py.shuffle(order)
    for i in range(0, len(order), batch_size):
        yield make_batch([items[j] for j in order[i: i + batch_size]])


@torch.no_grad()
def evaluate_loss(model: QFSModel, items, batch_size: int) -> float:
    model.eval()
    total, count = 0.0, 0
    for batch in iterate_batches(items, batch_size, None):
        out = model(batch)
        n = int(batch.target_mask.sum())
        total += masked_loss(out.logits, batch.targets, batch.target_mask).item() * n
        count += n
    return total / max(count, 1)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_val_loss: float = float("inf")
    best_epoch: int = -1
    final_train_loss: float = float("nan")
    best_state: dict | None = None


def train(model: QFSModel, train_examples: list[Example], val_examples: list[Example], cfg: TrainConfig,
          repeat_query: bool = True, template: PromptTemplate = DEFAULT_TEMPLATE,
          metrics_path: str | Path | None = None, max_doc_bytes: int | None = None,
          eval_fn=None) -> TrainResult:
    """AdamW on the model's trainable tensors; keeps the best state by validation loss.

    ``eval_fn(model) -> dict`` optionally adds generation metrics to each
    validation row.
    """
    cfg.validate()
    torch.manual_seed(cfg.seed)
    rng = Rng(cfg.seed)
    params = model.trainable_parameters()
    if not params:
        raise ConfigError("nothing to train: configuration has no trainable tensors")
    train_items = encode_examples(train_examples, repeat_query, template, max_doc_bytes)
    val_items = encode_examples(val_examples, repeat_query, template, max_doc_bytes) if val_examples else []
    steps_per_epoch = math.ceil(len(train_items) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    warmup_steps = int(round(cfg.warmup_epochs * steps_per_epoch))
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: lr_at(s, 1.0, warmup_steps, total_steps, cfg.schedule))

    result = TrainResult()
    writer = None
    fh = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
    step = 0
    try:
        for epoch in range(cfg.epochs):
            model.train()
            t0 = time.time()
            total, count = 0.0, 0
            for batch in iterate_batches(train_items, cfg.batch_size, rng):
                out = model(batch)
                loss = masked_loss(out.logits, batch.targets, batch.target_mask)
                if not torch.isfinite(loss):
                    raise DivergenceError(f"non-finite loss {loss.item()} at epoch {epoch} step {step}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.clip_norm is not None:
                    torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
                opt.step()
                sched.step()
                step += 1
                if step % 10 == 0:
                    log.debug("step %d loss %.4f", step, loss.item())
                n = int(batch.target_mask.sum())
                total += loss.item() * n
                count += n
            train_loss = total / max(count, 1)
            row = {"epoch": epoch, "split": "train", "loss": train_loss,
                   "lr": opt.param_groups[0]["lr"], "seconds": round(time.time() - t0, 3)}
            result.history.append(row)
            result.final_train_loss = train_loss
            if writer:
                writer.writerow(row)
            if val_items:
                vrow = {"epoch": epoch, "split": "val", "loss": evaluate_loss(model, val_items, cfg.batch_size)}
                if eval_fn is not None and cfg.eval_generation:
                    vrow.update(eval_fn(model))
                result.history.append(vrow)
                if writer:
                    writer.writerow(vrow)
                if vrow["loss"] < result.best_val_loss:
                    result.best_val_loss = vrow["loss"]
                    result.best_epoch = epoch
                    result.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            log.info("epoch %d train %.4f val %s", epoch, train_loss,
                     result.history[-1]["loss"] if val_items else "-")
            if fh:
                fh.flush()
    finally:
        if fh:
            fh.close()
    if result.best_state is None:
        result.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        result.best_epoch = cfg.epochs - 1
    return result
