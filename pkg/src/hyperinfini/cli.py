"""Command-line entry point: train, evaluate, generate, ablate, dump-params,
footprint and make-needle.

Exit codes: 0 success, 2 configuration error, 3 runtime failure. Relative
output paths resolve against ``$HYPERINFINI_OUT`` (default: current dir).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import torch

from . import tokenizer
from .attention import ConfigError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, apply_overrides, load_config, read_raw
from .data import Example, SchemaError, gen_needle_task, load_jsonl, write_jsonl
from .generate import generate_batch
from .infini import MemoryContractError
from .metrics import aggregate, score_example
from .model import backbone_param_count
from .numeric import Rng
from .prompting import SpanError, build_prompt_with_repeat, collate
from .system import QFSModel, trainable_param_count
from .train import DivergenceError, encode_examples, train

log = logging.getLogger("hyperinfini")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
OUT_ENV = "HYPERINFINI_OUT"
REPORT_FIELDS = ["id", "r1", "r2", "rl", "rlsum", "exact_match", "prediction"]


class RuntimeFailure(RuntimeError):
    pass


# -- helpers ----------------------------------------------------------------


def output_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "."))


def resolve_out(path: str | Path) -> Path:
    path = Path(path)
    return path if path.is_absolute() else output_root() / path


def run_dir(cfg: RunConfig, override: str | None = None) -> Path:
    return resolve_out(override or cfg.run.output_dir or f"runs/{cfg.run.name}")


def write_snapshot(cfg: RunConfig, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "resolved_config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def build_model(cfg: RunConfig) -> QFSModel:
    torch.manual_seed(cfg.run.seed)
    return QFSModel(cfg.model, cfg.adapter, cfg.hyper, cfg.infini, seed=cfg.run.seed)


def load_splits(cfg: RunConfig) -> dict[str, list[Example]]:
    if cfg.data.train:
        splits = {"train": load_jsonl(cfg.data.train)}
        splits["val"] = load_jsonl(cfg.data.val) if cfg.data.val else []
        splits["test"] = load_jsonl(cfg.data.test) if cfg.data.test else []
        return splits
    nd = cfg.needle
    total = nd.n_train + nd.n_val + nd.n_test
    data = gen_needle_task(nd.n_pairs, nd.doc_len, total, nd.seed, nd.key_len, nd.value_len)
    return {
        "train": data[: nd.n_train],
        "val": data[nd.n_train: nd.n_train + nd.n_val],
        "test": data[nd.n_train + nd.n_val:],
    }


def checkpoint_tensors(model: QFSModel, state: dict | None = None) -> dict[str, torch.Tensor]:
    state = state if state is not None else model.state_dict()
    return {k: v for k, v in state.items()}


def load_model(checkpoint: str | Path, cfg: RunConfig | None = None) -> tuple[QFSModel, RunConfig]:
    """Rebuild a model from a checkpoint, checking any supplied config against its metadata."""
    tensors, meta = load_checkpoint(checkpoint)
    if "config" not in meta:
        raise CheckpointError(f"{checkpoint}: no embedded configuration")
    stored = RunConfig.from_dict(meta["config"])
    if cfg is not None:
        mine, theirs = cfg.to_dict(), stored.to_dict()
        for section in ("model", "adapter", "hyper", "infini"):
            if mine[section] != theirs[section]:
                diff = sorted(k for k in mine[section] if mine[section][k] != theirs[section].get(k))
                raise ConfigError(f"checkpoint/model-config mismatch in [{section}]: {', '.join(diff)}")
        stored = cfg
    model = build_model(stored)
    try:
        model.load_state_dict(tensors)
    except RuntimeError as exc:
        raise CheckpointError(f"{checkpoint}: tensors do not fit the configured model ({exc})") from exc
    return model.eval(), stored


def evaluate_examples(model: QFSModel, cfg: RunConfig, examples: list[Example], batch_size: int = 16):
    rows = []
    ev = cfg.eval
    rng = Rng(cfg.run.seed)
    for i in range(0, len(examples), batch_size):
        chunk = examples[i: i + batch_size]
        prompts = []
        for ex in chunk:
            doc = ex.document
            if cfg.data.max_doc_bytes is not None:
                doc = doc.encode("utf-8")[: cfg.data.max_doc_bytes].decode("utf-8", errors="ignore")
            prompts.append(build_prompt_with_repeat(ex.query, doc, repeat_query=cfg.run.repeat_query))
        outs = generate_batch(model, prompts, ev.max_new_tokens, ev.greedy, ev.temperature, ev.top_p, rng)
        for ex, out in zip(chunk, outs):
            pred = tokenizer.decode(out)
            s = score_example(pred, ex.summaries)
            rows.append({"id": ex.id, "r1": s["rouge1"], "r2": s["rouge2"], "rl": s["rougeL"],
                         "rlsum": s["rougeLsum"], "exact_match": s["exact_match"], "prediction": pred})
    return rows


def summarize(rows: list[dict]) -> dict:
    keys = ["r1", "r2", "rl", "rlsum", "exact_match"]
    if not rows:
        return {k: 0.0 for k in keys}
    return {k: sum(r[k] for r in rows) / len(rows) for k in keys}


def write_report(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r)
        means = summarize(rows)
        w.writerow({"id": "mean", **means, "prediction": ""})


# -- commands ---------------------------------------------------------------


def train_run(cfg: RunConfig, out: Path) -> dict:
    """Train one configuration into ``out``; returns a summary row."""
    write_snapshot(cfg, out)
    splits = load_splits(cfg)
    model = build_model(cfg)
    eval_fn = None
    if cfg.train.eval_generation:
        def eval_fn(m):
            return summarize(evaluate_examples(m, cfg, splits["val"]))
    t0 = time.time()
    result = train(model, splits["train"], splits["val"], cfg.train, repeat_query=cfg.run.repeat_query,
                   metrics_path=out / "metrics.csv", max_doc_bytes=cfg.data.max_doc_bytes, eval_fn=eval_fn)
    model.load_state_dict(result.best_state)
    meta = {"config": cfg.to_dict(), "best_epoch": result.best_epoch,
            "final_train_loss": result.final_train_loss, "best_val_loss": result.best_val_loss}
    save_checkpoint(out / "model.ckpt", checkpoint_tensors(model), meta)
    summary = {"final_train_loss": result.final_train_loss, "best_val_loss": result.best_val_loss,
               "best_epoch": result.best_epoch, "seconds": round(time.time() - t0, 2),
               "trainable_params": model.num_trainable()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    out = run_dir(cfg, args.out)
    summary = train_run(cfg, out)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, args.set) if args.config else None
    model, cfg = load_model(args.checkpoint, cfg)
    if args.data:
        examples = load_jsonl(args.data)
    else:
        examples = load_splits(cfg)[args.split]
    rows = evaluate_examples(model, cfg, examples)
    out = resolve_out(args.report) if args.report else Path(args.checkpoint).parent / "report.csv"
    write_report(rows, out)
    print(json.dumps(summarize(rows), sort_keys=True))
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.set) if args.config else None
    model, cfg = load_model(args.checkpoint, cfg)
    if args.greedy is not None:
        cfg.eval.greedy = args.greedy
    prompt = build_prompt_with_repeat(args.query, args.document, repeat_query=cfg.run.repeat_query)
    out = generate_batch(model, [prompt], cfg.eval.max_new_tokens, cfg.eval.greedy, cfg.eval.temperature,
                         cfg.eval.top_p, Rng(args.seed))[0]
    print(tokenizer.decode(out))
    return EXIT_OK


def cmd_make_needle(args) -> int:
    cfg = load_config(args.config, args.set)
    out = resolve_out(args.out)
    for name, examples in load_splits(cfg).items():
        write_jsonl(examples, out / f"{name}.jsonl")
    print(str(out))
    return EXIT_OK


def _variant_config(base: dict, variant: dict) -> RunConfig:
    sets = [f"{k}={json.dumps(v) if not isinstance(v, str) else json.dumps(v)}" for k, v in variant.get("set", {}).items()]
    cfg = RunConfig.from_dict(apply_overrides(base, sets))
    cfg.run.name = variant["name"]
    cfg.validate()
    return cfg


ABLATE_FIELDS = ["variant", "status", "adapter", "hyper_mode", "encoders", "split", "hyper_input", "infini",
                 "repeat_query", "segment_len", "trainable_params", "backbone_params", "final_train_loss",
                 "best_val_loss", "exact_match", "r1", "r2", "rl", "rlsum", "seconds", "error"]


def cmd_ablate(args) -> int:
    matrix = read_raw(args.matrix)
    base = read_raw(resolve_matrix_path(args.matrix, matrix["base"])) if "base" in matrix else {}
    base = apply_overrides(base, args.set)
    variants = matrix.get("variant", [])
    if not variants:
        raise ConfigError(f"{args.matrix}: no [[variant]] entries")
    root = resolve_out(args.out or f"ablations/{Path(args.matrix).stem}")
    rows = []
    for variant in variants:
        row = {"variant": variant.get("name", "?")}
        try:
            cfg = _variant_config(base, variant)
            m = cfg.model
            row.update(adapter=cfg.adapter.kind, hyper_mode=cfg.hyper.mode,
                       encoders=cfg.hyper.encoders if cfg.hyper.mode != "off" else "",
                       split=cfg.hyper.split_layer(m.n_layers) if cfg.hyper.mode != "off" else "",
                       hyper_input=cfg.hyper.input if cfg.hyper.mode != "off" else "",
                       infini=cfg.infini.mode, repeat_query=cfg.run.repeat_query,
                       segment_len=cfg.infini.segment_len if cfg.infini.mode != "off" else "",
                       trainable_params=trainable_param_count(m, cfg.adapter, cfg.hyper, cfg.infini),
                       backbone_params=backbone_param_count(m))
            if not args.dry_run:
                out = root / cfg.run.name
                summary = train_run(cfg, out)
                model, _ = load_model(out / "model.ckpt")
                test = load_splits(cfg)["test"] or load_splits(cfg)["val"]
                means = summarize(evaluate_examples(model, cfg, test))
                row.update({k: summary[k] for k in ("final_train_loss", "best_val_loss", "seconds")}, **means)
            row["status"] = "ok"
        except Exception as exc:  # one failing variant must not stop the matrix
            row["status"] = "failed"
            row["error"] = f"{type(exc).__name__}: {exc}"
            log.error("variant %s failed: %s", row["variant"], exc)
        rows.append(row)
    root.mkdir(parents=True, exist_ok=True)
    path = root / "ablation.csv"
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATE_FIELDS)
        w.writeheader()
        w.writerows(rows)
    (root / "matrix_snapshot.json").write_text(json.dumps({"base": base, "variant": variants}, indent=2) + "\n")
    print(str(path))
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_RUNTIME


def resolve_matrix_path(matrix_path: str, base: str) -> Path:
    p = Path(base)
    return p if p.is_absolute() else Path(matrix_path).parent / p


def cmd_dump_params(args) -> int:
    model, cfg = load_model(args.checkpoint)
    if model.hyper is None:
        raise ConfigError("dump-params needs a checkpoint with hyper.mode != 'off'")
    examples = load_jsonl(args.data) if args.data else load_splits(cfg)[args.split]
    if args.limit:
        examples = examples[: args.limit]
    out = resolve_out(args.out) if args.out else Path(args.checkpoint).parent / "generated_params.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w") as fh, torch.no_grad():
        for ex in examples:
            batch = collate([build_prompt_with_repeat(ex.query, ex.document, repeat_query=cfg.run.repeat_query)])
            generated = model(batch).generated
            for layer in sorted(generated):
                for name, tensor in sorted(generated[layer].items()):
                    fh.write(json.dumps({"id": ex.id, "layer": layer, "tensor": name,
                                         "values": tensor[0].reshape(-1).tolist()}) + "\n")
    print(str(out))
    return EXIT_OK


FOOTPRINT_FIELDS = ["doc_multiple", "doc_tokens", "window", "segments", "peak_kv", "peak_cache",
                    "memory_bytes", "memory_bytes_per_layer"]


def footprint_rows(model: QFSModel, multiples=(1, 2, 4, 8), seed: int = 0) -> list[dict]:
    """Memory counters for needle documents that are ``multiples`` of the local window long."""
    cfg = model.infini_cfg
    if cfg.mode == "off":
        raise ConfigError("footprint needs infini.mode = 'inf' or 'qf-inf'")
    window = cfg.plan().window
    rows = []
    with torch.no_grad():
        for mult in multiples:
            ex = gen_needle_task(1, window * mult, 1, seed)[0]
            batch = collate([build_prompt_with_repeat(ex.query, ex.document)])
            out = model.eval()(batch)
            c = out.counters
            rows.append({"doc_multiple": mult, "doc_tokens": window * mult, "window": window,
                         "segments": c.segments, "peak_kv": c.peak_kv, "peak_cache": c.peak_cache,
                         "memory_bytes": c.memory_bytes,
                         "memory_bytes_per_layer": ";".join(str(b) for b in c.per_layer_bytes)})
    return rows


def cmd_footprint(args) -> int:
    if args.checkpoint:
        model, cfg = load_model(args.checkpoint)
        default_out = Path(args.checkpoint).parent / "footprint.csv"
    else:
        cfg = load_config(args.config, args.set)
        model = build_model(cfg)
        default_out = run_dir(cfg) / "footprint.csv"
        write_snapshot(cfg, default_out.parent)
    multiples = [int(x) for x in args.multiples.split(",")]
    rows = footprint_rows(model, multiples)
    out = resolve_out(args.out) if args.out else default_out
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FOOTPRINT_FIELDS)
        w.writeheader()
        w.writerows(rows)
    print(str(out))
    return EXIT_OK


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyperinfini", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=False):
        sp.add_argument("--config", required=required, help="TOML or JSON run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")

    sp = sub.add_parser("train", help="train one configuration")
    with_config(sp, required=True)
    sp.add_argument("--out", help="run directory (default runs/<run.name>)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="generate and score a data split")
    sp.add_argument("--checkpoint", required=True)
    with_config(sp)
    sp.add_argument("--data", help="JSONL file (default: the configured split)")
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("generate", help="answer one query about one document")
    sp.add_argument("--checkpoint", required=True)
    with_config(sp)
    sp.add_argument("--query", required=True)
    sp.add_argument("--document", required=True)
    sp.add_argument("--greedy", action=argparse.BooleanOptionalAction, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("ablate", help="train and evaluate every variant of a matrix file")
    sp.add_argument("--matrix", required=True)
    sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override applied to the base config of every variant")
    sp.add_argument("--out")
    sp.add_argument("--dry-run", action="store_true", help="only report closed-form parameter counts")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("dump-params", help="write generated adapter tensors per example as JSON lines")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.add_argument("--limit", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_dump_params)

    sp = sub.add_parser("footprint", help="memory counters over a document-length sweep")
    sp.add_argument("--checkpoint")
    with_config(sp)
    sp.add_argument("--multiples", default="1,2,4,8")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_footprint)

    sp = sub.add_parser("make-needle", help="write the synthetic needle splits as JSONL")
    with_config(sp)
    sp.add_argument("--out", default="data/needle")
    sp.set_defaults(func=cmd_make_needle)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        if args.command == "footprint" and not (args.checkpoint or args.config):
            raise ConfigError("footprint needs --checkpoint or --config")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, SchemaError, SpanError, MemoryContractError, DivergenceError,
            RuntimeFailure, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
