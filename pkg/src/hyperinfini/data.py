"""Example records, JSONL ingestion and the synthetic key-value needle task."""

from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .numeric import Rng

REQUIRED_KEYS = ("query", "document", "summaries")


class SchemaError(ValueError):
    pass


@dataclass
class Example:
    query: str
    document: str
    summaries: list[str]
    id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.summaries:
            raise SchemaError("an example needs at least one reference summary")


def _parse_line(line: str, lineno: int, path) -> Example:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise SchemaError(f"{path}:{lineno}: expected a JSON object")
    for key in REQUIRED_KEYS:
        if key not in obj:
            raise SchemaError(f"{path}:{lineno}: missing required key {key!r}")
    summaries = obj["summaries"]
    if isinstance(summaries, str):
        summaries = [summaries]
    if not isinstance(summaries, list) or not summaries or not all(isinstance(s, str) for s in summaries):
        raise SchemaError(f"{path}:{lineno}: 'summaries' must be a non-empty list of strings")
    if not isinstance(obj["query"], str) or not isinstance(obj["document"], str):
        raise SchemaError(f"{path}:{lineno}: 'query' and 'document' must be strings")
    return Example(
        query=obj["query"],
        document=obj["document"],
        summaries=list(summaries),
        id=str(obj.get("id", lineno)),
        meta=obj.get("meta", {}),
    )


def load_jsonl(path: str | Path) -> list[Example]:
    path = Path(path)
    examples = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                examples.append(_parse_line(line, lineno, path))
    return examples


def write_jsonl(examples: list[Example], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for ex in examples:
            obj = asdict(ex)
            if not obj["meta"]:
                del obj["meta"]
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


# -- synthetic needle task ----------------------------------------------------

FILLER_ALPHABET = string.ascii_lowercase + "     "
KEY_ALPHABET = string.ascii_uppercase
VALUE_ALPHABET = string.digits


def _record(key: str, value: str) -> str:
    return f" {key}={value}. "


def gen_needle_task(n_pairs: int, doc_len: int, n_examples: int, rng: Rng | int,
                    key_len: int = 2, value_len: int = 2) -> list[Example]:
    """Documents of filler text with ``n_pairs`` embedded "KEY=VALUE" records.

    The query names one key and the only reference summary is its value.
    Records land at random offsets, so with ``doc_len`` several times the
    local attention window most needles end up in compressed memory.
    """
    rng = rng if isinstance(rng, Rng) else Rng(rng)
    r = rng.py
    rec_len = len(_record("K" * key_len, "0" * value_len))
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if doc_len < n_pairs * rec_len:
        raise ValueError(f"doc_len {doc_len} cannot hold {n_pairs} records of {rec_len} characters")
    examples = []
    for i in range(n_examples):
        keys: list[str] = []
        used_letters: set[frozenset] = set()
        while len(keys) < n_pairs:
            k = "".join(r.choice(KEY_ALPHABET) for _ in range(key_len))
            # keys must differ as letter multisets so order-free pooling can tell them apart
            sig = frozenset((c, k.count(c)) for c in k)
            if sig not in used_letters:
                used_letters.add(sig)
                keys.append(k)
        values = ["".join(r.choice(VALUE_ALPHABET) for _ in range(value_len)) for _ in keys]
        filler_len = doc_len - n_pairs * rec_len
        # choose insertion offsets inside the filler
        cuts = sorted(r.randint(0, filler_len) for _ in keys)
        filler = "".join(r.choice(FILLER_ALPHABET) for _ in range(filler_len))
        parts, prev = [], 0
        for cut, k, v in zip(cuts, keys, values):
            parts.append(filler[prev:cut])
            parts.append(_record(k, v))
            prev = cut
        parts.append(filler[prev:])
        doc = "".join(parts)
        target = r.randrange(n_pairs)
        examples.append(Example(
            query=f"value of {keys[target]}",
            document=doc,
            summaries=[values[target]],
            id=f"needle-{i}",
        ))
    return examples


def split_examples(examples: list[Example], fractions=(0.8, 0.1, 0.1)) -> tuple[list, list, list]:
    n = len(examples)
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    return examples[:a], examples[a:b], examples[b:]
