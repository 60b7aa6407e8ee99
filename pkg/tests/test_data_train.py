import json
import math
import random

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import toy_system
from hyperinfini import tokenizer
from hyperinfini.data import Example, SchemaError, gen_needle_task, load_jsonl, split_examples, write_jsonl
from hyperinfini.prompting import DEFAULT_TEMPLATE, build_prompt_with_repeat, collate
from hyperinfini.train import DivergenceError, TrainConfig, lr_at, masked_loss, train


class TestPrompt:
    def test_layout_has_two_query_copies(self):
        toks, spans = build_prompt_with_repeat("Q", "D")
        text = tokenizer.decode(toks)
        assert text == "### Query:\nQ\n\n### Document:\nD\n\n### Query:\nQ\n\n### Summary:\n"
        assert toks[0] == tokenizer.BOS
        assert spans.query[0] < spans.document[0] < spans.query_repeat[0] < spans.target_start == len(toks)

    def test_without_repeat_has_one_copy(self):
        toks, spans = build_prompt_with_repeat("Q", "D", repeat_query=False)
        assert tokenizer.decode(toks).count("### Query:") == 1
        assert spans.query_repeat is None

    def test_empty_query_rejected(self):
        with pytest.raises(ValueError):
            build_prompt_with_repeat("", "D")

    def test_span_arithmetic(self):
        r = random.Random(0)
        t = DEFAULT_TEMPLATE
        for _ in range(50):
            q = "".join(r.choice("abc xyzé") for _ in range(r.randint(1, 12)))
            d = "".join(r.choice("def uvw\n") for _ in range(r.randint(0, 40)))
            toks, spans = build_prompt_with_repeat(q, d)
            n = lambda s: len(s.encode("utf-8"))  # noqa: E731
            prepend = 1 + n(t.query_header) + n(q) + n(t.document_header)
            assert spans.document == (prepend, prepend + n(d))
            repeat_start = prepend + n(d) + n(t.repeat_header)
            assert spans.query_repeat == (repeat_start, repeat_start + n(q))
            assert toks[spans.query[0]:spans.query[1]] == toks[spans.query_repeat[0]:spans.query_repeat[1]]

    def test_collate_masks(self):
        a = build_prompt_with_repeat("ab", "cdefgh")
        b = build_prompt_with_repeat("abcd", "")
        batch = collate([a, b], [[49, 50], [51]])
        assert batch.tokens.shape == (2, max(len(a[0]) + 2, len(b[0]) + 1))
        assert batch.query_mask[0].sum() == 2 and batch.query_mask[1].sum() == 4
        # positions whose next token is an answer token
        assert batch.target_mask[0].nonzero().flatten().tolist() == [len(a[0]) - 1, len(a[0])]
        assert batch.targets[0, len(a[0]) - 1].item() == 49
        assert batch.tokens[1, -1].item() == tokenizer.PAD and batch.targets[1, -2].item() == tokenizer.PAD


class TestJsonl:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text("")
        assert load_jsonl(p) == []

    def test_missing_summaries_names_key(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text(json.dumps({"query": "q", "document": "d"}) + "\n")
        with pytest.raises(SchemaError, match="summaries"):
            load_jsonl(p)

    def test_malformed_line_number(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text(json.dumps({"query": "q", "document": "d", "summaries": ["s"]}) + "\n{oops\n")
        with pytest.raises(SchemaError, match=":2:"):
            load_jsonl(p)

    def test_round_trip(self, tmp_path):
        r = random.Random(1)
        alphabet = "abc XYZ\n\"\\é中🙂{}"
        rand = lambda k: "".join(r.choice(alphabet) for _ in range(r.randint(0, k)))  # noqa: E731
        exs = [Example(rand(10) or "q", rand(50), [rand(8) for _ in range(r.randint(1, 3))], id=f"x{i}")
               for i in range(50)]
        p = tmp_path / "rt.jsonl"
        write_jsonl(exs, p)
        back = load_jsonl(p)
        assert [(e.query, e.document, e.summaries, e.id) for e in back] == \
               [(e.query, e.document, e.summaries, e.id) for e in exs]

    def test_empty_summaries_rejected(self, tmp_path):
        p = tmp_path / "s.jsonl"
        p.write_text(json.dumps({"query": "q", "document": "d", "summaries": []}) + "\n")
        with pytest.raises(SchemaError):
            load_jsonl(p)


class TestNeedle:
    def test_single_pair(self):
        for ex in gen_needle_task(1, 40, 20, 0):
            key = ex.query.split()[-1]
            assert f"{key}={ex.summaries[0]}." in ex.document

    def test_answer_in_document(self):
        for ex in gen_needle_task(4, 120, 1000, 3):
            assert len(ex.document) == 120
            key = ex.query.split()[-1]
            assert ex.summaries[0] in ex.document
            assert ex.document.count(f" {key}=") == 1

    def test_deterministic(self):
        a = gen_needle_task(3, 80, 20, 5)
        b = gen_needle_task(3, 80, 20, 5)
        assert [(e.query, e.document, e.summaries) for e in a] == [(e.query, e.document, e.summaries) for e in b]

    def test_too_short_document(self):
        with pytest.raises(ValueError):
            gen_needle_task(4, 10, 1, 0)

    def test_split_fractions(self):
        tr, va, te = split_examples(list(range(100)))
        assert (len(tr), len(va), len(te)) == (80, 10, 10)


class TestMaskedLoss:
    def test_uniform_logits(self):
        v = 7
        logits = torch.zeros(2, 5, v, dtype=torch.float64)
        targets = torch.randint(0, v, (2, 5))
        mask = torch.ones(2, 5, dtype=torch.bool)
        assert masked_loss(logits, targets, mask).item() == pytest.approx(math.log(v), abs=1e-12)

    def test_confident_correct_logits(self):
        targets = torch.tensor([[1, 2, 0]])
        logits = torch.nn.functional.one_hot(targets, 4).double() * 100
        assert masked_loss(logits, targets, torch.ones(1, 3, dtype=torch.bool)).item() < 1e-30

    def test_against_loop(self):
        gen = torch.Generator().manual_seed(0)
        logits = torch.randn(3, 6, 5, generator=gen, dtype=torch.float64)
        targets = torch.randint(0, 5, (3, 6), generator=gen)
        mask = torch.rand(3, 6, generator=gen) < 0.5
        total, n = 0.0, 0
        for b in range(3):
            for t in range(6):
                if mask[b, t]:
                    row = logits[b, t].tolist()
                    top = max(row)
                    lse = top + math.log(sum(math.exp(x - top) for x in row))
                    total += lse - row[targets[b, t]]
                    n += 1
        assert masked_loss(logits, targets, mask).item() == pytest.approx(total / n, abs=1e-12)

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            masked_loss(torch.zeros(1, 2, 3), torch.zeros(1, 2, dtype=torch.long), torch.zeros(1, 2, dtype=torch.bool))


class TestSchedule:
    def test_closed_form(self):
        base, warm, total = 0.006, 10, 50

        def oracle(step):
            if step < warm:
                return base * (step + 1) / warm
            return base * 0.5 * (1 + math.cos(math.pi * (step - warm) / (total - warm)))

        for step in (0, warm - 1, warm, 30, total - 1, total):
            assert lr_at(step, base, warm, total) == pytest.approx(oracle(step), abs=1e-12)
        assert lr_at(warm, base, warm, total) == pytest.approx(base, abs=1e-12)
        assert lr_at(total, base, warm, total) == pytest.approx(0.0, abs=1e-12)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.warmup_epochs, cfg.batch_size, cfg.lr, cfg.weight_decay) == (1, 32, 0.006, 0.02)


def tiny_data(n=8, seed=0):
    return gen_needle_task(1, 24, n, seed)


class TestTrain:
    def test_zero_lr_leaves_params_unchanged(self):
        model = toy_system(adapter="lora", hyper="parallel", double=False)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        train(model, tiny_data(), [], TrainConfig(lr=0.0, epochs=1, batch_size=4))
        for k, v in model.state_dict().items():
            assert (v - before[k]).abs().max().item() == 0.0

    def test_backbone_frozen(self):
        model = toy_system(adapter="lora", hyper="parallel", double=False)
        before = {k: v.clone() for k, v in model.backbone.state_dict().items()}
        train(model, tiny_data(), tiny_data(4, 1), TrainConfig(lr=0.01, epochs=2, batch_size=4))
        for k, v in model.backbone.state_dict().items():
            assert torch.equal(v, before[k])
        assert any(not torch.equal(p, torch.zeros_like(p))
                   for n, p in model.adapters.params.items() if n.endswith("_B"))

    def test_deterministic_final_loss(self):
        losses = []
        for _ in range(2):
            model = toy_system(adapter="lora", hyper="parallel", double=False)
            res = train(model, tiny_data(), tiny_data(4, 1), TrainConfig(lr=0.01, epochs=2, batch_size=4))
            losses.append(res.final_train_loss)
        assert losses[0] == losses[1]

    def test_metrics_csv_and_best_epoch(self, tmp_path):
        model = toy_system(adapter="lora", double=False)
        path = tmp_path / "m.csv"
        res = train(model, tiny_data(), tiny_data(4, 1), TrainConfig(lr=0.01, epochs=2, batch_size=4),
                    metrics_path=path)
        rows = path.read_text().splitlines()
        assert rows[0].startswith("epoch,split,loss")
        assert len(rows) == 1 + 4
        assert 0 <= res.best_epoch < 2

    def test_divergence_is_reported(self):
        model = toy_system(adapter="lora", double=False)
        with torch.no_grad():
            next(iter(model.adapters.params.values())).fill_(float("nan"))
            for n, p in model.adapters.params.items():
                if n.endswith("_B"):
                    p.fill_(1.0)
        with pytest.raises(DivergenceError):
            train(model, tiny_data(), [], TrainConfig(epochs=1, batch_size=4))

    def test_nothing_to_train(self):
        from hyperinfini.attention import ConfigError
        with pytest.raises(ConfigError):
            train(toy_system(adapter="none", double=False), tiny_data(), [], TrainConfig(epochs=1))

    def test_loss_decreases_over_first_epochs(self):
        finals = []
        for seed in range(3):
            model = toy_system(adapter="lora", hyper="parallel", d=32, heads=2, double=False, seed=seed)
            res = train(model, gen_needle_task(1, 24, 32, seed), [], TrainConfig(epochs=3, batch_size=8, seed=seed))
            losses = [r["loss"] for r in res.history if r["split"] == "train"]
            finals.append(losses[0] > losses[1] > losses[2])
        assert sorted(finals)[1]
