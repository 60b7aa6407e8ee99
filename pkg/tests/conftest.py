import pytest
import torch

from hyperinfini.adapters import AdapterConfig
from hyperinfini.hyperexpert import HyperConfig
from hyperinfini.model import ModelConfig
from hyperinfini.prompting import build_prompt_with_repeat, collate
from hyperinfini.system import InfiniConfig, QFSModel

torch.set_num_threads(1)

_WORDS = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"]


def random_text(gen: torch.Generator, n_words: int) -> str:
    idx = torch.randint(0, len(_WORDS), (n_words,), generator=gen).tolist()
    return " ".join(_WORDS[i] for i in idx)


def random_batch(seed: int, n: int = 2, doc_words: int = 4, answer: bool = True, repeat_query: bool = True):
    """A small collated batch of random query/document prompts with short answers."""
    gen = torch.Generator().manual_seed(seed)
    items, answers = [], []
    for _ in range(n):
        q = random_text(gen, 2)
        d = random_text(gen, doc_words)
        items.append(build_prompt_with_repeat(q, d, repeat_query=repeat_query))
        answers.append(list(random_text(gen, 1).encode()))
    return collate(items, answers if answer else None)


def toy_system(adapter="lora", hyper="off", infini="off", layers=2, d=16, heads=2, seed=0,
               segment_len=8, double=True, **kw):
    """A tiny fully-configured model; ``kw`` keys are routed by prefix (a_, h_, i_)."""
    a_kw = {k[2:]: v for k, v in kw.items() if k.startswith("a_")}
    h_kw = {k[2:]: v for k, v in kw.items() if k.startswith("h_")}
    i_kw = {k[2:]: v for k, v in kw.items() if k.startswith("i_")}
    if adapter == "prompt":
        a_kw.setdefault("prompt_start", 0)
        a_kw.setdefault("prompt_len", 3)
    if adapter == "lora":
        a_kw.setdefault("rank", 4)
    h_kw.setdefault("bottleneck", 8)
    model = QFSModel(
        ModelConfig(n_layers=layers, d_model=d, n_heads=heads),
        AdapterConfig(kind=adapter, **a_kw),
        HyperConfig(mode=hyper, **h_kw),
        InfiniConfig(mode=infini, segment_len=segment_len, **i_kw),
        seed=seed,
    )
    return model.double() if double else model


def randomize_(params, seed: int, std: float = 0.3):
    """Overwrite trainable tensors with random values so gradients are non-trivial."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in params:
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


@pytest.fixture
def batch():
    return random_batch(0)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
