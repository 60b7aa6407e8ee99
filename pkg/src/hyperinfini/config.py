"""Run configuration: one nested key set, loaded from TOML or JSON, with
dotted ``--set section.key=value`` overrides and cross-field validation.

Sections and keys::

    [model]   n_layers d_model n_heads ffn_mult max_local_window rope_base norm_eps init_std
    [adapter] kind rank scale targets bottleneck activation prompt_len prompt_start
    [hyper]   mode encoders split bottleneck dropout input
    [infini]  mode segment_len window detach_memory beta_init
    [train]   warmup_epochs batch_size lr weight_decay epochs seed schedule clip_norm eval_generation max_new_tokens
    [data]    train val test max_doc_bytes
    [needle]  n_pairs doc_len n_train n_val n_test seed key_len value_len   (used when data.train is empty)
    [eval]    greedy temperature top_p max_new_tokens
    [run]     name seed repeat_query no_repeat_ablation output_dir
"""

from __future__ import annotations

import copy
import dataclasses
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .adapters import AdapterConfig
from .attention import ConfigError
from .hyperexpert import HyperConfig
from .model import ModelConfig
from .system import InfiniConfig
from .train import TrainConfig


@dataclass
class DataConfig:
    train: str = ""
    val: str = ""
    test: str = ""
    max_doc_bytes: int | None = None


@dataclass
class NeedleConfig:
    n_pairs: int = 4
    doc_len: int = 256
    n_train: int = 2000
    n_val: int = 100
    n_test: int = 100
    seed: int = 1
    key_len: int = 2
    value_len: int = 2


@dataclass
class EvalConfig:
    greedy: bool = True
    temperature: float = 0.1
    top_p: float = 0.75
    max_new_tokens: int = 16


@dataclass
class RunSection:
    name: str = "run"
    seed: int = 0
    repeat_query: bool = True
    no_repeat_ablation: bool = False  # permits qf-inf without the appended query
    output_dir: str = ""


SECTIONS = {
    "model": ModelConfig,
    "adapter": AdapterConfig,
    "hyper": HyperConfig,
    "infini": InfiniConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "needle": NeedleConfig,
    "eval": EvalConfig,
    "run": RunSection,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    hyper: HyperConfig = field(default_factory=HyperConfig)
    infini: InfiniConfig = field(default_factory=InfiniConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    needle: NeedleConfig = field(default_factory=NeedleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunSection = field(default_factory=RunSection)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            sec = asdict(getattr(self, name))
            out[name] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sec.items()}
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        errors = []
        kwargs = {}
        for name, raw_sec in raw.items():
            if name not in SECTIONS:
                errors.append(f"unknown section [{name}]")
                continue
            if not isinstance(raw_sec, dict):
                errors.append(f"[{name}] must be a table")
                continue
            known = {f.name: f for f in dataclasses.fields(SECTIONS[name])}
            values = {}
            for key, value in raw_sec.items():
                if key not in known:
                    errors.append(f"{name}.{key}: unknown key")
                    continue
                if key == "targets" and isinstance(value, list):
                    value = tuple(value)
                values[key] = value
            kwargs[name] = values
        if errors:
            raise ConfigError("; ".join(errors))
        cfg = cls()
        for name, values in kwargs.items():
            setattr(cfg, name, dataclasses.replace(getattr(cfg, name), **values))
        return cfg

    def validate(self) -> None:
        """Type and range checks per section, then cross-section consistency."""
        errors = []
        for name, klass in SECTIONS.items():
            sec = getattr(self, name)
            for f in dataclasses.fields(klass):
                problem = _type_problem(getattr(sec, f.name), f.default if f.default is not dataclasses.MISSING else None)
                if problem:
                    errors.append(f"{name}.{f.name}: {problem}")
        if errors:
            raise ConfigError("; ".join(errors))
        m = self.model
        checks = [
            lambda: m.validate(),
            lambda: self.adapter.validate(m.d_model, m.n_layers),
            lambda: self.hyper.validate(m.n_layers, m.d_model),
            lambda: self.infini.validate(),
            lambda: self.train.validate(),
        ]
        for check in checks:
            try:
                check()
            except ConfigError as exc:
                errors.append(str(exc))
        if self.hyper.mode != "off" and self.adapter.kind == "none":
            errors.append("hyper.mode requires adapter.kind to be lora, padapter or prompt")
        if self.hyper.mode != "off" and self.adapter.kind != "none" and not errors:
            if not self.hyper.generated_layers(self.adapter, m.n_layers):
                errors.append("hyper.split leaves no adapted layer to generate")
        if self.infini.mode == "qf-inf" and not self.run.repeat_query and not self.run.no_repeat_ablation:
            errors.append("infini.mode = 'qf-inf' requires run.repeat_query = true "
                          "(set run.no_repeat_ablation = true for the ablation)")
        if not self.data.train:
            nd = self.needle
            if min(nd.n_pairs, nd.n_train, nd.doc_len, nd.key_len, nd.value_len) < 1:
                errors.append("needle.* sizes must be >= 1")
        ev = self.eval
        if not 0 < ev.top_p <= 1 or ev.temperature <= 0 or ev.max_new_tokens < 1:
            errors.append("eval: need 0 < top_p <= 1, temperature > 0, max_new_tokens >= 1")
        if errors:
            raise ConfigError("; ".join(errors))


def _type_problem(value, default) -> str | None:
    if default is None:
        return None
    if isinstance(default, bool):
        return None if isinstance(value, bool) else f"expected a boolean, got {value!r}"
    if isinstance(default, int):
        return None if isinstance(value, int) and not isinstance(value, bool) else f"expected an integer, got {value!r}"
    if isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        return None if ok else f"expected a number, got {value!r}"
    if isinstance(default, str):
        return None if isinstance(value, str) else f"expected a string, got {value!r}"
    return None


def parse_value(text: str):
    """A TOML literal when it parses as one, else the raw string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        path, value = item.split("=", 1)
        parts = path.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"--set key must look like section.key, got {path!r}")
        raw.setdefault(parts[0], {})[parts[1]] = parse_value(value.strip())
    return raw


def read_raw(path: str | Path) -> dict:
    path = Path(path)
    try:
        if path.suffix == ".json":
            return json.loads(path.read_text())
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def load_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    raw = read_raw(path) if path else {}
    cfg = RunConfig.from_dict(apply_overrides(raw, list(overrides)))
    cfg.validate()
    return cfg
