"""Experiment configuration: one JSON file drives every pipeline stage.

Unknown keys are rejected, every seed is explicit in the resolved form, and
the canonical JSON digest stamps artifacts so stale inputs are detected.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path

from .bm25 import Bm25Params
from .retriever import EncoderConfig, RetrieverTrainConfig
from .reranker import RerankerTrainConfig
from .scoring import (
    DEFAULT_DEMO_FORMAT,
    DEFAULT_INPUT_FORMAT,
    DEFAULT_TASK,
    MockScorerWeights,
    PromptTemplate,
)
from .synth import SynthParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"  # "synthetic" or "files"
    topics: int = 20
    vocab: int = 500
    train_queries: int = 200
    test_queries: int = 50
    passages_per_query: int = 20
    tokens_per_text: int = 16
    # used when source == "files"; paths are relative to the config file
    train_queries_path: str = ""
    train_passages_path: str = ""
    train_qrels_path: str = ""
    test_queries_path: str = ""
    test_passages_path: str = ""
    test_qrels_path: str = ""

    def __post_init__(self) -> None:
        if self.source not in ("synthetic", "files"):
            raise ConfigError(f"data.source must be synthetic or files, got {self.source!r}")
        if self.source == "files":
            for name in ("train_queries_path", "train_passages_path", "train_qrels_path",
                         "test_queries_path", "test_passages_path", "test_qrels_path"):
                if not getattr(self, name):
                    raise ConfigError(f"data.{name} is required when source is files")

    def synth_params(self) -> SynthParams:
        try:
            return SynthParams(self.topics, self.vocab, self.train_queries,
                               self.test_queries, self.passages_per_query,
                               self.tokens_per_text)
        except ValueError as exc:
            raise ConfigError(f"bad synthetic data params: {exc}") from exc


@dataclass(frozen=True)
class TemplateSection:
    task_description: str = DEFAULT_TASK
    demo_format: str = DEFAULT_DEMO_FORMAT
    input_format: str = DEFAULT_INPUT_FORMAT
    separator: str = "\n\n"

    def build(self) -> PromptTemplate:
        try:
            return PromptTemplate(self.task_description, self.demo_format,
                                  self.input_format, self.separator)
        except ValueError as exc:
            raise ConfigError(f"bad prompt template: {exc}") from exc


@dataclass(frozen=True)
class ScorerSection:
    backend: str = "mock"  # "mock" or "http"
    endpoint: str = ""
    timeout_sec: float = 10.0
    max_retries: int = 3
    max_in_flight: int = 8
    mock_rel: float = 2.0
    mock_div: float = 1.0
    mock_bal: float = 1.0
    mock_raw_scale: float = 2.0
    mock_offset: float = -1.0
    mock_relevance: float = 3.0
    mock_relevance_threshold: float = 0.2

    def __post_init__(self) -> None:
        if self.backend not in ("mock", "http"):
            raise ConfigError(f"scorer.backend must be mock or http, got {self.backend!r}")
        if self.max_retries < 1 or self.max_in_flight < 1 or self.timeout_sec <= 0:
            raise ConfigError("bad scorer limits")

    def mock_weights(self) -> MockScorerWeights:
        return MockScorerWeights(self.mock_rel, self.mock_div, self.mock_bal,
                                 self.mock_raw_scale, self.mock_offset,
                                 self.mock_relevance)


@dataclass(frozen=True)
class Bm25Section:
    k1: float = 0.9
    b: float = 0.4

    def params(self) -> Bm25Params:
        try:
            return Bm25Params(self.k1, self.b)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class EncoderSection:
    vocab_buckets: int = 4096
    dim: int = 64
    hidden: int = 64

    def config(self) -> EncoderConfig:
        try:
            return EncoderConfig(self.vocab_buckets, self.dim)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class RetrieverSection:
    candidates_b: int = 25  # BM25 half; total candidates = 2b
    learning_rate: float = 0.05
    epochs: int = 2
    lam: float = 0.2
    in_batch_negatives: bool = False

    def __post_init__(self) -> None:
        if self.candidates_b < 1:
            raise ConfigError("retriever.candidates_b must be at least 1")
        if self.in_batch_negatives:
            raise ConfigError(
                "retriever.in_batch_negatives is reserved; the explicit-negatives "
                "objective is the only implemented variant")

    @property
    def candidates_n(self) -> int:
        return 2 * self.candidates_b

    def train_config(self, seed: int) -> RetrieverTrainConfig:
        try:
            return RetrieverTrainConfig(self.learning_rate, self.epochs, self.lam, seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class RerankerSection:
    retrieve_m: int = 50
    iterations: int = 3
    trajectories: int = 1
    max_pairs_per_sample: int | None = None
    learning_rate: float = 0.001
    epochs: int = 2

    def train_config(self, seed: int) -> RerankerTrainConfig:
        try:
            return RerankerTrainConfig(self.retrieve_m, self.iterations,
                                       self.trajectories, self.max_pairs_per_sample,
                                       self.learning_rate, self.epochs, seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class SelectionSection:
    shots: int = 3
    retrieve_d: int = 30
    per_query: bool = False
    policies: tuple[str, ...] = ("zero-shot", "random", "bm25-demos",
                                 "retriever-topk", "demorank")

    def __post_init__(self) -> None:
        if self.shots < 0 or self.retrieve_d < 1:
            raise ConfigError("bad selection sizes")


@dataclass(frozen=True)
class SeedsSection:
    data: int = 11
    pool: int = 13
    training_inputs: int = 17
    mining: int = 19
    retriever_init: int = 23
    retriever_train: int = 29
    sampling: int = 31
    reranker_init: int = 37
    reranker_train: int = 41
    policy: int = 43


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    template: TemplateSection = field(default_factory=TemplateSection)
    scorer: ScorerSection = field(default_factory=ScorerSection)
    bm25: Bm25Section = field(default_factory=Bm25Section)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    retriever: RetrieverSection = field(default_factory=RetrieverSection)
    reranker: RerankerSection = field(default_factory=RerankerSection)
    selection: SelectionSection = field(default_factory=SelectionSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)

    def __post_init__(self) -> None:
        if self.reranker.iterations > self.reranker.retrieve_m:
            raise ConfigError("reranker.iterations must not exceed reranker.retrieve_m")
        if self.selection.shots > self.selection.retrieve_d:
            raise ConfigError("selection.shots must not exceed selection.retrieve_d")
        if self.scorer.backend == "http" and not self.scorer.endpoint:
            # may still be satisfied by the environment override at run time
            pass

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return sha256(canonical.encode("utf-8")).hexdigest()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _build_section(cls, obj: dict, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in obj:
            continue
        val = obj[f.name]
        hint = hints[f.name]
        if hint is float and isinstance(val, int):
            val = float(val)
        if hint == tuple[str, ...] and isinstance(val, list):
            val = tuple(val)
        kwargs[f.name] = val
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in {where}: {exc}") from exc


_SECTIONS = {
    "data": DataSection,
    "template": TemplateSection,
    "scorer": ScorerSection,
    "bm25": Bm25Section,
    "encoder": EncoderSection,
    "retriever": RetrieverSection,
    "reranker": RerankerSection,
    "selection": SelectionSection,
    "seeds": SeedsSection,
}


def config_from_dict(obj: dict) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config root must be an object")
    unknown = set(obj) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {
        name: _build_section(cls, obj[name], name)
        for name, cls in _SECTIONS.items() if name in obj
    }
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(obj)
