"""Corpus types: queries, passages, judgments, demonstration pools, training inputs.

File formats:
  queries.jsonl / passages.jsonl   one {"id": ..., "text": ...} object per line
  qrels.tsv                        query_id <TAB> 0 <TAB> passage_id <TAB> grade
  pool.jsonl                       one demonstration per line (explicit fields)
  training_inputs.jsonl            one training input per line
"""

from __future__ import annotations

import enum
import json
import random
from dataclasses import dataclass, field
from pathlib import Path


class Label(str, enum.Enum):
    YES = "Yes"
    NO = "No"

    def __str__(self) -> str:
        return self.value


LABEL_SPACE = (Label.YES.value, Label.NO.value)


class CorpusError(ValueError):
    pass


class EmptyPoolError(CorpusError):
    pass


@dataclass(frozen=True)
class Query:
    id: str
    text: str


@dataclass(frozen=True)
class Passage:
    id: str
    text: str


@dataclass(frozen=True)
class RelJudgment:
    query_id: str
    passage_id: str
    grade: int  # 0 = judged irrelevant, >0 = relevant


@dataclass(frozen=True)
class Demonstration:
    """A judged query-passage pair with its relevance verdict as the label."""

    query: Query
    passage: Passage
    label: Label

    @property
    def ref(self) -> tuple[str, str, str]:
        return (self.query.id, self.passage.id, self.label.value)


@dataclass(frozen=True)
class TrainingInput:
    """A query-passage pair whose gold label the scorer is asked to recover."""

    query: Query
    passage: Passage
    gold: Label

    @property
    def input_id(self) -> str:
        return f"{self.query.id}::{self.passage.id}::{self.gold.value}"


@dataclass
class Dataset:
    queries: list[Query]
    passages: list[Passage]
    judgments: list[RelJudgment]
    split: str

    def __post_init__(self) -> None:
        qids = [q.id for q in self.queries]
        pids = [p.id for p in self.passages]
        if len(set(qids)) != len(qids):
            raise CorpusError(f"duplicate query ids in {self.split} split")
        if len(set(pids)) != len(pids):
            raise CorpusError(f"duplicate passage ids in {self.split} split")
        qid_set, pid_set = set(qids), set(pids)
        for j in self.judgments:
            if j.query_id not in qid_set:
                raise CorpusError(f"judgment references unknown query {j.query_id!r}")
            if j.passage_id not in pid_set:
                raise CorpusError(f"judgment references unknown passage {j.passage_id!r}")
            if j.grade < 0:
                raise CorpusError(f"negative grade for ({j.query_id}, {j.passage_id})")

    def queries_by_id(self) -> dict[str, Query]:
        return {q.id: q for q in self.queries}

    def passages_by_id(self) -> dict[str, Passage]:
        return {p.id: p for p in self.passages}

    def judgments_by_query(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for j in self.judgments:
            out.setdefault(j.query_id, {})[j.passage_id] = j.grade
        return out


@dataclass
class DemonstrationPool:
    demos: list[Demonstration]
    per_query_counts: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.demos)

    def __iter__(self):
        return iter(self.demos)

    def __getitem__(self, i: int) -> Demonstration:
        return self.demos[i]

    def by_ref(self) -> dict[tuple[str, str, str], Demonstration]:
        return {d.ref: d for d in self.demos}

    def validate_balance(self) -> None:
        for qid, (yes, no) in self.per_query_counts.items():
            if yes != no:
                raise CorpusError(f"unbalanced pool for query {qid!r}: {yes} Yes vs {no} No")


@dataclass
class TrainingInputReport:
    total_queries: int
    built_queries: int
    skipped: dict[str, str] = field(default_factory=dict)  # query_id -> reason


def _split_judged(judged: dict[str, int]) -> tuple[list[str], list[str]]:
    rel = sorted(pid for pid, g in judged.items() if g > 0)
    irr = sorted(pid for pid, g in judged.items() if g == 0)
    return rel, irr


def build_pool(dataset: Dataset, rng_seed: int) -> DemonstrationPool:
    """Turn a training split into a balanced demonstration pool.

    Per query, every relevant passage yields a Yes demonstration and an equal
    number of No demonstrations comes from judged-irrelevant passages, falling
    back to a seeded draw from unjudged corpus passages.  Queries without a
    relevant passage contribute nothing.  Whichever side is scarcer caps both.
    """
    rng = random.Random(rng_seed)
    judged_by_q = dataset.judgments_by_query()
    queries = dataset.queries_by_id()
    passages = dataset.passages_by_id()
    all_pids = sorted(passages)

    demos: list[Demonstration] = []
    counts: dict[str, tuple[int, int]] = {}
    for qid in sorted(queries):
        rel, irr = _split_judged(judged_by_q.get(qid, {}))
        if not rel:
            continue
        if irr:
            neg_source = irr
        else:
            rel_set = set(rel)
            neg_source = [pid for pid in all_pids if pid not in rel_set]
        n = min(len(rel), len(neg_source))
        if n == 0:
            continue
        pos_pids = rel[:n]
        if irr:
            neg_pids = irr[:n]
        else:
            neg_pids = sorted(rng.sample(neg_source, n))
        q = queries[qid]
        for pid in pos_pids:
            demos.append(Demonstration(q, passages[pid], Label.YES))
        for pid in neg_pids:
            demos.append(Demonstration(q, passages[pid], Label.NO))
        counts[qid] = (n, n)

    if not demos:
        raise EmptyPoolError("no query in the dataset has a usable relevant passage")
    demos.sort(key=lambda d: (d.query.id, d.passage.id, d.label.value))
    return DemonstrationPool(demos, counts)


def build_training_inputs(
    dataset: Dataset, rng_seed: int
) -> tuple[list[TrainingInput], TrainingInputReport]:
    """Draw one relevant and one irrelevant passage per training query.

    The relevant pick becomes a Yes input and the irrelevant one a No input.
    Queries lacking either side are skipped and recorded in the report.
    """
    if dataset.split != "train":
        raise CorpusError(f"training inputs require the train split, got {dataset.split!r}")
    rng = random.Random(rng_seed)
    judged_by_q = dataset.judgments_by_query()
    queries = dataset.queries_by_id()
    passages = dataset.passages_by_id()
    all_pids = sorted(passages)

    inputs: list[TrainingInput] = []
    report = TrainingInputReport(total_queries=len(queries), built_queries=0)
    for qid in sorted(queries):
        rel, irr = _split_judged(judged_by_q.get(qid, {}))
        if not rel:
            report.skipped[qid] = "no relevant passage"
            continue
        if not irr:
            rel_set = set(rel)
            irr = [pid for pid in all_pids if pid not in rel_set]
            if not irr:
                report.skipped[qid] = "no irrelevant passage"
                continue
        q = queries[qid]
        pos = rng.choice(rel)
        neg = rng.choice(irr)
        inputs.append(TrainingInput(q, passages[pos], Label.YES))
        inputs.append(TrainingInput(q, passages[neg], Label.NO))
        report.built_queries += 1
    return inputs, report


# ---------------------------------------------------------------------------
# File IO


def _load_jsonl_texts(path: Path) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append((str(obj["id"]), str(obj["text"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed record: {exc}") from exc
    return out


def load_queries(path: str | Path) -> list[Query]:
    return [Query(i, t) for i, t in _load_jsonl_texts(Path(path))]


def load_passages(path: str | Path) -> list[Passage]:
    return [Passage(i, t) for i, t in _load_jsonl_texts(Path(path))]


def load_qrels(path: str | Path) -> list[RelJudgment]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise CorpusError(f"{path}:{lineno}: expected 4 tab-separated fields")
            qid, _, pid, grade = parts
            try:
                out.append(RelJudgment(qid, pid, int(grade)))
            except ValueError as exc:
                raise CorpusError(f"{path}:{lineno}: bad grade {grade!r}") from exc
    return out


def write_jsonl_texts(path: str | Path, items) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps({"id": item.id, "text": item.text}) + "\n")


def write_qrels(path: str | Path, judgments: list[RelJudgment]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for j in judgments:
            fh.write(f"{j.query_id}\t0\t{j.passage_id}\t{j.grade}\n")


def load_dataset(queries_path, passages_path, qrels_path, split: str) -> Dataset:
    return Dataset(
        queries=load_queries(queries_path),
        passages=load_passages(passages_path),
        judgments=load_qrels(qrels_path),
        split=split,
    )


def write_pool(path: str | Path, pool: DemonstrationPool) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in pool:
            fh.write(
                json.dumps(
                    {
                        "query_id": d.query.id,
                        "query_text": d.query.text,
                        "passage_id": d.passage.id,
                        "passage_text": d.passage.text,
                        "label": d.label.value,
                    }
                )
                + "\n"
            )


def load_pool(path: str | Path) -> DemonstrationPool:
    demos = []
    counts: dict[str, list[int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                label = Label(obj["label"])
                demos.append(
                    Demonstration(
                        Query(obj["query_id"], obj["query_text"]),
                        Passage(obj["passage_id"], obj["passage_text"]),
                        label,
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed pool record: {exc}") from exc
            c = counts.setdefault(obj["query_id"], [0, 0])
            c[0 if label is Label.YES else 1] += 1
    return DemonstrationPool(demos, {q: (c[0], c[1]) for q, c in counts.items()})


def write_training_inputs(path: str | Path, inputs: list[TrainingInput]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in inputs:
            fh.write(
                json.dumps(
                    {
                        "query_id": t.query.id,
                        "query_text": t.query.text,
                        "passage_id": t.passage.id,
                        "passage_text": t.passage.text,
                        "gold": t.gold.value,
                    }
                )
                + "\n"
            )


def load_training_inputs(path: str | Path) -> list[TrainingInput]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(
                    TrainingInput(
                        Query(obj["query_id"], obj["query_text"]),
                        Passage(obj["passage_id"], obj["passage_text"]),
                        Label(obj["gold"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed input record: {exc}") from exc
    return out
