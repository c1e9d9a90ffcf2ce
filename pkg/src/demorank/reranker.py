"""Demonstration reranker aware of previously selected demonstrations.

A cross-encoder scores (input, demo list) pairs: it embeds the input, the mean
of the list's prefix (all but the last demo), and the last demo with its own
hashed table, then feeds [e_input; e_prefix; e_last; e_input * e_last] through
a one-hidden-layer tanh MLP.

Training data comes from an iterative construction: starting from the
retriever's top-M candidates, each round scores every unselected candidate as
a continuation of the current prefix, records the full ranking, then moves one
candidate into the prefix, sampled with probability proportional to
exp(-rank).  The recorded rankings train the model with a RankNet loss over
lists sharing a prefix.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .data import Demonstration, DemonstrationPool, TrainingInput
from .retriever import (
    EncoderConfig,
    demo_text,
    encode_feats,
    input_text,
    snap_f32,
    stable_sigmoid,
    text_features,
)
from .scoring import PromptTemplate, ScorerBackend, score_list

logger = logging.getLogger(__name__)

# Initialization scales for CrossEncoder.init.  NOMINAL_TOKENS_PER_TEXT is the
# token count the block scales are normalized against; texts of a different
# length just shift every pre-activation by a common factor.
EMBED_INIT_SCALE = 1.0
NOMINAL_TOKENS_PER_TEXT = 12
PREACT_TARGET = 1.0
B1_INIT_SCALE = 0.5


class EmptyListError(ValueError):
    pass


@dataclass
class CrossEncoder:
    config: EncoderConfig
    hidden: int
    embeddings: np.ndarray  # (vocab_buckets, dim)
    w1: np.ndarray  # (hidden, 4 * dim)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: np.ndarray  # (1,)

    @classmethod
    def init(cls, config: EncoderConfig, hidden: int, seed: int) -> "CrossEncoder":
        """Seeded init, scaled so hidden units start in tanh's nonlinear range.

        Mean-pooled hashed encodings are small (roughly EMBED_INIT_SCALE /
        sqrt(3 * tokens) per entry) and the elementwise-product block is
        smaller still, so uniform weights of one shared scale would leave
        every pre-activation near zero, where tanh is effectively linear and
        the first epochs are wasted.  Each W1 block therefore gets its own
        scale, chosen so every feature block contributes about the same
        pre-activation variance.
        """
        if hidden <= 0:
            raise ValueError("hidden must be positive")
        rng = np.random.default_rng(seed)
        d = config.dim
        embeddings = snap_f32(rng.uniform(-EMBED_INIT_SCALE, EMBED_INIT_SCALE,
                                          size=(config.vocab_buckets, d)))
        s_enc = EMBED_INIT_SCALE / math.sqrt(3 * NOMINAL_TOKENS_PER_TEXT)
        w1 = np.empty((hidden, 4 * d))
        for block, s_block in enumerate((s_enc, s_enc, s_enc, s_enc * s_enc)):
            scale = PREACT_TARGET * math.sqrt(3.0) / (2.0 * s_block * math.sqrt(d))
            w1[:, block * d:(block + 1) * d] = rng.uniform(-scale, scale,
                                                           size=(hidden, d))
        return cls(config, hidden, embeddings, snap_f32(w1),
                   snap_f32(rng.uniform(-B1_INIT_SCALE, B1_INIT_SCALE, size=hidden)),
                   snap_f32(rng.uniform(-1.0, 1.0, size=hidden) / math.sqrt(hidden)),
                   snap_f32(np.zeros(1)))

    def copy(self) -> "CrossEncoder":
        return CrossEncoder(self.config, self.hidden, self.embeddings.copy(),
                            self.w1.copy(), self.b1.copy(), self.w2.copy(),
                            self.b2.copy())


def _encode_text(model: CrossEncoder, text: str) -> np.ndarray:
    return encode_feats(model.embeddings,
                        text_features(text, model.config.vocab_buckets))


def _list_vectors(model: CrossEncoder, input, demos) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    e_input = _encode_text(model, input_text(input.query.text, input.passage.text))
    e_last = _encode_text(model, demo_text(demos[-1]))
    if len(demos) > 1:
        e_prefix = np.mean([_encode_text(model, demo_text(d)) for d in demos[:-1]], axis=0)
    else:
        e_prefix = np.zeros(model.config.dim, dtype=np.float64)
    return e_input, e_prefix, e_last


def _features(e_input, e_prefix, e_last) -> np.ndarray:
    return np.concatenate([e_input, e_prefix, e_last, e_input * e_last])


def _forward(model: CrossEncoder, x_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scores and hidden activations for a batch of feature rows."""
    a = x_rows @ model.w1.T + model.b1
    h = np.tanh(a)
    return h @ model.w2 + model.b2[0], h


def cross_score(model: CrossEncoder, input, demos) -> float:
    """Predicted value of `demos` as an ordered demonstration list for `input`."""
    if not demos:
        raise EmptyListError("cross_score needs at least one demonstration")
    x = _features(*_list_vectors(model, input, demos))
    scores, _ = _forward(model, x[None, :])
    return float(scores[0])


def cross_score_batch(model: CrossEncoder, input, prefix,
                      candidates) -> np.ndarray:
    """cross_score(input, prefix + [z]) for every candidate z, in one batch."""
    if not candidates:
        return np.empty(0, dtype=np.float64)
    e_input = _encode_text(model, input_text(input.query.text, input.passage.text))
    if prefix:
        e_prefix = np.mean([_encode_text(model, demo_text(d)) for d in prefix], axis=0)
    else:
        e_prefix = np.zeros(model.config.dim, dtype=np.float64)
    lasts = np.stack([_encode_text(model, demo_text(z)) for z in candidates])
    n = len(candidates)
    x = np.concatenate([
        np.tile(e_input, (n, 1)), np.tile(e_prefix, (n, 1)),
        lasts, np.tile(e_input, (n, 1)) * lasts,
    ], axis=1)
    scores, _ = _forward(model, x)
    return scores


# ---------------------------------------------------------------------------
# Rank-proportional sampling: p(rank r) = exp(-r) / sum_j exp(-r_j)


def rank_sample_probabilities(ranks) -> np.ndarray:
    r = np.asarray(ranks, dtype=np.float64)
    if len(r) == 0:
        raise ValueError("cannot sample from an empty ranking")
    w = np.exp(-r)
    return w / w.sum()


def sample_by_rank(ranks, rng: np.random.Generator) -> int:
    """One index drawn with probability exp(-rank), by inverse CDF over ranks.

    The CDF walks candidates in ascending rank order, so a given uniform draw
    maps to the same choice regardless of input ordering.
    """
    probs = rank_sample_probabilities(ranks)
    order = np.argsort(np.asarray(ranks), kind="stable")
    u = rng.random()
    cum = 0.0
    for idx in order:
        cum += probs[idx]
        if u < cum:
            return int(idx)
    return int(order[-1])  # float rounding fallback


# ---------------------------------------------------------------------------
# Dependency-aware training samples


@dataclass(frozen=True)
class DemoList:
    demos: tuple[Demonstration, ...]
    llm_score: float


@dataclass(frozen=True)
class DependencySample:
    """All continuations of one shared prefix, rank-ordered by LLM score."""

    input: TrainingInput
    prefix: tuple[Demonstration, ...]
    continuations: tuple[DemoList, ...]

    @property
    def shot(self) -> int:
        return len(self.prefix) + 1

    def __post_init__(self) -> None:
        if not self.continuations:
            raise ValueError("sample needs at least one continuation")
        lasts = set()
        prev = None
        for c in self.continuations:
            if c.demos[:-1] != self.prefix:
                raise ValueError("continuation does not extend the sample prefix")
            if c.demos[-1].ref in lasts:
                raise ValueError("duplicate continuation demo")
            lasts.add(c.demos[-1].ref)
            if prev is not None and c.llm_score > prev + 1e-12:
                raise ValueError("continuations must be ordered by non-increasing score")
            prev = c.llm_score


def construct_samples(input: TrainingInput, retrieved: list[Demonstration],
                      backend: ScorerBackend, template: PromptTemplate,
                      iterations: int, rng: np.random.Generator) -> list[DependencySample]:
    """Iterative sample construction for one training input.

    Runs `iterations` rounds over the retrieved candidates.  Each round scores
    prefix + candidate for every unselected candidate, emits a sample holding
    the full ranked set of continuations, then moves one candidate into the
    prefix, drawn by exp(-rank).  Round i scores len(retrieved) - i lists.
    """
    m = len(retrieved)
    if not 1 <= iterations <= m:
        raise ValueError(f"need 1 <= iterations <= {m}, got {iterations}")
    prefix: list[Demonstration] = []
    unselected = list(retrieved)
    samples = []
    for _ in range(iterations):
        scores = [score_list(backend, template, prefix + [z], input) for z in unselected]
        order = sorted(range(len(unselected)), key=lambda i: (-scores[i], i))
        ranks = [0] * len(unselected)
        for pos, i in enumerate(order):
            ranks[i] = pos + 1
        continuations = tuple(
            DemoList(tuple(prefix) + (unselected[i],), scores[i]) for i in order
        )
        samples.append(DependencySample(input, tuple(prefix), continuations))
        chosen = sample_by_rank(ranks, rng)
        prefix.append(unselected.pop(chosen))
    return samples


def construct_samples_for_corpus(inputs, retrieved_by_input, backend, template,
                                 iterations: int, seed: int,
                                 trajectories: int = 1) -> list[DependencySample]:
    """Samples for every training input; seeds derive from the input ordinal."""
    if trajectories < 1:
        raise ValueError("trajectories must be at least 1")
    out = []
    for ordinal, inp in enumerate(inputs):
        for traj in range(trajectories):
            rng = np.random.default_rng(seed + 1_000_003 * ordinal + traj)
            out.extend(construct_samples(inp, retrieved_by_input[ordinal],
                                         backend, template, iterations, rng))
    return out


# ---------------------------------------------------------------------------
# List-pairwise loss


def _sample_x_rows(model: CrossEncoder, sample: DependencySample) -> np.ndarray:
    e_input = _encode_text(model, input_text(sample.input.query.text,
                                             sample.input.passage.text))
    if sample.prefix:
        prefix_encs = [_encode_text(model, demo_text(d)) for d in sample.prefix]
        e_prefix = np.mean(prefix_encs, axis=0)
    else:
        e_prefix = np.zeros(model.config.dim, dtype=np.float64)
    rows = []
    for cont in sample.continuations:
        e_last = _encode_text(model, demo_text(cont.demos[-1]))
        rows.append(_features(e_input, e_prefix, e_last))
    return np.stack(rows)


def _select_pairs(n: int, max_pairs: int | None, rng) -> tuple[np.ndarray, np.ndarray]:
    iu = np.triu_indices(n, k=1)
    total = len(iu[0])
    if max_pairs is None or total <= max_pairs:
        return iu
    # rank-stratified subsample: sort pairs by rank gap, take a seeded,
    # evenly spread selection so near and far pairs both survive
    gaps = iu[1] - iu[0]
    order = np.lexsort((iu[0], iu[1], gaps))
    stride = total / max_pairs
    offset = rng.random() if rng is not None else 0.0
    picks = order[(np.floor(offset + np.arange(max_pairs) * stride)).astype(int) % total]
    return iu[0][picks], iu[1][picks]


def list_pairwise_loss(model: CrossEncoder, samples: list[DependencySample],
                       max_pairs_per_sample: int | None = None,
                       pair_rng: np.random.Generator | None = None) -> float:
    """Sum over samples and better/worse continuation pairs of
    log(1 + exp(score_worse - score_better)) under the model."""
    total = 0.0
    for sample in samples:
        x = _sample_x_rows(model, sample)
        scores, _ = _forward(model, x)
        ii, jj = _select_pairs(len(scores), max_pairs_per_sample, pair_rng)
        total += float(np.logaddexp(0.0, scores[jj] - scores[ii]).sum())
    return total


def _sample_loss_and_param_grads(model: CrossEncoder, sample: DependencySample,
                                 max_pairs: int | None, pair_rng,
                                 grads: dict) -> float:
    buckets = model.config.vocab_buckets
    inp_feats = text_features(input_text(sample.input.query.text,
                                         sample.input.passage.text), buckets)
    prefix_feats = [text_features(demo_text(d), buckets) for d in sample.prefix]
    last_feats = [text_features(demo_text(c.demos[-1]), buckets)
                  for c in sample.continuations]

    e_input = encode_feats(model.embeddings, inp_feats)
    if prefix_feats:
        e_prefix = np.mean([encode_feats(model.embeddings, f) for f in prefix_feats], axis=0)
    else:
        e_prefix = np.zeros(model.config.dim, dtype=np.float64)
    lasts = np.stack([encode_feats(model.embeddings, f) for f in last_feats])

    n = len(sample.continuations)
    d = model.config.dim
    x = np.concatenate([
        np.tile(e_input, (n, 1)), np.tile(e_prefix, (n, 1)),
        lasts, np.tile(e_input, (n, 1)) * lasts,
    ], axis=1)
    scores, h = _forward(model, x)

    ii, jj = _select_pairs(n, max_pairs, pair_rng)
    sig = stable_sigmoid(scores[jj] - scores[ii])
    loss = float(np.logaddexp(0.0, scores[jj] - scores[ii]).sum())
    gscore = np.zeros(n, dtype=np.float64)
    np.add.at(gscore, jj, sig)
    np.add.at(gscore, ii, -sig)

    # MLP backward
    ga = gscore[:, None] * model.w2[None, :] * (1.0 - h * h)
    grads["w1"] += ga.T @ x
    grads["b1"] += ga.sum(axis=0)
    grads["w2"] += (gscore[:, None] * h).sum(axis=0)
    grads["b2"][0] += gscore.sum()
    gx = ga @ model.w1

    g_input = gx[:, :d].sum(axis=0) + (gx[:, 3 * d:] * lasts).sum(axis=0)
    g_prefix = gx[:, d:2 * d].sum(axis=0)
    g_lasts = gx[:, 2 * d:3 * d] + gx[:, 3 * d:] * e_input[None, :]

    table_grad = grads["embeddings"]
    ids, w = inp_feats
    if len(ids):
        np.add.at(table_grad, ids, w[:, None] * g_input[None, :])
    if prefix_feats:
        g_each = g_prefix / len(prefix_feats)
        for ids, w in prefix_feats:
            if len(ids):
                np.add.at(table_grad, ids, w[:, None] * g_each[None, :])
    for row, (ids, w) in zip(g_lasts, last_feats):
        if len(ids):
            np.add.at(table_grad, ids, w[:, None] * row[None, :])
    return loss


def reranker_loss_and_grads(model: CrossEncoder, samples: list[DependencySample],
                            max_pairs_per_sample: int | None = None,
                            pair_rng=None) -> tuple[float, dict]:
    """List-pairwise loss over samples plus gradients for every parameter."""
    grads = {
        "embeddings": np.zeros_like(model.embeddings),
        "w1": np.zeros_like(model.w1),
        "b1": np.zeros_like(model.b1),
        "w2": np.zeros_like(model.w2),
        "b2": np.zeros_like(model.b2),
    }
    loss = 0.0
    for sample in samples:
        loss += _sample_loss_and_param_grads(model, sample, max_pairs_per_sample,
                                             pair_rng, grads)
    return loss, grads


@dataclass(frozen=True)
class RerankerTrainConfig:
    retrieve_m: int = 50
    iterations: int = 3
    trajectories: int = 1
    max_pairs_per_sample: int | None = None
    learning_rate: float = 0.001
    epochs: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.iterations <= self.retrieve_m:
            raise ValueError("need 1 <= iterations <= retrieve_m")
        if self.learning_rate <= 0 or self.epochs < 1 or self.trajectories < 1:
            raise ValueError("bad reranker training config")


def train_reranker(model: CrossEncoder, samples: list[DependencySample],
                   cfg: RerankerTrainConfig = RerankerTrainConfig()) -> CrossEncoder:
    """Seeded gradient descent on the list-pairwise loss.

    Samples sharing a training input form one gradient step, so each step
    optimizes that input's full loss across its prefixes.
    """
    if not samples:
        raise ValueError("no training samples")
    groups: dict[str, list[DependencySample]] = {}
    for s in samples:
        groups.setdefault(s.input.input_id, []).append(s)
    keys = sorted(groups)
    trained = model.copy()
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        total = 0.0
        for gi in rng.permutation(len(keys)):
            group = groups[keys[gi]]
            loss, grads = reranker_loss_and_grads(
                trained, group, cfg.max_pairs_per_sample,
                np.random.default_rng(cfg.seed + 7919 * int(gi)))
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite reranker loss at epoch {epoch} on {keys[gi]}: {loss}")
            total += loss
            trained.embeddings = snap_f32(trained.embeddings - cfg.learning_rate * grads["embeddings"])
            trained.w1 = snap_f32(trained.w1 - cfg.learning_rate * grads["w1"])
            trained.b1 = snap_f32(trained.b1 - cfg.learning_rate * grads["b1"])
            trained.w2 = snap_f32(trained.w2 - cfg.learning_rate * grads["w2"])
            trained.b2 = snap_f32(trained.b2 - cfg.learning_rate * grads["b2"])
        logger.info("reranker epoch %d total loss %.6f", epoch, total)
    return trained


# ---------------------------------------------------------------------------
# Sample IO: {"input_id", "shot", "prefix": [ref...],
#             "continuations": [{"last": ref, "llm_score": s}]} rank-ordered


def write_samples(path, samples: list[DependencySample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({
                "input_id": s.input.input_id,
                "shot": s.shot,
                "prefix": [list(d.ref) for d in s.prefix],
                "continuations": [
                    {"last": list(c.demos[-1].ref), "llm_score": c.llm_score}
                    for c in s.continuations
                ],
            }) + "\n")


def load_samples(path, inputs: list[TrainingInput],
                 pool: DemonstrationPool) -> list[DependencySample]:
    by_id = {t.input_id: t for t in inputs}
    by_ref = pool.by_ref()
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            inp = by_id.get(obj["input_id"])
            if inp is None:
                raise ValueError(f"{path}:{lineno}: unknown input {obj['input_id']!r}")
            try:
                prefix = tuple(by_ref[tuple(r)] for r in obj["prefix"])
                continuations = tuple(
                    DemoList(prefix + (by_ref[tuple(c["last"])],), float(c["llm_score"]))
                    for c in obj["continuations"]
                )
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: unknown demo ref {exc}") from exc
            sample = DependencySample(inp, prefix, continuations)
            if sample.shot != int(obj["shot"]):
                raise ValueError(f"{path}:{lineno}: shot mismatch")
            out.append(sample)
    return out
