"""Seeded toy corpora for desk-scale distillation and retrieval runs."""

from __future__ import annotations

import zlib
from typing import Callable, Sequence

import numpy as np

from .training import TrainingExample, mine_hard_negatives


def _words_by_bucket(vocab_size: int, per_bucket: int = 1) -> dict[int, list[str]]:
    buckets: dict[int, list[str]] = {i: [] for i in range(vocab_size)}
    i = 0
    while min(len(v) for v in buckets.values()) < per_bucket:
        w = f"w{i}"
        b = zlib.crc32(w.encode()) % vocab_size
        if len(buckets[b]) < per_bucket:
            buckets[b].append(w)
        i += 1
    return buckets


def word_lexicon(vocab_size: int = 256) -> list[str]:
    """One word per token id: ``lexicon[i]`` tokenizes to id ``i`` in whitespace mode."""
    return [ws[0] for _, ws in sorted(_words_by_bucket(vocab_size).items())]


class TopicTextGenerator:
    """Texts drawn from Zipf-weighted topics over a restricted id range.

    Each text mixes the topics with weights from a symmetric Dirichlet, so
    the corpus covers far more word distributions than there are topics.
    """

    def __init__(self, seed: int = 0, vocab_size: int = 256, ids: range | None = None,
                 n_topics: int = 16, zipf: float = 1.1, concentration: float = 0.3):
        self.lexicon = word_lexicon(vocab_size)
        self.ids = np.arange(vocab_size) if ids is None else np.asarray(list(ids))
        self.concentration = concentration
        rng = np.random.default_rng(seed)
        weights = 1.0 / np.arange(1, len(self.ids) + 1) ** zipf
        topics = [weights[rng.permutation(len(self.ids))] for _ in range(n_topics)]
        self.topics = np.stack([p / p.sum() for p in topics])

    def sample_ids(self, rng: np.random.Generator, length: int, topic: int | None = None) -> list[int]:
        if topic is None:
            mix = rng.dirichlet(np.full(len(self.topics), self.concentration))
            p = mix @ self.topics
        else:
            p = self.topics[topic]
        return self.ids[rng.choice(len(self.ids), size=length, p=p)].tolist()

    def text(self, ids) -> str:
        return " ".join(self.lexicon[i] for i in ids)


def make_distill_corpus(n: int, seed: int = 42, min_len: int = 40, max_len: int = 240,
                        vocab_size: int = 256, generator: TopicTextGenerator | None = None,
                        prefix: str = "doc") -> list[TrainingExample]:
    gen = generator or TopicTextGenerator(seed=seed, vocab_size=vocab_size)
    rng = np.random.default_rng([seed, 1])
    out = []
    for i in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        out.append(TrainingExample(f"{prefix}{i}", gen.sample_ids(rng, length)))
    return out


def make_retrieval_pool(n: int, seed: int = 7, generator: TopicTextGenerator | None = None,
                        doc_len: tuple[int, int] = (30, 120), query_len: int = 20, query_noise: int = 4,
                        vocab_size: int = 256) -> tuple[list[list[int]], list[list[int]]]:
    """Queries and their positive documents for an extractive retrieval task.

    Documents come from the topic generator.  A query is ``query_len`` words
    sampled without replacement from its document plus ``query_noise`` words
    from an unrelated text, shuffled.
    """
    if query_len > doc_len[0]:
        raise ValueError("query_len cannot exceed the shortest document length")
    gen = generator or TopicTextGenerator(seed=seed, vocab_size=vocab_size)
    rng = np.random.default_rng([seed, 2])
    queries, docs = [], []
    for _ in range(n):
        doc = gen.sample_ids(rng, int(rng.integers(doc_len[0], doc_len[1] + 1)))
        q = [doc[i] for i in rng.choice(len(doc), size=query_len, replace=False)]
        if query_noise:
            q += gen.sample_ids(rng, query_noise)
        rng.shuffle(q)
        queries.append([int(x) for x in q])
        docs.append([int(x) for x in doc])
    return queries, docs


def make_retrieval_examples(queries: Sequence[Sequence[int]], docs: Sequence[Sequence[int]],
                            embed: Callable[[list], np.ndarray], k: int = 3, block: int = 400,
                            prefix: str = "q", consistent_only: bool = True) -> list[TrainingExample]:
    """Stage-4 tuples with hard negatives mined by nearest-neighbour search.

    ``embed`` maps a list of id lists to ``[n, d]`` vectors (the teacher).
    Negatives are the ``k`` documents closest to the query within its block
    of ``block`` consecutive pairs, excluding its own positive.  With
    ``consistent_only`` a tuple is kept only if the teacher ranks the positive
    above all of its negatives, which drops pairs whose label the teacher
    contradicts (likely false negatives).
    """
    if len(queries) != len(docs):
        raise ValueError("queries and docs must pair up")
    out = []
    for start in range(0, len(queries), block):
        qs = [list(q) for q in queries[start:start + block]]
        ds = [list(d) for d in docs[start:start + block]]
        qe, de = embed(qs), embed(ds)
        neg = mine_hard_negatives(qe, de, list(range(len(qs))), k)
        qn = qe / np.linalg.norm(qe, axis=1, keepdims=True)
        dn = de / np.linalg.norm(de, axis=1, keepdims=True)
        pos_score = np.sum(qn * dn, axis=1)
        neg_score = np.einsum("nd,nkd->nk", qn, dn[neg])
        keep = np.all(pos_score[:, None] > neg_score, axis=1) if consistent_only else np.ones(len(qs), bool)
        for i in np.flatnonzero(keep):
            out.append(TrainingExample(f"{prefix}{start + i}", qs[i], ds[i], [ds[j] for j in neg[i]]))
    return out
