"""Exact cosine-similarity search and hard-negative mining."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import embed_items


class IndexBuildError(ValueError):
    pass


@dataclass(frozen=True)
class RankedList:
    query_id: str
    entries: tuple  # ((doc_id, score), ...), best first

    @property
    def doc_ids(self):
        return [d for d, _ in self.entries]


class EmbeddingIndex:
    """Immutable brute-force index over unit-norm rows."""

    def __init__(self, ids, matrix):
        self._ids = tuple(ids)
        mat = np.array(matrix, dtype=np.float32, copy=True)
        if mat.ndim != 2 or mat.shape[0] != len(self._ids):
            raise IndexBuildError("need one embedding row per id")
        mat.setflags(write=False)
        self._matrix = mat
        # position of each id in ascending id order, used as the tie-break key
        order = sorted(range(len(self._ids)), key=self._ids.__getitem__)
        rank = np.empty(len(self._ids), dtype=np.int64)
        rank[order] = np.arange(len(order))
        rank.setflags(write=False)
        self._id_rank = rank

    @property
    def ids(self):
        return self._ids

    @property
    def matrix(self):
        return self._matrix

    def __len__(self):
        return len(self._ids)

    def scores(self, queries):
        return np.asarray(queries, dtype=np.float32).reshape(-1, self._matrix.shape[1]) @ self._matrix.T

    def search(self, q, k, query_id=""):
        return self.search_many([q], k, [query_id])[0]

    def search_many(self, queries, k, query_ids=None):
        if k < 1:
            raise ValueError("k must be >= 1")
        queries = np.asarray(queries, dtype=np.float32)
        if query_ids is None:
            query_ids = [str(i) for i in range(len(queries))]
        if len(self) == 0:
            return [RankedList(qid, ()) for qid in query_ids]
        sims = self.scores(queries)
        k = min(k, len(self))
        out = []
        for qid, row in zip(query_ids, sims):
            # primary key: score descending; secondary: doc id ascending
            order = np.lexsort((self._id_rank, -row))[:k]
            out.append(RankedList(qid, tuple((self._ids[j], float(row[j])) for j in order)))
        return out


def build(ids, embeddings, norm_tol=1e-3) -> EmbeddingIndex:
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise IndexBuildError("duplicate document id")
    mat = np.asarray(embeddings, dtype=np.float32)
    if len(ids) == 0:
        return EmbeddingIndex([], np.zeros((0, mat.shape[-1] if mat.ndim == 2 else 0), np.float32))
    if mat.ndim != 2 or mat.shape[0] != len(ids):
        raise IndexBuildError("need one embedding row per id")
    norms = np.linalg.norm(mat.astype(np.float64), axis=1)
    if np.any(np.abs(norms - 1.0) > norm_tol):
        raise IndexBuildError("index rows must be unit norm")
    return EmbeddingIndex(ids, mat)


def retrieve(params, cfg, queries, corpus, k=100, doc_matrix=None):
    """Encode ``queries`` (and ``corpus`` unless ``doc_matrix`` is given) and search."""
    if doc_matrix is None:
        doc_matrix = embed_items(corpus, params, cfg)
    index = build([d.id for d in corpus], doc_matrix)
    q = embed_items(queries, params, cfg)
    return index.search_many(q, k, [x.id for x in queries])


def mine_hard_negatives(params, cfg, corpus, train_queries, rng, top_n=100, per_modality_k=1,
                        query_ids=None):
    """Map query id -> hard-negative doc ids sampled from its filtered top-``top_n``.

    Positives are removed from the candidates, which are then split into an
    image pool (visual features present) and a text pool; ``per_modality_k``
    documents are drawn uniformly from each non-empty pool.
    """
    by_id = {q.id: q for q in train_queries}
    if query_ids is not None:
        missing = [qid for qid in query_ids if qid not in by_id]
        if missing:
            raise KeyError(f"queries not in the dataset: {missing}")
        train_queries = [by_id[qid] for qid in query_ids]
    docs = {d.id: d for d in corpus}
    runs = retrieve(params, cfg, train_queries, corpus, k=top_n)
    mined = {}
    for q, run in zip(train_queries, runs):
        cands = [d for d in run.doc_ids if d not in q.positives]
        picked = []
        for modality in ("image", "text"):
            pool = [d for d in cands if docs[d].modality == modality]
            if not pool:
                continue
            take = min(per_modality_k, len(pool))
            sel = rng.choice(len(pool), size=take, replace=False)
            picked.extend(pool[i] for i in sorted(sel))
        mined[q.id] = picked
    return mined
