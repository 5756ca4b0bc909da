"""Embedding-space diagnostics: cross-modal similarity, neighbourhood overlap,
dispersion and a PCA projection for plotting."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import Document
from .model import embed_items


class DiagnosticError(ValueError):
    pass


def _unit_rows(x, what, tol=1e-3):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DiagnosticError(f"{what}: expected a 2-d array")
    if x.shape[0] and np.any(np.abs(np.linalg.norm(x, axis=1) - 1.0) > tol):
        raise DiagnosticError(f"{what}: rows must be unit norm")
    return x


@dataclass
class ModalityEmbeddingSet:
    """Per-image embeddings by role plus a pool of text-document embeddings.

    ``visual``, ``caption`` and ``fused`` are row-aligned with ``ids``.
    """
    ids: list
    visual: np.ndarray
    caption: np.ndarray
    fused: np.ndarray
    text: np.ndarray
    text_ids: list | None = None

    def __post_init__(self):
        self.visual = _unit_rows(self.visual, "visual")
        self.caption = _unit_rows(self.caption, "caption")
        self.fused = _unit_rows(self.fused, "fused")
        self.text = _unit_rows(self.text, "text")
        n = len(self.ids)
        if not (self.visual.shape[0] == self.caption.shape[0] == self.fused.shape[0] == n):
            raise DiagnosticError("visual, caption and fused roles must share item ids")
        if self.text_ids is None:
            self.text_ids = [f"t{i}" for i in range(self.text.shape[0])]


def embedding_set(params, cfg, corpus) -> ModalityEmbeddingSet:
    """Encode every captioned image of ``corpus`` in its three roles.

    The caption role encodes the caption alone as a text document; text
    documents form the comparison pool.
    """
    images = [d for d in corpus if d.kind == "IVC"]
    texts = [d for d in corpus if d.kind == "T"]
    visual = [Document(d.id, visual_patches=d.visual_patches) for d in images]
    captions = [Document(d.id, text_tokens=list(d.caption_tokens)) for d in images]
    dim = cfg.embed_dim

    def enc(items):
        return embed_items(items, params, cfg) if items else np.zeros((0, dim), np.float32)

    return ModalityEmbeddingSet(
        ids=[d.id for d in images],
        visual=enc(visual),
        caption=enc(captions),
        fused=enc(images),
        text=enc(texts),
        text_ids=[d.id for d in texts],
    )


def _require(n, need, what):
    if n < need:
        raise DiagnosticError(f"{what}: need at least {need} embeddings, got {n}")


def cross_modal_similarity(sets: ModalityEmbeddingSet, rng) -> dict:
    """Mean cosine between roles.

    Image-image pairs use the same item; pairs with the text pool draw one
    text document per image uniformly at random.
    """
    n = len(sets.ids)
    _require(n, 2, "image roles")
    _require(sets.text.shape[0], 2, "text pool")
    pick = rng.integers(0, sets.text.shape[0], size=n)
    t = sets.text[pick]

    def paired(a, b):
        return float(np.clip(np.mean(np.sum(a * b, axis=1)), -1.0, 1.0))

    return {
        "sim_IV_T": paired(sets.visual, t),
        "sim_IV_IC": paired(sets.visual, sets.caption),
        "sim_IC_T": paired(sets.caption, t),
        "sim_IVC_T": paired(sets.fused, t),
    }


class OverlapReport(NamedTuple):
    k: int
    sample_size: int
    mean_overlap: float


def _neighbors(pool, query_rows, exclude, k):
    sims = pool[query_rows] @ pool.T
    out = []
    for row, skip in zip(sims, exclude):
        row = row.copy()
        row[list(skip)] = -np.inf
        # stable sort so equal scores fall back to pool order
        out.append(set(np.argsort(-row, kind="stable")[:k].tolist()))
    return out


def neighborhood_overlap(sets: ModalityEmbeddingSet, k, sample_size=500, rng=None) -> OverlapReport:
    """Mean fraction of shared k-nearest neighbours of each item's visual and
    caption embeddings, searched in the pooled sample of both roles.

    An item's own two embeddings are excluded from both of its neighbourhoods.
    """
    if k < 1:
        raise DiagnosticError("k must be positive")
    n = len(sets.ids)
    m = min(sample_size, n)
    if 2 * m - 2 < k:
        raise DiagnosticError(f"too few paired items ({n}) for k={k}")
    rng = rng if rng is not None else np.random.default_rng(0)
    pick = np.sort(rng.choice(n, size=m, replace=False))
    pool = np.concatenate([sets.visual[pick], sets.caption[pick]])
    own = [(i, m + i) for i in range(m)]
    nv = _neighbors(pool, np.arange(m), own, k)
    nc = _neighbors(pool, np.arange(m, 2 * m), own, k)
    overlap = float(np.mean([len(a & b) / k for a, b in zip(nv, nc)]))
    return OverlapReport(k, m, overlap)


def dispersion_report(embeddings) -> dict:
    x = np.asarray(embeddings, dtype=np.float64)
    _require(x.shape[0] if x.ndim == 2 else 0, 2, "dispersion")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise DiagnosticError("dispersion: zero vector")
    u = x / norms
    n = u.shape[0]
    s = u.sum(axis=0)
    mean_cos = (float(s @ s) - float(np.sum(u * u))) / (n * (n - 1))
    lam = np.clip(np.linalg.eigvalsh(np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])), 0.0, None)
    total = lam.sum()
    # a collapsed cloud has a single (zero-width) direction
    pr = 1.0 if total <= 1e-12 else float(total**2 / np.sum(lam**2))
    return {"mean_pairwise_cosine": mean_cos, "participation_ratio": pr}


class Projection(NamedTuple):
    coords: np.ndarray
    degenerate: bool


def project_2d(embeddings) -> Projection:
    """Top-two principal component coordinates, largest loading made positive."""
    x = np.asarray(embeddings, dtype=np.float64)
    _require(x.shape[0] if x.ndim == 2 else 0, 3, "projection")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    lam, vecs = np.linalg.eigh(cov)
    if lam[-1] <= 1e-12:
        return Projection(np.zeros((x.shape[0], 2)), True)
    comps = vecs[:, ::-1][:, :2].copy()
    if comps.shape[1] < 2:
        comps = np.pad(comps, ((0, 0), (0, 2 - comps.shape[1])))
    for j in range(2):
        if comps[np.argmax(np.abs(comps[:, j])), j] < 0:
            comps[:, j] = -comps[:, j]
    return Projection(xc @ comps, False)


def value_lines(values: dict):
    return [f"{name},{float(v):.6f}" for name, v in values.items()]


def coordinate_lines(ids, coords):
    return [f"{i},{x:.6f},{y:.6f}" for i, (x, y) in zip(ids, np.asarray(coords))]
