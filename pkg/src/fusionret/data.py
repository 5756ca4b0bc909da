"""Synthetic multimodal retrieval corpora and their on-disk formats.

Each topic owns a sparse unit latent vector (a few active axes with random
signs).  Every token of a vocabulary half stands for one signed latent axis.
Document text and captions draw tokens from a topic-conditioned distribution
over the document half of the vocabulary, questions draw from the query half
under a different token-to-axis assignment (so an untrained encoder sees no
lexical overlap between a query and its positives), and visual patches are a
fixed linear image of the latent plus isotropic noise.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, asdict, replace

import numpy as np

TASK_TAGS = ("T2T", "T2I", "TI2T", "mixed")


class DatasetFormatError(ValueError):
    pass


class DatasetValidationError(ValueError):
    pass


class EmbeddingFormatError(ValueError):
    pass


@dataclass
class Document:
    id: str
    text_tokens: list | None = None
    caption_tokens: list | None = None
    visual_patches: np.ndarray | None = None
    topic_id: int | None = None

    def validate(self):
        if self.text_tokens is None and self.visual_patches is None:
            raise DatasetValidationError(f"document {self.id!r} has neither text nor visual features")
        if self.caption_tokens is not None and self.visual_patches is None:
            raise DatasetValidationError(f"document {self.id!r} has a caption but no visual features")
        if self.text_tokens is not None and len(self.text_tokens) == 0:
            raise DatasetValidationError(f"document {self.id!r} has an empty text body")

    @property
    def modality(self):
        """'image' when visual features are present, else 'text'."""
        return "image" if self.visual_patches is not None else "text"

    @property
    def kind(self):
        if self.visual_patches is None:
            return "T"
        return "IVC" if self.caption_tokens is not None else "IV"

    def without_caption(self):
        return replace(self, caption_tokens=None)


@dataclass
class Query:
    id: str
    text_tokens: list
    positives: frozenset
    task_tag: str = "mixed"
    visual_patches: np.ndarray | None = None
    caption_tokens: list | None = None
    topic_id: int | None = None

    def validate(self):
        if not self.text_tokens:
            raise DatasetValidationError(f"query {self.id!r} has no question tokens")
        if not self.positives:
            raise DatasetValidationError(f"query {self.id!r} has no positives")
        if self.caption_tokens is not None and self.visual_patches is None:
            raise DatasetValidationError(f"query {self.id!r} has a caption but no visual features")
        if self.task_tag not in TASK_TAGS:
            raise DatasetValidationError(f"query {self.id!r} has unknown task tag {self.task_tag!r}")


@dataclass
class Dataset:
    corpus: list
    train: list
    valid: list
    test: list
    meta: dict = field(default_factory=dict)

    def doc_by_id(self):
        return {d.id: d for d in self.corpus}

    def splits(self):
        return {"train": self.train, "valid": self.valid, "test": self.test}

    def all_queries(self):
        return self.train + self.valid + self.test

    def validate(self):
        ids = set()
        for d in self.corpus:
            d.validate()
            if d.id in ids:
                raise DatasetValidationError(f"duplicate document id {d.id!r}")
            ids.add(d.id)
        qids = set()
        for q in self.all_queries():
            q.validate()
            if q.id in qids:
                raise DatasetValidationError(f"duplicate query id {q.id!r}")
            qids.add(q.id)
            missing = set(q.positives) - ids
            if missing:
                raise DatasetValidationError(f"query {q.id!r} references unknown documents {sorted(missing)}")


@dataclass(frozen=True)
class GeneratorConfig:
    n_topics: int = 400
    corpus_size: int = 512
    n_train: int = 200
    n_valid: int = 100
    n_test: int = 100
    vocab_size: int = 64
    latent_dim: int = 16
    topic_sparsity: int = 3
    n_patches: int = 4
    visual_feat_dim: int = 16
    min_text_len: int = 12
    max_text_len: int = 24
    # proportions over document kinds: text-only vs image-bearing
    doc_modality_mix: tuple = (("T", 0.5), ("I", 0.5))
    # proportions over query kinds: text-only vs text+image
    query_modality_mix: tuple = (("T", 1.0), ("TI", 0.0))
    corpus_caption_ratio: float = 0.5
    visual_signal_strength: float = 3.0
    text_signal_strength: float = 8.0
    caption_signal_strength: float = 8.0
    noise_scale: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name, mix in (("doc_modality_mix", self.doc_modality_mix), ("query_modality_mix", self.query_modality_mix)):
            probs = [p for _, p in mix]
            if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
                raise ValueError(f"{name} proportions must be non-negative and sum to 1")
        if dict(self.doc_modality_mix).keys() != {"T", "I"}:
            raise ValueError("doc_modality_mix must have keys T and I")
        if dict(self.query_modality_mix).keys() != {"T", "TI"}:
            raise ValueError("query_modality_mix must have keys T and TI")
        if not 0.0 <= self.corpus_caption_ratio <= 1.0:
            raise ValueError("corpus_caption_ratio must lie in [0, 1]")
        if not self.n_topics <= self.corpus_size <= 2 * self.n_topics:
            raise ValueError("every topic owns one or two documents: need n_topics <= corpus_size <= 2*n_topics")
        if self.vocab_size < 4 or self.vocab_size % 2:
            raise ValueError("vocab_size must be an even number >= 4")
        if not 1 <= self.topic_sparsity <= self.latent_dim:
            raise ValueError("topic_sparsity must lie in [1, latent_dim]")
        if not 1 <= self.min_text_len <= self.max_text_len:
            raise ValueError("need 1 <= min_text_len <= max_text_len")
        for name in ("visual_signal_strength", "text_signal_strength", "caption_signal_strength", "noise_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["doc_modality_mix"] = dict(self.doc_modality_mix)
        d["query_modality_mix"] = dict(self.query_modality_mix)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("doc_modality_mix", "query_modality_mix"):
            if isinstance(d.get(key), dict):
                d[key] = tuple(d[key].items())
        return cls(**d)


PRESETS = {
    # text queries over a mixed T / I^V / I^VC corpus with half the images captionless
    "webqa-like": GeneratorConfig(),
    # text and text+image questions against a text-only corpus
    "evqa-like": GeneratorConfig(
        doc_modality_mix=(("T", 1.0), ("I", 0.0)),
        query_modality_mix=(("T", 0.5), ("TI", 0.5)),
    ),
    # images carry most of the signal and every corpus image has a caption
    "visual-dominant": GeneratorConfig(
        doc_modality_mix=(("T", 0.2), ("I", 0.8)),
        corpus_caption_ratio=1.0,
        visual_signal_strength=2.0,
        caption_signal_strength=1.5,
    ),
}


def preset(name, **overrides) -> GeneratorConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


def _sparse_topics(rng, n, d, k):
    z = np.zeros((n, d))
    for row in z:
        row[rng.choice(d, size=k, replace=False)] = rng.choice([-1.0, 1.0], size=k)
    return z / np.sqrt(k)


def _axis_vocab(n_tokens, d):
    """Token ``t`` points along signed axis ``t mod 2d`` (later tokens are synonyms)."""
    basis = np.concatenate([np.eye(d), -np.eye(d)])
    return np.tile(basis, (-(-n_tokens // (2 * d)), 1))[:n_tokens]


class _World:
    """Fixed random maps from topic latents to observable features."""

    def __init__(self, cfg: GeneratorConfig, rng):
        half = cfg.vocab_size // 2
        self.cfg = cfg
        self.half = half
        self.topics = _sparse_topics(rng, cfg.n_topics, cfg.latent_dim, cfg.topic_sparsity)
        self.doc_vocab = _axis_vocab(half, cfg.latent_dim)[rng.permutation(half)]
        self.query_vocab = _axis_vocab(half, cfg.latent_dim)[rng.permutation(half)]
        self.visual_map = rng.standard_normal((cfg.n_patches * cfg.visual_feat_dim, cfg.latent_dim)) / np.sqrt(
            cfg.latent_dim)

    def tokens(self, rng, topic, vocab, offset, strength):
        logits = strength * (vocab @ self.topics[topic])
        p = np.exp(logits - logits.max())
        p /= p.sum()
        n = int(rng.integers(self.cfg.min_text_len, self.cfg.max_text_len + 1))
        return [int(t) + offset for t in rng.choice(len(p), size=n, p=p)]

    def patches(self, rng, topic):
        cfg = self.cfg
        signal = cfg.visual_signal_strength * (self.visual_map @ self.topics[topic])
        noise = cfg.noise_scale * rng.standard_normal(signal.shape)
        return (signal + noise).reshape(cfg.n_patches, cfg.visual_feat_dim)


def _task_tag(query_kind, kinds):
    image = [k != "T" for k in kinds]
    if query_kind == "T":
        if not any(image):
            return "T2T"
        if all(image):
            return "T2I"
    elif not any(image):
        return "TI2T"
    return "mixed"


def generate(cfg: GeneratorConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    world = _World(cfg, rng)

    # every topic owns one document; the surplus goes to distinct extra topics
    sizes = np.ones(cfg.n_topics, dtype=int)
    sizes[rng.choice(cfg.n_topics, size=cfg.corpus_size - cfg.n_topics, replace=False)] += 1
    doc_topics = rng.permutation(np.repeat(np.arange(cfg.n_topics), sizes))

    kinds, probs = zip(*cfg.doc_modality_mix)
    corpus, by_topic = [], {}
    for i, topic in enumerate(doc_topics):
        topic = int(topic)
        doc = Document(id=f"d{i:05d}", topic_id=topic)
        if rng.choice(len(kinds), p=probs) == kinds.index("T"):
            doc.text_tokens = world.tokens(rng, topic, world.doc_vocab, 0, cfg.text_signal_strength)
        else:
            doc.visual_patches = world.patches(rng, topic)
            if rng.random() < cfg.corpus_caption_ratio:
                doc.caption_tokens = world.tokens(rng, topic, world.doc_vocab, 0, cfg.caption_signal_strength)
        corpus.append(doc)
        by_topic.setdefault(topic, []).append(doc)

    n_q = cfg.n_train + cfg.n_valid + cfg.n_test
    if n_q <= cfg.n_topics:
        q_topics = rng.choice(cfg.n_topics, size=n_q, replace=False)
    else:
        q_topics = rng.choice(cfg.n_topics, size=n_q, replace=True)
    qkinds, qprobs = zip(*cfg.query_modality_mix)
    queries = []
    for j, topic in enumerate(q_topics):
        topic = int(topic)
        kind = qkinds[rng.choice(len(qkinds), p=qprobs)]
        docs = by_topic[topic]
        q = Query(
            id=f"q{j:05d}",
            text_tokens=world.tokens(rng, topic, world.query_vocab, world.half, cfg.text_signal_strength),
            positives=frozenset(d.id for d in docs),
            topic_id=topic,
        )
        if kind == "TI":
            q.visual_patches = world.patches(rng, topic)
        q.task_tag = _task_tag(kind, [d.kind for d in docs])
        queries.append(q)

    a, b = cfg.n_train, cfg.n_train + cfg.n_valid
    ds = Dataset(corpus, queries[:a], queries[a:b], queries[b:], meta={"generator": cfg.to_dict()})
    ds.validate()
    return ds


def strip_captions(docs):
    return [d.without_caption() if d.caption_tokens is not None else d for d in docs]


# dataset files: one JSON object per line


def _item_record(item, kind):
    rec = {"type": kind, "id": item.id}
    for key in ("text_tokens", "caption_tokens"):
        val = getattr(item, key)
        if val is not None:
            rec[key] = [int(t) for t in val]
    if item.visual_patches is not None:
        arr = np.asarray(item.visual_patches, dtype=np.float64)
        rec["visual_shape"] = list(arr.shape)
        rec["visual_patches"] = [float(x) for x in arr.reshape(-1)]
    if item.topic_id is not None:
        rec["topic_id"] = int(item.topic_id)
    if kind != "doc":
        rec["positives"] = sorted(item.positives)
        rec["task_tag"] = item.task_tag
    return rec


def _dumps(rec):
    return json.dumps(rec, separators=(",", ":"), sort_keys=True)


def save_dataset(path, ds: Dataset):
    """Write ``ds`` as line-delimited JSON (a header line, then one item per line)."""
    ds.validate()
    lines = [_dumps({"type": "header", "format": "fusionret-dataset", "version": 1, "meta": ds.meta})]
    lines += [_dumps(_item_record(d, "doc")) for d in ds.corpus]
    for split, qs in ds.splits().items():
        lines += [_dumps(_item_record(q, split)) for q in qs]
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _parse_item(rec, lineno):
    patches = None
    if "visual_patches" in rec:
        shape = rec.get("visual_shape")
        flat = np.asarray(rec["visual_patches"], dtype=np.float64)
        if shape is None or int(np.prod(shape)) != flat.size:
            raise DatasetFormatError(f"line {lineno}: visual_patches length does not match visual_shape")
        patches = flat.reshape(shape)
    if rec["type"] == "doc":
        return Document(rec["id"], rec.get("text_tokens"), rec.get("caption_tokens"), patches, rec.get("topic_id"))
    return Query(rec["id"], rec.get("text_tokens") or [], frozenset(rec.get("positives", [])),
                 rec.get("task_tag", "mixed"), patches, rec.get("caption_tokens"), rec.get("topic_id"))


def load_dataset(path) -> Dataset:
    ds = Dataset([], [], [], [])
    seen_header = False
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                kind = rec["type"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"line {lineno}: malformed record ({exc})") from None
            if kind == "header":
                ds.meta = rec.get("meta", {})
                seen_header = True
                continue
            if kind not in ("doc", "train", "valid", "test"):
                raise DatasetFormatError(f"line {lineno}: unknown record type {kind!r}")
            try:
                item = _parse_item(rec, lineno)
            except KeyError as exc:
                raise DatasetFormatError(f"line {lineno}: missing field {exc}") from None
            try:
                item.validate()
            except DatasetValidationError as exc:
                raise DatasetValidationError(f"line {lineno}: {exc}") from None
            (ds.corpus if kind == "doc" else getattr(ds, kind)).append(item)
    if not seen_header:
        raise DatasetFormatError("line 1: missing dataset header")
    ds.validate()
    return ds


# embedding files: "MMEB", u32 version, u32 count, u32 dim, ids, f32 rows

EMB_MAGIC = b"MMEB"
EMB_VERSION = 1


def write_embeddings(path, ids, matrix):
    ids = [str(i) for i in ids]
    if len(set(ids)) != len(ids):
        raise ValueError("embedding ids must be unique")
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    if mat.ndim != 2 or mat.shape[0] != len(ids):
        raise ValueError("matrix must have one row per id")
    parts = [EMB_MAGIC, struct.pack("<III", EMB_VERSION, len(ids), mat.shape[1])]
    for i in ids:
        raw = i.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(mat.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_embeddings(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != EMB_MAGIC:
        raise EmbeddingFormatError("bad embedding-file magic")
    if len(buf) < 16:
        raise EmbeddingFormatError("truncated embedding header")
    version, count, dim = struct.unpack_from("<III", buf, 4)
    if version != EMB_VERSION:
        raise EmbeddingFormatError(f"unsupported embedding-file version {version}")
    off, ids = 16, []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            if off + n > len(buf):
                raise EmbeddingFormatError("id table truncated")
            ids.append(buf[off: off + n].decode("utf-8"))
            off += n
    except struct.error:
        raise EmbeddingFormatError("id table truncated (count field exceeds file)") from None
    payload = len(buf) - off
    if payload != 4 * count * dim:
        raise EmbeddingFormatError(f"payload holds {payload} bytes, header declares {count}x{dim} f32 values")
    matrix = np.frombuffer(buf, dtype="<f4", offset=off).reshape(count, dim).astype(np.float32)
    return ids, matrix
