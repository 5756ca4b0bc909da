"""Text/visual encoders and the fusion heads that turn items into embeddings.

All encoders run on padded batches with boolean key masks.  Three fusion
strategies share the same encoder stacks:

* ``fid``   - a learned BOS vector cross-attends over the concatenated
  encoder outputs (no positions on the fused memory);
* ``early`` - projected visual tokens and text token embeddings go through
  the text encoder together and are mean pooled;
* ``late``  - each modality is pooled separately and the normalized
  embeddings are summed.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, asdict
from typing import NamedTuple

import numpy as np

from . import compute as C
from .compute import Tensor

FUSION_STRATEGIES = ("fid", "early", "late")
POS_INIT = 0.5


class EmptyModalityError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 32
    visual_feat_dim: int = 16
    n_text_layers: int = 1
    n_visual_layers: int = 1
    n_decoder_layers: int = 1
    n_heads: int = 2
    vocab_size: int = 64
    max_text_len: int = 24
    n_patches: int = 4
    fusion_strategy: str = "fid"
    embed_dim: int = 32
    ffn_mult: int = 2
    init_seed: int = 0

    def __post_init__(self):
        for name in ("hidden_dim", "visual_feat_dim", "n_text_layers", "n_visual_layers", "n_decoder_layers",
                     "n_heads", "vocab_size", "max_text_len", "n_patches", "embed_dim", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.embed_dim > self.hidden_dim:
            raise ValueError("embed_dim cannot exceed hidden_dim")
        if self.fusion_strategy not in FUSION_STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.fusion_strategy!r}")

    def to_dict(self):
        return asdict(self)


class EncodedFeatures(NamedTuple):
    hidden: Tensor  # [seq_len, hidden_dim]
    source_modality: str  # "text" | "visual"


# parameters


def _block_shapes(prefix, h, ffn):
    return {
        f"{prefix}.ln1.g": (h,), f"{prefix}.ln1.b": (h,),
        f"{prefix}.attn.wq": (h, h), f"{prefix}.attn.wk": (h, h),
        f"{prefix}.attn.wv": (h, h), f"{prefix}.attn.wo": (h, h),
        f"{prefix}.ln2.g": (h,), f"{prefix}.ln2.b": (h,),
        f"{prefix}.ffn.w1": (h, ffn), f"{prefix}.ffn.b1": (ffn,),
        f"{prefix}.ffn.w2": (ffn, h), f"{prefix}.ffn.b2": (h,),
    }


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    h, ffn = cfg.hidden_dim, cfg.hidden_dim * cfg.ffn_mult
    shapes = {
        "text.tok_emb": (cfg.vocab_size, h),
        "text.pos_emb": (cfg.max_text_len, h),
        "text.ln_f.g": (h,), "text.ln_f.b": (h,),
        "visual.w_in": (cfg.visual_feat_dim, h), "visual.b_in": (h,),
        "visual.pos_emb": (cfg.n_patches, h),
        "visual.ln_f.g": (h,), "visual.ln_f.b": (h,),
        "projector.w": (h, h), "projector.b": (h,),
        "decoder.bos": (h,),
        "decoder.ln_f.g": (h,), "decoder.ln_f.b": (h,),
        "head.w": (h, cfg.embed_dim),
    }
    for i in range(cfg.n_text_layers):
        shapes.update(_block_shapes(f"text.layer{i}", h, ffn))
    for i in range(cfg.n_visual_layers):
        shapes.update(_block_shapes(f"visual.layer{i}", h, ffn))
    for i in range(cfg.n_decoder_layers):
        shapes.update(_block_shapes(f"decoder.layer{i}", h, ffn))
    return shapes


def init_params(cfg: ModelConfig, seed: int | None = None) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf.startswith("b") and name != "decoder.bos":
            arr = np.zeros(shape)
        elif name.endswith("pos_emb"):
            arr = rng.standard_normal(shape) * POS_INIT
        elif name.endswith("_emb") or name == "decoder.bos":
            arr = rng.standard_normal(shape) * 0.5
        else:
            arr = rng.standard_normal(shape) / np.sqrt(shape[0])
        params[name] = Tensor(arr.astype(C.default_dtype()), requires_grad=True, name=name)
    return params


def validate_params(params, cfg: ModelConfig):
    shapes = parameter_shapes(cfg)
    missing = set(shapes) - set(params)
    if missing:
        raise KeyError(f"missing parameters: {sorted(missing)}")
    for name, shape in shapes.items():
        arr = params[name].data
        if arr.shape != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name}: non-finite values")


# transformer pieces


def _heads(x, n_heads):
    b, s, h = x.shape
    return C.transpose(C.reshape(x, (b, s, n_heads, h // n_heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, nh, s, dh = x.shape
    return C.reshape(C.transpose(x, (0, 2, 1, 3)), (b, s, nh * dh))


def attention(params, prefix, x_q, x_kv, key_mask, n_heads):
    """Multi-head attention; ``key_mask`` is ``[B, S_kv]`` bool or None."""
    q = _heads(x_q @ params[f"{prefix}.wq"], n_heads)
    k = _heads(x_kv @ params[f"{prefix}.wk"], n_heads)
    v = _heads(x_kv @ params[f"{prefix}.wv"], n_heads)
    mask = None if key_mask is None else key_mask[:, None, None, :]
    return _merge_heads(C.scaled_dot_attention(q, k, v, mask)) @ params[f"{prefix}.wo"]


def _ffn(params, prefix, x):
    hdn = C.gelu(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    return hdn @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def _ln(params, prefix, x):
    return C.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def encoder_block(params, prefix, x, key_mask, n_heads):
    y = _ln(params, f"{prefix}.ln1", x)
    x = x + attention(params, f"{prefix}.attn", y, y, key_mask, n_heads)
    return x + _ffn(params, f"{prefix}.ffn", _ln(params, f"{prefix}.ln2", x))


def decoder_block(params, prefix, query, memory, mem_mask, n_heads):
    # a single BOS query: self-attention would be the identity mixture, so it is skipped
    y = _ln(params, f"{prefix}.ln1", query)
    query = query + attention(params, f"{prefix}.attn", y, memory, mem_mask, n_heads)
    return query + _ffn(params, f"{prefix}.ffn", _ln(params, f"{prefix}.ln2", query))


def _text_stack(params, cfg, x, mask):
    # rows with every key masked would make softmax undefined; they are ignored downstream
    attn_mask = mask.copy()
    attn_mask[~attn_mask.any(axis=1), 0] = True
    for i in range(cfg.n_text_layers):
        x = encoder_block(params, f"text.layer{i}", x, attn_mask, cfg.n_heads)
    return _ln(params, "text.ln_f", x)


def _text_inputs(params, ids):
    ids = np.asarray(ids)
    return C.embedding(params["text.tok_emb"], ids) + params["text.pos_emb"][: ids.shape[1]]


def encode_text_batch(params, cfg, ids, mask):
    """``ids``/``mask`` are ``[B, L]``; returns hidden states ``[B, L, H]``."""
    return _text_stack(params, cfg, _text_inputs(params, ids), mask)


def encode_visual_batch(params, cfg, patches):
    """``patches`` is ``[B, n_patches, visual_feat_dim]``; returns projected ``[B, P, H]``."""
    patches = np.asarray(patches)
    if patches.ndim != 3 or patches.shape[1:] != (cfg.n_patches, cfg.visual_feat_dim):
        raise C.DimensionError(
            f"expected patches of shape [*, {cfg.n_patches}, {cfg.visual_feat_dim}], got {patches.shape}")
    x = C.as_tensor(patches.astype(C.default_dtype())) @ params["visual.w_in"] + params["visual.b_in"]
    x = x + params["visual.pos_emb"]
    for i in range(cfg.n_visual_layers):
        x = encoder_block(params, f"visual.layer{i}", x, None, cfg.n_heads)
    x = _ln(params, "visual.ln_f", x)
    return x @ params["projector.w"] + params["projector.b"]


def decode_batch(params, cfg, blocks):
    """FiD decoding over memory blocks ``[(hidden [B,S,H], mask [B,S]), ...]`` -> unit ``[B, E]``."""
    if not blocks:
        raise EmptyModalityError("fusion decoder needs at least one feature block")
    if len(blocks) == 1:
        memory, mask = blocks[0]
    else:
        memory = C.concat([b[0] for b in blocks], axis=1)
        mask = np.concatenate([b[1] for b in blocks], axis=1)
    n = memory.shape[0]
    query = C.reshape(params["decoder.bos"], (1, 1, cfg.hidden_dim)) + np.zeros((n, 1, cfg.hidden_dim), C.default_dtype())
    for i in range(cfg.n_decoder_layers):
        query = decoder_block(params, f"decoder.layer{i}", query, memory, mask, cfg.n_heads)
    state = _ln(params, "decoder.ln_f", query)
    return C.l2_normalize(C.reshape(state, (n, cfg.hidden_dim)) @ params["head.w"])


def _masked_mean(x, mask):
    w = (mask / mask.sum(axis=1, keepdims=True)).astype(C.default_dtype())[:, :, None]
    return C.tsum(x * w, axis=1)


def _pool_head(params, x, mask):
    return C.l2_normalize(_masked_mean(x, mask) @ params["head.w"])


# batching


@dataclass
class Batch:
    text_ids: np.ndarray  # [n_text, L] for the rows listed in text_rows
    text_mask: np.ndarray
    text_rows: np.ndarray
    patches: np.ndarray  # [n_vis, P, F] for visual_rows
    visual_rows: np.ndarray
    size: int

    @property
    def has_text(self):
        m = np.zeros(self.size, bool)
        m[self.text_rows] = True
        return m

    @property
    def has_visual(self):
        m = np.zeros(self.size, bool)
        m[self.visual_rows] = True
        return m


def text_stream(item):
    """Token sequence routed through the text encoder (body and/or caption)."""
    toks = []
    if getattr(item, "text_tokens", None) is not None:
        toks.extend(item.text_tokens)
    if getattr(item, "caption_tokens", None) is not None:
        toks.extend(item.caption_tokens)
    return toks


def collate(items, cfg: ModelConfig) -> Batch:
    streams = [text_stream(it)[: cfg.max_text_len] for it in items]
    text_rows = np.array([i for i, s in enumerate(streams) if s], dtype=np.int64)
    visual_rows = np.array([i for i, it in enumerate(items) if getattr(it, "visual_patches", None) is not None],
                           dtype=np.int64)
    for i, it in enumerate(items):
        if not streams[i] and getattr(it, "visual_patches", None) is None:
            raise EmptyModalityError(f"item {getattr(it, 'id', i)!r} has no modality present")
    width = max((len(streams[i]) for i in text_rows), default=0)
    ids = np.zeros((len(text_rows), width), dtype=np.int64)
    mask = np.zeros((len(text_rows), width), dtype=bool)
    for r, i in enumerate(text_rows):
        s = streams[i]
        if min(s) < 0 or max(s) >= cfg.vocab_size:
            raise IndexError(f"token id out of range [0, {cfg.vocab_size}) in item {getattr(items[i], 'id', i)!r}")
        ids[r, : len(s)] = s
        mask[r, : len(s)] = True
    if len(visual_rows):
        patches = np.stack([np.asarray(items[i].visual_patches, dtype=np.float64) for i in visual_rows])
    else:
        patches = np.zeros((0, cfg.n_patches, cfg.visual_feat_dim))
    return Batch(ids, mask, text_rows, patches, visual_rows, len(items))


class BatchEmbeddings(NamedTuple):
    fused: Tensor  # [B, E]
    visual: Tensor | None  # rows valid where has_visual
    text: Tensor | None  # rows valid where has_text
    has_visual: np.ndarray
    has_text: np.ndarray


def _rows(positions, subset):
    """Index of each element of ``subset`` inside ``positions``."""
    lookup = {int(p): k for k, p in enumerate(positions)}
    return np.array([lookup[int(s)] for s in subset], dtype=np.int64)


def embed_batch(params, cfg: ModelConfig, batch: Batch, singles=True) -> BatchEmbeddings:
    """Fused (and optionally single-modality) embeddings for every row of ``batch``.

    Single-modality rows take their fused embedding directly from the
    single-modality path, so stripping a modality from an item reproduces
    the other modality's embedding exactly.
    """
    n = batch.size
    if n == 0:
        raise EmptyModalityError("cannot embed an empty batch")
    has_t, has_v = batch.has_text, batch.has_visual
    both = has_t & has_v
    mm_rows = np.nonzero(both)[0]
    t_rows, v_rows = batch.text_rows, batch.visual_rows
    if not singles:
        t_rows = np.nonzero(has_t & ~has_v)[0]
        v_rows = np.nonzero(has_v & ~has_t)[0]
    strategy = cfg.fusion_strategy

    txt_sel = _rows(batch.text_rows, t_rows)
    vis_sel = _rows(batch.visual_rows, v_rows)
    mm_t = _rows(batch.text_rows, mm_rows)
    mm_v = _rows(batch.visual_rows, mm_rows)

    e_v = encode_visual_batch(params, cfg, batch.patches) if len(batch.visual_rows) else None

    if strategy == "early":
        tok = _text_inputs(params, batch.text_ids) if len(batch.text_rows) else None
        x_t = x_v = x_mm = None
        if len(t_rows):
            x_t = _pool_head(params, _text_stack(params, cfg, tok[txt_sel], batch.text_mask[txt_sel]),
                             batch.text_mask[txt_sel])
        if len(v_rows):
            vmask = np.ones((len(v_rows), cfg.n_patches), bool)
            x_v = _pool_head(params, _text_stack(params, cfg, e_v[vis_sel], vmask), vmask)
        if len(mm_rows):
            jmask = np.concatenate([np.ones((len(mm_rows), cfg.n_patches), bool), batch.text_mask[mm_t]], axis=1)
            joint = C.concat([e_v[mm_v], tok[mm_t]], axis=1)
            x_mm = _pool_head(params, _text_stack(params, cfg, joint, jmask), jmask)
    else:
        e_t = encode_text_batch(params, cfg, batch.text_ids, batch.text_mask) if len(batch.text_rows) else None
        if strategy == "fid":
            x_t = decode_batch(params, cfg, [(e_t[txt_sel], batch.text_mask[txt_sel])]) if len(t_rows) else None
            vones = lambda k: np.ones((k, cfg.n_patches), bool)  # noqa: E731
            x_v = decode_batch(params, cfg, [(e_v[vis_sel], vones(len(v_rows)))]) if len(v_rows) else None
            x_mm = None
            if len(mm_rows):
                x_mm = decode_batch(params, cfg, [(e_v[mm_v], vones(len(mm_rows))),
                                                  (e_t[mm_t], batch.text_mask[mm_t])])
        else:  # late
            x_t = _pool_head(params, e_t[txt_sel], batch.text_mask[txt_sel]) if len(t_rows) else None
            x_v = (C.l2_normalize(C.mean(e_v[vis_sel], axis=1) @ params["head.w"]) if len(v_rows) else None)
            x_mm = None
            if len(mm_rows):
                a = x_t[_rows(t_rows, mm_rows)] if singles else _pool_head(params, e_t[mm_t], batch.text_mask[mm_t])
                b = x_v[_rows(v_rows, mm_rows)] if singles else C.l2_normalize(C.mean(e_v[mm_v], axis=1) @ params["head.w"])
                x_mm = C.l2_normalize(a + b)

    parts = []
    t_only = np.nonzero(has_t & ~has_v)[0]
    v_only = np.nonzero(has_v & ~has_t)[0]
    if len(t_only):
        parts.append(C.scatter_rows(x_t[_rows(t_rows, t_only)], t_only, n))
    if len(v_only):
        parts.append(C.scatter_rows(x_v[_rows(v_rows, v_only)], v_only, n))
    if len(mm_rows):
        parts.append(C.scatter_rows(x_mm, mm_rows, n))
    fused = parts[0]
    for p in parts[1:]:
        fused = fused + p
    if not singles:
        return BatchEmbeddings(fused, None, None, has_v, has_t)
    full_t = C.scatter_rows(x_t, t_rows, n) if len(t_rows) else None
    full_v = C.scatter_rows(x_v, v_rows, n) if len(v_rows) else None
    return BatchEmbeddings(fused, full_v, full_t, has_v, has_t)


# single-item API


def encode_text(tokens, params, cfg: ModelConfig) -> EncodedFeatures:
    tokens = list(tokens)
    if not tokens:
        raise EmptyModalityError("empty text sequence")
    if len(tokens) > cfg.max_text_len:
        raise C.DimensionError(f"text longer than max_text_len={cfg.max_text_len}")
    if min(tokens) < 0 or max(tokens) >= cfg.vocab_size:
        raise IndexError("token id outside the vocabulary")
    ids = np.asarray(tokens, dtype=np.int64)[None, :]
    h = encode_text_batch(params, cfg, ids, np.ones(ids.shape, bool))
    return EncodedFeatures(C.reshape(h, h.shape[1:]), "text")


def encode_visual(patches, params, cfg: ModelConfig) -> EncodedFeatures:
    patches = np.asarray(patches)
    if patches.shape != (cfg.n_patches, cfg.visual_feat_dim):
        raise C.DimensionError(f"expected patches [{cfg.n_patches}, {cfg.visual_feat_dim}], got {patches.shape}")
    h = encode_visual_batch(params, cfg, patches[None])
    return EncodedFeatures(C.reshape(h, h.shape[1:]), "visual")


def fuse_decode(features, params, cfg: ModelConfig) -> Tensor:
    """Decode a list of encoded blocks (any order) into one unit embedding."""
    if not features:
        raise EmptyModalityError("fuse_decode needs at least one feature block")
    blocks = []
    for f in features:
        hid = f.hidden
        blocks.append((C.reshape(hid, (1,) + hid.shape), np.ones((1, hid.shape[0]), bool)))
    out = decode_batch(params, cfg, blocks)
    return C.reshape(out, (cfg.embed_dim,))


def embed_item(item, params, cfg: ModelConfig) -> Tensor:
    emb = embed_batch(params, cfg, collate([item], cfg), singles=False).fused
    return C.reshape(emb, (cfg.embed_dim,))


def single_modality_embeddings(item, params, cfg: ModelConfig):
    """``(x_visual, x_text)`` with ``None`` for an absent modality."""
    out = embed_batch(params, cfg, collate([item], cfg), singles=True)
    xv = C.reshape(out.visual, (cfg.embed_dim,)) if out.has_visual[0] else None
    xt = C.reshape(out.text, (cfg.embed_dim,)) if out.has_text[0] else None
    return xv, xt


def embed_items(items, params, cfg: ModelConfig, batch_size=256) -> np.ndarray:
    """Inference-only fused embeddings as a float32 ``[len(items), E]`` array."""
    out = np.zeros((len(items), cfg.embed_dim), dtype=np.float32)
    with C.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start: start + batch_size]
            out[start: start + len(chunk)] = embed_batch(params, cfg, collate(chunk, cfg), singles=False).fused.data
    return out


# checkpoint file: "MMCK", u32 version, u32 count, then per tensor
# {u16 name length, utf-8 name, u8 rank, u32 extents..., little-endian f32 payload}

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 1


def save_checkpoint(path, params):
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(getattr(params[name], "data", params[name]), dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path, requires_grad=True) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        off = 12
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off: off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if off + nbytes > len(buf):
                raise CheckpointFormatError(f"tensor {name!r} payload truncated")
            arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).astype(np.float32)
            off += nbytes
            params[name] = Tensor(arr, requires_grad=requires_grad, name=name)
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated checkpoint: {exc}") from None
    if off != len(buf):
        raise CheckpointFormatError("trailing bytes after the declared tensor count")
    return params
