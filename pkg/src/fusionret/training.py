"""Contrastive training with single-modality mixin, caption dropout and ANCE."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import compute as C
from .compute import Tensor
from .index import mine_hard_negatives, retrieve
from .metrics import evaluate_run, judgments_for
from .model import ModelConfig, collate, embed_batch, embed_items, init_params

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")
SCHEDULES = ("constant", "cosine")


class EmptyBatchError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.01
    alpha_bar: float = 0.1
    caption_ratio: float = 0.5
    batch_size: int = 32
    learning_rate: float = 2e-3
    max_epochs: int = 400
    max_steps: int = 2000
    eval_every: int = 100
    early_stop_patience: int = 5
    seed: int = 0
    fusion_strategy: str = "fid"
    lr_schedule: str = "cosine"
    optimizer: str = "adam"
    weight_decay: float = 0.0
    eval_k: int = 5
    hard_negative_top_n: int = 100
    hard_negatives_per_modality: int = 1
    stage2: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if not 0.0 <= self.alpha_bar < 1.0:
            raise ConfigError("alpha_bar must lie in [0, 1)")
        if not 0.0 <= self.caption_ratio <= 1.0:
            raise ConfigError("caption_ratio must lie in [0, 1]")
        for name in ("batch_size", "max_epochs", "max_steps", "eval_every", "early_stop_patience", "eval_k",
                     "hard_negative_top_n"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {SCHEDULES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.fusion_strategy not in ("fid", "early", "late"):
            raise ConfigError("fusion_strategy must be fid, early or late")


# Overrides used for the synthetic benchmarks.  Encoders trained from scratch at
# this scale overfit badly at tau=0.01; a softer temperature and decay fix that.
BENCHMARK_OVERRIDES = {"tau": 0.1, "weight_decay": 1.0}


def benchmark_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**BENCHMARK_OVERRIDES, **overrides})


class MixinDraw(NamedTuple):
    alpha: float
    delta: int


# loss


def contrastive_loss(q_embs, d_embs, tau):
    """In-batch InfoNCE: document row ``i`` is the positive of query ``i``.

    ``d_embs`` may carry extra rows after the first ``N`` (shared hard
    negatives); they only enter the denominators.
    """
    q_embs, d_embs = C.as_tensor(q_embs), C.as_tensor(d_embs)
    n = q_embs.shape[0]
    if n == 0:
        raise EmptyBatchError("contrastive loss over an empty batch")
    if d_embs.shape[0] < n:
        raise C.DimensionError("need at least one document row per query")
    logits = C.matmul(q_embs, C.transpose(d_embs, (1, 0))) * (1.0 / tau)
    logp = C.log_softmax(logits, axis=1)
    diag = np.arange(n)
    return -C.mean(logp[diag, diag])


# mixin


def sample_mixin(rng, alpha_bar) -> MixinDraw:
    if not 0.0 <= alpha_bar < 1.0:
        raise ValueError("alpha_bar must lie in [0, 1)")
    alpha = float(rng.uniform(0.0, alpha_bar))
    delta = int(rng.integers(0, 2))
    return MixinDraw(alpha, delta)


def mixin_vector(x, xv, xt, draw: MixinDraw):
    """Convex mix of the fused embedding with one single-modality embedding, before normalization."""
    single = xv if draw.delta == 1 else xt
    return (1.0 - draw.alpha) * C.as_tensor(x) + draw.alpha * C.as_tensor(single)


def mixin(x, xv, xt, draw: MixinDraw, multimodal=True):
    """Mixed and re-normalized embedding; single-modal items pass through."""
    if not multimodal:
        return x
    if xv is None or xt is None:
        raise RuntimeError("multimodal item is missing a single-modality embedding")
    if draw.alpha == 0.0:
        return x
    return C.l2_normalize(mixin_vector(x, xv, xt, draw))


def mixin_batch(out, draws):
    """Apply per-row ``draws`` to the multimodal rows of a ``BatchEmbeddings``."""
    both = out.has_visual & out.has_text
    rows = np.array([i for i in np.nonzero(both)[0] if draws[i].alpha > 0.0], dtype=np.int64)
    if len(rows) == 0:
        return out.fused
    alpha = np.array([draws[i].alpha for i in rows])
    delta = np.array([draws[i].delta for i in rows], dtype=float)
    dt = C.default_dtype()
    cx = (1.0 - alpha)[:, None].astype(dt)
    cv = (alpha * delta)[:, None].astype(dt)
    ct = (alpha * (1.0 - delta))[:, None].astype(dt)
    mixed = C.l2_normalize(out.fused[rows] * cx + out.visual[rows] * cv + out.text[rows] * ct)
    keep = np.ones((out.fused.shape[0], 1), dtype=dt)
    keep[rows] = 0.0
    return out.fused * keep + C.scatter_rows(mixed, rows, out.fused.shape[0])


# caption dropout


def apply_caption_dropout(items, caption_ratio, rng):
    """Each captioned image item keeps its caption with probability ``caption_ratio``."""
    if not 0.0 <= caption_ratio <= 1.0:
        raise ValueError("caption_ratio must lie in [0, 1]")
    out = []
    for it in items:
        if getattr(it, "visual_patches", None) is not None and getattr(it, "caption_tokens", None) is not None:
            if rng.random() >= caption_ratio:
                it = dataclasses.replace(it, caption_tokens=None)
        out.append(it)
    return out


# optimisation


class Optimizer:
    def __init__(self, params, kind="adam", weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.kind = kind
        self.weight_decay = weight_decay
        self.betas, self.eps = betas, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        self.t += 1
        b1, b2 = self.betas
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            if self.kind == "sgd":
                upd = g + self.weight_decay * p.data if self.weight_decay else g
                p.data -= (lr * upd).astype(p.data.dtype)
            else:
                m, v = self.m[name], self.v[name]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                mhat = m / (1 - b1**self.t)
                vhat = v / (1 - b2**self.t)
                upd = mhat / (np.sqrt(vhat) + self.eps)
                if self.weight_decay:
                    upd = upd + self.weight_decay * p.data
                p.data -= (lr * upd).astype(p.data.dtype)


def learning_rate_at(cfg: TrainConfig, step, total):
    if cfg.lr_schedule == "constant" or total <= 1:
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


# training loop


@dataclass
class TrainingLog:
    records: list = dataclasses.field(default_factory=list)
    best_step: int = 0
    best_metric: float = float("-nan")
    stopped_early: bool = False

    @property
    def losses(self):
        return [r["loss"] for r in self.records if "loss" in r]

    def evaluations(self):
        return [(r["step"], r["val_metric"]) for r in self.records if "val_metric" in r]

    def to_lines(self):
        return [json.dumps(r, sort_keys=True) for r in self.records]


class Streams:
    """Independent RNG streams per random decision, all derived from one seed."""

    NAMES = ("shuffle", "positives", "dropout", "mixin", "mining")

    def __init__(self, seed, stage=0):
        children = np.random.SeedSequence([seed, stage]).spawn(len(self.NAMES))
        for name, child in zip(self.NAMES, children):
            setattr(self, name, np.random.default_rng(child))


def clone_params(params, requires_grad=True):
    return {k: Tensor(p.data.copy(), requires_grad=requires_grad, name=k) for k, p in params.items()}


def model_config_for(model_cfg: ModelConfig, cfg: TrainConfig):
    return replace(model_cfg, fusion_strategy=cfg.fusion_strategy)


def validation_metric(params, mcfg, dataset, k=5, queries=None):
    queries = dataset.valid if queries is None else queries
    if not queries:
        return float("nan")
    runs = retrieve(params, mcfg, queries, dataset.corpus, k=max(k, 1))
    return evaluate_run(runs, judgments_for(queries), ks=(k,), rank_ks=()).get("R", k)


def batch_loss(params, mcfg, cfg, queries, docs, streams, n_pos):
    """Loss for one batch: dropout -> embed -> mixin -> InfoNCE.  ``docs[:n_pos]`` are the positives."""
    queries = apply_caption_dropout(queries, cfg.caption_ratio, streams.dropout)
    docs = apply_caption_dropout(docs, cfg.caption_ratio, streams.dropout)
    items = list(queries) + list(docs)
    need_single = cfg.alpha_bar > 0
    out = embed_batch(params, mcfg, collate(items, mcfg), singles=need_single)
    if need_single:
        both = out.has_visual & out.has_text
        draws = [sample_mixin(streams.mixin, cfg.alpha_bar) if both[i] else MixinDraw(0.0, 0)
                 for i in range(len(items))]
        emb = mixin_batch(out, draws)
    else:
        emb = out.fused
    nq = len(queries)
    return contrastive_loss(emb[:nq], emb[nq:], cfg.tau)


def _plan_batches(n, batch_size):
    starts = list(range(0, n, batch_size))
    # a trailing singleton batch carries no negatives
    if len(starts) > 1 and n - starts[-1] < 2:
        starts.pop()
    return starts


def train_stage(dataset, cfg: TrainConfig, model_cfg: ModelConfig | None = None, hard_negatives=None,
                params=None, stage=0, log_path=None, eval_at_start=True):
    """One contrastive training stage with validation-based early stopping.

    Returns the parameters of the best validation evaluation and the log.
    """
    model_cfg = model_config_for(model_cfg or ModelConfig(), cfg)
    train = [q for q in dataset.train if q.positives]
    if len(train) < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} training queries, have {len(train)}")
    docs = dataset.doc_by_id()
    params = init_params(model_cfg, seed=cfg.seed) if params is None else clone_params(params)
    opt = Optimizer(params, cfg.optimizer, cfg.weight_decay)
    streams = Streams(cfg.seed, stage)
    tlog = TrainingLog()
    starts = _plan_batches(len(train), cfg.batch_size)
    total = min(cfg.max_steps, cfg.max_epochs * len(starts))

    best = None
    bad_evals = 0
    step = 0

    def evaluate():
        nonlocal best, bad_evals
        with C.no_grad():
            metric = validation_metric(params, model_cfg, dataset, cfg.eval_k)
        tlog.records.append({"step": step, "val_metric": metric})
        if best is None or metric > tlog.best_metric:
            best = {k: p.data.copy() for k, p in params.items()}
            tlog.best_metric, tlog.best_step = metric, step
            bad_evals = 0
        else:
            bad_evals += 1
        return bad_evals >= cfg.early_stop_patience

    if eval_at_start and dataset.valid and evaluate():
        tlog.stopped_early = True

    done = tlog.stopped_early
    for _epoch in range(cfg.max_epochs):
        if done:
            break
        order = streams.shuffle.permutation(len(train))
        for s in starts:
            if step >= total:
                done = True
                break
            qs = [train[i] for i in order[s: s + cfg.batch_size]]
            pos = []
            for q in qs:
                pids = sorted(q.positives)
                pos.append(docs[pids[int(streams.positives.integers(len(pids)))]])
            batch_docs = list(pos)
            if hard_negatives:
                taken = set().union(*(q.positives for q in qs))
                for q in qs:
                    for did in hard_negatives.get(q.id, ()):
                        if did not in taken:
                            taken.add(did)
                            batch_docs.append(docs[did])
            lr = learning_rate_at(cfg, step, total)
            opt.zero_grad()
            try:
                loss = batch_loss(params, model_cfg, cfg, qs, batch_docs, streams, len(pos))
                loss_value = float(loss.data)
                if not math.isfinite(loss_value):
                    raise FloatingPointError("non-finite loss")
                loss.backward()
            except FloatingPointError as exc:
                diag = {
                    "step": step,
                    "lr": lr,
                    "query_ids": [q.id for q in qs],
                    "doc_ids": [d.id for d in batch_docs],
                    "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in params.items()},
                    "last_losses": tlog.losses[-10:],
                    "error": str(exc),
                }
                if log_path:
                    with open(f"{log_path}.diagnostics.json", "w") as fh:
                        json.dump(diag, fh, indent=2, sort_keys=True)
                raise TrainingDivergedError(f"training diverged at step {step}: {exc}", diag) from exc
            opt.step(lr)
            step += 1
            tlog.records.append({"step": step, "loss": loss_value, "lr": lr})
            if dataset.valid and step % cfg.eval_every == 0 and evaluate():
                tlog.stopped_early = True
                done = True
                break

    if dataset.valid and (not tlog.records or tlog.records[-1].get("val_metric") is None) and not tlog.stopped_early:
        evaluate()
    if best is not None:
        for k, p in params.items():
            p.data[...] = best[k]
    if log_path:
        with open(log_path, "w") as fh:
            fh.write("\n".join(tlog.to_lines()) + "\n")
    return params, tlog


def train_two_stage(dataset, cfg: TrainConfig, model_cfg: ModelConfig | None = None, log_prefix=None):
    """In-batch stage, hard-negative mining with the stage-1 model, then an ANCE stage.

    Returns ``(stage1_params, stage2_params, logs)`` where ``logs`` holds both
    training logs and the mined negative map.
    """
    mcfg = model_config_for(model_cfg or ModelConfig(), cfg)
    p1, log1 = train_stage(dataset, cfg, mcfg, stage=0,
                           log_path=f"{log_prefix}.stage1.jsonl" if log_prefix else None)
    logs = {"stage1": log1}
    if not cfg.stage2:
        return p1, clone_params(p1), logs
    negatives = mine(p1, mcfg, dataset, cfg)
    logs["hard_negatives"] = negatives
    p2, log2 = train_stage(dataset, cfg, mcfg, hard_negatives=negatives, params=p1, stage=1,
                           log_path=f"{log_prefix}.stage2.jsonl" if log_prefix else None)
    logs["stage2"] = log2
    return p1, p2, logs


def mine(params, mcfg, dataset, cfg: TrainConfig):
    rng = Streams(cfg.seed).mining
    with C.no_grad():
        return mine_hard_negatives(params, mcfg, dataset.corpus, dataset.train, rng,
                                   top_n=cfg.hard_negative_top_n,
                                   per_modality_k=cfg.hard_negatives_per_modality)


def evaluate_split(params, mcfg, dataset, queries=None, corpus=None, k=100):
    queries = dataset.test if queries is None else queries
    corpus = dataset.corpus if corpus is None else corpus
    with C.no_grad():
        runs = retrieve(params, mcfg, queries, corpus, k=k)
    return evaluate_run(runs, judgments_for(queries))


# flat key = value config files


def _coerce(field, raw):
    typ = field.type if isinstance(field.type, type) else {"float": float, "int": int, "str": str,
                                                            "bool": bool}.get(str(field.type), str)
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(text, overrides=None):
    """Parse ``key = value`` lines into ``(TrainConfig, ModelConfig)``.

    Model keys carry a ``model.`` prefix; unknown keys raise ConfigError.
    """
    tfields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    mfields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    tvals, mvals = {}, {}
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs.append((key, value, f"line {lineno}"))
    for key, value in (overrides or {}).items():
        pairs.append((key, str(value), "override"))
    for key, value, where in pairs:
        if key.startswith("model."):
            name = key[len("model."):]
            if name not in mfields:
                raise ConfigError(f"{where}: unknown key {key!r}")
            mvals[name] = _coerce(mfields[name], value)
        elif key in tfields:
            tvals[key] = _coerce(tfields[key], value)
        else:
            raise ConfigError(f"{where}: unknown key {key!r}")
    tcfg = TrainConfig(**tvals)
    try:
        mcfg = model_config_for(ModelConfig(**mvals), tcfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return tcfg, mcfg


def format_config(tcfg: TrainConfig, mcfg: ModelConfig):
    lines = [f"{k} = {v}" for k, v in dataclasses.asdict(tcfg).items()]
    lines += [f"model.{k} = {v}" for k, v in dataclasses.asdict(mcfg).items() if k != "fusion_strategy"]
    return "\n".join(lines) + "\n"

