"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are repeated in the
terminal summary) or directly with ``python3 tests/test_acceptance.py``.
The learning criteria train real models and take roughly a quarter of an hour
on one CPU core.
"""
import math
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from fusionret import compute as C
from fusionret import data, diagnostics, index, metrics, model, training
from fusionret.compute import Tensor
from fusionret.data import Document

RESULTS = {}


def record(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    return ok


def unit(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# 1. gradient suite


def _kernels(rng):
    """(name, fn, inputs) triples covering every differentiable op plus the loss."""
    def t(*shape, positive=False):
        x = rng.standard_normal(shape)
        if positive:
            x = np.abs(x) + 0.5
        return Tensor(x, requires_grad=True)

    mask = np.array([[True, True, False, True], [True, False, True, True]])
    ids = np.array([[0, 3, 3], [1, 2, 0]])
    yield "add", lambda a, b: a + b, [t(3, 4), t(4)]
    yield "sub", lambda a, b: a - b, [t(3, 4), t(3, 1)]
    yield "mul", lambda a, b: a * b, [t(3, 4), t(3, 4)]
    yield "div", lambda a, b: a / b, [t(3, 4), t(3, 4, positive=True)]
    yield "exp", C.exp, [t(3, 4)]
    yield "log", C.log, [t(3, 4, positive=True)]
    yield "sqrt", C.sqrt, [t(3, 4, positive=True)]
    yield "tanh", C.tanh, [t(3, 4)]
    yield "relu", C.relu, [Tensor(rng.choice([-1, 1], (3, 4)) * (0.1 + rng.random((3, 4))), requires_grad=True)]
    yield "gelu", C.gelu, [t(3, 4)]
    yield "sum", lambda a: C.tsum(a, axis=1, keepdims=True), [t(3, 4)]
    yield "mean", lambda a: C.mean(a, axis=0), [t(3, 4)]
    yield "reshape", lambda a: C.reshape(a, (2, 6)), [t(3, 4)]
    yield "transpose", lambda a: C.transpose(a, (2, 0, 1)), [t(2, 3, 4)]
    yield "concat", lambda a, b: C.concat([a, b], axis=1), [t(2, 3), t(2, 2)]
    yield "getitem", lambda a: C.getitem(a, (np.array([0, 2, 2]), slice(1, 3))), [t(3, 4)]
    yield "scatter_rows", lambda a: C.scatter_rows(a, np.array([4, 1, 3]), 5), [t(3, 2)]
    yield "embedding", lambda w: C.embedding(w, ids), [t(4, 3)]
    yield "matmul", C.matmul, [t(2, 3, 4), t(2, 4, 5)]
    yield "softmax", lambda a: C.softmax(a, axis=1, mask=mask), [t(2, 4)]
    yield "log_softmax", lambda a: C.log_softmax(a, axis=-1), [t(3, 5)]
    yield "layer_norm", C.layer_norm, [t(3, 6), t(6), t(6)]
    yield "l2_normalize", C.l2_normalize, [t(3, 4)]
    yield "attention", lambda q, k, v: C.scaled_dot_attention(q, k, v, mask=mask[:, None, :]), \
        [t(2, 3, 4), t(2, 4, 4), t(2, 4, 4)]
    yield "mixin", lambda x, v, w: training.mixin(x, v, w, training.MixinDraw(0.07, 1)), \
        [Tensor(unit(rng.standard_normal(5)), requires_grad=True), Tensor(unit(rng.standard_normal(5)),
                                                                          requires_grad=True), t(5)]
    yield "contrastive_loss", lambda q, d: training.contrastive_loss(C.l2_normalize(q), C.l2_normalize(d), 0.01), \
        [t(4, 6), t(6, 6)]


def criterion_1():
    t0 = time.perf_counter()
    worst, worst_name, count = 0.0, "", 0
    with C.precision(np.float64):
        for seed in range(10):
            for name, fn, inputs in _kernels(np.random.default_rng(seed)):
                rep = C.check_gradients(fn, inputs, step=1e-5)
                count += 1
                if rep["max_error"] >= worst:
                    worst, worst_name = rep["max_error"], name
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 30
    return record(1, ok, f"{count} checks over 10 seeds, max rel err {worst:.2e} ({worst_name}) < 1e-5, "
                         f"{elapsed:.1f}s < 30s")


# 2. loss identities


def criterion_2():
    with C.precision(np.float64):
        v = unit(np.random.default_rng(0).standard_normal((1, 8)))
        single = float(training.contrastive_loss(v, v, 0.01).data) + 0.0
        errs = {}
        for n in (2, 8, 64):
            q = np.tile(unit(np.arange(1.0, 9.0)), (n, 1))
            errs[n] = abs(float(training.contrastive_loss(q, q, 0.01).data) - math.log(n))
    ok = single == 0.0 and max(errs.values()) <= 1e-6
    return record(2, ok, f"N=1 loss {abs(single)!r} (exact 0); |loss-ln N| max {max(errs.values()):.1e} <= 1e-6 "
                         f"for N in 2,8,64")


# 3. mixin algebra


def criterion_3():
    rng = np.random.default_rng(0)
    ident = True
    for _ in range(200):
        x, xv, xt = (Tensor(unit(rng.standard_normal(8)).astype(np.float32)) for _ in range(3))
        out = training.mixin(x, xv, xt, training.MixinDraw(0.0, int(rng.integers(2))))
        ident &= np.array_equal(out.data, x.data)
    cfg = model.ModelConfig(hidden_dim=16, embed_dim=8)
    params = model.init_params(cfg, seed=0)
    items = [Document(f"d{i}", text_tokens=[1, 2, i + 3], caption_tokens=[4], visual_patches=rng.standard_normal((4, 16)))
             for i in range(4)]
    with C.no_grad():
        be = model.embed_batch(params, cfg, model.collate(items, cfg))
        ident &= np.array_equal(training.mixin_batch(be, [training.MixinDraw(0.0, 1)] * 4).data, be.fused.data)

    worst = 0.0
    with C.precision(np.float64):
        for _ in range(10_000):
            x, xv, xt = unit(rng.standard_normal((3, 6)))
            draw = training.sample_mixin(rng, 0.9)
            pre = training.mixin_vector(x, xv, xt, draw).data
            worst = max(worst, np.linalg.norm(pre) - 1.0)
    convex = worst <= 1e-12

    n, abar = 100_000, 0.1
    draws = [training.sample_mixin(rng, abar) for _ in range(n)]
    a = np.array([d.alpha for d in draws])
    dl = np.array([d.delta for d in draws])
    z_a = abs(a.mean() - abar / 2) / (abar / math.sqrt(12) / math.sqrt(n))
    z_d = abs(dl.mean() - 0.5) / (0.5 / math.sqrt(n))
    moments = z_a <= 3 and z_d <= 3 and a.min() >= 0 and a.max() <= abar and set(dl) <= {0, 1}
    ok = ident and convex and moments
    return record(3, ok, f"alpha=0 bitwise identity {ident}; max(|x_hat|-1) {worst:.1e} over 1e4 draws; "
                         f"alpha z={z_a:.2f}, delta z={z_d:.2f} (<= 3) over 1e5 draws")


# 4. fusion invariants


def criterion_4():
    rng = np.random.default_rng(0)
    worst_perm = 0.0
    strip_ok, iso_ok = True, True
    for seed in range(5):
        cfg = model.ModelConfig(init_seed=seed)
        params = model.init_params(cfg, seed=seed)
        for _ in range(4):
            tokens = rng.integers(0, cfg.vocab_size, size=int(rng.integers(1, cfg.max_text_len + 1))).tolist()
            patches = rng.standard_normal((cfg.n_patches, cfg.visual_feat_dim))
            ev, et = model.encode_visual(patches, params, cfg), model.encode_text(tokens, params, cfg)
            a = model.fuse_decode([ev, et], params, cfg).data
            b = model.fuse_decode([et, ev], params, cfg).data
            worst_perm = max(worst_perm, float(np.max(np.abs(a - b))))

            doc = Document("d", caption_tokens=tokens, visual_patches=patches)
            for strategy in model.FUSION_STRATEGIES:
                scfg = replace(cfg, fusion_strategy=strategy)
                xv, _ = model.single_modality_embeddings(doc, params, scfg)
                strip_ok &= np.array_equal(model.embed_item(doc.without_caption(), params, scfg).data, xv.data)
                edited = replace(doc, caption_tokens=[(t + 1) % cfg.vocab_size for t in tokens] + [0])
                iso_ok &= np.array_equal(model.single_modality_embeddings(edited, params, scfg)[0].data, xv.data)
            e1 = model.encode_visual_batch(params, cfg, patches[None]).data
            batch = model.collate([doc, replace(doc, caption_tokens=[3])], cfg)
            iso_ok &= np.array_equal(model.encode_visual_batch(params, cfg, batch.patches).data[0], e1[0])
    ok = worst_perm < 1e-5 and strip_ok and iso_ok
    return record(4, ok, f"memory-order max diff {worst_perm:.1e} < 1e-5; caption-stripped == visual-only "
                         f"bitwise {strip_ok}; caption edits leave e^V/x^V unchanged {iso_ok}")


# 5. metric oracle


def _naive(ranking, positives, k):
    rel = [1 if ranking[i] in positives else 0 for i in range(min(k, len(ranking)))]
    first = next((i for i, r in enumerate(rel) if r), None)
    dcg = sum(r / math.log2(i + 2) for i, r in enumerate(rel))
    idcg = sum(1 / math.log2(i + 2) for i in range(min(len(positives), k)))
    return sum(rel) / len(positives), 0.0 if first is None else 1.0 / (first + 1), dcg / idcg


def criterion_5():
    rng = np.random.default_rng(0)
    ks = sorted(set(metrics.RECALL_KS) | set(metrics.RANK_KS))
    worst = 0.0
    for i in range(1000):
        n = int(rng.integers(1, 300))
        docs = [f"d{j}" for j in range(n)]
        ranking = [str(d) for d in rng.permutation(docs)[: int(rng.integers(1, n + 1))]]
        pos = set(rng.choice(docs, size=int(rng.integers(1, min(n, 6) + 1)), replace=False).tolist())
        j = metrics.QueryJudgment(f"q{i}", frozenset(pos))
        for k in ks:
            r, m, g = _naive(ranking, pos, k)
            worst = max(worst, abs(metrics.recall_at_k(ranking, j, k) - r), abs(metrics.mrr_at_k(ranking, j, k) - m),
                        abs(metrics.ndcg_at_k(ranking, j, k) - g))
    hand = metrics.ndcg_at_k(["a", "x", "b"], metrics.QueryJudgment("q", frozenset({"a", "b"})), 3)
    ok = worst <= 1e-12 and f"{hand:.5f}" == "0.91972"
    return record(5, ok, f"1000 lists x k in {ks}: max |diff| {worst:.1e} <= 1e-12; hand NDCG {hand:.5f} == 0.91972")


# 6. index exactness


def criterion_6():
    rng = np.random.default_rng(0)
    exact = True
    for c in range(200):
        n = int(rng.integers(1, 1001))
        d = int(rng.integers(2, 33))
        mat = unit(rng.standard_normal((n, d))).astype(np.float32)
        if c % 10 == 0 and n > 3:  # force exact score ties
            mat[1] = mat[0]
            mat[3] = mat[0]
        ids = [f"doc{j:04d}" for j in rng.permutation(n)]
        idx = index.build(ids, mat)
        k = int(rng.integers(1, n + 1))
        q = unit(rng.standard_normal((3, d))).astype(np.float32)
        for qi, rl in zip(q, idx.search_many(q, k)):
            s = mat.astype(np.float32) @ qi
            order = sorted(range(n), key=lambda j: (-float(s[j]), ids[j]))[:k]
            exact &= rl.doc_ids == [ids[j] for j in order]

    mined_ok = True
    cfg = model.ModelConfig()
    for seed in range(3):
        ds = data.generate(data.preset("webqa-like", seed=seed))
        params = model.init_params(cfg, seed=seed)
        with C.no_grad():
            negs = index.mine_hard_negatives(params, cfg, ds.corpus, ds.train, np.random.default_rng(seed), top_n=100,
                                             per_modality_k=2)
            runs = index.retrieve(params, cfg, ds.train, ds.corpus, k=100)
        mined_ok &= set(negs) == {q.id for q in ds.train}
        for q, rl in zip(ds.train, runs):
            top = set(rl.doc_ids)
            mined_ok &= all(n in top and n not in q.positives for n in negs[q.id])
    ok = exact and mined_ok
    return record(6, ok, f"200 corpora (<=1000 docs) equal full-sort oracle: {exact}; mined negatives are "
                         f"non-positive top-100 members: {mined_ok}")


# 7. end-to-end learning


def _crit7_run():
    t0 = time.perf_counter()
    ds = data.generate(data.preset("webqa-like"))
    mcfg = model.ModelConfig(embed_dim=32)
    cfg = training.benchmark_config(max_steps=2000, eval_every=200, early_stop_patience=5, seed=0)
    untrained = model.init_params(mcfg, seed=cfg.seed)
    before = training.evaluate_split(untrained, mcfg, ds, ds.all_queries(), k=100).get("R", 5)
    params, log = training.train_stage(ds, cfg, mcfg)
    report = training.evaluate_split(params, mcfg, ds, ds.valid, k=100)
    return before, log, report, time.perf_counter() - t0


def criterion_7():
    before, log, rep, secs = _crit7_run()
    _, log2, rep2, _ = _crit7_run()
    ds_meta = data.preset("webqa-like")
    chance = 5 / ds_meta.corpus_size
    after = rep.get("R", 5)
    steps = len(log.losses)
    same = log.to_lines() == log2.to_lines() and rep.lines() == rep2.lines()
    ok = before <= 2 * chance and after >= 0.7 and steps <= 2000 and secs <= 300 and same
    return record(7, ok, f"untrained R@5 {before:.4f} <= {2 * chance:.4f}; val R@5 {after:.3f} >= 0.7 after "
                         f"{steps} steps (best at {log.best_step}); {secs:.0f}s <= 300s; bit-identical rerun {same}")


# 8. caption dropout direction

SEEDS = (0, 1, 2, 3, 4)


def criterion_8():
    wins, rows = 0, []
    for seed in SEEDS:
        ds = data.generate(data.preset("visual-dominant", seed=seed))
        stripped = data.strip_captions(ds.corpus)
        qs = [q for q in ds.valid + ds.test if q.task_tag == "T2I"]
        scores = {}
        for ratio in (0.5, 1.0):
            cfg = training.benchmark_config(max_steps=600, eval_every=120, early_stop_patience=50, seed=seed,
                                            caption_ratio=ratio)
            params, _ = training.train_stage(ds, cfg, model.ModelConfig())
            scores[ratio] = training.evaluate_split(params, model.ModelConfig(), ds, qs, stripped).get("R", 20)
        wins += scores[0.5] > scores[1.0]
        rows.append(f"{scores[0.5]:.3f}>{scores[1.0]:.3f}")
    return record(8, wins >= 4, f"caption-free T2I R@20, ratio 0.5 vs 1.0: {' '.join(rows)}; "
                                f"strictly higher in {wins}/5 seeds (need 4)")


# 9. misalignment direction


def criterion_9():
    wins, rows, sims = 0, [], {"fid": [], "late": []}
    for seed in SEEDS:
        ds = data.generate(data.preset("webqa-like", seed=seed))
        over = {}
        for strategy in ("fid", "late"):
            cfg = training.benchmark_config(max_steps=600, eval_every=120, early_stop_patience=50, seed=seed,
                                            fusion_strategy=strategy)
            mcfg = training.model_config_for(model.ModelConfig(), cfg)
            params, _ = training.train_stage(ds, cfg, mcfg)
            sets = diagnostics.embedding_set(params, mcfg, ds.corpus)
            over[strategy] = diagnostics.neighborhood_overlap(sets, 5, 500, np.random.default_rng(seed)).mean_overlap
            sims[strategy].append(diagnostics.cross_modal_similarity(sets, np.random.default_rng(seed))["sim_IV_IC"])
        wins += over["fid"] > over["late"]
        rows.append(f"{over['fid']:.3f}>{over['late']:.3f}")
    fid_sim, late_sim = float(np.mean(sims["fid"])), float(np.mean(sims["late"]))
    ok = wins >= 4 and late_sim < fid_sim
    return record(9, ok, f"overlap@5 FiD vs late: {' '.join(rows)}; FiD higher in {wins}/5 (need 4); "
                         f"mean s(IV,IC) late {late_sim:.3f} < FiD {fid_sim:.3f}")


# 10. two-stage pipeline


def criterion_10():
    wins, strict, rows, deterministic = 0, 0, [], True
    for seed in SEEDS:
        ds = data.generate(data.preset("webqa-like", seed=seed))
        cfg = training.benchmark_config(max_steps=500, eval_every=100, early_stop_patience=3, seed=seed)
        mcfg = model.ModelConfig()
        p1, p2, logs = training.train_two_stage(ds, cfg, mcfg)
        deterministic &= training.mine(p1, mcfg, ds, cfg) == logs["hard_negatives"]
        r1 = training.validation_metric(p1, mcfg, ds, 5)
        r2 = training.validation_metric(p2, mcfg, ds, 5)
        wins += r2 >= r1
        strict += r2 > r1
        rows.append(f"{r2:.3f}/{r1:.3f}")
    ok = wins >= 4 and deterministic
    return record(10, ok, f"stage-2/stage-1 val R@5: {' '.join(rows)}; stage 2 >= stage 1 in {wins}/5 "
                          f"({strict} strictly); mining deterministic {deterministic}")


# 11. format round trips


def criterion_11(tmp):
    ok_rt, ok_err = True, True
    ds = data.generate(data.GeneratorConfig(n_topics=60, corpus_size=90, n_train=20, n_valid=10, n_test=10,
                                            query_modality_mix=(("T", 0.5), ("TI", 0.5))))
    a, b = tmp / "a.jsonl", tmp / "b.jsonl"
    data.save_dataset(a, ds)
    data.save_dataset(b, data.load_dataset(a))
    ok_rt &= a.read_bytes() == b.read_bytes()

    ids = [f"x{i}" for i in range(9)]
    mat = np.random.default_rng(0).standard_normal((9, 6)).astype(np.float32)
    data.write_embeddings(tmp / "e.mmeb", ids, mat)
    rid, rmat = data.read_embeddings(tmp / "e.mmeb")
    data.write_embeddings(tmp / "f.mmeb", rid, rmat)
    ok_rt &= (tmp / "e.mmeb").read_bytes() == (tmp / "f.mmeb").read_bytes() and rmat.tobytes() == mat.tobytes()

    params = model.init_params(model.ModelConfig(), seed=0)
    model.save_checkpoint(tmp / "m.ckpt", params)
    model.save_checkpoint(tmp / "n.ckpt", model.load_checkpoint(tmp / "m.ckpt"))
    ok_rt &= (tmp / "m.ckpt").read_bytes() == (tmp / "n.ckpt").read_bytes()

    def corrupt(src, dst, offset, value):
        raw = bytearray(src.read_bytes())
        raw[offset: offset + len(value)] = value
        dst.write_bytes(bytes(raw))

    cases = [(tmp / "e.mmeb", data.read_embeddings, data.EmbeddingFormatError),
             (tmp / "m.ckpt", model.load_checkpoint, model.CheckpointFormatError)]
    for src, reader, err in cases:
        for offset, value in ((0, b"XXXX"), (8, b"\xff"), (8, b"\x01")):
            bad = tmp / ("bad" + src.suffix)
            corrupt(src, bad, offset, value)
            try:
                reader(bad)
                ok_err = False
            except err:
                pass
    bad = tmp / "bad.jsonl"
    lines = a.read_text().splitlines()
    bad.write_text(lines[0].replace('"header"', '"heder"') + "\n" + "\n".join(lines[1:]) + "\n")
    try:
        data.load_dataset(bad)
        ok_err = False
    except data.DatasetFormatError:
        pass
    return record(11, ok_rt and ok_err, f"dataset/MMEB/MMCK byte-exact round trips {ok_rt}; corrupted magic and "
                                         f"count fields rejected with format errors {ok_err}")


# pytest entry points


def test_criterion_01_gradients():
    assert criterion_1(), RESULTS[1]


def test_criterion_02_loss_identities():
    assert criterion_2(), RESULTS[2]


def test_criterion_03_mixin_algebra():
    assert criterion_3(), RESULTS[3]


def test_criterion_04_fusion_invariants():
    assert criterion_4(), RESULTS[4]


def test_criterion_05_metric_oracle():
    assert criterion_5(), RESULTS[5]


def test_criterion_06_index_exactness():
    assert criterion_6(), RESULTS[6]


def test_criterion_07_end_to_end_learning():
    assert criterion_7(), RESULTS[7]


def test_criterion_08_caption_dropout_direction():
    assert criterion_8(), RESULTS[8]


def test_criterion_09_fusion_misalignment_direction():
    assert criterion_9(), RESULTS[9]


def test_criterion_10_two_stage():
    assert criterion_10(), RESULTS[10]


def test_criterion_11_format_round_trips(tmp_path):
    assert criterion_11(tmp_path), RESULTS[11]


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    only = {int(a) for a in sys.argv[1:]}
    funcs = {n: globals()[f"criterion_{n}"] for n in range(1, 12)}
    for n, fn in funcs.items():
        if only and n not in only:
            continue
        if n == 11:
            with tempfile.TemporaryDirectory() as d:
                fn(Path(d))
        else:
            fn()
    print("\n".join(RESULTS[n] for n in sorted(RESULTS)))
