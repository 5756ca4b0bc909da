"""Command-line pipelines: gen, train, mine, encode, eval, diag.

Every run writes a JSON manifest next to its main output with the argv,
resolved config, seed, artifact paths and per-phase wall-clock, so the run
can be repeated exactly with ``fusionret <argv...>``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, data, diagnostics, index, metrics, model, training


class CommandError(Exception):
    """Validation failure that maps to exit code 1."""


def _atomic_write(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


class RunManifest:
    def __init__(self, command, argv, seed):
        self.record = {"tool": "fusionret", "version": __version__, "command": command, "argv": list(argv),
                       "seed": seed, "config": {}, "artifacts": {}, "phases": {}}

    def phase(self, name):
        manifest = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                manifest.record["phases"][name] = round(time.perf_counter() - self.t0, 4)

        return _Timer()

    def artifact(self, name, path):
        self.record["artifacts"][name] = str(path)

    def write(self, path):
        _atomic_write(path, json.dumps(self.record, indent=2, sort_keys=True) + "\n")


def _dataset_path(p):
    p = Path(p)
    return p / "dataset.jsonl" if p.is_dir() else p


def _load_data(p):
    return data.load_dataset(_dataset_path(p))


def _sidecar(ckpt):
    return Path(str(ckpt) + ".config")


def _load_model(ckpt):
    side = _sidecar(ckpt)
    if not side.exists():
        raise CommandError(f"missing model config next to checkpoint: {side}")
    tcfg, mcfg = training.parse_config(side.read_text())
    params = model.load_checkpoint(ckpt, requires_grad=False)
    model.validate_params(params, mcfg)
    return params, tcfg, mcfg


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise CommandError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# subcommands


def cmd_gen(args, manifest):
    fields = {f.name: f for f in dataclasses.fields(data.GeneratorConfig)}
    over = {}
    for k, v in _overrides(args.set).items():
        if k not in fields or k in ("doc_modality_mix", "query_modality_mix"):
            raise CommandError(f"unknown or unsupported generator key {k!r}")
        over[k] = type(getattr(data.PRESETS[args.preset], k))(v)
    over["seed"] = args.seed
    cfg = data.preset(args.preset, **over)
    manifest.record["config"] = cfg.to_dict()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with manifest.phase("generate"):
        ds = data.generate(cfg)
    with manifest.phase("write"):
        data.save_dataset(out / "dataset.jsonl", ds)
    manifest.artifact("dataset", out / "dataset.jsonl")
    print(f"wrote {len(ds.corpus)} documents and {len(ds.all_queries())} queries to {out / 'dataset.jsonl'}")
    return out / "manifest.json"


def cmd_train(args, manifest):
    text = Path(args.config).read_text() if args.config else ""
    tcfg, mcfg = training.parse_config(text, _overrides(args.set))
    manifest.record["seed"] = tcfg.seed
    manifest.record["config"] = training.format_config(tcfg, mcfg).splitlines()
    with manifest.phase("load"):
        ds = _load_data(args.data)
    out = Path(args.out)
    log_prefix = str(out)
    if args.stage2 and args.negatives:
        if not args.init:
            raise CommandError("--negatives needs --init with the stage-1 checkpoint")
        negatives = json.loads(Path(args.negatives).read_text())
        init, _, _ = _load_model(args.init)
        init = training.clone_params(init)
        with manifest.phase("stage2"):
            params, log = training.train_stage(ds, tcfg, mcfg, hard_negatives=negatives, params=init, stage=1,
                                               log_path=log_prefix + ".log.jsonl")
        logs = {"stage2": log}
    elif args.stage2:
        with manifest.phase("two_stage"):
            _, params, logs = training.train_two_stage(ds, tcfg, mcfg, log_prefix=log_prefix)
    else:
        init = None
        if args.init:
            init, _, _ = _load_model(args.init)
            init = training.clone_params(init)
        with manifest.phase("stage1"):
            params, log = training.train_stage(ds, tcfg, mcfg, params=init, stage=0,
                                               log_path=log_prefix + ".log.jsonl")
        logs = {"stage1": log}
    model.save_checkpoint(out, params)
    _atomic_write(_sidecar(out), training.format_config(tcfg, mcfg))
    manifest.artifact("checkpoint", out)
    manifest.artifact("model_config", _sidecar(out))
    for name, log in logs.items():
        if isinstance(log, training.TrainingLog):
            manifest.record.setdefault("best", {})[name] = {"step": log.best_step, "val_R@5": log.best_metric}
            print(f"{name}: best validation R@{tcfg.eval_k} = {log.best_metric:.4f} at step {log.best_step}")
    return Path(str(out) + ".manifest.json")


def cmd_mine(args, manifest):
    params, tcfg, mcfg = _load_model(args.ckpt)
    manifest.record["seed"] = tcfg.seed
    manifest.record["config"] = training.format_config(tcfg, mcfg).splitlines()
    ds = _load_data(args.data)
    with manifest.phase("mine"):
        negatives = training.mine(params, mcfg, ds, tcfg)
    _atomic_write(args.out, json.dumps(negatives, indent=1, sort_keys=True) + "\n")
    manifest.artifact("negatives", args.out)
    print(f"mined negatives for {len(negatives)} queries")
    return Path(str(args.out) + ".manifest.json")


def _write_judgments(path, queries):
    lines = [json.dumps({"query_id": q.id, "positives": sorted(q.positives), "task_tag": q.task_tag},
                        sort_keys=True) for q in queries]
    _atomic_write(path, "\n".join(lines) + "\n")


def _read_judgments(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(metrics.QueryJudgment(rec["query_id"], frozenset(rec["positives"]),
                                                 rec.get("task_tag", "mixed")))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CommandError(f"{path}:{lineno}: malformed judgment ({exc})") from None
    return out


def cmd_encode(args, manifest):
    params, tcfg, mcfg = _load_model(args.ckpt)
    manifest.record["seed"] = tcfg.seed
    ds = _load_data(args.data)
    queries = ds.all_queries() if args.split == "all" else ds.splits()[args.split]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with manifest.phase("encode_docs"):
        data.write_embeddings(out / "docs.mmeb", [d.id for d in ds.corpus], model.embed_items(ds.corpus, params, mcfg))
    with manifest.phase("encode_queries"):
        data.write_embeddings(out / "queries.mmeb", [q.id for q in queries], model.embed_items(queries, params, mcfg))
    _write_judgments(out / "judgments.jsonl", queries)
    for name in ("docs", "queries"):
        manifest.artifact(name, out / f"{name}.mmeb")
    manifest.artifact("judgments", out / "judgments.jsonl")
    if args.roles:
        with manifest.phase("encode_roles"):
            sets = diagnostics.embedding_set(params, mcfg, ds.corpus)
        for role in ("visual", "caption", "fused"):
            data.write_embeddings(out / f"{role}.mmeb", sets.ids, getattr(sets, role))
            manifest.artifact(role, out / f"{role}.mmeb")
        data.write_embeddings(out / "text.mmeb", sets.text_ids, sets.text)
        manifest.artifact("text", out / "text.mmeb")
    print(f"encoded {len(ds.corpus)} documents and {len(queries)} {args.split} queries into {out}")
    return out / "manifest.json"


def cmd_eval(args, manifest):
    qids, qmat = data.read_embeddings(args.emb_queries)
    dids, dmat = data.read_embeddings(args.emb_docs)
    judgments = _read_judgments(args.judgments)
    with manifest.phase("search"):
        idx = index.build(dids, dmat)
        runs = idx.search_many(qmat, args.k, qids) if len(qids) else []
    report = metrics.evaluate_run(runs, judgments)
    _atomic_write(args.out, "metric,k,task,value\n" + "\n".join(report.lines()) + "\n")
    manifest.artifact("report", args.out)
    print(report.table())
    return Path(str(args.out) + ".manifest.json")


ROLES = ("visual", "caption", "fused", "text")


def _parse_emb_args(specs):
    roles = {}
    for spec in specs:
        if "=" in spec:
            role, path = spec.split("=", 1)
        else:
            path = spec
            role = Path(spec).stem
        roles[role] = path
    return roles


def cmd_diag(args, manifest):
    files = _parse_emb_args(args.emb)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    loaded = {role: data.read_embeddings(path) for role, path in files.items()}
    values = {}
    rng = np.random.default_rng(args.seed)
    if all(r in loaded for r in ROLES):
        ids = loaded["visual"][0]
        for r in ("caption", "fused"):
            if loaded[r][0] != ids:
                raise CommandError(f"{r} embeddings are not aligned with the visual ones")
        sets = diagnostics.ModalityEmbeddingSet(ids, loaded["visual"][1], loaded["caption"][1], loaded["fused"][1],
                                                loaded["text"][1], loaded["text"][0])
        with manifest.phase("similarity"):
            values.update(diagnostics.cross_modal_similarity(sets, rng))
        with manifest.phase("overlap"):
            for k in args.k:
                rep = diagnostics.neighborhood_overlap(sets, k, args.sample_size, np.random.default_rng(args.seed))
                values[f"overlap@{k}"] = rep.mean_overlap
    with manifest.phase("dispersion"):
        for role, (ids, mat) in loaded.items():
            if len(ids) >= 2:
                for name, v in diagnostics.dispersion_report(mat).items():
                    values[f"{role}.{name}"] = v
            if len(ids) >= 3:
                proj = diagnostics.project_2d(mat)
                values[f"{role}.projection_degenerate"] = float(proj.degenerate)
                path = out / f"coords_{role}.csv"
                _atomic_write(path, "\n".join(diagnostics.coordinate_lines(ids, proj.coords)) + "\n")
                manifest.artifact(f"coords_{role}", path)
    _atomic_write(out / "diagnostics.csv", "\n".join(diagnostics.value_lines(values)) + "\n")
    manifest.artifact("diagnostics", out / "diagnostics.csv")
    for line in diagnostics.value_lines(values):
        print(line)
    return out / "manifest.json"


def build_parser():
    p = argparse.ArgumentParser(prog="fusionret", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fusionret {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--preset", required=True, choices=sorted(data.PRESETS))
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a generator field")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a retriever")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--stage2", action="store_true",
                   help="hard-negative stage; with --init and --negatives continue from a checkpoint, "
                        "otherwise run both stages")
    t.add_argument("--init", help="checkpoint to start from")
    t.add_argument("--negatives", help="mined negatives JSON from `mine`")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("mine", help="mine hard negatives with a checkpoint")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mine)

    e = sub.add_parser("encode", help="write document and query embeddings")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--split", default="test", choices=("train", "valid", "test", "all"))
    e.add_argument("--roles", action="store_true", help="also write per-role image embeddings for `diag`")
    e.set_defaults(func=cmd_encode)

    v = sub.add_parser("eval", help="score query embeddings against document embeddings")
    v.add_argument("--emb-queries", required=True)
    v.add_argument("--emb-docs", required=True)
    v.add_argument("--judgments", required=True)
    v.add_argument("--out", required=True, help="report CSV path")
    v.add_argument("--k", type=int, default=100, help="ranked list depth")
    v.set_defaults(func=cmd_eval)

    d = sub.add_parser("diag", help="embedding-space diagnostics")
    d.add_argument("--emb", required=True, nargs="+", help="ROLE=PATH or PATH (role from file stem)")
    d.add_argument("--out", required=True, help="output directory")
    d.add_argument("--k", type=int, nargs="+", default=[5, 50])
    d.add_argument("--sample-size", type=int, default=500)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_diag)
    return p


def run(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    manifest = RunManifest(args.command, argv, getattr(args, "seed", 0))
    try:
        where = args.func(args, manifest)
        manifest.write(where)
    except (OSError, ValueError, KeyError, CommandError, RuntimeError, metrics.CoverageError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"fusionret {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
