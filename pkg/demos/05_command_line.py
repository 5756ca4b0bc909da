"""
The same pipeline from the command line
=======================================

Each step below is one ``fusionret`` invocation; here they run in-process
through ``cli.run`` and write into a temporary directory.
"""
import tempfile
from pathlib import Path

from fusionret import cli

work = Path(tempfile.mkdtemp())
steps = [
    ["gen", "--preset", "webqa-like", "--out", str(work / "data"), "--seed", "0"],
    ["train", "--data", str(work / "data/dataset.jsonl"), "--out", str(work / "model.ckpt"),
     "--set", "max_steps=200", "--set", "tau=0.1", "--set", "weight_decay=1.0"],
    ["encode", "--ckpt", str(work / "model.ckpt"), "--data", str(work / "data/dataset.jsonl"),
     "--out", str(work / "emb"), "--roles"],
    ["eval", "--emb-queries", str(work / "emb/queries.mmeb"), "--emb-docs", str(work / "emb/docs.mmeb"),
     "--judgments", str(work / "emb/judgments.jsonl"), "--out", str(work / "metrics.csv")],
    ["diag", "--emb", *(str(work / f"emb/{role}.mmeb") for role in ("visual", "caption", "fused", "text")),
     "--out", str(work / "diag")],
]
for argv in steps:
    print("$ fusionret", " ".join(argv))
    code = cli.run(argv)
    assert code == 0, code

print("\nartifacts:")
for p in sorted(work.rglob("*")):
    if p.is_file():
        print(" ", p.relative_to(work), p.stat().st_size, "bytes")
print((work / "diag/diagnostics.csv").read_text())
