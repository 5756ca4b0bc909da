"""
Where do the modalities land?
=============================

Train the fusion-in-decoder model and the late-fusion baseline identically and
compare how their visual and caption embeddings of the same image relate.
"""
import numpy as np

from fusionret import data, diagnostics, model, training

ds = data.generate(data.preset("webqa-like"))

for strategy in ("fid", "late"):
    cfg = training.benchmark_config(max_steps=600, eval_every=120, early_stop_patience=50,
                                    fusion_strategy=strategy)
    mcfg = training.model_config_for(model.ModelConfig(), cfg)
    params, _ = training.train_stage(ds, cfg, mcfg)

    sets = diagnostics.embedding_set(params, mcfg, ds.corpus)
    sims = diagnostics.cross_modal_similarity(sets, np.random.default_rng(0))
    over = diagnostics.neighborhood_overlap(sets, k=5, rng=np.random.default_rng(0))
    spread = diagnostics.dispersion_report(sets.visual)

    print(f"\n== {strategy} ==")
    print("\n".join(diagnostics.value_lines(sims)))
    print(f"overlap@5 over {over.sample_size} images: {over.mean_overlap:.3f}")
    print("visual-only cloud:", {k: round(v, 3) for k, v in spread.items()})

    proj = diagnostics.project_2d(sets.visual)
    print("first PCA coordinates:", np.round(proj.coords[:3], 3).tolist())
