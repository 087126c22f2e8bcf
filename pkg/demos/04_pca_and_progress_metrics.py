"""PCA projections and synthesis-progress metrics.

Embeds a labeled particle set, projects to 2-D, then fabricates a 5-stage
"reaction timeline" in which clusters progressively separate and tighten:
between-class variance and silhouette rise, within-class variance falls.
"""

from pathlib import Path

import numpy as np

from npshape import (ProviderConfig, PreprocSpec, SynthSpec, cluster_metrics,
                     crop_particle, embed_batch, generate_scene,
                     pca_fit_transform, stage_timeline)
from npshape.analyze import projection_to_csv, timeline_to_csv
from npshape.preprocess import PIPELINE_VARIANT, apply_preproc

out = Path(__file__).parent / "output" / "04_analyze"
out.mkdir(parents=True, exist_ok=True)

scene = generate_scene(SynthSpec(
    seed=17, canvas=(768, 768),
    counts={"cube": 9, "pyramid": 8, "circle": 8}))
spec = PreprocSpec("masked_pad_resize")
rasters, labels, ids = [], [], []
for rec in scene.masks:
    rasters.append(apply_preproc(
        crop_particle(scene.image, rec, PIPELINE_VARIANT[spec.pipeline]), spec))
    labels.append(scene.labels[rec.id])
    ids.append(rec.id)
mat = embed_batch(rasters, ProviderConfig.toy(), ids)

proj = pca_fit_transform(mat.rows)
projection_to_csv(proj, ids, labels, out / "pca.csv")
print(f"PCA: explained variance {np.round(proj.explained_variance, 4)} "
      f"-> {out / 'pca.csv'}")

metrics = cluster_metrics(mat.rows, labels)
print(f"embedding space: between={metrics.between_class_variance:.4f} "
      f"within={metrics.within_class_variance:.4f} "
      f"silhouette={metrics.silhouette:.4f}")

# A stylized reaction: shapes crystallize over five stages.
rng = np.random.default_rng(3)
k, per = 3, 12
centers = rng.normal(size=(k, 8))
centers /= np.linalg.norm(centers, axis=1, keepdims=True)
offsets = [rng.normal(size=(per, 8)) for _ in range(k)]
stage_labels = [f"class{i}" for i in range(k) for _ in range(per)]
stages = []
for j in range(5):
    spacing, spread = 1.0 + 2.0 * j, 2.2 * 0.65 ** j
    X = np.vstack([centers[i] * spacing + offsets[i] * spread for i in range(k)])
    stages.append((f"stage{j}", X, stage_labels))

tl = stage_timeline(stages)
timeline_to_csv(tl, out / "timeline.csv")
print(f"\nreaction timeline -> {out / 'timeline.csv'}")
print(f"{'stage':8s} {'between':>9s} {'within':>9s} {'silhouette':>11s}")
for sid, m in zip(tl.stage_ids, tl.metrics):
    print(f"{sid:8s} {m.between_class_variance:9.3f} "
          f"{m.within_class_variance:9.3f} {m.silhouette:11.3f}")
print("\nclusters separate and converge: between-class variance and "
      "silhouette increase while within-class variance decreases.")
