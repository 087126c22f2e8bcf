"""Choosing the crop-standardization pipeline by class separation.

Each candidate pipeline standardizes the training crops; the one whose
embeddings put the class centroids furthest apart (average pairwise
Euclidean distance) wins.
"""

from pathlib import Path

from npshape import (ProviderConfig, SynthSpec, crop_variants,
                     default_candidates, generate_scene, select_preproc)

out = Path(__file__).parent / "output" / "02_preproc"
out.mkdir(parents=True, exist_ok=True)

scene = generate_scene(SynthSpec(
    seed=5, canvas=(768, 768),
    counts={"triangle": 7, "truncated_triangle": 5, "circle": 6}))
bundles = [crop_variants(scene.image, rec) for rec in scene.masks]
labels = [scene.labels[rec.id] for rec in scene.masks]
print(f"training material: {len(bundles)} particles, "
      f"classes {sorted(set(labels))}")

report = select_preproc(bundles, labels, default_candidates(224),
                        ProviderConfig.toy())
print("\naverage inter-centroid distance per candidate:")
for tag, dist in sorted(report.distances.items(), key=lambda kv: -kv[1]):
    marker = "  <- chosen" if tag == report.chosen.tag else ""
    print(f"  {dist:10.4f}  {tag}{marker}")

print("\nbinary-mask input wins for flat 2-D shapes: geometry carries the "
      "signal, and removing interior texture tightens each class.")
