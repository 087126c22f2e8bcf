"""Zero-shot nanoparticle shape analysis.

Segmentation masks in, shape classifications and clustering analytics out:
mask filtering and cropping, crop standardization, pluggable embedding
providers, lightweight deterministic classifiers with grid search, PCA and
silhouette/variance metrics, a procedural synthetic-scene generator, and a
pipeline CLI (``npshape``).
"""

__version__ = "0.1.0"

from .analyze import (ClusterMetrics, PcaProjection, StageTimeline,
                      between_within_variance, cluster_metrics,
                      pca_fit_transform, silhouette, stage_timeline,
                      total_variance)
from .classify import (GridSearchSpec, LabeledDataset, TrainedClassifier,
                       grid_search, load_model, predict, predict_proba,
                       save_model, train_gnb, train_linear_svm, train_logreg,
                       train_lr_only)
from .embed import (EmbeddingMatrix, ProviderConfig, embed_batch,
                    load_embeddings, raster_digest, save_embeddings,
                    toy_descriptor)
from .errors import (ConfigError, EmptyMaskError, FileFormatError, GraphError,
                     NpShapeError, PlacementError, StageError, ValidationError)
from .evaluate import (ConfusionMatrix, EvalReport, confusion,
                       evaluate_predictions, load_baseline_rows,
                       macro_average, macro_f1_score, precision_recall_f1,
                       render_overlay, render_report)
from .mask_io import (BoundingBox, FilterThresholds, MaskRecord, ParticleCrop,
                      bbox_from_mask, crop_particle, crop_variants,
                      filter_masks, find_overlaps, read_mask_manifest,
                      rle_decode, rle_encode, split_components,
                      write_mask_manifest)
from .preprocess import (PIPELINES, PreprocSelectionReport, PreprocSpec,
                         apply_preproc, avg_centroid_distance, bilinear_resize,
                         class_centroids, default_candidates, select_preproc)
from .synth import CLASSES, SynthScene, SynthSpec, export_dataset, generate_scene
