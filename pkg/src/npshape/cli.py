"""The ``npshape`` command-line interface.

Subcommands mirror the pipeline stages (masks filter, crop, preproc select,
embed, train, predict, eval, analyze, synth) and ``run`` drives the whole
chain from one TOML config. Every flag mirrors a config key; flags win.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, analyze, classify, embed, evaluate, mask_io, preprocess, synth
from .classify import MODEL_SCHEMA_VERSION
from .errors import ConfigError, NpShapeError, StageError
from .pipeline import (CONFIG_SCHEMA_VERSION, VARIANT_ALIASES,
                       provider_from_spec, run_pipeline)


def _cmd_masks_filter(args):
    records = mask_io.read_mask_manifest(args.masks)
    if args.split_components:
        records = [r for rec in records for r in mask_io.split_components(rec)]
    thresholds = mask_io.FilterThresholds(args.min_iou, args.min_stability,
                                          args.min_area)
    kept = mask_io.filter_masks(records, thresholds)
    if args.exclude_border:
        kept = [r for r in kept if not mask_io.touches_border(r)]
    overlaps = mask_io.find_overlaps(kept, args.overlap_iou)
    source = kept[0].source_image_id if kept else ""
    mask_io.write_mask_manifest(kept, args.out, source_image=source, rle=args.rle)
    print(f"retained {len(kept)}/{len(records)} masks -> {args.out}")
    for a, b, iou in overlaps:
        print(f"warning: masks {a} and {b} overlap (IoU {iou:.3f}); "
              f"not deduplicated", file=sys.stderr)
    return 0


def _cmd_crop(args):
    image = mask_io.load_grayscale(args.image)
    records = mask_io.read_mask_manifest(args.masks)
    variants = (list(mask_io.CROP_VARIANTS) if args.variant == "all"
                else [VARIANT_ALIASES[args.variant]])
    out_dir = Path(args.out)
    entries = []
    for rec in records:
        files = {}
        box = None
        for variant in variants:
            crop = mask_io.crop_particle(image, rec, variant, args.margin)
            rel = f"{variant}/{rec.id}.png"
            p = out_dir / rel
            p.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(crop.pixels).save(p)
            files[variant] = rel
            box = crop.bbox
        entries.append({"id": rec.id, "scene": rec.source_image_id,
                        "bbox": list(box.astuple()), "label": None,
                        "variants": files})
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "crops.json").write_text(
        json.dumps({"crops": entries}, indent=1, sort_keys=True))
    print(f"wrote {len(entries)} crops x {len(variants)} variants -> {out_dir}")
    return 0


def _read_crop(out_dir: Path, entry, variant):
    p = Path(out_dir) / entry["variants"][variant]
    return mask_io.ParticleCrop(entry["id"],
                                np.asarray(Image.open(p), dtype=np.uint8),
                                mask_io.BoundingBox(*entry["bbox"]), variant)


def _cmd_preproc_select(args):
    crops_dir = Path(args.crops)
    meta = json.loads((crops_dir / "crops.json").read_text())["crops"]
    labels_map = json.loads(Path(args.labels).read_text())
    entries = [e for e in meta if e["id"] in labels_map]
    missing_variants = [e["id"] for e in entries
                        if set(e["variants"]) != set(mask_io.CROP_VARIANTS)]
    if missing_variants:
        raise ConfigError(
            f"preproc selection needs all crop variants (use crop --variant all); "
            f"incomplete: {missing_variants[:5]}")
    bundles = [{v: _read_crop(crops_dir, e, v) for v in mask_io.CROP_VARIANTS}
               for e in entries]
    labels = [labels_map[e["id"]] for e in entries]
    provider = provider_from_spec(args.provider)
    report = preprocess.select_preproc(
        bundles, labels,
        preprocess.default_candidates(args.target_side, args.pad_value),
        provider, l2_normalize=args.l2)
    doc = {"distances": dict(sorted(report.distances.items())),
           "chosen": {"pipeline": report.chosen.pipeline,
                      "target_side": report.chosen.target_side,
                      "pad_value": report.chosen.pad_value}}
    Path(args.out).write_text(json.dumps(doc, indent=1, sort_keys=True))
    for tag, dist in sorted(report.distances.items(), key=lambda kv: -kv[1]):
        print(f"{dist:12.6f}  {tag}")
    print(f"chosen: {report.chosen.tag} -> {args.out}")
    return 0


def _cmd_embed(args):
    crops_dir = Path(args.crops)
    meta = json.loads((crops_dir / "crops.json").read_text())["crops"]
    spec = preprocess.PreprocSpec(args.pipeline, args.target_side, args.pad_value)
    variant = preprocess.PIPELINE_VARIANT[spec.pipeline]
    rasters = [preprocess.apply_preproc(_read_crop(crops_dir, e, variant), spec)
               for e in meta]
    provider = provider_from_spec(args.provider)
    mat = embed.embed_batch(rasters, provider, [e["id"] for e in meta])
    if args.l2:
        rows = preprocess.l2_normalize_rows(mat.rows).astype(np.float32)
        mat = embed.EmbeddingMatrix(mat.ids, rows, mat.provider_fingerprint + "+l2")
    embed.save_embeddings(mat, args.out)
    print(f"embedded {len(mat.ids)} rasters ({mat.rows.shape[1]}-d) -> {args.out}")
    return 0


def _load_dataset(emb_path, labels_path, split):
    mat = embed.load_embeddings(emb_path)
    labels_map = json.loads(Path(labels_path).read_text())
    missing = [i for i in mat.ids if i not in labels_map]
    if missing:
        raise ConfigError(f"no labels for ids {missing[:5]} in {labels_path}")
    return classify.LabeledDataset(mat, [labels_map[i] for i in mat.ids], split)


def _cmd_train(args):
    if args.mode == "grid" and not (args.val_emb and args.val_labels):
        raise ConfigError("grid mode needs --val-emb and --val-labels")
    train_ds = _load_dataset(args.train_emb, args.train_labels, "train")
    if args.mode == "lr":
        if args.balanced:
            model = classify.train_logreg(train_ds, lam=1.0, balanced=True)
        else:
            model = classify.train_lr_only(train_ds)
    else:
        val_ds = _load_dataset(args.val_emb, args.val_labels, "validation")
        model, trace = classify.grid_search(train_ds, val_ds)
        if args.trace:
            Path(args.trace).write_text(json.dumps(trace, indent=1, sort_keys=True))
            print(f"search trace ({len(trace)} combinations) -> {args.trace}")
    classify.save_model(model, args.out)
    print(f"trained {model.kind} on {len(train_ds.y)} samples "
          f"({len(model.class_map)} classes) -> {args.out}")
    return 0


def _cmd_predict(args):
    model = classify.load_model(args.model)
    mat = embed.load_embeddings(args.emb)
    labels_map = (json.loads(Path(args.labels).read_text())
                  if args.labels else {})
    proba = classify.predict_proba(model, mat)
    preds = [model.class_map[i] for i in proba.argmax(axis=1)]
    rows = [{"id": pid, "true": labels_map.get(pid), "pred": pred,
             "proba": {cls: float(proba[i, k])
                       for k, cls in enumerate(model.class_map)}}
            for i, (pid, pred) in enumerate(zip(mat.ids, preds))]
    Path(args.out).write_text(json.dumps(rows, indent=1, sort_keys=True))
    print(f"predicted {len(rows)} samples -> {args.out}")
    return 0


def _cmd_eval(args):
    rows = json.loads(Path(args.preds).read_text())
    labeled = [r for r in rows if r.get("true") is not None]
    if not labeled:
        raise ConfigError("no predictions carry true labels; pass --labels to predict")
    report = evaluate.evaluate_predictions(
        [r["true"] for r in labeled], [r["pred"] for r in labeled],
        method=args.method)
    baseline = evaluate.load_baseline_rows(args.baseline) if args.baseline else None
    md, doc = evaluate.render_report([report], baseline)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.md").write_text(md)
    doc["macro"] = {"recall": report.macro_recall,
                    "precision": report.macro_precision, "f1": report.macro_f1}
    (out_dir / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    print(md)
    if args.image and args.crops:
        meta = json.loads(Path(args.crops).read_text())["crops"]
        pred_by_id = {r["id"]: r["pred"] for r in rows}
        boxes = [(tuple(e["bbox"]), pred_by_id[e["id"]])
                 for e in meta if e["id"] in pred_by_id]
        canvas = evaluate.render_overlay(mask_io.load_grayscale(args.image), boxes)
        overlay_path = Path(args.overlay or (out_dir / "overlay.png"))
        Image.fromarray(canvas).save(overlay_path)
        print(f"overlay -> {overlay_path}")
    return 0


def _cmd_analyze(args):
    if args.what == "timeline":
        stages = []
        for item in args.stage:
            try:
                stage_id, rest = item.split("=", 1)
                emb_path, labels_path = rest.split(":", 1)
            except ValueError:
                raise ConfigError(f"--stage {item!r} is not ID=EMB:LABELS")
            mat = embed.load_embeddings(emb_path)
            labels_map = json.loads(Path(labels_path).read_text())
            stages.append((stage_id, mat.rows,
                           [labels_map[i] for i in mat.ids]))
        timeline = analyze.stage_timeline(stages)
        analyze.timeline_to_csv(timeline, args.out_csv)
        doc = [{"stage": sid,
                "between_class_variance": m.between_class_variance,
                "within_class_variance": m.within_class_variance,
                "silhouette": m.silhouette, "n_per_class": m.n_per_class}
               for sid, m in zip(timeline.stage_ids, timeline.metrics)]
        if args.out_json:
            Path(args.out_json).write_text(json.dumps(doc, indent=1, sort_keys=True))
        print(f"timeline of {len(stages)} stages -> {args.out_csv}")
        return 0

    mat = embed.load_embeddings(args.emb)
    labels_map = json.loads(Path(args.labels).read_text())
    labels = [labels_map.get(i, "unlabeled") for i in mat.ids]
    if args.what == "pca":
        proj = analyze.pca_fit_transform(mat.rows)
        analyze.projection_to_csv(proj, mat.ids, labels, args.out_csv)
        print(f"explained variance: {proj.explained_variance.tolist()} "
              f"-> {args.out_csv}")
        return 0
    X = analyze.pca_fit_transform(mat.rows).projected if args.pca_space else mat.rows
    metrics = analyze.cluster_metrics(X, labels)
    doc = {"between_class_variance": metrics.between_class_variance,
           "within_class_variance": metrics.within_class_variance,
           "silhouette": metrics.silhouette, "n_per_class": metrics.n_per_class}
    Path(args.out_json).write_text(json.dumps(doc, indent=1, sort_keys=True))
    print(json.dumps(doc, indent=1, sort_keys=True))
    return 0


def _cmd_synth(args):
    spec_doc = json.loads(Path(args.spec).read_text())
    if "splits" in spec_doc:
        manifest = synth.export_dataset(
            args.out, spec_doc["splits"], seed=spec_doc.get("seed", 0),
            canvas=tuple(spec_doc.get("canvas", (768, 768))),
            size_range=tuple(spec_doc.get("size_range", (48, 88))),
            noise_sigma=spec_doc.get("noise_sigma", 6.0),
            blur_sigma=spec_doc.get("blur_sigma", 1.0),
            dot_diameter=spec_doc.get("dot_diameter", 30.0),
            max_per_scene=spec_doc.get("max_per_scene", 20))
        total = sum(sum(s["classes"].values()) for s in manifest["splits"].values())
        print(f"generated {total} shapes across "
              f"{list(manifest['splits'])} -> {args.out}")
    else:
        spec = synth.SynthSpec(
            seed=spec_doc.get("seed", 0),
            canvas=tuple(spec_doc.get("canvas", (768, 768))),
            counts=spec_doc.get("counts", {}),
            size_range=tuple(spec_doc.get("size_range", (48, 88))),
            overlap_allowed=spec_doc.get("overlap_allowed", False),
            noise_sigma=spec_doc.get("noise_sigma", 6.0),
            blur_sigma=spec_doc.get("blur_sigma", 1.0),
            dot_diameter=spec_doc.get("dot_diameter", 30.0))
        scene = synth.generate_scene(spec)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        Image.fromarray(scene.image).save(out / "scene.png")
        mask_io.write_mask_manifest(scene.masks, out / "masks", source_image="scene")
        (out / "labels.json").write_text(
            json.dumps(scene.labels, indent=1, sort_keys=True))
        print(f"generated scene with {len(scene.masks)} shapes -> {out}")
    return 0


def _cmd_run(args):
    manifest = run_pipeline(args.config, overrides=args.set or [])
    return 0 if manifest else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="npshape",
        description="Zero-shot nanoparticle shape analysis pipeline")
    parser.add_argument(
        "--version", action="version",
        version=(f"npshape {__version__} "
                 f"(config schema {CONFIG_SCHEMA_VERSION}, "
                 f"model schema {MODEL_SCHEMA_VERSION}, "
                 f"embedding format {embed.EMB_MAGIC.decode()}, "
                 f"mask manifest {mask_io.MANIFEST_NAME})"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("masks", help="mask utilities")
    masks_sub = p.add_subparsers(dest="subcommand", required=True)
    f = masks_sub.add_parser("filter", help="validate and threshold masks")
    f.add_argument("--masks", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--min-iou", type=float, default=0.95)
    f.add_argument("--min-stability", type=float, default=0.95)
    f.add_argument("--min-area", type=int, default=500)
    f.add_argument("--overlap-iou", type=float, default=0.8)
    f.add_argument("--split-components", action="store_true")
    f.add_argument("--exclude-border", action="store_true")
    f.add_argument("--rle", action="store_true", help="write RLE instead of PNGs")
    f.set_defaults(func=_cmd_masks_filter)

    c = sub.add_parser("crop", help="cut particles out at mask bounding boxes")
    c.add_argument("--image", required=True)
    c.add_argument("--masks", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--variant", choices=["raw", "nobg", "mask", "all"], default="raw")
    c.add_argument("--margin", type=int, default=0)
    c.set_defaults(func=_cmd_crop)

    p = sub.add_parser("preproc", help="preprocessing utilities")
    pre_sub = p.add_subparsers(dest="subcommand", required=True)
    s = pre_sub.add_parser("select", help="pick the pipeline maximizing "
                                          "inter-centroid distance")
    s.add_argument("--crops", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--provider", default="toy")
    s.add_argument("--candidates", default="all", choices=["all"])
    s.add_argument("--target-side", type=int, default=224)
    s.add_argument("--pad-value", type=int, default=0)
    s.add_argument("--l2", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_preproc_select)

    e = sub.add_parser("embed", help="embed standardized crops")
    e.add_argument("--crops", required=True)
    e.add_argument("--pipeline", default="pad_square_resize",
                   choices=list(preprocess.PIPELINES))
    e.add_argument("--target-side", type=int, default=224)
    e.add_argument("--pad-value", type=int, default=0)
    e.add_argument("--provider", default="toy",
                   help="toy | graph:<path> | file:<path>")
    e.add_argument("--l2", action="store_true")
    e.add_argument("--out", required=True)
    e.set_defaults(func=_cmd_embed)

    t = sub.add_parser("train", help="train a classifier")
    t.add_argument("--mode", choices=["grid", "lr"], default="lr")
    t.add_argument("--train-emb", required=True)
    t.add_argument("--train-labels", required=True)
    t.add_argument("--val-emb")
    t.add_argument("--val-labels")
    t.add_argument("--balanced", action="store_true")
    t.add_argument("--trace", help="write the grid-search trace JSON here")
    t.add_argument("--out", required=True)
    t.set_defaults(func=_cmd_train)

    pr = sub.add_parser("predict", help="classify embeddings")
    pr.add_argument("--model", required=True)
    pr.add_argument("--emb", required=True)
    pr.add_argument("--labels", help="optional true labels to join in")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=_cmd_predict)

    ev = sub.add_parser("eval", help="metrics report from predictions")
    ev.add_argument("--preds", required=True)
    ev.add_argument("--out-dir", required=True)
    ev.add_argument("--method", default="pipeline")
    ev.add_argument("--baseline", help="static comparison rows JSON")
    ev.add_argument("--image", help="scene image for the overlay")
    ev.add_argument("--crops", help="crops.json with bounding boxes")
    ev.add_argument("--overlay", help="overlay output path")
    ev.set_defaults(func=_cmd_eval)

    an = sub.add_parser("analyze", help="PCA and clustering metrics")
    an.add_argument("what", choices=["pca", "metrics", "timeline"])
    an.add_argument("--emb")
    an.add_argument("--labels")
    an.add_argument("--stage", action="append", default=[],
                    help="timeline stage as ID=EMB:LABELS (repeatable)")
    an.add_argument("--pca-space", action="store_true",
                    help="compute metrics in PCA-2D instead of full-D")
    an.add_argument("--out-csv")
    an.add_argument("--out-json")
    an.set_defaults(func=_cmd_analyze)

    sy = sub.add_parser("synth", help="generate synthetic scenes")
    sy.add_argument("--spec", required=True)
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=_cmd_synth)

    r = sub.add_parser("run", help="run the full pipeline from a TOML config")
    r.add_argument("--config", required=True)
    r.add_argument("--set", action="append",
                   help="override a config key: section.key=value (repeatable)")
    r.set_defaults(func=_cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        print(f"stage failed: {e}", file=sys.stderr)
        return 1
    except NpShapeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
