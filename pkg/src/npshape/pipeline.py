"""End-to-end pipeline orchestration with a reproducibility manifest.

A single TOML config drives the stages (synth -> filter -> crop -> preproc
selection -> embed -> train -> predict -> evaluate -> analyze). Every stage
records the digests of its inputs and outputs in run_manifest.json; re-runs
skip stages whose inputs, config, and outputs all still match, so a run is
resumable and an unchanged re-run is a no-op except for timestamps.
"""

from __future__ import annotations

import datetime
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import analyze as analyze_mod
from . import classify, embed, evaluate, mask_io, preprocess, synth
from .errors import ConfigError, NpShapeError, StageError

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

CONFIG_SCHEMA_VERSION = 1

VARIANT_ALIASES = {"raw": "raw_crop", "nobg": "background_removed",
                   "mask": "binary_mask"}

# section -> key -> (expected types, default); None default means required
_SCHEMA = {
    "run": {"out_dir": (str, None), "seed": (int, 0)},
    "synth": {
        "enabled": (bool, True),
        "canvas": (list, [768, 768]),
        "size_range": (list, [48, 88]),
        "noise_sigma": ((int, float), 6.0),
        "blur_sigma": ((int, float), 1.0),
        "dot_diameter": ((int, float), 30.0),
        "max_per_scene": (int, 20),
        "train": (dict, {}),
        "validation": (dict, {}),
        "test": (dict, {}),
    },
    "inputs": {"data_dir": (str, "")},
    "masks": {
        "min_iou": ((int, float), 0.95),
        "min_stability": ((int, float), 0.95),
        "min_area": (int, 500),
        "split_components": (bool, False),
        "exclude_border": (bool, False),
        "overlap_iou": ((int, float), 0.8),
    },
    "crop": {"margin": (int, 0)},
    "preproc": {
        "select": (bool, True),
        "pipeline": (str, "pad_square_resize"),
        "target_side": (int, 224),
        "pad_value": (int, 0),
        "l2_normalize": (bool, False),
    },
    "embed": {"provider": (str, "toy")},
    "train": {"mode": (str, "lr"), "balanced": (bool, False)},
    "analyze": {"split": (str, "train"), "pca_space": (bool, False)},
    "eval": {"baseline_rows": (str, ""), "overlay": (bool, True)},
}


@dataclass
class RunManifest:
    config_hash: str
    seeds: dict
    provider_fingerprint: str = ""
    chosen_preproc: str = ""
    model_file: str = ""
    input_digests: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)
    timestamps: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {"schema_version": CONFIG_SCHEMA_VERSION,
                "config_hash": self.config_hash, "seeds": self.seeds,
                "provider_fingerprint": self.provider_fingerprint,
                "chosen_preproc": self.chosen_preproc,
                "model_file": self.model_file,
                "input_digests": self.input_digests, "stages": self.stages,
                "artifacts": self.artifacts, "timestamps": self.timestamps,
                "warnings": self.warnings}


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_sig(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _type_ok(val, types) -> bool:
    allowed = types if isinstance(types, tuple) else (types,)
    if isinstance(val, bool):  # bool is an int subclass; keep them distinct
        return bool in allowed
    return isinstance(val, allowed)


def validate_config(raw: dict) -> dict:
    """Check the parsed TOML against the schema and fill defaults."""
    unknown = set(raw) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = {}
    for section, keys in _SCHEMA.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"[{section}] must be a table")
        bad = set(given) - set(keys)
        if bad:
            raise ConfigError(f"[{section}] has unknown keys: {sorted(bad)}")
        out = {}
        for key, (types, default) in keys.items():
            if key in given:
                val = given[key]
                if not _type_ok(val, types):
                    raise ConfigError(
                        f"[{section}].{key}: expected {types}, got {type(val).__name__}")
                out[key] = val
            elif default is None:
                raise ConfigError(f"[{section}].{key} is required")
            else:
                out[key] = default
        cfg[section] = out
    if cfg["train"]["mode"] not in ("lr", "grid"):
        raise ConfigError("[train].mode must be 'lr' or 'grid'")
    if cfg["preproc"]["pipeline"] not in preprocess.PIPELINES:
        raise ConfigError(f"[preproc].pipeline must be one of {preprocess.PIPELINES}")
    if cfg["analyze"]["split"] not in ("train", "validation", "test"):
        raise ConfigError("[analyze].split must be train/validation/test")
    if not cfg["synth"]["enabled"] and not cfg["inputs"]["data_dir"]:
        raise ConfigError("either [synth].enabled or [inputs].data_dir is needed")
    return cfg


def load_config(path, overrides=None) -> dict:
    with open(path, "rb") as f:
        raw = tomllib.load(f)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not section.key=value")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        raw.setdefault(section, {})[key] = _coerce_override(section, key, value)
    return validate_config(raw)


def _coerce_override(section, key, value: str):
    types, default = _SCHEMA.get(section, {}).get(key, (str, ""))
    if types is bool or (isinstance(types, tuple) and bool in types):
        return value.lower() in ("1", "true", "yes")
    if types is int:
        return int(value)
    if types == (int, float):
        return float(value)
    if types in (list, dict):
        return json.loads(value)
    return value


def provider_from_spec(spec: str) -> embed.ProviderConfig:
    """Parse a provider spec string: toy | graph:<path> | file:<path>."""
    if spec == "toy":
        return embed.ProviderConfig.toy()
    if spec.startswith("graph:"):
        return embed.ProviderConfig.graph(spec[len("graph:"):])
    if spec.startswith("file:"):
        return embed.ProviderConfig.precomputed(spec[len("file:"):])
    raise ConfigError(f"unknown provider spec {spec!r}")


# ---------------------------------------------------------------------------
# stage framework

class _Runner:
    def __init__(self, out_dir: Path, manifest: RunManifest, previous: dict):
        self.out_dir = out_dir
        self.manifest = manifest
        self.previous = {s["name"]: s for s in previous.get("stages", [])}

    def _rel(self, path) -> str:
        return str(Path(path).resolve().relative_to(self.out_dir.resolve()))

    def run(self, name, config_payload, input_paths, compute):
        inputs = {}
        for p in input_paths:
            p = Path(p)
            if not p.exists():
                raise StageError(name, f"missing input {p}")
            inputs[self._rel(p) if self._is_inside(p) else str(p)] = file_sha256(p)
        sig = _json_sig({"config": config_payload, "inputs": inputs})
        prev = self.previous.get(name)
        if prev and prev["signature"] == sig and self._outputs_intact(prev):
            record = dict(prev)
            record["status"] = "skipped"
            self.manifest.stages.append(record)
            self.manifest.artifacts.update(prev["outputs"])
            return record
        try:
            out_paths = compute()
        except NpShapeError as e:
            raise StageError(name, str(e)) from e
        outputs = {}
        for p in out_paths:
            rel = self._rel(p)
            outputs[rel] = file_sha256(p)
        record = {"name": name, "signature": sig, "inputs": inputs,
                  "outputs": outputs, "status": "ran"}
        self.manifest.stages.append(record)
        self.manifest.artifacts.update(outputs)
        return record

    def _is_inside(self, p: Path) -> bool:
        try:
            Path(p).resolve().relative_to(self.out_dir.resolve())
            return True
        except ValueError:
            return False

    def _outputs_intact(self, prev) -> bool:
        for rel, digest in prev["outputs"].items():
            p = self.out_dir / rel
            if not p.exists() or file_sha256(p) != digest:
                return False
        return True


def _discover_split(split_dir: Path):
    """Scenes of one split: (scene_id, image_path, masks_dir), sorted by id."""
    scenes = []
    for masks_dir in sorted(split_dir.glob("*_masks")):
        scene_id = masks_dir.name[:-len("_masks")]
        img = split_dir / f"{scene_id}.png"
        if img.exists():
            scenes.append((scene_id, img, masks_dir))
    return scenes


def _load_labels(split_dir: Path) -> dict:
    path = split_dir / "labels.json"
    return json.loads(path.read_text()) if path.exists() else {}


# ---------------------------------------------------------------------------
# the pipeline

def run_pipeline(config_path, overrides=None, echo=print) -> RunManifest:
    cfg = load_config(config_path, overrides)
    out_dir = Path(cfg["run"]["out_dir"])
    if not out_dir.is_absolute():
        out_dir = Path(config_path).resolve().parent / out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "run_manifest.json"
    previous = {}
    if manifest_path.exists():
        try:
            previous = json.loads(manifest_path.read_text())
        except json.JSONDecodeError:
            previous = {}

    manifest = RunManifest(config_hash=_json_sig(cfg),
                           seeds={"run": cfg["run"]["seed"]})
    manifest.timestamps["started"] = datetime.datetime.now(
        datetime.timezone.utc).isoformat()
    runner = _Runner(out_dir, manifest, previous)
    seed = cfg["run"]["seed"]

    splits = ["train", "test"]
    if cfg["train"]["mode"] == "grid":
        splits.insert(1, "validation")

    # -- data: synthesize or ingest ------------------------------------------
    data_dir = out_dir / "data"
    if cfg["synth"]["enabled"]:
        sy = cfg["synth"]
        split_counts = {s: dict(sy[s]) for s in ("train", "validation", "test")
                        if sy[s]}
        missing = [s for s in splits if s not in split_counts]
        if missing:
            raise StageError("synth", f"config requests splits {missing} but "
                                      f"[synth] defines no counts for them")

        def _synth():
            synth.export_dataset(
                data_dir, split_counts, seed=seed,
                canvas=tuple(sy["canvas"]), size_range=tuple(sy["size_range"]),
                noise_sigma=float(sy["noise_sigma"]),
                blur_sigma=float(sy["blur_sigma"]),
                dot_diameter=float(sy["dot_diameter"]),
                max_per_scene=sy["max_per_scene"])
            return sorted(p for p in data_dir.rglob("*") if p.is_file())

        runner.run("synth", {"seed": seed, "synth": sy}, [], _synth)
    else:
        data_dir = Path(cfg["inputs"]["data_dir"])
        if not data_dir.is_absolute():
            data_dir = Path(config_path).resolve().parent / data_dir
        if not data_dir.exists():
            raise StageError("inputs", f"data_dir {data_dir} does not exist")
        for split in splits:
            for f in sorted((data_dir / split).rglob("*")):
                if f.is_file():
                    manifest.input_digests[str(f)] = file_sha256(f)

    # -- filter ---------------------------------------------------------------
    mk = cfg["masks"]
    thresholds = mask_io.FilterThresholds(float(mk["min_iou"]),
                                          float(mk["min_stability"]),
                                          int(mk["min_area"]))
    filter_dir = out_dir / "filtered"

    def _filter():
        report = {}
        for split in splits:
            split_report = {}
            for scene_id, _img, masks_dir in _discover_split(data_dir / split):
                records = mask_io.read_mask_manifest(masks_dir)
                if mk["split_components"]:
                    records = [r for rec in records for r in mask_io.split_components(rec)]
                kept = mask_io.filter_masks(records, thresholds)
                if mk["exclude_border"]:
                    kept = [r for r in kept if not mask_io.touches_border(r)]
                overlaps = mask_io.find_overlaps(kept, float(mk["overlap_iou"]))
                split_report[scene_id] = {
                    "total": len(records), "retained": [r.id for r in kept],
                    "overlapping_pairs": [[a, b, round(i, 4)] for a, b, i in overlaps],
                }
            report[split] = split_report
        filter_dir.mkdir(parents=True, exist_ok=True)
        path = filter_dir / "filter_report.json"
        path.write_text(json.dumps(report, indent=1, sort_keys=True))
        return [path]

    mask_inputs = [m / mask_io.MANIFEST_NAME for s in splits
                   for _sid, _im, m in _discover_split(data_dir / s)]
    runner.run("filter", {"masks": mk, "splits": splits}, mask_inputs, _filter)
    filter_report = json.loads((filter_dir / "filter_report.json").read_text())
    overlap_count = sum(len(sc["overlapping_pairs"])
                        for sp in filter_report.values() for sc in sp.values())
    if overlap_count:
        manifest.warnings.append(
            f"{overlap_count} retained mask pairs overlap with IoU > "
            f"{mk['overlap_iou']}; no deduplication applied")

    # -- crop ------------------------------------------------------------------
    crops_root = out_dir / "crops"
    margin = int(cfg["crop"]["margin"])

    def _crop():
        out_files = []
        for split in splits:
            split_dir = crops_root / split
            entries = []
            labels = _load_labels(data_dir / split)
            for scene_id, img_path, masks_dir in _discover_split(data_dir / split):
                image = mask_io.load_grayscale(img_path)
                records = {r.id: r for r in mask_io.read_mask_manifest(masks_dir)}
                for rid in filter_report[split][scene_id]["retained"]:
                    rec = records[rid]
                    variants = {}
                    for variant in mask_io.CROP_VARIANTS:
                        crop = mask_io.crop_particle(image, rec, variant, margin)
                        rel = f"{variant}/{rid}.png"
                        p = split_dir / rel
                        p.parent.mkdir(parents=True, exist_ok=True)
                        Image.fromarray(crop.pixels).save(p)
                        out_files.append(p)
                        variants[variant] = rel
                    box = mask_io.bbox_from_mask(rec.mask)
                    entries.append({"id": rid, "scene": scene_id,
                                    "bbox": list(box.astuple()),
                                    "label": labels.get(rid),
                                    "variants": variants})
            split_dir.mkdir(parents=True, exist_ok=True)
            cj = split_dir / "crops.json"
            cj.write_text(json.dumps({"crops": entries}, indent=1, sort_keys=True))
            out_files.append(cj)
        return out_files

    crop_inputs = [filter_dir / "filter_report.json"]
    runner.run("crop", {"margin": margin, "splits": splits}, crop_inputs, _crop)

    # -- preprocessing choice ---------------------------------------------------
    pp = cfg["preproc"]
    provider = provider_from_spec(cfg["embed"]["provider"])
    manifest.provider_fingerprint = provider.fingerprint()
    preproc_dir = out_dir / "preproc"
    selection_path = preproc_dir / "selection.json"

    def _load_crop(split, entry, variant):
        p = crops_root / split / entry["variants"][variant]
        box = mask_io.BoundingBox(*entry["bbox"])
        return mask_io.ParticleCrop(entry["id"],
                                    np.asarray(Image.open(p), dtype=np.uint8),
                                    box, variant)

    def _preproc():
        preproc_dir.mkdir(parents=True, exist_ok=True)
        if pp["select"]:
            entries = json.loads((crops_root / "train" / "crops.json").read_text())["crops"]
            labeled = [e for e in entries if e.get("label")]
            bundles = [{v: _load_crop("train", e, v) for v in mask_io.CROP_VARIANTS}
                       for e in labeled]
            labels = [e["label"] for e in labeled]
            report = preprocess.select_preproc(
                bundles, labels,
                preprocess.default_candidates(pp["target_side"], pp["pad_value"]),
                provider, l2_normalize=pp["l2_normalize"])
            doc = {"distances": {k: v for k, v in sorted(report.distances.items())},
                   "chosen": {"pipeline": report.chosen.pipeline,
                              "target_side": report.chosen.target_side,
                              "pad_value": report.chosen.pad_value}}
        else:
            doc = {"distances": {},
                   "chosen": {"pipeline": pp["pipeline"],
                              "target_side": pp["target_side"],
                              "pad_value": pp["pad_value"]}}
        selection_path.write_text(json.dumps(doc, indent=1, sort_keys=True))
        return [selection_path]

    runner.run("preproc", {"preproc": pp, "provider": provider.fingerprint()},
               [crops_root / "train" / "crops.json"] if pp["select"] else [],
               _preproc)
    chosen = json.loads(selection_path.read_text())["chosen"]
    spec = preprocess.PreprocSpec(chosen["pipeline"], chosen["target_side"],
                                  chosen["pad_value"])
    manifest.chosen_preproc = spec.tag

    # -- embed -------------------------------------------------------------------
    emb_dir = out_dir / "embeddings"
    variant = preprocess.PIPELINE_VARIANT[spec.pipeline]

    def _embed_split(split):
        def _do():
            entries = json.loads((crops_root / split / "crops.json").read_text())["crops"]
            rasters = [preprocess.apply_preproc(_load_crop(split, e, variant), spec)
                       for e in entries]
            mat = embed.embed_batch(rasters, provider, [e["id"] for e in entries])
            return [embed.save_embeddings(mat, emb_dir / f"{split}.npe")]
        return _do

    def _crop_files(split, which_variant):
        meta = json.loads((crops_root / split / "crops.json").read_text())["crops"]
        return [crops_root / split / e["variants"][which_variant] for e in meta]

    for split in splits:
        runner.run(f"embed:{split}",
                   {"preproc": spec.tag, "provider": provider.fingerprint()},
                   [crops_root / split / "crops.json"] + _crop_files(split, variant),
                   _embed_split(split))

    # -- train ---------------------------------------------------------------------
    model_dir = out_dir / "model"
    model_path = model_dir / "model.json"
    tr = cfg["train"]

    def _dataset(split):
        mat = embed.load_embeddings(emb_dir / f"{split}.npe")
        labels = _load_labels(data_dir / split)
        missing = [i for i in mat.ids if i not in labels]
        if missing:
            raise StageError("train", f"{split}: no labels for ids {missing[:5]}...")
        return classify.LabeledDataset(mat, [labels[i] for i in mat.ids], split)

    def _train():
        model_dir.mkdir(parents=True, exist_ok=True)
        train_ds = _dataset("train")
        out = [model_path]
        if tr["mode"] == "lr":
            model = classify.train_lr_only(train_ds)
        else:
            model, trace = classify.grid_search(train_ds, _dataset("validation"))
            trace_path = model_dir / "trace.json"
            trace_path.write_text(json.dumps(trace, indent=1, sort_keys=True))
            out.append(trace_path)
        model.preproc_tag = spec.tag
        model.provider_fingerprint = provider.fingerprint()
        classify.save_model(model, model_path)
        return out

    train_inputs = [emb_dir / "train.npe", data_dir / "train" / "labels.json"]
    if tr["mode"] == "grid":
        train_inputs += [emb_dir / "validation.npe",
                         data_dir / "validation" / "labels.json"]
    runner.run("train", {"train": tr}, train_inputs, _train)
    manifest.model_file = str(model_path.relative_to(out_dir))

    # -- predict ---------------------------------------------------------------------
    preds_dir = out_dir / "preds"
    preds_path = preds_dir / "preds.json"

    def _predict():
        model = classify.load_model(model_path)
        mat = embed.load_embeddings(emb_dir / "test.npe")
        labels = _load_labels(data_dir / "test")
        proba = classify.predict_proba(model, mat)
        preds = [model.class_map[i] for i in proba.argmax(axis=1)]
        rows = [{"id": pid, "true": labels.get(pid), "pred": pred,
                 "proba": {cls: float(proba[i, k])
                           for k, cls in enumerate(model.class_map)}}
                for i, (pid, pred) in enumerate(zip(mat.ids, preds))]
        preds_dir.mkdir(parents=True, exist_ok=True)
        preds_path.write_text(json.dumps(rows, indent=1, sort_keys=True))
        return [preds_path]

    runner.run("predict", {}, [model_path, emb_dir / "test.npe"], _predict)

    # -- evaluate ---------------------------------------------------------------------
    eval_dir = out_dir / "eval"
    ev = cfg["eval"]

    def _evaluate():
        rows = json.loads(preds_path.read_text())
        labeled = [r for r in rows if r["true"] is not None]
        report = evaluate.evaluate_predictions(
            [r["true"] for r in labeled], [r["pred"] for r in labeled],
            method="pipeline")
        baseline = (evaluate.load_baseline_rows(ev["baseline_rows"])
                    if ev["baseline_rows"] else None)
        md, doc = evaluate.render_report([report], baseline)
        doc["macro"] = {"recall": report.macro_recall,
                        "precision": report.macro_precision,
                        "f1": report.macro_f1}
        doc["confusion"] = {"class_map": report.confusion.class_map,
                            "counts": report.confusion.counts.tolist()}
        doc["unlabeled"] = len(rows) - len(labeled)
        eval_dir.mkdir(parents=True, exist_ok=True)
        out = [eval_dir / "report.md", eval_dir / "report.json"]
        out[0].write_text(md)
        out[1].write_text(json.dumps(doc, indent=1, sort_keys=True))
        if ev["overlay"]:
            crops_meta = json.loads((crops_root / "test" / "crops.json").read_text())["crops"]
            by_scene = {}
            pred_by_id = {r["id"]: r["pred"] for r in rows}
            for e in crops_meta:
                if e["id"] in pred_by_id:
                    by_scene.setdefault(e["scene"], []).append(
                        (tuple(e["bbox"]), pred_by_id[e["id"]]))
            for scene_id, boxes in sorted(by_scene.items()):
                image = mask_io.load_grayscale(data_dir / "test" / f"{scene_id}.png")
                canvas = evaluate.render_overlay(image, boxes)
                p = eval_dir / f"overlay_{scene_id}.png"
                Image.fromarray(canvas).save(p)
                out.append(p)
        return out

    eval_inputs = [preds_path]
    if ev["baseline_rows"]:
        eval_inputs.append(Path(ev["baseline_rows"]))
    if ev["overlay"]:
        eval_inputs.append(crops_root / "test" / "crops.json")
    runner.run("evaluate", {"eval": ev}, eval_inputs, _evaluate)

    # -- analyze ---------------------------------------------------------------------
    an = cfg["analyze"]
    analyze_dir = out_dir / "analyze"
    an_split = an["split"]
    if an_split not in splits:
        manifest.warnings.append(
            f"analyze.split={an_split!r} is not embedded in "
            f"{cfg['train']['mode']} mode; analyzing train instead")
        an_split = "train"

    def _analyze():
        mat = embed.load_embeddings(emb_dir / f"{an_split}.npe")
        labels_map = _load_labels(data_dir / an_split)
        labels = [labels_map.get(i, "unlabeled") for i in mat.ids]
        proj = analyze_mod.pca_fit_transform(mat.rows)
        analyze_dir.mkdir(parents=True, exist_ok=True)
        csv_path = analyze_mod.projection_to_csv(proj, mat.ids, labels,
                                                 analyze_dir / "pca.csv")
        X = proj.projected if an["pca_space"] else mat.rows
        metrics = analyze_mod.cluster_metrics(X, labels)
        doc = {"split": an_split, "space": "pca2" if an["pca_space"] else "full",
               "between_class_variance": metrics.between_class_variance,
               "within_class_variance": metrics.within_class_variance,
               "silhouette": metrics.silhouette,
               "n_per_class": metrics.n_per_class,
               "explained_variance": proj.explained_variance.tolist()}
        json_path = analyze_dir / "metrics.json"
        json_path.write_text(json.dumps(doc, indent=1, sort_keys=True))
        return [csv_path, json_path]

    runner.run("analyze", {"analyze": an},
               [emb_dir / f"{an_split}.npe"], _analyze)

    manifest.timestamps["finished"] = datetime.datetime.now(
        datetime.timezone.utc).isoformat()
    manifest_path.write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True))
    echo(f"pipeline finished: {sum(1 for s in manifest.stages if s['status'] == 'ran')} "
         f"stages ran, {sum(1 for s in manifest.stages if s['status'] == 'skipped')} skipped "
         f"-> {manifest_path}")
    return manifest
