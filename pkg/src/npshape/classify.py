"""Lightweight classifiers over embeddings, deterministic by construction.

Three kinds: multinomial logistic regression (full-batch gradient descent
with backtracking line search, zero init), Gaussian naive Bayes, and
one-vs-rest linear SVMs (fixed-schedule subgradient descent, seeded
shuffling). Grid search selects over kinds, hyperparameters, and an
optional row-normalization toggle by macro-F1 on a validation split.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embed import EmbeddingMatrix
from .errors import FileFormatError, ValidationError
from .evaluate import macro_f1_score
from .preprocess import l2_normalize_rows

KINDS = ("logreg", "gaussian_nb", "linear_svm")
SPLITS = ("train", "validation", "test")

MODEL_SCHEMA_VERSION = 1


@dataclass
class LabeledDataset:
    X: EmbeddingMatrix
    y: list
    split: str = "train"

    def __post_init__(self):
        self.y = [str(v) for v in self.y]
        if len(self.y) != self.X.rows.shape[0]:
            raise ValidationError(
                f"{len(self.y)} labels for {self.X.rows.shape[0]} embedding rows")
        if not self.y:
            raise ValidationError("empty dataset")
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")

    @property
    def class_map(self):
        return sorted(set(self.y))


@dataclass
class TrainedClassifier:
    kind: str
    class_map: list
    params: dict           # name -> float64 ndarray
    hyperparams: dict
    preproc_tag: str = ""
    provider_fingerprint: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown classifier kind {self.kind!r}")
        for name, arr in self.params.items():
            if not np.isfinite(arr).all():
                raise ValidationError(f"parameter {name!r} contains non-finite values")


@dataclass
class GridSearchSpec:
    logreg_lambdas: tuple = (100.0, 10.0, 1.0, 0.1, 0.01)
    svm_c: tuple = (0.01, 0.1, 1.0, 10.0)
    gnb_var_smoothing: tuple = (1e-9, 1e-7, 1e-5)
    l2_options: tuple = (False, True)
    svm_seed: int = 0

    def __post_init__(self):
        if not (self.logreg_lambdas and self.svm_c and self.gnb_var_smoothing
                and self.l2_options):
            raise ValidationError("grid search grids must be non-empty")


def _encode_labels(y, class_map):
    index = {c: i for i, c in enumerate(class_map)}
    try:
        return np.array([index[v] for v in y], dtype=int)
    except KeyError as e:
        raise ValidationError(f"label {e} not in class map {class_map}")


def _check_multiclass(y):
    if len(set(y)) < 2:
        raise ValidationError("training needs at least 2 classes")


def _conflicting_duplicates(X, y):
    """True if any two identical rows carry different labels."""
    _, inverse = np.unique(X, axis=0, return_inverse=True)
    seen = {}
    for g, label in zip(inverse, y):
        if seen.setdefault(g, label) != label:
            return True
    return False


def _softmax(Z):
    m = Z.max(axis=1, keepdims=True)
    e = np.exp(Z - m)
    return e / e.sum(axis=1, keepdims=True)


def logreg_objective_grad(W, b, X, Y, sample_w, lam):
    """Weighted cross-entropy plus (lam/2)*||W||^2 (bias unregularized)."""
    Z = X @ W.T + b
    m = Z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(Z - m).sum(axis=1, keepdims=True))
    logp = Z - lse
    loss = -(sample_w * logp[np.arange(len(Y)), Y]).sum() + 0.5 * lam * (W * W).sum()
    P = np.exp(logp)
    G = P.copy()
    G[np.arange(len(Y)), Y] -= 1.0
    Gw = G * sample_w[:, None]
    grad_W = Gw.T @ X + lam * W
    grad_b = Gw.sum(axis=0)
    return loss, grad_W, grad_b


def train_logreg(train: LabeledDataset, lam: float = 1.0,
                 balanced: bool = False, max_iter: int = 1000,
                 grad_tol: float = 1e-6) -> TrainedClassifier:
    """Multinomial softmax regression by full-batch descent with backtracking.

    Zero initialization and a deterministic line search make the result
    reproducible bit-for-bit; stops when the gradient max-norm drops below
    grad_tol or after max_iter iterations.
    """
    _check_multiclass(train.y)
    classes = train.class_map
    X = np.asarray(train.X.rows, dtype=np.float64)
    yi = _encode_labels(train.y, classes)
    n, d = X.shape
    k = len(classes)
    if n < k:
        raise ValidationError(f"need at least {k} samples for {k} classes, got {n}")
    if balanced:
        counts = np.bincount(yi, minlength=k).astype(np.float64)
        sample_w = (1.0 / (k * counts))[yi]
    else:
        sample_w = np.full(n, 1.0 / n)

    W = np.zeros((k, d))
    b = np.zeros(k)
    loss, gW, gb = logreg_objective_grad(W, b, X, yi, sample_w, lam)
    curve = [float(loss)]
    it = 0
    stalled = False
    while it < max_iter:
        gmax = max(np.abs(gW).max(), np.abs(gb).max())
        if gmax < grad_tol:
            break
        sq = float((gW * gW).sum() + (gb * gb).sum())
        t = 1.0
        accepted = False
        for _ in range(60):
            new_loss, nW, nb = logreg_objective_grad(
                W - t * gW, b - t * gb, X, yi, sample_w, lam)
            if new_loss <= loss - 1e-4 * t * sq:
                W, b = W - t * gW, b - t * gb
                loss, gW, gb = new_loss, nW, nb
                accepted = True
                break
            t *= 0.5
        if not accepted:
            stalled = True
            break
        curve.append(float(loss))
        it += 1

    meta = {
        "iterations": it,
        "grad_max_norm": float(max(np.abs(gW).max(), np.abs(gb).max())),
        "final_objective": float(loss),
        "objective_curve": curve,
        "stalled": stalled,
        "non_separable": bool(_conflicting_duplicates(X, list(train.y))),
    }
    return TrainedClassifier(
        kind="logreg", class_map=classes,
        params={"weights": W, "bias": b},
        hyperparams={"lambda": float(lam), "balanced": balanced,
                     "l2_normalize": False},
        metadata=meta)


def train_lr_only(train: LabeledDataset) -> TrainedClassifier:
    """Low-data configuration: logistic regression with the fixed default
    lambda of 1 on raw embeddings, no validation access."""
    return train_logreg(train, lam=1.0)


def train_gnb(train: LabeledDataset, var_smoothing: float = 1e-9) -> TrainedClassifier:
    _check_multiclass(train.y)
    classes = train.class_map
    X = np.asarray(train.X.rows, dtype=np.float64)
    yi = _encode_labels(train.y, classes)
    k = len(classes)
    smoothing = var_smoothing * float(X.var(axis=0).max())
    means = np.zeros((k, X.shape[1]))
    variances = np.zeros((k, X.shape[1]))
    priors = np.zeros(k)
    for c in range(k):
        rows = X[yi == c]
        means[c] = rows.mean(axis=0)
        variances[c] = rows.var(axis=0) + smoothing
        priors[c] = len(rows) / len(X)
    return TrainedClassifier(
        kind="gaussian_nb", class_map=classes,
        params={"means": means, "variances": variances, "priors": priors},
        hyperparams={"var_smoothing": float(var_smoothing), "l2_normalize": False},
        metadata={"smoothing_value": float(smoothing)})


def train_linear_svm(train: LabeledDataset, C: float = 1.0,
                     seed: int = 0, epochs: int = 200) -> TrainedClassifier:
    """One-vs-rest hinge loss by subgradient descent, step 1/(lam*t).

    lam = 1/(C*N); the shuffling stream is seeded, so margins are
    reproducible given the seed.
    """
    _check_multiclass(train.y)
    classes = train.class_map
    X = np.asarray(train.X.rows, dtype=np.float64)
    yi = _encode_labels(train.y, classes)
    n, d = X.shape
    k = len(classes)
    lam = 1.0 / (C * n)
    rng = np.random.default_rng(seed)
    W = np.zeros((k, d))
    b = np.zeros(k)
    for c in range(k):
        y = np.where(yi == c, 1.0, -1.0)
        w = np.zeros(d)
        bc = 0.0
        t = 0
        for _ in range(epochs):
            for i in rng.permutation(n):
                t += 1
                eta = 1.0 / (lam * t)
                if y[i] * (w @ X[i] + bc) < 1.0:
                    w = (1.0 - eta * lam) * w + eta * y[i] * X[i]
                    bc += eta * y[i]
                else:
                    w = (1.0 - eta * lam) * w
        W[c] = w
        b[c] = bc
    margins = X @ W.T + b
    hinge = np.maximum(0.0, 1.0 - np.where(
        yi[:, None] == np.arange(k)[None, :], 1.0, -1.0) * margins)
    return TrainedClassifier(
        kind="linear_svm", class_map=classes,
        params={"weights": W, "bias": b},
        hyperparams={"C": float(C), "seed": int(seed), "epochs": int(epochs),
                     "l2_normalize": False},
        metadata={"mean_hinge_loss": float(hinge.mean())})


def _prepare_rows(model: TrainedClassifier, X) -> np.ndarray:
    rows = np.asarray(X.rows if isinstance(X, EmbeddingMatrix) else X,
                      dtype=np.float64)
    if rows.ndim != 2:
        raise ValidationError("expected an N x D matrix")
    d = model.params["weights"].shape[1] if "weights" in model.params \
        else model.params["means"].shape[1]
    if rows.shape[1] != d:
        raise ValidationError(
            f"input width {rows.shape[1]} does not match model width {d}")
    if model.hyperparams.get("l2_normalize"):
        rows = l2_normalize_rows(rows)
    return rows


def predict_proba(model: TrainedClassifier, X) -> np.ndarray:
    """Row-stochastic N x K score matrix.

    Probabilities are calibrated for logreg and gaussian_nb; for linear_svm
    these are softmax-squashed margins, uncalibrated by construction.
    """
    rows = _prepare_rows(model, X)
    if model.kind == "logreg" or model.kind == "linear_svm":
        Z = rows @ model.params["weights"].T + model.params["bias"]
        return _softmax(Z)
    means = model.params["means"]
    variances = model.params["variances"]
    log_prior = np.log(model.params["priors"])
    # joint log density per class, normalized by logsumexp
    ll = np.empty((rows.shape[0], means.shape[0]))
    for c in range(means.shape[0]):
        ll[:, c] = -0.5 * (np.log(2.0 * np.pi * variances[c])
                           + (rows - means[c]) ** 2 / variances[c]).sum(axis=1)
    ll += log_prior
    m = ll.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(ll - m).sum(axis=1, keepdims=True))
    return np.exp(ll - lse)


def predict(model: TrainedClassifier, X) -> list:
    """Argmax labels; ties break toward the earlier class_map entry."""
    proba = predict_proba(model, X)
    return [model.class_map[i] for i in proba.argmax(axis=1)]


def _grid_combos(spec: GridSearchSpec):
    grids = {
        "logreg": [{"lambda": v} for v in spec.logreg_lambdas],
        "gaussian_nb": [{"var_smoothing": v} for v in spec.gnb_var_smoothing],
        "linear_svm": [{"C": v, "seed": spec.svm_seed} for v in spec.svm_c],
    }
    for kind in KINDS:
        for hp in grids[kind]:
            for l2 in spec.l2_options:
                yield kind, hp, l2


def _train_one(kind, hp, train):
    if kind == "logreg":
        return train_logreg(train, lam=hp["lambda"])
    if kind == "gaussian_nb":
        return train_gnb(train, var_smoothing=hp["var_smoothing"])
    return train_linear_svm(train, C=hp["C"], seed=hp["seed"])


def grid_search(train: LabeledDataset, val: LabeledDataset,
                spec: GridSearchSpec | None = None):
    """Train every (kind, hyperparams, normalization) combination and return
    the validation macro-F1 maximizer plus the full search trace.

    Ties break to the earliest combination in the documented order: kinds in
    KINDS order, then each kind's grid in declared order, then the
    normalization toggle (raw first).
    """
    spec = spec or GridSearchSpec()
    if not set(val.y) <= set(train.y):
        raise ValidationError(
            f"validation labels {sorted(set(val.y) - set(train.y))} missing "
            f"from the training class map")
    classes = train.class_map
    trace = []
    best = None
    best_model = None
    for kind, hp, l2 in _grid_combos(spec):
        fit_train = train
        fit_val_rows = val.X.rows
        if l2:
            fit_train = LabeledDataset(
                EmbeddingMatrix(train.X.ids, l2_normalize_rows(train.X.rows).astype(np.float32),
                                train.X.provider_fingerprint),
                train.y, train.split)
        model = _train_one(kind, hp, fit_train)
        model.hyperparams["l2_normalize"] = l2
        preds = predict(model, val.X)
        score = macro_f1_score(val.y, preds, classes)
        entry = {"kind": kind, "hyperparams": dict(hp), "l2_normalize": l2,
                 "val_macro_f1": float(score)}
        trace.append(entry)
        if best is None or score > best:
            best = score
            best_model = model
            best_model.metadata["val_macro_f1"] = float(score)
            best_model.metadata["trace_index"] = len(trace) - 1
    return best_model, trace


# ---------------------------------------------------------------------------
# model persistence: JSON with base64 float64 parameter blobs

def _b64_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape),
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _unb64_array(obj) -> np.ndarray:
    try:
        raw = base64.b64decode(obj["data"])
        arr = np.frombuffer(raw, dtype="<f8").reshape(obj["shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise FileFormatError(f"bad parameter blob: {e}")
    return arr.astype(np.float64)


def save_model(model: TrainedClassifier, path) -> Path:
    doc = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "kind": model.kind,
        "class_map": model.class_map,
        "hyperparams": model.hyperparams,
        "preproc_tag": model.preproc_tag,
        "provider_fingerprint": model.provider_fingerprint,
        "metadata": model.metadata,
        "params": {name: _b64_array(arr) for name, arr in model.params.items()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def load_model(path) -> TrainedClassifier:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FileFormatError(f"{path}: not valid JSON: {e}")
    required = ("schema_version", "kind", "class_map", "hyperparams", "params")
    missing = [k for k in required if k not in doc]
    if missing:
        raise FileFormatError(f"{path}: missing fields {missing}")
    if doc["schema_version"] != MODEL_SCHEMA_VERSION:
        raise FileFormatError(
            f"{path}: schema version {doc['schema_version']} not supported")
    if doc["kind"] not in KINDS:
        raise FileFormatError(f"{path}: unknown kind {doc['kind']!r}")
    params = {name: _unb64_array(blob) for name, blob in doc["params"].items()}
    return TrainedClassifier(
        kind=doc["kind"], class_map=list(doc["class_map"]), params=params,
        hyperparams=doc["hyperparams"], preproc_tag=doc.get("preproc_tag", ""),
        provider_fingerprint=doc.get("provider_fingerprint", ""),
        metadata=doc.get("metadata", {}))
