"""Node featurisation and landmark datasets.

Landmarks are normalised to zero centroid and unit RMS radius, appearance
descriptors are reduced with PCA fitted on the training split, and the two
are concatenated coordinates-first into node features.
"""
from __future__ import annotations

import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, DimensionError, GlareIOError, SchemaError
from .numerics import as_matrix

log = logging.getLogger(__name__)

FEATURE_MODES = ("joint", "position", "appearance")
DEFAULT_CLASS_NAMES = ("neutral", "happy", "sad", "surprise", "fear", "disgust", "anger", "contempt")
FORMAT_VERSION = 1


@dataclass
class RawSample:
    id: str
    label: int
    landmarks: np.ndarray  # (N, 3)
    appearance: np.ndarray | None = None  # (N, f_raw)

    def __eq__(self, other):
        if not isinstance(other, RawSample):
            return NotImplemented
        if self.id != other.id or self.label != other.label:
            return False
        if not np.array_equal(self.landmarks, other.landmarks):
            return False
        if (self.appearance is None) != (other.appearance is None):
            return False
        return self.appearance is None or np.array_equal(self.appearance, other.appearance)


@dataclass
class Dataset:
    samples: list[RawSample]
    splits: dict[str, list[int]]
    n_classes: int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.class_names:
            self.class_names = default_class_names(self.n_classes)
        seen: set[int] = set()
        for name, idx in self.splits.items():
            overlap = seen.intersection(idx)
            if overlap:
                raise SchemaError(f"split {name!r} overlaps another split at {sorted(overlap)[:5]}")
            seen.update(idx)
            if any(i < 0 or i >= len(self.samples) for i in idx):
                raise SchemaError(f"split {name!r} references a sample index out of range")
        for s in self.samples:
            if not 0 <= s.label < self.n_classes:
                raise SchemaError(f"sample {s.id!r}: label {s.label} >= n_classes {self.n_classes}")

    @property
    def n_landmarks(self) -> int:
        return self.samples[0].landmarks.shape[0] if self.samples else 0

    @property
    def f_raw(self) -> int:
        a = self.samples[0].appearance if self.samples else None
        return 0 if a is None else a.shape[1]

    def split(self, name: str) -> list[RawSample]:
        return [self.samples[i] for i in self.splits.get(name, [])]

    def labels(self, name: str) -> np.ndarray:
        return np.array([self.samples[i].label for i in self.splits.get(name, [])], dtype=np.int64)


def default_class_names(n_classes: int) -> list[str]:
    if n_classes <= len(DEFAULT_CLASS_NAMES):
        return list(DEFAULT_CLASS_NAMES[:n_classes])
    return [f"class_{c}" for c in range(n_classes)]


def normalize_landmarks(landmarks) -> np.ndarray:
    """Centre on the centroid and scale to unit RMS distance from it."""
    p = as_matrix(landmarks, "landmarks", cols=3)
    if p.shape[0] < 2:
        raise DegenerateInputError("need at least 2 landmarks to normalise")
    centred = p - p.mean(axis=0)
    rms = math.sqrt(float(np.mean(np.einsum("ij,ij->i", centred, centred))))
    if rms == 0.0:
        raise DegenerateInputError("all landmarks coincide")
    return centred / rms


@dataclass
class PcaModel:
    mean: np.ndarray  # (f_raw,)
    components: np.ndarray  # (f, f_raw), orthonormal rows
    explained_variance: np.ndarray  # (f,)

    @property
    def f(self) -> int:
        return self.components.shape[0]

    @property
    def f_raw(self) -> int:
        return self.mean.shape[0]


def pca_fit(train_descriptors, f: int, seed: int | None = None) -> PcaModel:
    """Top-``f`` principal directions of the sample covariance.

    Components come out in descending eigenvalue order, each flipped so its
    largest-magnitude coordinate is positive. ``seed`` is accepted for API
    symmetry; the fit is deterministic.
    """
    X = as_matrix(train_descriptors, "descriptors")
    M, f_raw = X.shape
    if f < 1:
        raise ValueError(f"f must be >= 1, got {f}")
    if f > f_raw:
        raise DimensionError(f"cannot keep {f} components of {f_raw}-dimensional descriptors")
    if M <= f:
        raise DegenerateInputError(f"PCA needs more than f={f} samples, got {M}")
    mean = X.mean(axis=0)
    centred = X - mean
    cov = centred.T @ centred / (M - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:f]
    evals = np.clip(evals[order], 0.0, None)
    comps = evecs[:, order].T.copy()
    tol = max(evals.max(initial=0.0), 1.0) * f_raw * np.finfo(float).eps * 10
    n_small = int(np.sum(evals <= tol))
    if n_small:
        # eigh already returns an orthonormal basis, so the tail directions
        # complete the data span
        warnings.warn(f"descriptor covariance has rank below f={f}; padding "
                      f"{n_small} component(s) from the orthogonal complement", RuntimeWarning)
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(f), pivot])
    comps *= signs[:, None]
    return PcaModel(mean, comps, evals)


def pca_apply(model: PcaModel, descriptors) -> np.ndarray:
    D = as_matrix(descriptors, "descriptors")
    if D.shape[1] != model.f_raw:
        raise DimensionError(f"descriptors have width {D.shape[1]}, PCA expects {model.f_raw}")
    return (D - model.mean) @ model.components.T


def joint_features(norm_landmarks, appearance, mode: str = "joint") -> np.ndarray:
    """Row-wise ``[coords || appearance]``; ``mode`` zeroes one block."""
    p = as_matrix(norm_landmarks, "landmarks", cols=3)
    a = np.zeros((p.shape[0], 0)) if appearance is None else as_matrix(appearance, "appearance")
    if a.shape[0] != p.shape[0]:
        raise DimensionError(f"{p.shape[0]} landmark rows but {a.shape[0]} appearance rows")
    if mode not in FEATURE_MODES:
        raise ValueError(f"unknown feature mode {mode!r}; expected one of {FEATURE_MODES}")
    x = np.concatenate([p, a], axis=1)
    if mode == "position":
        x[:, 3:] = 0.0
    elif mode == "appearance":
        x[:, :3] = 0.0
    return x


@dataclass
class Featurizer:
    """Maps raw samples to ``(normalised coords, node features)``."""

    f: int
    mode: str = "joint"
    pca: PcaModel | None = None

    @classmethod
    def fit(cls, samples: list[RawSample], f: int, mode: str = "joint") -> "Featurizer":
        if f == 0 or not samples or samples[0].appearance is None:
            return cls(f, mode, None)
        stacked = np.concatenate([s.appearance for s in samples], axis=0)
        return cls(f, mode, pca_fit(stacked, f))

    @property
    def width(self) -> int:
        return self.f + 3

    def transform(self, sample: RawSample) -> tuple[np.ndarray, np.ndarray]:
        coords = normalize_landmarks(sample.landmarks)
        if self.pca is None:
            app = np.zeros((coords.shape[0], self.f))
        else:
            if sample.appearance is None:
                raise SchemaError(f"sample {sample.id!r} has no appearance descriptors")
            app = pca_apply(self.pca, sample.appearance)
        return coords, joint_features(coords, app, self.mode)

    def to_dict(self) -> dict:
        d = {"f": self.f, "mode": self.mode, "pca": None}
        if self.pca is not None:
            d["pca"] = {"mean": self.pca.mean.tolist(),
                        "components": self.pca.components.tolist(),
                        "explained_variance": self.pca.explained_variance.tolist()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Featurizer":
        pca = None
        if d.get("pca") is not None:
            p = d["pca"]
            pca = PcaModel(np.asarray(p["mean"], dtype=float),
                           np.asarray(p["components"], dtype=float).reshape(-1, len(p["mean"])),
                           np.asarray(p["explained_variance"], dtype=float))
        return cls(int(d["f"]), d.get("mode", "joint"), pca)


# --------------------------------------------------------------------------
# synthetic faces

_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


def face_template(n_landmarks: int) -> np.ndarray:
    """Deterministic dome of landmarks laid out on a golden-angle spiral."""
    i = np.arange(n_landmarks) + 0.5
    r = np.sqrt(i / n_landmarks)
    theta = i * _GOLDEN_ANGLE
    pts = np.stack([r * np.cos(theta), 1.25 * r * np.sin(theta), 0.5 * np.sqrt(1.0 - r ** 2)], axis=1)
    return normalize_landmarks(pts)


def _expression_fields(template: np.ndarray, n_groups: int, width: float,
                       rng: np.random.Generator) -> np.ndarray:
    """One smooth unit-peak displacement field per expression group, ``(G, N, 3)``."""
    n = template.shape[0]
    angles = 2.0 * np.pi * np.arange(n_groups) / n_groups
    anchors = np.stack([0.9 * np.cos(angles), 1.1 * np.sin(angles), np.zeros(n_groups)], axis=1)
    fields = np.zeros((n_groups, n, 3))
    for g in range(n_groups):
        offset = template - anchors[g]
        weight = np.exp(-np.sum(offset ** 2, axis=1) / (2.0 * width ** 2))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        radial = offset / np.maximum(np.linalg.norm(offset, axis=1, keepdims=True), 1e-12)
        u = 0.5 * radial + direction
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        fields[g] = weight[:, None] * u
    return fields


def synth_dataset(n_classes: int = 7, n_per_class: int = 200, n_landmarks: int = 68,
                  noise_scale: float = 0.05, seed: int = 0, *, magnitude: float = 0.8,
                  pair_shift: float = 0.6, pair_scale: float = 1.25, field_width: float = 1.0,
                  intensity_jitter: float = 3.0, texture_amplitude: float = 0.5, n_dist: int = 8,
                  n_texture: int = 16) -> Dataset:
    """Synthetic landmark faces with known class structure.

    Classes come in pairs sharing one smooth deformation field. The second
    member of a pair is the same expression seen from a different pose: the
    whole face is scaled by ``pair_scale`` and moved by ``pair_shift`` along
    a fixed direction. Landmark normalization removes that difference, so
    inside a pair only the sign of a texture code carried by the appearance
    descriptors tells the classes apart, while the deformation field (seen
    only in the geometry) identifies the pair.

    Per-sample expression intensity varies by ``intensity_jitter *
    noise_scale`` and every coordinate gets Gaussian jitter of
    ``noise_scale``. Appearance descriptors are the sorted distances from
    each (pre-expression) landmark to its ``n_dist`` nearest template
    points, followed by ``n_texture`` noisy texture channels.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if n_landmarks < 10:
        raise ValueError("need at least 10 landmarks")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")

    # fixed generator geometry, independent of the sampling seed
    structure_rng = np.random.default_rng(0x61A5E)
    template = face_template(n_landmarks)
    n_groups = (n_classes + 1) // 2
    fields = _expression_fields(template, n_groups, field_width, structure_rng)
    tex_dir = structure_rng.normal(size=n_texture)
    tex_dir /= np.linalg.norm(tex_dir)
    shift_dir = structure_rng.normal(size=3)
    shift_dir /= np.linalg.norm(shift_dir)
    m = min(n_dist, n_landmarks)

    rng = np.random.default_rng(seed)
    samples = []
    for c in range(n_classes):
        group, strength = divmod(c, 2)
        scale, shift = (pair_scale, pair_shift * shift_dir) if strength else (1.0, np.zeros(3))
        code = -1.0 if strength else 1.0
        for j in range(n_per_class):
            intensity = 1.0 + intensity_jitter * noise_scale * rng.normal()
            neutral = template + noise_scale * rng.normal(size=template.shape)
            landmarks = scale * (neutral + intensity * magnitude * fields[group]) + shift
            d2 = np.sum((neutral[:, None, :] - template[None, :, :]) ** 2, axis=-1)
            dists = np.sqrt(np.sort(d2, axis=1)[:, :m])
            texture = code * texture_amplitude * tex_dir + noise_scale * rng.normal(size=(n_landmarks, n_texture))
            samples.append(RawSample(f"s{c}_{j:05d}", c, landmarks, np.concatenate([dists, texture], axis=1)))

    split_rng = np.random.default_rng([seed, 1])
    splits = {"train": [], "val": [], "test": []}
    for c in range(n_classes):
        idx = c * n_per_class + split_rng.permutation(n_per_class)
        n_train = int(round(0.8 * n_per_class))
        n_val = int(round(0.1 * n_per_class))
        splits["train"].extend(idx[:n_train].tolist())
        splits["val"].extend(idx[n_train:n_train + n_val].tolist())
        splits["test"].extend(idx[n_train + n_val:].tolist())
    for k in splits:
        splits[k].sort()
    return Dataset(samples, splits, n_classes, default_class_names(n_classes))


def class_separation(dataset: Dataset) -> tuple[float, float]:
    """(min distance between class centroids, mean distance of a sample to
    its class centroid), over flattened raw landmark vectors."""
    X = np.stack([s.landmarks.ravel() for s in dataset.samples])
    y = np.array([s.label for s in dataset.samples])
    centroids = np.stack([X[y == c].mean(axis=0) for c in range(dataset.n_classes)])
    intra = float(np.mean(np.linalg.norm(X - centroids[y], axis=1)))
    diff = centroids[:, None, :] - centroids[None, :, :]
    dist = np.sqrt(np.sum(diff ** 2, axis=-1))
    inter = float(dist[~np.eye(dataset.n_classes, dtype=bool)].min())
    return inter, intra


# --------------------------------------------------------------------------
# JSONL I/O

def _header_path(path: str) -> str:
    return path + ".header.json"


def save_dataset(dataset: Dataset, path: str) -> None:
    """Write the header line followed by one JSON object per sample."""
    header = {"n_landmarks": dataset.n_landmarks, "n_classes": dataset.n_classes,
              "class_names": list(dataset.class_names), "f_raw": dataset.f_raw,
              "format_version": FORMAT_VERSION,
              "splits": {k: list(map(int, v)) for k, v in dataset.splits.items()}}
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(header) + "\n")
            for s in dataset.samples:
                rec = {"id": s.id, "label": int(s.label), "landmarks": s.landmarks.tolist()}
                if s.appearance is not None:
                    rec["appearance"] = s.appearance.tolist()
                fh.write(json.dumps(rec) + "\n")
    except OSError as exc:
        raise GlareIOError(f"cannot write dataset to {path}: {exc}") from exc


def _finite_rows(value, lineno: int, what: str, width: int | None) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"line {lineno}: {what} is not a numeric matrix") from exc
    if arr.ndim != 2 or (width is not None and arr.shape[1] != width):
        raise SchemaError(f"line {lineno}: {what} has shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SchemaError(f"line {lineno}: {what} contains NaN or Inf")
    return arr


def read_samples(path: str, require_labels: bool = True) -> tuple[dict, list[RawSample]]:
    """Parse a JSONL sample file into ``(header, samples)``.

    With ``require_labels=False`` a missing label is stored as ``-1``.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except OSError as exc:
        raise GlareIOError(f"cannot read dataset {path}: {exc}") from exc

    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append((lineno, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise GlareIOError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc

    header = None
    if records and isinstance(records[0][1], dict) and "n_landmarks" in records[0][1] \
            and "landmarks" not in records[0][1]:
        header = records.pop(0)[1]
    elif os.path.exists(_header_path(path)):
        try:
            with open(_header_path(path), encoding="utf-8") as fh:
                header = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise GlareIOError(f"cannot read header {_header_path(path)}: {exc}") from exc
    if header is None:
        raise SchemaError(f"{path}: missing dataset header")
    if not records:
        raise SchemaError(f"{path}: dataset contains no samples")
    try:
        n_landmarks = int(header["n_landmarks"])
        n_classes = int(header["n_classes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: header lacks n_landmarks/n_classes") from exc
    f_raw = header.get("f_raw")
    f_raw = int(f_raw) if f_raw else None

    samples = []
    for lineno, rec in records:
        if not isinstance(rec, dict) or "landmarks" not in rec:
            raise SchemaError(f"line {lineno}: sample needs 'landmarks'")
        label = rec.get("label", None if require_labels else -1)
        if label is None:
            raise SchemaError(f"line {lineno}: sample has no 'label'")
        if not isinstance(label, int) or label >= n_classes or (label < 0 and require_labels):
            raise SchemaError(f"line {lineno}: label {label!r} outside [0, {n_classes})")
        lm = _finite_rows(rec["landmarks"], lineno, "landmarks", 3)
        if lm.shape[0] != n_landmarks:
            raise SchemaError(f"line {lineno}: {lm.shape[0]} landmarks, header says {n_landmarks}")
        app = None
        if rec.get("appearance") is not None:
            app = _finite_rows(rec["appearance"], lineno, "appearance", f_raw)
            if app.shape[0] != n_landmarks:
                raise SchemaError(f"line {lineno}: appearance has {app.shape[0]} rows")
        samples.append(RawSample(str(rec.get("id", f"line{lineno}")), label, lm, app))
    if len({s.appearance is None for s in samples}) > 1:
        raise SchemaError(f"{path}: appearance present on some samples only")
    return header, samples


def load_dataset(path: str, format: str = "jsonl") -> Dataset:
    """Read a JSONL dataset; the header is the first line or ``<path>.header.json``."""
    if format != "jsonl":
        raise SchemaError(f"unsupported dataset format {format!r}")
    header, samples = read_samples(path)
    n_classes = int(header["n_classes"])
    splits = header.get("splits")
    if splits is None:
        perm = np.random.default_rng(0).permutation(len(samples))
        n_train = int(round(0.8 * len(samples)))
        n_val = int(round(0.1 * len(samples)))
        splits = {"train": sorted(perm[:n_train].tolist()),
                  "val": sorted(perm[n_train:n_train + n_val].tolist()),
                  "test": sorted(perm[n_train + n_val:].tolist())}
    try:
        splits = {str(k): [int(i) for i in v] for k, v in splits.items()}
    except (AttributeError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: malformed splits in header") from exc
    names = header.get("class_names") or default_class_names(n_classes)
    return Dataset(samples, splits, n_classes, list(names))
