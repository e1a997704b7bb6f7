"""Synthetic shift benchmark: dataset generation, covariate shift, class
imbalance, vector augmentations, and the dataset file format.

Geometry: class clusters sit on a ring in a 2-d latent plane; each class
additionally owns a small fixed offset in the remaining latent dimensions.
The full latent space is embedded by a fixed random rotation. Covariate
shift transforms the plane coordinates only, so the ring cue degrades under
shift while the off-plane cue survives -- shifted data is hurt but not
hopeless, which is what adaptation needs.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from math import ceil, cos, pi, sin
from pathlib import Path

import numpy as np

from .errors import ConfigError, StorageError

SHIFT_KINDS = ("rotation", "scale", "translate", "composite")


@dataclass(frozen=True)
class GeneratorSpec:
    n_per_class: int = 500
    num_classes: int = 10
    input_dim: int = 32
    ring_radius: float = 5.0
    cluster_sigma: float = 1.0
    ambient_scale: float = 3.0
    seed: int = 0
    geometry_seed: int = 7

    def validate(self) -> "GeneratorSpec":
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.input_dim < 2:
            raise ConfigError("need at least 2 input dimensions")
        if self.n_per_class < 1:
            raise ConfigError("need at least 1 sample per class")
        return self

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_dict(d: dict) -> "GeneratorSpec":
        return GeneratorSpec(**d)


@dataclass(frozen=True)
class ShiftSpec:
    kind: str = "rotation"
    magnitude: float = 45.0  # degrees for rotation
    seed: int = 0

    def validate(self) -> "ShiftSpec":
        if self.kind not in SHIFT_KINDS:
            raise ConfigError(f"unknown shift kind {self.kind!r}")
        return self

    def to_dict(self) -> dict:
        return {"kind": self.kind, "magnitude": self.magnitude, "seed": self.seed}


@dataclass(frozen=True)
class ImbalanceSpec:
    imbalance_ratio: float = 100.0
    seed: int = 0

    def validate(self) -> "ImbalanceSpec":
        if self.imbalance_ratio < 1:
            raise ConfigError("imbalance ratio must be >= 1")
        return self


@dataclass(frozen=True)
class AugmentationPolicy:
    weak_sigma: float = 0.02
    strong_sigma: float = 0.10
    dropout_prob: float = 0.2
    scale_range: tuple[float, float] = (0.8, 1.25)

    def validate(self) -> "AugmentationPolicy":
        if self.weak_sigma > self.strong_sigma:
            raise ConfigError("weak jitter must not exceed strong jitter")
        if not 0 <= self.dropout_prob <= 1:
            raise ConfigError("dropout probability must be in [0, 1]")
        return self

    @staticmethod
    def identity() -> "AugmentationPolicy":
        return AugmentationPolicy(0.0, 0.0, 0.0, (1.0, 1.0))


class UnlabeledView:
    """Label-stripped window onto a dataset; exposes no label accessor."""

    __slots__ = ("features", "num_classes")

    def __init__(self, features: np.ndarray, num_classes: int):
        self.features = features
        self.num_classes = num_classes

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class Dataset:
    features: np.ndarray  # N x D float64
    labels: np.ndarray | None  # int64[N] or None
    num_classes: int
    domain_tag: str  # "source" | "target"
    spec: GeneratorSpec
    shift: ShiftSpec | None = None
    bucket_thresholds: tuple[int, int] | None = None  # (many >, few <)

    def __post_init__(self):
        if self.labels is not None:
            if len(self.labels) != len(self.features):
                raise ConfigError("labels and features disagree on N")
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise ConfigError("label out of range")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def class_counts(self) -> np.ndarray:
        if self.labels is None:
            raise ConfigError("dataset has no labels")
        return np.bincount(self.labels, minlength=self.num_classes)

    def unlabeled_view(self) -> UnlabeledView:
        return UnlabeledView(self.features, self.num_classes)


# ---------------------------------------------------------------------------
# geometry + generation


def _geometry(spec: GeneratorSpec) -> tuple[np.ndarray, np.ndarray]:
    """Class centers in latent coordinates and the embedding rotation."""
    rng = np.random.default_rng(spec.geometry_seed)
    d, c = spec.input_dim, spec.num_classes
    centers = np.zeros((c, d))
    angles = 2 * pi * np.arange(c) / c
    centers[:, 0] = spec.ring_radius * np.cos(angles)
    centers[:, 1] = spec.ring_radius * np.sin(angles)
    if d > 2:
        amb = rng.normal(size=(c, d - 2))
        amb *= spec.ambient_scale / np.linalg.norm(amb, axis=1, keepdims=True)
        centers[:, 2:] = amb
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    q *= np.sign(np.diag(r))  # make the decomposition unique
    return centers, q


def _latent_samples(spec: GeneratorSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    centers, _ = _geometry(spec)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(spec.num_classes), spec.n_per_class)
    noise = rng.normal(0.0, spec.cluster_sigma, size=(len(labels), spec.input_dim))
    return centers[labels] + noise, labels.astype(np.int64)


def generate(spec: GeneratorSpec) -> Dataset:
    """Draw a balanced source dataset for the spec."""
    spec.validate()
    latent, labels = _latent_samples(spec, spec.seed)
    _, q = _geometry(spec)
    return Dataset(latent @ q.T, labels, spec.num_classes, "source", spec)


def _plane_transform(latent: np.ndarray, shift: ShiftSpec) -> np.ndarray:
    """Apply the shift to the first two latent coordinates."""
    out = latent.copy()
    xy = out[:, :2]

    def rotate(points, degrees):
        a = degrees * pi / 180.0
        rot = np.array([[cos(a), -sin(a)], [sin(a), cos(a)]])
        return points @ rot.T

    if shift.kind == "rotation":
        xy = rotate(xy, shift.magnitude)
    elif shift.kind == "scale":
        xy = xy * (1.0 + shift.magnitude)
    elif shift.kind == "translate":
        xy = xy + np.array([shift.magnitude, 0.0])
    elif shift.kind == "composite":
        xy = rotate(xy, shift.magnitude)
        xy = xy * (1.0 + shift.magnitude / 100.0)
        xy = xy + np.array([shift.magnitude / 10.0, 0.0])
    out[:, :2] = xy
    return out


def apply_shift(src: Dataset, shift: ShiftSpec) -> Dataset:
    """Draw a target dataset: fresh latent samples, shifted in the plane.

    With magnitude 0 and the same seed the result equals the source draw
    exactly. Labels ride along for evaluation only; adaptation consumers go
    through unlabeled_view().
    """
    shift.validate()
    spec = src.spec
    latent, labels = _latent_samples(spec, shift.seed)
    latent = _plane_transform(latent, shift)
    _, q = _geometry(spec)
    return Dataset(latent @ q.T, labels, spec.num_classes, "target", spec, shift=shift,
                   bucket_thresholds=src.bucket_thresholds)


# ---------------------------------------------------------------------------
# long-tail subsampling


def longtail_counts(n_max: int, num_classes: int, ratio: float) -> np.ndarray:
    """Exponential decay over class index: round(n_max * ratio^(-c/(C-1)))."""
    c = np.arange(num_classes)
    counts = np.round(n_max * ratio ** (-c / (num_classes - 1))).astype(int)
    if counts.min() < 1:
        raise ConfigError(f"imbalance ratio {ratio} drives a class to 0 samples")
    return counts


def bucket_thresholds(n_max: int) -> tuple[int, int]:
    # 100/20 cutoffs at a 1280-per-class reference scale, rescaled to n_max
    return ceil(n_max * 100 / 1280), ceil(n_max * 20 / 1280)


def subsample_longtail(src: Dataset, imb: ImbalanceSpec) -> Dataset:
    imb.validate()
    if src.labels is None:
        raise ConfigError("long-tail subsampling needs labels")
    counts = src.class_counts
    if counts.min() != counts.max():
        raise ConfigError("long-tail subsampling expects a balanced source")
    n_max = int(counts.max())
    keep_counts = longtail_counts(n_max, src.num_classes, imb.imbalance_ratio)
    rng = np.random.default_rng(imb.seed)
    keep = []
    for c in range(src.num_classes):
        idx = np.flatnonzero(src.labels == c)
        chosen = rng.choice(idx, size=keep_counts[c], replace=False)
        keep.append(np.sort(chosen))
    keep = np.concatenate(keep)
    return Dataset(src.features[keep], src.labels[keep], src.num_classes,
                   src.domain_tag, src.spec, shift=src.shift,
                   bucket_thresholds=bucket_thresholds(n_max))


# ---------------------------------------------------------------------------
# augmentation


def augment(x: np.ndarray, policy: AugmentationPolicy, mode: str,
            rng: np.random.Generator) -> np.ndarray:
    """Weak: gaussian jitter. Strong: jitter, feature dropout, scale jitter."""
    policy.validate()
    x = np.asarray(x, dtype=np.float64)
    if mode == "weak":
        return x + rng.normal(0.0, 1.0, size=x.shape) * policy.weak_sigma
    if mode == "strong":
        out = x + rng.normal(0.0, 1.0, size=x.shape) * policy.strong_sigma
        if policy.dropout_prob > 0:
            out = out * (rng.random(size=x.shape) >= policy.dropout_prob)
        lo, hi = policy.scale_range
        out = out * rng.uniform(lo, hi, size=(x.shape[0], 1))
        return out
    raise ConfigError(f"unknown augmentation mode {mode!r}")


# ---------------------------------------------------------------------------
# dataset file format: u32 header length, UTF-8 JSON header,
# little-endian f64 feature block, optional u32 label block


def save_dataset(ds: Dataset, path) -> None:
    header = {
        "n": len(ds),
        "d": ds.dim,
        "c": ds.num_classes,
        "domain_tag": ds.domain_tag,
        "shift": ds.shift.to_dict() if ds.shift else None,
        "class_counts": [int(v) for v in ds.class_counts] if ds.labels is not None else None,
        "has_labels": ds.labels is not None,
        "generator": ds.spec.to_dict(),
        "bucket_thresholds": list(ds.bucket_thresholds) if ds.bucket_thresholds else None,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(struct.pack("<I", len(payload)))
            f.write(payload)
            f.write(ds.features.astype("<f8").tobytes())
            if ds.labels is not None:
                f.write(ds.labels.astype("<u4").tobytes())
    except OSError as e:
        raise StorageError(f"cannot write dataset {path}: {e}") from e


def load_dataset(path) -> Dataset:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read dataset {path}: {e}") from e
    if len(raw) < 4:
        raise StorageError(f"{path}: truncated dataset file")
    (hlen,) = struct.unpack("<I", raw[:4])
    try:
        header = json.loads(raw[4 : 4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise StorageError(f"{path}: corrupt dataset header: {e}") from e
    n, d = header["n"], header["d"]
    start = 4 + hlen
    feat_bytes = 8 * n * d
    if len(raw) < start + feat_bytes:
        raise StorageError(f"{path}: truncated feature block")
    features = np.frombuffer(raw[start : start + feat_bytes], dtype="<f8").reshape(n, d).copy()
    labels = None
    if header["has_labels"]:
        lab_start = start + feat_bytes
        if len(raw) < lab_start + 4 * n:
            raise StorageError(f"{path}: truncated label block")
        labels = np.frombuffer(raw[lab_start : lab_start + 4 * n], dtype="<u4").astype(np.int64)
    shift = ShiftSpec(**header["shift"]) if header.get("shift") else None
    bt = header.get("bucket_thresholds")
    return Dataset(features, labels, header["c"], header["domain_tag"],
                   GeneratorSpec.from_dict(header["generator"]), shift=shift,
                   bucket_thresholds=tuple(bt) if bt else None)
