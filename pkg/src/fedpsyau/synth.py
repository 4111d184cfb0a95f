"""Synthetic AU-conditioned optical-flow data, client partitioning and splits.

Each sample draws a subject, an emotion class and an AU activation vector
from the class prototype. Every active AU pushes a directional flow bump
into its primary ROIs (and an attenuated one into a few secondary ROIs).
Patches carry horizontal flow, vertical flow and optical strain; the
global flow map is the ROI flows splatted at the landmark positions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ConfigError
from .params import decode_arrays, encode_arrays
from .priors import AuCatalog, default_catalog

DATASET_MAGIC = b"FPDS"
SECONDARY_GAIN = 0.3

# 65 landmarks on a unit face plane, (x, y) with y pointing down.
_JAW = [(0.15, 0.70), (0.22, 0.82), (0.38, 0.93), (0.50, 0.96), (0.62, 0.93), (0.78, 0.82), (0.85, 0.70)]
_BROWS = [(0.18, 0.32), (0.24, 0.28), (0.30, 0.27), (0.36, 0.28), (0.42, 0.30),
          (0.58, 0.30), (0.64, 0.28), (0.70, 0.27), (0.76, 0.28), (0.82, 0.32)]
_NOSE = [(0.50, 0.38), (0.50, 0.45), (0.50, 0.52), (0.50, 0.58),
         (0.42, 0.62), (0.46, 0.63), (0.50, 0.64), (0.54, 0.63), (0.58, 0.62)]
_EYES = [(0.22, 0.40), (0.27, 0.37), (0.33, 0.37), (0.38, 0.40), (0.33, 0.42), (0.27, 0.42),
         (0.62, 0.40), (0.67, 0.37), (0.73, 0.37), (0.78, 0.40), (0.73, 0.42), (0.67, 0.42)]
_MOUTH = [(0.36, 0.76), (0.40, 0.73), (0.45, 0.71), (0.50, 0.72), (0.55, 0.71), (0.60, 0.73),
          (0.64, 0.76), (0.60, 0.80), (0.55, 0.82), (0.50, 0.83), (0.45, 0.82), (0.40, 0.80),
          (0.40, 0.76), (0.45, 0.75), (0.50, 0.75), (0.55, 0.75), (0.60, 0.76), (0.55, 0.77),
          (0.50, 0.78), (0.45, 0.77)]
_MIDPOINTS = [(0.50, 0.31), (0.35, 0.22), (0.65, 0.22), (0.25, 0.55), (0.32, 0.60), (0.68, 0.60), (0.75, 0.55)]
_AREAS = [("jaw", 7), ("brow", 10), ("nose", 9), ("eye", 12), ("mouth", 20), ("forehead", 3), ("cheek", 4)]

_UP, _DOWN = (0.0, -1.0), (0.0, 1.0)
_S = np.sqrt(0.5)

# AU id -> (primary ROIs with flow direction, secondary ROIs with direction)
AU_FLOW = {
    1: ({10: _UP, 11: _UP, 12: _UP, 13: _UP}, {28: _UP, 33: _UP}),
    2: ({7: _UP, 8: _UP, 15: _UP, 16: _UP}, {59: _UP, 60: _UP}),
    4: ({9: (_S, _S), 14: (-_S, _S), 58: _DOWN}, {29: _DOWN, 32: _DOWN}),
    5: ({27: _UP, 28: _UP, 33: _UP, 34: _UP}, {}),
    6: ({61: _UP, 62: _UP, 63: _UP, 64: _UP}, {26: _UP, 35: _UP}),
    7: ({30: _UP, 31: _UP, 36: _UP, 37: _UP}, {}),
    9: ({17: _UP, 18: _UP, 19: _UP}, {51: _UP, 53: _UP}),
    10: ({20: _UP, 21: _UP, 22: _UP, 23: _UP, 24: _UP, 25: _UP, 40: _UP, 41: _UP, 42: _UP}, {}),
    12: ({38: (-_S, -_S), 44: (_S, -_S), 50: (-_S, -_S), 54: (_S, -_S)}, {}),
    14: ({39: (1.0, 0.0), 43: (-1.0, 0.0), 45: (-1.0, 0.0), 49: (1.0, 0.0)}, {22: _UP, 24: _UP}),
    15: ({38: _DOWN, 44: _DOWN, 46: _DOWN, 48: _DOWN}, {}),
    17: ({2: _UP, 3: _UP, 4: _UP, 47: _UP, 55: _UP, 56: _UP, 57: _UP}, {}),
}

PROTOTYPES_3 = {
    "positive": {6: 0.9, 12: 1.0, 7: 0.4, 14: 0.2},
    "negative": {4: 1.0, 7: 0.5, 9: 0.4, 10: 0.4, 15: 0.5, 17: 0.5, 1: 0.2},
    "surprise": {1: 1.0, 2: 0.9, 5: 0.7},
}
PROTOTYPES_7 = {
    "happiness": {6: 0.9, 12: 1.0, 7: 0.3},
    "surprise": {1: 1.0, 2: 0.9, 5: 0.7},
    "disgust": {9: 1.0, 10: 0.7, 15: 0.3, 17: 0.4, 4: 0.3},
    "sadness": {1: 0.8, 4: 1.0, 15: 0.8, 17: 0.4},
    "anger": {4: 1.0, 5: 0.4, 7: 0.7, 10: 0.3, 17: 0.3},
    "fear": {1: 1.0, 2: 0.7, 4: 0.7, 5: 0.8, 7: 0.3},
    "contempt": {12: 0.6, 14: 1.0},
}
SINGLE_REGION = {"surprise"}


@dataclass(frozen=True)
class RoiLayout:
    """Landmark positions, area tags and the AU rendering tables."""

    coords: np.ndarray
    areas: tuple[str, ...]
    catalog: AuCatalog

    @classmethod
    def default(cls, catalog: AuCatalog | None = None) -> "RoiLayout":
        coords = np.array(_JAW + _BROWS + _NOSE + _EYES + _MOUTH + _MIDPOINTS)
        areas = tuple(a for a, n in _AREAS for _ in range(n))
        return cls(coords, areas, catalog or default_catalog())

    @property
    def n_rois(self) -> int:
        return len(self.coords)

    def flow_matrix(self) -> np.ndarray:
        """(n_aus, n_rois, 2) flow contributed by a unit-intensity AU."""
        au_ids = self.catalog.au_ids
        M = np.zeros((len(au_ids), self.n_rois, 2))
        for a, au in enumerate(au_ids):
            primary, secondary = AU_FLOW[au]
            for roi, d in secondary.items():
                M[a, roi] += SECONDARY_GAIN * np.asarray(d)
            for roi, d in primary.items():
                M[a, roi] += np.asarray(d)
        return M

    def primary_rois(self, au: int) -> tuple[int, ...]:
        return tuple(sorted(AU_FLOW[au][0]))

    def secondary_rois(self, au: int) -> tuple[int, ...]:
        return tuple(sorted(AU_FLOW[au][1]))

    def exclusive_rois(self, au: int) -> tuple[int, ...]:
        """Primary ROIs that no other AU touches at all."""
        others = set()
        for other, (p, s) in AU_FLOW.items():
            if other != au:
                others |= set(p) | set(s)
        return tuple(r for r in self.primary_rois(au) if r not in others)


@dataclass(frozen=True)
class GeneratorSpec:
    n_classes: int = 3
    prototypes: dict | None = None
    noise: float = 0.3
    au_flip: float = 0.02
    n_subjects: int = 30
    samples_per_subject: tuple[int, int] = (10, 30)
    subject_bias: float = 0.5
    of_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.noise < 0 or not 0.0 <= self.au_flip < 0.5:
            raise ConfigError("noise must be >= 0 and au_flip in [0, 0.5)", "generator")
        lo, hi = self.samples_per_subject
        if not 1 <= lo <= hi:
            raise ConfigError("samples_per_subject must satisfy 1 <= lo <= hi", "generator.samples_per_subject")
        if self.n_subjects < 1 or self.of_size < 5:
            raise ConfigError("need >= 1 subject and of_size >= 5", "generator")
        if len(self.class_prototypes()) != self.n_classes:
            raise ConfigError(f"{self.n_classes} classes but {len(self.class_prototypes())} prototypes", "generator")
        for name, proto in self.class_prototypes().items():
            if any(not 0.0 <= p <= 1.0 for p in proto.values()):
                raise ConfigError(f"prototype {name!r} has probabilities outside [0, 1]", "generator.prototypes")

    def class_prototypes(self) -> dict:
        if self.prototypes is not None:
            return self.prototypes
        if self.n_classes == 3:
            return PROTOTYPES_3
        if self.n_classes == 7:
            return PROTOTYPES_7
        raise ConfigError(f"no default prototypes for {self.n_classes} classes", "generator.prototypes")

    def class_names(self) -> list[str]:
        return list(self.class_prototypes())

    def activation_probs(self, catalog: AuCatalog) -> np.ndarray:
        """(n_classes, n_aus) label probabilities after symmetric flip noise."""
        P = np.zeros((self.n_classes, catalog.n_aus))
        for c, proto in enumerate(self.class_prototypes().values()):
            for au, p in proto.items():
                P[c, catalog.index(au)] = p
        return P * (1.0 - self.au_flip) + (1.0 - P) * self.au_flip


@dataclass
class Dataset:
    """Column store of samples; ``batch``-compatible with ``MERNet.loss``."""

    roi: np.ndarray  # (n, R, 3, 5, 5)
    of: np.ndarray  # (n, 3, S, S)
    au: np.ndarray  # (n, n_aus) of 0/1
    emotion: np.ndarray  # (n,)
    subject: np.ndarray  # (n,)
    n_classes: int = 3

    def __len__(self):
        return len(self.emotion)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.roi[idx], self.of[idx], self.au[idx], self.emotion[idx], self.subject[idx], self.n_classes)

    def __getitem__(self, i: int) -> "Sample":
        return Sample(self.roi[i], self.of[i], self.au[i], int(self.emotion[i]), int(self.subject[i]))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            yield self.subset(order[start : start + batch_size])

    def save(self, path):
        Path(path).write_bytes(encode_dataset(self))

    @classmethod
    def load(cls, path) -> "Dataset":
        return decode_dataset(Path(path).read_bytes())

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        return Dataset(
            *(np.concatenate([getattr(p, k) for p in parts]) for k in ("roi", "of", "au", "emotion", "subject")),
            n_classes=parts[0].n_classes,
        )


@dataclass(frozen=True)
class Sample:
    roi_patches: np.ndarray
    global_of: np.ndarray
    au_labels: np.ndarray
    emotion: int
    subject_id: int

    def to_json(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "emotion": self.emotion,
            "au_labels": [int(v) for v in self.au_labels],
            "roi_energy": np.round((self.roi_patches[:, :2] ** 2).sum(axis=(1, 2, 3)), 6).tolist(),
            "global_of_shape": list(self.global_of.shape),
        }


def encode_dataset(ds: Dataset) -> bytes:
    return encode_arrays(
        [("roi", ds.roi), ("of", ds.of), ("au", ds.au), ("emotion", ds.emotion), ("subject", ds.subject),
         ("n_classes", np.array([ds.n_classes]))],
        magic=DATASET_MAGIC,
    )


def decode_dataset(blob: bytes) -> Dataset:
    cols = dict(decode_arrays(blob, magic=DATASET_MAGIC))
    return Dataset(
        cols["roi"], cols["of"], cols["au"], cols["emotion"].astype(np.int64), cols["subject"].astype(np.int64),
        int(cols["n_classes"][0]),
    )


def _bump() -> np.ndarray:
    yy, xx = np.mgrid[-2:3, -2:3]
    return np.exp(-(xx**2 + yy**2) / (2 * 1.2**2))


def optical_strain(flow: np.ndarray) -> np.ndarray:
    """Strain magnitude of a (..., 2, H, W) flow field via central differences."""
    u, v = flow[..., 0, :, :], flow[..., 1, :, :]
    uy, ux = np.gradient(u, axis=(-2, -1))
    vy, vx = np.gradient(v, axis=(-2, -1))
    return np.sqrt(ux**2 + vy**2 + 0.5 * (uy + vx) ** 2)


def _draw_labels(spec: GeneratorSpec, catalog: AuCatalog, rng: np.random.Generator):
    lo, hi = spec.samples_per_subject
    counts = rng.integers(lo, hi + 1, size=spec.n_subjects)
    pref = rng.normal(size=(spec.n_subjects, spec.n_classes)) * spec.subject_bias
    class_p = np.exp(pref - pref.max(axis=1, keepdims=True))
    class_p /= class_p.sum(axis=1, keepdims=True)
    gain = np.exp(spec.subject_bias * 0.3 * rng.normal(size=(spec.n_subjects, catalog.n_aus)))
    subject = np.repeat(np.arange(spec.n_subjects), counts)
    u = rng.random(len(subject))
    emotion = (u[:, None] > np.cumsum(class_p[subject], axis=1)).sum(axis=1)
    emotion = np.minimum(emotion, spec.n_classes - 1)
    probs = spec.activation_probs(catalog)
    au = (rng.random((len(subject), catalog.n_aus)) < probs[emotion]).astype(np.float64)
    # at least one active AU per sample: fall back to the most probable one
    empty = au.sum(axis=1) == 0
    au[empty, probs[emotion[empty]].argmax(axis=1)] = 1.0
    return subject, emotion, au, gain


def generate(spec: GeneratorSpec, layout: RoiLayout | None = None, labels_only: bool = False) -> Dataset:
    """Draw a dataset; labels and rendering use independent random streams."""
    layout = layout or RoiLayout.default()
    catalog = layout.catalog
    label_ss, render_ss = np.random.SeedSequence(spec.seed).spawn(2)
    subject, emotion, au, gain = _draw_labels(spec, catalog, np.random.default_rng(label_ss))
    n, s = len(subject), spec.of_size
    if labels_only:
        return Dataset(np.zeros((n, 0, 3, 5, 5)), np.zeros((n, 3, 0, 0)), au, emotion, subject, spec.n_classes)
    rng = np.random.default_rng(render_ss)
    amp = au * rng.uniform(0.6, 1.0, size=au.shape) * gain[subject]
    vec = np.einsum("na,ard->nrd", amp, layout.flow_matrix())
    flow = vec[..., None, None] * _bump()  # n r 2 5 5
    flow = flow + spec.noise * rng.normal(size=flow.shape)
    roi = np.concatenate([flow, optical_strain(flow)[:, :, None]], axis=2)

    flow_map = spec.noise * 0.5 * rng.normal(size=(n, 2, s, s))
    pad = np.zeros((n, 2, s + 4, s + 4))
    centers = np.rint(layout.coords * (s - 1)).astype(int)
    for k, (cx, cy) in enumerate(centers):
        pad[:, :, cy : cy + 5, cx : cx + 5] += flow[:, k]
    flow_map += pad[:, :, 2:-2, 2:-2]
    of = np.concatenate([flow_map, optical_strain(flow_map)[:, None]], axis=1)
    return Dataset(roi, of, au, emotion.astype(np.int64), subject.astype(np.int64), spec.n_classes)


def cooccurrence_closed_form(spec: GeneratorSpec, catalog: AuCatalog) -> np.ndarray:
    """P(AU_i and AU_j) under uniform class preference, ignoring the empty-label fallback."""
    P = spec.activation_probs(catalog)
    joint = np.einsum("ci,cj->ij", P, P) / spec.n_classes
    np.fill_diagonal(joint, P.mean(axis=0))
    return joint


def partition_clients(ds: Dataset, client_count: int, seed: int = 0) -> list[Dataset]:
    """Split subjects equally across clients; a subject never spans two clients.

    Subjects are shuffled with ``seed``; when they do not divide evenly the
    lowest client ids receive one extra subject.
    """
    if client_count < 1:
        raise ContractError(f"client_count must be >= 1, got {client_count}")
    subjects = np.unique(ds.subject)
    if len(subjects) < client_count:
        raise ContractError(f"{len(subjects)} subjects cannot fill {client_count} clients")
    order = np.random.default_rng(seed).permutation(subjects)
    base, extra = divmod(len(order), client_count)
    out, start = [], 0
    for c in range(client_count):
        take = base + (1 if c < extra else 0)
        mine = order[start : start + take]
        start += take
        out.append(ds.subset(np.flatnonzero(np.isin(ds.subject, mine))))
    return out


def _stratified_train_counts(class_counts: np.ndarray, n_train: int) -> np.ndarray:
    # largest-remainder allocation, at least one sample per class on each side
    share = class_counts * n_train / class_counts.sum()
    alloc = np.clip(np.floor(share).astype(int), 1, class_counts - 1)
    rem = share - np.floor(share)
    order = np.lexsort((np.arange(len(rem)), -rem))
    while alloc.sum() < n_train:
        for c in order:
            if alloc.sum() >= n_train:
                break
            if alloc[c] < class_counts[c] - 1:
                alloc[c] += 1
    while alloc.sum() > n_train:
        for c in order[::-1]:
            if alloc.sum() <= n_train:
                break
            if alloc[c] > 1:
                alloc[c] -= 1
    return alloc


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    test: np.ndarray
    stratified: bool
    seed: int


def split_train_test(ds: Dataset, ratio: float = 0.7, repeats: int = 10, seed: int = 0) -> list[Split]:
    """Independent seeded random train/test index splits.

    Stratified by class when every class present has at least two samples.
    """
    n = len(ds)
    if n == 0:
        raise ContractError("cannot split an empty dataset")
    if n < 4:
        raise ContractError(f"need at least 4 samples to split, got {n}")
    n_train = int(round(ratio * n))
    classes, counts = np.unique(ds.emotion, return_counts=True)
    stratify = bool(np.all(counts >= 2)) and len(classes) <= n_train <= n - len(classes)
    seeds = [int(ss.generate_state(1)[0]) for ss in np.random.SeedSequence(seed).spawn(repeats)]
    splits = []
    for s in seeds:
        rng = np.random.default_rng(s)
        if stratify:
            alloc = _stratified_train_counts(counts, n_train)
            train = []
            for c, k in zip(classes, alloc):
                members = rng.permutation(np.flatnonzero(ds.emotion == c))
                train.extend(members[:k])
            train = np.sort(np.array(train, dtype=np.intp))
        else:
            train = np.sort(rng.permutation(n)[:n_train])
        test = np.setdiff1d(np.arange(n), train)
        splits.append(Split(train, test, stratify, s))
    return splits


def dump_json(ds: Dataset, limit: int | None = None) -> str:
    rows = [ds[i].to_json() for i in range(len(ds) if limit is None else min(limit, len(ds)))]
    return json.dumps(rows, indent=1)
