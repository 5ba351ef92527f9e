"""Synthetic domain shifts and embedding ingestion."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

UNLABELED = -1


@dataclass(frozen=True)
class ShiftSpec:
    n_classes: int = 6
    dim: int = 16
    per_class: int = 200
    separation: float = 3.0
    spread: float = 0.6
    rotation_deg: float = 30.0
    translation: tuple[float, ...] | None = None
    translation_scale: float = 4.0
    extra_noise: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.separation <= 0 or self.spread <= 0:
            raise ValueError("separation and spread must be positive")
        if self.n_classes < 2 or self.dim < 2 or self.per_class < 1:
            raise ValueError("need >= 2 classes, dim >= 2 and >= 1 sample per class")
        if self.translation is not None and len(self.translation) != self.dim:
            raise ValueError("translation must have length dim")


@dataclass
class LabeledSet:
    inputs: np.ndarray
    labels: np.ndarray
    domain_tag: str = ""
    domains: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels must have equal lengths")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def has_labels(self) -> bool:
        return bool(np.all(self.labels >= 0))

    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def unlabeled(self) -> UnlabeledView:
        return UnlabeledView(self.inputs)

    def subset(self, index) -> LabeledSet:
        doms = None if self.domains is None else self.domains[index]
        return LabeledSet(self.inputs[index], self.labels[index], self.domain_tag, doms)


@dataclass(frozen=True)
class UnlabeledView:
    """What the adaptation loop is allowed to see of a target set."""

    inputs: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]


def _rotation(dim: int, angle_rad: float, rng: np.random.Generator) -> np.ndarray:
    """Rotation by ``angle_rad`` in a random 2-D plane, identity elsewhere."""
    basis, _ = np.linalg.qr(rng.normal(size=(dim, 2)))
    u, v = basis[:, 0], basis[:, 1]
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return (np.eye(dim)
            + (c - 1.0) * (np.outer(u, u) + np.outer(v, v))
            + s * (np.outer(v, u) - np.outer(u, v)))


def _draw(spec: ShiftSpec, centers: np.ndarray, rng: np.random.Generator):
    labels = np.repeat(np.arange(spec.n_classes), spec.per_class)
    x = centers[labels] + rng.normal(0.0, spec.spread, (labels.size, spec.dim))
    return x, labels


def generate_shift(spec: ShiftSpec) -> tuple[LabeledSet, LabeledSet]:
    """Gaussian class blobs; the target copy is rotated, translated and jittered.

    Source and target draw their samples from independent streams with the
    same rules, so the identity transform yields identically distributed
    domains.  Both sets come back in a seeded random order.
    """
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    s_geom, s_src, s_tgt, s_noise, s_order = (np.random.default_rng(s) for s in root.spawn(5))
    dirs = s_geom.normal(size=(spec.n_classes, spec.dim))
    centers = spec.separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    rot = _rotation(spec.dim, math.radians(spec.rotation_deg), s_geom)
    if spec.translation is not None:
        shift = np.asarray(spec.translation, dtype=np.float64)
    else:
        t = s_geom.normal(size=spec.dim)
        shift = spec.translation_scale * t / np.linalg.norm(t)

    xs, ys = _draw(spec, centers, s_src)
    xt, yt = _draw(spec, centers, s_tgt)
    xt = xt @ rot.T + shift
    if spec.extra_noise > 0:
        xt = xt + s_noise.normal(0.0, spec.extra_noise, xt.shape)
    # arrival order is shuffled so online streams are not sorted by class
    ps, pt = s_order.permutation(len(ys)), s_order.permutation(len(yt))
    return LabeledSet(xs[ps], ys[ps], "source"), LabeledSet(xt[pt], yt[pt], "target")


BLOBS_ROT30 = ShiftSpec()


def pool_sources(sets: list[LabeledSet], n_classes: int | None = None) -> LabeledSet:
    """Concatenate source sets in order; per-sample origin kept only as metadata.

    Sets must share the input width.  Without an explicit ``n_classes`` every
    set must also span the same number of classes.
    """
    if not sets:
        raise ValueError("pool_sources: nothing to pool")
    dim = sets[0].dim
    for s in sets:
        if s.dim != dim:
            raise ValueError(f"pool_sources: dimension mismatch {s.dim} vs {dim}")
    counts = {s.n_classes() for s in sets}
    if n_classes is None and len(counts) > 1:
        raise ValueError(f"pool_sources: class count mismatch {sorted(counts)}")
    if n_classes is not None and max(counts) > n_classes:
        raise ValueError(f"pool_sources: labels exceed {n_classes} classes")
    if len(sets) == 1:
        return sets[0]
    tags = [s.domain_tag or f"domain{i}" for i, s in enumerate(sets)]
    domains = np.concatenate([np.full(len(s), i) for i, s in enumerate(sets)])
    return LabeledSet(
        np.concatenate([s.inputs for s in sets]),
        np.concatenate([s.labels for s in sets]),
        "pooled:" + "+".join(tags),
        domains,
    )


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def save_csv(path, data: LabeledSet, domain_column: bool = False) -> None:
    path = Path(path)
    header = [f"f{i}" for i in range(data.dim)] + ["label"]
    if domain_column:
        header.append("domain")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(data)):
            row = [repr(float(v)) for v in data.inputs[i]] + [int(data.labels[i])]
            if domain_column:
                row.append(data.domain_tag if data.domains is None else str(data.domains[i]))
            w.writerow(row)


def load_csv(path) -> LabeledSet:
    """Read ``f0,...,f{D-1},label[,domain]``; ``label = -1`` marks unlabeled rows."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        n_feat = sum(1 for h in header if h.startswith("f") and h[1:].isdigit())
        expected = [f"f{i}" for i in range(n_feat)] + ["label"]
        has_domain = len(header) == n_feat + 2 and header[-1] == "domain"
        if header[:n_feat + 1] != expected or len(header) not in (n_feat + 1, n_feat + 2) \
                or (len(header) == n_feat + 2 and not has_domain):
            raise ValueError(f"{path}:1: header must be f0,...,f{{D-1}},label[,domain]")
        inputs, labels, domains = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                inputs.append([float(v) for v in row[:n_feat]])
                labels.append(int(row[n_feat]))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value") from None
            if not all(math.isfinite(v) for v in inputs[-1]):
                raise ValueError(f"{path}:{lineno}: non-finite feature")
            if labels[-1] < UNLABELED:
                raise ValueError(f"{path}:{lineno}: label must be >= -1")
            if has_domain:
                domains.append(row[-1])
    arr = np.array(inputs, dtype=np.float64).reshape(len(inputs), n_feat)
    tag = domains[0] if domains and len(set(domains)) == 1 else path.stem
    doms = np.array(domains) if has_domain and len(set(domains)) > 1 else None
    return LabeledSet(arr, np.array(labels, dtype=np.int64), tag, doms)


def save_binary(path, matrix: np.ndarray, columns: list[str]) -> Path:
    """Little-endian float64 dump with a JSON sidecar naming shape and columns."""
    path = Path(path)
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != len(columns):
        raise ValueError("save_binary: column names must match matrix width")
    matrix.astype("<f8").tofile(path)
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps({"dtype": "<f8", "shape": list(matrix.shape),
                                   "columns": list(columns)}, indent=2))
    return sidecar


def load_binary(path) -> tuple[np.ndarray, list[str]]:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    flat = np.fromfile(path, dtype="<f8")
    return flat.reshape(meta["shape"]).astype(np.float64), meta["columns"]
