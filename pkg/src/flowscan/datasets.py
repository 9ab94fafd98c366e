"""Synthetic set generators, splits, jitter, and the FSET/CSV file formats.

FSET layout (little-endian)::

    b"FSET" | version u32 | N u32 | N x (n u32, d u32, n*d float64 point-major)
    [ b"META" | length u32 | UTF-8 JSON {"d", "labels", "meta"} ]

The trailing META block is optional; readers that stop after the N sets see
a plain FSET file.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (BadMagicError, ConfigError, DimensionMismatchError, FsetError,
                     TruncatedFileError)

FSET_MAGIC = b"FSET"
META_MAGIC = b"META"
FSET_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class SetDataset:
    sets: list                      # (n_i, d) float64 arrays
    d: int | None = None
    labels: list | None = None      # one of SPLITS per set, or None before splitting
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sets = [np.asarray(s, dtype=np.float64) for s in self.sets]
        for s in self.sets:
            if s.ndim != 2:
                raise ConfigError(f"each set must be a (n, d) array, got shape {s.shape}")
            if self.d is None:
                self.d = s.shape[1]
            elif s.shape[1] != self.d:
                raise DimensionMismatchError(f"set with d={s.shape[1]} in a d={self.d} dataset")
        if self.labels is not None and len(self.labels) != len(self.sets):
            raise ConfigError("labels must match the number of sets")

    def __len__(self):
        return len(self.sets)

    def subset(self, label):
        if self.labels is None:
            raise ConfigError("dataset has not been split")
        keep = [s for s, l in zip(self.sets, self.labels) if l == label]
        return SetDataset(keep, d=self.d, labels=[label] * len(keep), meta=dict(self.meta))

    def uniform_n(self):
        sizes = {s.shape[0] for s in self.sets}
        return sizes.pop() if len(sizes) == 1 else None

    def array(self):
        """Stack into (N, n, d); requires a common cardinality."""
        if self.uniform_n() is None:
            raise ConfigError("sets have varying cardinality; cannot stack")
        return np.stack(self.sets)


def batches_by_size(sets, batch_size):
    """Yield ``(indices, batch)`` with every batch of uniform cardinality."""
    if isinstance(sets, np.ndarray) and sets.ndim == 3:
        for start in range(0, len(sets), batch_size):
            idx = np.arange(start, min(start + batch_size, len(sets)))
            yield idx, sets[idx]
        return
    groups = {}
    for i, s in enumerate(sets):
        groups.setdefault(s.shape[0], []).append(i)
    for n in sorted(groups):
        members = groups[n]
        for start in range(0, len(members), batch_size):
            idx = np.array(members[start:start + batch_size])
            yield idx, np.stack([sets[i] for i in idx])


def sinusoid_means(n, first):
    """Mean path of the sinusoid sequence given the first point ``first`` (..., 2)."""
    k = np.arange(2, n + 1)
    c = np.cos(np.pi * k / n)
    a = first[..., :1] * c
    b = np.cos(np.pi * k / n + first[..., 1:2])
    return np.stack([a, b], axis=-1)


def gen_sinusoid(N, n, seed, noise_sd=None, shuffle=True):
    """Shuffled noisy sinusoid sequences, d=2.

    ``noise_sd`` defaults to ``1/n``; the first point's second coordinate uses
    ``noise_sd * sqrt(1 + (pi/3)^2)``. Points ``k = 2..n`` follow the cosine
    path anchored at the first point.
    """
    if N < 0 or n < 2:
        raise ConfigError("gen_sinusoid needs N >= 0 and n >= 2")
    sd = 1.0 / n if noise_sd is None else float(noise_sd)
    if sd < 0:
        raise ConfigError("noise_sd must be >= 0")
    rng = np.random.default_rng(seed)
    x = np.empty((N, n, 2))
    x[:, 0, 0] = 2.0 + sd * rng.standard_normal(N)
    x[:, 0, 1] = sd * math.sqrt(1.0 + (math.pi / 3) ** 2) * rng.standard_normal(N)
    x[:, 1:] = sinusoid_means(n, x[:, 0]) + sd * rng.standard_normal((N, n - 1, 2))
    if shuffle:
        order = np.argsort(rng.random((N, n)), axis=1)
        x = np.take_along_axis(x, order[:, :, None], axis=1)
    meta = {"generator": "sinusoid", "N": N, "n": n, "seed": seed, "noise_sd": sd}
    return SetDataset(list(x), d=2, meta=meta)


def _square_boundary(t):
    """Map t in [0, 4) onto the boundary of the square [-1, 1]^2."""
    side = np.floor(t).astype(int) % 4
    u = 2.0 * (t - np.floor(t)) - 1.0
    xs = np.select([side == 0, side == 1, side == 2], [u, np.ones_like(u), -u], -np.ones_like(u))
    ys = np.select([side == 0, side == 1, side == 2], [-np.ones_like(u), u, np.ones_like(u)], -u)
    return np.stack([xs, ys], axis=-1)


def gen_shape_clouds(N, n, shape="circle", radius_range=(0.5, 2.0), noise_sd=0.05, seed=0,
                     center_range=(-1.0, 1.0)):
    """Point clouds on random shapes: each set draws a radius and center
    uniformly, then ``n`` boundary points i.i.d. plus isotropic noise."""
    lo, hi = radius_range
    if not 0 < lo <= hi:
        raise ConfigError(f"invalid radius_range {radius_range}")
    if noise_sd < 0:
        raise ConfigError("noise_sd must be >= 0")
    if shape not in ("circle", "square"):
        raise ConfigError(f"shape must be 'circle' or 'square', got {shape!r}")
    rng = np.random.default_rng(seed)
    radius = rng.uniform(lo, hi, size=(N, 1, 1))
    center = rng.uniform(center_range[0], center_range[1], size=(N, 1, 2))
    if shape == "circle":
        theta = rng.uniform(0.0, 2.0 * np.pi, size=(N, n))
        unit = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    else:
        unit = _square_boundary(rng.uniform(0.0, 4.0, size=(N, n)))
    x = center + radius * unit + noise_sd * rng.standard_normal((N, n, 2))
    meta = {"generator": shape, "N": N, "n": n, "seed": seed, "noise_sd": noise_sd,
            "radius_range": list(radius_range), "center_range": list(center_range)}
    return SetDataset(list(x), d=2, meta=meta)


def split(dataset, fractions=(0.8, 0.1, 0.1), seed=0):
    """Label every set train/val/test by a seeded shuffle."""
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    N = len(dataset)
    cuts = np.rint(np.cumsum(fr) * N).astype(int)
    cuts[-1] = N
    perm = np.random.default_rng(seed).permutation(N)
    labels = [None] * N
    start = 0
    for name, stop in zip(SPLITS, cuts):
        for i in perm[start:stop]:
            labels[i] = name
        start = stop
    meta = dict(dataset.meta, split_seed=seed, split_fractions=fr.tolist())
    return SetDataset(dataset.sets, d=dataset.d, labels=labels, meta=meta)


def jitter(dataset, sd, seed=0):
    if sd < 0:
        raise ConfigError("jitter sd must be >= 0")
    if sd == 0:
        return SetDataset([s.copy() for s in dataset.sets], d=dataset.d,
                          labels=dataset.labels, meta=dict(dataset.meta))
    rng = np.random.default_rng(seed)
    sets = [s + sd * rng.standard_normal(s.shape) for s in dataset.sets]
    return SetDataset(sets, d=dataset.d, labels=dataset.labels, meta=dict(dataset.meta, jitter_sd=sd))


def write_fset(dataset, path):
    parts = [FSET_MAGIC, struct.pack("<II", FSET_VERSION, len(dataset))]
    for s in dataset.sets:
        parts.append(struct.pack("<II", *s.shape))
        parts.append(np.ascontiguousarray(s, dtype="<f8").tobytes())
    trailer = json.dumps({"d": dataset.d, "labels": dataset.labels, "meta": dataset.meta},
                         sort_keys=True).encode("utf-8")
    parts += [META_MAGIC, struct.pack("<I", len(trailer)), trailer]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, k):
        if self.pos + k > len(self.buf):
            raise TruncatedFileError(f"file truncated at byte {len(self.buf)} (needed {self.pos + k})")
        out = self.buf[self.pos:self.pos + k]
        self.pos += k
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def remaining(self):
        return len(self.buf) - self.pos


def read_fset(path, expected_d=None):
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.remaining() < 4 or r.take(4) != FSET_MAGIC:
        raise BadMagicError(f"{path}: not an FSET file")
    version = r.u32()
    if version != FSET_VERSION:
        raise FsetError(f"{path}: unsupported FSET version {version}")
    N = r.u32()
    sets = []
    d = None
    for _ in range(N):
        n, dd = r.u32(), r.u32()
        if d is None:
            d = dd
        elif dd != d:
            raise DimensionMismatchError(f"{path}: set with d={dd} after sets with d={d}")
        sets.append(np.frombuffer(r.take(8 * n * dd), dtype="<f8").astype(np.float64).reshape(n, dd))
    labels, meta = None, {}
    if r.remaining():
        if r.take(4) != META_MAGIC:
            raise FsetError(f"{path}: unexpected trailing bytes")
        info = json.loads(r.take(r.u32()).decode("utf-8"))
        if r.remaining():
            raise FsetError(f"{path}: unexpected trailing bytes")
        labels, meta = info.get("labels"), info.get("meta", {})
        if d is None:
            d = info.get("d")
        elif info.get("d") not in (None, d):
            raise DimensionMismatchError(f"{path}: header says d={info.get('d')}, sets have d={d}")
    if expected_d is not None and d is not None and d != expected_d:
        raise DimensionMismatchError(f"{path}: expected d={expected_d}, file has d={d}")
    return SetDataset(sets, d=d, labels=labels, meta=meta)


def read_csv(path):
    """CSV with header ``set_id, v1, ..., vd``; rows grouped by set_id in
    order of first appearance."""
    groups = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "set_id" or len(header) < 2:
            raise FsetError(f"{path}: CSV header must be 'set_id,v1,...,vd'")
        d = len(header) - 1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise DimensionMismatchError(f"{path}:{lineno}: expected {d + 1} columns, got {len(row)}")
            groups.setdefault(row[0].strip(), []).append([float(v) for v in row[1:]])
    sets = [np.array(rows) for rows in groups.values()]
    return SetDataset(sets, d=d, meta={"source": str(path), "set_ids": list(groups)})


def write_csv(dataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["set_id"] + [f"v{j + 1}" for j in range(dataset.d or 0)])
        for i, s in enumerate(dataset.sets):
            for row in s:
                w.writerow([i] + [repr(float(v)) for v in row])
