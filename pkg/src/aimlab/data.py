"""Synthetic multimodal Gaussian class-mean mixtures and the ``mmds`` text format.

Each modality ``m`` gets its own random unit-norm class means. A sample of
class ``y`` is ``snr[m] * mean[y] + noise`` with standard Gaussian noise, so
``snr`` sets how informative each modality is and ordering it fixes which
modality dominates.

File format (one set per file)::

    mmds v1 M=2 K=6 dims=16,16 n=1200
    3;0.12,-1.5,...;0.7,...

Features are written with ``repr`` (shortest round-trip decimal).
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    def __init__(self, msg: str, line: int):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass
class DatasetSpec:
    M: int = 2
    K: int = 6
    dims: list = field(default_factory=lambda: [16, 16])
    n_train: int = 1200
    n_test: int = 300
    snr: list = field(default_factory=lambda: [1.5, 0.6])
    seed: int = 0

    def validate(self) -> None:
        if self.M < 2 or self.K < 2:
            raise ValueError("need M >= 2 modalities and K >= 2 classes")
        if len(self.dims) != self.M or len(self.snr) != self.M:
            raise ValueError("dims and snr need one entry per modality")
        if min(self.dims) < 1 or self.n_train < 1 or self.n_test < 1:
            raise ValueError("dims and sample counts must be positive")
        if min(self.snr) < 0:
            raise ValueError("snr must be nonnegative")


@dataclass
class MultimodalSet:
    """``x[m]`` is an (n, dims[m]) array; ``y`` holds n class indices."""

    x: list
    y: np.ndarray
    K: int

    @property
    def M(self) -> int:
        return len(self.x)

    @property
    def dims(self) -> list:
        return [xm.shape[1] for xm in self.x]

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def subset(self, idx) -> "MultimodalSet":
        return MultimodalSet([xm[idx] for xm in self.x], self.y[idx], self.K)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MultimodalSet):
            return NotImplemented
        return (self.K == other.K and np.array_equal(self.y, other.y)
                and len(self.x) == len(other.x)
                and all(a.shape == b.shape and np.array_equal(a, b)
                        for a, b in zip(self.x, other.x)))


def class_means(spec: DatasetSpec) -> list:
    rng = np.random.default_rng(spec.seed)
    means = []
    for d in spec.dims:
        mu = rng.standard_normal((spec.K, d))
        means.append(mu / np.linalg.norm(mu, axis=1, keepdims=True))
    return means


def _draw(spec: DatasetSpec, means: list, n: int, rng) -> MultimodalSet:
    y = np.arange(n) % spec.K
    x = [spec.snr[m] * means[m][y] + rng.standard_normal((n, spec.dims[m]))
         for m in range(spec.M)]
    return MultimodalSet(x, y, spec.K)


def generate(spec: DatasetSpec) -> tuple:
    """Return ``(train, test)``, fully determined by ``spec.seed``."""
    spec.validate()
    means = class_means(spec)
    rng = np.random.default_rng([spec.seed, 1])
    train = _draw(spec, means, spec.n_train, rng)
    test = _draw(spec, means, spec.n_test, rng)
    return train, test


def nearest_class_mean_accuracy(train: MultimodalSet, test: MultimodalSet, m: int) -> float:
    """Accuracy of a nearest-centroid classifier on modality ``m`` alone."""
    cent = np.stack([train.x[m][train.y == k].mean(axis=0) for k in range(train.K)])
    d = ((test.x[m][:, None, :] - cent[None]) ** 2).sum(axis=2)
    return float(np.mean(d.argmin(axis=1) == test.y))


def save(data: MultimodalSet, path) -> None:
    dims = ",".join(str(d) for d in data.dims)
    lines = [f"mmds v1 M={data.M} K={data.K} dims={dims} n={len(data)}"]
    for i in range(len(data)):
        feats = [",".join(repr(float(v)) for v in xm[i]) for xm in data.x]
        lines.append(";".join([str(int(data.y[i]))] + feats))
    Path(path).write_text("\n".join(lines) + "\n")


_HEADER = re.compile(r"^mmds v1 M=(\d+) K=(\d+) dims=([\d,]+) n=(\d+)$")


def load(path) -> MultimodalSet:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ParseError("empty file, missing header", 1)
    match = _HEADER.match(lines[0].strip())
    if not match:
        raise ParseError(f"bad header {lines[0]!r}", 1)
    M, K, n = int(match[1]), int(match[2]), int(match[4])
    dims = [int(d) for d in match[3].split(",")]
    if len(dims) != M:
        raise ParseError(f"header lists {len(dims)} dims for M={M}", 1)
    body = [(no, ln) for no, ln in enumerate(lines[1:], start=2) if ln.strip()]
    if len(body) != n:
        raise ParseError(f"expected {n} samples, found {len(body)}", len(lines) + 1)
    x = [np.empty((n, d)) for d in dims]
    y = np.empty(n, dtype=np.int64)
    for i, (lineno, ln) in enumerate(body):
        fields = ln.split(";")
        if len(fields) != M + 1:
            raise ParseError(f"expected {M + 1} fields, found {len(fields)}", lineno)
        try:
            y[i] = int(fields[0])
            for m in range(M):
                vals = [float(v) for v in fields[m + 1].split(",")]
                if len(vals) != dims[m]:
                    raise ParseError(
                        f"modality {m} has {len(vals)} features, expected {dims[m]}", lineno)
                x[m][i] = vals
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(str(exc), lineno) from None
        if not 0 <= y[i] < K:
            raise ParseError(f"label {y[i]} outside [0, {K})", lineno)
        if not all(np.all(np.isfinite(xm[i])) for xm in x):
            raise ParseError("non-finite feature", lineno)
    return MultimodalSet(x, y, K)
