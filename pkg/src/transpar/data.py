"""Synthetic source/target datasets under controlled distribution shift.

Three scenarios are built in, all two-class and two-dimensional:

``two_moons_rotation``
    The standard interleaved half-circles; the target domain is the source
    draw rotated by ``theta`` degrees about the origin.
``gaussian_translation``
    Two isotropic Gaussian blobs at (-1, 0) and (1, 0); the target means are
    shifted by ``translation``.
``target_label_shift``
    Two-moons class-conditionals in both domains; the source is balanced and
    the target follows ``proportions`` exactly (quota sampling).

The base draw of both domains comes from the same seeded stream, so with equal
sizes and zero shift the two domains coincide sample-for-sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .errors import ConfigurationError

SOURCE, TARGET = "source", "target"
DOMAIN_FLAG = {SOURCE: 1, TARGET: 0}
KINDS = ("two_moons_rotation", "gaussian_translation", "target_label_shift")
TRAIN_FRACTION = 0.8
N_CLASSES = 2

# stream tags for np.random.default_rng([seed, tag])
_BASE_STREAM, _SPLIT_STREAM, _TARGET_STREAM = 0, 1, 2


@dataclass(frozen=True)
class ShiftScenario:
    kind: str = "two_moons_rotation"
    theta: float = 30.0
    translation: tuple[float, float] = (1.5, 1.0)
    proportions: tuple[float, ...] = (0.8, 0.2)
    noise: float = 0.1
    n_source: int = 1000
    n_target: int = 1000

    def validate(self) -> "ShiftScenario":
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown scenario kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.theta < 180.0:
            raise ConfigurationError(f"theta must lie in [0, 180), got {self.theta}")
        if len(self.translation) != 2 or not all(math.isfinite(t) for t in self.translation):
            raise ConfigurationError("translation must be two finite floats")
        props = np.asarray(self.proportions, dtype=np.float64)
        if props.shape != (N_CLASSES,) or np.any(props < 0) or abs(props.sum() - 1.0) > 1e-9:
            raise ConfigurationError(
                f"proportions must be {N_CLASSES} non-negative values summing to 1, got {self.proportions}"
            )
        if not (self.noise >= 0.0 and math.isfinite(self.noise)):
            raise ConfigurationError(f"noise must be a non-negative float, got {self.noise}")
        if self.n_source < 10 or self.n_target < 10:
            raise ConfigurationError("n_source and n_target must both be >= 10")
        return self

    def params(self) -> dict:
        """Kind-specific parameters, as recorded in dataset metadata."""
        if self.kind == "two_moons_rotation":
            return {"theta": self.theta}
        if self.kind == "gaussian_translation":
            return {"translation": list(self.translation)}
        return {"proportions": list(self.proportions)}

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "theta": self.theta,
            "translation": list(self.translation),
            "proportions": list(self.proportions),
            "noise": self.noise,
            "n_source": self.n_source,
            "n_target": self.n_target,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ShiftScenario":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigurationError(f"unknown scenario fields: {sorted(unknown)}")
        kw = dict(raw)
        for key in ("translation", "proportions"):
            if key in kw:
                kw[key] = tuple(float(v) for v in kw[key])
        try:
            return cls(**kw).validate()
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None


class Sample(NamedTuple):
    x: np.ndarray
    y: int
    d: int


@dataclass(eq=False)
class DomainDataset:
    """Feature matrix plus labels for one domain and split.

    Reads of ``y`` on the target training split are counted in
    ``label_reads``; training code must leave that counter untouched.
    """

    x: np.ndarray
    labels: np.ndarray = field(repr=False)
    domain: str
    split: str
    scenario: ShiftScenario | None = None
    seed: int | None = None
    label_reads: int = 0

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.domain not in DOMAIN_FLAG:
            raise ConfigurationError(f"unknown domain {self.domain!r}")
        if self.x.ndim != 2 or self.labels.shape != (self.x.shape[0],):
            raise ConfigurationError("x must be [n,dim] with one label per row")

    @property
    def guarded(self) -> bool:
        return self.domain == TARGET and self.split == "train"

    @property
    def y(self) -> np.ndarray:
        if self.guarded:
            self.label_reads += 1
        return self.labels

    @property
    def d(self) -> np.ndarray:
        return np.full(len(self), DOMAIN_FLAG[self.domain], dtype=np.int64)

    def __len__(self):
        return self.x.shape[0]

    @property
    def samples(self) -> list[Sample]:
        flag = DOMAIN_FLAG[self.domain]
        return [Sample(row, int(lbl), flag) for row, lbl in zip(self.x, self.y)]

    def with_x(self, x: np.ndarray) -> "DomainDataset":
        return DomainDataset(x, self.labels, self.domain, self.split, self.scenario, self.seed)


def _moons(rng: np.random.Generator, counts, noise: float):
    n0, n1 = counts
    t0 = rng.uniform(0.0, math.pi, n0)
    t1 = rng.uniform(0.0, math.pi, n1)
    outer = np.column_stack([np.cos(t0), np.sin(t0)])
    inner = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    x = np.vstack([outer, inner])
    x = x + noise * rng.standard_normal(x.shape)
    y = np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)])
    return x, y


def _blobs(rng: np.random.Generator, counts, noise: float):
    n0, n1 = counts
    means = np.array([[-1.0, 0.0], [1.0, 0.0]])
    y = np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)])
    x = means[y] + noise * rng.standard_normal((n0 + n1, 2))
    return x, y


def quota_counts(proportions, n: int) -> list[int]:
    """Exact per-class counts summing to ``n`` (largest-remainder rounding)."""
    props = np.asarray(proportions, dtype=np.float64)
    raw = props * n
    counts = np.floor(raw).astype(int)
    short = n - counts.sum()
    # ties in the remainder go to the lower class index
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts.tolist()


def rotate(x: np.ndarray, theta_deg: float) -> np.ndarray:
    th = math.radians(theta_deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    return x @ rot.T


def _split(x, y, domain, scenario, seed, perm):
    n_train = int(TRAIN_FRACTION * len(perm))
    tr, te = perm[:n_train], perm[n_train:]
    return (
        DomainDataset(x[tr], y[tr], domain, "train", scenario, seed),
        DomainDataset(x[te], y[te], domain, "test", scenario, seed),
    )


def generate(scenario: ShiftScenario, seed: int):
    """Return ``((source_train, source_test), (target_train, target_test))``."""
    scenario.validate()
    balanced = (0.5, 0.5)

    def base_draw(n, proportions=balanced, stream=_BASE_STREAM):
        rng = np.random.default_rng([seed, stream])
        counts = quota_counts(proportions, n)
        if scenario.kind == "gaussian_translation":
            return _blobs(rng, counts, scenario.noise)
        return _moons(rng, counts, scenario.noise)

    xs, ys = base_draw(scenario.n_source)
    if scenario.kind == "target_label_shift":
        xt, yt = base_draw(scenario.n_target, scenario.proportions, _TARGET_STREAM)
    else:
        xt, yt = base_draw(scenario.n_target)
        if scenario.kind == "two_moons_rotation":
            xt = rotate(xt, scenario.theta)
        else:
            xt = xt + np.asarray(scenario.translation)

    source = _split(xs, ys, SOURCE, scenario, seed,
                    np.random.default_rng([seed, _SPLIT_STREAM]).permutation(scenario.n_source))
    target = _split(xt, yt, TARGET, scenario, seed,
                    np.random.default_rng([seed, _SPLIT_STREAM]).permutation(scenario.n_target))
    return source, target


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        if len(x) == 0:
            raise ConfigurationError("cannot standardize with an empty source split")
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        # summation rounding can leave a constant column with std ~1e-16;
        # detect constants exactly so they map to exact zeros
        const = np.all(x == x[0], axis=0)
        mean = np.where(const, x[0], mean)
        std = np.where(const, 0.0, std) + np.where(const, 1e-8, 0.0)
        return cls(mean, std)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, raw: dict) -> "Standardizer":
        return cls(np.asarray(raw["mean"], dtype=np.float64), np.asarray(raw["std"], dtype=np.float64))


def standardize(source_train: DomainDataset, *others: DomainDataset):
    """Rescale every dataset with per-feature statistics of ``source_train``.

    Returns ``(datasets, standardizer)`` where ``datasets`` starts with the
    rescaled source split followed by ``others`` in order.
    """
    scaler = Standardizer.fit(source_train.x)
    out = [ds.with_x(scaler.apply(ds.x)) for ds in (source_train, *others)]
    return out, scaler


def batches(dataset: DomainDataset, batch_size: int, epoch_seed) -> Iterator[tuple]:
    """Yield shuffled ``(x, y, d)`` minibatches; ``y`` is ``None`` for the target domain."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    n = len(dataset)
    perm = np.random.default_rng(epoch_seed).permutation(n)
    flag = DOMAIN_FLAG[dataset.domain]
    labels = dataset.labels if dataset.domain == SOURCE else None
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        y = labels[idx] if labels is not None else None
        yield dataset.x[idx], y, np.full(len(idx), flag, dtype=np.int64)
