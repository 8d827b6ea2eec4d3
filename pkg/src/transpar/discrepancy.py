"""Stage-one discrepancy estimate: domain probe, proxy A-distance, transfer ratio."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import ConfigurationError
from .model import Network, features as network_features

FEATURE_SOURCES = ("frozen_init", "raw_input")
PROBE_HIDDEN = 16
PROBE_TRAIN_FRACTION = 0.8


def frozen_features(net_init: Network, x, feature_source: str = "frozen_init") -> np.ndarray:
    """Features of the untrained extractor, or the inputs themselves for ``raw_input``."""
    if feature_source == "raw_input":
        return np.array(x, dtype=np.float64)
    if feature_source != "frozen_init":
        raise ConfigurationError(f"unknown feature_source {feature_source!r}")
    return network_features(net_init, x)


@dataclass
class DomainProbe:
    """Two-layer source-vs-target classifier (feature_dim -> 16 -> 1).

    Inputs are centred and scaled with statistics of the probe-train split
    before the first layer. ``complemented`` flips every prediction; it is
    set when the raw held-out error exceeded one half.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    epochs: int
    lr: float
    seed: int
    complemented: bool = False

    def _scaled(self, feats):
        return (np.asarray(feats, dtype=np.float64) - self.mean) / self.std

    def logit(self, feats) -> np.ndarray:
        h = np.maximum(self._scaled(feats) @ self.w1 + self.b1, 0.0)
        return (h @ self.w2 + self.b2)[:, 0]

    def predict(self, feats) -> np.ndarray:
        """1 = source, 0 = target."""
        pred = (self.logit(feats) > 0.0).astype(np.int64)
        return 1 - pred if self.complemented else pred


def clamp_error(raw_err: float) -> tuple[float, bool]:
    """Complement a worse-than-chance probe: returns ``(err, complemented)``."""
    if raw_err > 0.5:
        return 1.0 - raw_err, True
    return raw_err, False


def _glorot(rng, shape):
    a = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-a, a, size=shape)


def train_probe(features_source, features_target, epochs: int = 10, seed: int = 0,
                lr: float = 0.01, batch_size: int = 64):
    """Fit a domain probe on 80% of the pooled features, score it on the rest.

    Returns ``(probe, err)`` with ``err`` the held-out misclassification
    rate after complementing (so ``err <= 0.5``).
    """
    fs = np.asarray(features_source, dtype=np.float64)
    ft = np.asarray(features_target, dtype=np.float64)
    if len(fs) == 0 or len(ft) == 0:
        raise ConfigurationError("both feature sets must be nonempty")
    if fs.ndim != 2 or ft.ndim != 2 or fs.shape[1] != ft.shape[1]:
        raise ConfigurationError(f"feature shapes disagree: {fs.shape} vs {ft.shape}")
    x = np.vstack([fs, ft])
    d = np.concatenate([np.ones(len(fs)), np.zeros(len(ft))])
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(x))
    n_train = int(PROBE_TRAIN_FRACTION * len(x))
    tr, te = perm[:n_train], perm[n_train:]
    if len(te) == 0:
        raise ConfigurationError("too few samples for a held-out probe split")

    mean = x[tr].mean(axis=0)
    std = x[tr].std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    xs = (x - mean) / std

    dim = x.shape[1]
    params = {
        "w1": _glorot(rng, (dim, PROBE_HIDDEN)), "b1": np.zeros(PROBE_HIDDEN),
        "w2": _glorot(rng, (PROBE_HIDDEN, 1)), "b2": np.zeros(1),
    }
    for _ in range(epochs):
        order = tr[rng.permutation(len(tr))]
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            tape = dc.Tape()
            p = {k: tape.leaf(v) for k, v in params.items()}
            h = dc.relu(dc.affine(tape.constant(xs[idx]), p["w1"], p["b1"]))
            loss = dc.bce_with_logit(dc.affine(h, p["w2"], p["b2"]), d[idx])
            dc.backward(tape, loss)
            for k in params:
                params[k] = params[k] - lr * p[k].grad

    probe = DomainProbe(params["w1"], params["b1"], params["w2"], params["b2"],
                        mean, std, epochs, lr, seed)
    raw_err = float(np.mean(probe.predict(x[te]) != d[te]))
    err, probe.complemented = clamp_error(raw_err)
    return probe, err


def proxy_a_distance(err: float) -> float:
    if not 0.0 <= err <= 0.5:
        raise ConfigurationError(f"probe error must lie in [0, 0.5], got {err}")
    return 1.0 - 2.0 * err


def transfer_ratio(d_a: float, min_ratio: float = 0.1) -> float:
    """Share of each module's parameters treated as transferable.

    ``max(min_ratio, 1 - sigmoid(d_a)**2)``; equals 0.75 at ``d_a = 0``.
    """
    if not 0.0 < min_ratio < 1.0:
        raise ConfigurationError(f"min_ratio must lie in (0, 1), got {min_ratio}")
    s = 1.0 / (1.0 + math.exp(-d_a))
    return max(min_ratio, 1.0 - s * s)


@dataclass
class TransferRatioEstimate:
    err: float
    d_A: float
    tau: float
    M: float
    E_prime: int
    probe_seed: int
    feature_source: str

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "TransferRatioEstimate":
        try:
            raw = json.loads(Path(path).read_text())
            est = cls(**raw)
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigurationError(f"cannot read ratio file {path}: {exc}") from None
        if not 0.0 < est.tau <= 1.0:
            raise ConfigurationError(f"ratio file has tau={est.tau} outside (0, 1]")
        return est


def estimate_transfer_ratio(net_init: Network, x_source, x_target, *, epochs: int = 10,
                            seed: int = 0, min_ratio: float = 0.1, lr: float = 0.01,
                            feature_source: str = "frozen_init") -> TransferRatioEstimate:
    fs = frozen_features(net_init, x_source, feature_source)
    ft = frozen_features(net_init, x_target, feature_source)
    _, err = train_probe(fs, ft, epochs=epochs, seed=seed, lr=lr)
    d_a = proxy_a_distance(err)
    return TransferRatioEstimate(err, d_a, transfer_ratio(d_a, min_ratio), min_ratio,
                                 epochs, seed, feature_source)
