"""Transferable-parameter SGD.

Each step scores every scalar of a module by ``|grad * weight|`` (or one of
the ablation criteria), keeps the top ``m_t`` as transferable and gives them
an ordinary gradient + signed-decay step, while the rest only decay toward
zero. Modules are partitioned independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericFailure
from .model import ROLES, ModuleRole, Network

CRITERIA = ("both", "weight_only", "grad_only")
MODES = ("iterative", "one_shot_start", "one_shot_last")


def importance(weights, grads, criterion: str = "both") -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if w.shape != g.shape:
        raise ConfigurationError(f"weights and grads differ in shape: {w.shape} vs {g.shape}")
    if criterion == "both":
        return np.abs(g * w)
    if criterion == "weight_only":
        return np.abs(w)
    if criterion == "grad_only":
        return np.abs(g)
    raise ConfigurationError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")


def partition_count(m: int, tau: float, role: ModuleRole = ModuleRole.FeatureExtractor,
                    adversarial: bool = True) -> int:
    """Number of transferable scalars in a module of size ``m``.

    An adversarial discriminator keeps ``(1 - tau) * m``; every other module
    keeps ``tau * m``. Floored, then clamped to ``[1, m]``.
    """
    if m < 1:
        raise ConfigurationError("module must have at least one parameter")
    share = 1.0 - tau if (role is ModuleRole.DomainDiscriminator and adversarial) else tau
    return min(m, max(1, math.floor(share * m)))


def partition(scores, m_t: int) -> np.ndarray:
    """Boolean mask of the ``m_t`` highest scores; ties favour the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    m = scores.shape[0]
    if not 1 <= m_t <= m:
        raise ConfigurationError(f"m_t={m_t} outside [1, {m}]")
    mask = np.zeros(m, dtype=bool)
    if m_t == m:
        mask[:] = True
        return mask
    # stable sort on the negated score keeps index order within ties
    order = np.argsort(-scores, kind="stable")
    mask[order[:m_t]] = True
    return mask


def positive_update(w, g, lr: float, weight_decay: float):
    """Gradient step plus decay toward zero: ``w - lr * (g + wd * sgn(w))``."""
    return w - lr * (g + weight_decay * np.sign(w))


def negative_update(w, lr: float, weight_decay: float):
    """Decay-only step that shrinks ``|w|`` by ``lr * wd`` and stops at zero."""
    return np.sign(w) * np.maximum(0.0, np.abs(w) - lr * weight_decay)


@dataclass(frozen=True)
class UpdateConfig:
    lr: float = 0.01
    weight_decay: float = 0.002
    criterion: str = "both"
    mode: str = "iterative"

    def validate(self) -> "UpdateConfig":
        if not self.lr > 0:
            raise ConfigurationError("learning rate must be > 0")
        if not self.weight_decay >= 0:
            raise ConfigurationError("weight decay must be >= 0")
        if self.criterion not in CRITERIA:
            raise ConfigurationError(f"unknown criterion {self.criterion!r}")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        return self


@dataclass
class PartitionMask:
    flags: dict[ModuleRole, np.ndarray]
    iteration: int
    mode: str
    counts: dict[ModuleRole, tuple[int, int]] = field(default_factory=dict)

    def transferable(self, role: ModuleRole) -> np.ndarray:
        return np.flatnonzero(self.flags[role])

    def untransferable(self, role: ModuleRole) -> np.ndarray:
        return np.flatnonzero(~self.flags[role])


def sgd_step(net: Network, lr: float, weight_decay: float):
    """Plain SGD with signed weight decay on every parameter."""
    _check_grads(net)
    net.flat[:] = positive_update(net.flat, net.grad_flat, lr, weight_decay)
    _check(net)


def _check(net: Network):
    if not np.all(np.isfinite(net.flat)):
        raise NumericFailure("non-finite parameter after update")


def _check_grads(net: Network):
    if not np.all(np.isfinite(net.grad_flat)):
        raise NumericFailure("non-finite gradient before update")


def compute_masks(net: Network, tau: float, criterion: str, scope, adversarial: bool = True):
    """Per-role transferable flags from the current weights and gradients.

    Roles outside ``scope`` get an all-true mask.
    """
    _check_grads(net)
    flags, counts = {}, {}
    for role in ROLES:
        m = net.count(role)
        if role in scope:
            m_t = partition_count(m, tau, role, adversarial)
            scores = importance(net.weights(role), net.gradients(role), criterion)
            flags[role] = partition(scores, m_t)
        else:
            m_t = m
            flags[role] = np.ones(m, dtype=bool)
        counts[role] = (m, m_t)
    return flags, counts


def apply_masks(net: Network, flags, lr: float, weight_decay: float):
    for role in ROLES:
        w = net.weights(role)
        g = net.gradients(role)
        keep = flags[role]
        if keep.all():
            w[:] = positive_update(w, g, lr, weight_decay)
        else:
            drop = ~keep
            w[keep] = positive_update(w[keep], g[keep], lr, weight_decay)
            w[drop] = negative_update(w[drop], lr, weight_decay)
    _check(net)


def transpar_step(net: Network, tau: float, config: UpdateConfig, scope=ROLES,
                  adversarial: bool = True, iteration: int = 0) -> PartitionMask:
    """One iterative-mode update of ``net`` from its stored gradients."""
    flags, counts = compute_masks(net, tau, config.criterion, scope, adversarial)
    apply_masks(net, flags, config.lr, config.weight_decay)
    return PartitionMask(flags, iteration, config.mode, counts)


class TransParOptimizer:
    """Stateful wrapper that realises the three identification modes.

    ``iterative`` re-partitions on every step. ``one_shot_start`` keeps the
    first step's mask for the whole run. ``one_shot_last`` trains with plain
    SGD, remembers the mask implied by the latest step, and ``finalize()``
    zeroes the untransferable weights after training.
    """

    def __init__(self, net: Network, tau: float, config: UpdateConfig, scope=ROLES,
                 adversarial: bool = True):
        if not 0.0 < tau <= 1.0:
            raise ConfigurationError(f"tau must lie in (0, 1], got {tau}")
        self.net = net
        self.tau = tau
        self.config = config.validate()
        self.scope = tuple(ModuleRole(r) for r in scope)
        if not self.scope:
            raise ConfigurationError("scope must name at least one module")
        self.adversarial = adversarial
        self.iteration = 0
        self.last_mask: PartitionMask | None = None
        self._frozen: PartitionMask | None = None

    def step(self) -> PartitionMask:
        cfg = self.config
        if cfg.mode == "one_shot_start" and self._frozen is not None:
            _check_grads(self.net)
            mask = PartitionMask(self._frozen.flags, self.iteration, cfg.mode, self._frozen.counts)
            apply_masks(self.net, mask.flags, cfg.lr, cfg.weight_decay)
        else:
            flags, counts = compute_masks(self.net, self.tau, cfg.criterion, self.scope,
                                          self.adversarial)
            mask = PartitionMask(flags, self.iteration, cfg.mode, counts)
            if cfg.mode == "one_shot_last":
                sgd_step(self.net, cfg.lr, cfg.weight_decay)
            else:
                apply_masks(self.net, flags, cfg.lr, cfg.weight_decay)
            if cfg.mode == "one_shot_start":
                self._frozen = mask
        self.last_mask = mask
        self.iteration += 1
        return mask

    def finalize(self):
        """Zero untransferable weights (``one_shot_last`` only; no-op otherwise)."""
        if self.config.mode != "one_shot_last" or self.last_mask is None:
            return
        for role in ROLES:
            self.net.weights(role)[~self.last_mask.flags[role]] = 0.0

    def untransferable_mean_abs(self) -> dict[ModuleRole, float]:
        out = {}
        for role in ROLES:
            if self.last_mask is None:
                out[role] = 0.0
                continue
            drop = ~self.last_mask.flags[role]
            w = self.net.weights(role)
            out[role] = float(np.abs(w[drop]).mean()) if drop.any() else 0.0
        return out
