"""Three-module UDA network: feature extractor, source hypothesis, domain discriminator.

All trainable scalars live in one flat float64 vector laid out role by role
(feature extractor, then source hypothesis, then discriminator), so each
role's parameters are a contiguous slice and each tensor is a reshaped view.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import diffcore as dc
from .errors import ConfigurationError


class ModuleRole(str, Enum):
    FeatureExtractor = "FE"
    SourceHypothesis = "SH"
    DomainDiscriminator = "DD"

    @property
    def code(self) -> str:
        return self.value

    @classmethod
    def parse(cls, code: str) -> "ModuleRole":
        try:
            return cls(code)
        except ValueError:
            raise ConfigurationError(f"unknown module role {code!r}; expected FE, SH or DD") from None


ROLES = (ModuleRole.FeatureExtractor, ModuleRole.SourceHypothesis, ModuleRole.DomainDiscriminator)


@dataclass(frozen=True)
class NetConfig:
    input_dim: int = 2
    hidden: int = 64
    n_classes: int = 2
    disc_hidden: int = 16

    def validate(self) -> "NetConfig":
        for name in ("input_dim", "hidden", "n_classes", "disc_hidden"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        return self

    def layout(self):
        """(role, tensor name, shape) in storage order."""
        d, h, k, q = self.input_dim, self.hidden, self.n_classes, self.disc_hidden
        F, C, D = ROLES
        return [
            (F, "f.w1", (d, h)), (F, "f.b1", (h,)),
            (F, "f.w2", (h, h)), (F, "f.b2", (h,)),
            (C, "c.w", (h, k)), (C, "c.b", (k,)),
            (D, "d.w1", (h, q)), (D, "d.b1", (q,)),
            (D, "d.w2", (q, 1)), (D, "d.b2", (1,)),
        ]


def glorot_bound(shape) -> float:
    fan_in, fan_out = shape
    return math.sqrt(6.0 / (fan_in + fan_out))


class Network:
    def __init__(self, config: NetConfig, init_seed: int | None = None):
        self.config = config.validate()
        self.init_seed = init_seed
        self.layout = config.layout()
        total = sum(math.prod(shape) for _, _, shape in self.layout)
        self.flat = np.zeros(total, dtype=np.float64)
        self.grad_flat = np.zeros(total, dtype=np.float64)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.role_slices: dict[ModuleRole, slice] = {}
        self.tensor_slices: dict[str, slice] = {}
        offset = 0
        for role, name, shape in self.layout:
            size = math.prod(shape)
            sl = slice(offset, offset + size)
            self.tensor_slices[name] = sl
            self.params[name] = self.flat[sl].reshape(shape)
            self.grads[name] = self.grad_flat[sl].reshape(shape)
            start = self.role_slices[role].start if role in self.role_slices else offset
            self.role_slices[role] = slice(start, offset + size)
            offset += size

    def copy(self) -> "Network":
        other = Network(self.config, self.init_seed)
        other.flat[:] = self.flat
        other.grad_flat[:] = self.grad_flat
        return other

    def weights(self, role: ModuleRole) -> np.ndarray:
        """Writable view of one role's parameters."""
        return self.flat[self.role_slices[role]]

    def gradients(self, role: ModuleRole) -> np.ndarray:
        return self.grad_flat[self.role_slices[role]]

    def count(self, role: ModuleRole) -> int:
        sl = self.role_slices[role]
        return sl.stop - sl.start


def init_network(config: NetConfig | None = None, seed: int = 0) -> Network:
    """Glorot-uniform weights, zero biases, fully determined by ``seed``."""
    net = Network(config or NetConfig(), init_seed=seed)
    rng = np.random.default_rng(seed)
    for _, name, shape in net.layout:
        if len(shape) == 2:
            a = glorot_bound(shape)
            net.params[name][...] = rng.uniform(-a, a, size=shape)
    return net


class RegistryEntry(NamedTuple):
    param_id: int
    role: ModuleRole
    tensor_name: str
    flat_index: int


class ParameterRegistry:
    """Stable enumeration of every trainable scalar, tagged by module role.

    ``param_id`` is the position in the network's flat parameter vector, so
    ``weights(role)``/``gradients(role)`` are live views over the same storage.
    """

    def __init__(self, net: Network):
        self.net = net
        self.entries: list[RegistryEntry] = []
        for role, name, shape in net.layout:
            base = net.tensor_slices[name].start
            for i in range(math.prod(shape)):
                self.entries.append(RegistryEntry(base + i, role, name, i))

    def counts(self) -> dict[ModuleRole, int]:
        return {role: self.net.count(role) for role in ROLES}

    def weights(self, role: ModuleRole) -> np.ndarray:
        return self.net.weights(role)

    def gradients(self, role: ModuleRole) -> np.ndarray:
        return self.net.gradients(role)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def registry(net: Network) -> ParameterRegistry:
    return ParameterRegistry(net)


class UdaOutputs(NamedTuple):
    tape: dc.Tape
    leaves: dict
    source_logits: dc.TensorNode
    target_logits: dc.TensorNode
    domain_logits: dc.TensorNode | None
    loss_src: dc.TensorNode
    loss_ent: dc.TensorNode
    loss_dom: dc.TensorNode | None
    total: dc.TensorNode

    @property
    def losses(self) -> tuple[float, float, float]:
        dom = float(self.loss_dom.data) if self.loss_dom is not None else 0.0
        return float(self.loss_src.data), float(self.loss_ent.data), dom


def _leaves(net: Network, tape: dc.Tape) -> dict:
    return {name: tape.leaf(arr) for name, arr in net.params.items()}


def _features(x: dc.TensorNode, p: dict) -> dc.TensorNode:
    h = dc.relu(dc.affine(x, p["f.w1"], p["f.b1"]))
    return dc.relu(dc.affine(h, p["f.w2"], p["f.b2"]))


def _classify(h: dc.TensorNode, p: dict) -> dc.TensorNode:
    return dc.affine(h, p["c.w"], p["c.b"])


def _discriminate(h: dc.TensorNode, p: dict) -> dc.TensorNode:
    z = dc.relu(dc.affine(h, p["d.w1"], p["d.b1"]))
    return dc.affine(z, p["d.w2"], p["d.b2"])


def forward_uda(net: Network, xs, ys, xt, beta: float = 1.0, alpha: float = 0.1,
                domain_loss: bool = True) -> UdaOutputs:
    """Build the tape for one paired source/target batch.

    ``total = L_s + alpha * L_ent + L_d``; the discriminator sees features
    through gradient reversal with coefficient ``beta``. With
    ``domain_loss=False`` (source-only training) the discriminator branch is
    skipped. ``L_ent`` is always computed for logging; it only enters
    ``total`` when ``alpha != 0``.
    """
    xs = np.asarray(xs, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    if len(xs) == 0 or len(xt) == 0:
        raise ConfigurationError("source and target batches must be nonempty")
    tape = dc.Tape()
    p = _leaves(net, tape)
    hs = _features(tape.constant(xs), p)
    ht = _features(tape.constant(xt), p)
    src_logits = _classify(hs, p)
    tgt_logits = _classify(ht, p)
    l_s = dc.softmax_cross_entropy(src_logits, ys)
    l_ent = dc.entropy_loss(tgt_logits)
    total = l_s
    if alpha != 0.0:
        total = dc.add(total, dc.scale(l_ent, alpha))
    dom_logits = l_d = None
    if domain_loss:
        h_all = dc.gradient_reversal(dc.concat_rows(hs, ht), beta)
        dom_logits = _discriminate(h_all, p)
        d = np.concatenate([np.ones(len(xs)), np.zeros(len(xt))])
        l_d = dc.bce_with_logit(dom_logits, d)
        total = dc.add(total, l_d)
    return UdaOutputs(tape, p, src_logits, tgt_logits, dom_logits, l_s, l_ent, l_d, total)


def store_gradients(net: Network, outputs: UdaOutputs, root: dc.TensorNode | None = None):
    """Backpropagate ``root`` (default: total loss) and copy leaf grads into ``net``."""
    root = outputs.total if root is None else root
    dc.backward(outputs.tape, root)
    for name, leaf in outputs.leaves.items():
        net.grads[name][...] = leaf.grad


def features(net: Network, x) -> np.ndarray:
    tape = dc.Tape()
    p = {name: tape.constant(net.params[name]) for name in ("f.w1", "f.b1", "f.w2", "f.b2")}
    return _features(tape.constant(np.asarray(x, dtype=np.float64)), p).data


def logits(net: Network, x) -> np.ndarray:
    tape = dc.Tape()
    p = {name: tape.constant(arr) for name, arr in net.params.items()}
    return _classify(_features(tape.constant(np.asarray(x, dtype=np.float64)), p), p).data


def predict(net: Network, x) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lower class index
    return np.argmax(logits(net, x), axis=1)


CHECKPOINT_VERSION = 1


def checkpoint_dict(net: Network, extra: dict | None = None) -> dict:
    modules = []
    for role in ROLES:
        tensors = [
            {"name": name, "shape": list(shape), "data": net.params[name].reshape(-1).tolist()}
            for r, name, shape in net.layout if r is role
        ]
        modules.append({"role": role.code, "tensors": tensors})
    out = {"format_version": CHECKPOINT_VERSION, "modules": modules,
           "net_config": vars(net.config).copy()}
    if extra:
        out.update(extra)
    return out


def save_checkpoint(net: Network, path, extra: dict | None = None):
    Path(path).write_text(json.dumps(checkpoint_dict(net, extra), sort_keys=True))


def network_from_checkpoint(raw: dict, config: NetConfig | None = None) -> Network:
    if raw.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint format {raw.get('format_version')!r}")
    if config is None:
        try:
            config = NetConfig(**raw["net_config"])
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"checkpoint lacks a usable net_config: {exc}") from None
    net = Network(config)
    expected = {name: (role, shape) for role, name, shape in net.layout}
    seen = set()
    for module in raw.get("modules", []):
        role = ModuleRole.parse(module.get("role"))
        for t in module.get("tensors", []):
            name = t.get("name")
            if name not in expected:
                raise ConfigurationError(f"unexpected tensor {name!r} in checkpoint")
            want_role, want_shape = expected[name]
            if role is not want_role or tuple(t.get("shape", ())) != want_shape:
                raise ConfigurationError(
                    f"tensor {name!r}: checkpoint has role {role.code} shape {t.get('shape')}, "
                    f"config expects {want_role.code} {list(want_shape)}"
                )
            data = np.asarray(t["data"], dtype=np.float64)
            if data.size != math.prod(want_shape) or not np.all(np.isfinite(data)):
                raise ConfigurationError(f"tensor {name!r} has bad data")
            net.params[name][...] = data.reshape(want_shape)
            seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise ConfigurationError(f"checkpoint missing tensors {sorted(missing)}")
    return net


def load_checkpoint(path, config: NetConfig | None = None) -> tuple[Network, dict]:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read checkpoint {path}: {exc}") from None
    return network_from_checkpoint(raw, config), raw
