"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` records every node in creation order, so reverse creation
order is a valid topological order for the backward sweep. Only the
primitives needed by the domain-adaptation objectives are provided.

    >>> tape = Tape()
    >>> w = tape.leaf([3.0])
    >>> backward(tape, mul(w, w))
    >>> float(w.grad[0])
    6.0
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, NumericFailure


class TensorNode:
    __slots__ = ("id", "tape", "data", "grad", "op", "parents", "_backward")

    def __init__(self, tape: "Tape", data: np.ndarray, op: str = "leaf", parents=()):
        self.tape = tape
        self.data = data
        self.grad = np.zeros_like(data)
        self.op = op
        self.parents = tuple(parents)
        self._backward: Callable[[], None] | None = None
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"TensorNode(id={self.id}, op={self.op!r}, shape={self.shape})"


class Tape:
    """Append-only record of nodes. Single-threaded; build a fresh one per pass."""

    def __init__(self):
        self.nodes: list[TensorNode] = []
        self.leaf_ids: list[int] = []

    def leaf(self, data, trainable: bool = True) -> TensorNode:
        arr = np.array(data, dtype=np.float64)  # always a private copy
        _check_finite(arr, "leaf")
        node = TensorNode(self, arr)
        if trainable:
            self.leaf_ids.append(node.id)
        return node

    def constant(self, data) -> TensorNode:
        return self.leaf(data, trainable=False)

    def zero_grad(self):
        for node in self.nodes:
            node.grad.fill(0.0)


def _check_finite(arr: np.ndarray, where: str):
    if not np.all(np.isfinite(arr)):
        raise NumericFailure(f"non-finite value in {where}")


def _node(parent: TensorNode, data: np.ndarray, op: str, parents) -> TensorNode:
    _check_finite(data, op)
    for p in parents:
        if p.tape is not parent.tape:
            raise ConfigurationError("operands belong to different tapes")
    return TensorNode(parent.tape, data, op, [p.id for p in parents])


def affine(x: TensorNode, W: TensorNode, b: TensorNode) -> TensorNode:
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise ConfigurationError(
            f"affine expects x[n,d], W[d,h], b[h]; got {x.shape}, {W.shape}, {b.shape}"
        )
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ConfigurationError(f"affine shape mismatch: {x.shape} @ {W.shape} + {b.shape}")
    out = _node(x, x.data @ W.data + b.data, "affine", (x, W, b))

    def _backward():
        go = out.grad
        x.grad += go @ W.data.T
        W.grad += x.data.T @ go
        b.grad += go.sum(axis=0)

    out._backward = _backward
    return out


def relu(x: TensorNode) -> TensorNode:
    mask = x.data > 0.0  # subgradient 0 at exactly 0
    out = _node(x, np.where(mask, x.data, 0.0), "relu", (x,))

    def _backward():
        x.grad += np.where(mask, out.grad, 0.0)

    out._backward = _backward
    return out


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: TensorNode, labels) -> TensorNode:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.data.ndim != 2:
        raise ConfigurationError(f"logits must be [n,K], got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ConfigurationError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if np.any(labels != np.round(labels)):
            raise ConfigurationError("labels must be integer class indices")
        labels = labels.astype(np.int64)
    if np.any(labels < 0) or np.any(labels >= k):
        raise ConfigurationError(f"label out of range [0, {k})")
    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    out = _node(logits, np.array(loss), "softmax_ce", (logits,))

    def _backward():
        g = np.exp(logp)
        g[rows, labels] -= 1.0
        logits.grad += g * (out.grad / n)

    out._backward = _backward
    return out


def entropy_loss(logits: TensorNode) -> TensorNode:
    """Mean Shannon entropy (nats) of the row softmax; 0*log 0 counts as 0."""
    if logits.data.ndim != 2 or logits.shape[0] < 1:
        raise ConfigurationError(f"logits must be [n>=1,K], got {logits.shape}")
    n = logits.shape[0]
    logp = _log_softmax(logits.data)
    p = np.exp(logp)
    plogp = np.where(p > 0.0, p * logp, 0.0)
    row_h = -plogp.sum(axis=1)
    out = _node(logits, np.array(row_h.mean()), "entropy", (logits,))

    def _backward():
        # dH/dz_j = -p_j (log p_j + H)
        g = -(plogp + p * row_h[:, None])
        logits.grad += g * (out.grad / n)

    out._backward = _backward
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_with_logit(logit: TensorNode, domain_label) -> TensorNode:
    z = logit.data
    if z.ndim == 2:
        if z.shape[1] != 1:
            raise ConfigurationError(f"bce expects [n,1] logits, got {logit.shape}")
        z = z[:, 0]
    n = z.shape[0]
    d = np.asarray(domain_label, dtype=np.float64).reshape(-1)
    if d.shape != (n,):
        raise ConfigurationError(f"expected {n} domain labels, got {d.shape}")
    per = np.maximum(z, 0.0) - z * d + np.log1p(np.exp(-np.abs(z)))
    out = _node(logit, np.array(per.mean()), "bce", (logit,))

    def _backward():
        g = (_sigmoid(z) - d) * (out.grad / n)
        logit.grad += g.reshape(logit.shape)

    out._backward = _backward
    return out


def gradient_reversal(x: TensorNode, beta: float) -> TensorNode:
    if beta < 0:
        raise ConfigurationError(f"gradient reversal coefficient must be >= 0, got {beta}")
    out = _node(x, x.data.copy(), "grl", (x,))

    def _backward():
        x.grad += -beta * out.grad

    out._backward = _backward
    return out


def add(a: TensorNode, b: TensorNode) -> TensorNode:
    if a.shape != b.shape:
        raise ConfigurationError(f"add shape mismatch {a.shape} vs {b.shape}")
    out = _node(a, a.data + b.data, "add", (a, b))

    def _backward():
        a.grad += out.grad
        b.grad += out.grad

    out._backward = _backward
    return out


def mul(a: TensorNode, b: TensorNode) -> TensorNode:
    if a.shape != b.shape:
        raise ConfigurationError(f"mul shape mismatch {a.shape} vs {b.shape}")
    out = _node(a, a.data * b.data, "mul", (a, b))

    def _backward():
        a.grad += out.grad * b.data
        b.grad += out.grad * a.data

    out._backward = _backward
    return out


def scale(a: TensorNode, c: float) -> TensorNode:
    out = _node(a, a.data * c, "scale", (a,))

    def _backward():
        a.grad += out.grad * c

    out._backward = _backward
    return out


def sum_all(a: TensorNode) -> TensorNode:
    out = _node(a, np.array(a.data.sum()), "sum", (a,))

    def _backward():
        a.grad += out.grad

    out._backward = _backward
    return out


def concat_rows(a: TensorNode, b: TensorNode) -> TensorNode:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ConfigurationError(f"cannot stack {a.shape} and {b.shape}")
    n = a.shape[0]
    out = _node(a, np.vstack([a.data, b.data]), "concat", (a, b))

    def _backward():
        a.grad += out.grad[:n]
        b.grad += out.grad[n:]

    out._backward = _backward
    return out


def backward(tape: Tape, root: TensorNode, zero_grad: bool = True):
    """Populate ``.grad`` of every node reachable from the scalar ``root``.

    With ``zero_grad=False`` leaf gradients accumulate onto whatever is
    already stored, which lets a caller sum several roots by hand; interior
    nodes are always reset.
    """
    if root.tape is not tape:
        raise ConfigurationError("root does not belong to this tape")
    if root.data.size != 1:
        raise ConfigurationError(f"backward needs a scalar root, got shape {root.shape}")
    nodes = tape.nodes
    for node in nodes:
        if zero_grad or node._backward is not None:
            node.grad.fill(0.0)
    reachable = np.zeros(root.id + 1, dtype=bool)
    reachable[root.id] = True
    root.grad += 1.0
    for node_id in range(root.id, -1, -1):
        if not reachable[node_id]:
            continue
        node = nodes[node_id]
        if node._backward is None:
            continue
        node._backward()
        for pid in node.parents:
            reachable[pid] = True
            _check_finite(nodes[pid].grad, f"backward of {node.op}")


def finite_difference_check(
    loss_fn: Callable[[Sequence[TensorNode]], TensorNode],
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Worst relative error between reverse-mode and central-difference grads.

    ``loss_fn`` receives fresh leaf nodes (one per entry of ``params``, all on
    the same tape) and returns a scalar node. ``params`` are perturbed in
    place during the sweep and restored afterwards.
    """
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    params = [np.asarray(p, dtype=np.float64) for p in params]

    def evaluate(with_grad: bool):
        tape = Tape()
        leaves = [tape.leaf(p) for p in params]
        root = loss_fn(leaves)
        if with_grad:
            backward(tape, root)
            return [leaf.grad.copy() for leaf in leaves]
        return float(root.data)

    analytic = evaluate(True)
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = evaluate(False)
            flat[i] = orig - eps
            down = evaluate(False)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = gflat[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
