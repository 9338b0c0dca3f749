"""Reverse-mode tape on numpy arrays.

Adjoints are built out of Node operations rather than raw arrays, so the
output of one backward pass is itself a differentiable graph; second-order
penalties (gradient alignment, gradient variance, the scalar-multiplier
surrogate) come out of the same machinery with no extra rules.

Model decomposition is fixed: a constant embedding of discrete inputs, dense
rectifier layers producing the feature row H, and a linear head whose bias is
a dummy always-one feature unit, so logits are exactly z[y] = sum_u w[u, y] *
h[u] with h running over the augmented features.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteActivation, ShapeMismatch
from .rng import substream


class Node:
    """One value in the graph; vjp maps the output adjoint to parent adjoints."""

    __slots__ = ("val", "parents", "vjp")

    def __init__(self, val, parents=(), vjp=None):
        self.val = val if isinstance(val, np.ndarray) else np.asarray(val, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp

    # Arithmetic sugar; right-hand numbers become constants.
    def __add__(self, other):
        return add(self, as_node(other))

    def __radd__(self, other):
        return add(as_node(other), self)

    def __sub__(self, other):
        return sub(self, as_node(other))

    def __rsub__(self, other):
        return sub(as_node(other), self)

    def __mul__(self, other):
        return mul(self, as_node(other))

    def __rmul__(self, other):
        return mul(as_node(other), self)

    def __truediv__(self, other):
        return div(self, as_node(other))

    def __rtruediv__(self, other):
        return div(as_node(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, float(p))

    def __matmul__(self, other):
        return matmul(self, as_node(other))

    def item(self) -> float:
        return float(self.val)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(np.asarray(x, dtype=np.float64))


def constant(x) -> Node:
    return Node(np.asarray(x, dtype=np.float64))


# -- shape plumbing ----------------------------------------------------------

def _unbroadcast(g: Node, shape: tuple) -> Node:
    """Reduce an adjoint back to `shape` after numpy broadcasting."""
    if g.val.shape == shape:
        return g
    out = g
    while out.val.ndim > len(shape):
        out = nsum(out, axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and out.val.shape[ax] != 1:
            out = nsum(out, axis=ax, keepdims=True)
    if out.val.shape != shape:
        out = reshape(out, shape)
    return out


def add(a: Node, b: Node) -> Node:
    return Node(a.val + b.val, (a, b),
                lambda g: (_unbroadcast(g, a.val.shape), _unbroadcast(g, b.val.shape)))


def sub(a: Node, b: Node) -> Node:
    return Node(a.val - b.val, (a, b),
                lambda g: (_unbroadcast(g, a.val.shape),
                           _unbroadcast(neg(g), b.val.shape)))


def mul(a: Node, b: Node) -> Node:
    return Node(a.val * b.val, (a, b),
                lambda g: (_unbroadcast(mul(g, b), a.val.shape),
                           _unbroadcast(mul(g, a), b.val.shape)))


def div(a: Node, b: Node) -> Node:
    return mul(a, pow_const(b, -1.0))


def neg(a: Node) -> Node:
    return Node(-a.val, (a,), lambda g: (neg(g),))


def pow_const(a: Node, p: float) -> Node:
    return Node(a.val ** p, (a,),
                lambda g: (mul(g, mul(constant(p), pow_const(a, p - 1.0))),))


def square(a: Node) -> Node:
    return mul(a, a)


def exp(a: Node) -> Node:
    out = Node(np.exp(a.val), (a,), None)
    out.vjp = lambda g: (mul(g, out),)
    return out


def log(a: Node) -> Node:
    return Node(np.log(a.val), (a,), lambda g: (div(g, a),))


def relu(a: Node) -> Node:
    mask = constant((a.val > 0.0).astype(np.float64))
    return Node(a.val * mask.val, (a,), lambda g: (mul(g, mask),))


def matmul(a: Node, b: Node) -> Node:
    return Node(a.val @ b.val, (a, b),
                lambda g: (matmul(g, t2(b)), matmul(t2(a), g)))


def t2(a: Node) -> Node:
    return Node(a.val.T, (a,), lambda g: (t2(g),))


def reshape(a: Node, shape) -> Node:
    orig = a.val.shape
    return Node(a.val.reshape(shape), (a,), lambda g: (reshape(g, orig),))


def nsum(a: Node, axis=None, keepdims: bool = False) -> Node:
    shape = a.val.shape

    def back(g):
        gv = g
        if axis is not None and not keepdims:
            kshape = list(shape)
            for ax in (axis if isinstance(axis, tuple) else (axis,)):
                kshape[ax] = 1
            gv = reshape(gv, tuple(kshape))
        elif axis is None:
            gv = reshape(gv, (1,) * len(shape)) if shape else gv
        return (broadcast(gv, shape),)

    return Node(a.val.sum(axis=axis, keepdims=keepdims), (a,), back)


def nmean(a: Node, axis=None, keepdims: bool = False) -> Node:
    total = a.val.size if axis is None else a.val.shape[axis]
    return mul(nsum(a, axis=axis, keepdims=keepdims), constant(1.0 / total))


def broadcast(a: Node, shape) -> Node:
    orig = a.val.shape
    return Node(np.broadcast_to(a.val, shape).copy(), (a,),
                lambda g: (_unbroadcast(g, orig),))


def gather_rows(a: Node, idx: np.ndarray) -> Node:
    idx = np.asarray(idx, dtype=np.int64)
    n_rows = a.val.shape[0]
    return Node(a.val[idx], (a,), lambda g: (scatter_rows(g, idx, n_rows),))


def scatter_rows(g: Node, idx: np.ndarray, n_rows: int) -> Node:
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n_rows,) + g.val.shape[1:], dtype=np.float64)
    np.add.at(out, idx, g.val)
    return Node(out, (g,), lambda gg: (gather_rows(gg, idx),))


def take_cols(a: Node, cols: np.ndarray) -> Node:
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(a.val.shape[0])
    k = a.val.shape[1]
    return Node(a.val[rows, cols], (a,), lambda g: (scatter_cols(g, cols, k),))


def scatter_cols(g: Node, cols: np.ndarray, k: int) -> Node:
    cols = np.asarray(cols, dtype=np.int64)
    n = g.val.shape[0]
    out = np.zeros((n, k), dtype=np.float64)
    out[np.arange(n), cols] = g.val
    return Node(out, (g,), lambda gg: (take_cols(gg, cols),))


def index0(a: Node, i: int) -> Node:
    onehot = np.zeros(a.val.shape[0])
    onehot[i] = 1.0

    def back(g):
        full = mul(constant(onehot), g) if a.val.ndim == 1 else None
        if full is None:
            raise ShapeMismatch("index0 supports 1-d stacks only")
        return (full,)

    return Node(a.val[i], (a,), back)


def stack_list(nodes: list[Node]) -> Node:
    vals = np.stack([n.val for n in nodes])
    return Node(vals, tuple(nodes),
                lambda g: tuple(index0(g, i) for i in range(len(nodes))))


def concat_rows(parts: list[Node]) -> Node:
    sizes = [p.val.shape[0] for p in parts]
    starts = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    def back(g):
        return tuple(slice_rows(g, starts[i], starts[i + 1])
                     for i in range(len(parts)))

    return Node(np.concatenate([p.val for p in parts], axis=0),
                tuple(parts), back)


def slice_rows(a: Node, i0: int, i1: int) -> Node:
    n = a.val.shape[0]
    return Node(a.val[i0:i1].copy(), (a,), lambda g: (pad_rows(g, i0, n),))


def pad_rows(g: Node, i0: int, total: int) -> Node:
    out = np.zeros((total,) + g.val.shape[1:])
    out[i0:i0 + g.val.shape[0]] = g.val
    return Node(out, (g,), lambda gg: (slice_rows(gg, i0, i0 + g.val.shape[0]),))


def concat_ones(a: Node) -> Node:
    n, d = a.val.shape
    val = np.concatenate([a.val, np.ones((n, 1))], axis=1)
    return Node(val, (a,), lambda g: (slice_cols(g, 0, d),))


def slice_cols(a: Node, j0: int, j1: int) -> Node:
    total = a.val.shape[1]
    return Node(a.val[:, j0:j1].copy(), (a,), lambda g: (pad_cols(g, j0, total),))


def pad_cols(g: Node, j0: int, total: int) -> Node:
    n, d = g.val.shape
    out = np.zeros((n, total))
    out[:, j0:j0 + d] = g.val
    return Node(out, (g,), lambda gg: (slice_cols(gg, j0, j0 + d),))


def logsumexp_rows(z: Node) -> Node:
    m = constant(z.val.max(axis=1, keepdims=True))  # shift, exact gradient
    return add(log(nsum(exp(sub(z, m)), axis=1, keepdims=True)), m)


def log_softmax_rows(z: Node) -> Node:
    return sub(z, logsumexp_rows(z))


def softmax_rows(z: Node) -> Node:
    return exp(log_softmax_rows(z))


def gradient_reversal(a: Node, scale: float) -> Node:
    """Identity on forward; backward multiplies the adjoint by -scale."""
    if scale < 0:
        raise ShapeMismatch("reversal scale must be nonnegative")
    return Node(a.val, (a,), lambda g: (mul(constant(-float(scale)), g),))


# -- backward ----------------------------------------------------------------

def _topo(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad_nodes(root: Node, wrt: list[Node]) -> list[Node]:
    """Adjoints of a scalar root for each node in `wrt`, as graph nodes."""
    adjoint: dict[int, Node] = {id(root): constant(np.ones_like(root.val))}
    for node in reversed(_topo(root)):
        g = adjoint.get(id(node))
        if g is None or node.vjp is None:
            continue
        for parent, contrib in zip(node.parents, node.vjp(g)):
            if contrib is None:
                continue
            have = adjoint.get(id(parent))
            adjoint[id(parent)] = contrib if have is None else add(have, contrib)
    return [adjoint.get(id(w), constant(np.zeros_like(w.val))) for w in wrt]


# -- the model ---------------------------------------------------------------

@dataclass
class Model:
    """Embedding + dense rectifier extractor + linear head with dummy-unit bias."""

    embedding: np.ndarray | None  # [n_obs, e]; None means inputs arrive embedded
    weights: list[np.ndarray]  # per layer, [d_in, d_out]
    biases: list[np.ndarray]  # per layer, [d_out]
    head: np.ndarray  # [u_count + 1, n_classes]

    @property
    def u_count(self) -> int:
        return self.head.shape[0] - 1

    @property
    def n_classes(self) -> int:
        return self.head.shape[1]

    def param_blocks(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"W{i}", w))
            out.append((f"b{i}", b))
        out.append(("head", self.head))
        return out

    def n_params(self) -> int:
        return sum(a.size for _, a in self.param_blocks())

    def flat_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.param_blocks()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        i = 0
        for _, a in self.param_blocks():
            a[...] = flat[i:i + a.size].reshape(a.shape)
            i += a.size

    def clone(self) -> "Model":
        emb = None if self.embedding is None else self.embedding.copy()
        return Model(emb, [w.copy() for w in self.weights],
                     [b.copy() for b in self.biases], self.head.copy())


def make_embedding(spec, n_obs: int) -> np.ndarray | None:
    """Resolve an embedding spec: "onehot", "bits", None, or an explicit matrix."""
    from .cld_core import bit_coords
    if spec is None:
        return None
    if isinstance(spec, str):
        if spec == "onehot":
            return np.eye(n_obs)
        if spec == "bits":
            return bit_coords(n_obs)
        raise ShapeMismatch(f"unknown embedding spec {spec!r}")
    arr = np.asarray(spec, dtype=np.float64)
    if arr.shape[0] != n_obs:
        raise ShapeMismatch(f"embedding rows {arr.shape[0]} != n_obs {n_obs}")
    return arr


def init_model(n_obs: int, widths: tuple, n_classes: int, *,
               embedding="onehot", seed: int = 0) -> Model:
    """Glorot-uniform init for all blocks, biases included.

    Biases share the weight bound so no unit starts exactly on the relu
    kink for inputs with all-zero embedding rows.
    """
    emb = make_embedding(embedding, n_obs)
    if emb is None:
        raise ShapeMismatch("init_model needs a concrete embedding; "
                            "use init_raw_model for raw-input networks")
    rng = substream(seed, "init")
    dims = [emb.shape[1], *widths]
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (d_in + d_out))
        weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        biases.append(rng.uniform(-bound, bound, size=d_out))
    u = dims[-1]
    bound = np.sqrt(6.0 / (u + 1 + n_classes))
    head = rng.uniform(-bound, bound, size=(u + 1, n_classes))
    return Model(emb, weights, biases, head)


def init_raw_model(d_in: int, widths: tuple, n_classes: int, *, seed: int = 0) -> Model:
    """A network over already-real inputs (adversaries eat feature rows)."""
    rng = substream(seed, "init")
    dims = [d_in, *widths]
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (a + b))
        weights.append(rng.uniform(-bound, bound, size=(a, b)))
        biases.append(rng.uniform(-bound, bound, size=b))
    u = dims[-1]
    bound = np.sqrt(6.0 / (u + 1 + n_classes))
    head = rng.uniform(-bound, bound, size=(u + 1, n_classes))
    return Model(None, weights, biases, head)


class Tape:
    """Leaf nodes for one step's parameters; shared across forwards that step."""

    def __init__(self, model: Model):
        self.model = model
        self.param_nodes: list[Node] = []
        self.names: list[str] = []
        for name, arr in model.param_blocks():
            self.param_nodes.append(constant(arr.copy()))
            self.names.append(name)

    def node(self, name: str) -> Node:
        return self.param_nodes[self.names.index(name)]


def embed_inputs(model: Model, inputs) -> np.ndarray:
    x = np.asarray(inputs)
    if x.ndim == 1 and np.issubdtype(x.dtype, np.integer):
        if model.embedding is None:
            raise ShapeMismatch("model has no embedding for index inputs")
        return model.embedding[x]
    return np.asarray(x, dtype=np.float64)


def forward(model: Model, inputs, tape: Tape | None = None, *,
            feature_mask: np.ndarray | None = None):
    """Run the network; returns (H, z, probs, tape) as graph nodes.

    `inputs` may be observation indices (embedded via the model's fixed map),
    ready real vectors, or a live Node of features from another graph (how
    reversed features reach an adversary).  `feature_mask` multiplies H
    before the head (selective muting during training).
    """
    if isinstance(inputs, Node):
        if inputs.val.ndim != 2 or inputs.val.shape[0] == 0:
            raise ShapeMismatch("feature-node input must be a nonempty matrix")
        h = inputs
    else:
        if np.asarray(inputs).shape[0] == 0:
            raise ShapeMismatch("empty batch")
        h = constant(embed_inputs(model, inputs))
    tape = tape if tape is not None else Tape(model)
    layer = 0
    for name in tape.names:
        if name == "head":
            break
        if name.startswith("W"):
            w = tape.node(name)
            b = tape.node(f"b{layer}")
            h = relu(add(matmul(h, w), b))
            layer += 1
    if feature_mask is not None:
        h = mul(h, constant(np.asarray(feature_mask, dtype=np.float64)))
    z = matmul(concat_ones(h), tape.node("head"))
    if not (np.all(np.isfinite(h.val)) and np.all(np.isfinite(z.val))):
        raise NonFiniteActivation("non-finite features or logits in forward")
    probs = softmax_rows(z)
    return h, z, probs, tape


def backward(tape: Tape, loss_node: Node) -> np.ndarray:
    """Flat gradient over the tape's canonical parameter ordering."""
    if loss_node.val.shape != ():
        raise ShapeMismatch("loss node must be scalar")
    grads = grad_nodes(loss_node, tape.param_nodes)
    return np.concatenate([g.val.ravel() for g in grads])


def finite_diff_check(model: Model, batch, loss_fn, eps: float = 1e-5, *,
                      fd_fn=None, blocks: list[str] | None = None) -> float:
    """Max relative error between backward and central differences.

    loss_fn(model, batch, tape) must build its graph on the given tape (a
    fresh one snapshots the model's current parameters) and return a scalar
    node.  `fd_fn` optionally supplies a different scalar for the difference
    quotient (sign-adjusted composites); `blocks` restricts the scan to
    named parameter blocks.
    """
    tape = Tape(model)
    node = loss_fn(model, batch, tape)
    analytic = np.concatenate([g.val.ravel() for g in
                               grad_nodes(node, tape.param_nodes)])
    evaluate = fd_fn if fd_fn is not None else (
        lambda m, b: float(loss_fn(m, b, Tape(m)).val))
    names = tape.names
    offsets = {}
    i = 0
    for name, arr in model.param_blocks():
        offsets[name] = (i, i + arr.size)
        i += arr.size
    wanted = names if blocks is None else blocks
    worst = 0.0
    for name, arr in model.param_blocks():
        if name not in wanted:
            continue
        lo, _ = offsets[name]
        flat = arr.ravel()
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + eps
            up = evaluate(model, batch)
            flat[j] = keep - eps
            down = evaluate(model, batch)
            flat[j] = keep
            fd = (up - down) / (2.0 * eps)
            a = analytic[lo + j]
            worst = max(worst, abs(a - fd) / (abs(a) + 1e-8))
    return worst


# -- optimizers --------------------------------------------------------------

def sgd_step(model: Model, gradient: np.ndarray, lr: float) -> Model:
    if lr <= 0:
        raise ShapeMismatch("lr must be positive")
    flat = model.flat_params()
    model.set_flat_params(flat - lr * gradient)
    return model


@dataclass
class AdamState:
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(model: Model, state: AdamState, gradient: np.ndarray,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    if lr <= 0:
        raise ShapeMismatch("lr must be positive")
    if state.m is None:
        state.m = np.zeros_like(gradient)
        state.v = np.zeros_like(gradient)
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * gradient
    state.v = beta2 * state.v + (1 - beta2) * gradient ** 2
    mhat = state.m / (1 - beta1 ** state.t)
    vhat = state.v / (1 - beta2 ** state.t)
    flat = model.flat_params()
    model.set_flat_params(flat - lr * mhat / (np.sqrt(vhat) + eps))
    return model, state


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(model: Model, path: str) -> None:
    doc = {
        "embedding": None if model.embedding is None else model.embedding.tolist(),
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "head": model.head.tolist(),
    }
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Model:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    emb = None if doc["embedding"] is None else np.asarray(doc["embedding"])
    return Model(emb, [np.asarray(w) for w in doc["weights"]],
                 [np.asarray(b) for b in doc["biases"]],
                 np.asarray(doc["head"]))
