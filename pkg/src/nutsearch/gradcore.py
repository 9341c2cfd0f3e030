"""Reverse-mode autodiff over dense float64 arrays, plus the two attack
primitives that live at the same level: projection onto an l2 ball and
Gumbel-softmax sampling with a straight-through estimator.

Design constraints, fixed on purpose:

* the graph is append-only; node ids are creation order, so reverse
  creation order is already a topological order for backward;
* every op validates shapes eagerly and checks its output for NaN/Inf
  (a silent non-finite value is always a bug upstream);
* float64 everywhere, no implicit broadcasting beyond the few ops that
  document it (add_bias, tile_rows) -- shape mismatches raise instead
  of broadcasting wrong;
* no higher-order derivatives, no in-place mutation of node values.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, NumericError

__all__ = [
    "Tensor", "Graph", "Node", "backward",
    "add", "add_bias", "sub", "mul", "scale", "add_const",
    "rows_scale", "reciprocal",
    "matmul", "transpose", "tanh", "sigmoid", "absolute", "sqrt",
    "softmax", "log_softmax", "embed", "concat", "narrow",
    "sum_all", "mean_all", "sum_axis", "cross_entropy",
    "tile_rows", "straight_through", "gumbel_softmax", "l2_project",
]


class Tensor:
    """Immutable-by-convention dense float64 array, row-major."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise NumericError("Tensor constructed with non-finite values")
        self.data = arr

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def size(self):
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class _Entry:
    __slots__ = ("kind", "parents", "value", "requires_grad", "back")

    def __init__(self, kind, parents, value, requires_grad, back):
        self.kind = kind
        self.parents = parents
        self.value = value
        self.requires_grad = requires_grad
        self.back = back


class Node:
    """Cheap handle: a graph plus an index into it."""

    __slots__ = ("graph", "idx")

    def __init__(self, graph, idx):
        self.graph = graph
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.graph._entries[self.idx].value

    @property
    def shape(self):
        return self.graph._entries[self.idx].value.shape

    @property
    def requires_grad(self):
        return self.graph._entries[self.idx].requires_grad

    def __repr__(self):
        e = self.graph._entries[self.idx]
        return f"Node({e.kind}, idx={self.idx}, shape={tuple(e.value.shape)})"


class Graph:
    """Append-only computation record.

    check_finite=False skips the per-op output scan; training and the
    attack keep it on, it exists so microbenchmarks can measure op cost.
    """

    def __init__(self, check_finite: bool = True):
        self._entries: list[_Entry] = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self._entries)

    def _push(self, kind, parents, value, back, requires_grad) -> Node:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericError(f"op '{kind}' produced a non-finite value")
        self._entries.append(_Entry(kind, parents, value, requires_grad, back))
        return Node(self, len(self._entries) - 1)

    def leaf(self, value, requires_grad: bool = False) -> Node:
        """Insert an input node. Leaves are the only nodes whose gradients
        backward() reports."""
        arr = value.data if isinstance(value, Tensor) else Tensor(value).data
        return self._push("leaf", (), arr, None, requires_grad)

    def constant(self, value) -> Node:
        return self.leaf(value, requires_grad=False)


def _same_graph(*nodes) -> Graph:
    g = nodes[0].graph
    for n in nodes[1:]:
        if n.graph is not g:
            raise ContractViolation("nodes belong to different graphs")
    return g


def _entry(node: Node) -> _Entry:
    return node.graph._entries[node.idx]


# ---------------------------------------------------------------------------
# ops


def add(a: Node, b: Node) -> Node:
    g = _same_graph(a, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ContractViolation(f"add: shape mismatch {av.shape} vs {bv.shape}")
    req = a.requires_grad or b.requires_grad
    back = (lambda go: (go, go)) if req else None
    return g._push("add", (a.idx, b.idx), av + bv, back, req)


def sub(a: Node, b: Node) -> Node:
    g = _same_graph(a, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ContractViolation(f"sub: shape mismatch {av.shape} vs {bv.shape}")
    req = a.requires_grad or b.requires_grad
    back = (lambda go: (go, -go)) if req else None
    return g._push("sub", (a.idx, b.idx), av - bv, back, req)


def add_bias(a: Node, b: Node) -> Node:
    """a (..., H) + b (H,): broadcast over leading axes only."""
    g = _same_graph(a, b)
    av, bv = a.value, b.value
    if bv.ndim != 1 or av.shape[-1] != bv.shape[0]:
        raise ContractViolation(f"add_bias: {av.shape} vs {bv.shape}")
    req = a.requires_grad or b.requires_grad
    lead = tuple(range(av.ndim - 1))
    back = (lambda go: (go, go.sum(axis=lead) if lead else go)) if req else None
    return g._push("add_bias", (a.idx, b.idx), av + bv, back, req)


def mul(a: Node, b: Node) -> Node:
    g = _same_graph(a, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ContractViolation(f"mul: shape mismatch {av.shape} vs {bv.shape}")
    req = a.requires_grad or b.requires_grad
    back = (lambda go: (go * bv, go * av)) if req else None
    return g._push("mul", (a.idx, b.idx), av * bv, back, req)


def scale(a: Node, c: float) -> Node:
    c = float(c)
    back = (lambda go: (go * c,)) if a.requires_grad else None
    return a.graph._push("scale", (a.idx,), a.value * c, back, a.requires_grad)


def add_const(a: Node, c: float) -> Node:
    c = float(c)
    back = (lambda go: (go,)) if a.requires_grad else None
    return a.graph._push("add_const", (a.idx,), a.value + c, back, a.requires_grad)


def rows_scale(a: Node, s: Node) -> Node:
    """a (B x K) scaled row-wise by s (B,)."""
    g = _same_graph(a, s)
    av, sv = a.value, s.value
    if av.ndim != 2 or sv.shape != (av.shape[0],):
        raise ContractViolation(f"rows_scale: {av.shape} vs {sv.shape}")
    req = a.requires_grad or s.requires_grad

    def back(go):
        ga = go * sv[:, None] if a.requires_grad else None
        gs = (go * av).sum(axis=1) if s.requires_grad else None
        return (ga, gs)

    return g._push("rows_scale", (a.idx, s.idx), av * sv[:, None],
                   back if req else None, req)


def reciprocal(a: Node) -> Node:
    av = a.value
    if np.any(av == 0.0):
        raise NumericError("reciprocal of zero")
    out = 1.0 / av
    back = (lambda go: (-go * out * out,)) if a.requires_grad else None
    return a.graph._push("reciprocal", (a.idx,), out, back, a.requires_grad)


def matmul(a: Node, b: Node) -> Node:
    g = _same_graph(a, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ContractViolation(f"matmul: {av.shape} @ {bv.shape}")
    req = a.requires_grad or b.requires_grad

    def back(go):
        ga = go @ bv.T if a.requires_grad else None
        gb = av.T @ go if b.requires_grad else None
        return (ga, gb)

    return g._push("matmul", (a.idx, b.idx), av @ bv, back if req else None, req)


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ContractViolation("transpose expects a matrix")
    back = (lambda go: (go.T,)) if a.requires_grad else None
    return a.graph._push("transpose", (a.idx,), np.ascontiguousarray(a.value.T),
                         back, a.requires_grad)


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    back = (lambda go: (go * (1.0 - out * out),)) if a.requires_grad else None
    return a.graph._push("tanh", (a.idx,), out, back, a.requires_grad)


def sigmoid(a: Node) -> Node:
    # 0.5*(1+tanh(x/2)) is stable for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    back = (lambda go: (go * out * (1.0 - out),)) if a.requires_grad else None
    return a.graph._push("sigmoid", (a.idx,), out, back, a.requires_grad)


def absolute(a: Node) -> Node:
    av = a.value
    back = (lambda go: (go * np.sign(av),)) if a.requires_grad else None
    return a.graph._push("abs", (a.idx,), np.abs(av), back, a.requires_grad)


def sqrt(a: Node) -> Node:
    av = a.value
    if np.any(av < 0.0):
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(av)

    def back(go):
        # derivative blows up at 0; callers add an epsilon under the root
        return (go * 0.5 / out,)

    return a.graph._push("sqrt", (a.idx,), out,
                         back if a.requires_grad else None, a.requires_grad)


def softmax(a: Node, axis: int = -1) -> Node:
    av = a.value
    shifted = av - av.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(go):
        dot = (go * out).sum(axis=axis, keepdims=True)
        return (out * (go - dot),)

    return a.graph._push("softmax", (a.idx,), out,
                         back if a.requires_grad else None, a.requires_grad)


def log_softmax(a: Node, axis: int = -1) -> Node:
    av = a.value
    shifted = av - av.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def back(go):
        return (go - sm * go.sum(axis=axis, keepdims=True),)

    return a.graph._push("log_softmax", (a.idx,), out,
                         back if a.requires_grad else None, a.requires_grad)


def embed(table: Node, ids) -> Node:
    """Gather rows of table (V x E) by an integer id array."""
    ids = np.asarray(ids, dtype=np.int64)
    tv = table.value
    if tv.ndim != 2:
        raise ContractViolation("embed expects a (V, E) table")
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise ContractViolation("embed: id out of range")
    out = tv[ids]

    def back(go):
        gt = np.zeros_like(tv)
        np.add.at(gt, ids, go)
        return (gt,)

    return table.graph._push("embed", (table.idx,), out,
                             back if table.requires_grad else None,
                             table.requires_grad)


def concat(nodes, axis: int = -1) -> Node:
    nodes = list(nodes)
    if not nodes:
        raise ContractViolation("concat of nothing")
    g = _same_graph(*nodes)
    vals = [n.value for n in nodes]
    out = np.concatenate(vals, axis=axis)
    req = any(n.requires_grad for n in nodes)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes[:-1])

    def back(go):
        return tuple(np.ascontiguousarray(p) for p in np.split(go, splits, axis=axis))

    return g._push("concat", tuple(n.idx for n in nodes), out,
                   back if req else None, req)


def narrow(a: Node, axis: int, start: int, length: int) -> Node:
    av = a.value
    if not (0 <= start and start + length <= av.shape[axis]):
        raise ContractViolation(f"narrow: [{start}:{start + length}] outside axis "
                                f"{axis} of {av.shape}")
    key = [slice(None)] * av.ndim
    key[axis] = slice(start, start + length)
    key = tuple(key)
    out = np.ascontiguousarray(av[key])

    def back(go):
        ga = np.zeros_like(av)
        ga[key] = go
        return (ga,)

    return a.graph._push("narrow", (a.idx,), out,
                         back if a.requires_grad else None, a.requires_grad)


def sum_all(a: Node) -> Node:
    av = a.value
    back = (lambda go: (np.full_like(av, float(go)),)) if a.requires_grad else None
    return a.graph._push("sum_all", (a.idx,), np.asarray(av.sum()), back,
                         a.requires_grad)


def mean_all(a: Node) -> Node:
    av = a.value
    n = av.size
    back = (lambda go: (np.full_like(av, float(go) / n),)) if a.requires_grad else None
    return a.graph._push("mean_all", (a.idx,), np.asarray(av.mean()), back,
                         a.requires_grad)


def sum_axis(a: Node, axis: int) -> Node:
    av = a.value
    out = av.sum(axis=axis)

    def back(go):
        return (np.ascontiguousarray(np.broadcast_to(np.expand_dims(go, axis),
                                                     av.shape)),)

    return a.graph._push("sum_axis", (a.idx,), out,
                         back if a.requires_grad else None, a.requires_grad)


def cross_entropy(logits: Node, targets, weights=None) -> Node:
    """Weighted mean negative log-likelihood, fused with log-softmax.

    logits (B x C), targets (B,) int, weights (B,) nonnegative or None.
    Weighting divides by the weight total, so padded positions with
    weight 0 drop out exactly.
    """
    lv = logits.value
    targets = np.asarray(targets, dtype=np.int64)
    if lv.ndim != 2 or targets.shape != (lv.shape[0],):
        raise ContractViolation(f"cross_entropy: logits {lv.shape}, targets "
                                f"{targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= lv.shape[1]):
        raise ContractViolation("cross_entropy: target id out of range")
    if weights is None:
        w = np.ones(lv.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (lv.shape[0],) or np.any(w < 0):
            raise ContractViolation("cross_entropy: bad weights")
    wsum = w.sum()
    if wsum <= 0.0:
        raise ContractViolation("cross_entropy: weights sum to zero")

    shifted = lv - lv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(lv.shape[0])
    out = np.asarray(-(w * logp[rows, targets]).sum() / wsum)
    sm = np.exp(logp)

    def back(go):
        gl = sm.copy()
        gl[rows, targets] -= 1.0
        gl *= (w / wsum)[:, None]
        return (gl * float(go),)

    return logits.graph._push("cross_entropy", (logits.idx,), out,
                              back if logits.requires_grad else None,
                              logits.requires_grad)


def tile_rows(a: Node, n: int) -> Node:
    """(1 x E) -> (n x E); backward sums the replicas."""
    av = a.value
    if av.ndim != 2 or av.shape[0] != 1:
        raise ContractViolation("tile_rows expects a single-row matrix")
    out = np.repeat(av, n, axis=0)
    back = (lambda go: (go.sum(axis=0, keepdims=True),)) if a.requires_grad else None
    return a.graph._push("tile_rows", (a.idx,), out, back, a.requires_grad)


def straight_through(soft: Node, hard) -> Node:
    """Forward the hard array, route gradients to the soft parent unchanged."""
    hard = np.ascontiguousarray(hard, dtype=np.float64)
    if hard.shape != soft.value.shape:
        raise ContractViolation("straight_through: shape mismatch")
    back = (lambda go: (go,)) if soft.requires_grad else None
    return soft.graph._push("straight_through", (soft.idx,), hard, back,
                            soft.requires_grad)


# ---------------------------------------------------------------------------
# backward


def backward(graph: Graph, loss: Node) -> dict[int, Tensor]:
    """Accumulate dLoss/dLeaf for every leaf marked requires_grad.

    Returns {leaf node id: gradient}; leaves the loss never touched get
    exact zeros. Node values are left untouched, so several losses can
    be differentiated from one graph.
    """
    if loss.graph is not graph:
        raise ContractViolation("loss node belongs to a different graph")
    entries = graph._entries
    le = entries[loss.idx]
    if le.value.size != 1:
        raise ContractViolation(f"loss must be scalar, got shape {le.value.shape}")

    grads: list = [None] * (loss.idx + 1)
    grads[loss.idx] = np.ones_like(le.value)

    for idx in range(loss.idx, -1, -1):
        go = grads[idx]
        if go is None:
            continue
        e = entries[idx]
        if e.back is None:
            continue
        pgrads = e.back(go)
        if graph.check_finite:
            for pg in pgrads:
                if pg is not None and not np.all(np.isfinite(pg)):
                    raise NumericError(f"backward through '{e.kind}' produced a "
                                       "non-finite gradient")
        for pid, pg in zip(e.parents, pgrads):
            if pg is None or not entries[pid].requires_grad:
                continue
            if grads[pid] is None:
                grads[pid] = pg.copy() if pg.base is not None else pg
            else:
                grads[pid] = grads[pid] + pg

    out: dict[int, Tensor] = {}
    for idx, e in enumerate(entries):
        if e.kind == "leaf" and e.requires_grad:
            g = grads[idx] if idx <= loss.idx else None
            out[idx] = Tensor(g) if g is not None else Tensor(np.zeros_like(e.value))
    return out


# ---------------------------------------------------------------------------
# attack primitives


def l2_project(n: Tensor, n0: Tensor, eps: float) -> Tensor:
    """Project n onto the l2 ball of radius eps around n0.

    Interior points (within a 1e-12 relative margin, which also makes
    the projection exactly idempotent) come back unchanged.
    """
    if not isinstance(n, Tensor):
        n = Tensor(n)
    if not isinstance(n0, Tensor):
        n0 = Tensor(n0)
    if n.shape != n0.shape:
        raise ContractViolation(f"l2_project: shape mismatch {n.shape} vs {n0.shape}")
    eps = float(eps)
    if not eps > 0.0:
        raise ContractViolation("l2_project: eps must be positive")
    d = n.data - n0.data
    nrm = float(np.sqrt((d * d).sum()))
    if nrm <= eps * (1.0 + 1e-12):
        return n
    return Tensor(n0.data + d * (eps / nrm))


def sample_gumbel(shape, rng) -> np.ndarray:
    """Standard Gumbel noise, G = -log(-log U) with U clipped into
    (1e-12, 1 - 1e-12) so both logs stay finite."""
    u = rng.random(shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_softmax(logits: Node, tau: float, rng, hard: bool = False):
    """Sample a relaxed categorical row-wise from logits (B x V).

    Returns (soft, sample): soft is softmax((logits + G)/tau); with
    hard=True, sample forwards the one-hot argmax of soft but passes
    gradients through as if it were soft (straight-through), otherwise
    sample is soft itself.
    """
    if not tau > 0.0:
        raise ContractViolation("gumbel_softmax: tau must be positive")
    lv = logits.value
    if lv.ndim != 2:
        raise ContractViolation("gumbel_softmax expects (B, V) logits")
    g = logits.graph
    noise = g.constant(sample_gumbel(lv.shape, rng))
    soft = softmax(scale(add(logits, noise), 1.0 / tau), axis=1)
    if not hard:
        return soft, soft
    onehot = np.zeros_like(soft.value)
    onehot[np.arange(onehot.shape[0]), soft.value.argmax(axis=1)] = 1.0
    return soft, straight_through(soft, onehot)
