"""Reverse-mode differentiation over dense float64 matrices.

Define-by-run: every operation appends a node holding its cached forward
value, its parents, a recompute closure (so finite differencing can re-run
the same graph in place) and a vector-Jacobian closure. All tensors are
2-D row-major float64; scalars are 1x1 and vectors are 1xn rows, which
keeps the primitive set free of broadcasting rules.

The graph is rebuilt from scratch every training step (bags have variable
length), so nodes are cheap plain objects and nothing is cached across
steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """A primitive received operands with incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple[int, int]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {list(shapes)}")


class NonFiniteError(ArithmeticError):
    """A primitive produced (or was fed) a NaN/Inf value."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        super().__init__(f"{op}: non-finite value{': ' + detail if detail else ''}")


class GraphError(RuntimeError):
    """Structural misuse of the graph (e.g. backward from a non-scalar)."""


def _as_matrix(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeMismatch("tensor", arr.shape)  # type: ignore[arg-type]
    return np.ascontiguousarray(arr)


class Tensor:
    """One node of the computation graph.

    Leaves are created directly; interior nodes come out of the primitive
    functions below. `data` is always a 2-D float64 array. `grad` is filled
    on requires_grad leaves by `backward`.
    """

    __slots__ = ("data", "requires_grad", "needs_grad", "grad", "name",
                 "op", "_parents", "_vjp", "_compute", "_checked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_matrix(data)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor", name or "leaf")
        self.requires_grad = requires_grad
        self.needs_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None
        self._compute: Callable[[], np.ndarray] | None = None
        self._checked = True

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise GraphError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        tag = self.name or self.op or "leaf"
        return f"Tensor({tag}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def _finite(data: np.ndarray) -> bool:
    # cheap screen: NaN/Inf propagate through the sum
    with np.errstate(all="ignore"):
        return (math.isfinite(float(data.sum()))
                or bool(np.all(np.isfinite(data))))


def _node(op: str, parents: Sequence[Tensor],
          vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
          fwd: Callable[[], np.ndarray], checked: bool = True) -> Tensor:
    """Append one op node.

    `checked=False` marks ops that provably map finite inputs to finite
    outputs (tanh, softmax, normalization, concatenation, transpose); their
    inputs always come from checked producers, so re-screening is skipped.
    """
    with np.errstate(all="ignore"):
        data = fwd()
    if checked and not _finite(data):
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.needs_grad = any(p.needs_grad for p in parents)
    out.grad = None
    out.name = None
    out.op = op
    out._parents = tuple(parents)
    out._vjp = vjp
    out._compute = fwd
    out._checked = checked
    return out


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)

    def fwd() -> np.ndarray:
        return a.data @ b.data

    def vjp(g: np.ndarray):
        ga = g @ b.data.T if a.needs_grad else None
        gb = a.data.T @ g if b.needs_grad else None
        return ga, gb

    return _node("matmul", (a, b), vjp, fwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch("add", a.shape, b.shape)

    def fwd() -> np.ndarray:
        return a.data + b.data

    def vjp(g: np.ndarray):
        return (g if a.needs_grad else None, g if b.needs_grad else None)

    return _node("add", (a, b), vjp, fwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if not math.isfinite(c):
        raise NonFiniteError("scale", f"constant {c}")

    def fwd() -> np.ndarray:
        return a.data * c

    def vjp(g: np.ndarray):
        return (g * c if a.needs_grad else None,)

    return _node("scale", (a,), vjp, fwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    if a.shape != b.shape:
        raise ShapeMismatch("mul", a.shape, b.shape)

    def fwd() -> np.ndarray:
        return a.data * b.data

    def vjp(g: np.ndarray):
        ga = g * b.data if a.needs_grad else None
        gb = g * a.data if b.needs_grad else None
        return ga, gb

    return _node("mul", (a, b), vjp, fwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeMismatch("concat-rows")
    cols = parts[0].shape[1]
    if any(p.shape[1] != cols for p in parts):
        raise ShapeMismatch("concat-rows", *(p.shape for p in parts))
    splits = np.cumsum([p.shape[0] for p in parts])[:-1]

    def fwd() -> np.ndarray:
        return np.concatenate([p.data for p in parts], axis=0)

    def vjp(g: np.ndarray):
        blocks = np.split(g, splits, axis=0)
        return tuple(blk if p.needs_grad else None for p, blk in zip(parts, blocks))

    return _node("concat-rows", parts, vjp, fwd, checked=False)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeMismatch("concat-cols")
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise ShapeMismatch("concat-cols", *(p.shape for p in parts))
    splits = np.cumsum([p.shape[1] for p in parts])[:-1]

    def fwd() -> np.ndarray:
        return np.concatenate([p.data for p in parts], axis=1)

    def vjp(g: np.ndarray):
        blocks = np.split(g, splits, axis=1)
        return tuple(blk if p.needs_grad else None for p, blk in zip(parts, blocks))

    return _node("concat-cols", parts, vjp, fwd, checked=False)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def row_softmax(a: Tensor) -> Tensor:
    out_ref: list[np.ndarray] = []

    def fwd() -> np.ndarray:
        s = _softmax_rows(a.data)
        out_ref[:] = [s]
        return s

    def vjp(g: np.ndarray):
        if not a.needs_grad:
            return (None,)
        s = out_ref[0]
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return _node("row-softmax", (a,), vjp, fwd, checked=False)


def tanh(a: Tensor) -> Tensor:
    out_ref: list[np.ndarray] = []

    def fwd() -> np.ndarray:
        t = np.tanh(a.data)
        out_ref[:] = [t]
        return t

    def vjp(g: np.ndarray):
        if not a.needs_grad:
            return (None,)
        t = out_ref[0]
        return (g * (1.0 - t * t),)

    return _node("tanh", (a,), vjp, fwd, checked=False)


def exp(a: Tensor) -> Tensor:
    out_ref: list[np.ndarray] = []

    def fwd() -> np.ndarray:
        e = np.exp(a.data)
        out_ref[:] = [e]
        return e

    def vjp(g: np.ndarray):
        if not a.needs_grad:
            return (None,)
        return (g * out_ref[0],)

    return _node("exp", (a,), vjp, fwd)


NORM_EPS = 1e-12


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Row-wise x / max(||x||, eps).

    Healthy rows come out with norm exactly 1 (to float rounding); the eps
    floor keeps near-zero rows defined (they scale by 1/eps instead of
    dividing by zero).
    """

    def fwd() -> np.ndarray:
        norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
        return a.data / np.maximum(norms, NORM_EPS)

    def vjp(g: np.ndarray):
        if not a.needs_grad:
            return (None,)
        x = a.data
        norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
        denom = np.maximum(norms, NORM_EPS)
        dot = (g * x).sum(axis=1, keepdims=True)
        # inside the eps floor the map is linear; kill the curvature term
        live = (norms > NORM_EPS).astype(np.float64)
        return (g / denom - x * (live * dot / (denom * denom * denom)),)

    return _node("l2-normalize-rows", (a,), vjp, fwd, checked=False)


def mean_rows(a: Tensor) -> Tensor:
    n = a.shape[0]

    def fwd() -> np.ndarray:
        return a.data.mean(axis=0, keepdims=True)

    def vjp(g: np.ndarray):
        if not a.needs_grad:
            return (None,)
        return (np.repeat(g, n, axis=0) / n,)

    return _node("mean-rows", (a,), vjp, fwd)


def transpose(a: Tensor) -> Tensor:
    def fwd() -> np.ndarray:
        return a.data.T

    def vjp(g: np.ndarray):
        if not a.needs_grad:
            return (None,)
        return (g.T,)

    return _node("transpose", (a,), vjp, fwd, checked=False)


def matmul_t(a: Tensor, b: Tensor, scale_by: float = 1.0) -> Tensor:
    """Fused scale * (a @ b.T).

    Composition of existing primitives (matmul, transpose, scale) kept as
    one node: it is what every linear map and attention-logit computation
    in the model looks like, and fusing it roughly halves graph size.
    """
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch("matmul-t", a.shape, b.shape)
    c = float(scale_by)

    def fwd() -> np.ndarray:
        out = a.data @ b.data.T
        return out if c == 1.0 else out * c

    def vjp(g: np.ndarray):
        gs = g if c == 1.0 else g * c
        ga = gs @ b.data if a.needs_grad else None
        gb = gs.T @ a.data if b.needs_grad else None
        return ga, gb

    return _node("matmul-t", (a, b), vjp, fwd)


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a 1x1 tensor."""

    def fwd() -> np.ndarray:
        return np.array([[a.data.sum()]])

    def vjp(g: np.ndarray):
        if not a.needs_grad:
            return (None,)
        return (np.full(a.shape, g[0, 0]),)

    return _node("sum", (a,), vjp, fwd)


def nll_indexed_softmax(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Per-row -log(softmax(row)[label]), returned as a Bx1 column.

    The softmax and the log are fused so saturated rows stay finite via the
    usual max-subtraction + log-sum-exp route.
    """
    idx = np.asarray(labels, dtype=np.int64).reshape(-1)
    if idx.shape[0] != logits.shape[0]:
        raise ShapeMismatch("nll-indexed-softmax", logits.shape, (idx.shape[0], 1))
    if idx.size and (idx.min() < 0 or idx.max() >= logits.shape[1]):
        raise GraphError(
            f"nll-indexed-softmax: label out of range for {logits.shape[1]} classes")
    rows = np.arange(idx.shape[0])

    def fwd() -> np.ndarray:
        z = logits.data
        m = z.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
        return (lse - z[rows, idx]).reshape(-1, 1)

    def vjp(g: np.ndarray):
        if not logits.needs_grad:
            return (None,)
        s = _softmax_rows(logits.data)
        s[rows, idx] -= 1.0
        return (s * g,)

    return _node("nll-indexed-softmax", (logits,), vjp, fwd, checked=False)


# ---------------------------------------------------------------------------
# Composite helpers (built from the primitives above)
# ---------------------------------------------------------------------------

def broadcast_scalar(s: Tensor, rows: int, cols: int) -> Tensor:
    """Tile a 1x1 tensor to rows x cols through constant-ones matmuls."""
    if s.shape != (1, 1):
        raise ShapeMismatch("broadcast-scalar", s.shape)
    col = matmul(Tensor(np.ones((rows, 1))), s)
    return matmul(col, Tensor(np.ones((1, cols))))


def broadcast_row(v: Tensor, rows: int) -> Tensor:
    """Tile a 1xd row to rows x d."""
    if v.shape[0] != 1:
        raise ShapeMismatch("broadcast-row", v.shape)
    return matmul(Tensor(np.ones((rows, 1))), v)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused x @ w.T + b (b broadcast over rows). w is (out x in), b 1 x out."""
    if b is None:
        return matmul_t(x, w)
    if x.shape[1] != w.shape[1] or b.shape != (1, w.shape[0]):
        raise ShapeMismatch("affine", x.shape, w.shape, b.shape)

    def fwd() -> np.ndarray:
        return x.data @ w.data.T + b.data

    def vjp(g: np.ndarray):
        gx = g @ w.data if x.needs_grad else None
        gw = g.T @ x.data if w.needs_grad else None
        gb = g.sum(axis=0, keepdims=True) if b.needs_grad else None
        return gx, gw, gb

    return _node("affine", (x, w, b), vjp, fwd)


# ---------------------------------------------------------------------------
# Graph traversal, backward, gradient checking
# ---------------------------------------------------------------------------

def topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of every node reachable from root."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


class Graph:
    """A frozen view of the DAG under one root.

    `forward()` re-executes every cached node in place (leaves keep whatever
    data they currently hold), which is what the finite-difference checker
    perturbs against.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = topo_order(root)
        self.leaves = [n for n in self.nodes if n._compute is None]

    def forward(self) -> Tensor:
        return self._forward_nodes(self.nodes)

    def _forward_nodes(self, nodes: list[Tensor]) -> Tensor:
        with np.errstate(all="ignore"):
            for node in nodes:
                compute = node._compute
                if compute is None:
                    continue
                data = compute()
                if node._checked and not _finite(data):
                    raise NonFiniteError(node.op or "leaf")
                node.data = data
        return self.root

    def backward(self) -> dict[Tensor, np.ndarray]:
        return backward(self.root, _order=self.nodes)

    def parameters(self) -> list[Tensor]:
        return [n for n in self.leaves if n.requires_grad]


def backward(root: Tensor, _order: list[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) for every requires_grad leaf under root.

    Returns a map keyed by the leaf tensors themselves; leaves that do not
    require grad never appear. Also mirrors the result onto `leaf.grad`.
    """
    if root.shape != (1, 1):
        raise GraphError(f"backward requires a scalar root, got shape {root.shape}")
    order = _order if _order is not None else topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not node.needs_grad:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = g
                result[node] = g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.needs_grad:
                continue
            acc = grads.get(id(parent))
            # accumulation allocates a fresh array, so storing the vjp
            # output (possibly a view of g) directly is safe
            grads[id(parent)] = pg if acc is None else acc + pg
    return result


@dataclass
class GradCheckReport:
    """Central-difference audit of one graph's analytic gradients."""

    max_rel_err: dict[str, float]
    non_finite: list[str] = field(default_factory=list)
    tol: float = 1e-5

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.non_finite and self.worst <= self.tol

    def __str__(self) -> str:
        lines = [f"grad check (tol {self.tol:g}): "
                 f"{'PASS' if self.passed else 'FAIL'} worst {self.worst:.3e}"]
        for name, err in sorted(self.max_rel_err.items()):
            lines.append(f"  {name}: {err:.3e}")
        lines.extend(f"  non-finite: {msg}" for msg in self.non_finite)
        return "\n".join(lines)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def _descendants(g: Graph, leaf: Tensor) -> list[Tensor]:
    """Interior nodes whose value depends on `leaf`, in topo order."""
    hit = {id(leaf)}
    out = []
    for node in g.nodes:
        if node._compute is None:
            continue
        if any(id(p) in hit for p in node._parents):
            hit.add(id(node))
            out.append(node)
    return out


def grad_check(graph: Graph | Tensor, h: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients with central differences, leaf by leaf.

    Every coordinate of every requires_grad leaf is perturbed by +-h and the
    graph re-run in place (only the nodes downstream of that leaf, which is
    what makes checking every coordinate of a full model affordable).
    Non-finite forwards at perturbed points are reported, not skipped.
    """
    if not (1e-7 <= h <= 1e-4):
        raise ValueError(f"step h={h} outside [1e-7, 1e-4]")
    g = graph if isinstance(graph, Graph) else Graph(graph)
    analytic = g.backward()
    report = GradCheckReport(max_rel_err={}, tol=tol)
    for i, leaf in enumerate(g.parameters()):
        name = leaf.name or f"leaf{i}"
        an = analytic.get(leaf)
        an = np.zeros_like(leaf.data) if an is None else an
        affected = _descendants(g, leaf)
        flat = leaf.data.reshape(-1)
        an_flat = an.reshape(-1)
        worst = 0.0
        for k in range(flat.size):
            orig = flat[k]
            try:
                flat[k] = orig + h
                f_plus = g._forward_nodes(affected).item()
                flat[k] = orig - h
                f_minus = g._forward_nodes(affected).item()
            except NonFiniteError as err:
                report.non_finite.append(f"{name}[{k}]: {err}")
                continue
            finally:
                flat[k] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, _rel_err(float(an_flat[k]), numeric))
        g._forward_nodes(affected)  # restore base values under this leaf
        report.max_rel_err[name] = worst
    return report


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamError(ValueError):
    """Raised when a gradient is unusable (NaN/Inf or wrong shape)."""


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter tensors.

    Parameters missing from `grads` are treated as zero-gradient (their
    moments still decay). Order of application is the sorted parameter name,
    so updates are deterministic regardless of dict insertion order.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise AdamError(f"gradient shape {g.shape} != parameter shape "
                            f"{p.data.shape} for '{name}'")
        if not np.all(np.isfinite(g)):
            raise AdamError(f"non-finite gradient for parameter '{name}'")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state
