"""Dense-tensor reverse-mode differentiation, just wide enough for the
mesh networks: matmul, bias add, sentinel gather, concat, reshape, ELU,
dropout, sparse apply, the two losses, and Adam.

Everything is double precision. A recorded graph lives in the tensors'
parent links; ``Tensor.backward`` replays it in reverse topological
order, accumulating gradients additively at fan-out.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .sparse import SparseMatrix

__all__ = [
    "Tensor",
    "Parameter",
    "GatherPlan",
    "CheckpointError",
    "matmul",
    "add_bias",
    "add",
    "scale",
    "concat",
    "reshape",
    "gather_rows",
    "elu",
    "dropout",
    "sparse_apply",
    "softmax_cross_entropy",
    "euclidean_loss",
    "mse_loss",
    "adam_step",
    "zero_grad",
    "save_checkpoint",
    "load_checkpoint",
]


class Tensor:
    """Multi-dimensional float64 array participating in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def backward(self) -> None:
        """Backpropagate from a scalar result through the recorded graph."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product with dA = g @ B.T and dB = A.T @ g."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out_holder: list[Tensor] = []

    def backward():
        g = out_holder[0].grad
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out = _result(a.data @ b.data, (a, b), backward)
    out_holder.append(out)
    return out


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Row-broadcast bias add; the only broadcasting the engine does."""
    if x.data.ndim != 2 or bias.data.ndim != 1 or x.data.shape[1] != bias.data.shape[0]:
        raise ValueError(f"add_bias shape mismatch: {x.data.shape} + {bias.data.shape}")
    out_holder: list[Tensor] = []

    def backward():
        g = out_holder[0].grad
        if x.requires_grad:
            x._accumulate(g)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    out = _result(x.data + bias.data[None, :], (x, bias), backward)
    out_holder.append(out)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} + {b.data.shape}")
    out_holder: list[Tensor] = []

    def backward():
        g = out_holder[0].grad
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    out = _result(a.data + b.data, (a, b), backward)
    out_holder.append(out)
    return out


def scale(x: Tensor, factor: float) -> Tensor:
    out_holder: list[Tensor] = []

    def backward():
        if x.requires_grad:
            x._accumulate(out_holder[0].grad * factor)

    out = _result(x.data * factor, (x,), backward)
    out_holder.append(out)
    return out


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    out_holder: list[Tensor] = []

    def backward():
        g = out_holder[0].grad
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])

    out = _result(np.concatenate([t.data for t in tensors], axis=axis),
                  tuple(tensors), backward)
    out_holder.append(out)
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_holder: list[Tensor] = []

    def backward():
        if x.requires_grad:
            x._accumulate(out_holder[0].grad.reshape(x.data.shape))

    out = _result(x.data.reshape(shape), (x,), backward)
    out_holder.append(out)
    return out


class GatherPlan:
    """Precomputed bookkeeping for one gather index matrix.

    Building the backward scatter grouping costs a sort, so call sites
    that reuse an index matrix (spiral tables) should reuse the plan.
    """

    __slots__ = ("idx", "n_rows", "safe", "invalid",
                 "scatter_perm", "scatter_rows", "scatter_starts")

    def __init__(self, idx: np.ndarray, n_rows: int):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.ndim != 2:
            raise ValueError(f"index matrix must be 2-D, got shape {idx.shape}")
        if idx.size and (idx.min() < -1 or idx.max() >= n_rows):
            raise ValueError(f"gather index out of range [-1, {n_rows})")
        self.idx = idx
        self.n_rows = int(n_rows)
        flat = idx.ravel()
        self.invalid = flat < 0
        self.safe = np.where(self.invalid, 0, flat)
        valid_pos = np.nonzero(~self.invalid)[0]
        targets = flat[valid_pos]
        order = np.argsort(targets, kind="stable")
        self.scatter_perm = valid_pos[order]
        self.scatter_rows, self.scatter_starts = np.unique(targets[order], return_index=True)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Concatenate rows of ``x`` selected by each index row.

    ``indices`` is an (R, l) integer matrix (or a prebuilt
    :class:`GatherPlan`); output row i is the concatenation of the l
    selected rows of ``x``. Sentinel -1 contributes a zero block and
    routes no gradient.
    """
    plan = indices if isinstance(indices, GatherPlan) else GatherPlan(indices, x.data.shape[0])
    if plan.n_rows != x.data.shape[0]:
        raise ValueError(f"gather plan expects {plan.n_rows} rows, tensor has {x.data.shape[0]}")
    r, l = plan.idx.shape
    f = x.data.shape[1]
    gathered = x.data[plan.safe]
    if plan.invalid.any():
        gathered[plan.invalid] = 0.0
    out_holder: list[Tensor] = []

    def backward():
        if not x.requires_grad:
            return
        g = out_holder[0].grad.reshape(r * l, f)
        dx = np.zeros_like(x.data)
        if plan.scatter_perm.size:
            sums = np.add.reduceat(g[plan.scatter_perm], plan.scatter_starts, axis=0)
            dx[plan.scatter_rows] = sums
        x._accumulate(dx)

    out = _result(gathered.reshape(r, l * f), (x,), backward)
    out_holder.append(out)
    return out


def elu(x: Tensor) -> Tensor:
    """Exponential linear unit with alpha = 1."""
    xd = x.data
    out_data = np.where(xd >= 0, xd, np.expm1(xd))
    out_holder: list[Tensor] = []

    def backward():
        if x.requires_grad:
            deriv = np.where(xd >= 0, 1.0, out_data + 1.0)
            x._accumulate(out_holder[0].grad * deriv)

    out = _result(out_data, (x,), backward)
    out_holder.append(out)
    return out


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity (same tensor) when eval or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    out_holder: list[Tensor] = []

    def backward():
        if x.requires_grad:
            x._accumulate(out_holder[0].grad * mask)

    out = _result(x.data * mask, (x,), backward)
    out_holder.append(out)
    return out


def sparse_apply(s: SparseMatrix, x: Tensor) -> Tensor:
    """Y = S @ X with dX = S.T @ dY; X may stack several column-count blocks."""
    out_holder: list[Tensor] = []

    def backward():
        if x.requires_grad:
            x._accumulate(s.apply_transpose(out_holder[0].grad))

    out = _result(s.apply(x.data), (x,), backward)
    out_holder.append(out)
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the labeled class."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ValueError(f"logits {z.shape} incompatible with labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError(f"label out of range [0, {z.shape[1]})")
    shifted = z - z.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1)
    softmax = exp / total[:, None]
    rows = np.arange(z.shape[0])
    losses = np.log(total) - shifted[rows, labels]
    out_holder: list[Tensor] = []

    def backward():
        if logits.requires_grad:
            g = softmax.copy()
            g[rows, labels] -= 1.0
            logits._accumulate(g * (float(out_holder[0].grad) / z.shape[0]))

    out = _result(np.float64(losses.mean()), (logits,), backward)
    out_holder.append(out)
    return out


def euclidean_loss(pred: Tensor, target) -> Tensor:
    """Mean Euclidean distance between corresponding rows."""
    t = np.asarray(target, dtype=np.float64)
    if pred.data.shape != t.shape:
        raise ValueError(f"prediction {pred.data.shape} vs target {t.shape}")
    diff = pred.data - t
    norms = np.linalg.norm(diff, axis=1)
    out_holder: list[Tensor] = []

    def backward():
        if pred.requires_grad:
            safe = np.where(norms > 1e-12, norms, 1.0)
            unit = np.where(norms[:, None] > 1e-12, diff / safe[:, None], 0.0)
            pred._accumulate(unit * (float(out_holder[0].grad) / diff.shape[0]))

    out = _result(np.float64(norms.mean()), (pred,), backward)
    out_holder.append(out)
    return out


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared elementwise error."""
    t = np.asarray(target, dtype=np.float64)
    if pred.data.shape != t.shape:
        raise ValueError(f"prediction {pred.data.shape} vs target {t.shape}")
    diff = pred.data - t
    out_holder: list[Tensor] = []

    def backward():
        if pred.requires_grad:
            pred._accumulate(diff * (2.0 * float(out_holder[0].grad) / diff.size))

    out = _result(np.float64(np.mean(diff * diff)), (pred,), backward)
    out_holder.append(out)
    return out


class Parameter:
    """Trainable tensor with Adam moment state."""

    __slots__ = ("tensor", "adam_m", "adam_v", "step_count")

    def __init__(self, data):
        self.tensor = Tensor(data, requires_grad=True)
        self.adam_m = np.zeros_like(self.tensor.data)
        self.adam_v = np.zeros_like(self.tensor.data)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad


def zero_grad(params) -> None:
    for p in params:
        p.tensor.grad = None


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Classic bias-corrected Adam; weight decay is L2 added to the gradient."""
    for p in params:
        g = p.tensor.grad
        if g is None:
            g = np.zeros_like(p.tensor.data)
        if weight_decay:
            g = g + weight_decay * p.tensor.data
        p.step_count += 1
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - beta1 ** p.step_count)
        v_hat = p.adam_v / (1.0 - beta2 ** p.step_count)
        p.tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint pair."""


def save_checkpoint(path, params: dict[str, Parameter], *, seed: int, epoch: int,
                    optimizer: dict | None = None) -> None:
    """Write a JSON manifest plus a raw little-endian float64 blob.

    The blob concatenates every parameter (manifest order), then every
    first moment, then every second moment.
    """
    path = Path(path)
    blob_name = path.stem + ".bin"
    manifest = {
        "blob": blob_name,
        "seed": int(seed),
        "epoch": int(epoch),
        "params": [{"name": name, "shape": list(p.data.shape)} for name, p in params.items()],
        "optimizer": dict(optimizer or {}),
    }
    manifest["optimizer"]["step_counts"] = [p.step_count for p in params.values()]
    chunks = [np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in params.values()]
    chunks += [np.ascontiguousarray(p.adam_m, dtype="<f8").tobytes() for p in params.values()]
    chunks += [np.ascontiguousarray(p.adam_v, dtype="<f8").tobytes() for p in params.values()]
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (path.parent / blob_name).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict, dict[str, Parameter]]:
    """Read a checkpoint manifest and blob back into named parameters."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest {path}: {exc}") from exc
    blob_path = path.parent / manifest["blob"]
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint blob {blob_path}: {exc}") from exc
    entries = manifest["params"]
    total = sum(int(np.prod(e["shape"])) for e in entries)
    expected = 3 * total * 8
    if len(blob) != expected:
        raise CheckpointError(
            f"checkpoint blob {blob_path} has {len(blob)} bytes, expected {expected}")
    flat = np.frombuffer(blob, dtype="<f8")
    params: dict[str, Parameter] = {}
    step_counts = manifest.get("optimizer", {}).get("step_counts")
    offset = 0
    for e in entries:
        size = int(np.prod(e["shape"]))
        p = Parameter(flat[offset:offset + size].reshape(e["shape"]).copy())
        params[e["name"]] = p
        offset += size
    for e in entries:
        size = int(np.prod(e["shape"]))
        params[e["name"]].adam_m = flat[offset:offset + size].reshape(e["shape"]).copy()
        offset += size
    for e in entries:
        size = int(np.prod(e["shape"]))
        params[e["name"]].adam_v = flat[offset:offset + size].reshape(e["shape"]).copy()
        offset += size
    if step_counts is not None:
        for p, count in zip(params.values(), step_counts):
            p.step_count = int(count)
    return manifest, params
