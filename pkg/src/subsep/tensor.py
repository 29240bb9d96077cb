"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is intentionally small: the strided conv pair, bias add, relu,
matmul, the two norms used by the training loss, add and scalar multiply,
plus the data-movement ops (reshape, transpose, column slicing) needed to
route conv activations into a sample-per-column feature matrix.

Both conv ops use stride 2 in each spatial direction with SAME-style zero
padding, so the output extent is ceil(in/2) and the transposed conv inverts
that shape map exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

STRIDE = 2

# When enabled, every primitive validates that its output is finite.
_CHECK_FINITE = False


class NonFiniteError(ArithmeticError):
    """Raised in checked mode when an op produces NaN or Inf."""


def set_checked(enabled: bool) -> bool:
    """Enable/disable NaN/Inf detection after every primitive. Returns the
    previous setting."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return previous


def _finite_or_raise(arr: np.ndarray, op: str) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")


class Tensor:
    """Array node in a computation graph.

    `data` is always a C-contiguous float64 ndarray. Leaf tensors with
    `requires_grad=True` are trainable parameters; ops produce non-leaf
    tensors carrying a backward rule whenever any input requires gradients.
    Data is treated as immutable once the tensor participates in a graph.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Fan-out gradients add; first contribution initializes.
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor],
          backward: Callable) -> Tensor:
    _finite_or_raise(data, op)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op,
                      parents=tuple(parents), backward=backward)
    return Tensor(data, op=op)


# ---------------------------------------------------------------------------
# graph traversal

@dataclass
class Graph:
    """Topologically ordered op records of the graph below a root tensor
    (parents precede children; the root is last)."""

    nodes: list[Tensor]

    @property
    def root(self) -> Tensor:
        return self.nodes[-1]


def build_graph(root: Tensor) -> Graph:
    """Iterative post-order DFS; each reachable node appears exactly once."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return Graph(order)


def backward(root: Tensor | Graph, seed: float = 1.0) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar root.

    Populates `.grad` on every tensor in the graph that requires gradients
    and returns `{id(leaf): grad}` for the leaf parameters. Gradients from
    fan-out accumulate additively.
    """
    graph = root if isinstance(root, Graph) else build_graph(root)
    top = graph.root
    if top.data.shape != ():
        raise ValueError(f"backward requires a scalar root, got shape {top.shape}")
    for t in graph.nodes:
        t.grad = None
    top.grad = np.asarray(float(seed))
    for t in reversed(graph.nodes):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
    return {id(t): t.grad for t in graph.nodes
            if t.requires_grad and t.is_leaf and t.grad is not None}


# ---------------------------------------------------------------------------
# elementwise / reduction primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _make(out_data, "add", (a, b), bw)


def scalar_mul(s: float, a: Tensor) -> Tensor:
    s = float(s)
    out_data = s * a.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, s * g)

    return _make(out_data, "scalar_mul", (a,), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scalar_mul(-1.0, b))


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data > 0.0))

    return _make(out_data, "relu", (a,), bw)


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False,
           transpose_b: bool = False) -> Tensor:
    """GEMM on 2-D tensors with BLAS-style transpose flags."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D tensors")
    A = a.data.T if transpose_a else a.data
    B = b.data.T if transpose_b else b.data
    if A.shape[1] != B.shape[0]:
        raise ValueError(f"matmul: inner dims {A.shape} x {B.shape}")
    out_data = A @ B

    def bw(g):
        if a.requires_grad:
            _accumulate(a, B @ g.T if transpose_a else g @ B.T)
        if b.requires_grad:
            _accumulate(b, g.T @ A if transpose_b else A.T @ g)

    return _make(out_data, "matmul", (a, b), bw)


def frobenius_sq(a: Tensor) -> Tensor:
    """Sum of squared entries, as a scalar."""
    flat = a.data.ravel()
    out_data = np.asarray(flat @ flat)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, (2.0 * float(g)) * a.data)

    return _make(out_data, "frobenius_sq", (a,), bw)


def l1_sum(a: Tensor) -> Tensor:
    """Entrywise l1 norm, as a scalar. Subgradient at 0 is 0."""
    out_data = np.asarray(np.sum(np.abs(a.data)))

    def bw(g):
        if a.requires_grad:
            _accumulate(a, float(g) * np.sign(a.data))

    return _make(out_data, "l1_sum", (a,), bw)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to an (N, H, W, C) activation."""
    if x.data.ndim != 4 or b.data.ndim != 1 or x.shape[3] != b.shape[0]:
        raise ValueError(f"bias_add: shapes {x.shape} and {b.shape}")
    out_data = x.data + b.data

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 1, 2)))

    return _make(out_data, "bias_add", (x, b), bw)


# ---------------------------------------------------------------------------
# data movement

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out_data = a.data.reshape(shape)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.shape))

    return _make(out_data, "reshape", (a,), bw)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("transpose2d expects a 2-D tensor")
    out_data = np.ascontiguousarray(a.data.T)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g.T)

    return _make(out_data, "transpose2d", (a,), bw)


def slice_columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column block of a 2-D tensor; backward scatters into zeros."""
    if a.data.ndim != 2:
        raise ValueError("slice_columns expects a 2-D tensor")
    if not (0 <= start <= stop <= a.shape[1]):
        raise ValueError(f"slice_columns: bad range [{start}, {stop}) for {a.shape}")
    out_data = np.ascontiguousarray(a.data[:, start:stop])

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            _accumulate(a, full)

    return _make(out_data, "slice_columns", (a,), bw)


# ---------------------------------------------------------------------------
# strided convolution pair

def conv_output_extent(n: int) -> int:
    return -(-n // STRIDE)  # ceil(n / 2)


def _same_padding(n: int, k: int) -> tuple[int, int]:
    out = conv_output_extent(n)
    total = max((out - 1) * STRIDE + k - n, 0)
    return total // 2, total - total // 2


@dataclass(frozen=True)
class ConvGeometry:
    """Shape bookkeeping for one stride-2 SAME conv: image side (H, W) maps
    to feature side (ceil(H/2), ceil(W/2))."""

    in_hw: tuple[int, int]
    out_hw: tuple[int, int]
    kernel: int
    pads: tuple[int, int, int, int]  # top, bottom, left, right

    @staticmethod
    def for_input(in_hw: tuple[int, int], kernel: int) -> "ConvGeometry":
        H, W = int(in_hw[0]), int(in_hw[1])
        pt, pb = _same_padding(H, kernel)
        pl, pr = _same_padding(W, kernel)
        return ConvGeometry((H, W), (conv_output_extent(H), conv_output_extent(W)),
                            kernel, (pt, pb, pl, pr))


# Cap on the im2col buffer per GEMM chunk (in float64 elements, ~64 MB).
_COL_BUDGET = 8_000_000


def _pad_image(x: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    pt, pb, pl, pr = geom.pads
    if pt == pb == pl == pr == 0:
        return x
    N, H, W, C = x.shape
    xp = np.zeros((N, H + pt + pb, W + pl + pr, C))
    xp[:, pt:pt + H, pl:pl + W, :] = x
    return xp


def _conv_forward_data(x: np.ndarray, w: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    N, _, _, Ci = x.shape
    Ho, Wo = geom.out_hw
    k = geom.kernel
    xp = _pad_image(x, geom)
    wmat = w.reshape(k * k * Ci, -1)
    Co = wmat.shape[1]
    out = np.empty((N, Ho, Wo, Co))
    chunk = max(1, _COL_BUDGET // max(1, Ho * Wo * k * k * Ci))
    for n0 in range(0, N, chunk):
        n1 = min(N, n0 + chunk)
        col = np.empty((n1 - n0, Ho, Wo, k, k, Ci))
        for ki in range(k):
            for kj in range(k):
                col[:, :, :, ki, kj, :] = xp[n0:n1, ki:ki + 2 * Ho - 1:2,
                                             kj:kj + 2 * Wo - 1:2, :]
        out[n0:n1] = (col.reshape(-1, k * k * Ci) @ wmat).reshape(n1 - n0, Ho, Wo, Co)
    return out


def _conv_input_grad_data(gy: np.ndarray, w: np.ndarray,
                          geom: ConvGeometry) -> np.ndarray:
    """Adjoint of the forward map in the image argument; also the forward
    map of the transposed conv."""
    N = gy.shape[0]
    H, W = geom.in_hw
    Ho, Wo = geom.out_hw
    k = geom.kernel
    pt, pb, pl, pr = geom.pads
    Ci = w.shape[2]
    gxp = np.zeros((N, H + pt + pb, W + pl + pr, Ci))
    gy_mat = gy.reshape(-1, gy.shape[3])
    for ki in range(k):
        for kj in range(k):
            contrib = gy_mat @ w[ki, kj].T  # (N*Ho*Wo, Ci)
            gxp[:, ki:ki + 2 * Ho - 1:2, kj:kj + 2 * Wo - 1:2, :] += \
                contrib.reshape(N, Ho, Wo, Ci)
    return np.ascontiguousarray(gxp[:, pt:pt + H, pl:pl + W, :])


def _conv_weight_grad_data(x: np.ndarray, gy: np.ndarray,
                           geom: ConvGeometry) -> np.ndarray:
    N, _, _, Ci = x.shape
    Ho, Wo = geom.out_hw
    k = geom.kernel
    Co = gy.shape[3]
    xp = _pad_image(x, geom)
    gy_mat = gy.reshape(N * Ho * Wo, Co)
    gw = np.empty((k, k, Ci, Co))
    for ki in range(k):
        for kj in range(k):
            patch = np.ascontiguousarray(
                xp[:, ki:ki + 2 * Ho - 1:2, kj:kj + 2 * Wo - 1:2, :]
            ).reshape(N * Ho * Wo, Ci)
            gw[ki, kj] = patch.T @ gy_mat
    return gw


def conv2d_stride(x: Tensor, w: Tensor) -> Tensor:
    """Stride-2 SAME conv: (N, H, W, Ci) * (k, k, Ci, Co) -> (N, ceil(H/2),
    ceil(W/2), Co)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d_stride expects 4-D input and kernel")
    if x.shape[3] != w.shape[2]:
        raise ValueError(f"conv2d_stride: {x.shape[3]} input channels vs "
                         f"kernel expecting {w.shape[2]}")
    if w.shape[0] != w.shape[1]:
        raise ValueError("conv2d_stride: kernel must be square")
    geom = ConvGeometry.for_input(x.shape[1:3], w.shape[0])
    out_data = _conv_forward_data(x.data, w.data, geom)

    def bw(g):
        if x.requires_grad:
            _accumulate(x, _conv_input_grad_data(g, w.data, geom))
        if w.requires_grad:
            _accumulate(w, _conv_weight_grad_data(x.data, g, geom))

    return _make(out_data, "conv2d_stride", (x, w), bw)


def conv2d_transpose_stride(x: Tensor, w: Tensor,
                            out_hw: tuple[int, int]) -> Tensor:
    """Exact shape inverse of conv2d_stride.

    Maps (N, h, w, Co) back to (N, H, W, Ci) where (H, W) = out_hw is the
    image-side size recorded when the network was built; requires
    (h, w) == (ceil(H/2), ceil(W/2)). Kernel layout (k, k, Ci, Co) matches
    the forward conv whose adjoint this computes.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d_transpose_stride expects 4-D input and kernel")
    geom = ConvGeometry.for_input(out_hw, w.shape[0])
    if x.shape[1:3] != geom.out_hw:
        raise ValueError(f"conv2d_transpose_stride: input spatial {x.shape[1:3]} "
                         f"does not invert to {tuple(out_hw)}")
    if x.shape[3] != w.shape[3]:
        raise ValueError(f"conv2d_transpose_stride: {x.shape[3]} channels vs "
                         f"kernel expecting {w.shape[3]}")
    out_data = _conv_input_grad_data(x.data, w.data, geom)

    def bw(g):
        if x.requires_grad:
            _accumulate(x, _conv_forward_data(g, w.data, geom))
        if w.requires_grad:
            _accumulate(w, _conv_weight_grad_data(g, x.data, geom))

    return _make(out_data, "conv2d_transpose_stride", (x, w), bw)


# ---------------------------------------------------------------------------
# dispatch + numerical gradient check

_PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "conv2d_stride": conv2d_stride,
    "conv2d_transpose_stride": conv2d_transpose_stride,
    "bias_add": bias_add,
    "relu": relu,
    "matmul": matmul,
    "frobenius_sq": frobenius_sq,
    "l1_sum": l1_sum,
    "add": add,
    "scalar_mul": scalar_mul,
}


def primitive_forward(op: str, inputs: Iterable, **attrs) -> Tensor:
    """Apply a primitive by name. `scalar_mul` takes (scalar, tensor);
    every other op takes tensors only."""
    if op not in _PRIMITIVES:
        raise ValueError(f"unknown primitive {op!r}")
    return _PRIMITIVES[op](*inputs, **attrs)


def gradient_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                   step: float = 1e-5, tolerance: float = 1e-4,
                   max_coords: int | None = None,
                   rng: np.random.Generator | None = None,
                   coord_mask: dict[str, np.ndarray] | None = None) -> dict[str, float]:
    """Compare reverse-mode gradients against central finite differences.

    Returns the worst relative error per parameter; callers assert against
    `tolerance`. Coordinates are subsampled when a parameter has more than
    `max_coords` entries, and `coord_mask` restricts which coordinates of a
    parameter may be perturbed (structurally pinned entries are not free
    coordinates of the loss). The relative-error denominator is floored at
    1e-6 to absorb finite-difference roundoff on near-zero gradients.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    grads = {}
    loss = loss_fn()
    backward(loss)
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} received no gradient")
        grads[name] = p.grad.copy()

    errors: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if coord_mask is not None and name in coord_mask:
            candidates = np.flatnonzero(coord_mask[name].reshape(-1))
        else:
            candidates = np.arange(flat.size)
        n = candidates.size
        if max_coords is not None and n > max_coords:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = candidates[np.sort(gen.choice(n, size=max_coords, replace=False))]
        else:
            coords = candidates
        worst = 0.0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = loss_fn().item()
            flat[idx] = orig - step
            f_minus = loss_fn().item()
            flat[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            ad = grads[name].reshape(-1)[idx]
            err = abs(ad - fd) / max(abs(ad), abs(fd), 1e-6)
            worst = max(worst, err)
        errors[name] = worst
    return errors
