"""Reverse-mode automatic differentiation over the rendering pipeline.

A small closed set of primitives is recorded on an append-only tape whose
insertion order is a topological order, so the backward pass is a single
reverse sweep with deterministic accumulation. Values are float64 numpy
arrays (scalars are 0-d). One tape serves one refinement job; tapes are
never shared between workers.

Piecewise primitives (max/min selection, the scale floor, bilinear cells in
the splat) propagate the selected branch's gradient; ties break toward the
first index.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from . import _kernels
from .errors import InvalidInputError, NonFiniteGradientError


class Tensor:
    """A tape node: a value plus references to its parents' vjp closures."""

    __slots__ = ("value", "grad", "parents", "name")

    def __init__(self, value, parents=(), name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents  # tuple of (Tensor, vjp) pairs
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.value.shape}>"


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def _record(self, value, parents=(), name: str = "") -> Tensor:
        node = Tensor(value, parents, name)
        self.nodes.append(node)
        return node

    def param(self, value, name: str = "") -> Tensor:
        """A trainable leaf."""
        return self._record(np.array(value, dtype=np.float64), (), name)

    def const(self, value) -> Tensor:
        """A non-trainable leaf (inputs, targets)."""
        return self._record(np.asarray(value, dtype=np.float64), ())

    def backward(self, root: Tensor) -> None:
        """Reverse sweep seeding d(root)/d(root) = 1."""
        if root.value.shape != ():
            raise InvalidInputError("backward root must be a scalar")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones(())
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node.parents:
                pg = vjp(g)
                parent.grad = pg if parent.grad is None else parent.grad + pg

    # ------------------------------------------------------------------
    # elementwise and reduction primitives
    # ------------------------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        return self._record(a.value + b.value,
                            ((a, lambda g: _unbroadcast(g, a.value.shape)),
                             (b, lambda g: _unbroadcast(g, b.value.shape))))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return self._record(a.value - b.value,
                            ((a, lambda g: _unbroadcast(g, a.value.shape)),
                             (b, lambda g: _unbroadcast(-g, b.value.shape))))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        return self._record(a.value * b.value,
                            ((a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
                             (b, lambda g: _unbroadcast(g * a.value, b.value.shape))))

    def add_const(self, a: Tensor, c) -> Tensor:
        return self._record(a.value + c, ((a, lambda g: _unbroadcast(g, a.value.shape)),))

    def mul_const(self, a: Tensor, c) -> Tensor:
        return self._record(a.value * c,
                            ((a, lambda g: _unbroadcast(g * c, a.value.shape)),))

    def square(self, a: Tensor) -> Tensor:
        return self._record(a.value ** 2, ((a, lambda g: g * (2.0 * a.value)),))

    def sqrt(self, a: Tensor) -> Tensor:
        """Exact sqrt value; the derivative is guarded near zero so that
        degenerate (zero-length) segments do not poison the sweep."""
        root = np.sqrt(a.value)
        safe = np.maximum(root, 1e-12)
        return self._record(root, ((a, lambda g: g * (0.5 / safe)),))

    def exp(self, a: Tensor) -> Tensor:
        out = np.exp(a.value)
        return self._record(out, ((a, lambda g: g * out),))

    def sigmoid(self, a: Tensor) -> Tensor:
        out = expit(a.value)
        return self._record(out, ((a, lambda g: g * (out * (1.0 - out))),))

    def softplus(self, a: Tensor) -> Tensor:
        out = np.logaddexp(0.0, a.value)
        return self._record(out, ((a, lambda g: g * expit(a.value)),))

    def clamp_min(self, a: Tensor, floor: float) -> Tensor:
        active = a.value > floor  # at a tie the clamped branch wins (zero grad)
        return self._record(np.maximum(a.value, floor),
                            ((a, lambda g: g * active),))

    def total(self, a: Tensor) -> Tensor:
        return self._record(np.sum(a.value),
                            ((a, lambda g: np.broadcast_to(g, a.value.shape).copy()),))

    def matvec(self, matrix: np.ndarray, a: Tensor) -> Tensor:
        """Constant-matrix product (spline design matrices)."""
        return self._record(matrix @ a.value, ((a, lambda g: matrix.T @ g),))

    def diff1(self, a: Tensor) -> Tensor:
        def vjp(g):
            out = np.zeros_like(a.value)
            out[1:] += g
            out[:-1] -= g
            return out

        return self._record(a.value[1:] - a.value[:-1], ((a, vjp),))

    def diff2(self, a: Tensor) -> Tensor:
        def vjp(g):
            out = np.zeros_like(a.value)
            out[:-2] += g
            out[1:-1] -= 2.0 * g
            out[2:] += g
            return out

        return self._record(a.value[:-2] - 2.0 * a.value[1:-1] + a.value[2:],
                            ((a, vjp),))

    def min_reduce(self, a: Tensor) -> Tensor:
        idx = int(np.argmin(a.value))  # first index on ties

        def vjp(g):
            out = np.zeros_like(a.value)
            out[idx] = g
            return out

        return self._record(a.value.flat[idx], ((a, vjp),))

    def reshape(self, a: Tensor, shape) -> Tensor:
        return self._record(a.value.reshape(shape),
                            ((a, lambda g: g.reshape(a.value.shape)),))

    # ------------------------------------------------------------------
    # image primitives
    # ------------------------------------------------------------------

    def add_n(self, tensors) -> Tensor:
        tensors = list(tensors)
        if not tensors:
            raise InvalidInputError("add_n needs at least one tensor")
        out = tensors[0].value.copy()
        for t in tensors[1:]:
            out += t.value
        return self._record(out, tuple((t, lambda g: g) for t in tensors))

    def max_stack(self, tensors) -> Tensor:
        """Pixelwise max over images; gradient flows to the argmax image
        (first on ties)."""
        tensors = list(tensors)
        if not tensors:
            raise InvalidInputError("max_stack needs at least one tensor")
        stack = np.stack([t.value for t in tensors])
        arg = np.argmax(stack, axis=0)
        parents = []
        for i, t in enumerate(tensors):
            sel = arg == i
            parents.append((t, (lambda s: lambda g: g * s)(sel)))
        return self._record(np.max(stack, axis=0), tuple(parents))

    def conv3x3(self, img: Tensor, kernel: Tensor) -> Tensor:
        out = _kernels.conv3x3_fwd(img.value, kernel.value)
        state = {}

        def vjp_img(g):
            state["dimg"], state["dk"] = _kernels.conv3x3_bwd(
                img.value, kernel.value, g)
            return state["dimg"]

        def vjp_kernel(g):
            return state["dk"]

        # img's vjp runs first (parent order) and fills the shared state
        return self._record(out, ((img, vjp_img), (kernel, vjp_kernel)))

    def splat(self, blob: Tensor, xs: Tensor, ys: Tensor, scales: Tensor,
              shape) -> Tensor:
        """Accumulate bilinear blob splats at (xs, ys) with per-point scales
        onto a fresh zero canvas of the given shape."""
        canvas = np.zeros(shape, dtype=np.float64)
        _kernels.splat_fwd(blob.value, xs.value, ys.value, scales.value, canvas)
        state = {}

        def vjp_blob(g):
            (state["dblob"], state["dxs"], state["dys"],
             state["dscales"]) = _kernels.splat_bwd(
                blob.value, xs.value, ys.value, scales.value, g)
            return state["dblob"]

        return self._record(canvas, ((blob, vjp_blob),
                                     (xs, lambda g: state["dxs"]),
                                     (ys, lambda g: state["dys"]),
                                     (scales, lambda g: state["dscales"])))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    g = np.asarray(g)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


PARAM_GROUPS = ("splines", "background", "blob", "kernel", "width", "composite")


def freeze_mask(scene, groups) -> np.ndarray:
    """Boolean mask over the scene's parameter vector with True for entries
    in the named active groups; gradients outside the mask are forced to
    zero and the optimizer leaves those parameters untouched."""
    groups = set(groups)
    unknown = groups.difference(PARAM_GROUPS)
    if unknown:
        raise InvalidInputError(f"unknown parameter group(s): {sorted(unknown)}")
    layout = scene.param_layout()
    mask = np.zeros(layout.size, dtype=bool)
    for name in groups:
        mask |= layout.group_masks[name]
    return mask


def value_and_grad(y, scene, priors, weights, mask=None, want_aux=False):
    """Total loss and d(loss)/d(theta) for every trainable scalar in the
    scene, via one taped forward pass and one reverse sweep.

    Returns (loss, grads) where grads aligns with the scene's parameter
    layout; with ``want_aux`` returns (loss, grads, aux) where aux carries
    the individual loss terms and the selection signature. Raises
    NonFiniteGradientError naming the offending groups when gradients are
    not finite.
    """
    from .objective import build_total_loss

    tape = Tape()
    loss, leaves, aux = build_total_loss(tape, y, scene, priors, weights)
    tape.backward(loss)

    layout = scene.param_layout()
    grads = np.zeros(layout.size)
    for key, leaf in leaves.items():
        g = leaf.grad
        sl = layout.block_slices[key]
        grads[sl] = 0.0 if g is None else np.asarray(g).ravel()
    if not np.isfinite(grads).all() or not np.isfinite(loss.value):
        bad = [name for name in PARAM_GROUPS
               if not np.isfinite(grads[layout.group_masks[name]]).all()]
        raise NonFiniteGradientError(bad or list(PARAM_GROUPS))
    if mask is not None:
        grads = np.where(mask, grads, 0.0)
    if want_aux:
        return float(loss.value), grads, aux
    return float(loss.value), grads
