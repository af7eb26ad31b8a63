"""Reverse-mode differentiation over float32 numpy arrays.

This is deliberately not a general autodiff engine. It covers exactly the
operations the cellular-automaton segmenter needs: a depthwise 3x3
perception convolution with replicate padding, per-pixel affine maps (1x1
convolutions), ReLU, a two-channel softmax, cross-entropy, and a handful of
structural ops (concat/slice/add/gate/scale) to wire them into an unrolled
rollout. No broadcasting, no fusion, no higher-order gradients.

Graphs are implicit: every op records its parents and a backward closure on
the output tensor, and ``backward(loss)`` replays them in reverse
topological order. Gradients accumulate into ``.grad`` of every reachable
tensor with ``requires_grad=True``; repeated backward calls without
``zero_grad`` keep accumulating.

The raw array kernels (``conv3x3_replicate``, ``affine_map``, ``softmax2``)
are shared with the inference path so traced and untraced rollouts compute
bit-identical forward values.
"""

from __future__ import annotations

import numpy as np

CE_EPS = np.float32(1e-8)  # floor inside log; keeps saturated softmax finite


# ---------------------------------------------------------------------------
# raw float32 kernels (no graph)
# ---------------------------------------------------------------------------

def conv3x3_replicate(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Depthwise 3x3 cross-correlation with replicate (edge) padding.

    x: (H, W, C), kernels: (K, 3, 3). Returns (H, W, C*K) where output
    channel c*K + k is kernel k applied to input channel c. Zero taps are
    skipped and each kernel accumulates into a contiguous buffer; this is
    the hot loop of every automaton step.
    """
    h, w, c = x.shape
    k = kernels.shape[0]
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.empty((h, w, c, k), dtype=np.float32)
    buf = np.empty((h, w, c), dtype=np.float32)
    tmp = np.empty((h, w, c), dtype=np.float32)
    for ki in range(k):
        started = False
        for di in range(3):
            for dj in range(3):
                coef = kernels[ki, di, dj]
                if coef == 0.0:
                    continue
                src = padded[di:di + h, dj:dj + w, :]
                if not started:
                    np.multiply(src, coef, out=buf)
                    started = True
                else:
                    np.multiply(src, coef, out=tmp)
                    buf += tmp
        out[:, :, :, ki] = buf if started else 0.0
    return out.reshape(h, w, c * k)


def _conv3x3_replicate_grad(gout: np.ndarray, kernels: np.ndarray,
                            shape: tuple[int, int, int]) -> np.ndarray:
    """Adjoint of conv3x3_replicate w.r.t. its input."""
    h, w, c = shape
    k = kernels.shape[0]
    g = gout.reshape(h, w, c, k)
    gpad = np.zeros((h + 2, w + 2, c), dtype=np.float32)
    tmp = np.empty((h, w, c), dtype=np.float32)
    for ki in range(k):
        gk = np.ascontiguousarray(g[:, :, :, ki])
        for di in range(3):
            for dj in range(3):
                coef = kernels[ki, di, dj]
                if coef == 0.0:
                    continue
                np.multiply(gk, coef, out=tmp)
                gpad[di:di + h, dj:dj + w, :] += tmp
    # fold replicate padding back onto the border pixels it came from
    gx = gpad[1:h + 1, 1:w + 1, :].copy()
    gx[0, :, :] += gpad[0, 1:w + 1, :]
    gx[h - 1, :, :] += gpad[h + 1, 1:w + 1, :]
    gx[:, 0, :] += gpad[1:h + 1, 0, :]
    gx[:, w - 1, :] += gpad[1:h + 1, w + 1, :]
    gx[0, 0, :] += gpad[0, 0, :]
    gx[0, w - 1, :] += gpad[0, w + 1, :]
    gx[h - 1, 0, :] += gpad[h + 1, 0, :]
    gx[h - 1, w - 1, :] += gpad[h + 1, w + 1, :]
    return gx


def affine_map(x: np.ndarray, weight: np.ndarray,
               bias: np.ndarray | None) -> np.ndarray:
    """Per-pixel affine map. x: (H, W, Cin), weight: (Cout, Cin)."""
    h, w, cin = x.shape
    out = x.reshape(-1, cin) @ weight.T
    if bias is not None:
        out += bias
    return out.reshape(h, w, weight.shape[0])


def softmax2(logits: np.ndarray) -> np.ndarray:
    """Stabilized per-pixel softmax over the last axis (2 channels)."""
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m, dtype=np.float32)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

class Tensor:
    """A float32 array plus the bookkeeping reverse mode needs."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # adopts g: backward closures hand over freshly built arrays (add and
        # concat_channels copy explicitly since they fan one buffer out)
        if self.grad is None:
            self.grad = g if g.dtype == np.float32 else g.astype(np.float32)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Reverse traversal from a scalar loss.

    Accumulates into ``.grad`` of every reachable tensor with
    ``requires_grad=True``. A graph with no learnable tensors is a no-op.
    Intermediate (non-leaf) gradients are freed as soon as they have been
    consumed, so only leaves keep state across calls.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones((), dtype=np.float32)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
        if node._parents:
            node.grad = None  # non-leaf: consumed, free it


# ---------------------------------------------------------------------------
# differentiable ops
# ---------------------------------------------------------------------------

def depthwise_conv3x3(x: Tensor, kernels: np.ndarray) -> Tensor:
    """Depthwise 3x3 perception convolution; kernels are fixed constants.

    Differentiable w.r.t. the input only. Replicate padding at borders.
    """
    if x.data.ndim != 3 or x.data.shape[0] < 3 or x.data.shape[1] < 3:
        raise ValueError(f"depthwise_conv3x3 needs an HxWxC input with H,W >= 3, got {x.data.shape}")
    if kernels.ndim != 3 or kernels.shape[1:] != (3, 3):
        raise ValueError(f"kernels must have shape (K, 3, 3), got {kernels.shape}")
    kernels = np.asarray(kernels, dtype=np.float32)
    shape = x.data.shape
    out = conv3x3_replicate(x.data, kernels)

    def _bwd(g):
        if x.requires_grad:
            x._accumulate(_conv3x3_replicate_grad(g, kernels, shape))

    return _result(out, (x,), _bwd)


def pointwise_affine(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """out[h, w, :] = weight @ x[h, w, :] + bias at every pixel."""
    if x.data.ndim != 3:
        raise ValueError(f"pointwise_affine input must be HxWxC, got {x.data.shape}")
    cin = x.data.shape[2]
    if weight.data.ndim != 2 or weight.data.shape[1] != cin:
        raise ValueError(
            f"weight shape {weight.data.shape} incompatible with {cin} input channels")
    if bias is not None and bias.data.shape != (weight.data.shape[0],):
        raise ValueError(
            f"bias shape {bias.data.shape} incompatible with weight {weight.data.shape}")
    out = affine_map(x.data, weight.data, None if bias is None else bias.data)
    xflat = x.data.reshape(-1, cin)

    def _bwd(g):
        gz = g.reshape(-1, weight.data.shape[0])
        if x.requires_grad:
            x._accumulate((gz @ weight.data).reshape(x.data.shape))
        if weight.requires_grad:
            weight._accumulate(gz.T @ xflat)
        if bias is not None and bias.requires_grad:
            bias._accumulate(gz.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, _bwd)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""
    data = np.maximum(x.data, np.float32(0))

    def _bwd(g):
        if x.requires_grad:
            x._accumulate(g * (data > 0))  # x > 0 exactly where the output is

    return _result(data, (x,), _bwd)


def softmax_channels(logits: Tensor) -> Tensor:
    """Per-pixel softmax over exactly 2 class channels, max-stabilized."""
    if logits.data.ndim != 3 or logits.data.shape[2] != 2:
        raise ValueError(f"softmax_channels expects HxWx2 logits, got {logits.data.shape}")
    p = softmax2(logits.data)

    def _bwd(g):
        if logits.requires_grad:
            dot = (g * p).sum(axis=-1, keepdims=True)
            logits._accumulate(p * (g - dot))

    return _result(p, (logits,), _bwd)


def cross_entropy_loss(probs: Tensor, target: np.ndarray) -> Tensor:
    """Mean over pixels of -log p_target, with a 1e-8 floor inside the log.

    target is an (H, W) binary mask selecting channel 1 (foreground) or
    channel 0. Gradient flows to the probabilities (and through
    softmax_channels back to the logits).
    """
    if probs.data.ndim != 3 or probs.data.shape[2] != 2:
        raise ValueError(f"cross_entropy_loss expects HxWx2 probabilities, got {probs.data.shape}")
    t = np.asarray(target)
    if t.shape != probs.data.shape[:2]:
        raise ValueError(f"target shape {t.shape} does not match probs {probs.data.shape[:2]}")
    fg = t.astype(bool)
    pt = np.where(fg, probs.data[:, :, 1], probs.data[:, :, 0])
    floored = np.maximum(pt, CE_EPS)
    n = pt.size
    loss = np.float32(-np.log(floored).mean())

    def _bwd(g):
        if probs.requires_grad:
            gpt = np.where(pt > CE_EPS, -1.0 / (n * floored), 0.0).astype(np.float32)
            gp = np.zeros_like(probs.data)
            gp[:, :, 1] = np.where(fg, gpt, 0.0)
            gp[:, :, 0] = np.where(fg, 0.0, gpt)
            probs._accumulate(g * gp)

    return _result(loss, (probs,), _bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add requires matching shapes, got {a.data.shape} vs {b.data.shape}")

    def _bwd(g):
        if a.requires_grad and b.requires_grad:
            a._accumulate(g)
            b._accumulate(g.copy())
        elif a.requires_grad:
            a._accumulate(g)
        elif b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), _bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul requires matching shapes, got {a.data.shape} vs {b.data.shape}")

    def _bwd(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), _bwd)


def total(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar graph node."""

    def _bwd(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, g))

    return _result(np.float32(x.data.sum()), (x,), _bwd)


def gate(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant per-pixel gate of shape (H, W, 1)."""
    mask = np.asarray(mask, dtype=np.float32)

    def _bwd(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _result(x.data * mask, (x,), _bwd)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = np.float32(factor)

    def _bwd(g):
        if x.requires_grad:
            x._accumulate(g * factor)

    return _result(x.data * factor, (x,), _bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[:2] != b.data.shape[:2]:
        raise ValueError(f"concat_channels spatial mismatch: {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[2]

    def _bwd(g):
        if a.requires_grad:
            a._accumulate(g[:, :, :ca].copy())
        if b.requires_grad:
            b._accumulate(g[:, :, ca:].copy())

    return _result(np.concatenate([a.data, b.data], axis=2), (a, b), _bwd)


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    if not (0 <= lo < hi <= x.data.shape[2]):
        raise ValueError(f"channel slice [{lo}:{hi}] out of range for {x.data.shape}")

    def _bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, :, lo:hi] = g
            x._accumulate(gx)

    return _result(x.data[:, :, lo:hi].copy(), (x,), _bwd)
