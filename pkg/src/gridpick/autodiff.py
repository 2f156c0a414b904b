"""Minimal dense-tensor engine with reverse-mode differentiation.

Covers exactly what the small fully convolutional networks and the transport
cross-correlation need: conv2d (zero/circular padding, stride 1 or 2),
elementwise primitives, 2x nearest upsampling, differentiable patch gathers,
cross-correlation of a rotated query stack against a key feature map, and a
pixel-level cross-entropy.  No broadcasting: shapes must match exactly.

Gradients accumulate additively into ``Tensor.grad`` until cleared; a second
backward pass without reset adds on top of the first.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ValueError):
    pass


class UsageError(ValueError):
    pass


class Tensor:
    """Dense array node in the implicit backward tape."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad=False, _parents=(), _backward_fn=None):
        self.values = np.asarray(values)
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = _parents if self.requires_grad else ()
        self._backward_fn = _backward_fn if self.requires_grad else None

    @property
    def shape(self):
        return self.values.shape

    def _accumulate(self, delta):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += delta

    def backward(self):
        """Reverse-traverse the tape from this scalar, populating grads."""
        if self.values.size != 1:
            raise UsageError(f"backward requires a scalar, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
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
        self._accumulate(np.ones_like(self.values))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(values, requires_grad=False, dtype=None):
    arr = np.asarray(values, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def backward(loss: Tensor):
    loss.backward()


def _same_shape(x: Tensor, y: Tensor, op: str):
    if x.shape != y.shape:
        raise ShapeError(f"{op}: shape mismatch {x.shape} vs {y.shape}")


def add(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "add")

    def bw(g):
        if x.requires_grad:
            x._accumulate(g)
        if y.requires_grad:
            y._accumulate(g)

    return Tensor(x.values + y.values, _parents=(x, y), _backward_fn=bw)


def hadamard(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "hadamard")

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * y.values)
        if y.requires_grad:
            y._accumulate(g * x.values)

    return Tensor(x.values * y.values, _parents=(x, y), _backward_fn=bw)


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return Tensor(np.where(mask, x.values, 0.0), _parents=(x,), _backward_fn=bw)


def tsum(x: Tensor) -> Tensor:
    def bw(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.values, float(g)))

    return Tensor(np.asarray(x.values.sum()), _parents=(x,), _backward_fn=bw)


def permute(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = np.argsort(axes)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g.transpose(inverse))

    return Tensor(x.values.transpose(axes), _parents=(x,), _backward_fn=bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of an (H, W, C) map."""
    if x.values.ndim != 3:
        raise ShapeError(f"upsample2x expects (H, W, C), got {x.shape}")
    out = np.repeat(np.repeat(x.values, 2, axis=0), 2, axis=1)

    def bw(g):
        if x.requires_grad:
            h, w, c = x.shape
            x._accumulate(g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)))

    return Tensor(out, _parents=(x,), _backward_fn=bw)


def gather_patch(x: Tensor, rows: np.ndarray, cols: np.ndarray, valid: np.ndarray) -> Tensor:
    """Differentiable patch gather from an (H, W, C) map.

    Invalid entries read as zero; the gradient routes back into the source
    window only.  Index arrays come from geometry.rotated_crop_indices.
    """
    if x.values.ndim != 3:
        raise ShapeError(f"gather_patch expects (H, W, C), got {x.shape}")
    out = x.values[rows, cols].copy()
    out[~valid] = 0.0

    def bw(g):
        if x.requires_grad:
            dx = np.zeros_like(x.values)
            gm = np.where(valid[..., None], g, 0.0)
            np.add.at(dx, (rows, cols), gm)
            x._accumulate(dx)

    return Tensor(out, _parents=(x,), _backward_fn=bw)


def crop(x: Tensor, center: tuple[int, int], size: int) -> Tensor:
    """Axis-aligned odd-sized crop about a pixel, zero padded at borders."""
    from .geometry import rotated_crop_indices

    rows, cols, valid = rotated_crop_indices(center, 0.0, size, x.shape[0], x.shape[1])
    return gather_patch(x, rows, cols, valid)


@lru_cache(maxsize=256)
def _window_indices(size: int, k: int, stride: int, pad: int, circular: bool):
    starts = np.arange(0, size + 2 * pad - k + 1, stride, dtype=np.int64)
    idx = starts[:, None] + np.arange(k, dtype=np.int64)[None, :] - pad
    if circular:
        idx %= size
    return idx


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad_r: int, pad_c: int, circular: bool):
    h, w, c = x.shape
    if circular:
        xs = x
        ir = _window_indices(h, kh, stride, pad_r, True)
        ic = _window_indices(w, kw, stride, pad_c, True)
    else:
        xs = np.pad(x, ((pad_r, pad_r), (pad_c, pad_c), (0, 0)))
        ir = _window_indices(h, kh, stride, pad_r, False) + pad_r
        ic = _window_indices(w, kw, stride, pad_c, False) + pad_c
    # (out_h, out_w, kh, kw, C) gathered in one fancy-indexing pass.
    patches = xs[ir[:, None, :, None], ic[None, :, None, :]]
    oh, ow = ir.shape[0], ic.shape[0]
    return patches.reshape(oh * ow, kh * kw * c), oh, ow


def _conv_values(x, kernel, stride, circular, pad_r=None, pad_c=None):
    kh, kw, cin, cout = kernel.shape
    if x.shape[2] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape} vs kernel {kernel.shape}")
    pad_r = kh // 2 if pad_r is None else pad_r
    pad_c = kw // 2 if pad_c is None else pad_c
    cols, oh, ow = _im2col(x, kh, kw, stride, pad_r, pad_c, circular)
    out = cols @ kernel.reshape(kh * kw * cin, cout)
    return out.reshape(oh, ow, cout), cols


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "circular") -> Tensor:
    """2-D convolution (cross-correlation convention) over an (H, W, C) map.

    ``kernel`` has shape (kh, kw, C_in, C_out) with odd spatial dims; output
    spatial size is H/stride x W/stride in the "same"-padding arithmetic.
    """
    if padding not in ("zero", "circular"):
        raise ShapeError(f"conv2d: unknown padding {padding!r}")
    if kernel.values.ndim != 4 or x.values.ndim != 3:
        raise ShapeError(f"conv2d: expected (H,W,C) and (kh,kw,Cin,Cout), got {x.shape} and {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel spatial dims must be odd, got {kernel.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    circular = padding == "circular"
    out, cols = _conv_values(x.values, kernel.values, stride, circular)

    def bw(g):
        oh, ow, _ = g.shape
        gmat = g.reshape(oh * ow, cout)
        if kernel.requires_grad:
            dk = cols.T @ gmat
            kernel._accumulate(dk.reshape(kh, kw, cin, cout))
        if x.requires_grad:
            # Transposed conv expressed as a plain conv with the flipped
            # kernel; stride 2 first scatters g onto the even lattice.
            kflip = kernel.values[::-1, ::-1].transpose(0, 1, 3, 2)
            pr, pc = kh // 2, kw // 2
            if stride == 1:
                d = g
            else:
                d = np.zeros((x.shape[0], x.shape[1], cout), dtype=g.dtype)
                d[::2, ::2] = g
            dx, _ = _conv_values(
                d, kflip, 1, circular, pad_r=kh - 1 - pr, pad_c=kw - 1 - pc
            )
            x._accumulate(dx)

    return Tensor(out, _parents=(x, kernel), _backward_fn=bw)


def correlate(query: Tensor, key: Tensor) -> Tensor:
    """Cross-correlate a stack of R query patches against a key feature map.

    ``query``: (R, k, k, C); ``key``: (H, W, C).  Output (H, W, R) with
    entry (u, v, r) the dot product of patch r and the zero-padded key
    window centered at (u, v).  Differentiable w.r.t. both inputs.
    """
    if query.values.ndim != 4 or key.values.ndim != 3:
        raise ShapeError(f"correlate: expected (R,k,k,C) and (H,W,C), got {query.shape} and {key.shape}")
    r, k1, k2, c = query.shape
    if k1 != k2 or k1 % 2 == 0:
        raise ShapeError(f"correlate: patches must be square with odd size, got {query.shape}")
    if key.shape[2] != c:
        raise ShapeError(f"correlate: channel mismatch {query.shape} vs {key.shape}")
    return conv2d(key, permute(query, (1, 2, 3, 0)), stride=1, padding="zero")


def pixel_cross_entropy(logits: Tensor, target) -> Tensor:
    """Softmax cross-entropy over every entry of a logit volume.

    ``target`` is a flat index or an index tuple into ``logits``.
    """
    vals = logits.values
    if not np.all(np.isfinite(vals)):
        raise NumericError("pixel_cross_entropy: non-finite logits")
    flat_target = int(np.ravel_multi_index(target, vals.shape)) if isinstance(target, tuple) else int(target)
    if not (0 <= flat_target < vals.size):
        raise ShapeError(f"target {target} out of range for shape {vals.shape}")
    flat = vals.reshape(-1)
    m = flat.max()
    exps = np.exp(flat - m)
    z = exps.sum()
    loss = np.log(z) - (flat[flat_target] - m)

    def bw(g):
        if logits.requires_grad:
            d = (exps / z) * float(g)
            d[flat_target] -= float(g)
            logits._accumulate(d.reshape(vals.shape))

    return Tensor(np.asarray(loss), _parents=(logits,), _backward_fn=bw)


class SGD:
    """Plain gradient descent over a list of parameter tensors."""

    def __init__(self, params: list[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.values -= (self.lr * p.grad).astype(p.values.dtype, copy=False)


class Adam:
    """Adam with bias correction; moments stored per parameter."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (self.lr / b1t) * m / (np.sqrt(v / b2t) + self.eps)
            p.values -= update.astype(p.values.dtype, copy=False)
