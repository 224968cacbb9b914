"""Dense float64 tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a contiguous float64 numpy array. Every differentiable
operation records a `Function` node holding references to its parents and
whatever context its backward rule needs; calling `backward()` on a scalar
output walks the tape once in reverse topological order and accumulates
gradients into the leaves that requested them.

All operations work on single images in [channels, height, width] layout
(vectors and scalars are plain 1-d / 0-d tensors). Batches are handled one
tape at a time by the training loop, never inside an op.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DivisibilityError, NumericError, ShapeMismatchError

__all__ = [
    "Tensor",
    "Function",
    "add",
    "mul",
    "tensor_sum",
    "relu",
    "sigmoid",
    "conv2d",
    "batch_norm",
    "avg_pool2d",
    "global_avg_pool",
    "bilinear_upsample",
    "concat_channels",
    "fully_connected",
    "scale_by_scalar",
    "index",
    "finite_diff_check",
    "GradCheckReport",
]


class Function:
    """One tape node: parents, saved context, and a backward rule.

    Subclasses implement `forward(*arrays) -> array` and
    `backward(grad) -> tuple of arrays` aligned with the parent tensors
    (entries for parents that do not require gradients may be None).
    """

    def __init__(self, *parents: "Tensor"):
        self.parents = parents

    def forward(self, *arrays):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs) -> "Tensor":
        ctx = cls(*tensors)
        out_data = ctx.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = any(t.requires_grad for t in tensors)
        return Tensor(out_data, requires_grad=requires_grad, ctx=ctx if requires_grad else None)


class Tensor:
    """Flat float64 array plus shape, gradient slot, and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "ctx")

    def __init__(self, data, requires_grad: bool = False, ctx: Function | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.ctx = ctx

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def backward(self):
        """Reverse-mode pass from a scalar root.

        Accumulates into `.grad` on every reachable leaf with
        requires_grad set. Raises on a non-scalar root.
        """
        if self.data.size != 1:
            raise ShapeMismatchError(
                "backward() requires a scalar root", expected=(), got=self.data.shape
            )
        # Iterative topological order over the tape (graphs can be deep).
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited or node.ctx is None:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node.ctx.parents:
                if parent.ctx is not None and id(parent) not in visited:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        if self.ctx is None:
            if self.requires_grad:
                self._accumulate(grads[id(self)])
            return
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            parent_grads = node.ctx.backward(grad)
            for parent, pgrad in zip(node.ctx.parents, parent_grads):
                if pgrad is None or not parent.requires_grad:
                    continue
                if pgrad.shape != parent.data.shape:
                    raise ShapeMismatchError(
                        "backward rule produced a gradient of the wrong shape",
                        expected=parent.data.shape,
                        got=pgrad.shape,
                    )
                if parent.ctx is None:
                    parent._accumulate(pgrad)
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pgrad
                    else:
                        grads[key] = pgrad

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


class _Add(Function):
    def forward(self, x, y):
        if x.shape != y.shape:
            raise ShapeMismatchError("add: operand shapes differ", expected=x.shape, got=y.shape)
        return x + y

    def backward(self, grad):
        return grad, grad


class _Mul(Function):
    def forward(self, x, y):
        if x.shape != y.shape:
            raise ShapeMismatchError("mul: operand shapes differ", expected=x.shape, got=y.shape)
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return grad * self.y, grad * self.x


class _Sum(Function):
    def forward(self, x):
        self.in_shape = x.shape
        return np.asarray(x.sum())

    def backward(self, grad):
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class _ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class _Sigmoid(Function):
    def forward(self, x):
        # Split by sign so exp never overflows.
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self.out = out
        return out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class _Index(Function):
    """Extract element i of a vector as a 0-d scalar node."""

    def forward(self, x, i=0):
        self.i = i
        self.in_shape = x.shape
        return np.asarray(x[i])

    def backward(self, grad):
        out = np.zeros(self.in_shape)
        out[self.i] = grad
        return (out,)


class _Reshape(Function):
    def forward(self, x, shape=None):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class _Scale(Function):
    """Elementwise x * s for a differentiable 0-d scalar s."""

    def forward(self, x, s):
        if s.size != 1:
            raise ShapeMismatchError("scale_by_scalar: s must be a scalar", expected=(), got=s.shape)
        self.x, self.s = x, s
        return x * s

    def backward(self, grad):
        ds = np.asarray((grad * self.x).sum()).reshape(self.s.shape)
        return grad * self.s, ds


def add(x, y) -> Tensor:
    return _Add.apply(_as_tensor(x), _as_tensor(y))


def mul(x, y) -> Tensor:
    return _Mul.apply(_as_tensor(x), _as_tensor(y))


def tensor_sum(x) -> Tensor:
    return _Sum.apply(_as_tensor(x))


def relu(x) -> Tensor:
    return _ReLU.apply(_as_tensor(x))


def sigmoid(x) -> Tensor:
    return _Sigmoid.apply(_as_tensor(x))


def index(x, i) -> Tensor:
    return _Index.apply(_as_tensor(x), i=i)


def scale_by_scalar(x, s) -> Tensor:
    return _Scale.apply(_as_tensor(x), _as_tensor(s))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


class _Conv2d(Function):
    def forward(self, x, w, b, stride=1, padding=0):
        c_out, c_in, k, k2 = w.shape
        if k != k2 or k not in (1, 3):
            raise ShapeMismatchError("conv2d: kernel must be square with k in {1, 3}", got=(k, k2))
        if x.ndim != 3:
            raise ShapeMismatchError("conv2d: input must be [C,H,W]", got=x.shape)
        if x.shape[0] != c_in:
            raise ShapeMismatchError(
                "conv2d: input channels do not match weight C_in",
                expected=w.shape,
                got=x.shape,
            )
        if b.shape != (c_out,):
            raise ShapeMismatchError("conv2d: bias shape", expected=(c_out,), got=b.shape)
        c, h, wd = x.shape
        if padding:
            xp = np.zeros((c, h + 2 * padding, wd + 2 * padding))
            xp[:, padding:padding + h, padding:padding + wd] = x
        else:
            xp = x
        h_out = (h + 2 * padding - k) // stride + 1
        w_out = (wd + 2 * padding - k) // stride + 1
        if k == 1:
            cols = xp[:, ::stride, ::stride].reshape(c, h_out * w_out)
        else:
            win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
            cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(
                c * k * k, h_out * w_out
            )
        out = w.reshape(c_out, c_in * k * k) @ cols + b[:, None]
        self.cols = cols
        self.meta = (x.shape, w.shape, stride, padding, h_out, w_out)
        return out.reshape(c_out, h_out, w_out)

    def backward(self, grad):
        (c, h, wd), wshape, stride, padding, h_out, w_out = self.meta
        c_out, c_in, k, _ = wshape
        w = self.parents[1].data
        g2 = grad.reshape(c_out, h_out * w_out)
        dw = (g2 @ self.cols.T).reshape(wshape)
        db = g2.sum(axis=1)
        dcols = w.reshape(c_out, c_in * k * k).T @ g2
        hp, wp = h + 2 * padding, wd + 2 * padding
        dxp = np.zeros((c, hp, wp))
        dwin = dcols.reshape(c, k, k, h_out, w_out)
        for ki in range(k):
            for kj in range(k):
                dxp[:, ki:ki + stride * h_out:stride, kj:kj + stride * w_out:stride] += dwin[:, ki, kj]
        dx = dxp[:, padding:padding + h, padding:padding + wd] if padding else dxp
        return dx, dw, db


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation; H' = floor((H + 2p - k)/stride) + 1."""
    return _Conv2d.apply(
        _as_tensor(x), _as_tensor(weight), _as_tensor(bias), stride=stride, padding=padding
    )


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


class _BatchNorm(Function):
    def forward(self, x, gamma, beta, running_mean=None, running_var=None,
                training=True, momentum=0.1, eps=1e-5, update_stats=True):
        c = x.shape[0]
        if gamma.shape != (c,) or beta.shape != (c,):
            raise ShapeMismatchError(
                "batch_norm: gamma/beta length must match channels",
                expected=(c,),
                got=(gamma.shape, beta.shape),
            )
        self.training = training
        if training:
            mean = x.mean(axis=(1, 2))
            var = x.var(axis=(1, 2))
            if update_stats:
                running_mean *= 1.0 - momentum
                running_mean += momentum * mean
                running_var *= 1.0 - momentum
                running_var += momentum * var
        else:
            mean = running_mean
            var = running_var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
        self.xhat = xhat
        self.inv_std = inv_std
        self.gamma = gamma
        return gamma[:, None, None] * xhat + beta[:, None, None]

    def backward(self, grad):
        xhat, inv_std, gamma = self.xhat, self.inv_std, self.gamma
        dgamma = (grad * xhat).sum(axis=(1, 2))
        dbeta = grad.sum(axis=(1, 2))
        dxhat = grad * gamma[:, None, None]
        if self.training:
            m = xhat.shape[1] * xhat.shape[2]
            mean_dxhat = dxhat.mean(axis=(1, 2))[:, None, None]
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=(1, 2))[:, None, None]
            dx = inv_std[:, None, None] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
        else:
            dx = dxhat * inv_std[:, None, None]
        return dx, dgamma, dbeta


def batch_norm(x, gamma, beta, running_mean, running_var, training: bool,
               momentum: float = 0.1, eps: float = 1e-5, update_stats: bool = True) -> Tensor:
    """Per-channel normalization over the spatial axes of one image.

    Train mode uses the statistics of the current input and, unless
    update_stats is off, folds them into the running stats in place with
    the given momentum. Eval mode normalizes by the running stats.
    """
    return _BatchNorm.apply(
        _as_tensor(x), _as_tensor(gamma), _as_tensor(beta),
        running_mean=running_mean, running_var=running_var,
        training=training, momentum=momentum, eps=eps, update_stats=update_stats,
    )


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------


class _AvgPool2d(Function):
    def forward(self, x, rate=1):
        c, h, w = x.shape
        if h % rate or w % rate:
            raise DivisibilityError("avg_pool2d input size", size=(h, w), divisor=rate)
        self.rate = rate
        if rate == 1:
            return x.copy()
        # Flatten each block row-major before reducing so the summation
        # order matches a per-block mean bit for bit.
        blocks = x.reshape(c, h // rate, rate, w // rate, rate).transpose(0, 1, 3, 2, 4)
        return blocks.reshape(c, h // rate, w // rate, rate * rate).mean(axis=3)

    def backward(self, grad):
        r = self.rate
        if r == 1:
            return (grad.copy(),)
        g = grad / (r * r)
        return (np.repeat(np.repeat(g, r, axis=1), r, axis=2),)


class _GlobalAvgPool(Function):
    def forward(self, x):
        self.in_shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, grad):
        c, h, w = self.in_shape
        return (np.broadcast_to(grad[:, None, None] / (h * w), self.in_shape).copy(),)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix implementing 1-d bilinear resampling.

    Half-pixel-center convention: source coord s = (d + 0.5) * n_in/n_out - 0.5,
    clamped to [0, n_in - 1]; each output row blends the two clamped neighbors.
    """
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for d in range(n_out):
        s = (d + 0.5) * scale - 0.5
        s = min(max(s, 0.0), n_in - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        f = s - i0
        m[d, i0] += 1.0 - f
        m[d, i1] += f
    return m


class _BilinearUpsample(Function):
    def forward(self, x, out_h=None, out_w=None):
        c, h, w = x.shape
        if out_h < h or out_w < w:
            raise ShapeMismatchError(
                "bilinear_upsample: output must not be smaller than input",
                expected=(h, w), got=(out_h, out_w),
            )
        self.wr = _interp_matrix(h, out_h)
        self.wc = _interp_matrix(w, out_w)
        # Separable: out[c] = Wr @ x[c] @ Wc^T, broadcast over channels.
        return np.matmul(np.matmul(self.wr, x), self.wc.T)

    def backward(self, grad):
        return (np.matmul(np.matmul(self.wr.T, grad), self.wc),)


def avg_pool2d(x, rate: int) -> Tensor:
    """Non-overlapping rate x rate mean pooling; rate=1 is the identity."""
    return _AvgPool2d.apply(_as_tensor(x), rate=rate)


def global_avg_pool(x) -> Tensor:
    """Spatial mean per channel: [C,H,W] -> [C]."""
    return _GlobalAvgPool.apply(_as_tensor(x))


def bilinear_upsample(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize to (out_h, out_w), half-pixel centers, edge clamped."""
    t = _as_tensor(x)
    if t.shape[1] == out_h and t.shape[2] == out_w:
        # Exact identity; keep it on the tape so gradients still flow.
        return _Identity.apply(t)
    return _BilinearUpsample.apply(t, out_h=out_h, out_w=out_w)


# ---------------------------------------------------------------------------
# concatenation and linear
# ---------------------------------------------------------------------------


class _Identity(Function):
    def forward(self, x):
        return x.copy()

    def backward(self, grad):
        return (grad.copy(),)


class _ConcatChannels(Function):
    def forward(self, *xs):
        base = xs[0].shape[1:]
        for i, x in enumerate(xs):
            if x.shape[1:] != base:
                raise ShapeMismatchError(
                    f"concat_channels: input {i} has mismatched trailing dims",
                    expected=base,
                    got=x.shape[1:],
                )
        self.sizes = [x.shape[0] for x in xs]
        return np.concatenate(xs, axis=0)

    def backward(self, grad):
        out = []
        offset = 0
        for n in self.sizes:
            out.append(grad[offset:offset + n])
            offset += n
        return tuple(out)


class _FullyConnected(Function):
    def forward(self, x, w, b):
        if x.ndim != 1 or w.ndim != 2 or x.shape[0] != w.shape[0]:
            raise ShapeMismatchError(
                "fully_connected: x must be [D_in] matching weight [D_in, D_out]",
                expected=w.shape, got=x.shape,
            )
        if b.shape != (w.shape[1],):
            raise ShapeMismatchError("fully_connected: bias shape", expected=(w.shape[1],), got=b.shape)
        self.x, self.w = x, w
        return x @ w + b

    def backward(self, grad):
        return self.w @ grad, np.outer(self.x, grad), grad.copy()


def concat_channels(xs) -> Tensor:
    """Concatenate along axis 0 ([C,H,W] maps or 1-d vectors)."""
    tensors = [_as_tensor(x) for x in xs]
    if len(tensors) == 1:
        return _Identity.apply(tensors[0])
    return _ConcatChannels.apply(*tensors)


def fully_connected(x, weight, bias) -> Tensor:
    """y = x^T W + b for a 1-d input."""
    return _FullyConnected.apply(_as_tensor(x), _as_tensor(weight), _as_tensor(bias))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


class GradCheckReport:
    """Per-parameter comparison of analytic and numeric gradients."""

    def __init__(self, tol: float):
        self.tol = tol
        self.entries: list[dict] = []

    def record(self, name: str, max_rel_err: float, n_checked: int):
        self.entries.append({"name": name, "max_rel_err": max_rel_err, "n_checked": n_checked})

    @property
    def max_rel_err(self) -> float:
        return max((e["max_rel_err"] for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def worst(self) -> dict | None:
        if not self.entries:
            return None
        return max(self.entries, key=lambda e: e["max_rel_err"])

    def summary(self) -> str:
        lines = []
        for e in self.entries:
            status = "ok" if e["max_rel_err"] < self.tol else "FAIL"
            lines.append(
                f"  {e['name']:<40s} max_rel_err={e['max_rel_err']:.3e} "
                f"({e['n_checked']} coords) {status}"
            )
        return "\n".join(lines)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def finite_diff_check(f, params, h: float = 1e-5, tol: float = 1e-4,
                      max_coords_per_param: int | None = None,
                      rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of f against central finite differences.

    f is a nullary callable returning the scalar loss Tensor, closed over
    `params`, a list of (name, Tensor) pairs. Every parameter tensor is
    checked; with max_coords_per_param set, only that many coordinates per
    tensor are perturbed (sampled with rng), otherwise all of them.

    Relative error is |a - n| / max(|a|, |n|, 1e-8); the report passes iff
    the max over all checked coordinates is below tol.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for _, p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError(f"finite_diff_check: non-finite loss {loss.data!r}")
    loss.backward()

    report = GradCheckReport(tol)
    for name, p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        n = p.data.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        worst = 0.0
        checked = 0
        for idx in coords:
            orig = p.data.flat[idx]
            p.data.flat[idx] = orig + h
            fp = f().item()
            p.data.flat[idx] = orig - h
            fm = f().item()
            p.data.flat[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"finite_diff_check: non-finite loss while perturbing {name}")
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, _rel_err(analytic.flat[idx], numeric))
            checked += 1
        report.record(name, worst, checked)
    return report
