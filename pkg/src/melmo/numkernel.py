"""Dense tensors with reverse-mode differentiation on an explicit tape.

All model math funnels through the primitives here. Each primitive
computes its result with numpy, verifies the output is finite, and
(when a tape is passed) records a backward rule. One reverse sweep of
the tape yields the gradient of a scalar loss for every trainable leaf.
`grad_check` compares tape gradients against central finite differences
and is the verification oracle for everything built on top.

Tensors are values: once produced by a primitive they are never
mutated. Only leaves get mutated in place (optimizer updates between
passes, finite-difference probes). A Tape belongs to one training
stream and must not be shared across threads; the primitives themselves
are pure and thread-safe.
"""

from __future__ import annotations

import numpy as np


class NumericError(ArithmeticError):
    """A primitive produced or was handed non-finite/ill-shaped values."""


class TapeError(RuntimeError):
    """Misuse of a tape: non-scalar loss, loss not produced on the tape."""


FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense n-d float array plus autodiff metadata."""

    __slots__ = ("data", "trainable", "name")

    def __init__(self, data, trainable=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"tensor {name or '<unnamed>'}: non-finite values")
        self.data = arr
        self.trainable = bool(trainable)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def _result(op, arr):
    """Wrap a primitive's output, aborting on NaN/Inf with the op named."""
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.trainable = False
    t.name = None
    return t


class Tape:
    """Append-only record of primitive applications for one stream.

    Records are stored in execution order, so every operand of a record
    was produced by an earlier record or is a leaf; one reverse sweep
    is a valid backward pass.
    """

    def __init__(self):
        self._records = []
        self._leaves = {}
        self._produced = set()

    def watch(self, t):
        """Register a trainable leaf that may not appear in any op."""
        self._leaves[id(t)] = t

    def record(self, out, inputs, backward_fn):
        """Append one application. `backward_fn(grad_out)` must return a
        gradient per input (None to skip an input)."""
        for t in inputs:
            if t.trainable:
                self._leaves[id(t)] = t
        self._records.append((out, inputs, backward_fn))
        self._produced.add(id(out))

    def __len__(self):
        return len(self._records)


def backward(tape, loss, leaves=None):
    """Reverse sweep: gradient of `loss` for every trainable leaf.

    Returns a dict keyed by leaf Tensor. Leaves not reachable from the
    loss map to zeros. When `leaves` is given the result covers exactly
    those; otherwise all trainable tensors the tape has seen.
    """
    if loss.data.shape != ():
        raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
    if id(loss) not in tape._produced:
        raise TapeError("loss was not produced on this tape")
    grads = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for out, inputs, backward_fn in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, backward_fn(g)):
            if gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    targets = leaves if leaves is not None else list(tape._leaves.values())
    return {t: grads.get(id(t), np.zeros_like(t.data)) for t in targets}


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(tape, a, b):
    out = _result("add", a.data + b.data)
    if tape is not None:
        def back(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)
        tape.record(out, (a, b), back)
    return out


def sub(tape, a, b):
    out = _result("sub", a.data - b.data)
    if tape is not None:
        def back(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)
        tape.record(out, (a, b), back)
    return out


def mul(tape, a, b):
    out = _result("mul", a.data * b.data)
    if tape is not None:
        def back(g):
            return (_unbroadcast(g * b.data, a.data.shape),
                    _unbroadcast(g * a.data, b.data.shape))
        tape.record(out, (a, b), back)
    return out


def scale(tape, a, s):
    s = float(s)
    out = _result("scale", a.data * s)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g * s,))
    return out


def matmul(tape, a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise NumericError(f"matmul: operands must be 2-d, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise NumericError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    out = _result("matmul", a.data @ b.data)
    if tape is not None:
        def back(g):
            return g @ b.data.T, a.data.T @ g
        tape.record(out, (a, b), back)
    return out


def sigmoid_values(x):
    """1/(1+e^-x) on a raw array; saturates cleanly at 0 and 1."""
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(tape, x):
    y = _result("sigmoid", sigmoid_values(x.data))
    if tape is not None:
        tape.record(y, (x,), lambda g: (g * y.data * (1.0 - y.data),))
    return y


def tanh(tape, x):
    y = _result("tanh", np.tanh(x.data))
    if tape is not None:
        tape.record(y, (x,), lambda g: (g * (1.0 - y.data * y.data),))
    return y


def clip(tape, x, c):
    """Clamp to [-c, c]; gradient passes through on |x| <= c (the exact
    boundary is treated as interior)."""
    c = float(c)
    if c <= 0.0:
        raise NumericError(f"clip: bound must be positive, got {c}")
    y = _result("clip", np.clip(x.data, -c, c))
    if tape is not None:
        def back(g):
            return (g * (np.abs(x.data) <= c),)
        tape.record(y, (x,), back)
    return y


def layer_norm(tape, x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise NumericError(
            f"layer_norm: gamma/beta must have shape ({d},), got "
            f"{gamma.data.shape} and {beta.data.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    xm = x.data - mean
    var = (xm * xm).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xm * inv
    y = _result("layer_norm", gamma.data * xhat + beta.data)
    if tape is not None:
        def back(g):
            lead = tuple(range(g.ndim - 1))
            dgamma = (g * xhat).sum(axis=lead)
            dbeta = g.sum(axis=lead)
            dxhat = g * gamma.data
            dx = inv * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            return dx, dgamma, dbeta
        tape.record(y, (x, gamma, beta), back)
    return y


def softmax_xent(tape, logits, targets):
    """Mean negative log-likelihood of `targets` under row-wise softmax.

    Returns (loss, per-position nll). Only the loss participates in
    differentiation.
    """
    if logits.data.ndim != 2:
        raise NumericError(f"softmax_xent: logits must be 2-d, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise NumericError(f"softmax_xent: {n} logit rows but {targets.shape} targets")
    if n and (targets.min() < 0 or targets.max() >= v):
        raise NumericError(f"softmax_xent: target id out of range [0, {v})")
    zmax = logits.data.max(axis=1, keepdims=True)
    z = logits.data - zmax
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    nll = np.log(sez[:, 0]) - z[np.arange(n), targets]
    loss = _result("softmax_xent", np.asarray(nll.mean(), dtype=logits.data.dtype))
    if tape is not None:
        def back(g):
            dlogits = ez / sez
            dlogits[np.arange(n), targets] -= 1.0
            dlogits *= float(g) / n
            return (dlogits,)
        tape.record(loss, (logits,), back)
    return loss, Tensor(nll)


def sum_all(tape, x):
    out = _result("sum", np.asarray(x.data.sum(), dtype=x.data.dtype))
    if tape is not None:
        tape.record(out, (x,), lambda g: (np.full_like(x.data, float(g)),))
    return out


def narrow0(tape, x, start, stop):
    """Copy of rows [start, stop) along the first axis."""
    out = _result("narrow0", x.data[start:stop].copy())
    if tape is not None:
        def back(g):
            buf = np.zeros_like(x.data)
            buf[start:stop] = g
            return (buf,)
        tape.record(out, (x,), back)
    return out


def slice_last(tape, x, start, stop):
    """Copy of columns [start, stop) along the last axis."""
    out = _result("slice_last", x.data[..., start:stop].copy())
    if tape is not None:
        def back(g):
            buf = np.zeros_like(x.data)
            buf[..., start:stop] = g
            return (buf,)
        tape.record(out, (x,), back)
    return out


def concat(tape, parts, axis=-1):
    out = _result("concat", np.concatenate([p.data for p in parts], axis=axis))
    if tape is not None:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum(sizes)[:-1]
        def back(g):
            return tuple(np.ascontiguousarray(piece)
                         for piece in np.split(g, offsets, axis=axis))
        tape.record(out, tuple(parts), back)
    return out


def stack(tape, parts):
    """Stack same-shape tensors along a new leading axis."""
    out = _result("stack", np.stack([p.data for p in parts], axis=0))
    if tape is not None:
        def back(g):
            return tuple(g[t] for t in range(len(parts)))
        tape.record(out, tuple(parts), back)
    return out


def reshape(tape, x, shape):
    out = _result("reshape", x.data.reshape(shape))
    if tape is not None:
        tape.record(out, (x,), lambda g: (g.reshape(x.data.shape),))
    return out


def gather_rows(tape, table, idx):
    """Rows of a 2-d tensor selected by an integer index array."""
    idx = np.asarray(idx, dtype=np.int64)
    out = _result("gather_rows", table.data[idx])
    if tape is not None:
        def back(g):
            buf = np.zeros_like(table.data)
            np.add.at(buf, idx, g)
            return (buf,)
        tape.record(out, (table,), back)
    return out


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

class GradCheckReport:
    """Outcome of one grad_check run: max relative error per leaf."""

    def __init__(self, errors, tol):
        self.errors = errors  # leaf name -> max relative error
        self.tol = tol

    @property
    def worst(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return self.worst < self.tol

    def __repr__(self):
        return f"GradCheckReport(worst={self.worst:.3e}, tol={self.tol:.0e}, passed={self.passed})"


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(fn, leaves, step=1e-5, tol=1e-4, max_coords=None, rng=None):
    """Compare tape gradients of `fn` against central differences.

    `fn(tape)` must rebuild the same scalar loss each call (tape may be
    None for the probe evaluations). Leaves must be float64; their data
    is perturbed in place and restored. With `max_coords`, a random
    subset of coordinates per leaf is probed instead of all of them.
    """
    for leaf in leaves:
        if leaf.data.dtype != np.float64:
            raise NumericError(
                f"grad_check: leaf {leaf.name!r} must be float64 for verification")
    rng = rng if rng is not None else np.random.default_rng(0)
    tape = Tape()
    loss = fn(tape)
    grads = backward(tape, loss, leaves=leaves)
    errors = {}
    for k, leaf in enumerate(leaves):
        name = leaf.name or f"leaf{k}"
        flat = leaf.data.reshape(-1)
        n = flat.shape[0]
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        gflat = grads[leaf].reshape(-1)
        worst = 0.0
        for j in coords:
            orig = flat[j]
            flat[j] = orig + step
            up = fn(None).item()
            flat[j] = orig - step
            dn = fn(None).item()
            flat[j] = orig
            fd = (up - dn) / (2.0 * step)
            worst = max(worst, rel_err(gflat[j], fd))
        errors[name] = worst
    return GradCheckReport(errors, tol)
