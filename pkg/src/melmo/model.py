"""The masked bidirectional projected-LSTM network.

Word embeddings feed L bidirectional LSTM-with-projection layers; each
layer emits, per position, concat(layer_norm(left-to-right h),
layer_norm(right-to-left h)) plus a residual of its input, so width d
is preserved through the stack. A softmax head scores only the
positions the loss needs.

Two cell variants exist. Variant A (the legacy cell) clips the cell
state before the hidden state is computed, so the tanh that produces h
sees the clipped cell. Variant B (the restructured cell, the default)
computes h from the unclipped cell and clips only the carried state,
moving clipping outside the cell body. The two coincide bit-for-bit
whenever the cell clip never activates.

Execution paths: the restructured cell runs on a fused sequence kernel
(single tape record per direction, hand-written backward, batched
weight-gradient GEMMs). The legacy cell's mid-cell clip is exactly what
the fused kernel does not host, so variant A runs the step-composed
reference path built from numkernel primitives. Both paths share the
same arithmetic order, so their forward values agree bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .numkernel import Tensor

VARIANT_A = "a_elmo"
VARIANT_B = "b_masked_elmo"

# gate layout along the 4H axis
_I, _F, _G, _O = range(4)


class ModelError(ValueError):
    """Inconsistent configuration or ill-shaped model input."""


@dataclass
class ModelConfig:
    layers: int            # L
    width: int             # d, embedding and layer width
    state_size: int        # H, internal LSTM state per direction
    proj_size: int         # P, projection per direction (d = 2P)
    vocab_size: int        # V
    cell_clip: float = 3.0
    proj_clip: float = 3.0
    cell_variant: str = VARIANT_B
    ln_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        if 2 * self.proj_size != self.width:
            raise ModelError(
                f"2*proj_size must equal width: 2*{self.proj_size} != {self.width}")
        if self.layers < 1:
            raise ModelError(f"need at least one layer, got {self.layers}")
        if self.state_size < self.proj_size:
            raise ModelError(
                f"state_size {self.state_size} smaller than proj_size {self.proj_size}")
        if self.cell_variant not in (VARIANT_A, VARIANT_B):
            raise ModelError(f"unknown cell variant {self.cell_variant!r}")
        if self.dtype not in ("float32", "float64"):
            raise ModelError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class CellParams:
    """One direction of one layer: gate weights, projection, layer norm."""

    w: Tensor       # (d, 4H) input weights
    r: Tensor       # (P, 4H) recurrent weights
    b: Tensor       # (4H,) bias
    proj: Tensor    # (H, P) state projection
    ln_g: Tensor    # (P,) layer-norm gain
    ln_b: Tensor    # (P,) layer-norm shift

    def named(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.r", self.r
        yield f"{prefix}.b", self.b
        yield f"{prefix}.proj", self.proj
        yield f"{prefix}.ln_g", self.ln_g
        yield f"{prefix}.ln_b", self.ln_b


@dataclass
class LayerParams:
    fwd: CellParams
    bwd: CellParams


@dataclass
class ModelParams:
    embedding: Tensor   # (V, d)
    layers: list
    out_w: Tensor       # (d, V) softmax projection (untied)
    out_b: Tensor       # (V,)

    def named(self):
        yield "embedding", self.embedding
        for l, layer in enumerate(self.layers):
            yield from layer.fwd.named(f"layer{l}.fwd")
            yield from layer.bwd.named(f"layer{l}.bwd")
        yield "out.w", self.out_w
        yield "out.b", self.out_b

    def tensors(self):
        return [t for _, t in self.named()]

    def count(self):
        return int(sum(t.data.size for t in self.tensors()))


def param_count(config):
    """Closed-form trainable parameter count for a configuration."""
    d, h, p, v = config.width, config.state_size, config.proj_size, config.vocab_size
    per_direction = d * 4 * h + p * 4 * h + 4 * h + h * p + 2 * p
    return v * d + config.layers * 2 * per_direction + d * v + v


def init_params(config, seed):
    """Deterministic initialization.

    Matrices draw uniform(-s, s) with s = sqrt(1/fan_in); forget-gate
    bias starts at 1.0, other biases at 0; layer norm starts as the
    identity. The softmax projection starts at zero so an untrained
    model scores every token uniformly.
    """
    rng = np.random.default_rng([seed, 101])
    dt = config.np_dtype
    d, h, p, v = config.width, config.state_size, config.proj_size, config.vocab_size

    def uniform(shape, fan_in, name):
        s = math.sqrt(1.0 / fan_in)
        return Tensor(rng.uniform(-s, s, size=shape).astype(dt),
                      trainable=True, name=name)

    embedding = uniform((v, d), d, "embedding")
    layers = []
    for l in range(config.layers):
        cells = []
        for direction in ("fwd", "bwd"):
            prefix = f"layer{l}.{direction}"
            bias = np.zeros(4 * h, dtype=dt)
            bias[h:2 * h] = 1.0
            cells.append(CellParams(
                w=uniform((d, 4 * h), d, f"{prefix}.w"),
                r=uniform((p, 4 * h), p, f"{prefix}.r"),
                b=Tensor(bias, trainable=True, name=f"{prefix}.b"),
                proj=uniform((h, p), h, f"{prefix}.proj"),
                ln_g=Tensor(np.ones(p, dtype=dt), trainable=True, name=f"{prefix}.ln_g"),
                ln_b=Tensor(np.zeros(p, dtype=dt), trainable=True, name=f"{prefix}.ln_b"),
            ))
        layers.append(LayerParams(fwd=cells[0], bwd=cells[1]))
    out_w = Tensor(np.zeros((d, v), dtype=dt), trainable=True, name="out.w")
    out_b = Tensor(np.zeros(v, dtype=dt), trainable=True, name="out.b")
    return ModelParams(embedding=embedding, layers=layers, out_w=out_w, out_b=out_b)


class LayerState:
    """Recurrent carry: h (B, P) and c (B, H) per layer per direction.

    Carried values are plain arrays, detached from any tape, so
    gradients never cross segment boundaries.
    """

    def __init__(self, pairs):
        self.pairs = pairs  # pairs[l] = ((h_fwd, c_fwd), (h_bwd, c_bwd))

    @classmethod
    def zeros(cls, config, batch_size):
        dt = config.np_dtype
        pairs = []
        for _ in range(config.layers):
            pairs.append(tuple(
                (np.zeros((batch_size, config.proj_size), dtype=dt),
                 np.zeros((batch_size, config.state_size), dtype=dt))
                for _ in range(2)))
        return cls(pairs)

    def layer(self, l):
        return self.pairs[l]

    @property
    def batch_size(self):
        return self.pairs[0][0][0].shape[0]

    def copy(self):
        return LayerState([tuple((h.copy(), c.copy()) for h, c in layer)
                           for layer in self.pairs])

    def allclose(self, other, **kw):
        return all(
            np.allclose(a, b, **kw)
            for mine, theirs in zip(self.pairs, other.pairs)
            for (a, b) in zip(sum(([h, c] for h, c in mine), []),
                              sum(([h, c] for h, c in theirs), [])))


# ---------------------------------------------------------------------------
# cell steps (reference path, built from primitives)
# ---------------------------------------------------------------------------

def _gate_parts(tape, gates, h):
    i = nk.sigmoid(tape, nk.slice_last(tape, gates, 0, h))
    f = nk.sigmoid(tape, nk.slice_last(tape, gates, h, 2 * h))
    g = nk.tanh(tape, nk.slice_last(tape, gates, 2 * h, 3 * h))
    o = nk.sigmoid(tape, nk.slice_last(tape, gates, 3 * h, 4 * h))
    return i, f, g, o


def _step_from_gates(tape, gates, c_prev, cell, variant, cell_clip, proj_clip):
    h_units = cell.b.data.shape[0] // 4
    i, f, g, o = _gate_parts(tape, gates, h_units)
    c_raw = nk.add(tape, nk.mul(tape, f, c_prev), nk.mul(tape, i, g))
    if variant == VARIANT_A:
        c_new = nk.clip(tape, c_raw, cell_clip)   # carried state == what h sees
        th = nk.tanh(tape, c_new)
    else:
        th = nk.tanh(tape, c_raw)                 # h sees the unclipped cell
        c_new = nk.clip(tape, c_raw, cell_clip)
    h = nk.clip(tape, nk.matmul(tape, nk.mul(tape, o, th), cell.proj), proj_clip)
    return h, c_new


def lstmp_step(tape, x, h_prev, c_prev, cell, variant, cell_clip=3.0, proj_clip=3.0):
    """One projected-LSTM step over a (B, d) input slice."""
    gates = nk.add(tape, nk.add(tape, nk.matmul(tape, x, cell.w),
                                nk.matmul(tape, h_prev, cell.r)), cell.b)
    return _step_from_gates(tape, gates, c_prev, cell, variant, cell_clip, proj_clip)


def lstmp_step_a(tape, x, h_prev, c_prev, cell, cell_clip=3.0, proj_clip=3.0):
    """Legacy cell: cell state clipped before the hidden state."""
    return lstmp_step(tape, x, h_prev, c_prev, cell, VARIANT_A, cell_clip, proj_clip)


def lstmp_step_b(tape, x, h_prev, c_prev, cell, cell_clip=3.0, proj_clip=3.0):
    """Restructured cell: h from the unclipped cell, carry clipped after."""
    return lstmp_step(tape, x, h_prev, c_prev, cell, VARIANT_B, cell_clip, proj_clip)


# ---------------------------------------------------------------------------
# sequence scans
# ---------------------------------------------------------------------------

def _scan_order(n, direction):
    if direction == "forward":
        return list(range(n))
    if direction == "backward":
        return list(range(n - 1, -1, -1))
    raise ModelError(f"unknown direction {direction!r}")


def _run_stepwise(tape, x, h0, c0, cell, direction, variant, cell_clip, proj_clip):
    n, b, d = x.data.shape
    xw = nk.matmul(tape, nk.reshape(tape, x, (n * b, d)), cell.w)
    h = Tensor(h0)
    c = Tensor(c0)
    outs = [None] * n
    for t in _scan_order(n, direction):
        xw_t = nk.narrow0(tape, xw, t * b, (t + 1) * b)
        gates = nk.add(tape, nk.add(tape, xw_t, nk.matmul(tape, h, cell.r)), cell.b)
        h, c = _step_from_gates(tape, gates, c, cell, variant, cell_clip, proj_clip)
        outs[t] = h
    outputs = nk.stack(tape, outs)
    return outputs, (h.data.copy(), c.data.copy())


def _run_fused(tape, x, h0, c0, cell, direction, cell_clip, proj_clip):
    """Fused sequence kernel for the restructured cell (variant B).

    Forward arithmetic matches the stepwise path operation for
    operation; the whole scan lands on the tape as one record whose
    backward runs the reverse-time sweep with batched weight-gradient
    GEMMs.
    """
    data = x.data
    n, b, d = data.shape
    w, r, bias, proj = cell.w.data, cell.r.data, cell.b.data, cell.proj.data
    h_units = bias.shape[0] // 4
    p_units = proj.shape[1]
    cc, pc = float(cell_clip), float(proj_clip)
    order = _scan_order(n, direction)

    xw = (data.reshape(n * b, d) @ w).reshape(n, b, 4 * h_units)
    outputs = np.empty((n, b, p_units), dtype=data.dtype)
    want_grad = tape is not None
    if want_grad:
        acts = np.empty((n, b, 4 * h_units), dtype=data.dtype)
        c_raw_all = np.empty((n, b, h_units), dtype=data.dtype)
        th_all = np.empty((n, b, h_units), dtype=data.dtype)
        p_all = np.empty((n, b, p_units), dtype=data.dtype)
        h_prev_all = np.empty((n, b, p_units), dtype=data.dtype)

    h, c = h0, c0
    for t in order:
        if want_grad:
            h_prev_all[t] = h
        a = (xw[t] + h @ r) + bias
        ii = nk.sigmoid_values(a[:, :h_units])
        ff = nk.sigmoid_values(a[:, h_units:2 * h_units])
        gg = np.tanh(a[:, 2 * h_units:3 * h_units])
        oo = nk.sigmoid_values(a[:, 3 * h_units:])
        c_raw = (ff * c) + (ii * gg)
        th = np.tanh(c_raw)
        p = (oo * th) @ proj
        h = np.clip(p, -pc, pc)
        c = np.clip(c_raw, -cc, cc)
        outputs[t] = h
        if want_grad:
            acts[t, :, :h_units] = ii
            acts[t, :, h_units:2 * h_units] = ff
            acts[t, :, 2 * h_units:3 * h_units] = gg
            acts[t, :, 3 * h_units:] = oo
            c_raw_all[t] = c_raw
            p_all[t] = p
            th_all[t] = th

    if not (np.all(np.isfinite(outputs)) and np.all(np.isfinite(c))):
        raise nk.NumericError("run_direction: produced non-finite values")

    out = nk.Tensor.__new__(nk.Tensor)
    out.data = outputs
    out.trainable = False
    out.name = None

    if want_grad:
        def back(g_out):
            d_acts = np.empty_like(acts)
            dp_all = np.empty_like(p_all)
            dh_next = np.zeros((b, p_units), dtype=data.dtype)
            dc_next = np.zeros((b, h_units), dtype=data.dtype)
            for j in range(n - 1, -1, -1):
                t = order[j]
                ii = acts[t, :, :h_units]
                ff = acts[t, :, h_units:2 * h_units]
                gg = acts[t, :, 2 * h_units:3 * h_units]
                oo = acts[t, :, 3 * h_units:]
                th = th_all[t]
                c_raw = c_raw_all[t]
                dh = g_out[t] + dh_next
                dp = dh * (np.abs(p_all[t]) <= pc)
                dp_all[t] = dp
                dm = dp @ proj.T
                do = dm * th
                dc_raw = (dm * oo) * (1.0 - th * th)
                dc_raw += dc_next * (np.abs(c_raw) <= cc)
                if j == 0:
                    c_prev = c0
                else:
                    c_prev = np.clip(c_raw_all[order[j - 1]], -cc, cc)
                d_acts[t, :, :h_units] = (dc_raw * gg) * ii * (1.0 - ii)
                d_acts[t, :, h_units:2 * h_units] = (dc_raw * c_prev) * ff * (1.0 - ff)
                d_acts[t, :, 2 * h_units:3 * h_units] = (dc_raw * ii) * (1.0 - gg * gg)
                d_acts[t, :, 3 * h_units:] = do * oo * (1.0 - oo)
                dc_next = dc_raw * ff
                dh_next = d_acts[t] @ r.T
            da_flat = d_acts.reshape(n * b, 4 * h_units)
            dw = data.reshape(n * b, d).T @ da_flat
            dr = h_prev_all.reshape(n * b, p_units).T @ da_flat
            db = da_flat.sum(axis=0)
            m_all = acts[:, :, 3 * h_units:] * th_all
            dproj = m_all.reshape(n * b, h_units).T @ dp_all.reshape(n * b, p_units)
            dx = (da_flat @ w.T).reshape(n, b, d)
            return dx, dw, dr, db, dproj

        tape.record(out, (x, cell.w, cell.r, cell.b, cell.proj), back)

    return out, (np.array(h, copy=True), np.array(c, copy=True))


def run_direction(tape, x, h0, c0, cell, direction, variant,
                  cell_clip=3.0, proj_clip=3.0, kernel=None):
    """Scan one direction over a (N, B, d) input.

    Output row k is the hidden state at position k; the final state is
    the last state in scan order. Initial states are detached values;
    finals are returned detached. The restructured cell (variant B)
    dispatches to the fused kernel, the legacy cell to the stepwise
    reference path; `kernel` overrides the policy for testing.
    """
    if kernel is None:
        kernel = "fused" if variant == VARIANT_B else "stepwise"
    if kernel == "fused":
        if variant != VARIANT_B:
            raise ModelError("the fused kernel hosts only the restructured cell")
        return _run_fused(tape, x, h0, c0, cell, direction, cell_clip, proj_clip)
    if kernel == "stepwise":
        return _run_stepwise(tape, x, h0, c0, cell, direction, variant,
                             cell_clip, proj_clip)
    raise ModelError(f"unknown kernel {kernel!r}")


def bilstm_layer(tape, x, layer, states, config, kernel=None):
    """One bidirectional layer: concat of layer-normed direction outputs
    plus a residual of the input; width d in, width d out."""
    if x.data.shape[-1] != config.width:
        raise ModelError(
            f"layer input width {x.data.shape[-1]} != configured {config.width}")
    (hf, cf), (hb, cb) = states
    out_f, fin_f = run_direction(tape, x, hf, cf, layer.fwd, "forward",
                                 config.cell_variant, config.cell_clip,
                                 config.proj_clip, kernel)
    out_b, fin_b = run_direction(tape, x, hb, cb, layer.bwd, "backward",
                                 config.cell_variant, config.cell_clip,
                                 config.proj_clip, kernel)
    ln_f = nk.layer_norm(tape, out_f, layer.fwd.ln_g, layer.fwd.ln_b, config.ln_eps)
    ln_b = nk.layer_norm(tape, out_b, layer.bwd.ln_g, layer.bwd.ln_b, config.ln_eps)
    y = nk.add(tape, nk.concat(tape, [ln_f, ln_b], axis=-1), x)
    return y, (fin_f, fin_b)


def forward(tape, ids, states, params, config, predict_rows=None,
            predict_cols=None, kernel=None):
    """Full network over a (B, N) id matrix.

    Returns (logits at the requested positions or None, the L+1 layer
    representations as (N, B, d) tensors, and the new carried states).
    """
    ids = np.asarray(ids, dtype=np.int64)
    b, n = ids.shape
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ModelError("token id out of vocabulary range")
    flat_ids = ids.T.reshape(-1)  # time-major
    emb = nk.gather_rows(tape, params.embedding, flat_ids)
    x = nk.reshape(tape, emb, (n, b, config.width))
    reps = [x]
    new_pairs = []
    for l, layer in enumerate(params.layers):
        x, pair = bilstm_layer(tape, x, layer, states.layer(l), config, kernel)
        reps.append(x)
        new_pairs.append(pair)
    logits = None
    if predict_rows is not None and len(predict_rows):
        predict_rows = np.asarray(predict_rows, dtype=np.int64)
        predict_cols = np.asarray(predict_cols, dtype=np.int64)
        flat_idx = predict_cols * b + predict_rows
        h_final = nk.reshape(tape, x, (n * b, config.width))
        sel = nk.gather_rows(tape, h_final, flat_idx)
        logits = nk.add(tape, nk.matmul(tape, sel, params.out_w), params.out_b)
    return logits, reps, LayerState(new_pairs)


def scalar_mix(reps, weights, gamma):
    """Softmax-weighted sum of the L+1 layer representations, scaled."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(reps),):
        raise ModelError(
            f"scalar_mix needs {len(reps)} weights, got {weights.shape}")
    z = weights - weights.max()
    s = np.exp(z)
    s /= s.sum()
    arrays = [rep.data if isinstance(rep, Tensor) else np.asarray(rep)
              for rep in reps]
    out = np.zeros_like(arrays[0], dtype=np.float64)
    for coeff, arr in zip(s, arrays):
        out += coeff * arr
    return float(gamma) * out
