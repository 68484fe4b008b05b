"""Training loop: masked-LM loss, Adam, mask accumulation, state carry.

One training step corrupts the same batch under k disjoint mask sets,
runs k forward/backward passes that all start from identical recurrent
states, averages the k gradients, and applies one Adam update whose
effective learning rate is base_lr * decay^epoch. Carried states come
from the first pass and are value copies, so gradients never flow
across segment boundaries (standard truncated backpropagation).
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .corpus import make_batch_streams
from .masking import MaskingError, apply_mask_plan, sample_mask_sets
from .model import (VARIANT_B, CellParams, LayerParams, LayerState,
                    ModelConfig, ModelParams, Tensor, forward, init_params,
                    run_direction)
from .wordpiece import TokenSequence


class TrainerError(RuntimeError):
    """Training-time failure: bad gradients, empty holdout, misuse."""


class CheckpointError(ValueError):
    """Unreadable, truncated, or mismatched checkpoint file."""


@dataclass
class TrainRunConfig:
    epochs: int = 10
    mask_accum: int = 4      # k
    mask_rate: float = 0.15  # m
    batch_size: int = 20     # B
    seq_len: int = 128       # N
    btbptt: bool = False
    seed: int = 1
    eval_every: int = 1
    eval_seed: int = 9999
    lr: float = 1e-3
    decay: float = 0.95
    grad_clip: float | None = 10.0

    def __post_init__(self):
        if self.mask_accum * self.mask_rate > 1.0 + 1e-12:
            raise MaskingError(
                f"mask_accum * mask_rate must not exceed 1, got "
                f"{self.mask_accum} * {self.mask_rate}")


@dataclass
class OptimState:
    """Adam moments plus schedule state; moment shapes mirror parameters."""

    m: dict
    v: dict
    step: int = 0
    epoch: int = 0
    lr: float = 1e-3
    decay: float = 0.95
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = 10.0

    @classmethod
    def for_params(cls, params, lr=1e-3, decay=0.95, grad_clip=10.0):
        m = {name: np.zeros_like(t.data) for name, t in params.named()}
        v = {name: np.zeros_like(t.data) for name, t in params.named()}
        return cls(m=m, v=v, lr=lr, decay=decay, grad_clip=grad_clip)

    @property
    def effective_lr(self):
        return self.lr * self.decay ** self.epoch


def masked_lm_loss(tape, logits, plans):
    """Mean negative log-likelihood over every predicted position.

    `logits` rows must align with the plans' predicted positions taken
    in row order. Returns (loss, per-position nll, empty_flag); an
    empty prediction set yields zero loss flagged as a warning.
    """
    targets = (np.concatenate([plan.targets for plan in plans])
               if plans else np.empty(0, dtype=np.int64))
    if logits is None or targets.shape[0] == 0:
        return Tensor(np.zeros(())), np.empty(0), True
    if logits.data.shape[0] != targets.shape[0]:
        raise TrainerError(
            f"{logits.data.shape[0]} logit rows but {targets.shape[0]} targets")
    loss, nll = nk.softmax_xent(tape, logits, targets)
    return loss, nll.data, False


def global_grad_norm(grads):
    total = 0.0
    for g in grads.values():
        total += float(np.vdot(g, g))
    return math.sqrt(total)


def adam_step(params, grads, opt):
    """In-place Adam update with bias correction and optional global-norm
    gradient clipping; effective lr = lr * decay^epoch."""
    scale = 1.0
    if opt.grad_clip is not None:
        norm = global_grad_norm(grads)
        if norm > opt.grad_clip:
            scale = opt.grad_clip / norm
    opt.step += 1
    lr = opt.effective_lr
    b1, b2, eps = opt.beta1, opt.beta2, opt.eps
    bc1 = 1.0 - b1 ** opt.step
    bc2 = 1.0 - b2 ** opt.step
    for name, tensor in params.named():
        g = grads[name]
        if g.shape != tensor.data.shape:
            raise TrainerError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise TrainerError(f"non-finite gradient for {name}")
        if scale != 1.0:
            g = g * scale
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        tensor.data -= (lr * update).astype(tensor.data.dtype, copy=False)


def _mask_rng(seed, epoch, batch_idx, row):
    return np.random.default_rng([seed, 404, epoch, batch_idx, row])


def sample_batch_families(batch, k, m, seed, epoch, batch_idx):
    """One (MaskSetFamily, rng) per batch row on independent substreams;
    the row's rng also serves its passes' replacement draws."""
    families = []
    for row in range(batch.ids.shape[0]):
        seq = TokenSequence(batch.ids[row], batch.special[row])
        rng = _mask_rng(seed, epoch, batch_idx, row)
        families.append((sample_mask_sets(seq, m, k, rng), rng))
    return families


@dataclass
class StepReport:
    losses: list          # mean nll per pass
    counts: list          # predicted positions per pass
    empty_passes: int

    @property
    def predicted(self):
        return int(sum(self.counts))

    @property
    def mean_loss(self):
        total = sum(l * c for l, c in zip(self.losses, self.counts))
        n = self.predicted
        return total / n if n else 0.0


def accumulate_step(batch, states, params, config, vocab, families):
    """k corrupted passes from identical initial states; averaged grads.

    `states` is read, never mutated: every pass starts from the same
    values. Carried states are taken from the first pass. Returns
    (gradients by parameter name, new states, report).
    """
    k = len(families[0][0].plans)
    b = batch.ids.shape[0]
    named = list(params.named())
    leaves = [t for _, t in named]
    acc = {name: np.zeros_like(t.data) for name, t in named}
    carry = None
    losses, counts = [], []
    empty_passes = 0
    for j in range(k):
        ids = batch.ids.copy()
        rows_idx, cols_idx, plans = [], [], []
        for row in range(b):
            family, rng = families[row]
            plan = family.plans[j]
            seq = TokenSequence(batch.ids[row], batch.special[row])
            corrupted = apply_mask_plan(seq, plan, vocab, rng)
            ids[row] = corrupted.ids
            plans.append(plan)
            if len(plan):
                rows_idx.append(np.full(len(plan), row, dtype=np.int64))
                cols_idx.append(plan.positions)
        rows = np.concatenate(rows_idx) if rows_idx else np.empty(0, dtype=np.int64)
        cols = np.concatenate(cols_idx) if cols_idx else np.empty(0, dtype=np.int64)
        tape = nk.Tape()
        logits, _, new_states = forward(tape, ids, states, params, config,
                                        rows, cols)
        loss, nll, empty = masked_lm_loss(tape, logits, plans)
        if j == 0:
            carry = new_states
        if empty:
            empty_passes += 1
            losses.append(0.0)
            counts.append(0)
            continue
        grads = nk.backward(tape, loss, leaves=leaves)
        for name, tensor in named:
            acc[name] += grads[tensor]
        losses.append(loss.item())
        counts.append(int(nll.shape[0]))
    for name in acc:
        acc[name] /= k
    return acc, carry, StepReport(losses, counts, empty_passes)


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    predicted: int
    batches: int
    tokens_per_sec: float
    empty_passes: int


def run_epoch(sched, params, opt, config, run_cfg, vocab, epoch):
    """One pass over the schedule: accumulate + Adam per batch, carrying
    each row's forward and backward final states into its next segment.
    States are zeroed at epoch start."""
    sched.start_epoch(epoch)
    opt.epoch = epoch
    states = LayerState.zeros(config, sched.batch_size)
    total_nll = 0.0
    predicted = 0
    batches = 0
    empty_passes = 0
    t0 = time.perf_counter()
    batch_idx = 0
    while True:
        batch = sched.next_batch()
        families = sample_batch_families(
            batch, run_cfg.mask_accum, run_cfg.mask_rate,
            run_cfg.seed, epoch, batch_idx)
        grads, states, report = accumulate_step(
            batch, states, params, config, vocab, families)
        adam_step(params, grads, opt)
        total_nll += report.mean_loss * report.predicted
        predicted += report.predicted
        empty_passes += report.empty_passes
        batches += 1
        batch_idx += 1
        if batch.epoch_end:
            break
    elapsed = time.perf_counter() - t0
    tokens = batches * sched.batch_size * sched.seq_len
    return EpochReport(
        epoch=epoch,
        mean_loss=total_nll / predicted if predicted else 0.0,
        predicted=predicted,
        batches=batches,
        tokens_per_sec=tokens / elapsed if elapsed > 0 else 0.0,
        empty_passes=empty_passes)


def eval_perplexity(segments, params, config, vocab, mask_rate, seed,
                    batch_size=20):
    """Masked perplexity over a holdout: mask once at `mask_rate` under a
    fixed seed, exp(mean nll over all predicted positions).

    Returns (perplexity, predicted position count). Rows carry state
    across their segment range, forward order only.
    """
    if not segments:
        raise TrainerError("empty holdout: no segments to evaluate")
    b = min(batch_size, len(segments))
    sched = make_batch_streams(segments, b, btbptt=False, seed=0,
                               pad_id=vocab.pad_id)
    states = LayerState.zeros(config, b)
    total = 0.0
    count = 0
    batch_idx = 0
    while True:
        batch = sched.next_batch()
        ids = batch.ids.copy()
        rows_idx, cols_idx, plans = [], [], []
        for row in range(b):
            seq = TokenSequence(batch.ids[row], batch.special[row])
            rng = np.random.default_rng([seed, 505, batch_idx, row])
            family = sample_mask_sets(seq, mask_rate, 1, rng)
            plan = family.plans[0]
            corrupted = apply_mask_plan(seq, plan, vocab, rng)
            ids[row] = corrupted.ids
            plans.append(plan)
            if len(plan):
                rows_idx.append(np.full(len(plan), row, dtype=np.int64))
                cols_idx.append(plan.positions)
        rows = np.concatenate(rows_idx) if rows_idx else np.empty(0, dtype=np.int64)
        cols = np.concatenate(cols_idx) if cols_idx else np.empty(0, dtype=np.int64)
        logits, _, states = forward(None, ids, states, params, config, rows, cols)
        _, nll, empty = masked_lm_loss(None, logits, plans)
        if not empty:
            total += float(nll.sum())
            count += int(nll.shape[0])
        batch_idx += 1
        if batch.epoch_end:
            break
    if count == 0:
        raise TrainerError("holdout produced no predicted positions")
    return math.exp(total / count), count


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

MAGIC = b"MELMO1\x00"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _config_entries(config, opt, extra):
    entries = {
        "model.layers": str(config.layers),
        "model.width": str(config.width),
        "model.state_size": str(config.state_size),
        "model.proj_size": str(config.proj_size),
        "model.vocab_size": str(config.vocab_size),
        "model.cell_clip": repr(config.cell_clip),
        "model.proj_clip": repr(config.proj_clip),
        "model.cell_variant": config.cell_variant,
        "model.ln_eps": repr(config.ln_eps),
        "model.dtype": config.dtype,
    }
    if opt is not None:
        entries.update({
            "opt.step": str(opt.step),
            "opt.epoch": str(opt.epoch),
            "opt.lr": repr(opt.lr),
            "opt.decay": repr(opt.decay),
            "opt.beta1": repr(opt.beta1),
            "opt.beta2": repr(opt.beta2),
            "opt.eps": repr(opt.eps),
            "opt.grad_clip": "none" if opt.grad_clip is None else repr(opt.grad_clip),
        })
    for key, value in (extra or {}).items():
        entries[f"run.{key}"] = str(value)
    return entries


def save_checkpoint(params, opt, config, path, extra=None):
    """Bit-exact binary checkpoint: config block plus named tensors.

    Optimizer moments are stored under the "opt/" name prefix.
    """
    tensors = list(params.named())
    if opt is not None:
        for name in sorted(opt.m):
            tensors.append((f"opt/m/{name}", Tensor(opt.m[name])))
            tensors.append((f"opt/v/{name}", Tensor(opt.v[name])))
    entries = _config_entries(config, opt, extra)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for key in sorted(entries):
            kb = key.encode("utf-8")
            vb = entries[key].encode("utf-8")
            fh.write(struct.pack("<H", len(kb)))
            fh.write(kb)
            fh.write(struct.pack("<I", len(vb)))
            fh.write(vb)
        fh.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors:
            nb = name.encode("utf-8")
            arr = tensor.data
            code = _DTYPE_CODES[arr.dtype]
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(struct.pack("<B", code))
            fh.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())


def _read(fh, nbytes, what):
    buf = fh.read(nbytes)
    if len(buf) != nbytes:
        raise CheckpointError(f"truncated checkpoint ({what})")
    return buf


def load_checkpoint(path):
    """Load a checkpoint; returns (params, opt or None, config, extras)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic in {path}: not a checkpoint")
        version, = struct.unpack("<I", _read(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        n_entries, = struct.unpack("<I", _read(fh, 4, "config count"))
        entries = {}
        for _ in range(n_entries):
            klen, = struct.unpack("<H", _read(fh, 2, "config key"))
            key = _read(fh, klen, "config key").decode("utf-8")
            vlen, = struct.unpack("<I", _read(fh, 4, "config value"))
            entries[key] = _read(fh, vlen, "config value").decode("utf-8")
        n_tensors, = struct.unpack("<I", _read(fh, 4, "tensor count"))
        arrays = {}
        for _ in range(n_tensors):
            nlen, = struct.unpack("<H", _read(fh, 2, "tensor name"))
            name = _read(fh, nlen, "tensor name").decode("utf-8")
            rank, = struct.unpack("<B", _read(fh, 1, "tensor rank"))
            dims = [struct.unpack("<Q", _read(fh, 8, "tensor dim"))[0]
                    for _ in range(rank)]
            code, = struct.unpack("<B", _read(fh, 1, "tensor dtype"))
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"unknown dtype code {code} for {name}")
            dt = _CODE_DTYPES[code]
            n_values = int(np.prod(dims)) if dims else 1
            raw = _read(fh, n_values * dt.itemsize, f"tensor data for {name}")
            arrays[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(
                dt.newbyteorder("="), copy=True)
        if fh.read(1):
            raise CheckpointError("trailing bytes after checkpoint payload")

    try:
        config = ModelConfig(
            layers=int(entries["model.layers"]),
            width=int(entries["model.width"]),
            state_size=int(entries["model.state_size"]),
            proj_size=int(entries["model.proj_size"]),
            vocab_size=int(entries["model.vocab_size"]),
            cell_clip=float(entries["model.cell_clip"]),
            proj_clip=float(entries["model.proj_clip"]),
            cell_variant=entries["model.cell_variant"],
            ln_eps=float(entries["model.ln_eps"]),
            dtype=entries["model.dtype"],
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint missing config entry {exc}") from exc

    def take(name):
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing tensor {name}")
        return Tensor(arrays[name], trainable=True, name=name)

    layers = []
    for l in range(config.layers):
        cells = []
        for direction in ("fwd", "bwd"):
            prefix = f"layer{l}.{direction}"
            cells.append(CellParams(
                w=take(f"{prefix}.w"), r=take(f"{prefix}.r"),
                b=take(f"{prefix}.b"), proj=take(f"{prefix}.proj"),
                ln_g=take(f"{prefix}.ln_g"), ln_b=take(f"{prefix}.ln_b")))
        layers.append(LayerParams(fwd=cells[0], bwd=cells[1]))
    params = ModelParams(embedding=take("embedding"), layers=layers,
                         out_w=take("out.w"), out_b=take("out.b"))

    opt = None
    if "opt.step" in entries:
        m = {}
        v = {}
        for name, _ in params.named():
            m[name] = arrays[f"opt/m/{name}"]
            v[name] = arrays[f"opt/v/{name}"]
        clip_raw = entries["opt.grad_clip"]
        opt = OptimState(
            m=m, v=v,
            step=int(entries["opt.step"]),
            epoch=int(entries["opt.epoch"]),
            lr=float(entries["opt.lr"]),
            decay=float(entries["opt.decay"]),
            beta1=float(entries["opt.beta1"]),
            beta2=float(entries["opt.beta2"]),
            eps=float(entries["opt.eps"]),
            grad_clip=None if clip_raw == "none" else float(clip_raw))

    extras = {k[len("run."):]: v for k, v in entries.items()
              if k.startswith("run.")}
    return params, opt, config, extras


# ---------------------------------------------------------------------------
# cell benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchReport:
    variant: str
    kernel: str
    tokens_per_sec: list

    @property
    def median(self):
        return float(np.median(self.tokens_per_sec))

    @property
    def spread(self):
        return float(np.std(self.tokens_per_sec))


def bench_cell(variant, steps, config, batch_size=32, seq_len=64,
               repeats=5, seed=0):
    """Forward throughput of run_direction for one cell variant.

    `steps` is the total number of time steps per repetition (>= 1000).
    The variant runs on the kernel the dispatch policy gives it, so the
    comparison reflects what training actually executes.
    """
    if steps < 1000:
        raise TrainerError(f"bench needs at least 1000 steps, got {steps}")
    kernel = "fused" if variant == VARIANT_B else "stepwise"
    params = init_params(config, seed)
    cell = params.layers[0].fwd
    rng = np.random.default_rng([seed, 606])
    x = Tensor(rng.standard_normal((seq_len, batch_size, config.width))
               .astype(config.np_dtype) * 0.5)
    h0 = np.zeros((batch_size, config.proj_size), dtype=config.np_dtype)
    c0 = np.zeros((batch_size, config.state_size), dtype=config.np_dtype)
    runs = max(1, math.ceil(steps / seq_len))
    run_direction(None, x, h0, c0, cell, "forward", variant,
                  config.cell_clip, config.proj_clip)  # warmup
    rates = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(runs):
            run_direction(None, x, h0, c0, cell, "forward", variant,
                          config.cell_clip, config.proj_clip)
        elapsed = time.perf_counter() - t0
        rates.append(batch_size * seq_len * runs / elapsed)
    return BenchReport(variant=variant, kernel=kernel, tokens_per_sec=rates)
