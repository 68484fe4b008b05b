"""Command-line entry point: pretrain, eval, extract, gradcheck, ablate,
bench-cell.

Every run appends one JSON record to <out>/manifest.jsonl (append-only;
one record per line, sorted keys). Pretraining also appends one metrics
record per epoch to <out>/metrics.jsonl. Exit codes: 0 success, 1
internal failure, 2 bad input or flags. MELMO_THREADS caps the BLAS
thread pool for bit-reproducible single-thread runs.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import subprocess
import sys
import time

import numpy as np

from . import __version__
from .corpus import (CorpusError, DocumentSet, load_corpus, make_batch_streams,
                     read_documents, segment_stream, shuffle_documents)
from .masking import MaskingError
from .model import (LayerState, ModelConfig, ModelError, ModelParams, Tensor,
                    VARIANT_A, VARIANT_B, bilstm_layer, forward, init_params,
                    lstmp_step_a, lstmp_step_b, scalar_mix)
from .numkernel import (NumericError, Tape, TapeError, grad_check, matmul,
                        layer_norm, sigmoid, softmax_xent, sum_all, tanh)
from . import numkernel as nk
from .trainer import (CheckpointError, OptimState, TrainRunConfig,
                      TrainerError, bench_cell, eval_perplexity,
                      load_checkpoint, run_epoch, save_checkpoint)
from .wordpiece import VocabError, encode_document, load_vocab

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    """Bad flag combination caught at the CLI layer."""


_USAGE_ERRORS = (UsageError, VocabError, CorpusError, MaskingError,
                 ModelError, CheckpointError, FileNotFoundError)

_thread_limit_handle = None


def _apply_thread_limit():
    """Honor MELMO_THREADS by capping the BLAS thread pool."""
    global _thread_limit_handle
    raw = os.environ.get("MELMO_THREADS")
    if not raw:
        return None
    n = max(1, int(raw))
    try:
        from threadpoolctl import threadpool_limits
        _thread_limit_handle = threadpool_limits(limits=n)
    except ImportError:
        pass
    return n


def build_id():
    base = f"melmo-{__version__}"
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)))
        if out.returncode == 0 and out.stdout.strip():
            return f"{base}+g{out.stdout.strip()}"
    except OSError:
        pass
    return base


def _write_manifest(out_dir, record):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.jsonl"), "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _append_jsonl(path, record):
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _require_file(path, what):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{what} file not found: {path}")
    return path


def _model_config(args):
    return ModelConfig(
        layers=args.layers, width=args.width, state_size=args.state_size,
        proj_size=args.proj_size, vocab_size=args.vocab_size,
        cell_clip=args.cell_clip, proj_clip=args.proj_clip,
        cell_variant=args.cell_variant, dtype=args.dtype)


def _run_config(args):
    return TrainRunConfig(
        epochs=args.epochs, mask_accum=args.mask_accum,
        mask_rate=args.mask_rate, batch_size=args.batch,
        seq_len=args.seq_len, btbptt=args.btbptt, seed=args.seed,
        eval_every=args.eval_every, eval_seed=args.eval_seed,
        lr=args.lr, decay=args.decay,
        grad_clip=None if args.no_grad_clip else args.grad_clip)


def _resolved(args):
    skip = {"func"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _split_documents(raw_docs, dev_frac, seed):
    """Deterministic document-level shuffle, then carve the tail off as
    the holdout. Order depends only on (seed, document count), matching
    shuffle_documents."""
    perm = np.random.default_rng(seed).permutation(len(raw_docs))
    shuffled = [raw_docs[i] for i in perm]
    n_dev = max(1, int(round(dev_frac * len(shuffled)))) if dev_frac > 0 else 0
    if n_dev >= len(shuffled):
        raise CorpusError("holdout fraction leaves no training documents")
    if n_dev == 0:
        return shuffled, []
    return shuffled[:-n_dev], shuffled[-n_dev:]


def _write_raw_docs(path, docs):
    with open(path, "w", encoding="utf-8") as fh:
        for i, sentences in enumerate(docs):
            if i:
                fh.write("\n")
            for line in sentences:
                fh.write(line + "\n")


def _encode_docs(raw_docs, vocab):
    encoded = [encode_document(sentences, vocab) for sentences in raw_docs]
    encoded = [doc for doc in encoded if len(doc)]
    if not encoded:
        raise CorpusError("zero usable documents")
    return DocumentSet(encoded)


def _fit(segments, dev_segments, vocab, config, run_cfg, log=None,
         metrics_path=None, eval_batch=20):
    """Train for run_cfg.epochs over fixed segments; returns (params, opt,
    per-epoch metric dicts)."""
    params = init_params(config, run_cfg.seed)
    opt = OptimState.for_params(params, lr=run_cfg.lr, decay=run_cfg.decay,
                                grad_clip=run_cfg.grad_clip)
    sched = make_batch_streams(segments, run_cfg.batch_size, run_cfg.btbptt,
                               seed=run_cfg.seed, pad_id=vocab.pad_id)
    history = []
    for epoch in range(run_cfg.epochs):
        report = run_epoch(sched, params, opt, config, run_cfg, vocab, epoch)
        entry = {
            "epoch": epoch,
            "train_loss": report.mean_loss,
            "predicted_positions": report.predicted,
            "tokens_per_sec": round(report.tokens_per_sec, 1),
        }
        is_last = epoch == run_cfg.epochs - 1
        if dev_segments and (is_last or (epoch + 1) % run_cfg.eval_every == 0):
            ppl, n = eval_perplexity(dev_segments, params, config, vocab,
                                     run_cfg.mask_rate, run_cfg.eval_seed,
                                     batch_size=eval_batch)
            entry["dev_ppl"] = ppl
            entry["dev_positions"] = n
        history.append(entry)
        if metrics_path:
            _append_jsonl(metrics_path, entry)
        if log:
            dev = f"  dev_ppl {entry['dev_ppl']:.4f}" if "dev_ppl" in entry else ""
            log(f"epoch {epoch:3d}  train_loss {entry['train_loss']:.4f}{dev}"
                f"  tok/s {entry['tokens_per_sec']:.0f}")
    return params, opt, history


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def cmd_pretrain(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    t0 = time.perf_counter()
    _require_file(args.vocab, "vocab")
    _require_file(args.corpus, "corpus")
    vocab = load_vocab(args.vocab)
    args.vocab_size = vocab.size
    config = _model_config(args)
    run_cfg = _run_config(args)

    raw_docs = read_documents(args.corpus)
    if not raw_docs:
        raise CorpusError(f"zero documents in corpus {args.corpus}")
    os.makedirs(args.out, exist_ok=True)
    if args.dev_corpus:
        _require_file(args.dev_corpus, "dev corpus")
        perm = np.random.default_rng(args.seed).permutation(len(raw_docs))
        train_raw = [raw_docs[i] for i in perm]
        dev_raw = read_documents(args.dev_corpus)
        holdout_path = args.dev_corpus
    else:
        train_raw, dev_raw = _split_documents(raw_docs, args.dev_frac, args.seed)
        holdout_path = os.path.join(args.out, "holdout.txt")
        _write_raw_docs(holdout_path, dev_raw)
    train_ds = _encode_docs(train_raw, vocab)
    dev_ds = _encode_docs(dev_raw, vocab) if dev_raw else None

    segments = segment_stream(train_ds, run_cfg.seq_len, vocab)
    dev_segments = (segment_stream(dev_ds, run_cfg.seq_len, vocab)
                    if dev_ds else [])
    print(f"corpus: {len(train_ds)} train docs, {train_ds.total_tokens()} tokens, "
          f"{len(segments)} segments of {run_cfg.seq_len}"
          + (f"; holdout {dev_ds.total_tokens()} tokens" if dev_ds else ""))

    metrics_path = os.path.join(args.out, "metrics.jsonl")
    params, opt, history = _fit(
        segments, dev_segments, vocab, config, run_cfg,
        log=print, metrics_path=metrics_path, eval_batch=args.eval_batch)

    ckpt_path = os.path.join(args.out, "checkpoint.melmo")
    extra = {
        "seed": run_cfg.seed, "eval_seed": run_cfg.eval_seed,
        "mask_rate": run_cfg.mask_rate, "mask_accum": run_cfg.mask_accum,
        "seq_len": run_cfg.seq_len, "batch": run_cfg.batch_size,
        "eval_batch": args.eval_batch, "btbptt": int(run_cfg.btbptt),
        "holdout": holdout_path, "vocab": args.vocab,
    }
    save_checkpoint(params, opt, config, ckpt_path, extra=extra)
    print(f"checkpoint written to {ckpt_path}")

    final = history[-1] if history else {}
    _write_manifest(args.out, {
        "command": "pretrain", "config": _resolved(args), "seed": args.seed,
        "corpus": args.corpus, "vocab": args.vocab, "build_id": build_id(),
        "started": started, "ended": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "elapsed_sec": round(time.perf_counter() - t0, 3),
        "metrics": {
            "final_train_loss": final.get("train_loss"),
            "final_dev_ppl": final.get("dev_ppl"),
            "checkpoint": ckpt_path,
        }})
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.vocab, "vocab")
    _require_file(args.corpus, "corpus")
    params, _, config, extras = load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    if vocab.size != config.vocab_size:
        raise VocabError(
            f"vocab size {vocab.size} does not match checkpoint "
            f"({config.vocab_size})")
    seq_len = args.seq_len or int(extras.get("seq_len", 128))
    mask_rate = args.mask_rate if args.mask_rate is not None else \
        float(extras.get("mask_rate", 0.15))
    eval_seed = args.eval_seed if args.eval_seed is not None else \
        int(extras.get("eval_seed", 9999))
    batch = args.batch or int(extras.get("eval_batch", 20))

    ds = load_corpus(args.corpus, vocab)
    segments = segment_stream(ds, seq_len, vocab)
    ppl, count = eval_perplexity(segments, params, config, vocab,
                                 mask_rate, eval_seed, batch_size=batch)
    print(f"masked_perplexity={ppl!r} predicted_positions={count}")
    _write_manifest(args.out, {
        "command": "eval", "config": _resolved(args), "seed": eval_seed,
        "corpus": args.corpus, "vocab": args.vocab, "build_id": build_id(),
        "started": started, "ended": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "metrics": {"masked_perplexity": ppl, "predicted_positions": count}})
    return EXIT_OK


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------

def cmd_extract(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.vocab, "vocab")
    _require_file(args.input, "input")
    params, _, config, extras = load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    if vocab.size != config.vocab_size:
        raise VocabError(
            f"vocab size {vocab.size} does not match checkpoint "
            f"({config.vocab_size})")
    n_layers = config.layers
    if args.layers != "all":
        idx = int(args.layers)
        if idx < 0 or idx > n_layers:
            raise ModelError(
                f"unknown layer index {idx}: model has layers 0..{n_layers}")
    mix_weights = None
    if args.mix is not None:
        if args.mix == "uniform":
            mix_weights = np.zeros(n_layers + 1)
        else:
            mix_weights = np.array([float(v) for v in args.mix.split(",")])
            if mix_weights.shape != (n_layers + 1,):
                raise ModelError(
                    f"--mix needs {n_layers + 1} weights, got {len(mix_weights)}")

    with open(args.input, encoding="utf-8") as fh:
        sentences = [line for line in fh.read().split("\n") if line.strip()]
    seq = encode_document(sentences, vocab)
    if not len(seq):
        raise CorpusError(f"input {args.input} contains no tokens")

    seq_len = args.seq_len or int(extras.get("seq_len", 128))
    states = LayerState.zeros(config, 1)
    all_reps = []  # per chunk: list of L+1 arrays (n, 1, d)
    keep = []
    for start in range(0, len(seq), seq_len):
        ids = seq.ids[start:start + seq_len][None, :]
        _, reps, states = forward(None, ids, states, params, config)
        all_reps.append([r.data for r in reps])
        keep.append(~seq.special[start:start + seq_len])
    layers_stack = [np.concatenate([chunk[l][:, 0, :] for chunk in all_reps])
                    for l in range(n_layers + 1)]
    keep_mask = np.concatenate(keep)
    token_ids = seq.ids[~seq.special]
    n_tokens = int(keep_mask.sum())

    out_fh = open(args.out_file, "w", encoding="utf-8") if args.out_file else sys.stdout
    try:
        out_fh.write(f"{n_tokens} {n_layers} {config.width}\n")
        if mix_weights is not None:
            mixed = scalar_mix([l[keep_mask] for l in layers_stack],
                               mix_weights, args.gamma)
            for i in range(n_tokens):
                values = " ".join(f"{v:.9g}" for v in mixed[i])
                out_fh.write(f"{token_ids[i]} mix {values}\n")
        else:
            wanted = (range(n_layers + 1) if args.layers == "all"
                      else [int(args.layers)])
            for i in range(n_tokens):
                for l in wanted:
                    row = layers_stack[l][keep_mask][i]
                    values = " ".join(f"{v:.9g}" for v in row)
                    out_fh.write(f"{token_ids[i]} {l} {values}\n")
    finally:
        if args.out_file:
            out_fh.close()
    _write_manifest(args.out, {
        "command": "extract", "config": _resolved(args), "seed": 0,
        "corpus": args.input, "vocab": args.vocab, "build_id": build_id(),
        "started": started, "ended": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "metrics": {"tokens": n_tokens}})
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _gradcheck_suite(seed=0):
    """Named finite-difference checks over primitives, both cell variants,
    a full bidirectional layer, and a tiny end-to-end model."""
    from .model import CellParams, init_params as _init
    rng = np.random.default_rng(seed)

    def t(shape, scale=1.0, name=None):
        return Tensor(rng.uniform(-scale, scale, size=shape), trainable=True,
                      name=name)

    checks = []

    a, b = t((5, 7), name="a"), t((7, 3), name="b")
    checks.append(("matmul", 1e-4,
                   lambda tape: sum_all(tape, matmul(tape, a, b)), [a, b]))

    xs = t((4, 6), 2.0, name="x")
    checks.append(("sigmoid", 1e-4,
                   lambda tape: sum_all(tape, sigmoid(tape, xs)), [xs]))
    xt = t((4, 6), 2.0, name="x")
    checks.append(("tanh", 1e-4,
                   lambda tape: sum_all(tape, tanh(tape, xt)), [xt]))
    xc = t((4, 6), 5.0, name="x")
    checks.append(("clip", 1e-4,
                   lambda tape: sum_all(tape, nk.clip(tape, xc, 3.0)), [xc]))

    xl, gl, bl = t((3, 8), name="x"), t((8,), name="gamma"), t((8,), name="beta")
    checks.append(("layer_norm", 1e-4,
                   lambda tape: sum_all(tape, layer_norm(tape, xl, gl, bl)),
                   [xl, gl, bl]))

    lx = t((4, 11), 2.0, name="logits")
    lt = rng.integers(0, 11, size=4)
    checks.append(("softmax_xent", 1e-4,
                   lambda tape: softmax_xent(tape, lx, lt)[0], [lx]))

    cx, cw = t((3, 6), name="x"), t((6, 5), name="w")
    cg, cb2 = t((5,), name="gamma"), t((5,), name="beta")
    def composite(tape):
        y = layer_norm(tape, tanh(tape, matmul(tape, cx, cw)), cg, cb2)
        return sum_all(tape, y)
    checks.append(("composite", 1e-4, composite, [cx, cw, cg, cb2]))

    d, h, p, bsz = 8, 16, 4, 3
    cell = CellParams(
        w=t((d, 4 * h), 0.4, "w"), r=t((p, 4 * h), 0.4, "r"),
        b=t((4 * h,), 0.4, "b"), proj=t((h, p), 0.4, "proj"),
        ln_g=t((p,), name="ln_g"), ln_b=t((p,), name="ln_b"))
    sx = Tensor(rng.uniform(-1, 1, (bsz, d)))
    sh = Tensor(rng.uniform(-1, 1, (bsz, p)))
    sc = Tensor(rng.uniform(-2, 2, (bsz, h)))
    cell_leaves = [cell.w, cell.r, cell.b, cell.proj]
    for name, step_fn in (("lstmp_step_a", lstmp_step_a),
                          ("lstmp_step_b", lstmp_step_b)):
        def run_step(tape, step_fn=step_fn):
            hh, _ = step_fn(tape, sx, sh, sc, cell)
            return sum_all(tape, hh)
        checks.append((name, 1e-4, run_step, cell_leaves))

    cfg = ModelConfig(layers=2, width=8, state_size=16, proj_size=4,
                      vocab_size=50, dtype="float64")
    mp = _init(cfg, seed)
    mp.out_w.data = rng.uniform(-0.3, 0.3, mp.out_w.data.shape)
    mp.out_b.data = rng.uniform(-0.1, 0.1, mp.out_b.data.shape)
    ids = rng.integers(0, 50, size=(3, 6))
    mstates = LayerState.zeros(cfg, 3)
    layer0 = mp.layers[0]
    lx3 = Tensor(rng.uniform(-1, 1, (6, 3, 8)), trainable=True, name="x")
    def run_layer(tape):
        y, _ = bilstm_layer(tape, lx3, layer0, mstates.layer(0), cfg)
        return sum_all(tape, y)
    layer_leaves = [lx3] + [tn for _, tn in layer0.fwd.named("fwd")] \
        + [tn for _, tn in layer0.bwd.named("bwd")]
    checks.append(("bilstm_layer", 1e-4, run_layer, layer_leaves))

    rows = np.array([0, 1, 2, 2])
    cols = np.array([1, 2, 0, 5])
    targets = rng.integers(0, 50, size=4)
    def run_model(tape):
        logits, _, _ = forward(tape, ids, mstates, mp, cfg, rows, cols)
        loss, _ = softmax_xent(tape, logits, targets)
        return loss
    checks.append(("model", 1e-3, run_model, mp.tensors()))
    return checks


def cmd_gradcheck(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    t0 = time.perf_counter()
    checks = _gradcheck_suite(seed=args.seed)
    names = [c[0] for c in checks]
    if args.op is not None:
        if args.op not in names:
            raise ModelError(
                f"unknown op {args.op!r}; choose from {', '.join(names)}")
        checks = [c for c in checks if c[0] == args.op]
    failures = 0
    results = {}
    for name, tol, fn, leaves in checks:
        report = grad_check(fn, leaves, step=1e-5, tol=tol,
                            max_coords=args.max_coords,
                            rng=np.random.default_rng(args.seed))
        verdict = "PASS" if report.passed else "FAIL"
        if not report.passed:
            failures += 1
        results[name] = report.worst
        print(f"gradcheck {name:<14} max_rel_err={report.worst:.3e} "
              f"tol={tol:.0e} {verdict}")
    elapsed = time.perf_counter() - t0
    print(f"gradcheck: {len(checks) - failures}/{len(checks)} passed "
          f"in {elapsed:.1f}s")
    _write_manifest(args.out, {
        "command": "gradcheck", "config": _resolved(args), "seed": args.seed,
        "corpus": None, "vocab": None, "build_id": build_id(),
        "started": started, "ended": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "metrics": {"failures": failures, "worst": results,
                    "elapsed_sec": round(elapsed, 3)}})
    return EXIT_OK if failures == 0 else EXIT_INTERNAL


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    if arr.size <= 1:
        return float(arr.mean()), 0.0
    return float(arr.mean()), float(arr.std(ddof=1))


def cmd_ablate(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    t0 = time.perf_counter()
    _require_file(args.vocab, "vocab")
    _require_file(args.corpus, "corpus")
    vocab = load_vocab(args.vocab)
    args.vocab_size = vocab.size
    config = _model_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise UsageError("--seeds needs at least one seed")

    raw = read_documents(args.corpus)
    if args.dev_corpus and args.test_corpus:
        train_raw = raw
        dev_raw = read_documents(_require_file(args.dev_corpus, "dev corpus"))
        test_raw = read_documents(_require_file(args.test_corpus, "test corpus"))
    else:
        # fixed data split, independent of the run seeds
        train_raw, rest = _split_documents(raw, 0.10, args.data_seed)
        half = max(1, len(rest) // 2)
        dev_raw, test_raw = rest[:half], rest[half:] or rest[:half]
    train_ds = _encode_docs(train_raw, vocab)
    dev_ds = _encode_docs(dev_raw, vocab)
    test_ds = _encode_docs(test_raw, vocab)

    if args.grid == "seqlen":
        cells = [("seq20_batch128", 20, 128, args.btbptt),
                 ("seq20_batch20", 20, 20, args.btbptt),
                 ("seq128_batch20", 128, 20, args.btbptt)]
    elif args.grid == "btbptt":
        cells = [("btbptt_off", args.seq_len, args.batch, False),
                 ("btbptt_on", args.seq_len, args.batch, True)]
    else:
        raise UsageError(f"unknown grid {args.grid!r}")

    os.makedirs(args.out, exist_ok=True)
    results_path = os.path.join(args.out, "ablation.jsonl")
    summary = []
    for cell_name, seq_len, batch, btbptt in cells:
        dev_segs = segment_stream(dev_ds, seq_len, vocab)
        test_segs = segment_stream(test_ds, seq_len, vocab)
        cap = args.train_eval_cap
        rows = []
        for seed in seeds:
            # per-seed document order, matching what pretrain does
            train_segs = segment_stream(shuffle_documents(train_ds, seed),
                                        seq_len, vocab)
            train_eval_segs = train_segs[:cap] if cap else train_segs
            run_cfg = TrainRunConfig(
                epochs=args.epochs, mask_accum=args.mask_accum,
                mask_rate=args.mask_rate, batch_size=batch, seq_len=seq_len,
                btbptt=btbptt, seed=seed, eval_every=args.epochs,
                eval_seed=args.eval_seed, lr=args.lr, decay=args.decay,
                grad_clip=None if args.no_grad_clip else args.grad_clip)
            params, _, history = _fit(train_segs, [], vocab, config, run_cfg)
            evals = {}
            for split, segs in (("train", train_eval_segs), ("dev", dev_segs),
                                ("test", test_segs)):
                ppl, n = eval_perplexity(segs, params, config, vocab,
                                         args.mask_rate, args.eval_seed,
                                         batch_size=args.eval_batch)
                evals[split] = ppl
            record = {"cell": cell_name, "seed": seed, "seq_len": seq_len,
                      "batch": batch, "btbptt": btbptt,
                      "words_per_minibatch": seq_len * batch,
                      "train_ppl": evals["train"], "dev_ppl": evals["dev"],
                      "test_ppl": evals["test"],
                      "final_train_loss": history[-1]["train_loss"]}
            rows.append(record)
            _append_jsonl(results_path, record)
            print(f"{cell_name} seed={seed}: train {evals['train']:.3f}  "
                  f"dev {evals['dev']:.3f}  test {evals['test']:.3f}")
        cell_summary = {"cell": cell_name, "seq_len": seq_len, "batch": batch,
                        "btbptt": btbptt, "seeds": seeds}
        for split in ("train", "dev", "test"):
            mean, std = _mean_std([r[f"{split}_ppl"] for r in rows])
            cell_summary[f"{split}_ppl_mean"] = mean
            cell_summary[f"{split}_ppl_std"] = std
        summary.append(cell_summary)
        _append_jsonl(results_path, {"summary": cell_summary})

    print(f"\n{'cell':<18}{'seq':>5}{'batch':>7}  "
          f"{'train ppl':>16}  {'dev ppl':>16}  {'test ppl':>16}")
    for s in summary:
        print(f"{s['cell']:<18}{s['seq_len']:>5}{s['batch']:>7}  "
              + "  ".join(f"{s[f'{sp}_ppl_mean']:>8.2f} ± {s[f'{sp}_ppl_std']:<5.2f}"
                          for sp in ("train", "dev", "test")))
    _write_manifest(args.out, {
        "command": "ablate", "config": _resolved(args), "seed": seeds[0],
        "corpus": args.corpus, "vocab": args.vocab, "build_id": build_id(),
        "started": started, "ended": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "elapsed_sec": round(time.perf_counter() - t0, 3),
        "metrics": {"cells": summary}})
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench-cell
# ---------------------------------------------------------------------------

def cmd_bench_cell(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    args.vocab_size = 1000  # embedding size is irrelevant to the cell bench
    config = _model_config(args)
    reports = {}
    for variant in (VARIANT_A, VARIANT_B):
        rep = bench_cell(variant, args.steps, config, batch_size=args.batch,
                         seq_len=args.seq_len, repeats=args.repeats,
                         seed=args.seed)
        reports[variant] = rep
        rates = ", ".join(f"{r:.0f}" for r in rep.tokens_per_sec)
        print(f"variant {variant:<15} kernel={rep.kernel:<9} "
              f"median {rep.median:>12.0f} tok/s  (runs: {rates})")
    ratio = reports[VARIANT_B].median / reports[VARIANT_A].median
    print(f"throughput ratio restructured/legacy: {ratio:.2f}x "
          f"(kernel-eligibility effect; magnitude is backend-specific)")
    _write_manifest(args.out, {
        "command": "bench-cell", "config": _resolved(args), "seed": args.seed,
        "corpus": None, "vocab": None, "build_id": build_id(),
        "started": started, "ended": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "metrics": {v: {"median": r.median, "runs": r.tokens_per_sec,
                        "kernel": r.kernel} for v, r in reports.items()}})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_model_flags(p):
    p.add_argument("--layers", type=int, default=2, help="biLSTM layer count L")
    p.add_argument("--width", type=int, default=128, help="embedding/layer width d")
    p.add_argument("--state-size", type=int, default=512,
                   help="LSTM internal state H per direction")
    p.add_argument("--proj-size", type=int, default=64,
                   help="projection P per direction (d = 2P)")
    p.add_argument("--cell-clip", type=float, default=3.0)
    p.add_argument("--proj-clip", type=float, default=3.0)
    p.add_argument("--cell-variant", choices=[VARIANT_A, VARIANT_B],
                   default=VARIANT_B)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")


def _add_train_flags(p):
    p.add_argument("--seq-len", type=int, default=128, help="segment length N")
    p.add_argument("--batch", type=int, default=20, help="batch rows B")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--mask-accum", type=int, default=4,
                   help="mask accumulations k per step")
    p.add_argument("--mask-rate", type=float, default=0.15)
    p.add_argument("--btbptt", action="store_true",
                   help="run half the rows in reverse segment order")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--decay", type=float, default=0.95,
                   help="per-epoch learning-rate decay")
    p.add_argument("--grad-clip", type=float, default=10.0)
    p.add_argument("--no-grad-clip", action="store_true")
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--eval-seed", type=int, default=9999)
    p.add_argument("--eval-batch", type=int, default=20)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="melmo",
        description="Masked bidirectional LSTM language-model pretraining")
    parser.add_argument("--version", action="version",
                        version=f"melmo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", default="melmo_runs")
    p.add_argument("--dev-corpus", default=None)
    p.add_argument("--dev-frac", type=float, default=0.05,
                   help="holdout fraction when no --dev-corpus is given")
    _add_train_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="masked perplexity of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", default="melmo_runs")
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--mask-rate", type=float, default=None)
    p.add_argument("--eval-seed", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract", help="write per-token layer embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True, help="text file, one sentence per line")
    p.add_argument("--out", default="melmo_runs")
    p.add_argument("--out-file", default=None, help="write here instead of stdout")
    p.add_argument("--layers", default="all",
                   help="'all' or a single layer index 0..L")
    p.add_argument("--mix", default=None,
                   help="'uniform' or L+1 comma-separated mix weights")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--seq-len", type=int, default=None)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--op", default=None, help="run a single named check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-coords", type=int, default=40,
                   help="coordinates probed per tensor")
    p.add_argument("--out", default="melmo_runs")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="sequence-length / btbptt grids")
    p.add_argument("--grid", choices=["seqlen", "btbptt"], required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--dev-corpus", default=None)
    p.add_argument("--test-corpus", default=None)
    p.add_argument("--out", default="melmo_runs")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--data-seed", type=int, default=0,
                   help="document split seed, shared by every cell")
    p.add_argument("--train-eval-cap", type=int, default=200,
                   help="max train segments scored for the train column")
    _add_train_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench-cell", help="cell variant throughput")
    p.add_argument("--steps", type=int, default=20000,
                   help="time steps per repetition (>= 1000)")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="melmo_runs")
    _add_model_flags(p)
    p.set_defaults(func=cmd_bench_cell)

    return parser


def main(argv=None):
    _apply_thread_limit()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainerError as exc:
        print(f"internal error (trainer): {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (NumericError, TapeError) as exc:
        print(f"internal error (numkernel): {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - last-resort diagnostics
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
