"""Command-line entry point: data generation, training, evaluation, sweeps,
memory benchmarks, and memory inspection dumps."""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import tasks
from .autodiff import Tensor
from .basis import fit_signal, make_basis, operator_for_positions, sequence_positions
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .config import RunConfig, parse_config, write_config
from .memory import empty_memory, evaluate, ltm_attend, state_num_bytes, sticky_locations, update
from .metrics import BENCH_COLUMNS, EVAL_COLUMNS, TRAIN_COLUMNS, CsvWriter
from .model import Adam, Model, sequence_eval, train_step


class CliError(Exception):
    pass


class RunLock:
    """Exclusive ownership of an output directory via a lock file."""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / ".lock"
        self.fd = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"output directory is locked by another run: {self.path}")
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    counts = {"train": args.train, "val": args.val, "test": args.test}
    counts = {k: v for k, v in counts.items() if v > 0}
    if not counts:
        raise CliError("nothing to generate: all split counts are zero")
    paths = tasks.gen_dataset(args.out, counts, args.length, args.seed)
    for split, p in sorted(paths.items()):
        print(f"{split}: {p}")
    return 0


def _batches(data, batch_size, rng):
    idx = rng.integers(0, len(data), size=batch_size)
    batch = []
    for i in idx:
        inputs, target = data[i]
        inst = tasks.SortingInstance(inputs=inputs, target=target,
                                     p0=None, p1=None, seed=0)
        batch.append((inst.tokens(), inst.loss_mask()))
    return batch


def run_training(cfg: RunConfig, resume: str = None):
    out_dir = Path(cfg.out_dir)
    data = tasks.read_dataset(Path(cfg.data_dir) / "train.txt")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    model = Model(cfg.model_config(), rng)
    opt = Adam(model.params)
    start_step = 0
    if resume:
        ckpt = load_checkpoint(resume)
        model = restore_model(ckpt)
        opt = Adam(model.params)
        if ckpt["adam"] is None:
            raise CliError(f"{resume}: checkpoint has no training state to resume from")
        opt.step_count = ckpt["adam"]["step_count"]
        opt.m = {k: v.copy() for k, v in ckpt["adam"]["m"].items()}
        opt.v = {k: v.copy() for k, v in ckpt["adam"]["v"].items()}
        start_step = ckpt["trained_steps"]
        if ckpt["rng_state"]:
            rng.bit_generator.state = ckpt["rng_state"]
    with RunLock(out_dir), CsvWriter(out_dir / "train.csv", TRAIN_COLUMNS) as writer:
        for step in range(start_step + 1, cfg.steps + 1):
            batch = _batches(data, cfg.batch_size, rng)
            t0 = time.perf_counter()
            metrics = train_step(model, opt, batch, step, cfg.steps,
                                 cfg.learning_rate, rng=rng)
            dt = time.perf_counter() - t0
            if step % cfg.emit_interval == 0 or step == cfg.steps:
                writer.emit({"step": step, "nll": metrics["nll"], "kl": metrics["kl"],
                             "total": metrics["total"], "lr": metrics["lr"],
                             "tokens_per_s": metrics["tokens"] / max(dt, 1e-9)})
            if cfg.save_interval and step % cfg.save_interval == 0:
                save_checkpoint(out_dir / f"ckpt_{step}.bin", model, opt=opt,
                                trained_steps=step, rng_state=rng.bit_generator.state)
        save_checkpoint(out_dir / "ckpt.bin", model, opt=opt, trained_steps=cfg.steps,
                        rng_state=rng.bit_generator.state)
    return model


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.steps is not None:
        cfg.steps = args.steps
    run_training(cfg, resume=args.resume)
    print(f"trained {cfg.steps} steps -> {cfg.out_dir}")
    return 0


def evaluate_model(model: Model, data, limit: int = 0, rng=None):
    """Teacher-forced position-wise accuracy and target NLL over instances."""
    if limit:
        data = data[:limit]
    accs, nlls = [], []
    for inputs, target in data:
        inst = tasks.SortingInstance(inputs=inputs, target=target,
                                     p0=None, p1=None, seed=0)
        pred, n, c = sequence_eval(model, inst.tokens(), inst.loss_mask(),
                                   rng=rng)
        accs.append(tasks.sorting_accuracy(pred, target))
        nlls.append(n / max(c, 1))
    return float(np.mean(accs)), float(np.mean(nlls))


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = restore_model(ckpt)
    data = tasks.read_dataset(Path(args.data) / f"{args.split}.txt")
    rng = np.random.Generator(np.random.PCG64(args.seed))
    acc, nll = evaluate_model(model, data, limit=args.limit, rng=rng)
    out_dir = Path(args.out)
    with CsvWriter(out_dir / "eval.csv", EVAL_COLUMNS) as writer:
        writer.emit({"split": args.split, "accuracy": acc, "nll": nll})
    print(f"{args.split}: accuracy={acc:.4f} nll={nll:.4f}")
    return 0


def basis_mse(n: int, length: int, width: int, seeds, lam: float = 0.5,
              widths=(0.01, 0.05)) -> float:
    """Reconstruction MSE of random smooth-ish sequences at the fit points."""
    spec = make_basis(n, widths)
    positions = sequence_positions(length)
    op = operator_for_positions(spec, positions, lam)
    f = op.f
    errs = []
    for seed in seeds:
        rng = np.random.Generator(np.random.PCG64(seed))
        x = rng.normal(size=(length, width))
        b = fit_signal(x, op)
        recon = f.T @ b
        errs.append(float(((recon - x) ** 2).mean()))
    return float(np.mean(errs))


def cmd_sweep_basis(args) -> int:
    lengths = [int(s) for s in args.lengths.split(",") if s]
    basis_counts = [int(s) for s in args.basis.split(",") if s]
    out_dir = Path(args.out)
    seeds = list(range(args.seeds))
    with CsvWriter(out_dir / "sweep.csv", ["length", "n_basis", "mse", "accuracy"]) as w:
        for length in lengths:
            for n in basis_counts:
                mse = basis_mse(n, length, args.width, seeds, lam=args.lam)
                acc = float("nan")
                if args.train_steps > 0:
                    acc = _sweep_accuracy(n, length, args)
                w.emit({"length": length, "n_basis": n, "mse": mse, "accuracy": acc})
                print(f"length={length} N={n} mse={mse:.6g} accuracy={acc:.4g}")
    return 0


def _sweep_accuracy(n: int, length: int, args) -> float:
    """Train a small model with an N-function memory and report test accuracy."""
    cfg = RunConfig(basis_n=n, steps=args.train_steps, out_dir=str(Path(args.out) / f"n{n}"),
                    data_dir=args.data, seed=args.seed)
    model = _train_in_memory(cfg)
    data = tasks.read_dataset(Path(args.data) / "test.txt")
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    acc, _ = evaluate_model(model, data, limit=args.eval_limit, rng=rng)
    return acc


def _train_in_memory(cfg: RunConfig) -> Model:
    data = tasks.read_dataset(Path(cfg.data_dir) / "train.txt")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    model = Model(cfg.model_config(), rng)
    opt = Adam(model.params)
    for step in range(1, cfg.steps + 1):
        batch = _batches(data, cfg.batch_size, rng)
        train_step(model, opt, batch, step, cfg.steps, cfg.learning_rate, rng=rng)
    return model


def cmd_bench_memory(args) -> int:
    spec = make_basis(args.basis, (0.01, 0.05))
    mem = empty_memory(spec, args.width, tau=args.tau)
    rng = np.random.Generator(np.random.PCG64(args.seed))
    d = args.width // args.heads
    from .memory import LtmHeadParams, LtmParams
    params = LtmParams(
        heads=[LtmHeadParams(
            w_key=Tensor(rng.normal(0, 0.02, (d, d))),
            w_value=Tensor(rng.normal(0, 0.02, (d, d))),
            w_mu=Tensor(rng.normal(0, 0.02, (spec.n, 1))), b_mu=Tensor(np.zeros((1, 1))),
            w_sigma=Tensor(rng.normal(0, 0.02, (spec.n, 1))),
            b_sigma=Tensor(np.zeros((1, 1)))) for _ in range(args.heads)],
        w_out=Tensor(rng.normal(0, 0.02, (args.width, args.width))))
    queries = [Tensor(rng.normal(size=(args.seq, d))) for _ in range(args.heads)]
    out_dir = Path(args.out)
    with CsvWriter(out_dir / "bench.csv", BENCH_COLUMNS) as writer:
        for i in range(1, args.updates + 1):
            rows = rng.normal(size=(args.seq, args.width))
            t0 = time.perf_counter()
            mem = update(mem, rows, mode="linspace")
            t1 = time.perf_counter()
            ltm_attend(mem, queries, params)
            t2 = time.perf_counter()
            writer.emit({"update_count": mem.update_count,
                         "state_bytes": state_num_bytes(mem),
                         "update_ms": (t1 - t0) * 1e3,
                         "read_ms": (t2 - t1) * 1e3})
    print(f"bench written to {out_dir / 'bench.csv'}")
    return 0


def cmd_inspect_memory(args) -> int:
    """Build a memory from random data (or a checkpoint's stored memories) and
    dump signal samples plus a sticky-location histogram."""
    out_dir = Path(args.out)
    rng = np.random.Generator(np.random.PCG64(args.seed))
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        mems = [m for m in ckpt["memories"] if m is not None]
        if not mems:
            raise CliError(f"{args.checkpoint}: no memory states stored")
        mem = mems[args.layer]
    else:
        spec = make_basis(args.basis, (0.01, 0.05))
        mem = empty_memory(spec, args.width, tau=args.tau)
        for _ in range(args.updates):
            mem = update(mem, rng.normal(size=(args.seq, args.width)), mode="linspace")
    ts = np.linspace(0.0, 1.0, args.samples)
    values = evaluate(mem, ts)
    cols = ["t", "norm"] + [f"dim{i}" for i in range(min(4, mem.width))]
    with CsvWriter(out_dir / "signal.csv", cols) as writer:
        for t, row in zip(ts, values):
            rec = {"t": float(t), "norm": float(np.linalg.norm(row))}
            for i in range(min(4, mem.width)):
                rec[f"dim{i}"] = float(row[i])
            writer.emit(rec)
    # synthetic attention record concentrated at a few spots, for the histogram
    from .memory import AttentionRecord
    mus = rng.random((2, 16))
    sig2 = np.full((2, 16), 0.01 ** 2) + rng.random((2, 16)) * 0.01
    locs, _ = sticky_locations(AttentionRecord(mus=mus, sigma2s=sig2),
                               num_bins=args.bins, num_samples=args.samples, rng=rng)
    hist, edges = np.histogram(locs, bins=args.bins, range=(0.0, 1.0))
    with CsvWriter(out_dir / "sticky.csv", ["bin_left", "bin_right", "count"]) as writer:
        for left, right, count in zip(edges[:-1], edges[1:], hist):
            writer.emit({"bin_left": float(left), "bin_right": float(right),
                         "count": int(count)})
    print(f"inspection dumps written to {out_dir}")
    return 0


def cmd_make_config(args) -> int:
    write_config(RunConfig(), args.out)
    print(f"default config written to {args.out}")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contmem",
                                description="continuous long-term memory experiments")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate sorting-task datasets")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=2000)
    g.add_argument("--val", type=int, default=200)
    g.add_argument("--test", type=int, default=200)
    g.add_argument("--length", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--resume", default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--limit", type=int, default=0)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-basis", help="regression error (and accuracy) vs basis count")
    s.add_argument("--lengths", default="1000")
    s.add_argument("--basis", default="16,32,64,128,256")
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--lam", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.add_argument("--data", default=None, help="dataset dir (needed with --train-steps)")
    s.add_argument("--train-steps", type=int, default=0)
    s.add_argument("--eval-limit", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sweep_basis)

    b = sub.add_parser("bench-memory", help="memory update/read timing and state size")
    b.add_argument("--updates", type=int, default=100)
    b.add_argument("--basis", type=int, default=64)
    b.add_argument("--width", type=int, default=64)
    b.add_argument("--heads", type=int, default=2)
    b.add_argument("--seq", type=int, default=64)
    b.add_argument("--tau", type=float, default=0.75)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench_memory)

    i = sub.add_parser("inspect-memory", help="dump signal samples and sticky histogram")
    i.add_argument("--checkpoint", default=None)
    i.add_argument("--layer", type=int, default=0)
    i.add_argument("--basis", type=int, default=64)
    i.add_argument("--width", type=int, default=64)
    i.add_argument("--seq", type=int, default=64)
    i.add_argument("--updates", type=int, default=5)
    i.add_argument("--tau", type=float, default=0.75)
    i.add_argument("--samples", type=int, default=200)
    i.add_argument("--bins", type=int, default=50)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_inspect_memory)

    c = sub.add_parser("make-config", help="write a default config file")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_make_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    try:
        return args.func(args)
    except Exception as e:  # one-line diagnostic, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
