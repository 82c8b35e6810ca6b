"""Synthetic frequency-sorting task with a drifting token distribution.

Each instance draws two categorical distributions over the vocabulary and
samples a long sequence while the mixture weight slides from the first to
the second.  The target lists the distinct tokens of the sequence in
decreasing frequency order (ties broken by ascending id), after a separator
token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VOCAB = 20
SEP_TOKEN = VOCAB          # id 20; model vocab is VOCAB + 1
DIRICHLET_ALPHA = 1.0


class TaskError(Exception):
    pass


@dataclass(frozen=True)
class SortingInstance:
    inputs: np.ndarray     # (S,) token ids in [0, VOCAB)
    target: np.ndarray     # distinct tokens, most frequent first
    p0: np.ndarray
    p1: np.ndarray
    seed: int

    def tokens(self) -> np.ndarray:
        """Full model sequence: inputs, separator, target."""
        return np.concatenate([self.inputs, [SEP_TOKEN], self.target])

    def loss_mask(self) -> np.ndarray:
        """Position-wise weights: 1 where the next token is a target token."""
        total = len(self.inputs) + 1 + len(self.target)
        mask = np.zeros(total)
        mask[len(self.inputs):total - 1] = 1.0
        return mask


def sort_by_frequency(tokens: np.ndarray) -> np.ndarray:
    """Distinct tokens in decreasing frequency, ties by ascending id."""
    counts = np.bincount(tokens, minlength=VOCAB)
    present = np.flatnonzero(counts)
    order = sorted(present, key=lambda t: (-counts[t], t))
    return np.asarray(order, dtype=np.int64)


def gen_instance(length: int, rng: np.random.Generator, seed: int = 0,
                 vocab: int = VOCAB) -> SortingInstance:
    if length < 1:
        raise TaskError("sequence length must be >= 1")
    p0 = rng.dirichlet(np.full(vocab, DIRICHLET_ALPHA))
    p1 = rng.dirichlet(np.full(vocab, DIRICHLET_ALPHA))
    # mixture weight on p0 goes 0 -> 1 linearly along the sequence... the
    # drift direction is arbitrary; we fade from p0 toward p1.
    alphas = np.linspace(0.0, 1.0, length) if length > 1 else np.array([0.0])
    probs = (1.0 - alphas)[:, None] * p0[None, :] + alphas[:, None] * p1[None, :]
    u = rng.random(length)
    cum = np.cumsum(probs, axis=1)
    inputs = (u[:, None] < cum).argmax(axis=1).astype(np.int64)
    return SortingInstance(inputs=inputs, target=sort_by_frequency(inputs),
                           p0=p0, p1=p1, seed=seed)


def sorting_accuracy(predicted, target) -> float:
    """Position-wise exact-match rate over the target length."""
    predicted = np.asarray(predicted)
    target = np.asarray(target)
    if len(target) == 0:
        return 1.0
    n = len(target)
    padded = np.full(n, -1, dtype=np.int64)
    k = min(n, len(predicted))
    padded[:k] = predicted[:k]
    return float((padded == target).mean())


def write_dataset(path, instances) -> None:
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8") as f:
            for inst in instances:
                left = " ".join(str(t) for t in inst.inputs)
                right = " ".join(str(t) for t in inst.target)
                f.write(f"{left} <sep> {right}\n")
    except OSError as e:
        raise TaskError(f"cannot write dataset {path}: {e}") from e


def read_dataset(path) -> list:
    path = Path(path)
    out = []
    try:
        with path.open("r", encoding="utf-8") as f:
            for ln, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                if " <sep> " not in line:
                    raise TaskError(f"{path}:{ln}: missing <sep>")
                left, right = line.split(" <sep> ", 1)
                inputs = np.array([int(t) for t in left.split()], dtype=np.int64)
                target = np.array([int(t) for t in right.split()], dtype=np.int64)
                out.append((inputs, target))
    except OSError as e:
        raise TaskError(f"cannot read dataset {path}: {e}") from e
    return out


def gen_dataset(out_dir, counts: dict, length: int, master_seed: int) -> dict:
    """Write train/val/test files plus a sidecar metadata json.

    counts: split name -> instance count.  Instance seeds come from a
    splittable seed sequence so regeneration is byte-identical and
    per-instance independent.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"master_seed": master_seed, "length": length,
            "dirichlet_alpha": DIRICHLET_ALPHA, "vocab": VOCAB, "splits": {}}
    root = np.random.SeedSequence(master_seed)
    split_seqs = root.spawn(len(counts))
    paths = {}
    for (split, count), seq in zip(sorted(counts.items()), split_seqs):
        children = seq.spawn(count)
        instances = [gen_instance(length, np.random.Generator(np.random.PCG64(c)), seed=i)
                     for i, c in enumerate(children)]
        path = out_dir / f"{split}.txt"
        write_dataset(path, instances)
        meta["splits"][split] = count
        paths[split] = path
    meta_path = out_dir / "metadata.json"
    meta_path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    paths["metadata"] = meta_path
    return paths
