"""Synthetic classification and regression tasks over token sequences."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from ..adapters import CLASSIFICATION, REGRESSION

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SyntheticTask:
    task_id: str
    kind: str
    seed: int
    out_dim: int
    splits: Mapping[str, tuple[np.ndarray, np.ndarray]] = field(repr=False)

    @property
    def num_classes(self) -> int | None:
        return self.out_dim if self.kind == CLASSIFICATION else None

    def to_csv(self, split: str) -> str:
        tokens, targets = self.splits[split]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        t = tokens.shape[1]
        if self.kind == CLASSIFICATION:
            writer.writerow([f"tok{i}" for i in range(t)] + ["label"])
            for row, y in zip(tokens, targets):
                writer.writerow([int(v) for v in row] + [int(y)])
        else:
            writer.writerow([f"tok{i}" for i in range(t)] + [f"y{j}" for j in range(targets.shape[1])])
            for row, y in zip(tokens, targets):
                writer.writerow([int(v) for v in row] + [repr(float(v)) for v in y])
        return buf.getvalue()


def _unique_sequences(rng: np.random.Generator, probs: np.ndarray, n: int, seq_len: int) -> np.ndarray:
    vocab = probs.shape[0]
    seen: set[bytes] = set()
    rows = []
    while len(rows) < n:
        batch = rng.choice(vocab, size=(2 * (n - len(rows)) + 16, seq_len), p=probs)
        for row in batch:
            key = row.astype(np.int8).tobytes()
            if key in seen:
                continue
            seen.add(key)
            rows.append(row)
            if len(rows) == n:
                break
    return np.array(rows, dtype=np.int64)


def _teacher(rng: np.random.Generator, vocab: int, seq_len: int, out_dim: int, hidden: int = 16):
    emb = rng.normal(0.0, 1.0, (vocab, hidden))
    pos = rng.normal(0.0, 1.0, (seq_len, hidden))
    w_hidden = rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, hidden))
    w_out = rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, out_dim))
    w_lin = rng.normal(0.0, 0.5 / math.sqrt(hidden), (hidden, out_dim))

    def fn(tokens: np.ndarray) -> np.ndarray:
        s = np.sum(emb[tokens] * pos[None], axis=1) / math.sqrt(seq_len)
        return np.tanh(s @ w_hidden) @ w_out + s @ w_lin

    return fn


def make_task(
    task_id: str,
    kind: str,
    seed: int,
    *,
    vocab: int = 16,
    seq_len: int = 8,
    sizes: tuple[int, int, int] = (2048, 512, 512),
    num_classes: int = 4,
    out_dim: int = 2,
) -> SyntheticTask:
    """Build one task from a random teacher network.

    Each task draws tokens from its own skewed unigram distribution. Class
    labels are the argmax of mean-centred teacher logits; regression targets
    are teacher outputs standardized per dimension.
    """
    if kind not in (CLASSIFICATION, REGRESSION):
        raise ValueError(f"unknown task kind {kind!r}")
    rng = np.random.default_rng([seed, 0x7A5C])
    probs = rng.dirichlet(np.full(vocab, 2.0))
    probs = 0.5 * probs + 0.5 / vocab
    dim = num_classes if kind == CLASSIFICATION else out_dim
    teacher = _teacher(rng, vocab, seq_len, dim)
    tokens = _unique_sequences(rng, probs, sum(sizes), seq_len)
    raw = teacher(tokens)
    if kind == CLASSIFICATION:
        targets = np.argmax(raw - raw.mean(axis=0), axis=1).astype(np.int64)
    else:
        targets = (raw - raw.mean(axis=0)) / raw.std(axis=0)
    bounds = np.cumsum((0,) + tuple(sizes))
    splits = {
        name: (tokens[bounds[i] : bounds[i + 1]], targets[bounds[i] : bounds[i + 1]])
        for i, name in enumerate(SPLITS)
    }
    for arr_pair in splits.values():
        for arr in arr_pair:
            arr.flags.writeable = False
    return SyntheticTask(task_id, kind, seed, dim, splits)


def gen_tasks(n_classification: int, n_regression: int, seed: int, **kwargs) -> list[SyntheticTask]:
    """Generate ``n_classification`` then ``n_regression`` tasks with distinct seeds."""
    if n_classification < 0 or n_regression < 0 or n_classification + n_regression < 1:
        raise ValueError("need at least one task")
    tasks = []
    for i in range(n_classification):
        tasks.append(make_task(f"cls{i}", CLASSIFICATION, seed * 1000 + i, **kwargs))
    for i in range(n_regression):
        tasks.append(make_task(f"reg{i}", REGRESSION, seed * 1000 + 500 + i, **kwargs))
    return tasks


def write_tasks(tasks, out_dir) -> Path:
    """Write ``tasks.csv`` plus one CSV per task and split under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["task_id,kind,seed,out_dim"]
    for t in tasks:
        lines.append(f"{t.task_id},{t.kind},{t.seed},{t.out_dim}")
        (out / t.task_id).mkdir(exist_ok=True)
        for split in SPLITS:
            (out / t.task_id / f"{split}.csv").write_text(t.to_csv(split), encoding="utf-8")
    (out / "tasks.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def _read_split(path: Path, kind: str) -> tuple[np.ndarray, np.ndarray]:
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    n_tok = sum(1 for h in header if h.startswith("tok"))
    tokens = np.array([[int(v) for v in r[:n_tok]] for r in rows], dtype=np.int64).reshape(len(rows), n_tok)
    if kind == CLASSIFICATION:
        targets = np.array([int(r[n_tok]) for r in rows], dtype=np.int64)
    else:
        targets = np.array([[float(v) for v in r[n_tok:]] for r in rows], dtype=np.float64)
    return tokens, targets


def load_tasks(root, task_ids=None) -> list[SyntheticTask]:
    """Read tasks written by :func:`write_tasks`, optionally only ``task_ids``."""
    root = Path(root)
    with (root / "tasks.csv").open(newline="", encoding="utf-8") as fh:
        entries = list(csv.DictReader(fh))
    known = [e["task_id"] for e in entries]
    if task_ids is not None:
        missing = [t for t in task_ids if t not in known]
        if missing:
            raise KeyError(f"tasks {missing} not found in {root}; available: {known}")
        entries = [e for e in entries if e["task_id"] in task_ids]
    tasks = []
    for e in entries:
        splits = {s: _read_split(root / e["task_id"] / f"{s}.csv", e["kind"]) for s in SPLITS}
        tasks.append(SyntheticTask(e["task_id"], e["kind"], int(e["seed"]), int(e["out_dim"]), splits))
    return tasks
