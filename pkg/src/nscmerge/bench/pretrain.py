"""Supervised pretraining of the toy backbone on auxiliary teacher tasks.

The merged-model experiments assume a backbone whose features are already
generic, as with a pretrained vision or language model. Here that backbone is
obtained by training every base weight on a stream of auxiliary
classification teachers. Their task seeds live in a separate range, so they
never coincide with benchmark tasks.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from ..autograd import Tensor
from ..optim import AdamW
from ..toynet import BaseModel, ToyModelConfig, apply_head, init_base_model, run_graph, task_loss
from .tasks import make_task

logger = logging.getLogger(__name__)

AUX_SEED_BASE = 10_000_000


def aux_tasks(config: ToyModelConfig, seed: int, count: int, size: int = 4096):
    # sequences are sampled without replacement, so stay well inside vocab^seq_len
    size = min(size, config.vocab**config.seq_len // 4)
    return [
        make_task(
            f"aux{i}",
            "classification",
            AUX_SEED_BASE + 100 * seed + i,
            vocab=config.vocab,
            seq_len=config.seq_len,
            sizes=(size - 2, 1, 1),
        )
        for i in range(count)
    ]


def pretrain_base_model(
    config: ToyModelConfig,
    seed: int,
    steps: int = 2000,
    n_tasks: int = 8,
    *,
    lr: float = 1e-3,
    batch_size: int = 32,
) -> BaseModel:
    """Random init followed by ``steps`` round-robin minibatch updates over aux tasks.

    ``steps = 0`` returns the random initialization unchanged.
    """
    base = init_base_model(config, seed)
    if steps <= 0:
        return base
    if n_tasks < 1:
        raise ValueError("pretraining needs at least one auxiliary task")
    rng = np.random.default_rng([seed, 0x9E7])
    tasks = aux_tasks(config, seed, n_tasks)
    weights = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.weights.items()}
    heads = []
    for t in tasks:
        w = rng.normal(0.0, 1.0 / math.sqrt(config.model_dim), (t.out_dim, config.model_dim))
        heads.append((Tensor(w, requires_grad=True), Tensor(np.zeros(t.out_dim), requires_grad=True)))
    params = list(weights.values()) + [p for h in heads for p in h]
    opt = AdamW(params, lr=lr)
    for step in range(steps):
        k = step % n_tasks
        x, y = tasks[k].splits["train"]
        idx = rng.integers(0, len(x), batch_size)
        out = run_graph(base, x[idx], {}, dense=weights)
        loss = task_loss(apply_head(out.features, heads[k]), y[idx], "classification")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if not math.isfinite(float(loss.data)):
            raise FloatingPointError(f"pretraining diverged at step {step + 1}")
        if (step + 1) % 500 == 0:
            logger.info("pretrain step %d loss %.4f", step + 1, float(loss.data))
    return BaseModel(config, {k: v.data for k, v in weights.items()})
