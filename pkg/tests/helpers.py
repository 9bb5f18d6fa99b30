"""Small fixtures shared by several test modules."""

from __future__ import annotations

import numpy as np

from nscmerge.adapters import CLASSIFICATION, REGRESSION, AdapterSet, LoraAdapter, TaskHead
from nscmerge.toynet import ToyModelConfig, init_base_model

# verdict lines from test_acceptance, printed in the terminal summary
ACCEPTANCE: list[str] = []

SMALL = ToyModelConfig(blocks=4, model_dim=16, heads=2, mlp_dim=32, seq_len=4, vocab=8, lora_rank=2)


def random_sets(config, n_tasks, seed=0, kinds=None, b_scale=0.3):
    """Adapter sets with non-zero B so that coefficients matter."""
    g = np.random.default_rng(seed)
    kinds = kinds or [CLASSIFICATION] * n_tasks
    sets = []
    for k in range(n_tasks):
        adapters = {}
        for layer in config.layer_ids:
            d = config.model_dim
            adapters[layer] = LoraAdapter(
                layer, g.normal(0, b_scale, (d, config.lora_rank)), g.normal(0, 1 / np.sqrt(d), (config.lora_rank, d))
            )
        out = 3 if kinds[k] == CLASSIFICATION else 2
        head = TaskHead(kinds[k], g.normal(0, 1, (out, config.model_dim)), g.normal(0, 0.1, out))
        sets.append(AdapterSet(f"t{k}", adapters, head))
    return sets


def small_model(seed=0, config=SMALL):
    return init_base_model(config, seed)


def tokens(config, n, seed=0):
    return np.random.default_rng(seed).integers(0, config.vocab, (n, config.seq_len))


__all__ = ["ACCEPTANCE", "SMALL", "random_sets", "small_model", "tokens", "REGRESSION", "CLASSIFICATION"]
