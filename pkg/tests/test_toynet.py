from __future__ import annotations

import numpy as np
import pytest

from helpers import SMALL, random_sets, small_model, tokens
from nscmerge import autograd as ag
from nscmerge.adapters import MergeCoefficients, merged_update
from nscmerge.bench.tasks import make_task
from nscmerge.nsc import nsc_loss, prepare_gram_caches
from nscmerge.toynet import (
    ToyModelConfig,
    forward,
    forward_dense,
    grad_wrt_coeffs,
    init_base_model,
    load_base_model,
    lora_terms,
    run_graph,
    save_base_model,
    select_layers,
    task_loss,
    task_metric,
    train_lora,
)


def _coeffs(sets, config, values):
    return MergeCoefficients(tuple(s.task_id for s in sets), config.layer_ids, values)


def test_layer_ids_and_selection():
    cfg = ToyModelConfig()
    assert len(cfg.layer_ids) == 16 and cfg.layer_ids[:4] == ("b0.q", "b0.k", "b0.v", "b0.o")
    assert select_layers(cfg) == ("b3.o",)
    assert select_layers(cfg, "all") == ("b0.o", "b1.o", "b2.o", "b3.o")
    assert select_layers(cfg, "last-half", "qv") == ("b2.q", "b2.v", "b3.q", "b3.v")
    assert select_layers(cfg, "last-3", "o") == ("b1.o", "b2.o", "b3.o")
    assert select_layers(ToyModelConfig(blocks=8), "last-quarter") == ("b6.o", "b7.o")
    for bad in ({"blocks": "last-9"}, {"blocks": "first"}, {"projections": "x"}):
        with pytest.raises(ValueError):
            select_layers(cfg, **bad)


def test_config_validation():
    with pytest.raises(ValueError):
        ToyModelConfig(model_dim=30, heads=4)
    with pytest.raises(ValueError):
        ToyModelConfig(lora_rank=0)
    with pytest.raises(ValueError):
        ToyModelConfig(lora_targets=("x",))


def test_low_rank_path_matches_dense_merge():
    model = small_model()
    sets = random_sets(SMALL, 3)
    g = np.random.default_rng(4)
    coeffs = _coeffs(sets, SMALL, g.normal(0.5, 0.5, (3, len(SMALL.layer_ids))))
    x = tokens(SMALL, 9)
    low, trace = forward(model, sets, coeffs, x)
    deltas = {l: merged_update(sets, coeffs, l) for l in SMALL.layer_ids}
    dense, dense_trace = forward_dense(model, deltas, x)
    np.testing.assert_allclose(low, dense, atol=1e-10)
    for l in SMALL.layer_ids:
        np.testing.assert_allclose(trace.inputs[l], dense_trace.inputs[l], atol=1e-10)
    assert trace.batch_size == 9 * SMALL.seq_len


def test_zero_coefficients_equal_base_model():
    model = small_model()
    sets = random_sets(SMALL, 2)
    x = tokens(SMALL, 5)
    base, _ = forward(model, [], None, x)
    zero, _ = forward(model, sets, MergeCoefficients.constant(["t0", "t1"], SMALL.layer_ids, 0.0), x)
    np.testing.assert_array_equal(base, zero)


def test_samples_do_not_interact():
    model = small_model()
    sets = random_sets(SMALL, 1)
    coeffs = MergeCoefficients.constant(["t0"], SMALL.layer_ids, 1.0)
    x = tokens(SMALL, 6)
    batch, _ = forward(model, sets, coeffs, x)
    for i in range(6):
        single, _ = forward(model, sets, coeffs, x[i : i + 1])
        np.testing.assert_allclose(batch[i], single[0], atol=1e-12)


def test_token_validation():
    model = small_model()
    with pytest.raises(ValueError):
        forward(model, [], None, np.zeros((2, SMALL.seq_len + 1), dtype=int))
    with pytest.raises(ValueError):
        forward(model, [], None, np.full((2, SMALL.seq_len), SMALL.vocab))
    with pytest.raises(ValueError):
        forward(model, [], None, np.zeros((2, SMALL.seq_len)))


def test_mismatched_sets_rejected():
    model = small_model()
    other = ToyModelConfig(blocks=4, model_dim=8, heads=2, mlp_dim=16, seq_len=4, vocab=8, lora_rank=2)
    sets = random_sets(other, 1)
    with pytest.raises(ValueError):
        forward(model, sets, MergeCoefficients.constant(["t0"], other.layer_ids, 1.0), tokens(SMALL, 2))
    with pytest.raises(ValueError):
        forward(model, random_sets(SMALL, 1), MergeCoefficients.constant(["zz"], SMALL.layer_ids, 1.0), tokens(SMALL, 2))


def test_base_model_round_trip(tmp_path):
    model = small_model(3)
    loaded = load_base_model(save_base_model(model, tmp_path / "b"))
    assert loaded.config == model.config
    for k, w in model.weights.items():
        assert loaded.weights[k].tobytes() == w.tobytes()


def test_base_init_deterministic_and_seed_dependent():
    a, b, c = init_base_model(SMALL, 1), init_base_model(SMALL, 1), init_base_model(SMALL, 2)
    assert all(a.weights[k].tobytes() == b.weights[k].tobytes() for k in a.weights)
    assert any(a.weights[k].tobytes() != c.weights[k].tobytes() for k in a.weights)


def _central_fd(fn, values, h=1e-5):
    grad = np.zeros_like(values)
    for idx in np.ndindex(values.shape):
        p, m = values.copy(), values.copy()
        p[idx] += h
        m[idx] -= h
        grad[idx] = (fn(p) - fn(m)) / (2 * h)
    return grad


def test_coefficient_gradient_of_task_loss_matches_fd():
    model = small_model()
    sets = random_sets(SMALL, 2)
    x = tokens(SMALL, 4)
    y = np.array([0, 1, 2, 1])
    coeffs = _coeffs(sets, SMALL, np.random.default_rng(2).normal(0.4, 0.2, (2, len(SMALL.layer_ids))))

    def objective(m, ss, cc, lam, batch):
        out = run_graph(m, batch, lora_terms(m, ss, cc, lam))
        from nscmerge.toynet import apply_head

        return task_loss(apply_head(out.features, ss[0].head), y, "classification")

    value, grad = grad_wrt_coeffs(model, sets, coeffs, x, objective)

    def at(v):
        c = _coeffs(sets, SMALL, v)
        return float(objective(model, sets, c, ag.Tensor(v), x).data)

    assert value == pytest.approx(at(coeffs.values.copy()))
    np.testing.assert_allclose(grad, _central_fd(at, coeffs.values.copy()), rtol=1e-5, atol=1e-8)


def test_non_scalar_objective_rejected():
    model = small_model()
    sets = random_sets(SMALL, 1)
    coeffs = MergeCoefficients.constant(["t0"], SMALL.layer_ids, 1.0)
    with pytest.raises(ValueError):
        grad_wrt_coeffs(model, sets, coeffs, tokens(SMALL, 2), lambda m, s, c, lam, b: lam)


def test_loss_and_metric_definitions():
    logits = np.array([[2.0, 0.0], [0.0, 1.0], [3.0, 1.0]])
    assert task_metric(logits, [0, 1, 1], "classification") == pytest.approx(2 / 3)
    lse = np.log(np.exp(logits).sum(axis=1))
    ce = -np.mean(logits[[0, 1, 2], [0, 1, 1]] - lse)
    assert float(task_loss(ag.Tensor(logits), [0, 1, 1], "classification").data) == pytest.approx(ce)
    pred, target = np.array([[1.0, 2.0]]), np.array([[0.0, 0.0]])
    assert task_metric(pred, target, "regression") == pytest.approx(np.sqrt(2.5))
    assert float(task_loss(ag.Tensor(pred), target, "regression").data) == pytest.approx(2.5)


def _tiny_task(kind="classification", seed=3):
    return make_task("cls0" if kind == "classification" else "reg0", kind, seed, vocab=SMALL.vocab,
                     seq_len=SMALL.seq_len, sizes=(128, 64, 64), num_classes=3)


def test_train_lora_shapes_history_and_determinism():
    model = small_model()
    task = _tiny_task()
    s1, h1 = train_lora(model, task, epochs=2, seed=5)
    s2, h2 = train_lora(model, task, epochs=2, seed=5)
    assert [r.epoch for r in h1] == [0, 1, 2]
    assert s1.layer_ids == SMALL.layer_ids and s1.head.out_dim == 3
    for l in s1.layer_ids:
        assert s1[l].a.tobytes() == s2[l].a.tobytes() and s1[l].b.tobytes() == s2[l].b.tobytes()
        assert s1[l].rank == SMALL.lora_rank
    assert h1 == h2


def test_train_lora_reduces_training_loss():
    model = small_model()
    _, hist = train_lora(model, _tiny_task("regression"), epochs=5, seed=1, lr=3e-3)
    assert hist[-1].train_loss < hist[0].train_loss


def test_nsc_graph_ratio_matches_numpy_kernel():
    from nscmerge.nullspace import null_ratios

    model = small_model()
    sets = random_sets(SMALL, 2)
    coeffs = MergeCoefficients.constant(["t0", "t1"], SMALL.layer_ids, 0.7)
    targets = select_layers(SMALL, "all", "qo")
    caches = prepare_gram_caches(sets, targets)
    batches = {"t0": tokens(SMALL, 3, 1), "t1": tokens(SMALL, 5, 2)}
    value = float(nsc_loss(model, sets, coeffs, ag.Tensor(coeffs.values), batches, caches, targets).data)
    per_task = []
    for s in sets:
        _, trace = forward(model, sets, coeffs, batches[s.task_id])
        per_task.append(np.mean([np.mean(null_ratios(caches[(s.task_id, l)], trace.inputs[l])[0]) for l in targets]))
    assert value == pytest.approx(np.mean(per_task), abs=1e-12)
