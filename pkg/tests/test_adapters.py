from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nscmerge.adapters import (
    CLASSIFICATION,
    AdapterSet,
    LoraAdapter,
    MergeCoefficients,
    TaskHead,
    delta,
    load_adapter_set,
    merged_update,
    save_adapter_set,
    stack_layer_ids,
)
from nscmerge.container import ContainerError, ShapeMismatchError, save_tensors


def _set(rng, task_id, layers=("l0", "l1"), d=6, r=2, head=True):
    adapters = {l: LoraAdapter(l, rng.normal(size=(d, r)), rng.normal(size=(r, d))) for l in layers}
    h = TaskHead(CLASSIFICATION, rng.normal(size=(3, d)), rng.normal(size=3)) if head else None
    return AdapterSet(task_id, adapters, h)


def test_adapter_shapes_and_delta(rng):
    ad = LoraAdapter("q", rng.normal(size=(5, 2)), rng.normal(size=(2, 7)))
    assert (ad.rank, ad.d_in, ad.d_out) == (2, 7, 5)
    np.testing.assert_array_equal(delta(ad), ad.b @ ad.a)


@pytest.mark.parametrize("b_shape, a_shape", [((5, 2), (3, 7)), ((2, 3), (3, 7)), ((5, 3), (3, 2))])
def test_adapter_rejects_bad_ranks(rng, b_shape, a_shape):
    with pytest.raises(ShapeMismatchError):
        LoraAdapter("q", rng.normal(size=b_shape), rng.normal(size=a_shape))


def test_task_ids_cannot_contain_separator(rng):
    with pytest.raises(ValueError):
        _set(rng, "a/b")


def test_merged_update_matches_naive_sum(rng):
    sets = [_set(rng, f"t{k}") for k in range(3)]
    coeffs = MergeCoefficients(("t0", "t1", "t2"), ("l0", "l1"), rng.normal(size=(3, 2)))
    for j, layer in enumerate(("l0", "l1")):
        expected = np.zeros((6, 6))
        for k, s in enumerate(sets):
            b, a = s.adapters[layer].b, s.adapters[layer].a
            for i in range(6):
                for jj in range(6):
                    expected[i, jj] += coeffs.values[k, j] * sum(b[i, t] * a[t, jj] for t in range(2))
        np.testing.assert_allclose(merged_update(sets, coeffs, layer), expected, atol=1e-12)


def test_merged_update_is_zero_at_zero_coefficients(rng):
    sets = [_set(rng, "t0"), _set(rng, "t1")]
    coeffs = MergeCoefficients.constant(["t0", "t1"], ["l0", "l1"], 0.0)
    assert not np.any(merged_update(sets, coeffs, "l0"))


def test_merged_update_shape_mismatch(rng):
    sets = [_set(rng, "t0", d=6), _set(rng, "t1", d=5)]
    coeffs = MergeCoefficients.constant(["t0", "t1"], ["l0", "l1"], 1.0)
    with pytest.raises(ShapeMismatchError):
        merged_update(sets, coeffs, "l0")


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=6, max_size=6))
def test_coefficients_text_round_trip(values):
    c = MergeCoefficients(("a", "b"), ("x", "y", "z"), np.array(values).reshape(2, 3))
    back = MergeCoefficients.from_text(c.to_text())
    assert back.task_ids == c.task_ids and back.layer_ids == c.layer_ids
    np.testing.assert_array_equal(back.values, c.values)


def test_coefficients_validation():
    with pytest.raises(ValueError):
        MergeCoefficients(("a",), ("x",), np.ones((2, 1)))
    with pytest.raises(ValueError):
        MergeCoefficients(("a",), ("x",), np.array([[np.nan]]))
    with pytest.raises(ValueError):
        MergeCoefficients.from_text("a/x = 1\nb/y = 2\n")


def test_adapter_set_round_trip_bit_exact(tmp_path, rng):
    s = _set(rng, "cls0")
    loaded = load_adapter_set(save_adapter_set(s, tmp_path / "s"))
    assert loaded.task_id == "cls0" and loaded.layer_ids == s.layer_ids
    for l in s.layer_ids:
        assert loaded[l].a.tobytes() == s[l].a.tobytes()
        assert loaded[l].b.tobytes() == s[l].b.tobytes()
    assert loaded.head.weight.tobytes() == s.head.weight.tobytes()
    assert loaded.head.kind == CLASSIFICATION


def test_adapter_set_without_head(tmp_path, rng):
    s = _set(rng, "t", head=False)
    assert load_adapter_set(save_adapter_set(s, tmp_path / "s")).head is None


def test_adapter_container_with_wrong_tensors(tmp_path, rng):
    save_tensors(tmp_path / "bad", {"t/l0/A": rng.normal(size=(2, 6))}, {"task_id": "t", "layers": ["l0"]})
    with pytest.raises(ContainerError):
        load_adapter_set(tmp_path / "bad")
    save_tensors(tmp_path / "nometa", {}, {})
    with pytest.raises(ContainerError):
        load_adapter_set(tmp_path / "nometa")


def test_stack_layer_ids(rng):
    a = _set(rng, "a", layers=("l0", "l1", "l2"))
    b = _set(rng, "b", layers=("l2", "l0", "l1"))
    assert stack_layer_ids([a, b]) == ("l0", "l1", "l2")
    with pytest.raises(ShapeMismatchError):
        stack_layer_ids([a, _set(rng, "c", layers=("l0",))])
