import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from modict.tensor import (
    DimensionError, cross_entropy_masked, finite_diff_grad, log_softmax_rows, matmul, relative_error,
    softmax_rows,
)


def test_matmul_hand_case():
    a = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64)
    b = torch.tensor([[5.0], [6.0]], dtype=torch.float64)
    assert matmul(a, b).tolist() == [[17.0], [39.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(torch.zeros(2, 3), torch.zeros(2, 3))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-200, 200))
def test_softmax_rows_sums_to_one_and_is_shift_invariant(row, shift):
    x = torch.tensor([row], dtype=torch.float64)
    p = softmax_rows(x)
    assert math.isclose(float(p.sum()), 1.0, abs_tol=1e-12)
    assert torch.allclose(p, softmax_rows(x + shift), atol=1e-12)
    assert torch.allclose(log_softmax_rows(x).exp(), p, atol=1e-12)


def test_softmax_large_logits_are_stable():
    p = softmax_rows(torch.tensor([[1000.0, 1000.0]], dtype=torch.float64))
    assert p.tolist() == [[0.5, 0.5]]


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        softmax_rows(torch.tensor([[0.0, float("nan")]]))


def test_cross_entropy_masked_ignores_unmasked_positions():
    logits = torch.randn(1, 4, 7, dtype=torch.float64)
    targets = torch.tensor([[1, 2, 3, 4]])
    mask = torch.tensor([[False, True, False, True]])
    ref = -(torch.log_softmax(logits[0, 1], -1)[2] + torch.log_softmax(logits[0, 3], -1)[4]) / 2
    assert torch.allclose(cross_entropy_masked(logits, targets, mask), ref)
    garbage = logits.clone()
    garbage[0, 0] = float("inf")
    assert torch.allclose(cross_entropy_masked(garbage, targets, mask), ref)


def test_cross_entropy_empty_mask_raises():
    with pytest.raises(ValueError, match="no supervised positions"):
        cross_entropy_masked(torch.zeros(1, 2, 3), torch.zeros(1, 2, dtype=torch.long),
                             torch.zeros(1, 2, dtype=torch.bool))


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert math.isclose(relative_error(1.0, 1.1), 0.1 / 1.1)


def test_finite_diff_matches_closed_form():
    w = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    g = finite_diff_grad(lambda: float((w ** 3).sum()), {"w": w}, eps=1e-5)["w"]
    assert torch.allclose(g, 3 * w ** 2, rtol=1e-8)
    # the probe leaves the parameter unchanged
    assert w.tolist() == [0.3, -1.2, 2.0]


def test_finite_diff_unprobed_entries_are_nan():
    w = torch.zeros(4, dtype=torch.float64)
    g = finite_diff_grad(lambda: float(w.sum()), {"w": w}, indices={"w": [1]})["w"]
    assert math.isclose(float(g[1]), 1.0) and torch.isnan(g[[0, 2, 3]]).all()


def test_finite_diff_rejects_non_finite_objective():
    w = torch.zeros(2, dtype=torch.float64)
    with pytest.raises(ValueError):
        finite_diff_grad(lambda: float("nan"), {"w": w})


def test_finite_diff_spec_examples():
    x = torch.tensor([3.0], dtype=torch.float64)
    assert abs(float(finite_diff_grad(lambda: float(x[0] ** 2), {"x": x}, eps=1e-5)["x"]) - 6.0) < 1e-6
    assert float(finite_diff_grad(lambda: 4.0, {"x": x})["x"]) == 0.0


def test_fourth_order_stencil_is_more_accurate():
    w = torch.tensor([0.7], dtype=torch.float64)
    f = lambda: float(torch.sin(3 * w).sum())
    exact = 3 * math.cos(2.1)
    two = float(finite_diff_grad(f, {"w": w}, eps=1e-3)["w"])
    four = float(finite_diff_grad(f, {"w": w}, eps=1e-3, stencil=4)["w"])
    assert abs(four - exact) < abs(two - exact) / 100
    with pytest.raises(ValueError):
        finite_diff_grad(f, {"w": w}, stencil=3)


def test_softmax_hand_rows():
    p = softmax_rows(torch.log(torch.tensor([[1.0, 3.0]], dtype=torch.float64)))
    assert torch.allclose(p, torch.tensor([[0.25, 0.75]], dtype=torch.float64))
    big = softmax_rows(torch.tensor([[1000.0, 1001.0]], dtype=torch.float64))
    assert torch.allclose(big, softmax_rows(torch.tensor([[0.0, 1.0]], dtype=torch.float64)))


def test_uniform_logits_cross_entropy_is_log_v():
    loss = cross_entropy_masked(torch.zeros(1, 3, 4, dtype=torch.float64), torch.tensor([[0, 1, 2]]),
                                torch.ones(1, 3, dtype=torch.bool))
    assert math.isclose(float(loss), math.log(4), rel_tol=1e-12)


@pytest.mark.parametrize("op", ["matmul", "softmax", "log_softmax", "cross_entropy"])
def test_op_gradients_match_finite_differences(op):
    gen = torch.Generator().manual_seed(0)
    a = torch.randn(3, 5, dtype=torch.float64, generator=gen, requires_grad=True)
    b = torch.randn(5, 4, dtype=torch.float64, generator=gen)
    w = torch.randn(3, 5, dtype=torch.float64, generator=gen)
    targets = torch.tensor([[1, 4, 0]])
    mask = torch.tensor([[True, False, True]])
    f = {
        "matmul": lambda: (matmul(a, b) ** 2).sum(),
        "softmax": lambda: (softmax_rows(a) * w).sum(),
        "log_softmax": lambda: (log_softmax_rows(a) * w).sum(),
        "cross_entropy": lambda: cross_entropy_masked(a.unsqueeze(0), targets, mask),
    }[op]
    f().backward()
    fd = finite_diff_grad(lambda: float(f()), {"a": a.data}, eps=1e-4)["a"]
    assert float(relative_error(a.grad, fd).max()) < 1e-4
