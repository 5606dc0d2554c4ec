import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from garmentflow import diffcore as dc
from garmentflow.diffcore import NonFiniteError, ShapeError


def test_matmul_identity():
    a = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert torch.equal(dc.matmul(a, torch.eye(2)), a)


def test_masked_softmax_uniform():
    assert torch.equal(dc.masked_softmax(torch.zeros(2)), torch.tensor([0.5, 0.5]))


def test_layernorm_matches_scalar_loop():
    x = [1.0, 2.0, 3.0]
    mu = sum(x) / 3
    var = sum((v - mu) ** 2 for v in x) / 3
    expect = [(v - mu) / math.sqrt(var + 1e-5) for v in x]
    out = dc.layernorm(torch.tensor(x, dtype=torch.float64), torch.ones(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
    np.testing.assert_allclose(out.numpy(), expect, rtol=0, atol=1e-12)


@pytest.mark.parametrize(
    "op,args",
    [
        ("matmul", (torch.zeros(2, 3), torch.zeros(2, 3))),
        ("add", (torch.zeros(2, 3), torch.zeros(4))),
        ("mul", (torch.zeros(2), torch.zeros(3))),
        ("concat_seq", (torch.zeros(2, 3), torch.zeros(2, 4))),
        ("transpose", (torch.zeros(3),)),
    ],
)
def test_shape_errors_name_the_op(op, args):
    with pytest.raises(ShapeError) as info:
        dc.op_set_forward(op, *args)
    assert info.value.op == op
    assert op in str(info.value)


def test_patchify_roundtrip():
    x = torch.arange(2 * 4 * 6 * 3, dtype=torch.float32).reshape(2, 4, 6, 3)
    tok = dc.patchify(x, 2)
    assert tok.shape == (2, 6, 12)
    # first token is the top-left 2x2 block, row-major, channels innermost
    assert tok[0, 0].tolist() == x[0, :2, :2].reshape(-1).tolist()
    assert torch.equal(dc.unpatchify(tok, 4, 6, 2), x)


def test_backward_sum_sq():
    x = torch.tensor([3.0], requires_grad=True)
    g = dc.backward(dc.sum_sq(x), {"x": x})
    assert g["x"].tolist() == [6.0]


def test_backward_linear_model_matches_fd():
    g = torch.Generator().manual_seed(0)
    W = torch.randn(3, 4, generator=g, dtype=torch.float64, requires_grad=True)
    x = torch.randn(4, generator=g, dtype=torch.float64)
    y = torch.randn(3, generator=g, dtype=torch.float64)

    def loss():
        return dc.mean((W @ x - y) ** 2)

    grads = dc.backward(loss(), {"W": W})
    with torch.no_grad():
        num = dc.finite_diff_gradient(lambda _: loss().item(), W, 1e-3)
    assert dc.relative_error(grads["W"], num).max() <= 1e-3


def test_backward_unused_param_is_zero():
    a = torch.ones(2, requires_grad=True)
    b = torch.ones(3, requires_grad=True)
    g = dc.backward(dc.sum_sq(a), {"a": a, "b": b})
    assert torch.equal(g["b"], torch.zeros(3))


def test_backward_rejects_non_scalar_and_non_finite():
    a = torch.ones(2, requires_grad=True)
    with pytest.raises(ShapeError):
        dc.backward(a * 2, {"a": a})
    with pytest.raises(NonFiniteError):
        dc.backward((a * float("inf")).sum(), {"a": a})


def test_fd_quadratic():
    x = torch.tensor([3.0], dtype=torch.float64)
    g = dc.finite_diff_gradient(lambda v: float(v[0] ** 2), x, 1e-3)
    assert abs(g.item() - 6.0) <= 1e-6
    assert x.item() == 3.0


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=8))
def test_fd_linear_is_ones(vals):
    x = torch.tensor(vals, dtype=torch.float64)
    g = dc.finite_diff_gradient(lambda v: float(v.sum()), x, 1e-3)
    np.testing.assert_allclose(g.numpy(), 1.0, rtol=1e-6)


def test_fd_reports_coordinate():
    # only the step at coordinate 2 leaves the domain of log
    x = torch.tensor([1.0, 2.0, 1e-4], dtype=torch.float64)
    with pytest.raises(NonFiniteError) as info:
        dc.finite_diff_gradient(lambda v: float(torch.log(v).sum()), x, 1e-3)
    assert info.value.index == 2


def test_fd_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        dc.finite_diff_gradient(lambda v: 0.0, torch.zeros(1), 0.0)


def test_report_pass_flag():
    assert dc.GradCheckReport("x", 1e-3, (0,), 1e-3).passed
    assert not dc.GradCheckReport("x", 1.1e-3, (0,), 1e-3).passed
    assert str(dc.GradCheckReport("x", 2.0, (1,), 1e-3)).startswith("FAIL")


def test_op_set_gradients_64bit():
    reports = dc.check_op_set(instances=10, seed=0, dtype=torch.float64, tol=1e-5)
    assert {r.name for r in reports} == set(dc.OPS)
    for r in reports:
        assert r.passed, str(r)


def test_model_gradient_oracle_agrees():
    # the FD oracle itself, applied to a small two-layer net
    g = torch.Generator().manual_seed(3)
    W1 = torch.randn(5, 3, generator=g, dtype=torch.float64, requires_grad=True)
    W2 = torch.randn(1, 5, generator=g, dtype=torch.float64, requires_grad=True)
    x = torch.randn(3, 4, generator=g, dtype=torch.float64)

    def loss():
        return dc.sum_sq(dc.matmul(W2, dc.gelu(dc.matmul(W1, x))))

    reps = dc.gradcheck("net", loss, {"W1": W1, "W2": W2}, h=1e-5, tol=1e-5)
    assert all(r.passed for r in reps), [str(r) for r in reps]


# ---------------------------------------------------------------- masked softmax


@st.composite
def scores_and_mask(draw):
    rows = draw(st.integers(1, 5))
    cols = draw(st.integers(1, 9))
    vals = draw(st.lists(st.floats(-30, 30), min_size=rows * cols, max_size=rows * cols))
    bits = draw(st.lists(st.booleans(), min_size=rows * cols, max_size=rows * cols))
    s = torch.tensor(vals, dtype=torch.float32).reshape(rows, cols)
    m = torch.tensor(bits).reshape(rows, cols)
    m[:, draw(st.integers(0, cols - 1))] = True
    return s, m


@given(scores_and_mask())
def test_masked_softmax_rows_and_zeros(sm):
    s, m = sm
    w = dc.masked_softmax(s, m)
    assert torch.all(w[~m] == 0)
    assert torch.allclose(w.sum(-1), torch.ones(s.shape[0]), atol=1e-6)


@given(scores_and_mask(), st.floats(-1e6, 1e6))
def test_masked_values_do_not_matter(sm, junk):
    s, m = sm
    s2 = s.clone()
    s2[~m] = junk
    assert torch.equal(dc.masked_softmax(s, m), dc.masked_softmax(s2, m))


def test_masked_softmax_gradient_zero_on_blocked():
    s = torch.randn(3, 5, dtype=torch.float64, requires_grad=True)
    m = torch.tensor([[1, 0, 1, 0, 1]] * 3, dtype=torch.bool)
    g = torch.autograd.grad((dc.masked_softmax(s, m) * torch.arange(5.0)).sum(), s)[0]
    assert torch.all(g[:, ~m[0]] == 0)


def test_masked_softmax_broadcast_mask():
    s = torch.randn(2, 4, 3, 3)
    m = torch.tensor([[1, 0, 0], [1, 1, 0], [1, 1, 1]], dtype=torch.bool)
    w = dc.masked_softmax(s, m)
    assert torch.all(w[..., 0, 1:] == 0)
    assert torch.allclose(w.sum(-1), torch.ones(2, 4, 3))


def test_forward_backward_bit_identical():
    def run():
        g = torch.Generator().manual_seed(7)
        x = torch.randn(4, 6, generator=g, requires_grad=True)
        w = torch.randn(6, 6, generator=g)
        y = dc.masked_softmax(dc.layernorm(dc.matmul(x, w)), torch.rand(4, 6, generator=g) > 0.3)
        loss = dc.sum_sq(dc.gelu(y))
        return loss.detach(), torch.autograd.grad(loss, x)[0]

    (l1, g1), (l2, g2) = run(), run()
    assert torch.equal(l1, l2) and torch.equal(g1, g2)
