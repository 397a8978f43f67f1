from __future__ import annotations

import pytest
import torch
from hypothesis import given, settings, strategies as st

from motionlm.numerics import (Adam, NonFiniteGradientError, PrecisionError, float64_mode, grad_check,
                               stop_gradient, straight_through)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_straight_through_forward_and_backward(n, seed):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(n, 3, generator=g, requires_grad=True)
    zq = torch.randn(n, 3, generator=g, requires_grad=True)
    out = straight_through(z, zq)
    assert torch.equal(out, zq.detach())
    w = torch.randn(n, 3, generator=g)
    (out * w).sum().backward()
    assert torch.equal(z.grad, w)
    assert zq.grad is None


def test_stop_gradient_blocks():
    x = torch.ones(3, requires_grad=True)
    y = (stop_gradient(x) * x).sum()
    (g,) = torch.autograd.grad(y, x)
    assert torch.equal(g, torch.ones(3))


def test_grad_check_accepts_correct_and_flags_wrong():
    with float64_mode():
        w = torch.randn(4, 3, requires_grad=True)
        x = torch.randn(5, 4)
        rep = grad_check(lambda: torch.tanh(x @ w).pow(2).sum(), {"w": w})
        assert rep.ok and rep.max_rel_err < 1e-7

        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, a):
                ctx.save_for_backward(a)
                return a.pow(2)

            @staticmethod
            def backward(ctx, g):
                (a,) = ctx.saved_tensors
                return g * 3 * a  # should be 2a

        rep = grad_check(lambda: Wrong.apply(w).sum(), {"w": w})
        assert not rep.ok and rep.flagged() == ["w"]


def test_grad_check_requires_float64():
    w = torch.randn(2, requires_grad=True, dtype=torch.float32)
    with pytest.raises(PrecisionError):
        grad_check(lambda: w.sum(), {"w": w})


def test_grad_check_holds_stopped_values_fixed():
    with float64_mode():
        w = torch.randn(3, requires_grad=True)
        rep = grad_check(lambda: (stop_gradient(w) * w).sum(), {"w": w}, stencil=4)
        assert rep.ok


def test_adam_matches_torch_without_clipping():
    torch.manual_seed(0)
    a = torch.nn.Linear(4, 3)
    b = torch.nn.Linear(4, 3)
    b.load_state_dict(a.state_dict())
    ours = Adam(a.named_parameters(), lr=1e-2, clip_norm=None)
    ref = torch.optim.Adam(b.parameters(), lr=1e-2)
    x = torch.randn(8, 4)
    for _ in range(5):
        for m, opt in ((a, ours), (b, ref)):
            opt.zero_grad()
            m(x).pow(2).sum().backward()
            opt.step()
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


def test_adam_lr_scale_groups_and_state():
    m = torch.nn.Sequential(torch.nn.Linear(2, 2), torch.nn.Linear(2, 2))
    opt = Adam(m.named_parameters(), lr=1e-3, lr_scale=lambda n: 10.0 if n.startswith("1.") else 1.0)
    opt.lr = 2e-3
    lrs = sorted(g["lr"] for g in opt._opt.param_groups)
    assert lrs == pytest.approx([2e-3, 2e-2])
    assert opt.state_dict()["lr"] == 2e-3


def test_adam_rejects_non_finite_gradient():
    m = torch.nn.Linear(2, 1)
    opt = Adam(m.named_parameters())
    m.weight.grad = torch.tensor([[float("nan"), 0.0]])
    with pytest.raises(NonFiniteGradientError, match="weight"):
        opt.step()


def test_clipping_bounds_update_norm():
    p = torch.nn.Parameter(torch.zeros(3))
    opt = Adam([("p", p)], lr=1.0, clip_norm=1.0)
    p.grad = torch.tensor([30.0, 40.0, 0.0])
    assert opt.step() == pytest.approx(50.0)
