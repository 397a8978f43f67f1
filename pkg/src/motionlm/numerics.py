"""Autodiff helpers on top of torch: stop-gradient, straight-through, gradient
checking against central finite differences, and a clipped Adam wrapper."""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import torch

_local = threading.local()


class NonFiniteLossError(ValueError):
    pass


class NonFiniteGradientError(ValueError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter '{name}'")
        self.name = name


class PrecisionError(RuntimeError):
    pass


class _Tape:
    """Records stop-gradient outputs on one evaluation and replays them on later ones.

    Finite differences only agree with reverse mode when every stopped value is
    held at its base-point value, so grad_check evaluates perturbed losses in
    replay mode.
    """

    def __init__(self) -> None:
        self.values: list[torch.Tensor] = []
        self.replaying = False
        self.pos = 0

    def visit(self, t: torch.Tensor) -> torch.Tensor:
        if not self.replaying:
            self.values.append(t.clone())
            return t
        if self.pos >= len(self.values):
            raise RuntimeError("stop_gradient call sequence changed between evaluations")
        v = self.values[self.pos]
        self.pos += 1
        if v.shape != t.shape:
            raise RuntimeError("stop_gradient shapes changed between evaluations")
        return v


@contextlib.contextmanager
def _tape(tape: _Tape, replay: bool) -> Iterator[None]:
    prev = getattr(_local, "tape", None)
    tape.replaying = replay
    tape.pos = 0
    _local.tape = tape
    try:
        yield
    finally:
        _local.tape = prev


def stop_gradient(t: torch.Tensor) -> torch.Tensor:
    out = t.detach()
    tape = getattr(_local, "tape", None)
    if tape is not None:
        out = tape.visit(out)
    return out


def straight_through(z: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Forward value is exactly ``z_q``; the backward pass is the identity onto ``z``."""
    if z.shape != z_q.shape:
        raise ValueError(f"shape mismatch: {tuple(z.shape)} vs {tuple(z_q.shape)}")
    return stop_gradient(z_q) + (z - stop_gradient(z))


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(prev)


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    max_abs_err: float
    checked: int
    flagged: bool


@dataclass
class GradCheckReport:
    tol: float
    params: dict[str, ParamCheck] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not any(p.flagged for p in self.params.values())

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params.values()), default=0.0)

    def flagged(self) -> list[str]:
        return [n for n, p in self.params.items() if p.flagged]


def grad_check(
    model_fn: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor],
    eps: float = 1e-6,
    tol: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    stencil: int = 2,
    atol: float = 1e-10,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``model_fn()`` with central differences.

    The relative error of a parameter is ``max|a - n| / max(max|a|, max|n|)``,
    i.e. measured against that parameter's gradient scale; a parameter whose
    analytic and numeric gradients are both exactly zero has error 0.
    ``max_entries`` caps how many (randomly chosen) entries per parameter are
    perturbed. ``stencil=4`` uses the fourth-order difference
    (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h, which tolerates a larger
    step on smooth losses and so keeps roundoff away from small gradients.
    An entry set is flagged only if its absolute error also exceeds ``atol``,
    so exact-zero gradients (e.g. unused embedding rows) are not failed on
    finite-difference roundoff.
    """
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise PrecisionError(f"grad_check needs float64 parameters, '{name}' is {p.dtype}")

    tape = _Tape()
    with _tape(tape, replay=False):
        loss = model_fn()
    if not torch.isfinite(loss).all():
        raise NonFiniteLossError(f"loss is not finite: {loss.item()}")
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)

    def evaluate() -> float:
        with torch.no_grad(), _tape(tape, replay=True):
            v = model_fn()
        if not torch.isfinite(v).all():
            raise NonFiniteLossError("loss became non-finite under perturbation")
        return float(v)

    gen = torch.Generator().manual_seed(seed)
    report = GradCheckReport(tol=tol)
    for name, g in zip(names, grads):
        p = params[name]
        analytic = torch.zeros_like(p) if g is None else g.detach()
        flat = p.data.view(-1)
        n = flat.numel()
        if max_entries is not None and n > max_entries:
            idx = torch.randperm(n, generator=gen)[:max_entries].tolist()
        else:
            idx = range(n)
        a_vals, n_vals = [], []
        for i in idx:
            orig = flat[i].item()
            f = {}
            for k in ((-2, -1, 1, 2) if stencil == 4 else (-1, 1)):
                flat[i] = orig + k * eps
                f[k] = evaluate()
            flat[i] = orig
            if stencil == 4:
                n_vals.append((-f[2] + 8 * f[1] - 8 * f[-1] + f[-2]) / (12 * eps))
            else:
                n_vals.append((f[1] - f[-1]) / (2 * eps))
            a_vals.append(analytic.view(-1)[i].item())
        a = torch.tensor(a_vals, dtype=torch.float64)
        num = torch.tensor(n_vals, dtype=torch.float64)
        abs_err = (a - num).abs().max().item() if len(a_vals) else 0.0
        scale = max(a.abs().max().item() if len(a_vals) else 0.0,
                    num.abs().max().item() if len(a_vals) else 0.0)
        rel = abs_err / scale if scale > 0 else 0.0
        report.params[name] = ParamCheck(name, rel, abs_err, len(a_vals), rel > tol and abs_err > atol)
    return report


@dataclass
class OptimizerState:
    lr: float
    betas: tuple[float, float]
    eps: float
    clip_norm: float | None
    step: int
    exp_avg: dict[str, torch.Tensor]
    exp_avg_sq: dict[str, torch.Tensor]


class Adam:
    """torch.optim.Adam with named finiteness checks and global-norm clipping."""

    def __init__(
        self,
        named_params: Iterable[tuple[str, torch.nn.Parameter]],
        lr: float = 3e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip_norm: float | None = 1.0,
        lr_scale: Callable[[str], float] | None = None,
    ):
        self.named = [(n, p) for n, p in named_params if p.requires_grad]
        names = [n for n, _ in self.named]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.clip_norm = clip_norm
        self.steps = 0
        # one param group per distinct lr multiplier, first group at scale 1 if present
        groups: dict[float, list] = {}
        for n, p in self.named:
            groups.setdefault(float(lr_scale(n)) if lr_scale else 1.0, []).append(p)
        self._scales = sorted(groups, key=lambda s: (s != 1.0, s))
        self._base_lr = lr
        self._opt = torch.optim.Adam(
            [{"params": groups[s], "lr": lr * s} for s in self._scales], lr=lr, betas=betas, eps=eps)

    @property
    def lr(self) -> float:
        return self._base_lr

    @lr.setter
    def lr(self, value: float) -> None:
        self._base_lr = value
        for g, s in zip(self._opt.param_groups, self._scales):
            g["lr"] = value * s

    def zero_grad(self) -> None:
        self._opt.zero_grad(set_to_none=True)

    def step(self) -> float:
        """Apply one update from the parameters' ``.grad``; returns the pre-clip norm."""
        for name, p in self.named:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteGradientError(name)
        params = [p for _, p in self.named if p.grad is not None]
        if self.clip_norm is not None and params:
            norm = float(torch.nn.utils.clip_grad_norm_(params, self.clip_norm))
        else:
            norm = math.sqrt(sum(float(p.grad.pow(2).sum()) for p in params))
        self._opt.step()
        self.steps += 1
        return norm

    def state(self) -> OptimizerState:
        g = self._opt.param_groups[0]
        g = dict(g, lr=self._base_lr)
        m, v = {}, {}
        for name, p in self.named:
            s = self._opt.state.get(p)
            if s:
                m[name] = s["exp_avg"]
                v[name] = s["exp_avg_sq"]
        return OptimizerState(g["lr"], tuple(g["betas"]), g["eps"], self.clip_norm,
                              self.steps, m, v)

    def state_dict(self) -> dict:
        return {"opt": self._opt.state_dict(), "steps": self.steps, "lr": self._base_lr}

    def load_state_dict(self, d: dict) -> None:
        self._opt.load_state_dict(d["opt"])
        self.steps = d["steps"]
        self._base_lr = d.get("lr", self._base_lr)
