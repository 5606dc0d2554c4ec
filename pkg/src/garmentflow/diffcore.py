"""Tensor op set, masked softmax, and the finite-difference gradient harness.

Tensors are ``torch.Tensor`` and gradients come from torch autograd. Every op
the model uses is listed in :data:`OPS` so it can be checked against central
finite differences by :func:`check_op_set`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import torch
import torch.nn.functional as F


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    def __init__(self, what: str, index=None):
        self.index = index
        msg = f"non-finite value in {what}"
        if index is not None:
            msg += f" at coordinate {index}"
        super().__init__(msg)


# ---------------------------------------------------------------- op set


def matmul(a, b):
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def transpose(a):
    if a.dim() < 2:
        raise ShapeError("transpose", a.shape, detail="need rank >= 2")
    return a.transpose(-1, -2)


def _broadcastable(op, a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b):
    _broadcastable("add", a, b)
    return a + b


def mul(a, b):
    _broadcastable("mul", a, b)
    return a * b


def scale(a, s: float):
    return a * s


def masked_softmax(scores, allowed=None, dim: int = -1):
    """Softmax along ``dim`` where blocked entries get exactly zero weight.

    ``allowed`` is a boolean tensor broadcastable to ``scores``; ``False`` marks
    a blocked entry. Blocked entries are excluded from the max and from the
    normalizer, so their values cannot influence the result in any bit.
    """
    if allowed is None:
        m = scores.amax(dim, keepdim=True).detach()
        e = torch.exp(scores - m)
        return e / e.sum(dim, keepdim=True)
    try:
        allowed = allowed.expand_as(scores)
    except RuntimeError:
        raise ShapeError("masked_softmax", scores.shape, allowed.shape) from None
    if not bool(allowed.any(dim).all()):
        raise AssertionError("masked_softmax: a row has every entry blocked")
    m = scores.masked_fill(~allowed, -math.inf).amax(dim, keepdim=True).detach()
    # blocked entries are replaced before exp so neither value nor gradient leaks
    safe = torch.where(allowed, scores, m)
    e = torch.where(allowed, torch.exp(safe - m), torch.zeros((), dtype=scores.dtype))
    return e / e.sum(dim, keepdim=True)


def layernorm(x, weight=None, bias=None, eps: float = 1e-5):
    d = x.shape[-1]
    for p in (weight, bias):
        if p is not None and tuple(p.shape) != (d,):
            raise ShapeError("layernorm", x.shape, p.shape)
    return F.layer_norm(x, (d,), weight, bias, eps)


def gelu(x):
    return F.gelu(x)


def patchify(img, p: int):
    """``[B, H, W, C] -> [B, (H/p)*(W/p), p*p*C]``, patches in row-major order."""
    if img.dim() != 4 or img.shape[1] % p or img.shape[2] % p:
        raise ShapeError("patchify", img.shape, detail=f"patch {p}")
    b, h, w, c = img.shape
    x = img.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(tokens, h: int, w: int, p: int, c: int = 3):
    b, n, f = tokens.shape
    if h % p or w % p or n != (h // p) * (w // p) or f != p * p * c:
        raise ShapeError("unpatchify", tokens.shape, detail=f"target {h}x{w}x{c}, patch {p}")
    x = tokens.reshape(b, h // p, w // p, p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


def concat_seq(*xs):
    tails = {tuple(x.shape[:-2]) + tuple(x.shape[-1:]) for x in xs}
    if len(tails) != 1:
        raise ShapeError("concat_seq", *(x.shape for x in xs))
    return torch.cat(xs, dim=-2)


def slice_seq(x, start: int, stop: int):
    n = x.shape[-2]
    if not 0 <= start <= stop <= n:
        raise ShapeError("slice_seq", x.shape, detail=f"[{start}:{stop}]")
    return x[..., start:stop, :]


def mean(x):
    return x.mean()


def sum_sq(x):
    return (x * x).sum()


# op-id -> (forward, input builder for gradient checks)
def _rand(g, *shape, dtype):
    return torch.randn(*shape, generator=g, dtype=dtype)


def _mask(g, rows, cols):
    allowed = torch.rand(rows, cols, generator=g) > 0.4
    allowed[:, 0] = True
    return allowed


OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (matmul, lambda g, dt: [_rand(g, 3, 4, dtype=dt), _rand(g, 4, 2, dtype=dt)]),
    "transpose": (transpose, lambda g, dt: [_rand(g, 3, 5, dtype=dt)]),
    "add": (add, lambda g, dt: [_rand(g, 3, 4, dtype=dt), _rand(g, 4, dtype=dt)]),
    "mul": (mul, lambda g, dt: [_rand(g, 3, 4, dtype=dt), _rand(g, 3, 4, dtype=dt)]),
    "scale": (lambda a: scale(a, 0.37), lambda g, dt: [_rand(g, 2, 5, dtype=dt)]),
    # the boolean mask is drawn per instance in check_op_set
    "masked_softmax": (masked_softmax, lambda g, dt: [_rand(g, 4, 6, dtype=dt)]),
    "layernorm": (layernorm, lambda g, dt: [_rand(g, 3, 6, dtype=dt), 1 + 0.3 * _rand(g, 6, dtype=dt), _rand(g, 6, dtype=dt)]),
    "gelu": (gelu, lambda g, dt: [_rand(g, 3, 5, dtype=dt)]),
    "patchify": (lambda x: patchify(x, 2), lambda g, dt: [_rand(g, 1, 4, 6, 3, dtype=dt)]),
    "concat_seq": (concat_seq, lambda g, dt: [_rand(g, 2, 3, dtype=dt), _rand(g, 4, 3, dtype=dt)]),
    "slice_seq": (lambda x: slice_seq(x, 1, 4), lambda g, dt: [_rand(g, 5, 3, dtype=dt)]),
    "mean": (mean, lambda g, dt: [_rand(g, 3, 4, dtype=dt)]),
    "sum_sq": (sum_sq, lambda g, dt: [_rand(g, 3, 4, dtype=dt)]),
}


def op_set_forward(op_id: str, *inputs):
    if op_id not in OPS:
        raise KeyError(f"unknown op {op_id!r}")
    return OPS[op_id][0](*inputs)


# ---------------------------------------------------------------- gradients


def backward(loss, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradient of a scalar ``loss`` w.r.t. every tensor in ``params``.

    Parameters the loss does not depend on get an all-zero gradient.
    """
    if loss.numel() != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    if not torch.isfinite(loss):
        raise NonFiniteError("loss")
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return {
        n: torch.zeros_like(params[n]) if g is None else g
        for n, g in zip(names, grads)
    }


def finite_diff_gradient(f: Callable[[torch.Tensor], float], x: torch.Tensor, h: float = 1e-3):
    """Central differences ``(f(x + h_i e_i) - f(x - h_i e_i)) / 2 h_i``.

    ``h`` is relative: the step at coordinate i is ``h * max(1, |x_i|)``.
    ``x`` is perturbed in place and restored afterwards.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    flat = x.detach().view(-1)
    out = torch.empty_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError("function value", index=i)
        out[i] = (fp - fm) / (2 * step)
    return out.view_as(x)


def default_step(dtype) -> float:
    """Relative finite-difference step: 1e-3 at 32-bit, 1e-5 at 64-bit."""
    return 1e-5 if dtype == torch.float64 else 1e-3


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    worst_index: tuple
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self):
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name}: max rel err {self.max_rel_error:.3e} at {self.worst_index} (tol {self.tolerance:g})"


def relative_error(analytic, numeric):
    """Per-coordinate ``|a - n| / max(|a|, |n|, floor)``.

    The floor is 1e-3 of the largest numeric gradient in the tensor (and at
    least 1e-8), so coordinates that are near zero relative to the rest of the
    tensor are judged on the tensor's own scale.
    """
    a = analytic.detach().double()
    n = numeric.detach().double()
    floor = max(1e-3 * n.abs().max().item() if n.numel() else 0.0, 1e-8)
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.tensor(floor, dtype=torch.float64))
    return (a - n).abs() / denom


def gradcheck(
    name: str,
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    h: float = 1e-3,
    tol: float = 1e-3,
) -> list[GradCheckReport]:
    """Compare autograd against finite differences for each named tensor.

    ``loss_fn`` closes over ``params`` (leaf tensors with ``requires_grad``).
    """
    grads = backward(loss_fn(), params)
    reports = []
    with torch.no_grad():
        for pname, p in params.items():
            num = finite_diff_gradient(lambda _: loss_fn().item(), p, h)
            err = relative_error(grads[pname], num)
            idx = int(err.argmax()) if err.numel() else 0
            worst = tuple(int(i) for i in torch.unravel_index(torch.tensor(idx), p.shape)) if p.dim() else ()
            reports.append(GradCheckReport(f"{name}:{pname}", float(err.max()) if err.numel() else 0.0, worst, tol))
    return reports


def check_op_set(
    instances: int = 10,
    seed: int = 0,
    dtype=torch.float64,
    h: float | None = None,
    tol: float = 1e-5,
    ops: Sequence[str] | None = None,
) -> list[GradCheckReport]:
    """Gradient-check every op on ``instances`` random inputs.

    The checked scalar is ``sum(w * op(inputs))`` with a fixed random ``w``.
    One report per op carries the worst error over all instances and inputs.
    """
    if h is None:
        h = default_step(dtype)
    g = torch.Generator().manual_seed(seed)
    out = []
    for op_id in ops or OPS:
        fwd, build = OPS[op_id]
        worst = GradCheckReport(op_id, 0.0, (), tol)
        for k in range(instances):
            inputs = [t.clone().requires_grad_(True) for t in build(g, dtype)]
            if op_id == "masked_softmax":
                allowed = _mask(g, *inputs[0].shape)
                fn = lambda *xs, allowed=allowed: masked_softmax(xs[0], allowed)
            else:
                fn = fwd
            probe = fn(*inputs)
            w = torch.randn(probe.shape, generator=g, dtype=dtype)
            params = {f"in{j}": t for j, t in enumerate(inputs)}
            reps = gradcheck(op_id, lambda: (w * fn(*inputs)).sum(), params, h=h, tol=tol)
            for r in reps:
                if r.max_rel_error > worst.max_rel_error:
                    worst = GradCheckReport(op_id, r.max_rel_error, (k, r.name.split(":")[1]) + r.worst_index, tol)
        out.append(worst)
    return out
