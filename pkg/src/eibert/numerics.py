"""Tensor arithmetic helpers, differentiable losses and a gradient oracle.

Tensors are plain :class:`torch.Tensor` objects.  The working precision is the
torch default dtype, switched with :func:`set_precision` / :func:`precision`.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from .errors import InvalidLabelError, InvalidShapeError, StaleTapeError

KL_FLOOR = 1e-12

_DTYPES = {32: torch.float32, 64: torch.float64}


def set_precision(bits: int) -> None:
    """Select 32- or 64-bit floats for every tensor created afterwards."""
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    torch.set_default_dtype(_DTYPES[bits])


def get_precision() -> int:
    return 64 if torch.get_default_dtype() == torch.float64 else 32


@contextlib.contextmanager
def precision(bits: int):
    previous = get_precision()
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=torch.get_default_dtype())


def softmax_rows(logits) -> torch.Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    logits = _as_tensor(logits)
    if logits.dim() == 0 or logits.shape[-1] == 0:
        raise InvalidShapeError(f"softmax needs a non-empty last axis, got shape {tuple(logits.shape)}")
    shifted = logits - logits.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def log_softmax_rows(logits) -> torch.Tensor:
    logits = _as_tensor(logits)
    if logits.dim() == 0 or logits.shape[-1] == 0:
        raise InvalidShapeError(f"softmax needs a non-empty last axis, got shape {tuple(logits.shape)}")
    shifted = logits - logits.amax(dim=-1, keepdim=True).detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=-1, keepdim=True))


def kl_divergence(p, q) -> torch.Tensor:
    """Mean over rows of ``sum_j p_j * ln(p_j / q_j)``.

    ``q`` is floored at 1e-12 and ``0 * ln 0`` counts as zero.
    """
    p, q = _as_tensor(p), _as_tensor(q)
    if p.shape != q.shape:
        raise InvalidShapeError(f"kl_divergence shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    if p.dim() == 1:
        p, q = p.unsqueeze(0), q.unsqueeze(0)
    terms = torch.xlogy(p, p) - p * torch.log(q.clamp_min(KL_FLOOR))
    return terms.sum(dim=-1).mean()


def mse(a, b) -> torch.Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise InvalidShapeError(f"mse shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def cross_entropy(logits, labels) -> torch.Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = _as_tensor(logits)
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if labels.numel() != logits.shape[0]:
        raise InvalidShapeError(f"{labels.numel()} labels for {logits.shape[0]} rows")
    n_classes = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise InvalidLabelError(f"labels must lie in [0, {n_classes})")
    logp = log_softmax_rows(logits)
    return -logp.gather(1, labels.unsqueeze(1)).mean()


class GradTape:
    """One forward/backward recording over a fixed set of named parameters.

    Use as a context manager around the forward pass, then call
    :meth:`gradient` (or :func:`backward`) exactly once.  A tape whose
    parameters were modified in place after recording, or that was already
    consumed, is stale.
    """

    def __init__(self, params: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]]):
        self.params = dict(params)
        self.grads: dict[str, torch.Tensor] | None = None
        self._versions: dict[str, int] | None = None
        self._consumed = False
        self._grad_mode = None

    def __enter__(self):
        self._versions = {name: p._version for name, p in self.params.items()}
        self._grad_mode = torch.enable_grad()
        self._grad_mode.__enter__()
        return self

    def __exit__(self, *exc):
        self._grad_mode.__exit__(*exc)
        return False

    def gradient(self, loss: torch.Tensor) -> dict[str, torch.Tensor]:
        return backward(loss, self)


def backward(loss: torch.Tensor, tape: GradTape) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` for every parameter on ``tape``.

    Parameters the loss does not depend on get exact zeros.
    """
    if tape._versions is None:
        raise StaleTapeError("tape was never used to record a forward pass")
    if tape._consumed:
        raise StaleTapeError("tape has already been consumed by a backward pass")
    changed = [n for n, p in tape.params.items() if p._version != tape._versions[n]]
    if changed:
        raise StaleTapeError(f"parameters modified after recording: {changed[:3]}")
    if loss.numel() != 1:
        raise InvalidShapeError("backward needs a scalar loss")
    names = list(tape.params)
    tensors = [tape.params[n] for n in names]
    if loss.requires_grad:
        raw = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    else:
        raw = [None] * len(tensors)
    grads = {
        n: (g.detach().clone() if g is not None else torch.zeros_like(t))
        for n, g, t in zip(names, raw, tensors)
    }
    tape._consumed = True
    tape.grads = grads
    return grads


def finite_diff_report(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    epsilon: float,
    max_per_param: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Per-tensor max relative error between analytic and central-difference
    gradients, ``|a - c| / max(|a|, |c|, 1e-8)``.

    ``loss_fn`` must recompute the loss from the current values of ``params``.
    By default every element of every parameter is probed; ``max_per_param``
    samples that many elements per tensor instead.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = dict(params)
    with GradTape(params) as tape:
        loss = loss_fn()
    analytic = tape.gradient(loss)

    rng = np.random.default_rng(seed)
    report = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_per_param is not None and flat.numel() > max_per_param:
                idx = np.sort(rng.choice(flat.numel(), size=max_per_param, replace=False))
            g = analytic[name].reshape(-1)
            worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = loss_fn().item()
                flat[i] = orig - epsilon
                down = loss_fn().item()
                flat[i] = orig
                central = (up - down) / (2.0 * epsilon)
                a = g[i].item()
                err = abs(a - central) / max(abs(a), abs(central), 1e-8)
                worst = math.inf if math.isnan(err) else max(worst, err)
            report[name] = worst
    return report


def finite_diff_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    epsilon: float,
    max_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error over the probed elements (see :func:`finite_diff_report`)."""
    report = finite_diff_report(loss_fn, params, epsilon, max_per_param, seed)
    return max(report.values(), default=0.0)


# 8-bit symmetric code range: {-127, ..., 127}; -128 is never produced.
QMAX = 127


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    """Round to the nearest integer, ties away from zero (torch.round ties to even)."""
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


class _FakeQuantWeight(torch.autograd.Function):
    """``s * clamp(round(w / s))`` with straight-through and LSQ-style step gradients."""

    @staticmethod
    def forward(ctx, w, s):
        v = w / s
        r = round_half_away(v)
        inside = r.abs() <= QMAX
        q = r.clamp(-QMAX, QMAX)
        ctx.save_for_backward(v, q, inside)
        return q * s

    @staticmethod
    def backward(ctx, grad):
        v, q, inside = ctx.saved_tensors
        grad_w = grad * inside
        # d(s*q)/ds: q - v inside the range, the clamp bound outside
        ds = torch.where(inside, q - v, q)
        grad_s = (grad * ds).sum().reshape(())
        return grad_w, grad_s


class _FakeQuantActivation(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale: float):
        r = round_half_away(x / scale)
        inside = r.abs() <= QMAX
        ctx.save_for_backward(inside)
        return r.clamp(-QMAX, QMAX) * scale

    @staticmethod
    def backward(ctx, grad):
        (inside,) = ctx.saved_tensors
        return grad * inside, None


def fake_quant_weight(w: torch.Tensor, step: torch.Tensor) -> torch.Tensor:
    return _FakeQuantWeight.apply(w, step)


def fake_quant_activation(x: torch.Tensor, scale: float) -> torch.Tensor:
    return _FakeQuantActivation.apply(x, scale)
