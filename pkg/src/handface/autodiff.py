"""Reverse-mode differentiation substrate.

Every trainable operation in the package runs on 64-bit ``torch`` tensors, whose
autograd tape supplies the reverse pass.  This module pins the numeric policy
(float64, single thread, deterministic kernels) and wraps the op set the losses
rely on with the checks torch itself does not perform: leading-axis-only
broadcasting, descriptive shape errors, domain errors for ``log``/``sqrt`` and a
lowest-index tie rule for the min reduction.  ``finite_diff_check`` is the
independent verification harness used throughout the test-suite.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch

Tensor = torch.Tensor
DTYPE = torch.float64


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def configure(deterministic: bool = True, threads: int = 1) -> None:
    """Set float64 as default dtype and optionally force reproducible kernels."""
    torch.set_default_dtype(DTYPE)
    if deterministic:
        torch.set_num_threads(threads)
        torch.use_deterministic_algorithms(True)


configure(deterministic=False)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return torch.tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE, requires_grad=requires_grad)


def as_tensor(data) -> Tensor:
    if isinstance(data, Tensor):
        return data if data.dtype == DTYPE else data.to(DTYPE)
    return torch.as_tensor(np.asarray(data, dtype=np.float64))


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = tuple(a.shape), tuple(b.shape)
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    # only expansion over leading axes is allowed: the shorter shape must be a suffix
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: incompatible shapes {list(sa)} and {list(sb)}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return a + b


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return a - b


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.dim() == 0 or b.dim() == 0:
        return a * b
    _check_broadcast("mul", a, b)
    return a * b


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    if a.dim() > 2 and b.dim() > 2:
        _check_broadcast("matmul", a[..., :1, :1], b[..., :1, :1])
    return a @ b


def transpose(a: Tensor, dim0: int = -2, dim1: int = -1) -> Tensor:
    return a.transpose(dim0, dim1)


def concat(tensors: Sequence[Tensor], dim: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
            x != y for i, (x, y) in enumerate(zip(ref, other)) if i != dim % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {other} along dim {dim}")
    return torch.cat(ts, dim=dim)


def gather_rows(a: Tensor, index) -> Tensor:
    """Select entries along axis -2 (rows of a point set); gradients scatter back."""
    idx = torch.as_tensor(index, dtype=torch.long)
    if idx.numel() and (idx.min() < 0 or idx.max() >= a.shape[-2]):
        raise ShapeError(f"gather_rows: index out of range for shape {list(a.shape)}")
    return a.index_select(-2, idx)


def sum(a: Tensor, dim=None) -> Tensor:  # noqa: A001
    return a.sum() if dim is None else a.sum(dim)


def mean(a: Tensor, dim=None) -> Tensor:
    return a.mean() if dim is None else a.mean(dim)


def variance(a: Tensor, dim=None) -> Tensor:
    """Population variance (1/N)."""
    if dim is None:
        return ((a - a.mean()) ** 2).mean()
    return ((a - a.mean(dim, keepdim=True)) ** 2).mean(dim)


def exp(a: Tensor) -> Tensor:
    return torch.exp(a)


def log(a: Tensor) -> Tensor:
    if bool((a.detach() < 0).any()):
        raise DomainError(f"log: negative input (min {a.detach().min().item():.3g})")
    return torch.log(a)


def sqrt(a: Tensor) -> Tensor:
    if bool((a.detach() < 0).any()):
        raise DomainError(f"sqrt: negative input (min {a.detach().min().item():.3g})")
    return torch.sqrt(a)


def abs(a: Tensor) -> Tensor:  # noqa: A001
    return torch.abs(a)


def relu(a: Tensor) -> Tensor:
    return torch.relu(a)


def sigmoid(a: Tensor) -> Tensor:
    return torch.sigmoid(a)


def softmax(a: Tensor) -> Tensor:
    return torch.softmax(a, dim=-1)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    return torch.nn.functional.layer_norm(a, a.shape[-1:], eps=eps)


def l2_norm(a: Tensor, eps: float = 0.0) -> Tensor:
    """Euclidean norm along the last axis.

    With ``eps > 0`` the norm is ``sqrt(|a|^2 + eps)``, differentiable at zero.
    """
    sq = (a * a).sum(-1)
    if eps > 0:
        return torch.sqrt(sq + eps)
    return torch.sqrt(sq)


def min_with_argmin(a: Tensor, dim: int = -1) -> tuple[Tensor, Tensor]:
    """Min reduction whose ties resolve to the lowest index.

    The gradient reaches only the selected element.
    """
    idx = torch.argmin(a.detach(), dim=dim)  # argmin returns the first minimum
    val = a.gather(dim, idx.unsqueeze(dim)).squeeze(dim)
    return val, idx


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on all leaves; repeated calls accumulate."""
    if loss.numel() != 1 or loss.dim() > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {list(loss.shape)}")
    loss.reshape(()).backward()


def zero_grad(*tensors: Tensor) -> None:
    for t in tensors:
        t.grad = None


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x0 = as_tensor(x).detach().clone()
    xa = x0.clone().requires_grad_(True)
    out = f(xa)
    (grad,) = torch.autograd.grad(out.reshape(()), xa, allow_unused=True)
    analytic = torch.zeros_like(x0) if grad is None else grad.detach()
    flat = x0.reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            xp = flat.clone()
            xm = flat.clone()
            xp[i] += step
            xm[i] -= step
            fp = f(xp.reshape(x0.shape)).item()
            fm = f(xm.reshape(x0.shape)).item()
            numeric[i] = (fp - fm) / (2.0 * step)
    a = analytic.reshape(-1)
    err = (a - numeric).abs() / torch.clamp(a.abs(), min=1.0)
    return float(err.max()) if err.numel() else 0.0
