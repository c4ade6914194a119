"""Neural primitives with explicit shape contracts, plus finite-difference
gradient checking.

Everything is a thin layer over torch; the wrappers exist so callers get
clear errors on malformed input and so the gradient checker has one place
to live.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch
import torch.nn.functional as F


class ShapeError(ValueError):
    """Raised when array shapes do not conform to an operation's contract."""


class NumericError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def softmax(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Max-subtracted softmax along ``dim``."""
    v = torch.as_tensor(v)
    if v.numel() == 0 or v.shape[dim] == 0:
        raise ShapeError("softmax of an empty vector")
    shifted = v - v.amax(dim=dim, keepdim=True)
    e = shifted.exp()
    return e / e.sum(dim=dim, keepdim=True)


def linear(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """y = W x + b for a vector ``x`` or a batch of row vectors."""
    if W.dim() != 2 or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear: x {tuple(x.shape)} does not conform to W {tuple(W.shape)}")
    if b is not None and b.shape != (W.shape[0],):
        raise ShapeError(f"linear: bias {tuple(b.shape)} does not match W {tuple(W.shape)}")
    return F.linear(x, W, b)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor | None, eps: float = 1e-5) -> torch.Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    if x.shape[-1] < 2:
        raise ShapeError("layer_norm needs at least 2 features")
    if gain.shape != x.shape[-1:] or (bias is not None and bias.shape != x.shape[-1:]):
        raise ShapeError("layer_norm: gain/bias shape mismatch")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps) * gain
    return y if bias is None else y + bias


def conv2d(
    image: torch.Tensor,
    kernel: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """Cross-correlation of a channels-last ``H x W x C`` array.

    ``kernel`` has torch layout ``(C_out, C_in, k_h, k_w)``. Returns an
    ``H' x W' x C_out`` array with ``H' = (H + 2p - k) // s + 1``.
    """
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    if image.dim() != 3 or kernel.dim() != 4 or kernel.shape[1] != image.shape[2]:
        raise ShapeError(f"conv2d: image {tuple(image.shape)} vs kernel {tuple(kernel.shape)}")
    kh, kw = kernel.shape[2:]
    if image.shape[0] + 2 * padding < kh or image.shape[1] + 2 * padding < kw:
        raise ShapeError("conv2d: kernel larger than padded input")
    out = F.conv2d(image.permute(2, 0, 1)[None], kernel, bias, stride=stride, padding=padding)
    return out[0].permute(1, 2, 0)


@dataclass
class GradCheckReport:
    max_error: float
    group_errors: dict[str, float] = field(default_factory=dict)
    checked: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error < tol


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-5,
    samples_per_group: int | None = None,
    generator: torch.Generator | None = None,
) -> GradCheckReport:
    """Compare autograd gradients with central differences.

    ``params`` maps group names to leaf tensors with ``requires_grad``. The
    error for one coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    With ``samples_per_group`` only that many random coordinates of each
    group are probed (always including the extremes of the flat index).
    """
    names = list(params)
    tensors = [params[n] for n in names]
    loss = loss_fn()
    if not torch.isfinite(loss).all():
        raise NumericError(f"non-finite loss {loss.item()}")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)

    report = GradCheckReport(max_error=0.0)
    for name, p, g in zip(names, tensors, grads):
        g = torch.zeros_like(p) if g is None else g.detach().reshape(-1)
        flat = p.data.view(-1)
        n = flat.numel()
        if samples_per_group is None or samples_per_group >= n:
            idx = range(n)
        else:
            pick = torch.randperm(n, generator=generator)[: max(samples_per_group - 2, 0)]
            idx = sorted({0, n - 1, *pick.tolist()})
        worst = 0.0
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"non-finite loss while probing {name}[{i}]")
            numeric = (up - down) / (2 * eps)
            analytic = g[i].item()
            err = abs(analytic - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
            report.checked += 1
        report.group_errors[name] = worst
        report.max_error = max(report.max_error, worst)
    return report
