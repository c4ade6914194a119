"""Multi-head softmax attention with optional block-structured projections.

Feature vectors are laid out as ``[visual | positional]``: the first half of
every D-dimensional vector carries visual content and the second half
carries positional encodings. In structured mode the value, output and MLP
projections have a zero block so that the positional half of every output
is computed from positional halves only.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .numeric import ShapeError, softmax


def split_halves(v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split the last axis into (visual, positional) halves."""
    d = v.shape[-1]
    if d % 2:
        raise ShapeError(f"cannot split odd dimension {d}")
    return v[..., : d // 2], v[..., d // 2 :]


def concat_halves(upper: torch.Tensor, lower: torch.Tensor) -> torch.Tensor:
    return torch.cat([upper, lower], dim=-1)


def structured_mask(d_out: int, d_in: int) -> torch.Tensor:
    """1 where a weight may be non-zero, 0 on the rows-low x cols-up block."""
    if d_out % 2 or d_in % 2:
        raise ShapeError(f"structured mask needs even dims, got {d_out}x{d_in}")
    m = torch.ones(d_out, d_in)
    m[d_out // 2 :, : d_in // 2] = 0.0
    return m


def bias_mask(d_out: int) -> torch.Tensor:
    m = torch.ones(d_out)
    m[d_out // 2 :] = 0.0
    return m


class StructuredLinear(nn.Module):
    """Linear map whose weight optionally carries an enforced zero block.

    The weight may have a leading head axis, ``(heads, d_out, d_in)``; the
    block layout then applies to every head slice. Masked entries are kept
    at exactly zero by :meth:`apply_mask`, which the optimizer calls after
    each update.
    """

    def __init__(
        self,
        d_in: int,
        d_out: int,
        bias: bool = True,
        structured: bool = True,
        heads: int | None = None,
        std: float | None = None,
    ):
        super().__init__()
        self.d_in, self.d_out, self.heads = d_in, d_out, heads
        self.structured = structured
        shape = (d_out, d_in) if heads is None else (heads, d_out, d_in)
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = nn.Parameter(torch.randn(shape) * std)
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        if structured:
            wm = structured_mask(d_out, d_in).expand(shape).clone()
            self.register_buffer("weight_mask", wm)
            self.register_buffer("bias_mask", bias_mask(d_out) if bias else None)
        else:
            self.register_buffer("weight_mask", None)
            self.register_buffer("bias_mask", None)
        self.apply_mask()

    @torch.no_grad()
    def apply_mask(self) -> None:
        if self.weight_mask is not None:
            self.weight.mul_(self.weight_mask)
        if self.bias is not None and self.bias_mask is not None:
            self.bias.mul_(self.bias_mask)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.heads is not None:
            raise TypeError("head-stacked weights are consumed by MultiHeadAttention")
        return F.linear(x, self.weight, self.bias)


class HalfLayerNorm(nn.Module):
    """Layer norm that, when ``split`` is set, normalises each half separately.

    A full-width norm would subtract a mean that mixes visual statistics into
    the positional half. In split mode the positional half also has no
    additive bias, so a zero positional half stays zero.
    """

    def __init__(self, d: int, split: bool, eps: float = 1e-5):
        super().__init__()
        self.split = split
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.register_buffer("bias_mask", bias_mask(d) if split else None)

    @torch.no_grad()
    def apply_mask(self) -> None:
        if self.bias_mask is not None:
            self.bias.mul_(self.bias_mask)

    def _norm(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=-1, keepdim=True)
        var = (x - mean).pow(2).mean(dim=-1, keepdim=True)
        return (x - mean) / torch.sqrt(var + self.eps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.split:
            up, low = split_halves(x)
            x = concat_halves(self._norm(up), self._norm(low))
        else:
            x = self._norm(x)
        return x * self.gain + self.bias


class MultiHeadAttention(nn.Module):
    """Sum over heads and keys of ``s[h, n] * W_o[h] @ W_v[h] @ y[n]``.

    Scores are the raw bilinear form ``x^T W_q[h]^T W_k[h] y``; there is no
    1/sqrt(d) temperature, the initial scale of ``W_q``/``W_k`` absorbs it.
    """

    def __init__(self, d: int, heads: int, structured: bool = True):
        super().__init__()
        if d % heads:
            raise ShapeError(f"d={d} not divisible by heads={heads}")
        dh = d // heads
        if structured and (d % 2 or dh % 2):
            raise ShapeError("structured attention needs even d and head dim")
        self.d, self.heads, self.dh = d, heads, dh
        # small enough that initial attention is close to uniform
        qk_std = 0.25 * (d * math.sqrt(dh)) ** -0.5
        self.w_q = nn.Parameter(torch.randn(heads, dh, d) * qk_std)
        # keys start equal to queries so initial scores measure similarity
        self.w_k = nn.Parameter(self.w_q.detach().clone())
        self.w_v = StructuredLinear(d, dh, bias=False, structured=structured, heads=heads)
        self.w_o = StructuredLinear(dh, d, bias=True, structured=structured, heads=heads,
                                    std=1.0 / math.sqrt(d))

    def _check(self, x: torch.Tensor, y: torch.Tensor) -> None:
        if x.shape[-1] != self.d or y.shape[-1] != self.d:
            raise ShapeError(f"expected dim {self.d}, got {x.shape[-1]} and {y.shape[-1]}")
        if y.shape[0] == 0:
            raise ShapeError("attention over an empty key set")

    def logits(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        q = torch.einsum("qd,hed->hqe", x, self.w_q)
        k = torch.einsum("nd,hed->hne", y, self.w_k)
        return q @ k.transpose(1, 2)

    def coefficients(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Attention weights, shape ``(heads, Q, N)``; each row sums to one."""
        self._check(x, y)
        return softmax(self.logits(x, y), dim=-1)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        s = self.coefficients(x, y)
        v = torch.einsum("nd,hed->hne", y, self.w_v.weight)
        heads_out = s @ v
        return torch.einsum("hqe,hde->qd", heads_out, self.w_o.weight) + self.w_o.bias


def attention_coefficients(x: torch.Tensor, ys: torch.Tensor, mha: MultiHeadAttention, head: int) -> torch.Tensor:
    """Coefficients of one head for a single query vector ``x``."""
    return mha.coefficients(x[None], ys)[head, 0]


def multi_head_attention(queries: torch.Tensor, ys: torch.Tensor, mha: MultiHeadAttention) -> torch.Tensor:
    return mha(queries, ys)


class StructuredMLP(nn.Module):
    def __init__(self, d: int, hidden: int | None = None, structured: bool = True):
        super().__init__()
        hidden = d if hidden is None else hidden
        self.fc1 = StructuredLinear(d, hidden, structured=structured)
        self.fc2 = StructuredLinear(hidden, d, structured=structured)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class AttentionBlock(nn.Module):
    """Post-norm attention block.

    ``standard``: ``x = LN1(x + MHA(x, y)); x = LN2(x + MLP(x))``.
    ``output``: ``LN1(x + MHA(x, y))`` with no MLP and no second norm.
    """

    def __init__(self, d: int, heads: int, structured: bool = True, variant: str = "standard"):
        super().__init__()
        if variant not in ("standard", "output"):
            raise ValueError(f"unknown block variant {variant!r}")
        self.variant = variant
        self.attn = MultiHeadAttention(d, heads, structured)
        self.norm1 = HalfLayerNorm(d, split=structured)
        if variant == "standard":
            self.mlp = StructuredMLP(d, structured=structured)
            self.norm2 = HalfLayerNorm(d, split=structured)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.attn(x, y))
        if self.variant == "output":
            return x
        return self.norm2(x + self.mlp(x))


def apply_masks(module: nn.Module) -> None:
    """Re-project every structured weight, bias and norm of ``module``."""
    for m in module.modules():
        if isinstance(m, (StructuredLinear, HalfLayerNorm)):
            m.apply_mask()


def masked_parameters(module: nn.Module) -> list[tuple[str, torch.Tensor, torch.Tensor]]:
    """(name, parameter, mask) for every parameter with an enforced zero pattern."""
    out = []
    for name, m in module.named_modules():
        if isinstance(m, StructuredLinear):
            if m.weight_mask is not None:
                out.append((f"{name}.weight", m.weight, m.weight_mask))
            if m.bias is not None and m.bias_mask is not None:
                out.append((f"{name}.bias", m.bias, m.bias_mask))
        elif isinstance(m, HalfLayerNorm) and m.bias_mask is not None:
            out.append((f"{name}.bias", m.bias, m.bias_mask))
    return out
