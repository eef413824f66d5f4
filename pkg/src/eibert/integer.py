"""Integer-arithmetic inference for a :class:`~eibert.quant.QuantizedModel`.

Every weight matmul quantizes its input to int8 codes with the site's
activation scale, multiplies by the int8 weight codes with int32 accumulation,
then rescales once by ``act_scale * weight_step``.  Attention score products,
softmax, layer norm and GELU run in float32.
"""
from __future__ import annotations

import math

import numpy as np
import torch
from torch.nn import functional as F

from .errors import OverflowContractError, VocabError
from .model import MASK_FILL
from .numerics import QMAX, round_half_away, softmax_rows

F32 = torch.float32
ACC_LIMIT = 2**31 - 1


def quantize_activation(x: torch.Tensor, scale: float) -> torch.Tensor:
    return round_half_away(x / scale).clamp(-QMAX, QMAX).to(torch.int32)


def int_matmul(xq: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """int32 products of int8-range codes; refuses shapes that could overflow."""
    k = codes.shape[0]
    if k * QMAX * QMAX > ACC_LIMIT:
        raise OverflowContractError(f"inner dimension {k} can overflow an int32 accumulator")
    return xq.to(torch.int32) @ codes.to(torch.int32)


def int_linear(x: torch.Tensor, codes: torch.Tensor, step: float, act_scale: float | None,
               bias: torch.Tensor | None) -> torch.Tensor:
    w_step = torch.tensor(step, dtype=F32)
    if act_scale is None:
        # no activation scale recorded for this site: float input, dequantized weight
        out = x @ (codes.to(F32) * w_step)
    else:
        acc = int_matmul(quantize_activation(x, act_scale), codes)
        out = acc.to(F32) * (torch.tensor(act_scale, dtype=F32) * w_step)
    return out if bias is None else out + bias


class _Runner:
    def __init__(self, qmodel):
        self.q = qmodel
        self.eps = qmodel.spec.layer_norm_eps
        self.codes = {n: torch.from_numpy(c.astype(np.int32)) for n, c in qmodel.codes.items()}
        self.fp = {n: torch.from_numpy(r) for n, r in qmodel.residual.items()}

    def linear(self, prefix: str, x: torch.Tensor) -> torch.Tensor:
        w = f"{prefix}.weight"
        return int_linear(x, self.codes[w], self.q.steps[w], self.q.act_scales.get(prefix),
                          self.fp.get(f"{prefix}.bias"))

    def norm(self, prefix: str, x: torch.Tensor) -> torch.Tensor:
        return F.layer_norm(x, x.shape[-1:], self.fp[f"{prefix}.weight"], self.fp[f"{prefix}.bias"], self.eps)

    def table(self, name: str) -> torch.Tensor:
        if name in self.codes:
            return self.codes[name].to(F32) * torch.tensor(self.q.steps[name], dtype=F32)
        return self.fp[name]

    def block(self, b: int, x: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        p = f"blocks.{b}"
        n, s, h = x.shape
        heads = self.q.spec.num_heads

        def split(t):
            return t.view(n, s, heads, h // heads).transpose(1, 2)

        q = split(self.linear(f"{p}.query", x))
        k = split(self.linear(f"{p}.key", x))
        probs = softmax_rows(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]) + bias)
        ctx = (probs @ split(self.linear(f"{p}.value", x))).transpose(1, 2).reshape(n, s, h)
        x = self.norm(f"{p}.attn_norm", x + self.linear(f"{p}.output", ctx))
        ff = self.linear(f"{p}.ffn_out", F.gelu(self.linear(f"{p}.ffn_in", x), approximate="tanh"))
        return self.norm(f"{p}.ffn_norm", x + ff)

    def __call__(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        spec = self.q.spec
        x = self.table("token_embeddings")[ids]
        if spec.factorized_embedding:
            x = self.linear("embedding_projection", x)
        x = x + self.table("position_embeddings")[: ids.shape[1]]
        x = self.norm("embedding_norm", x)
        bias = ((1.0 - mask.to(F32)) * MASK_FILL)[:, None, None, :]
        for layer in range(spec.num_layers):
            x = self.block(0 if spec.share_layers else layer, x, bias)
        cls = x[:, 0]
        if self.q.head_uses_projector:
            cls = self.linear("projector", cls)
        return self.linear("classifier", torch.tanh(self.linear("pooler", cls)))


def quantized_forward(qmodel, token_ids, mask=None) -> np.ndarray:
    """Float32 logits [batch, classes] computed with integer weight matmuls."""
    ids = torch.as_tensor(np.asarray(token_ids), dtype=torch.long)
    if ids.dim() == 1:
        ids = ids.unsqueeze(0)
    mask = torch.ones_like(ids) if mask is None else torch.as_tensor(np.asarray(mask), dtype=torch.long).reshape(ids.shape)
    spec = qmodel.spec
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= spec.vocab_size):
        raise VocabError(f"token ids must lie in [0, {spec.vocab_size})")
    if ids.shape[1] > spec.max_seq_len:
        raise VocabError(f"sequence length {ids.shape[1]} exceeds max_seq_len {spec.max_seq_len}")
    with torch.no_grad():
        return _Runner(qmodel)(ids, mask).numpy()
