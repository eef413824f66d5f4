"""Independent reference computations used as test oracles.

Everything here is plain numpy / math written from the definitions, sharing
no code with the package.
"""
import math

import numpy as np


def softmax(row):
    e = [math.exp(v) for v in row]
    s = sum(e)
    return [v / s for v in e]


def kl(p, q):
    return sum(pi * math.log(pi / max(qi, 1e-12)) for pi, qi in zip(p, q) if pi > 0)


def np_softmax(x):
    x = x - x.max(-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(-1, keepdims=True)


def layer_norm(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def forward(params: dict, spec, ids, mask, capture_attention=False):
    """Reference encoder forward pass over a dict of float64 numpy parameters."""
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    ids = np.asarray(ids)
    mask = np.asarray(mask, dtype=np.float64)
    x = p["token_embeddings"][ids]
    if spec.factorized_embedding:
        x = x @ p["embedding_projection.weight"] + p["embedding_projection.bias"]
    x = x + p["position_embeddings"][: ids.shape[1]]
    x = layer_norm(x, p["embedding_norm.weight"], p["embedding_norm.bias"], spec.layer_norm_eps)
    bias = (1.0 - mask)[:, None, None, :] * -1e9
    n, s, h = x.shape
    heads = spec.num_heads
    d = h // heads
    maps = []
    for layer in range(spec.num_layers):
        b = 0 if spec.share_layers else layer
        w = lambda name: p[f"blocks.{b}.{name}"]  # noqa: E731

        def lin(t, name):
            out = t @ w(f"{name}.weight")
            return out if name == "key" else out + w(f"{name}.bias")

        def split(t):
            return t.reshape(n, s, heads, d).transpose(0, 2, 1, 3)

        q, k, v = split(lin(x, "query")), split(lin(x, "key")), split(lin(x, "value"))
        a = np_softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(d) + bias)
        maps.append(a)
        ctx = (a @ v).transpose(0, 2, 1, 3).reshape(n, s, h)
        x = layer_norm(x + lin(ctx, "output"), w("attn_norm.weight"), w("attn_norm.bias"), spec.layer_norm_eps)
        ff = lin(gelu(lin(x, "ffn_in")), "ffn_out")
        x = layer_norm(x + ff, w("ffn_norm.weight"), w("ffn_norm.bias"), spec.layer_norm_eps)
    cls = x[:, 0]
    if "projector.weight" in p and params.get("_head_uses_projector", False):
        cls = cls @ p["projector.weight"] + p["projector.bias"]
    pooled = np.tanh(cls @ p["pooler.weight"] + p["pooler.bias"])
    logits = pooled @ p["classifier.weight"] + p["classifier.bias"]
    return (logits, maps) if capture_attention else logits


def numpy_params(model) -> dict:
    return {n: t.detach().double().numpy() for n, t in model.named_parameters()}


def brute_force_importance(att_last, ids, mask, vocab_size, received=True):
    """Per-sentence nested loops over heads and positions; ``att_last`` is [B, H, q, k]."""
    imp = np.zeros(vocab_size)
    for b in range(ids.shape[0]):
        n = int(mask[b].sum())
        for pos in range(n):
            total = 0.0
            for h in range(att_last.shape[1]):
                for j in range(n):
                    total += att_last[b, h, j, pos] if received else att_last[b, h, pos, j]
            imp[ids[b, pos]] += total / n
    return imp


def topk_oracle(importance, k, n_reserved=4):
    pairs = sorted(((-importance[i], i) for i in range(n_reserved, len(importance))))
    keep = set(range(n_reserved)) | {i for _, i in pairs[: k - n_reserved]}
    return sorted(keep)


def hand_param_count(v, e, h, i, c, max_len, layers, shared, factorized):
    emb = v * e + max_len * h + 2 * h + ((e * h + h) if factorized else 0)
    attn = 4 * h * h + 3 * h      # no key bias
    ffn = h * i + i + i * h + h
    norms = 2 * 2 * h
    blocks = (attn + ffn + norms) * (1 if shared else layers)
    head = h * h + h + h * c + c
    return emb + blocks + head


def hand_ops(s, e, h, i, c, layers, factorized, head_in=None):
    """2 x MACs, matrix by matrix."""
    macs = 0
    if factorized:
        macs += s * e * h
    for _ in range(layers):
        macs += 3 * s * h * h        # Q, K, V
        macs += s * s * h            # scores
        macs += s * s * h            # context
        macs += s * h * h            # output projection
        macs += s * h * i + s * i * h
    p = head_in or h
    macs += p * p + p * c
    return 2 * macs
