"""Transformer encoders for teacher and student, head integration, and
size / operation accounting."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields

import torch
from torch import nn
from torch.nn import functional as F

from .errors import IntegrationError, SpecError, VocabError
from .numerics import QMAX, fake_quant_activation, fake_quant_weight, round_half_away, softmax_rows

MASK_FILL = -1e9
BYTES_FP32 = 4


@dataclass(frozen=True)
class ModelSpec:
    vocab_size: int
    max_seq_len: int = 64
    embed_dim: int = 128
    hidden_dim: int = 128
    intermediate_dim: int = 1024
    num_layers: int = 2
    num_heads: int = 4
    share_layers: bool = True
    factorized_embedding: bool = True
    num_classes: int = 2
    seed: int = 0
    init_std: float = 0.02
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        for name in ("vocab_size", "max_seq_len", "embed_dim", "hidden_dim",
                     "intermediate_dim", "num_layers", "num_heads", "num_classes"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise SpecError(f"{name} must be a positive int, got {value!r}")
        if self.seed < 0:
            raise SpecError("seed must be unsigned")
        if self.hidden_dim % self.num_heads:
            raise SpecError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.factorized_embedding and self.embed_dim > self.hidden_dim:
            raise SpecError("factorized embedding needs embed_dim <= hidden_dim")
        if not self.factorized_embedding and self.embed_dim != self.hidden_dim:
            raise SpecError("without factorization embed_dim must equal hidden_dim")
        if self.init_std <= 0:
            raise SpecError("init_std must be positive")

    @property
    def head_size(self) -> int:
        return self.hidden_dim // self.num_heads

    def replace(self, **changes) -> "ModelSpec":
        return ModelSpec(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown ModelSpec keys: {sorted(unknown)}")
        return cls(**d)


def desk_student_spec(vocab_size: int, num_classes: int, seed: int = 0, **overrides) -> ModelSpec:
    """ALBERT-style student: factorized 128-dim embeddings, one shared block."""
    base = dict(vocab_size=vocab_size, max_seq_len=64, embed_dim=128, hidden_dim=128,
                intermediate_dim=1024, num_layers=2, num_heads=4, share_layers=True,
                factorized_embedding=True, num_classes=num_classes, seed=seed)
    base.update(overrides)
    return ModelSpec(**base)


def desk_teacher_spec(vocab_size: int, num_classes: int, seed: int = 0, **overrides) -> ModelSpec:
    """Unshared 4-layer, 256-wide encoder standing in for BERT-base."""
    base = dict(vocab_size=vocab_size, max_seq_len=64, embed_dim=256, hidden_dim=256,
                intermediate_dim=1024, num_layers=4, num_heads=4, share_layers=False,
                factorized_embedding=False, num_classes=num_classes, seed=seed)
    base.update(overrides)
    return ModelSpec(**base)


class Dense(nn.Module):
    """``x @ weight + bias`` with ``weight`` stored as [in, out]; ``bias`` may be absent.

    ``step`` (a scalar tensor) turns on fake weight quantization and
    ``act_scale`` fake input quantization; ``observe`` records max |input|.
    """

    def __init__(self, n_in: int, n_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_in, n_out))
        self.bias = nn.Parameter(torch.zeros(n_out)) if bias else None
        self.step: torch.Tensor | None = None
        self.act_scale: float | None = None
        self.observe = False
        self.observed_max = 0.0
        # multiply integer codes first and rescale once, like the int8 kernel
        self.factored = False

    def effective_weight(self) -> torch.Tensor:
        if self.step is None:
            return self.weight
        return fake_quant_weight(self.weight, self.step)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.observe:
            self.observed_max = max(self.observed_max, float(x.detach().abs().max()))
        if self.factored and self.act_scale is not None and self.step is not None:
            xq = round_half_away(x / self.act_scale).clamp(-QMAX, QMAX)
            wq = round_half_away(self.weight / self.step).clamp(-QMAX, QMAX)
            scale = torch.tensor(self.act_scale, dtype=x.dtype) * self.step.to(x.dtype)
            out = (xq @ wq) * scale
        else:
            if self.act_scale is not None:
                x = fake_quant_activation(x, self.act_scale)
            out = x @ self.effective_weight()
        return out if self.bias is None else out + self.bias


class EncoderBlock(nn.Module):
    """Post-norm transformer block (BERT layout, tanh-GELU feed-forward)."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        h, i = spec.hidden_dim, spec.intermediate_dim
        self.num_heads = spec.num_heads
        self.query = Dense(h, h)
        # a key bias shifts every score in a softmax row equally, so it would
        # never affect the output or receive a gradient
        self.key = Dense(h, h, bias=False)
        self.value = Dense(h, h)
        self.output = Dense(h, h)
        self.attn_norm = nn.LayerNorm(h, eps=spec.layer_norm_eps)
        self.ffn_in = Dense(h, i)
        self.ffn_out = Dense(i, h)
        self.ffn_norm = nn.LayerNorm(h, eps=spec.layer_norm_eps)

    def split_heads(self, x: torch.Tensor) -> torch.Tensor:
        b, s, h = x.shape
        return x.view(b, s, self.num_heads, h // self.num_heads).transpose(1, 2)

    def attention_probs(self, x: torch.Tensor, mask_bias: torch.Tensor) -> torch.Tensor:
        q = self.split_heads(self.query(x))
        k = self.split_heads(self.key(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        return softmax_rows(scores + mask_bias)

    def forward(self, x: torch.Tensor, mask_bias: torch.Tensor):
        b, s, h = x.shape
        probs = self.attention_probs(x, mask_bias)
        ctx = (probs @ self.split_heads(self.value(x))).transpose(1, 2).reshape(b, s, h)
        x = self.attn_norm(x + self.output(ctx))
        ff = self.ffn_out(F.gelu(self.ffn_in(x), approximate="tanh"))
        return self.ffn_norm(x + ff), probs


@dataclass
class ForwardTrace:
    logits: torch.Tensor
    hidden: torch.Tensor | None = None
    attentions: list[torch.Tensor] | None = None
    mask: torch.Tensor | None = None
    layer_outputs: list[torch.Tensor] = field(default_factory=list)


class TransformerModel(nn.Module):
    """Encoder classifier.  With ``share_layers`` one block serves every layer.

    The head reads the first ([CLS]) position.  When ``head_uses_projector``
    is set, the student's hidden state is mapped to the teacher width by
    ``projector`` before the (integrated) pooler.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.token_embeddings = nn.Parameter(torch.empty(spec.vocab_size, spec.embed_dim))
        self.embedding_projection = (
            Dense(spec.embed_dim, spec.hidden_dim) if spec.factorized_embedding else None
        )
        self.position_embeddings = nn.Parameter(torch.empty(spec.max_seq_len, spec.hidden_dim))
        self.embedding_norm = nn.LayerNorm(spec.hidden_dim, eps=spec.layer_norm_eps)
        n_blocks = 1 if spec.share_layers else spec.num_layers
        self.blocks = nn.ModuleList(EncoderBlock(spec) for _ in range(n_blocks))
        self.projector: Dense | None = None
        self.head_uses_projector = False
        self.pooler = Dense(spec.hidden_dim, spec.hidden_dim)
        self.classifier = Dense(spec.hidden_dim, spec.num_classes)
        # fake-quant steps for the two embedding tables (None = full precision)
        self.table_steps: dict[str, torch.Tensor] = {}

    # -- structure -------------------------------------------------------
    @property
    def head_dim(self) -> int:
        return self.pooler.weight.shape[0]

    @property
    def projector_shape(self) -> tuple[int, int] | None:
        return None if self.projector is None else tuple(self.projector.weight.shape)

    def block_index(self, layer: int) -> int:
        return 0 if self.spec.share_layers else layer

    def layer_block(self, layer: int) -> EncoderBlock:
        return self.blocks[self.block_index(layer)]

    def dense_layers(self) -> dict[str, Dense]:
        return {name: m for name, m in self.named_modules() if isinstance(m, Dense)}

    # -- forward pieces --------------------------------------------------
    def check_ids(self, token_ids: torch.Tensor) -> None:
        if token_ids.numel() and (int(token_ids.min()) < 0 or int(token_ids.max()) >= self.spec.vocab_size):
            raise VocabError(f"token ids must lie in [0, {self.spec.vocab_size})")
        if token_ids.shape[-1] > self.spec.max_seq_len:
            raise VocabError(f"sequence length {token_ids.shape[-1]} exceeds max_seq_len {self.spec.max_seq_len}")

    def table(self, name: str) -> torch.Tensor:
        t = getattr(self, name)
        step = self.table_steps.get(name)
        return t if step is None else fake_quant_weight(t, step)

    def embed(self, token_ids: torch.Tensor) -> torch.Tensor:
        x = self.table("token_embeddings")[token_ids]
        if self.embedding_projection is not None:
            x = self.embedding_projection(x)
        x = x + self.table("position_embeddings")[: token_ids.shape[1]]
        return self.embedding_norm(x)

    @staticmethod
    def mask_bias(mask: torch.Tensor) -> torch.Tensor:
        return ((1.0 - mask.to(torch.get_default_dtype())) * MASK_FILL)[:, None, None, :]

    def head(self, hidden: torch.Tensor) -> torch.Tensor:
        cls = hidden[:, 0]
        if self.head_uses_projector:
            cls = self.projector(cls)
        pooled = torch.tanh(self.pooler(cls))
        return self.classifier(pooled)

    def aligned_hidden(self, hidden: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Masked mean over positions, mapped through the projector if any."""
        m = mask.to(hidden.dtype).unsqueeze(-1)
        pooled = (hidden * m).sum(1) / m.sum(1).clamp_min(1.0)
        if self.projector is not None:
            pooled = self.projector(pooled)
        return pooled

    def forward(self, token_ids: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return run_forward(self, token_ids, mask).logits


def run_forward(model: TransformerModel, token_ids, mask=None, capture_hidden: bool = False,
                capture_attention: bool = False, capture_layers: bool = False) -> ForwardTrace:
    token_ids = torch.as_tensor(token_ids, dtype=torch.long)
    if token_ids.dim() == 1:
        token_ids = token_ids.unsqueeze(0)
    if mask is None:
        mask = torch.ones_like(token_ids)
    mask = torch.as_tensor(mask, dtype=torch.long).reshape(token_ids.shape)
    model.check_ids(token_ids)
    bias = model.mask_bias(mask)
    x = model.embed(token_ids)
    layer_outputs = [x] if capture_layers else []
    attentions = [] if capture_attention else None
    for layer in range(model.spec.num_layers):
        x, probs = model.layer_block(layer)(x, bias)
        if capture_attention:
            attentions.append(probs)
        if capture_layers:
            layer_outputs.append(x)
    logits = model.head(x)
    return ForwardTrace(
        logits=logits,
        hidden=x if capture_hidden else None,
        attentions=attentions,
        mask=mask,
        layer_outputs=layer_outputs,
    )


# Public name matching the operation list; ``run_forward`` avoids shadowing
# nn.Module.forward inside the class body.
forward = run_forward


def _init_parameters(model: TransformerModel, seed: int, std: float) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                nn.init.trunc_normal_(p, mean=0.0, std=std, a=-2 * std, b=2 * std, generator=gen)


def build_model(spec: ModelSpec) -> TransformerModel:
    model = TransformerModel(spec)
    _init_parameters(model, spec.seed, spec.init_std)
    return model


def parameter_count(spec: ModelSpec, head_dim: int | None = None, projector: bool = False) -> int:
    """Closed-form parameter count of :func:`build_model` output."""
    v, e, h, i, c = spec.vocab_size, spec.embed_dim, spec.hidden_dim, spec.intermediate_dim, spec.num_classes
    p = head_dim or h
    emb = v * e + spec.max_seq_len * h + 2 * h
    if spec.factorized_embedding:
        emb += e * h + h
    block = 4 * h * h + 3 * h + (h * i + i) + (i * h + h) + 4 * h
    blocks = block * (1 if spec.share_layers else spec.num_layers)
    head = (p * p + p) + (p * c + c)
    if projector:
        head += h * p + p
    return emb + blocks + head


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def attach_projector(model: TransformerModel, target_dim: int, use_for_head: bool = False) -> TransformerModel:
    """Give ``model`` a [hidden x target_dim] projector initialised as a padded identity."""
    proj = Dense(model.spec.hidden_dim, target_dim)
    with torch.no_grad():
        proj.weight.zero_()
        n = min(model.spec.hidden_dim, target_dim)
        proj.weight[:n, :n] = torch.eye(n)
    model.projector = proj
    model.head_uses_projector = use_for_head
    return model


def integrate_head(teacher: TransformerModel, student: TransformerModel,
                   projector: bool | None = None) -> TransformerModel:
    """Return a copy of ``student`` carrying value-copies of the teacher's pooler
    and classifier.  A projector bridges the widths when they differ (or when
    ``projector=True``).  The teacher is not modified."""
    if teacher.spec.num_classes != student.spec.num_classes:
        raise IntegrationError(
            f"class count mismatch: teacher {teacher.spec.num_classes}, student {student.spec.num_classes}"
        )
    out = copy.deepcopy(student)
    width = teacher.head_dim
    need = student.spec.hidden_dim != width if projector is None else projector
    if not need and student.spec.hidden_dim != width:
        raise IntegrationError(f"student width {student.spec.hidden_dim} != teacher head width {width}; projector required")
    if need:
        if out.projector is None or out.projector.weight.shape[1] != width:
            attach_projector(out, width)
        out.head_uses_projector = True
    else:
        out.projector = None
        out.head_uses_projector = False
    out.pooler = copy.deepcopy(teacher.pooler)
    out.classifier = copy.deepcopy(teacher.classifier)
    for p in out.parameters():
        p.requires_grad_(True)
    return out


# -- accounting ------------------------------------------------------------

def component_of(name: str) -> str:
    if name.startswith(("token_embeddings", "position_embeddings", "embedding_")):
        return "embeddings"
    if name.startswith("blocks."):
        return "blocks"
    return "head"


def quantizable_names(model: TransformerModel) -> list[str]:
    """Weight matrices and embedding tables; biases and layer norms stay fp32."""
    names = []
    for name, p in model.named_parameters():
        if name in ("token_embeddings", "position_embeddings") or (
            name.endswith(".weight") and "norm" not in name
        ):
            names.append(name)
    return names


@dataclass
class StorageReport:
    total: int
    breakdown: dict[str, int]
    precision: str

    def __int__(self):
        return self.total


def storage_bytes(model, precision: str = "fp32") -> StorageReport:
    """Bytes needed to store ``model``.

    ``int8`` counts one byte per quantizable weight plus a 4-byte step per
    matrix; everything else stays 4 bytes.  A quantized model reports its
    actual contents regardless of ``precision``.
    """
    if hasattr(model, "storage_report"):
        return model.storage_report()
    if precision not in ("fp32", "int8"):
        raise ValueError("precision must be 'fp32' or 'int8'")
    quantized = set(quantizable_names(model)) if precision == "int8" else set()
    breakdown = {"embeddings": 0, "blocks": 0, "head": 0}
    for name, p in model.named_parameters():
        if name in quantized:
            n = p.numel() + BYTES_FP32
        else:
            n = p.numel() * BYTES_FP32
        breakdown[component_of(name)] += n
    return StorageReport(sum(breakdown.values()), breakdown, precision)


def compression_ratio(reference_bytes: float, model_bytes: float) -> float:
    if model_bytes <= 0:
        raise ValueError("model size must be positive")
    return float(reference_bytes) / float(model_bytes)


def embedding_share(spec: ModelSpec) -> float:
    """Fraction of parameters held by the token embedding table."""
    return spec.vocab_size * spec.embed_dim / parameter_count(spec)


@dataclass
class OpsCount:
    total: int
    label: str
    breakdown: dict[str, int]


def count_ops(model, seq_len: int, quantized: bool = False) -> OpsCount:
    """Two ops per multiply-accumulate for one forward pass of one sequence.

    Element-wise work (softmax, norms, GELU) is not counted.
    """
    spec = model.spec
    if seq_len > spec.max_seq_len:
        raise ValueError(f"seq_len {seq_len} exceeds max_seq_len {spec.max_seq_len}")
    s, e, h, i = seq_len, spec.embed_dim, spec.hidden_dim, spec.intermediate_dim
    emb = s * e * h if spec.factorized_embedding else 0
    per_layer = 4 * s * h * h + 2 * s * s * h + 2 * s * h * i
    p = model.head_dim
    head = p * p + p * spec.num_classes
    if model.head_uses_projector:
        head += h * p
    macs = {"embeddings": emb, "blocks": per_layer * spec.num_layers, "head": head}
    breakdown = {k: 2 * v for k, v in macs.items()}
    return OpsCount(sum(breakdown.values()), "IOPs" if quantized else "FLOPs", breakdown)
