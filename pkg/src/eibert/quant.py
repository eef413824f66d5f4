"""Module-wise 8-bit post-training quantization.

A model is cut into an embedding module, ``ceil(L / g)`` block modules and a
head module.  Each module's weights and per-tensor step sizes are tuned to
reproduce the full-precision outputs of the layers it spans, with the
straight-through estimator standing in for the rounding.
"""
from __future__ import annotations

import copy
import math
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .errors import ConfigError, OverflowContractError, StepError
from .model import (BYTES_FP32, Dense, ModelSpec, StorageReport, TransformerModel, build_model,
                    component_of, quantizable_names, run_forward)
from .numerics import QMAX, round_half_away

STEP_FLOOR = 1e-8
TABLES = ("token_embeddings", "position_embeddings")
BLOCK_WEIGHTS = ("query", "key", "value", "output", "ffn_in", "ffn_out")
ACC_LIMIT = 2**31 - 1


# -- elementwise projection --------------------------------------------------

def quantize_project(w, s) -> torch.Tensor:
    """Nearest code in [-127, 127] for ``w / s`` (ties away from zero), as int8."""
    s = float(s)
    if not s > 0 or not math.isfinite(s):
        raise StepError(f"step size must be a positive finite number, got {s!r}")
    w = torch.as_tensor(w)
    return round_half_away(w / s).clamp(-QMAX, QMAX).to(torch.int8)


def dequantize(codes, s) -> torch.Tensor:
    return torch.as_tensor(codes).to(torch.get_default_dtype()) * float(s)


def init_step(w) -> float:
    """``max |w| / 127`` floored at 1e-8, rounded to float32 (the stored width)."""
    w = torch.as_tensor(w)
    if w.numel() == 0:
        raise StepError("cannot initialise a step size from an empty tensor")
    s = max(float(w.detach().abs().max()) / QMAX, STEP_FLOOR)
    return float(np.float32(s))


# -- partition ----------------------------------------------------------------

@dataclass(frozen=True)
class QuantModule:
    """A contiguous slice: owned weight names plus the layer range it covers.

    ``layers`` is ``(start, stop)`` over encoder layers; the embedding module
    uses ``(0, 0)`` and the head ``(L, L)``.  ``span`` is the range whose outputs
    enter the objective: it extends past ``stop`` when an owned block is shared
    with later layers.
    """

    name: str
    kind: str
    params: tuple[str, ...]
    layers: tuple[int, int]
    span: tuple[int, int]


@dataclass(frozen=True)
class QuantPartition:
    modules: tuple[QuantModule, ...]
    group_size: int

    def __len__(self):
        return len(self.modules)

    def __iter__(self):
        return iter(self.modules)

    def owners(self) -> dict[str, str]:
        return {p: m.name for m in self.modules for p in m.params}


def partition(model: TransformerModel, group_size: int = 1) -> QuantPartition:
    if not isinstance(group_size, int) or group_size < 1:
        raise ConfigError(f"group_size must be a positive int, got {group_size!r}")
    n_layers = model.spec.num_layers
    emb = [t for t in TABLES]
    if model.embedding_projection is not None:
        emb.append("embedding_projection.weight")
    modules = [QuantModule("embeddings", "embeddings", tuple(emb), (0, 0), (0, 0))]

    owned: set[int] = set()
    for start in range(0, n_layers, group_size):
        stop = min(start + group_size, n_layers)
        names, span_stop = [], stop
        for layer in range(start, stop):
            b = model.block_index(layer)
            if b in owned:
                continue
            owned.add(b)
            names += [f"blocks.{b}.{w}.weight" for w in BLOCK_WEIGHTS]
            users = [l for l in range(n_layers) if model.block_index(l) == b]
            span_stop = max(span_stop, users[-1] + 1)
        modules.append(QuantModule(f"layers[{start}:{stop}]", "blocks", tuple(names),
                                   (start, stop), (start, span_stop)))

    head = ["pooler.weight", "classifier.weight"]
    if model.projector is not None:
        head.insert(0, "projector.weight")
    modules.append(QuantModule("head", "head", tuple(head), (n_layers, n_layers), (n_layers, n_layers)))
    return QuantPartition(tuple(modules), group_size)


# -- configuration and report -------------------------------------------------

@dataclass(frozen=True)
class QuantConfig:
    group_size: int = 1
    iters: int = 200
    lr: float = 1e-4
    step_lr: float = 1e-2          # step-size learning rate, relative to its initial value
    calibration_size: int = 256
    compensate: bool = True        # False: every module sees full-precision inputs
    quantize_activations: bool = True

    def __post_init__(self):
        if self.iters < 0:
            raise ConfigError("iters must be >= 0")
        if self.lr <= 0 or self.step_lr < 0:
            raise ConfigError("learning rates must be positive")
        if self.calibration_size < 1:
            raise ConfigError("calibration_size must be >= 1")
        if not isinstance(self.group_size, int) or self.group_size < 1:
            raise ConfigError("group_size must be a positive int")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "QuantConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown quant config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModuleReport:
    module: str
    initial_err: float
    final_err: float
    iterations: int
    trace: list[float] = field(default_factory=list)


def report_csv(reports: list[ModuleReport]) -> str:
    lines = ["module,initial_err,final_err,iterations"]
    lines += [f"{r.module},{r.initial_err:.9g},{r.final_err:.9g},{r.iterations}" for r in reports]
    return "\n".join(lines) + "\n"


# -- simulated (fake-quant) model plumbing ----------------------------------

def _resolve(model: TransformerModel, name: str):
    """(owner, attribute) for a quantizable parameter name."""
    if name in TABLES:
        return model, name
    owner = model
    parts = name.split(".")
    for part in parts[:-1]:
        owner = owner[int(part)] if part.isdigit() else getattr(owner, part)
    return owner, parts[-1]


def _param(model, name) -> torch.nn.Parameter:
    owner, attr = _resolve(model, name)
    return getattr(owner, attr)


def _get_step(model, name):
    if name in TABLES:
        return model.table_steps.get(name)
    owner, _ = _resolve(model, name)
    return owner.step


def _set_step(model, name, step) -> None:
    if name in TABLES:
        if step is None:
            model.table_steps.pop(name, None)
        else:
            model.table_steps[name] = step
    else:
        owner, _ = _resolve(model, name)
        owner.step = step


def calibrate_activations(model: TransformerModel, ids, mask) -> dict[str, float]:
    """Per-Dense input scale ``max |x| / 127`` over the calibration set."""
    denses = model.dense_layers()
    for d in denses.values():
        d.observe, d.observed_max = True, 0.0
    try:
        with torch.no_grad():
            run_forward(model, ids, mask)
    finally:
        for d in denses.values():
            d.observe = False
    return {name: float(np.float32(max(d.observed_max / QMAX, STEP_FLOOR))) for name, d in denses.items()}


def _layer_error(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance per valid position, averaged over positions."""
    m = mask.to(pred.dtype).unsqueeze(-1)
    return (((pred - target) ** 2) * m).sum() / m.sum().clamp_min(1.0)


class _Objective:
    """Reconstruction error of one module given cached inputs and targets."""

    def __init__(self, model, module: QuantModule, inputs, targets, ids, mask):
        self.model, self.module = model, module
        self.inputs, self.targets = inputs, targets
        self.ids, self.mask = ids, mask
        self.bias = model.mask_bias(mask)

    def __call__(self) -> torch.Tensor:
        m, mod = self.model, self.module
        if mod.kind == "embeddings":
            return _layer_error(m.embed(self.ids), self.targets[0], self.mask)
        if mod.kind == "head":
            diff = m.head(self.inputs) - self.targets[0]
            return (diff ** 2).sum(-1).mean()
        x, loss = self.inputs, 0.0
        for k, layer in enumerate(range(*mod.span)):
            x, _ = m.layer_block(layer)(x, self.bias)
            loss = loss + _layer_error(x, self.targets[k], self.mask)
        return loss


def calibrate_module(model: TransformerModel, module: QuantModule, objective, iters: int = 200,
                     lr: float = 1e-4, step_lr: float = 1e-2) -> list[float]:
    """Minimise ``objective()`` over the module's weights and step sizes.

    Steps start at :func:`init_step`.  An iteration whose error rises is undone
    and the learning rates are halved, so the returned trace never increases.
    On exit the weights are replaced by their dequantized values and the steps
    are fixed (float32).  Returns the per-iteration error, starting with the
    round-to-nearest error.
    """
    if iters < 0:
        raise ConfigError("iters must be >= 0")
    weights = {n: _param(model, n) for n in module.params}
    steps = {}
    for n, w in weights.items():
        steps[n] = torch.tensor(init_step(w), dtype=w.dtype, requires_grad=True)
        _set_step(model, n, steps[n])
    start = {n: w.detach().clone() for n, w in weights.items()}
    start_steps = {n: s.detach().clone() for n, s in steps.items()}

    with torch.no_grad():
        best = float(objective())
    trace = [best]
    if iters and weights:
        frozen = [p for p in model.parameters() if p.requires_grad]
        for p in frozen:
            p.requires_grad_(False)
        for w in weights.values():
            w.requires_grad_(True)
        groups = [{"params": list(weights.values()), "lr": lr}]
        groups += [{"params": [s], "lr": step_lr * s.item()} for s in steps.values()]
        opt = torch.optim.Adam(groups)
        snapshot = _snapshot(weights, steps)
        try:
            for _ in range(iters):
                opt.zero_grad()
                loss = objective()
                if not torch.isfinite(loss):
                    raise FloatingPointError
                loss.backward()
                opt.step()
                with torch.no_grad():
                    for s in steps.values():
                        s.clamp_(min=STEP_FLOOR)
                    value = float(objective())
                if not math.isfinite(value):
                    raise FloatingPointError
                if value <= best:
                    best = value
                    snapshot = _snapshot(weights, steps)
                else:
                    _restore(weights, steps, snapshot)
                    for g in opt.param_groups:
                        g["lr"] *= 0.5
                trace.append(best)
        except FloatingPointError:
            warnings.warn(f"non-finite error while calibrating {module.name}; reverting to round-to-nearest",
                          RuntimeWarning, stacklevel=2)
            _restore(weights, steps, (start, start_steps))
            trace.append(trace[0])
        finally:
            for w in weights.values():
                w.requires_grad_(False)
            for p in frozen:
                p.requires_grad_(True)

    _bake(model, weights, steps)
    with torch.no_grad():
        final = float(objective())
    if final > trace[0] + 1e-9:
        # float32 rounding of tuned steps can cost more than was gained
        _restore(weights, steps, (start, start_steps))
        _bake(model, weights, steps)
        trace.append(trace[0])
    return trace


def _snapshot(weights, steps):
    return ({n: w.detach().clone() for n, w in weights.items()},
            {n: s.detach().clone() for n, s in steps.items()})


def _restore(weights, steps, snap) -> None:
    ws, ss = snap
    with torch.no_grad():
        for n in weights:
            weights[n].copy_(ws[n])
            steps[n].copy_(ss[n])


def _bake(model, weights, steps) -> None:
    """Fix steps at float32 and store the dequantized weights in place."""
    with torch.no_grad():
        for n, w in weights.items():
            s = float(np.float32(float(steps[n])))
            if not s > 0:
                s = init_step(w)
            w.copy_(dequantize(quantize_project(w, s), s))
            _set_step(model, n, torch.tensor(s, dtype=w.dtype))


# -- whole-model driver ---------------------------------------------------------

def _detach_copy(model: TransformerModel) -> TransformerModel:
    out = copy.deepcopy(model)
    out.eval()
    for p in out.parameters():
        p.requires_grad_(True)
    return out


def quantize_model(model: TransformerModel, calib_ids, calib_mask, config: QuantConfig | None = None,
                   parts: QuantPartition | None = None) -> tuple["QuantizedModel", list[ModuleReport]]:
    """Quantize every module in forward order.

    With ``config.compensate`` (the default) module n sees inputs produced by
    the already-quantized modules before it; targets always come from the
    full-precision model.
    """
    config = config or QuantConfig()
    calib_ids = torch.as_tensor(calib_ids, dtype=torch.long)
    calib_mask = torch.as_tensor(calib_mask, dtype=torch.long)
    if calib_ids.shape[0] == 0:
        raise ConfigError("calibration set is empty")
    parts = parts or partition(model, config.group_size)
    ref = _detach_copy(model)
    sim = _detach_copy(model)
    with torch.no_grad():
        fp = run_forward(ref, calib_ids, calib_mask, capture_layers=True)
    fp_layers = [t.detach() for t in fp.layer_outputs]   # embeddings, then layer 1..L
    fp_logits = fp.logits.detach()

    if config.quantize_activations:
        for name, scale in calibrate_activations(ref, calib_ids, calib_mask).items():
            sim.dense_layers()[name].act_scale = scale

    bias = sim.mask_bias(calib_mask)
    reports = []
    for module in parts:
        inputs = None
        if module.kind != "embeddings":
            start = module.span[0]
            if config.compensate:
                with torch.no_grad():
                    x = sim.embed(calib_ids)
                    for layer in range(start):
                        x, _ = sim.layer_block(layer)(x, bias)
                inputs = x.detach()
            else:
                inputs = fp_layers[start]
        if module.kind == "embeddings":
            targets = [fp_layers[0]]
        elif module.kind == "head":
            targets = [fp_logits]
        else:
            targets = fp_layers[module.span[0] + 1: module.span[1] + 1]
        objective = _Objective(sim, module, inputs, targets, calib_ids, calib_mask)
        trace = calibrate_module(sim, module, objective, config.iters, config.lr, config.step_lr)
        with torch.no_grad():
            final = float(objective())
        reports.append(ModuleReport(module.name, trace[0], final, len(trace) - 1, trace))
    return QuantizedModel.from_simulated(sim, parts), reports


# -- quantized model container ------------------------------------------------------

class QuantizedModel:
    """Int8 weight codes with float32 steps, float32 residual parameters and
    per-site activation scales, plus enough structure to rebuild the model."""

    def __init__(self, spec: ModelSpec, codes: dict[str, np.ndarray], steps: dict[str, float],
                 residual: dict[str, np.ndarray], act_scales: dict[str, float],
                 projector_dim: int | None = None, head_uses_projector: bool = False, head_dim: int | None = None):
        self.spec = spec
        self.codes = {n: np.asarray(c, dtype=np.int8) for n, c in codes.items()}
        self.steps = {n: float(np.float32(s)) for n, s in steps.items()}
        self.residual = {n: np.asarray(r, dtype=np.float32) for n, r in residual.items()}
        self.act_scales = {n: float(np.float32(s)) for n, s in act_scales.items()}
        self.projector_dim = projector_dim
        self.head_uses_projector = head_uses_projector
        self.head_dim = head_dim or spec.hidden_dim
        for n, c in self.codes.items():
            if c.size and int(c.min()) < -QMAX:
                raise OverflowContractError(f"{n} holds code {int(c.min())} outside [-127, 127]")
            if n not in self.steps or not self.steps[n] > 0:
                raise StepError(f"{n} lacks a positive step size")
        self.check_accumulators()

    def check_accumulators(self) -> None:
        """Every integer dot product must stay below 2**31 in the worst case."""
        for n, c in self.codes.items():
            if n in TABLES:
                continue
            worst = c.shape[0] * QMAX * QMAX
            if worst > ACC_LIMIT:
                raise OverflowContractError(f"{n}: inner dimension {c.shape[0]} can overflow int32")

    @classmethod
    def from_simulated(cls, sim: TransformerModel, parts: QuantPartition | None = None) -> "QuantizedModel":
        names = quantizable_names(sim)
        codes, steps = {}, {}
        for n in names:
            step = _get_step(sim, n)
            w = _param(sim, n).detach()
            s = float(step) if step is not None else init_step(w)
            codes[n] = quantize_project(w, s).numpy()
            steps[n] = s
        residual = {n: p.detach().cpu().numpy() for n, p in sim.named_parameters() if n not in codes}
        act = {n: d.act_scale for n, d in sim.dense_layers().items() if d.act_scale is not None}
        proj = sim.projector_shape[1] if sim.projector is not None else None
        return cls(sim.spec, codes, steps, residual, act, proj, sim.head_uses_projector, sim.head_dim)

    def dequantized(self, name: str) -> np.ndarray:
        return self.codes[name].astype(np.float32) * np.float32(self.steps[name])

    def to_simulated(self) -> TransformerModel:
        """Float model whose forward pass reproduces the quantized arithmetic."""
        from .model import attach_projector

        model = build_model(self.spec)
        if self.head_dim != self.spec.hidden_dim:
            model.pooler = Dense(self.head_dim, self.head_dim)
            model.classifier = Dense(self.head_dim, self.spec.num_classes)
        if self.projector_dim is not None:
            attach_projector(model, self.projector_dim, self.head_uses_projector)
        dtype = torch.get_default_dtype()
        with torch.no_grad():
            for n, p in model.named_parameters():
                src = self.dequantized(n) if n in self.codes else self.residual[n]
                if tuple(src.shape) != tuple(p.shape):
                    raise StepError(f"{n}: stored shape {src.shape} does not match {tuple(p.shape)}")
                p.copy_(torch.as_tensor(src, dtype=dtype))
        for n in self.codes:
            _set_step(model, n, torch.tensor(self.steps[n], dtype=dtype))
        dense = model.dense_layers()
        for n, s in self.act_scales.items():
            dense[n].act_scale = s
            dense[n].factored = True
        model.eval()
        return model

    def storage_report(self) -> StorageReport:
        breakdown = {"embeddings": 0, "blocks": 0, "head": 0}
        for n, c in self.codes.items():
            breakdown[component_of(n)] += c.size + BYTES_FP32
        for n, r in self.residual.items():
            breakdown[component_of(n)] += r.size * BYTES_FP32
        return StorageReport(sum(breakdown.values()), breakdown, "int8")

    def quantized_forward(self, token_ids, mask=None) -> np.ndarray:
        from .integer import quantized_forward

        return quantized_forward(self, token_ids, mask)

    def __eq__(self, other):
        if not isinstance(other, QuantizedModel):
            return NotImplemented
        return (self.spec == other.spec and self.steps == other.steps and self.act_scales == other.act_scales
                and self.codes.keys() == other.codes.keys()
                and all(np.array_equal(self.codes[n], other.codes[n]) for n in self.codes)
                and self.residual.keys() == other.residual.keys()
                and all(np.array_equal(self.residual[n], other.residual[n]) for n in self.residual)
                and (self.projector_dim, self.head_uses_projector, self.head_dim)
                == (other.projector_dim, other.head_uses_projector, other.head_dim))


def naive_quantize(model: TransformerModel, calib_ids, calib_mask,
                   quantize_activations: bool = True) -> QuantizedModel:
    """Round-to-nearest baseline: init_step for every matrix, no calibration."""
    cfg = QuantConfig(iters=0, quantize_activations=quantize_activations)
    qmodel, _ = quantize_model(model, calib_ids, calib_mask, cfg)
    return qmodel
