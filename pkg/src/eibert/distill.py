"""Teacher fine-tuning, masked-token pretraining and cross-distillation.

Both sides of the interplay share one loss form::

    L = L_task + beta_mse * MSE(h_t, P(h_s)) + beta_kl * KL(p_t || p_s)

where ``h`` is the masked mean of the last hidden layer, ``P`` the student's
projector and ``p = softmax(logits / T)``.  The teacher step differentiates
it with respect to the teacher (lr ``teacher_lr``), the student step with
respect to the student (lr ``student_lr``); the other side is a constant.
Gradients are not rescaled by ``T**2``.
"""
from __future__ import annotations

import copy
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np
import torch

from .data import Dataset, to_batch_tensors
from .errors import AlignmentError, ConfigError, CorpusError, IntegrationError, TrainingError
from .model import TransformerModel, attach_projector, integrate_head, run_forward
from .numerics import cross_entropy, kl_divergence, mse, softmax_rows
from .vocab import CLS_ID, MASK_ID, N_RESERVED, PAD_ID

MODES = ("kd", "pi-kd", "cross-kd")
HISTORY_HEADER = "epoch,teacher_loss,student_loss,student_task_loss,eval_acc,seconds"


@dataclass(frozen=True)
class DistillPlan:
    mode: str = "cross-kd"
    teacher_lr: float = 5e-7
    student_lr: float = 1e-4
    beta_mse: float = 1.0
    beta_kl: float = 1.0
    temperature: float = 1.0
    steps: int = 1000
    batch_size: int = 16
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    freeze_head: bool = False
    teacher_first: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.teacher_lr < self.student_lr:
            raise ConfigError(f"teacher_lr ({self.teacher_lr}) must be below student_lr ({self.student_lr})")
        if self.teacher_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.beta_mse < 0 or self.beta_kl < 0:
            raise ConfigError("beta weights must be non-negative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.steps < 0 or self.batch_size <= 0:
            raise ConfigError("steps must be >= 0 and batch_size > 0")
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))

    def replace(self, **changes) -> "DistillPlan":
        return DistillPlan(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistillPlan":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown DistillPlan keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    teacher_loss: float
    student_loss: float
    student_task_loss: float
    eval_acc: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.epochs]

    def to_csv(self, include_seconds: bool = True) -> str:
        lines = [HISTORY_HEADER]
        for r in self.epochs:
            secs = f"{r.seconds:.3f}" if include_seconds else "0"
            lines.append(
                f"{r.epoch},{r.teacher_loss:.10g},{r.student_loss:.10g},"
                f"{r.student_task_loss:.10g},{r.eval_acc:.10g},{secs}"
            )
        return "\n".join(lines) + "\n"

    def save_csv(self, path) -> None:
        from .data import atomic_write_text

        atomic_write_text(path, self.to_csv())


@dataclass
class StepLosses:
    total: float
    task: float
    mse: float
    kl: float


class BatchSource:
    """Padded id/mask tensors for a dataset, sliced per batch to its longest row."""

    def __init__(self, dataset: Dataset, max_len: int):
        self.ids, self.mask = to_batch_tensors(dataset.sequences, max_len)
        self.labels = torch.as_tensor(dataset.labels, dtype=torch.long)
        self.lengths = self.mask.sum(1)

    def __len__(self):
        return len(self.labels)

    def batch(self, idx) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        idx = torch.as_tensor(idx, dtype=torch.long)
        width = int(self.lengths[idx].max())
        return self.ids[idx, :width], self.mask[idx, :width], self.labels[idx]


def batch_indices(n: int, batch_size: int, seed: int) -> Iterator[tuple[int, np.ndarray]]:
    """Endless (epoch, indices) stream; each epoch is a fresh seeded permutation."""
    epoch = 0
    while True:
        order = np.random.default_rng([seed, epoch]).permutation(n)
        for start in range(0, n, batch_size):
            yield epoch, order[start:start + batch_size]
        epoch += 1


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def make_optimizer(model: TransformerModel, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                   freeze_head: bool = False) -> torch.optim.Adam:
    params = []
    for name, p in model.named_parameters():
        if freeze_head and name.startswith(("pooler.", "classifier.")):
            continue
        params.append(p)
    return torch.optim.Adam(params, lr=lr, betas=tuple(betas), eps=eps, weight_decay=0.0)


def _check_finite(value: float, what: str, model, history=None):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {what}", state=copy.deepcopy(model.state_dict()), history=history)


# -- evaluation ------------------------------------------------------------

def predict_logits(model: TransformerModel, dataset: Dataset, batch_size: int = 256,
                   id_map: torch.Tensor | None = None) -> torch.Tensor:
    source = BatchSource(dataset, model.spec.max_seq_len)
    out = []
    with torch.no_grad():
        for start in range(0, len(source), batch_size):
            ids, mask, _ = source.batch(np.arange(start, min(start + batch_size, len(source))))
            if id_map is not None:
                ids = id_map[ids]
            out.append(run_forward(model, ids, mask).logits)
    return torch.cat(out) if out else torch.zeros(0, model.spec.num_classes)


def evaluate(model: TransformerModel, dataset: Dataset, id_map: torch.Tensor | None = None) -> float:
    logits = predict_logits(model, dataset, id_map=id_map)
    return float((logits.argmax(1).numpy() == dataset.labels).mean())


def task_loss(model: TransformerModel, dataset: Dataset, id_map: torch.Tensor | None = None) -> float:
    logits = predict_logits(model, dataset, id_map=id_map)
    with torch.no_grad():
        return float(cross_entropy(logits, dataset.labels))


# -- plain fine-tuning -----------------------------------------------------

def finetune_teacher(model: TransformerModel, train: Dataset, steps: int, lr: float, seed: int = 0,
                     batch_size: int = 16, dev: Dataset | None = None, betas=(0.9, 0.999),
                     eps: float = 1e-8, id_map: torch.Tensor | None = None
                     ) -> tuple[TransformerModel, TrainHistory]:
    """Adam on cross-entropy, in place.  One history row per pass over ``train``.

    ``id_map`` rewrites batch ids first (used for pruned students).
    """
    source = BatchSource(train, model.spec.max_seq_len)
    optimizer = make_optimizer(model, lr, betas, eps)
    history = TrainHistory()
    per_epoch = steps_per_epoch(len(source), batch_size)
    stream = batch_indices(len(source), batch_size, seed)
    acc_loss, acc_n, correct, seen = 0.0, 0, 0, 0
    tick = time.perf_counter()
    last_good = copy.deepcopy(model.state_dict())
    for step in range(steps):
        epoch, idx = next(stream)
        ids, mask, y = source.batch(idx)
        if id_map is not None:
            ids = id_map[ids]
        logits = run_forward(model, ids, mask).logits
        loss = cross_entropy(logits, y)
        if not math.isfinite(loss.item()):
            raise TrainingError("non-finite loss during fine-tuning", state=last_good, history=history)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        acc_loss += loss.item()
        acc_n += 1
        correct += int((logits.detach().argmax(1) == y).sum())
        seen += len(y)
        if (step + 1) % per_epoch == 0 or step + 1 == steps:
            acc = evaluate(model, dev, id_map) if dev is not None else correct / seen
            mean = acc_loss / acc_n
            history.epochs.append(EpochRecord(epoch, mean, mean, mean, acc, time.perf_counter() - tick))
            acc_loss, acc_n, correct, seen = 0.0, 0, 0, 0
            tick = time.perf_counter()
            last_good = copy.deepcopy(model.state_dict())
    return model, history


# -- masked-token pretraining ----------------------------------------------

class _MaskedTokenHead(torch.nn.Module):
    """Transient prediction head tied to the student's token embeddings."""

    def __init__(self, model: TransformerModel):
        super().__init__()
        spec = model.spec
        self.transform = torch.nn.Linear(spec.hidden_dim, spec.embed_dim)
        self.norm = torch.nn.LayerNorm(spec.embed_dim, eps=spec.layer_norm_eps)
        self.bias = torch.nn.Parameter(torch.zeros(spec.vocab_size))
        gen = torch.Generator().manual_seed(spec.seed + 1)
        with torch.no_grad():
            torch.nn.init.trunc_normal_(self.transform.weight, std=spec.init_std, a=-2 * spec.init_std,
                                        b=2 * spec.init_std, generator=gen)
            self.transform.bias.zero_()

    def forward(self, hidden, embeddings):
        h = self.norm(torch.nn.functional.gelu(self.transform(hidden), approximate="tanh"))
        return h @ embeddings.T + self.bias


def mask_tokens(ids: torch.Tensor, mask: torch.Tensor, mask_prob: float, vocab_size: int,
                rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """BERT-style corruption: of the selected positions 80% [MASK], 10% random, 10% kept.

    Returns the corrupted ids and a boolean tensor of selected positions.
    """
    ids_np = ids.numpy()
    eligible = (mask.numpy() == 1) & (ids_np != CLS_ID) & (ids_np != PAD_ID)
    selected = eligible & (rng.random(ids_np.shape) < mask_prob)
    action = rng.random(ids_np.shape)
    random_ids = rng.integers(N_RESERVED, vocab_size, size=ids_np.shape)
    corrupted = ids_np.copy()
    corrupted[selected & (action < 0.8)] = MASK_ID
    swap = selected & (action >= 0.8) & (action < 0.9)
    corrupted[swap] = random_ids[swap]
    return torch.as_tensor(corrupted), torch.as_tensor(selected)


def masked_token_loss(model: TransformerModel, head: _MaskedTokenHead, ids, mask, corrupted, selected):
    trace = run_forward(model, corrupted, mask, capture_hidden=True)
    if not bool(selected.any()):
        return None
    logits = head(trace.hidden[selected], model.token_embeddings)
    return cross_entropy(logits, ids[selected])


def pretrain_student_mlm(student: TransformerModel, sentences, steps: int, mask_prob: float = 0.15,
                         seed: int = 0, lr: float = 1e-3, batch_size: int = 32
                         ) -> tuple[TransformerModel, list[float]]:
    """Masked-token prediction on unlabeled ``sentences``, in place.

    Steps whose batch has no selected position leave the student untouched.
    """
    if not 0.0 <= mask_prob < 1.0:
        raise ConfigError("mask_prob must lie in [0, 1)")
    sentences = list(sentences)
    if len(sentences) < batch_size:
        raise CorpusError(f"corpus has {len(sentences)} sentences, fewer than one batch ({batch_size})")
    if steps == 0:
        return student, []
    dataset = Dataset(sentences, np.zeros(len(sentences), dtype=np.int64))
    source = BatchSource(dataset, student.spec.max_seq_len)
    head = _MaskedTokenHead(student)
    params = [p for n, p in student.named_parameters() if not n.startswith(("pooler.", "classifier.", "projector."))]
    optimizer = torch.optim.Adam(params + list(head.parameters()), lr=lr)
    rng = np.random.default_rng([seed, 101])
    stream = batch_indices(len(source), batch_size, seed)
    losses = []
    for _ in range(steps):
        _, idx = next(stream)
        ids, mask, _ = source.batch(idx)
        corrupted, selected = mask_tokens(ids, mask, mask_prob, student.spec.vocab_size, rng)
        loss = masked_token_loss(student, head, ids, mask, corrupted, selected)
        if loss is None:
            losses.append(0.0)
            continue
        _check_finite(loss.item(), "masked-token loss", student)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
    return student, losses


# -- cross-distillation ----------------------------------------------------

def prepare_student(teacher: TransformerModel, student: TransformerModel, mode: str) -> TransformerModel:
    """Integrated head for ``pi-kd``/``cross-kd``; for ``kd`` the student keeps
    its own head and only gains a projector when widths differ."""
    if mode == "kd":
        out = copy.deepcopy(student)
        if out.spec.hidden_dim != teacher.spec.hidden_dim and out.projector is None:
            attach_projector(out, teacher.spec.hidden_dim, use_for_head=False)
        return out
    return integrate_head(teacher, student)


def distill_terms(teacher: TransformerModel, t_trace, student: TransformerModel, s_trace,
                  mask: torch.Tensor, temperature: float) -> tuple[torch.Tensor, torch.Tensor]:
    """(MSE on aligned hidden states, KL(teacher || student) on tempered logits)."""
    t_h = teacher.aligned_hidden(t_trace.hidden, mask)
    s_h = student.aligned_hidden(s_trace.hidden, mask)
    if t_h.shape != s_h.shape:
        raise AlignmentError(f"teacher hidden {tuple(t_h.shape)} vs projected student {tuple(s_h.shape)}")
    p_t = softmax_rows(t_trace.logits / temperature)
    p_s = softmax_rows(s_trace.logits / temperature)
    return mse(t_h, s_h), kl_divergence(p_t, p_s)


def compose_loss(task, mse_term, kl_term, plan: DistillPlan):
    loss = task
    if plan.beta_mse:
        loss = loss + plan.beta_mse * mse_term
    if plan.beta_kl:
        loss = loss + plan.beta_kl * kl_term
    return loss


def _student_ids(ids, id_map):
    return ids if id_map is None else id_map[ids]


def teacher_step(teacher: TransformerModel, student: TransformerModel, batch, plan: DistillPlan,
                 optimizer: torch.optim.Optimizer, id_map: torch.Tensor | None = None) -> StepLosses:
    """One Adam step on the teacher loss; the student is evaluated without gradients."""
    ids, mask, y = batch
    with torch.no_grad():
        s_trace = run_forward(student, _student_ids(ids, id_map), mask, capture_hidden=True)
    t_trace = run_forward(teacher, ids, mask, capture_hidden=True)
    task = cross_entropy(t_trace.logits, y)
    mse_term, kl_term = distill_terms(teacher, t_trace, student, s_trace, mask, plan.temperature)
    loss = compose_loss(task, mse_term, kl_term, plan)
    _check_finite(loss.item(), "teacher loss", teacher)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return StepLosses(loss.item(), task.item(), mse_term.item(), kl_term.item())


def student_step(teacher: TransformerModel, student: TransformerModel, batch, plan: DistillPlan,
                 optimizer: torch.optim.Optimizer, id_map: torch.Tensor | None = None
                 ) -> tuple[StepLosses, float, torch.Tensor]:
    """One Adam step on the student loss; the teacher is evaluated without gradients.

    Also returns the teacher loss value on the same batch (from the same
    terms) and the student's pre-step logits.
    """
    ids, mask, y = batch
    with torch.no_grad():
        t_trace = run_forward(teacher, ids, mask, capture_hidden=True)
        t_task = cross_entropy(t_trace.logits, y)
    s_trace = run_forward(student, _student_ids(ids, id_map), mask, capture_hidden=True)
    task = cross_entropy(s_trace.logits, y)
    mse_term, kl_term = distill_terms(teacher, t_trace, student, s_trace, mask, plan.temperature)
    loss = compose_loss(task, mse_term, kl_term, plan)
    _check_finite(loss.item(), "student loss", student)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    teacher_value = float(compose_loss(t_task, mse_term.detach(), kl_term.detach(), plan))
    return StepLosses(loss.item(), task.item(), mse_term.item(), kl_term.item()), teacher_value, s_trace.logits.detach()


@dataclass
class DistillResult:
    student: TransformerModel
    teacher: TransformerModel
    history: TrainHistory


def run_distillation(teacher: TransformerModel, student: TransformerModel, train: Dataset,
                     plan: DistillPlan, eval_set: Dataset | None = None,
                     id_map: torch.Tensor | None = None) -> DistillResult:
    """Alternate teacher/student updates per batch (``cross-kd``) or update the
    student alone against a frozen teacher (``kd``, ``pi-kd``).  Models are
    updated in place.  ``id_map`` rewrites ids for a pruned student.
    """
    if plan.mode != "kd" and student.head_dim != teacher.head_dim:
        raise IntegrationError(f"{plan.mode} needs an integrated head; call prepare_student first")
    history = TrainHistory()
    if plan.steps == 0:
        return DistillResult(student, teacher, history)
    source = BatchSource(train, teacher.spec.max_seq_len)
    s_opt = make_optimizer(student, plan.student_lr, plan.adam_betas, plan.adam_eps, plan.freeze_head)
    t_opt = None
    if plan.mode == "cross-kd":
        t_opt = make_optimizer(teacher, plan.teacher_lr, plan.adam_betas, plan.adam_eps)
    per_epoch = steps_per_epoch(len(source), plan.batch_size)
    stream = batch_indices(len(source), plan.batch_size, plan.seed)
    sums = np.zeros(3)
    n_steps = correct = seen = 0
    tick = time.perf_counter()
    snapshot = (copy.deepcopy(student.state_dict()), copy.deepcopy(teacher.state_dict()))
    for step in range(plan.steps):
        epoch, idx = next(stream)
        batch = source.batch(idx)
        try:
            t_loss = None
            if t_opt is not None and plan.teacher_first:
                t_loss = teacher_step(teacher, student, batch, plan, t_opt, id_map).total
            s_losses, t_value, s_logits = student_step(teacher, student, batch, plan, s_opt, id_map)
            if t_opt is not None and not plan.teacher_first:
                t_loss = teacher_step(teacher, student, batch, plan, t_opt, id_map).total
        except TrainingError as exc:
            raise TrainingError(str(exc), state=snapshot, history=history) from exc
        sums += (t_loss if t_loss is not None else t_value, s_losses.total, s_losses.task)
        n_steps += 1
        correct += int((s_logits.argmax(1) == batch[2]).sum())
        seen += len(batch[2])
        if (step + 1) % per_epoch == 0 or step + 1 == plan.steps:
            acc = evaluate(student, eval_set, id_map) if eval_set is not None else correct / seen
            means = sums / n_steps
            history.epochs.append(EpochRecord(epoch, float(means[0]), float(means[1]), float(means[2]),
                                              acc, time.perf_counter() - tick))
            sums[:] = 0
            n_steps = correct = seen = 0
            tick = time.perf_counter()
            snapshot = (copy.deepcopy(student.state_dict()), copy.deepcopy(teacher.state_dict()))
    return DistillResult(student, teacher, history)
