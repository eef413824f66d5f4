"""Staged compression pipeline: data, teacher, distilled students, pruning,
quantization, evaluation and the combined report.

Every stage reads its inputs from, and writes its outputs to, one output
directory.  Outputs are written atomically, so re-running a stage with the
same configuration reproduces the same bytes.
"""
from __future__ import annotations

import contextlib
import json
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .checkpoint import checkpoint_meta, load_checkpoint, save_checkpoint
from .data import Dataset, SyntheticTask, atomic_write_text, gen_data, read_tsv, to_batch_tensors
from .distill import (DistillPlan, evaluate, finetune_teacher, pretrain_student_mlm,
                      prepare_student, run_distillation)
from .errors import ConfigError, DependencyError
from .model import ModelSpec, build_model, compression_ratio, count_ops, run_forward, storage_bytes
from .numerics import precision
from .quant import QuantConfig, quantize_model, report_csv
from .vocab import PruneRemap, Vocabulary, apply_prune, score_importance, select_topk

STAGES = ("gen-data", "pretrain", "finetune-teacher", "distill", "prune", "quantize", "eval", "report")
VARIANTS = ("kd", "pi-kd", "cross-kd", "cross-kd-tp", "ei-bert")
REPORT_HEADER = "variant,accuracy,bytes,precision,compression_ratio,ops,ops_label,ops_ratio"


def _default_teacher() -> dict:
    return dict(max_seq_len=32, embed_dim=128, hidden_dim=128, intermediate_dim=512, num_layers=4,
                num_heads=4, share_layers=False, factorized_embedding=False)


def _default_student() -> dict:
    return dict(max_seq_len=32, embed_dim=64, hidden_dim=64, intermediate_dim=256, num_layers=2,
                num_heads=4, share_layers=True, factorized_embedding=True)


def _default_plan() -> dict:
    return dict(teacher_lr=1e-5, student_lr=1e-3, beta_mse=1.0, beta_kl=1.0, temperature=1.0,
                steps=313, batch_size=32)


@dataclass
class PipelineConfig:
    """Everything one pipeline run needs, as one JSON document.

    Model specs omit ``vocab_size``, ``num_classes`` and ``seed``; they come
    from ``task`` and ``seed``.  ``distill`` omits ``mode`` and ``seed`` for
    the same reason.
    """

    seed: int = 0
    precision: int = 32
    task: dict = field(default_factory=dict)
    n_train: int = 10000
    n_dev: int = 1000
    n_test: int = 1000
    teacher: dict = field(default_factory=_default_teacher)
    student: dict = field(default_factory=_default_student)
    teacher_steps: int = 939
    teacher_lr: float = 1e-3
    teacher_batch_size: int = 32
    pretrain_steps: int = 0
    pretrain_lr: float = 1e-3
    distill: dict = field(default_factory=_default_plan)
    prune_fraction: float = 0.5
    importance_convention: str = "received"
    recovery_steps: int = 200
    recovery_lr: float = 1e-4
    quant: dict = field(default_factory=dict)
    stage_order: str = "default"

    def __post_init__(self):
        self.validate()

    # -- schema ----------------------------------------------------------
    def validate(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        for name in ("n_train", "n_dev", "n_test", "teacher_batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("teacher_steps", "pretrain_steps", "recovery_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 < self.prune_fraction <= 1:
            raise ConfigError("prune_fraction must lie in (0, 1]")
        if self.importance_convention not in ("received", "sent"):
            raise ConfigError("importance_convention must be 'received' or 'sent'")
        if self.stage_order not in ("default", "paper"):
            raise ConfigError("stage_order must be 'default' or 'paper'")
        for name in ("teacher", "student"):
            bad = {"vocab_size", "num_classes", "seed"} & set(getattr(self, name))
            if bad:
                raise ConfigError(f"{name} spec must not set {sorted(bad)}; they derive from task and seed")
        bad = {"mode", "seed"} & set(self.distill)
        if bad:
            raise ConfigError(f"distill must not set {sorted(bad)}")
        # build every nested object once so their own checks run now
        self.task_spec()
        self.teacher_spec()
        self.student_spec()
        for mode in ("kd", "pi-kd", "cross-kd"):
            self.plan(mode)
        self.quant_config()

    def task_spec(self) -> SyntheticTask:
        d = {"seed": self.seed % 2**32, **self.task}
        return _construct(SyntheticTask, d, "task")

    def _model_spec(self, d: dict, seed: int) -> ModelSpec:
        task = self.task_spec()
        full = {**d, "vocab_size": task.vocab_size, "num_classes": task.num_classes, "seed": seed}
        return _construct(ModelSpec, full, "model spec")

    def teacher_spec(self) -> ModelSpec:
        return self._model_spec(self.teacher, self.seed % 2**32)

    def student_spec(self) -> ModelSpec:
        return self._model_spec(self.student, (self.seed + 1) % 2**32)

    def plan(self, mode: str) -> DistillPlan:
        return _construct(DistillPlan, {**self.distill, "mode": mode, "seed": self.seed % 2**32}, "distill")

    def quant_config(self) -> QuantConfig:
        return _construct(QuantConfig, self.quant, "quant")

    def prune_k(self) -> int:
        return max(4, int(round(self.prune_fraction * self.task_spec().vocab_size)))

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def replace(self, **changes) -> "PipelineConfig":
        return PipelineConfig.from_dict({**self.to_dict(), **changes})


def _construct(cls, d: dict, what: str):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    if cls is DistillPlan and "adam_betas" in d:
        d = {**d, "adam_betas": tuple(d["adam_betas"])}
    try:
        return cls(**d)
    except ConfigError:
        raise
    except Exception as exc:  # SpecError, TaskError, TypeError from the nested schema
        raise ConfigError(f"invalid {what}: {exc}") from exc


# -- output directory layout ---------------------------------------------------------

class Workspace:
    """Paths inside one pipeline output directory."""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def data(self) -> Path:
        return self.root / "data"

    def split(self, name: str) -> Path:
        return self.data / f"{name}.tsv"

    def checkpoint(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.eibt"

    def metrics(self, name: str) -> Path:
        return self.root / "metrics" / f"{name}.json"

    def history(self, name: str) -> Path:
        return self.root / "histories" / f"{name}.csv"

    @property
    def lock(self) -> Path:
        return self.root / ".eibert.lock"


@contextlib.contextmanager
def output_lock(ws: Workspace):
    """Advisory lock: one pipeline process per output directory."""
    ws.root.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(ws.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        holder = ws.lock.read_text().strip() or "?"
        raise ConfigError(f"{ws.root} is in use by process {holder} (remove {ws.lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            ws.lock.unlink()


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing {path.name}: run the '{stage}' stage first")
    return path


def _write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_split(ws: Workspace, name: str) -> Dataset:
    vocab = Vocabulary.load(_require(ws.data / "vocab.txt", "gen-data"))
    return read_tsv(_require(ws.split(name), "gen-data"), vocab)


def _id_map(meta: dict):
    remap = PruneRemap.from_meta(meta)
    return None if remap is None else remap.id_map()


# -- stages ----------------------------------------------------------------------

def stage_gen_data(cfg: PipelineConfig, ws: Workspace) -> dict:
    paths = gen_data(cfg.task_spec(), cfg.n_train, cfg.n_dev, cfg.n_test, ws.data)
    train = _load_split(ws, "train")
    freq = np.bincount(train.labels, minlength=cfg.task_spec().num_classes) / len(train)
    return {"stage": "gen-data", "files": sorted(p.name for p in paths.values()),
            "label_frequencies": [round(float(f), 6) for f in freq]}


def stage_pretrain(cfg: PipelineConfig, ws: Workspace) -> dict:
    train = _load_split(ws, "train")
    student = build_model(cfg.student_spec())
    steps = cfg.pretrain_steps
    losses = []
    if steps:
        _, losses = pretrain_student_mlm(student, train.sequences, steps, seed=cfg.seed % 2**32,
                                         lr=cfg.pretrain_lr)
    save_checkpoint(student, ws.checkpoint("student-init"), {"stage": "pretrain", "steps": steps})
    return {"stage": "pretrain", "steps": steps, "final_loss": losses[-1] if losses else None}


def stage_finetune_teacher(cfg: PipelineConfig, ws: Workspace) -> dict:
    train, dev = _load_split(ws, "train"), _load_split(ws, "dev")
    teacher = build_model(cfg.teacher_spec())
    _, history = finetune_teacher(teacher, train, cfg.teacher_steps, cfg.teacher_lr, seed=cfg.seed % 2**32,
                                  batch_size=cfg.teacher_batch_size)
    path = save_checkpoint(teacher, ws.checkpoint("teacher"), {"stage": "finetune-teacher"})
    atomic_write_text(ws.history("teacher"), history.to_csv(include_seconds=False))
    # score the stored model so later evaluations of the checkpoint agree exactly
    stored = load_checkpoint(path)
    return {"stage": "finetune-teacher", "dev_accuracy": evaluate(stored, dev)}


def _student_start(cfg: PipelineConfig, ws: Workspace, name: str = "student-init"):
    path = ws.checkpoint(name)
    if not path.exists() and name == "student-init":
        # pretraining is optional: fall back to a fresh initialisation
        return build_model(cfg.student_spec()), {}
    return load_checkpoint(_require(path, "prune" if name != "student-init" else "pretrain")), checkpoint_meta(path)


def stage_distill(cfg: PipelineConfig, ws: Workspace, mode: str = "cross-kd", pruned: bool = False) -> dict:
    """Distil one student.  ``pruned`` (paper stage order) starts from the
    pruned initial student and writes the ``cross-kd-tp`` variant."""
    train, dev = _load_split(ws, "train"), _load_split(ws, "dev")
    teacher = load_checkpoint(_require(ws.checkpoint("teacher"), "finetune-teacher"))
    base, meta = _student_start(cfg, ws, "student-init-pruned" if pruned else "student-init")
    id_map = _id_map(meta)
    student = prepare_student(teacher, base, mode)
    result = run_distillation(teacher, student, train, cfg.plan(mode), eval_set=dev, id_map=id_map)
    name = "cross-kd-tp" if pruned else mode
    out_meta = {"stage": "distill", "mode": mode}
    if id_map is not None:
        out_meta.update(PruneRemap.from_meta(meta).to_meta())
    path = save_checkpoint(result.student, ws.checkpoint(name), out_meta)
    atomic_write_text(ws.history(name), result.history.to_csv(include_seconds=False))
    stored = load_checkpoint(path)
    return {"stage": "distill", "variant": name, "dev_accuracy": evaluate(stored, dev, id_map)}


def stage_prune(cfg: PipelineConfig, ws: Workspace) -> dict:
    """Score importance with the student, keep the top k tokens.

    Default order prunes the distilled CrossKD student and fine-tunes it
    briefly; paper order prunes the initial student before distillation.
    """
    train, dev = _load_split(ws, "train"), _load_split(ws, "dev")
    if cfg.stage_order == "paper":
        source, _ = _student_start(cfg, ws)
        target = "student-init-pruned"
    else:
        source = load_checkpoint(_require(ws.checkpoint("cross-kd"), "distill"))
        target = "cross-kd-tp"
    table = score_importance(source, train.sequences, cfg.importance_convention)
    remap = select_topk(table, cfg.prune_k())
    vocab = Vocabulary.load(ws.data / "vocab.txt")
    table.save_tsv(ws.root / "importance.tsv", vocab)
    pruned = apply_prune(source, remap)
    recovery = 0
    if cfg.stage_order == "default" and cfg.recovery_steps:
        recovery = cfg.recovery_steps
        plan = cfg.plan("cross-kd")
        finetune_teacher(pruned, train, recovery, cfg.recovery_lr, seed=cfg.seed % 2**32,
                         batch_size=plan.batch_size, id_map=remap.id_map())
    meta = {"stage": "prune", "k": remap.k, "recovery_steps": recovery, **remap.to_meta()}
    path = save_checkpoint(pruned, ws.checkpoint(target), meta)
    stored = load_checkpoint(path)
    return {"stage": "prune", "k": remap.k, "recovery_steps": recovery,
            "dev_accuracy": evaluate(stored, dev, remap.id_map())}


def stage_quantize(cfg: PipelineConfig, ws: Workspace) -> dict:
    train, dev = _load_split(ws, "train"), _load_split(ws, "dev")
    path = _require(ws.checkpoint("cross-kd-tp"), "prune" if cfg.stage_order == "default" else "distill")
    model, meta = load_checkpoint(path), checkpoint_meta(path)
    qcfg = cfg.quant_config()
    remap = PruneRemap.from_meta(meta)
    calib = train.sequences[: qcfg.calibration_size]
    if remap is not None:
        calib = remap.transform(calib)
    ids, mask = to_batch_tensors(calib, model.spec.max_seq_len)
    qmodel, reports = quantize_model(model, ids, mask, qcfg)
    out_meta = {"stage": "quantize"}
    if remap is not None:
        out_meta.update(remap.to_meta())
    save_checkpoint(qmodel, ws.checkpoint("ei-bert"), out_meta)
    atomic_write_text(ws.root / "quant_report.csv", report_csv(reports))
    return {"stage": "quantize", "dev_accuracy": _accuracy(qmodel, dev, remap),
            "modules": [{"module": r.module, "initial_err": r.initial_err, "final_err": r.final_err}
                        for r in reports]}


def _accuracy(model, dataset: Dataset, remap: PruneRemap | None) -> float:
    seqs = dataset.sequences if remap is None else remap.transform(dataset.sequences)
    if hasattr(model, "quantized_forward"):
        preds = []
        for start in range(0, len(seqs), 256):
            ids, mask = to_batch_tensors(seqs[start:start + 256], model.spec.max_seq_len)
            preds.append(model.quantized_forward(ids.numpy(), mask.numpy()).argmax(1))
        return float((np.concatenate(preds) == dataset.labels).mean())
    return evaluate(model, Dataset(seqs, dataset.labels))


def _available(ws: Workspace) -> list[str]:
    return [n for n in ("teacher",) + VARIANTS if ws.checkpoint(n).exists()]


def stage_eval(cfg: PipelineConfig, ws: Workspace) -> dict:
    test = _load_split(ws, "test")
    names = _available(ws)
    if not names:
        raise DependencyError("no checkpoints to evaluate: run 'finetune-teacher' first")
    out = {}
    for name in names:
        path = ws.checkpoint(name)
        out[name] = _accuracy(load_checkpoint(path), test, PruneRemap.from_meta(checkpoint_meta(path)))
    return {"stage": "eval", "test_accuracy": out}


@dataclass
class ReportRow:
    variant: str
    accuracy: float
    bytes: int
    precision: str
    compression_ratio: float
    ops: int
    ops_label: str
    ops_ratio: float

    def csv(self) -> str:
        return (f"{self.variant},{self.accuracy:.4f},{self.bytes},{self.precision},"
                f"{self.compression_ratio:.2f},{self.ops},{self.ops_label},{self.ops_ratio:.2f}")


def build_report(ws: Workspace) -> list[ReportRow]:
    """Rows for every checkpoint present; ratios are taken against the teacher
    and recomputed from raw byte and op counts."""
    test = _load_split(ws, "test")
    teacher_path = _require(ws.checkpoint("teacher"), "finetune-teacher")
    teacher = load_checkpoint(teacher_path)
    seq_len = min(teacher.spec.max_seq_len, max(len(s) for s in test.sequences) + 1)
    t_bytes = storage_bytes(teacher).total
    t_ops = count_ops(teacher, seq_len).total
    rows = []
    for name in _available(ws):
        path = ws.checkpoint(name)
        model = teacher if name == "teacher" else load_checkpoint(path)
        quantized = hasattr(model, "quantized_forward")
        size = storage_bytes(model)
        ops = count_ops(model, seq_len, quantized=quantized)
        acc = _accuracy(model, test, PruneRemap.from_meta(checkpoint_meta(path)))
        rows.append(ReportRow(name, acc, size.total, size.precision, compression_ratio(t_bytes, size.total),
                              ops.total, ops.label, t_ops / ops.total))
    return rows


def format_table(rows: list[ReportRow]) -> str:
    header = ["variant", "accuracy", "bytes", "precision", "ratio", "ops", "label", "ops ratio"]
    body = [[r.variant, f"{r.accuracy:.4f}", str(r.bytes), r.precision, f"{r.compression_ratio:.2f}x",
             str(r.ops), r.ops_label, f"{r.ops_ratio:.2f}x"] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
              for row in body]
    return "\n".join(lines) + "\n"


def benchmark_forward(ws: Workspace, repeats: int = 5) -> dict[str, float]:
    """Median milliseconds per test-batch forward pass for every checkpoint.

    Float models run the float path and the quantized model runs the integer
    path.  Timings are not reproducible, so they go to their own file.
    """
    test = _load_split(ws, "test")
    out = {}
    for name in _available(ws):
        path = ws.checkpoint(name)
        model = load_checkpoint(path)
        remap = PruneRemap.from_meta(checkpoint_meta(path))
        seqs = test.sequences[:256] if remap is None else remap.transform(test.sequences[:256])
        ids, mask = to_batch_tensors(seqs, model.spec.max_seq_len)
        if hasattr(model, "quantized_forward"):
            def run():
                model.quantized_forward(ids.numpy(), mask.numpy())
        else:
            def run():
                with torch.no_grad():
                    run_forward(model, ids, mask)
        times = []
        for _ in range(repeats):
            tick = time.perf_counter()
            run()
            times.append(time.perf_counter() - tick)
        out[name] = 1000 * float(np.median(times))
    return out


def stage_report(cfg: PipelineConfig, ws: Workspace) -> dict:
    rows = build_report(ws)
    atomic_write_text(ws.root / "report.csv", "\n".join([REPORT_HEADER] + [r.csv() for r in rows]) + "\n")
    atomic_write_text(ws.root / "report.txt", format_table(rows))
    bench = benchmark_forward(ws)
    atomic_write_text(ws.root / "benchmark.csv",
                      "variant,ms_per_batch\n" + "".join(f"{k},{v:.3f}\n" for k, v in bench.items()))
    return {"stage": "report", "rows": [asdict(r) for r in rows]}


_RUNNERS = {
    "gen-data": stage_gen_data,
    "pretrain": stage_pretrain,
    "finetune-teacher": stage_finetune_teacher,
    "prune": stage_prune,
    "quantize": stage_quantize,
    "eval": stage_eval,
    "report": stage_report,
}


def apply_thread_limit() -> None:
    value = os.environ.get("EIB_THREADS")
    if value:
        try:
            n = int(value)
        except ValueError:
            raise ConfigError(f"EIB_THREADS must be a positive integer, got {value!r}") from None
        if n < 1:
            raise ConfigError("EIB_THREADS must be >= 1")
        torch.set_num_threads(n)


def run_stage(cfg: PipelineConfig, stage: str, out_dir, mode: str = "cross-kd") -> dict:
    """Run one stage and record its metrics fragment; returns the fragment."""
    ws = Workspace(out_dir)
    if stage == "distill":
        fragment_name = f"distill-{mode}"
    elif stage in _RUNNERS:
        fragment_name = stage
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    with precision(cfg.precision):
        tick = time.perf_counter()
        if stage == "distill":
            fragment = stage_distill(cfg, ws, mode)
        else:
            fragment = _RUNNERS[stage](cfg, ws)
        elapsed = time.perf_counter() - tick
    _write_json(ws.metrics(fragment_name), fragment)
    _record_time(ws, fragment_name, elapsed)
    return fragment


def _record_time(ws: Workspace, name: str, seconds: float) -> None:
    # wall-clock lives apart from the reproducible artifacts
    path = ws.root / "timings.csv"
    lines = path.read_text().splitlines()[1:] if path.exists() else []
    lines = [l for l in lines if not l.startswith(f"{name},")] + [f"{name},{seconds:.3f}"]
    atomic_write_text(path, "\n".join(["stage,seconds"] + lines) + "\n")


def run_all(cfg: PipelineConfig, out_dir) -> list[dict]:
    """Every stage in order, producing all five ladder variants and the report."""
    ws = Workspace(out_dir)
    atomic_write_text(ws.root / "config.json", cfg.to_json())
    fragments = [run_stage(cfg, s, out_dir) for s in ("gen-data", "pretrain", "finetune-teacher")]
    for mode in ("kd", "pi-kd", "cross-kd"):
        fragments.append(run_stage(cfg, "distill", out_dir, mode))
    if cfg.stage_order == "paper":
        fragments.append(run_stage(cfg, "prune", out_dir))
        with precision(cfg.precision):
            tick = time.perf_counter()
            frag = stage_distill(cfg, ws, "cross-kd", pruned=True)
        _write_json(ws.metrics("distill-cross-kd-tp"), frag)
        _record_time(ws, "distill-cross-kd-tp", time.perf_counter() - tick)
        fragments.append(frag)
    else:
        fragments.append(run_stage(cfg, "prune", out_dir))
    for stage in ("quantize", "eval", "report"):
        fragments.append(run_stage(cfg, stage, out_dir))
    return fragments
