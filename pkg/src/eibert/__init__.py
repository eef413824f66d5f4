"""Compact transformer classifiers: cross-distillation, attention-based
vocabulary pruning and module-wise int8 quantization."""
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, SyntheticTask, gen_data, generate_splits
from .distill import (DistillPlan, evaluate, finetune_teacher, prepare_student, pretrain_student_mlm,
                      run_distillation, student_step, teacher_step)
from .estimators import (CrossDistillationClassifier, ModuleWiseQuantizer, TokenImportancePruner,
                         TransformerClassifier)
from .model import (ModelSpec, TransformerModel, build_model, compression_ratio, count_ops,
                    integrate_head, parameter_count, storage_bytes)
from .numerics import GradTape, backward, finite_diff_check, precision, set_precision
from .pipeline import PipelineConfig, run_all, run_stage
from .quant import QuantConfig, QuantizedModel, init_step, partition, quantize_model, quantize_project
from .vocab import Vocabulary, apply_prune, score_importance, select_topk

__version__ = "0.1.0"

__all__ = [
    "CrossDistillationClassifier", "Dataset", "DistillPlan", "GradTape", "ModelSpec", "ModuleWiseQuantizer",
    "PipelineConfig", "QuantConfig", "QuantizedModel", "SyntheticTask", "TokenImportancePruner",
    "TransformerClassifier", "TransformerModel", "Vocabulary", "apply_prune", "backward", "build_model",
    "compression_ratio", "count_ops", "evaluate", "finetune_teacher", "finite_diff_check", "gen_data",
    "generate_splits", "init_step", "integrate_head", "load_checkpoint", "parameter_count", "partition",
    "precision", "prepare_student", "pretrain_student_mlm", "quantize_model", "quantize_project",
    "run_all", "run_distillation", "run_stage", "save_checkpoint", "score_importance", "select_topk",
    "set_precision", "storage_bytes", "student_step", "teacher_step",
]
