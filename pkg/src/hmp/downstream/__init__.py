"""Fine-tuning heads, evaluation metrics and the training-size ablation."""

from hmp.downstream.ablation import (
    TSV_COLUMNS,
    AblationRow,
    ablation_over_seeds,
    ablation_run,
    mean_by_arm,
    read_tsv,
    rows_to_tsv,
    write_tsv,
)
from hmp.downstream.finetune import (
    INITS,
    LEVEL_TASKS,
    LOAD_RULES,
    EvalReport,
    TaskSpec,
    apply_init,
    build_model,
    epochs_to_fraction,
    finetune,
    finetune_admission,
    finetune_patient,
    finetune_stay,
    predict_scores,
    split_indices,
    subsample,
)
from hmp.downstream.metrics import aupr, auroc, f1_kappa

__all__ = [
    "AblationRow",
    "EvalReport",
    "INITS",
    "LEVEL_TASKS",
    "LOAD_RULES",
    "TSV_COLUMNS",
    "TaskSpec",
    "ablation_over_seeds",
    "ablation_run",
    "apply_init",
    "aupr",
    "auroc",
    "build_model",
    "epochs_to_fraction",
    "f1_kappa",
    "finetune",
    "finetune_admission",
    "finetune_patient",
    "finetune_stay",
    "mean_by_arm",
    "predict_scores",
    "read_tsv",
    "rows_to_tsv",
    "split_indices",
    "subsample",
    "write_tsv",
]
