from hmp.data.batching import (
    AdmissionBatch,
    PatientBatch,
    StayBatch,
    admission_batch,
    batch_iter,
    flatten,
    patient_batch,
    stay_batch,
)
from hmp.data.masking import MaskPlan, mask_codes, mask_count
from hmp.data.notes import note_embed
from hmp.data.records import (
    STAY_TASKS,
    AdmissionRecord,
    Dataset,
    DatasetDims,
    PatientRecord,
    StayRecord,
    datasets_equal,
)
from hmp.data.serialize import load_dataset, save_dataset
from hmp.data.synthetic import GenConfig, generate_dataset, modality_projections

__all__ = [
    "AdmissionBatch",
    "AdmissionRecord",
    "Dataset",
    "DatasetDims",
    "GenConfig",
    "MaskPlan",
    "PatientBatch",
    "PatientRecord",
    "STAY_TASKS",
    "StayBatch",
    "StayRecord",
    "admission_batch",
    "batch_iter",
    "datasets_equal",
    "flatten",
    "generate_dataset",
    "load_dataset",
    "mask_codes",
    "mask_count",
    "modality_projections",
    "note_embed",
    "patient_batch",
    "save_dataset",
    "stay_batch",
]
