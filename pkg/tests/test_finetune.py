import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmp.admission import pretrain_admission
from hmp.checkpoint import ADMISSION_ENCODER, ICD_EMBEDDING, MCP_HEADS, STAY_DECODER, STAY_ENCODER, select
from hmp.config import AdmissionTrainConfig, FinetuneConfig, ModelDims, StayTrainConfig
from hmp.data import Dataset, GenConfig, generate_dataset
from hmp.data.records import DatasetDims, StayRecord
from hmp.downstream import (
    TSV_COLUMNS,
    TaskSpec,
    ablation_run,
    apply_init,
    build_model,
    epochs_to_fraction,
    finetune,
    finetune_admission,
    finetune_patient,
    finetune_stay,
    read_tsv,
    rows_to_tsv,
    split_indices,
    subsample,
)
from hmp.errors import FractionTooSmall, StageMismatch
from hmp.stay import pretrain_stay

DIMS = ModelDims(T=4, d_f=5, d_dem=3, n_icd=8, n_drug=6, d_note=4, max_stays=2, d_r=6)
GEN = GenConfig(n_patients=40, max_stays=2, T=4, d_f=5, d_dem=3, n_icd=8, n_drug=6, d_note=4, seed=3)
FAST = FinetuneConfig(lr=5e-2, max_epochs=3, patience=2)


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(GEN)


@pytest.fixture(scope="module")
def checkpoints(ds):
    s1 = pretrain_stay(ds, DIMS, StayTrainConfig(epochs=1, batch_size=32))
    s2 = pretrain_admission(ds, s1, AdmissionTrainConfig(epochs=1, batch_size=32))
    return s1, s2


# --- task specs -----------------------------------------------------------


def test_task_must_match_level():
    with pytest.raises(ValueError):
        TaskSpec("stay", "readmission")
    with pytest.raises(ValueError):
        TaskSpec("patient", "risk", train_fraction=0.0)
    assert TaskSpec("admission", "readmission", init="pretrained_a+s").init == "a+s"
    with pytest.raises(ValueError):
        TaskSpec("stay", "arf", init="pretrained_x")


# --- parameter loading rules ----------------------------------------------


def _fresh_equal(model, level, name):
    return np.array_equal(model.parameters()[name].data, build_model(level, DIMS, seed=0).parameters()[name].data)


@pytest.mark.parametrize(
    "level, init, prefixes",
    [
        ("stay", "a+s", STAY_ENCODER),
        ("stay", "s", STAY_ENCODER),
        ("admission", "a+s", STAY_ENCODER + ADMISSION_ENCODER),
        ("admission", "s", STAY_ENCODER),
        ("admission", "a", ADMISSION_ENCODER),
        ("patient", "a", ICD_EMBEDDING),
        ("patient", "a+s", ICD_EMBEDDING),
    ],
)
def test_init_loads_exactly_its_subset(checkpoints, level, init, prefixes):
    ck = checkpoints[1]
    model = build_model(level, DIMS, seed=0)
    loaded = apply_init(model, level, init, ck)
    names = list(model.parameters())
    assert sorted(loaded) == sorted(select(names, prefixes))
    for name in names:
        if name in loaded:
            assert np.array_equal(model.parameters()[name].data, ck.params[name])
        else:
            assert _fresh_equal(model, level, name)


def test_scratch_loads_nothing(checkpoints):
    model = build_model("admission", DIMS, seed=0)
    assert apply_init(model, "admission", "scratch", checkpoints[1]) == []
    assert all(_fresh_equal(model, "admission", n) for n in model.parameters())


def test_stay_checkpoint_with_init_s(checkpoints):
    model = build_model("admission", DIMS, seed=0)
    loaded = apply_init(model, "admission", "s", checkpoints[0])
    assert sorted(loaded) == sorted(select(model.parameters(), STAY_ENCODER))


def test_full_inits_need_a_stage2_checkpoint(checkpoints):
    with pytest.raises(StageMismatch):
        apply_init(build_model("admission", DIMS, 0), "admission", "a+s", checkpoints[0])
    with pytest.raises(StageMismatch):
        apply_init(build_model("stay", DIMS, 0), "stay", "a+s", None)
    with pytest.raises(ValueError):
        apply_init(build_model("stay", DIMS, 0), "stay", "a", checkpoints[1])


def test_decoder_and_mcp_heads_are_not_fine_tuned():
    adm = build_model("admission", DIMS, 0)
    assert not select(adm.trainable(), STAY_DECODER + MCP_HEADS)
    assert not select(build_model("stay", DIMS, 0).trainable(), STAY_DECODER)


# --- splits ---------------------------------------------------------------


def test_split_ratio_and_disjointness():
    tr, va, te = split_indices(100, 0)
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    assert len(set(tr) | set(va) | set(te)) == 100


@settings(max_examples=60, deadline=None)
@given(st.integers(10, 300), st.integers(0, 50))
def test_subsample_is_nested_and_sorted(n, seed):
    tr, _, _ = split_indices(n, 0)
    prev = None
    for frac in (0.1, 0.25, 0.5, 1.0):
        sub = subsample(tr, frac, seed)
        assert np.all(np.diff(sub) > 0)
        if prev is not None:
            assert set(prev) <= set(sub)
        prev = sub
    assert np.array_equal(subsample(tr, 1.0, seed), tr)


def test_test_split_does_not_depend_on_fraction_or_seed():
    a = TaskSpec("stay", "arf", seed=3, train_fraction=0.1)
    b = TaskSpec("stay", "arf", seed=4)
    assert a.split_seed == b.split_seed
    assert np.array_equal(split_indices(200, a.split_seed)[2], split_indices(200, b.split_seed)[2])


# --- training -------------------------------------------------------------


def separable_dataset(n=120) -> list:
    rng = np.random.default_rng(0)
    items = []
    for k in range(n):
        label = k % 2
        feats = rng.uniform(0, 0.1, size=(4, 5))
        feats[:, 0] = 0.9 if label else 0.0
        items.append((StayRecord(feats, {"arf": label, "shock": 0, "mortality": 0}), np.zeros(3)))
    return items


def test_separable_toy_reaches_perfect_auroc():
    report = finetune(separable_dataset(), None, TaskSpec("stay", "arf", init="scratch"),
                      FinetuneConfig(lr=0.2, max_epochs=30), dims=DIMS)
    assert report.auroc == 1.0


def test_report_fields_and_history(ds, checkpoints):
    r = finetune(ds, checkpoints[1], TaskSpec("stay", "arf"), FAST)
    assert 0 <= r.auroc <= 1 and 0 <= r.aupr <= 1 and 0 <= r.f1 <= 1 and -1 <= r.kappa <= 1
    assert 1 <= r.epochs <= FAST.max_epochs and 1 <= r.best_epoch <= r.epochs
    assert [h["epoch"] for h in r.history] == list(range(1, r.epochs + 1))
    assert {"train_loss", "val_loss", "test_f1", "test_auroc"} <= set(r.history[0])


def test_runs_are_deterministic_and_arms_differ_only_in_init(ds, checkpoints):
    spec = TaskSpec("admission", "readmission", seed=1)
    a = finetune(ds, checkpoints[1], spec, FAST)
    b = finetune(ds, checkpoints[1], spec, FAST)
    assert a.auroc == b.auroc and a.history == b.history
    scratch = finetune(ds, checkpoints[1], TaskSpec("admission", "readmission", seed=1, init="scratch"), FAST)
    assert scratch.loaded == [] and a.loaded


def test_early_stopping_respects_patience(ds):
    cfg = FinetuneConfig(lr=5.0, max_epochs=30, patience=1)
    r = finetune(ds, None, TaskSpec("stay", "arf", init="scratch"), cfg, dims=DIMS)
    assert r.epochs < 30 and r.epochs - r.best_epoch <= 1


def test_level_specific_entry_points(ds, checkpoints):
    ck = checkpoints[1]
    with pytest.raises(StageMismatch):
        finetune_stay(ds, ck, TaskSpec("admission", "readmission"), FAST)
    with pytest.raises(StageMismatch):
        finetune_admission(ds, ck, TaskSpec("patient", "risk"), FAST)
    with pytest.raises(StageMismatch):
        finetune_patient(ds, ck, TaskSpec("stay", "arf"), FAST)
    assert finetune_patient(ds, ck, TaskSpec("patient", "risk", init="a"), FAST).loaded == ["icd_mlp.W", "icd_mlp.b"]


def test_single_admission_patients_run_one_step(ds):
    model = build_model("patient", DIMS, 0)
    p = next(p for p in ds.patients if len(p.admissions) == 1)
    from hmp.data import patient_batch

    batch = patient_batch([p])
    assert batch.icd.shape[1] == 1
    assert model.logits(batch).shape == (1,)


def test_epochs_to_fraction():
    hist = [{"epoch": e, "test_f1": f} for e, f in [(1, 0.0), (2, 0.5), (3, 0.62), (4, 0.6)]]
    assert epochs_to_fraction(hist, 0.6) == 2 + 1
    assert epochs_to_fraction(hist, 0.0) == 1


# --- ablation -------------------------------------------------------------


def test_ablation_table(ds, checkpoints):
    fractions = [0.25, 0.5, 1.0]
    rows = ablation_run(ds, checkpoints[1], TaskSpec("stay", "arf"), fractions, FAST)
    assert len(rows) == 2 * len(fractions)
    assert [(r.init, r.fraction) for r in rows[:2]] == [("a+s", 0.25), ("scratch", 0.25)]
    text = rows_to_tsv(rows)
    assert text.splitlines()[0].split("\t") == list(TSV_COLUMNS)
    assert read_tsv(text) == rows
    plain = finetune(ds, checkpoints[1], TaskSpec("stay", "arf"), FAST)
    assert rows[-2].auroc == plain.auroc and rows[-2].epochs == plain.epochs


def test_fraction_with_one_class_is_rejected():
    items = separable_dataset(40)
    for k, (stay, _) in enumerate(items):
        stay.labels["arf"] = int(k < 2)
    with pytest.raises(FractionTooSmall):
        ablation_run(items, None, TaskSpec("stay", "arf", init="scratch"), [0.05], FAST, dims=DIMS)


def test_ablation_rejects_bad_fraction(ds, checkpoints):
    with pytest.raises(ValueError):
        ablation_run(ds, checkpoints[1], TaskSpec("stay", "arf"), [0.0], FAST)


def test_empty_dataset_dims_needed():
    with pytest.raises(ValueError):
        finetune(separable_dataset(), None, TaskSpec("stay", "arf", init="scratch"), FAST)
    assert isinstance(Dataset([], DatasetDims(4, 5, 3, 8, 6, 2)), Dataset)
