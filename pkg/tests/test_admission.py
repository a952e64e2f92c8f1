import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmp import tensor as T
from hmp.admission import (
    AdmissionEncoder,
    admission_fuse,
    admission_loss,
    aggregate_admission,
    aggregate_stays,
    cl_loss,
    cosine_matrix,
    encode_admission,
    mcp_loss,
    mcp_objective,
    nce_from_similarity,
    pretrain_admission,
)
from hmp.config import AdmissionTrainConfig, ModelDims, StayTrainConfig
from hmp.data import GenConfig, admission_batch, generate_dataset
from hmp.errors import BatchTooSmall, StageMismatch, TooFewTokens
from hmp.gradsuite import check_cl_loss, check_mcp_loss
from hmp.stay import pretrain_stay, stay_encoder_from_checkpoint
from hmp.tensor import Tensor
from oracles import cosine, nce_rows

DIMS = ModelDims(T=4, d_f=5, d_dem=3, n_icd=8, n_drug=6, d_note=4, max_stays=2, d_r=6)
GEN = GenConfig(n_patients=10, max_stays=2, T=4, d_f=5, d_dem=3, n_icd=8, n_drug=6, d_note=4, seed=2)


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(GEN)


@pytest.fixture(scope="module")
def stage1(ds):
    return pretrain_stay(ds, DIMS, StayTrainConfig(epochs=1, batch_size=16))


# --- masked code prediction -----------------------------------------------


def test_mcp_zero_when_prediction_equals_indicator():
    ind_c = np.array([[0, 1, 0, 1.0], [1, 0, 0, 0]])
    ind_g = np.array([[0, 0, 1.0], [0, 1, 0]])
    assert mcp_objective(Tensor(ind_c), Tensor(ind_g), ind_c, ind_g).item() == 0.0


def test_mcp_hand_value():
    # (||p_c - c||^2 + ||p_g - g||^2) averaged over 2 admissions: (0.25 + 1) + (0 + 0.5) over 2
    p_c = Tensor([[0.5, 0.0], [1.0, 0.0]])
    p_g = Tensor([[1.0], [0.5]])
    c = np.array([[1.0, 0.0], [1.0, 0.0]])
    g = np.array([[0.0], [0.0]])
    assert mcp_objective(p_c, p_g, c, g).item() == pytest.approx((0.25 + 1.0 + 0.25) / 2, abs=1e-15)


def test_stage2_without_masking_or_contrast_has_closed_form(ds, stage1):
    # nothing is masked, so the targets are all zero: loss = mean ||sigmoid(head(a))||^2
    enc = AdmissionEncoder.from_stay_checkpoint(stage1)
    batch = admission_batch(ds.admissions()[:6], 2)
    cfg = AdmissionTrainConfig(lam=0.0, mask_rate=0.0)
    total, mcp, cl = admission_loss(enc, batch, cfg, np.random.default_rng(0))
    with T.no_grad():
        a = encode_admission(enc, batch).data
    sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    p_c = sig(a @ enc.mcp_icd.W.data.T + enc.mcp_icd.b.data)
    p_g = sig(a @ enc.mcp_drug.W.data.T + enc.mcp_drug.b.data)
    expected = (np.sum(p_c**2) + np.sum(p_g**2)) / 6
    assert total.item() == pytest.approx(expected, abs=1e-12)
    assert cl == 0.0


def test_mcp_uses_masked_codes_as_input(ds, stage1):
    enc = AdmissionEncoder.from_stay_checkpoint(stage1)
    batch = admission_batch(ds.admissions()[:4], 2)
    l1 = mcp_loss(enc, batch, 0.5, np.random.default_rng(3)).item()
    l2 = mcp_loss(enc, batch, 0.5, np.random.default_rng(3)).item()
    l3 = mcp_loss(enc, batch, 0.5, np.random.default_rng(4)).item()
    assert l1 == l2 and l1 != l3


# --- contrastive ----------------------------------------------------------


def test_nce_zero_for_two_identical_embeddings():
    r = Tensor(np.tile([[0.3, -1.2, 0.5]], (2, 1)))
    a = Tensor(np.tile([[1.0, 0.1, -0.4]], (2, 1)))
    assert np.all(nce_from_similarity(cosine_matrix(r, a), 0.1).data == 0.0)


def test_nce_three_by_three_closed_form():
    # diagonal 1, off-diagonal 0: u = -1/tau + ln 2
    u = nce_from_similarity(Tensor(np.eye(3)), 0.1).data
    assert np.allclose(u, -10.0 + math.log(2.0), atol=1e-14)


def test_nce_rejects_single_row():
    with pytest.raises(BatchTooSmall):
        nce_from_similarity(Tensor(np.ones((1, 1))), 0.1)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_nce_matches_scalar_oracle(b, seed, tau):
    rng = np.random.default_rng(seed)
    r, a = rng.standard_normal((b, 4)), rng.standard_normal((b, 4))
    sim = cosine_matrix(Tensor(r), Tensor(a)).data
    oracle = [[cosine(r[i], a[j]) for j in range(b)] for i in range(b)]
    assert np.allclose(sim, oracle, atol=1e-14)
    assert np.allclose(nce_from_similarity(Tensor(sim), tau).data, nce_rows(oracle, tau), atol=1e-10)


def test_cosine_of_zero_vector_is_zero():
    assert np.all(cosine_matrix(Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3)))).data == 0.0)


def test_cl_loss_zero_for_two_identical_admissions(ds, stage1):
    enc = AdmissionEncoder.from_stay_checkpoint(stage1)
    adm = ds.admissions()[0]
    batch = admission_batch([adm, adm], 2)
    assert cl_loss(enc, batch, tau=0.1).item() == 0.0


def test_cl_loss_averages_over_modalities(ds, stage1):
    enc = AdmissionEncoder.from_stay_checkpoint(stage1)
    batch = admission_batch(ds.admissions()[:4], 2)
    from hmp.admission import modality_tokens

    tokens = modality_tokens(enc, batch)
    parts = []
    for r in ("c", "g", "l"):
        rest = {k: v for k, v in tokens.items() if k != r}
        parts.append(nce_from_similarity(cosine_matrix(tokens[r], admission_fuse(enc, rest)), 0.2).data.sum())
    assert cl_loss(enc, batch, 0.2, tokens).item() == pytest.approx(sum(parts) / 12, abs=1e-12)


def test_cl_needs_two_admissions(ds, stage1):
    enc = AdmissionEncoder.from_stay_checkpoint(stage1)
    with pytest.raises(BatchTooSmall):
        cl_loss(enc, admission_batch(ds.admissions()[:1], 2), 0.1)


def test_single_admission_batch_skips_contrast(ds, stage1):
    enc = AdmissionEncoder.from_stay_checkpoint(stage1)
    total, mcp, cl = admission_loss(enc, admission_batch(ds.admissions()[:1], 2), AdmissionTrainConfig(),
                                    np.random.default_rng(0))
    assert cl == 0.0 and total.item() == mcp


def test_fusion_needs_two_tokens(ds, stage1):
    enc = AdmissionEncoder.from_stay_checkpoint(stage1)
    with pytest.raises(TooFewTokens):
        admission_fuse(enc, {"c": Tensor(np.zeros((2, 6)))})


@pytest.mark.parametrize("seed", [41, 42])
def test_admission_loss_gradients(seed):
    assert check_mcp_loss(seed).passed
    assert check_cl_loss(seed).passed


# --- aggregation and two-stage fidelity -----------------------------------


def test_padded_stay_slots_contribute_zero(ds, stage1):
    enc = AdmissionEncoder.from_stay_checkpoint(stage1)
    adm, dem = next((a, d) for a, d in ds.admissions() if len(a.stays) == 1)
    s = aggregate_admission(enc, adm, dem).data
    with T.no_grad():
        b = enc.stay.encode(Tensor(adm.stays[0].features), Tensor(dem)).data
    W = enc.stay_agg.W.data
    assert np.allclose(s, W[:, :6] @ b + enc.stay_agg.b.data, atol=1e-14)


def test_stage2_reproduces_stage1_stay_outputs_bitwise(ds, stage1):
    enc2 = AdmissionEncoder.from_stay_checkpoint(stage1, seed=123)
    enc1 = stay_encoder_from_checkpoint(stage1)
    batch = admission_batch(ds.admissions(), 2)
    feats = Tensor(batch.stays[:, 0])
    dem = Tensor(batch.demographics)
    with T.no_grad():
        assert np.array_equal(enc2.stay.encode(feats, dem).data, enc1.encode(feats, dem).data)


def test_stage2_rejects_a_stage2_checkpoint_as_stage1(ds, stage1):
    ck2 = pretrain_admission(ds, stage1, AdmissionTrainConfig(epochs=1, batch_size=8))
    with pytest.raises(StageMismatch):
        pretrain_admission(ds, ck2, AdmissionTrainConfig(epochs=1))


def test_stage2_training_runs_and_logs(ds, stage1, caplog):
    cfg = AdmissionTrainConfig(lr=1e-2, epochs=3, batch_size=8)
    with caplog.at_level("INFO", logger="hmp.train"):
        ck = pretrain_admission(ds, stage1, cfg)
    assert ck.stage == "admission"
    assert ck.history[-1]["total"] < ck.history[0]["total"]
    msg = caplog.records[0].getMessage()
    assert msg.startswith("epoch=1 mcp=") and " cl=" in msg and " total=" in msg
    again = pretrain_admission(ds, stage1, cfg)
    assert all(np.array_equal(ck.params[k], again.params[k]) for k in ck.params)


def test_stay_decoder_is_frozen_in_stage2(ds, stage1):
    ck = pretrain_admission(ds, stage1, AdmissionTrainConfig(lr=1e-2, epochs=1, batch_size=8))
    for k, v in stage1.params.items():
        if k.startswith("stay.lstm_dec."):
            assert np.array_equal(ck.params[k], v)


def test_aggregate_stays_shape(ds, stage1):
    enc = AdmissionEncoder.from_stay_checkpoint(stage1)
    assert aggregate_stays(enc, admission_batch(ds.admissions()[:3], 2)).shape == (3, 6)
