import json
import math

import numpy as np
import pytest

import fga_checks
from conftest import small_config
from fgadialog import core
from fgadialog.config import QUESTION_MODE, RunConfig
from fgadialog.data import DialogRecord
from fgadialog.encoders import TokenSequence
from fgadialog.harness.gradcheck import toy_records
from fgadialog.harness.training import calibrate_batchnorm
from fgadialog.model import (FGAModel, assemble, collate, fuse_history, load_checkpoint,
                             save_checkpoint, score_answers)


def C(x):
    return core.constant(np.asarray(x, dtype=np.float64))


def batch_for(cfg, seed=0, count=3):
    return collate(toy_records(cfg, np.random.default_rng(seed), count), cfg)


# fusion pieces ----------------------------------------------------------------

def test_fuse_history_single_round_projection():
    W = np.zeros((2, 4))
    W[0, 0] = W[1, 3] = 1.0
    out = fuse_history([(C([1.0, 2.0]), C([3.0, 4.0]))], C(W), C(np.zeros(2)))
    assert np.array_equal(out.data, [1.0, 4.0])


def test_fuse_history_zero_rounds_give_zero():
    rng = np.random.default_rng(0)
    W, b = C(rng.standard_normal((3, 4))), C(np.zeros(3))
    out = fuse_history([(C(np.zeros(2)), C(np.zeros(2)))] * 2, W, b)
    assert np.array_equal(out.data, np.zeros(6))


def test_fuse_history_default_width():
    cfg = RunConfig()
    rng = np.random.default_rng(0)
    W, b = C(rng.standard_normal((cfg.d_round, 2 * cfg.d_history))), C(np.zeros(cfg.d_round))
    pairs = [(C(rng.standard_normal(cfg.d_history)), C(rng.standard_normal(cfg.d_history)))
             for _ in range(cfg.history_rounds)]
    assert fuse_history(pairs, W, b).shape == (1280,)


def test_assemble_default_length():
    cfg = RunConfig()
    assert cfg.L == 2944
    parts = [C(np.zeros(d)) for d in (512, 512, 128, 512, 1280)]
    out = assemble(*parts, dims=(512, 512, 128, 512, 1280))
    assert out.shape == (2944,) and not out.data.any()


def test_assemble_order_and_stability():
    parts = [C([1.0]), C([2.0, 3.0]), C([4.0]), C([5.0]), C([6.0, 7.0])]
    a, b = assemble(*parts).data, assemble(*parts).data
    assert np.array_equal(a, np.arange(1.0, 8.0)) and a.tobytes() == b.tobytes()


def test_assemble_dim_mismatch():
    with pytest.raises(core.ContractError):
        assemble(C([1.0]), C([1.0]), C([1.0]), C([1.0]), None, dims=(1, 1, 1, 2))


def test_score_answers_identical_candidates_tie():
    cfg = small_config(history_rounds=0)
    model = fga_checks.jitter_model(FGAModel(cfg), np.random.default_rng(0))
    rng = np.random.default_rng(1)
    U = rng.standard_normal((2, 4, cfg.d_answer))
    U[:, 3] = U[:, 1]
    s = score_answers(C(rng.standard_normal((2, cfg.L))), C(U), model.fusion)
    p = core.softmax(s).data
    assert np.array_equal(p[:, 1], p[:, 3])


def test_score_answers_zero_output_layer_uniform():
    cfg = small_config(history_rounds=0, n_answers=100)
    model = fga_checks.jitter_model(FGAModel(cfg), np.random.default_rng(0))
    model.fusion.W_out.data[...] = 0
    rng = np.random.default_rng(1)
    s = score_answers(C(rng.standard_normal((1, cfg.L))), C(rng.standard_normal((1, 100, cfg.d_answer))),
                      model.fusion)
    p = core.softmax(s).data
    assert p.shape == (1, 100)
    assert np.array_equal(p, np.full((1, 100), p[0, 0])) and abs(p.sum() - 1) < 1e-12


def test_score_answers_needs_two_candidates():
    cfg = small_config(history_rounds=0)
    model = FGAModel(cfg)
    with pytest.raises(core.ContractError):
        score_answers(C(np.zeros((1, cfg.L))), C(np.zeros((1, 1, cfg.d_answer))), model.fusion)


def test_mlp_widths_floor():
    cfg = small_config()
    model = FGAModel(cfg)
    width = cfg.L + cfg.d_answer
    assert model.fusion.W1.shape == (width // 2, width)
    assert model.fusion.W2.shape == (width // 4, width // 2)
    assert model.fusion.W_out.shape == (1, width // 4)


# forward ------------------------------------------------------------------------

@pytest.mark.parametrize("T", [0, 1, 2])
def test_forward_matches_oracle(T):
    cfg = small_config(history_rounds=T)
    model = fga_checks.jitter_model(FGAModel(cfg, seed=3), np.random.default_rng(T))
    recs = toy_records(cfg, np.random.default_rng(10 + T), 3)
    if T == 2:
        recs[0].history = recs[0].history[:1]  # one absent round is masked to zeros
    batch = collate(recs, cfg)
    probs = model.forward(batch).probs.data
    assert np.max(np.abs(probs - fga_checks.forward_oracle(model, batch))) <= 1e-9


def test_forward_deterministic_in_eval():
    cfg = small_config()
    model = fga_checks.jitter_model(FGAModel(cfg), np.random.default_rng(0))
    batch = batch_for(cfg)
    a, b = model.forward(batch), model.forward(batch)
    assert a.probs.data.tobytes() == b.probs.data.tobytes()
    assert abs(float(a.loss.data) - float(b.loss.data)) == 0


def test_probs_are_distributions():
    cfg = small_config()
    model = fga_checks.jitter_model(FGAModel(cfg), np.random.default_rng(0))
    p = model.forward(batch_for(cfg, count=5)).probs.data
    assert np.all(p > 0) and np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-6


def test_candidate_permutation_at_initialization():
    # message weights start constant, so nothing ties a score to a candidate slot
    cfg = small_config()
    model = FGAModel(cfg)
    recs = toy_records(cfg, np.random.default_rng(0), 3)
    calibrate_batchnorm(model, recs)
    perm = np.random.default_rng(1).permutation(cfg.n_answers)
    shuffled = [DialogRecord(r.record_id, r.image, r.caption, r.history, r.question,
                             [r.candidates[i] for i in perm], int(np.flatnonzero(perm == r.gt_index)[0]))
                for r in recs]
    a = model.forward(collate(recs, cfg)).probs.data
    b = model.forward(collate(shuffled, cfg)).probs.data
    assert np.allclose(a[:, perm], b, rtol=0, atol=1e-12)


def test_untrained_model_near_uniform():
    cfg = small_config()
    model = FGAModel(cfg)
    recs = toy_records(cfg, np.random.default_rng(0), 6)
    calibrate_batchnorm(model, recs)
    p = model.forward(collate(recs, cfg)).probs.data
    ratio = float(np.max(p.max(axis=1) / p.min(axis=1)))
    assert ratio < 10, ratio


def test_train_mode_uses_dropout_rng():
    cfg = small_config(dropout_fusion=0.3, dropout_image=0.5, dropout_local=0.1)
    model = FGAModel(cfg)
    batch = batch_for(cfg)
    a = model.forward(batch, train=True, rng=np.random.default_rng(5)).probs.data
    b = model.forward(batch, train=True, rng=np.random.default_rng(5)).probs.data
    c = model.forward(batch, train=True, rng=np.random.default_rng(6)).probs.data
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_question_generation_mode_only_changes_query():
    ids = lambda *xs: TokenSequence.of(xs)  # noqa: E731
    cfg_a = small_config(n_question=5)
    cfg_q = cfg_a.replace(mode=QUESTION_MODE)
    rec = toy_records(cfg_a, np.random.default_rng(0), 1)[0]
    rec.history = [(ids(3, 4), ids(5, 6, 7))]
    rec.question = ids(3, 4, 5, 6, 7)
    ma, mq = FGAModel(cfg_a, seed=4), FGAModel(cfg_q, seed=4)
    for m in (ma, mq):
        fga_checks.jitter_model(m, np.random.default_rng(9))
    ba, bq = collate([rec], cfg_a), collate([rec], cfg_q)
    assert np.array_equal(ba.query, bq.query)
    assert ma.forward(ba).probs.data.tobytes() == mq.forward(bq).probs.data.tobytes()
    rec.question = ids(8, 8)
    assert not np.array_equal(collate([rec], cfg_a).query, collate([rec], cfg_q).query)


def test_question_generation_without_history_is_empty_query():
    cfg = small_config(mode=QUESTION_MODE)
    rec = toy_records(cfg, np.random.default_rng(0), 1)[0]
    rec.history = []
    assert not collate([rec], cfg).query.any()


def test_loss_is_mean_cross_entropy():
    cfg = small_config()
    model = fga_checks.jitter_model(FGAModel(cfg), np.random.default_rng(0))
    batch = batch_for(cfg, count=4)
    out = model.forward(batch)
    p = out.probs.data
    ref = -np.mean(np.log(p[np.arange(4), batch.gt]))
    assert math.isclose(float(out.loss.data), ref, rel_tol=1e-12)


# checkpoints ----------------------------------------------------------------

@pytest.mark.parametrize("dtype", ["float64", "float32"])
def test_checkpoint_round_trip_bit_exact(tmp_path, dtype):
    cfg = small_config(dtype=dtype)
    model = fga_checks.jitter_model(FGAModel(cfg, seed=2), np.random.default_rng(0))
    model.fga.prune("image", "caption")
    model.registry["fusion.out.b"].trainable = False
    batch = batch_for(cfg)
    before = model.forward(batch).probs.data
    save_checkpoint(model, tmp_path / "a.json", {"note": 1})
    loaded = load_checkpoint(tmp_path / "a.json")
    save_checkpoint(loaded, tmp_path / "b.json", {"note": 1})
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    ma = json.loads((tmp_path / "a.json").read_text())
    mb = json.loads((tmp_path / "b.json").read_text())
    assert ma.pop("blob") == "a.bin" and mb.pop("blob") == "b.bin"
    assert ma == mb
    assert loaded.forward(batch).probs.data.tobytes() == before.tobytes()
    assert loaded.fga.pruned == {("image", "caption")}
    assert not loaded.registry["fusion.out.b"].trainable
    code = "f64" if dtype == "float64" else "f32"
    assert {e["dtype"] for e in ma["tensors"]} == {code}


def test_resave_same_name_byte_identical(tmp_path):
    cfg = small_config()
    model = fga_checks.jitter_model(FGAModel(cfg), np.random.default_rng(0))
    save_checkpoint(model, tmp_path / "m.json")
    first = (tmp_path / "m.json").read_bytes(), (tmp_path / "m.bin").read_bytes()
    save_checkpoint(load_checkpoint(tmp_path / "m.json"), tmp_path / "m.json")
    assert ((tmp_path / "m.json").read_bytes(), (tmp_path / "m.bin").read_bytes()) == first


def test_checkpoint_layout(tmp_path):
    cfg = small_config()
    model = FGAModel(cfg)
    save_checkpoint(model, tmp_path / "m.json")
    man = json.loads((tmp_path / "m.json").read_text())
    assert man["config_hash"] == cfg.hash()
    names = [e["name"] for e in man["tensors"]]
    assert names[:len(model.registry)] == model.registry.names()
    assert "fusion.bn1.running_mean" in names and "fga.image.self_bn.running_var" in names
    offs = [e["byte_offset"] for e in man["tensors"]]
    assert offs == sorted(offs)


def test_checkpoint_rejects_foreign_json(tmp_path):
    (tmp_path / "x.json").write_text('{"hello": 1}')
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.json")


def test_checkpoint_detects_config_tampering(tmp_path):
    save_checkpoint(FGAModel(small_config()), tmp_path / "m.json")
    man = json.loads((tmp_path / "m.json").read_text())
    man["config"]["lr"] = 0.5
    (tmp_path / "m.json").write_text(json.dumps(man))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "m.json")


def test_parameter_count_reported():
    model = FGAModel(small_config())
    assert model.parameter_count() == sum(p.data.size for p in model.registry)
