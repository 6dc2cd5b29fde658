import json

import numpy as np
import pytest
import torch

import oracles
from medfuse import checkpoint as ckpt_io
from medfuse.fusion import ConfigError, FusionConfig
from medfuse.mltm import TrainingDiverged
from medfuse.training import (
    TrainConfig,
    _make_state,
    build_features,
    compute_metrics,
    epoch_permutation,
    evaluate,
    metrics_record,
    model_from_checkpoint,
    predict_logits,
    train,
    train_epoch,
)

FC = dict(d_model=16, heads=2, b_tokens=12, joint_tokens=2, estimator_hidden=16, g_hidden=16, n_labels=4)


def fc(**kw):
    return FusionConfig(**{**FC, **kw})


def tc(**kw):
    return TrainConfig(**{"batch_size": 64, "epochs": 3, **kw})


# -- metrics ---------------------------------------------------------------------

def test_perfect_prediction():
    truth = np.random.default_rng(0).random((20, 5)) < 0.5
    truth[0] = True
    rep = compute_metrics(truth, truth)
    assert all(v == 1.0 for v in rep.headline().values())


def test_complement_prediction():
    truth = np.random.default_rng(1).random((20, 5)) < 0.5
    truth[0], truth[1] = True, False
    rep = compute_metrics(~truth, truth)
    assert rep.precision == rep.recall == rep.f1_macro == rep.f1_weighted == rep.accuracy == 0.0


def test_textbook_counts():
    rep = compute_metrics(np.array([[True], [True]]), np.array([[True], [False]]))
    assert (rep.precision, rep.recall) == (0.5, 1.0)
    assert rep.f1_macro == pytest.approx(2 / 3, abs=1e-15)


def test_absent_label_counts_as_zero_in_macro():
    truth = np.array([[True, False], [False, False]])
    rep = compute_metrics(truth.copy(), truth)
    assert rep.per_label[1]["f1"] == 0.0
    assert rep.f1_macro == 0.5 and rep.f1_weighted == 1.0


def test_metrics_match_definition_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        pred = rng.random((20, 10)) < rng.uniform(0.1, 0.9)
        truth = rng.random((20, 10)) < rng.uniform(0.1, 0.9)
        rep = compute_metrics(pred, truth)
        want = oracles.label_metrics(pred.tolist(), truth.tolist())
        for key in ("precision", "recall", "f1_macro", "f1_weighted", "accuracy"):
            assert abs(getattr(rep, key) - want[key]) <= 1e-12, key
        for j, (p, r, f, s) in enumerate(want["per_label"]):
            assert rep.per_label[j]["f1"] == pytest.approx(f, abs=1e-12) and rep.support[j] == s


def test_metric_bounds_and_identities():
    rng = np.random.default_rng(3)
    truth = np.zeros((12, 4), bool)
    for j in range(4):
        truth[rng.choice(12, 5, replace=False), j] = True  # equal supports
    pred = rng.random((12, 4)) < 0.5
    rep = compute_metrics(pred, truth)
    assert all(0.0 <= v <= 1.0 for v in rep.headline().values())
    assert rep.f1_weighted == pytest.approx(rep.f1_macro, abs=1e-15)
    perm = rng.permutation(4)
    permuted = compute_metrics(pred[:, perm], truth[:, perm])
    for k, v in rep.headline().items():
        assert permuted.headline()[k] == pytest.approx(v, abs=1e-15)


def test_raising_threshold_never_raises_recall():
    rng = np.random.default_rng(4)
    probs = rng.random((50, 6))
    truth = rng.random((50, 6)) < 0.4
    previous = None
    for tau in np.linspace(0, 1, 21):
        recalls = [x["recall"] for x in compute_metrics(probs >= tau, truth).per_label]
        if previous is not None:
            assert all(r <= p for r, p in zip(recalls, previous))
        previous = recalls


# -- features --------------------------------------------------------------------

def test_disabled_paths_are_invalid(small_synth, small_mltm):
    from medfuse.mltm import mltm_from_checkpoint

    ds = small_synth.dataset
    mltm, stats, _ = mltm_from_checkpoint(small_mltm)
    full = build_features(ds, small_synth.embeddings, mltm, stats, tc(), fc())
    assert full.text_valid[:, :4].any() and full.lab_valid.any()
    no_text = build_features(ds, small_synth.embeddings, mltm, stats, tc(use_text=False), fc())
    assert not no_text.text_valid[:, :4].any()
    assert torch.equal(no_text.text_valid[:, 4], full.text_valid[:, 4])
    neither = build_features(ds, small_synth.embeddings, mltm, stats, tc(use_text=False, use_labtext=False), fc())
    assert not neither.text_valid.any() and torch.count_nonzero(neither.text_raw) == 0
    no_lab = build_features(ds, small_synth.embeddings, mltm, stats, tc(use_mltm=False), fc())
    assert not no_lab.lab_valid.any()


def test_feature_config_errors(small_synth):
    with pytest.raises(ConfigError):
        build_features(small_synth.dataset, small_synth.embeddings, None, None, tc(), fc())
    with pytest.raises(ConfigError):
        build_features(small_synth.dataset, small_synth.embeddings, None, None, tc(use_mltm=False), fc(a_tokens=4))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        tc(batch_size=1).validate(lam=0.1)
    tc(batch_size=1).validate(lam=0.0)
    with pytest.raises(ConfigError):
        tc(threshold=1.5).validate(0.1)


def test_label_count_must_match(small_synth, small_mltm):
    with pytest.raises(ConfigError, match="n_labels"):
        train(small_synth.dataset, small_mltm, small_synth.embeddings, tc(epochs=1), fc(n_labels=7))


# -- training --------------------------------------------------------------------

def test_epoch_permutation_is_keyed_on_seed_and_epoch():
    assert np.array_equal(epoch_permutation(1, 3, 50), epoch_permutation(1, 3, 50))
    assert not np.array_equal(epoch_permutation(1, 3, 50), epoch_permutation(1, 4, 50))
    assert sorted(epoch_permutation(2, 0, 50)) == list(range(50))


def test_identical_seeds_give_identical_checkpoints(small_synth, small_mltm):
    a = train(small_synth.dataset, small_mltm, small_synth.embeddings, tc(seed=5), fc())
    b = train(small_synth.dataset, small_mltm, small_synth.embeddings, tc(seed=5), fc())
    assert ckpt_io.dumps(a) == ckpt_io.dumps(b)
    c = train(small_synth.dataset, small_mltm, small_synth.embeddings, tc(seed=6), fc())
    assert ckpt_io.dumps(a) != ckpt_io.dumps(c)


def test_resume_equals_uninterrupted(tmp_path, small_synth, small_mltm):
    args = (small_synth.dataset, small_mltm, small_synth.embeddings)
    config = tc(epochs=4, seed=2)
    full = train(*args, config, fc())
    half = train(*args, config, fc(), stop_after=2)
    ckpt_io.save(tmp_path / "half.ckpt", half)
    resumed = train(*args, config, fc(), resume=ckpt_io.load(tmp_path / "half.ckpt"))
    assert half.meta["epoch"] == 2 and resumed.meta["epoch"] == 4
    assert ckpt_io.dumps(resumed) == ckpt_io.dumps(full)


def test_lambda_zero_ignores_the_estimator(small_synth, small_mltm):
    from medfuse.mltm import mltm_from_checkpoint

    ds = small_synth.dataset
    mltm, stats, _ = mltm_from_checkpoint(small_mltm)
    config, fcfg = tc(), fc(lam=0.0)
    feats = build_features(ds, small_synth.embeddings, mltm, stats, config, fcfg).take(ds.split_indices("train"))
    logits = []
    for est_seed in (0, 1):
        state = _make_state(fcfg, config, feats.text_raw.shape[-1], feats.lab_raw.shape[-1])
        with torch.no_grad():
            gen = torch.Generator().manual_seed(est_seed)
            for p in state.estimator.parameters():
                p.copy_(torch.randn(p.shape, generator=gen))
        for _ in range(2):
            train_epoch(state, feats, config, fcfg)
            state.epoch += 1
        with torch.no_grad():
            logits.append(predict_logits(state.model, feats))
    assert torch.equal(logits[0], logits[1])


def test_estimator_params_untouched_by_main_step(small_synth, small_mltm):
    ck = train(small_synth.dataset, small_mltm, small_synth.embeddings, tc(epochs=1, estimator_steps=0), fc())
    fresh = train(small_synth.dataset, small_mltm, small_synth.embeddings, tc(epochs=0, estimator_steps=0), fc())
    for name, arr in fresh.groups["estimator"].items():
        assert np.array_equal(ck.groups["estimator"][name], arr)


def test_history_and_checkpoint_contents(small_synth, small_mltm):
    ck = train(small_synth.dataset, small_mltm, small_synth.embeddings, tc(), fc())
    assert ck.meta["epoch"] == 3 and len(ck.meta["history"]) == 3
    for rec in ck.meta["history"]:
        assert all(np.isfinite(v) for v in rec.values())
    assert {"fusion", "optim.main", "estimator", "optim.estimator", "mltm"} <= set(ck.groups)
    assert len(ck.meta["config_hash"]) == 16


def test_ablation_without_disentangling_has_no_estimator(small_synth, small_mltm):
    ck = train(small_synth.dataset, small_mltm, small_synth.embeddings, tc(epochs=1, use_disentangled_transformer=False), fc())
    assert "estimator" not in ck.groups
    model, *_ = model_from_checkpoint(ck)
    assert not model.disentangled


def test_non_finite_loss_keeps_last_good_state(monkeypatch, small_synth, small_mltm):
    import medfuse.training as training

    real = training.focal_loss
    calls = {"n": 0}
    n_batches = -(-len(small_synth.dataset.split_indices("train")) // 64)

    def flaky(*args, **kw):
        calls["n"] += 1
        out = real(*args, **kw)
        return out * float("nan") if calls["n"] > n_batches else out

    monkeypatch.setattr(training, "focal_loss", flaky)
    with pytest.raises(TrainingDiverged) as info:
        train(small_synth.dataset, small_mltm, small_synth.embeddings, tc(), fc())
    last = info.value.last_state
    assert isinstance(last, ckpt_io.Checkpoint) and last.meta["epoch"] == 1


def test_mltm_encoder_is_not_updated(small_synth, small_mltm):
    ck = train(small_synth.dataset, small_mltm, small_synth.embeddings, tc(epochs=1), fc())
    for name, arr in small_mltm.groups["mltm"].items():
        assert np.array_equal(ck.groups["mltm"][name], arr)


# -- evaluation ------------------------------------------------------------------

def test_evaluate_and_record(small_synth, small_mltm):
    ck = train(small_synth.dataset, small_mltm, small_synth.embeddings, tc(), fc())
    rep = evaluate(ck, small_synth.dataset, small_synth.embeddings)
    assert rep.n_samples == len(small_synth.dataset.split_indices("valid"))
    again = evaluate(ck, small_synth.dataset, small_synth.embeddings)
    assert rep.to_dict() == again.to_dict()
    record = json.loads(metrics_record(rep, ck, 0.5, "valid"))
    assert record["config_hash"] == ck.meta["config_hash"] and record["seed"] == ck.seed
    assert {"precision", "recall", "f1_macro", "f1_weighted", "accuracy", "per_label"} <= set(record)
    all_rows = evaluate(ck, small_synth.dataset, small_synth.embeddings, split=None)
    assert all_rows.n_samples == len(small_synth.dataset)


def test_evaluate_threshold_extremes(small_synth, small_mltm):
    ck = train(small_synth.dataset, small_mltm, small_synth.embeddings, tc(epochs=1), fc())
    everything = evaluate(ck, small_synth.dataset, small_synth.embeddings, threshold=0.0)
    assert everything.recall == 1.0
    nothing = evaluate(ck, small_synth.dataset, small_synth.embeddings, threshold=1.0)
    assert nothing.recall == 0.0
