"""Acceptance criteria, one test each.  Every test records a PASS/FAIL line
that is printed in the terminal summary.  The slow ones (#1, #4, #8, #11)
take roughly 9 minutes together on one CPU core."""

import json
import statistics
import time

import numpy as np
import pytest
import torch

import oracles
from medfuse import checkpoint as ckpt_io
from medfuse import config as run_config
from medfuse.ehr_data import GenConfig, LabPanel, normalize_arrays, fit_normalization_arrays, render_abnormal_text, parse_lab_csv, synth_generate
from medfuse.fusion import FusionConfig, MiEstimator, estimator_log_likelihood, focal_loss, kronecker_joint, vclub
from medfuse.layers import seeded_init
from medfuse.mltm import (
    MLTM,
    MltmConfig,
    decode,
    encode,
    masked_value_mse,
    pretrain,
    pretrain_dataset,
    reconstruction_loss,
    sample_mask,
    sample_mask_arrays,
)
from medfuse.training import TrainConfig, compute_metrics, evaluate, train
from medfuse.verify import check_focal, check_forward_jacobian, check_vclub, gaussian_mi, mi_bench


def _random_panel(rng, D):
    while True:
        obs = rng.random(D) < rng.uniform(0.2, 1.0)
        if obs.sum() >= 2:
            return LabPanel(np.where(obs, rng.standard_normal(D), 0.0), obs, np.zeros(D, bool))


def _half_up(x):
    return int(np.floor(x + 0.5))


# 1 -------------------------------------------------------------------------------

@pytest.mark.slow
def test_01_vclub_on_correlated_gaussians(criterion):
    parts, ok = [], True
    for rho in (0.0, 0.5, 0.8):
        t0 = time.perf_counter()
        res = mi_bench(rho, dim=1, seed=0)
        elapsed = time.perf_counter() - t0
        mi = gaussian_mi(rho)
        if rho == 0.0:
            good = abs(res.estimate) <= 0.10
        else:
            good = mi - 0.05 <= res.estimate <= mi + 0.30
        good = good and elapsed <= 120
        ok = ok and good
        parts.append(f"rho={rho} est={res.estimate:.4f} MI={mi:.4f} ({elapsed:.0f}s) {'ok' if good else 'out of band'}")
    criterion(1, "vCLUB Gaussian oracle", ok, "; ".join(parts))


# 2 -------------------------------------------------------------------------------

def test_02_vclub_identities(criterion):
    rng = np.random.default_rng(0)
    est = MiEstimator(3, 2, 16).double()
    seeded_init(est, 0)
    single = [vclub(torch.from_numpy(rng.standard_normal((1, 3))), torch.from_numpy(rng.standard_normal((1, 2))), est).item()
              for _ in range(100)]
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 20))
        x, y = torch.from_numpy(rng.standard_normal((n, 3))), torch.from_numpy(rng.standard_normal((n, 2)))
        mu, logvar = est(x)
        want = oracles.vclub_double_sum(mu.tolist(), logvar.tolist(), y.tolist())
        worst = max(worst, abs(vclub(x, y, est).item() - want))
    ok = all(v == 0.0 for v in single) and worst <= 1e-10
    criterion(2, "vCLUB identities", ok, f"N=1 values all exactly 0: {all(v == 0.0 for v in single)}; max |double-sum - mean form| = {worst:.1e}")


# 3 -------------------------------------------------------------------------------

def test_03_masking_invariants(criterion):
    rng = np.random.default_rng(1)
    D = 16
    model = MLTM(MltmConfig(n_items=D, d_model=16, encoder_depth=2, decoder_depth=1, heads=2)).eval()
    bad_count = bad_leak = 0
    for _ in range(1000):
        panel = _random_panel(rng, D)
        spec = sample_mask(panel, 0.75, rng)
        n = len(spec.observed_idx)
        if len(spec.masked_idx) != min(max(_half_up(0.75 * n), 1), n - 1):
            bad_count += 1
        moved = LabPanel(panel.values.copy(), panel.observed, panel.abnormal)
        moved.values[spec.masked_idx] += rng.normal(0, 1e3, len(spec.masked_idx))
        with torch.no_grad():
            la, lb = encode(panel, spec, model), encode(moved, spec, model)
            if not (torch.equal(la, lb) and torch.equal(decode(la, spec, model), decode(lb, spec, model))):
                bad_leak += 1
    observed = np.zeros((10_000, 12), bool)
    observed[:, [0, 1, 3, 4, 6, 7, 9, 11]] = True
    masked = sample_mask_arrays(observed, 0.75, np.random.default_rng(2))
    freq = masked[:, observed[0]].mean(axis=0)
    worst = float(np.abs(freq - 0.75).max())
    ok = bad_count == 0 and bad_leak == 0 and worst <= 0.02
    criterion(3, "masking invariants", ok,
              f"cardinality mismatches {bad_count}/1000; masked-value leaks {bad_leak}/1000; max |freq - 0.75| = {worst:.4f}")


# 4 -------------------------------------------------------------------------------

@pytest.mark.slow
def test_04_lab_reconstruction_beats_mean_imputation(criterion):
    gen = GenConfig(n_samples=6250, n_items=32, k_shared=2, k_lab=2, k_text=0, noise=0.1, missing_rate=0.1)
    ds = synth_generate(gen, 0).dataset
    tr, va = ds.split_indices("train"), ds.split_indices("valid")
    stats = fit_normalization_arrays(ds.values[tr], ds.observed[tr])
    z, o = normalize_arrays(ds.values, ds.observed, stats)
    t0 = time.perf_counter()
    result = pretrain(z[tr], o[tr], MltmConfig(n_items=32, epochs=20), seed=0, time_budget=300)
    elapsed = time.perf_counter() - t0
    keep = o[va].sum(axis=1) >= 2
    zv, ov = z[va][keep], o[va][keep]
    masked = sample_mask_arrays(ov, 0.75, np.random.default_rng(5))
    col_mean = np.where(o[tr], z[tr], 0.0).sum(axis=0) / o[tr].sum(axis=0)
    baseline = float(np.mean((np.broadcast_to(col_mean, zv.shape)[masked] - zv[masked]) ** 2))
    mse = masked_value_mse(result.model, zv, ov, masked)
    ok = mse <= 0.5 * baseline and elapsed <= 300 + 30
    criterion(4, "lab reconstruction", ok,
              f"{len(tr)} train panels, masked MSE {mse:.4f} vs mean imputation {baseline:.4f} "
              f"(ratio {mse / baseline:.3f}), {len(result.history)} epochs in {elapsed:.0f}s")


# 5 -------------------------------------------------------------------------------

def test_05_gradient_checks(criterion):
    t0 = time.perf_counter()
    reports = {
        "focal/float32": check_focal(seed=0, dtype=torch.float32),
        "focal/float64": check_focal(seed=0, dtype=torch.float64),
        "vclub/float64": check_vclub(seed=0),
        "forward/float64": check_forward_jacobian(seed=0),
    }
    elapsed = time.perf_counter() - t0
    ok = all(r.passed for r in reports.values()) and elapsed < 60
    detail = "; ".join(f"{k} rel {r.max_rel_error:.1e} (tol {r.tolerance:.0e})" for k, r in reports.items())
    criterion(5, "gradient checks", ok, f"{detail}; {elapsed:.1f}s")


# 6 -------------------------------------------------------------------------------

def test_06_brute_force_equivalence(criterion):
    rng = np.random.default_rng(6)
    kron = metrics = recon = loglik = 0.0
    est = MiEstimator(4, 3, 16).double()
    seeded_init(est, 6)
    for _ in range(100):
        a, b = rng.standard_normal(int(rng.integers(1, 8))), rng.standard_normal(int(rng.integers(1, 8)))
        got = kronecker_joint(torch.from_numpy(a), torch.from_numpy(b)).numpy()
        kron = max(kron, float(np.abs(got - np.array(oracles.outer(a.tolist(), b.tolist()))).max()))

        pred, truth = rng.random((20, 6)) < 0.5, rng.random((20, 6)) < 0.4
        rep, want = compute_metrics(pred, truth), oracles.label_metrics(pred.tolist(), truth.tolist())
        metrics = max(metrics, *(abs(getattr(rep, k) - want[k]) for k in ("precision", "recall", "f1_macro", "f1_weighted", "accuracy")))

        panel = _random_panel(rng, 12)
        spec = sample_mask(panel, 0.75, rng)
        r = rng.standard_normal(len(spec.observed_idx))
        want_r = oracles.reconstruction_mse(r.tolist(), panel.values.tolist(), spec.observed_idx.tolist())
        recon = max(recon, abs(reconstruction_loss(torch.from_numpy(r), panel, spec).item() - want_r))

        x, y = torch.from_numpy(rng.standard_normal((5, 4))), torch.from_numpy(rng.standard_normal((5, 3)))
        mu, logvar = est(x)
        want_l = oracles.mean_loglik(mu.tolist(), logvar.tolist(), y.tolist())
        loglik = max(loglik, abs(estimator_log_likelihood(x, y, est).item() - want_l))
    ok = kron == 0.0 and metrics <= 1e-10 and recon <= 1e-10 and loglik <= 1e-10
    criterion(6, "brute-force equivalence", ok,
              f"max error kronecker {kron:.1e}, metrics {metrics:.1e}, reconstruction {recon:.1e}, log-likelihood {loglik:.1e}")


# 7 -------------------------------------------------------------------------------

def test_07_focal_reduces_to_half_bce(criterion):
    rng = np.random.default_rng(7)
    logits, labels = rng.normal(0, 4, 1000), rng.random(1000) < 0.5
    worst = 0.0
    for z, y in zip(logits, labels):
        got = focal_loss(torch.tensor([[z]]), torch.tensor([[bool(y)]]), gamma=0.0, alpha=0.5).item()
        worst = max(worst, abs(got - 0.5 * oracles.bce(z, y)))
    criterion(7, "focal degeneracy", worst <= 1e-6, f"max |focal - 0.5*BCE| over 1000 pairs = {worst:.1e}")


# 8 -------------------------------------------------------------------------------

ABLATIONS = {
    "full": {},
    "w/o TEXT": {"use_text": False},
    "w/o MLTM & TEXT": {"use_text": False, "use_mltm": False},
}


@pytest.mark.slow
def test_08_fusion_beats_single_modality_ablations(criterion):
    t0 = time.perf_counter()
    scores = {name: [] for name in ABLATIONS}
    stable = True
    for seed in (0, 1, 2):
        syn = synth_generate(GenConfig(n_samples=10_000, n_labels=10), seed)
        mltm_ck, _ = pretrain_dataset(syn.dataset, MltmConfig(n_items=32, epochs=8, encoder_depth=3, decoder_depth=1), seed=seed)
        for name, flags in ABLATIONS.items():
            ck = train(syn.dataset, mltm_ck, syn.embeddings, TrainConfig(seed=seed, epochs=15, **flags), FusionConfig(lam=0.1))
            scores[name].append(evaluate(ck, syn.dataset, syn.embeddings).f1_macro)
            if name == "full":
                hist = ck.meta["history"]
                finite = all(np.isfinite(v) for rec in hist for v in rec.values())
                stable = stable and finite and hist[-1]["focal"] < hist[0]["focal"]
    elapsed = time.perf_counter() - t0
    med = {name: statistics.median(v) for name, v in scores.items()}
    gaps = [med["full"] - med[name] for name in ABLATIONS if name != "full"]
    ok = min(gaps) >= 0.03 and elapsed < 15 * 60 and stable
    per_seed = ", ".join(f"{k} {[round(s, 4) for s in v]}" for k, v in scores.items())
    criterion(8, "fusion benefit", ok,
              f"median macro-F1 full {med['full']:.4f}, w/o TEXT {med['w/o TEXT']:.4f}, "
              f"w/o MLTM & TEXT {med['w/o MLTM & TEXT']:.4f}; smallest gap {min(gaps):.4f}; "
              f"lambda=0.1 stable {stable}; {elapsed:.0f}s ({per_seed})")


# 9 -------------------------------------------------------------------------------

def test_09_template_golden(criterion, fixtures_dir):
    results = []
    for stem, vocab_file in (("labtext", "labtext_vocab.txt"), ("labtext_mixed", "labtext_mixed_vocab.txt")):
        csv_name = "labtext_panel.csv" if stem == "labtext" else "labtext_mixed.csv"
        vocab = (fixtures_dir / vocab_file).read_text().split()
        parsed = parse_lab_csv((fixtures_dir / csv_name).read_bytes(), vocab)
        text = render_abnormal_text(parsed.panels[0][2], vocab, parsed.units)
        results.append(text.encode() == (fixtures_dir / f"{stem}_golden.txt").read_bytes())
    criterion(9, "template golden", all(results), f"{sum(results)}/{len(results)} golden strings byte-identical")


# 10 ------------------------------------------------------------------------------

def test_10_determinism_and_resume(criterion, tmp_path, small_synth, small_mltm):
    fc = FusionConfig(d_model=16, heads=2, b_tokens=12, joint_tokens=2, estimator_hidden=16, g_hidden=16, n_labels=4)
    args = (small_synth.dataset, small_mltm, small_synth.embeddings)
    ten = TrainConfig(seed=4, epochs=10, batch_size=64)
    a, b = train(*args, ten, fc), train(*args, ten, fc)
    same = ckpt_io.dumps(a) == ckpt_io.dumps(b)
    five = train(*args, ten, fc, stop_after=5)
    ckpt_io.save(tmp_path / "five.ckpt", five)
    resumed = train(*args, ten, fc, resume=ckpt_io.load(tmp_path / "five.ckpt"))
    resume_ok = ckpt_io.dumps(resumed) == ckpt_io.dumps(a)
    criterion(10, "determinism and resume", same and resume_ok,
              f"same-seed checkpoints identical {same}; train 5 + resume 5 identical to train 10 {resume_ok}")


# 11 ------------------------------------------------------------------------------

@pytest.mark.slow
def test_11_cli_pipeline(criterion, tmp_path, capsys):
    from medfuse.cli import main

    cfg = tmp_path / "run.ini"
    run_config.save(cfg, run_config.RunConfig())
    data, mltm, model, report = (tmp_path / p for p in ("data", "mltm.ckpt", "fusion.ckpt", "metrics.json"))
    steps = [
        ["synth", "--config", cfg, "--out", data, "--seed", 0],
        ["pretrain-mltm", "--data", data, "--config", cfg, "--out", mltm],
        ["train", "--data", data, "--mltm", mltm, "--config", cfg, "--out", model],
        ["evaluate", "--ckpt", model, "--data", data, "--report", report],
    ]
    t0 = time.perf_counter()
    codes = [main([str(a) for a in step]) for step in steps]
    elapsed = time.perf_counter() - t0
    capsys.readouterr()
    well_formed = False
    if report.exists():
        rec = json.loads(report.read_text())
        keys = {"precision", "recall", "f1_macro", "f1_weighted", "accuracy", "per_label", "config_hash", "seed"}
        well_formed = keys <= set(rec) and all(0.0 <= rec[k] <= 1.0 for k in ("precision", "recall", "f1_macro", "f1_weighted", "accuracy"))
    ok = codes == [0, 0, 0, 0] and well_formed and elapsed < 600
    criterion(11, "CLI pipeline", ok, f"exit codes {codes}, report well-formed {well_formed}, {elapsed:.0f}s")
