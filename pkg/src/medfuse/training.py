"""Fusion training with alternating estimator/main updates, checkpoint
resume, evaluation metrics and a finite-difference gradient checker."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from medfuse import checkpoint as ckpt_io
from medfuse.ehr_data import TEXT_SECTIONS, EHRDataset, NormalizationStats, normalize_arrays
from medfuse.layers import seeded_init
from medfuse.fusion import (
    ConfigError,
    DisentangledFusion,
    FusionConfig,
    MiEstimator,
    estimator_log_likelihood,
    focal_loss,
    output_mi_inputs,
    vclub,
)
from medfuse.mltm import MLTM, MltmConfig, TrainingDiverged, embed_panels, mltm_from_checkpoint
from medfuse.text_embed import EmbeddingStore, gather_text_embeddings
from medfuse.utils import config_hash

NOTE_TOKENS = len(TEXT_SECTIONS) - 1


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 256
    epochs: int = 20
    lr: float = 2e-3
    estimator_lr: float = 1e-2
    estimator_steps: int = 1  # k
    use_text: bool = True
    use_labtext: bool = True
    use_mltm: bool = True
    use_disentangled_transformer: bool = True
    threshold: float = 0.5
    grad_clip: float = 0.0  # max grad norm for the main step; 0 disables

    def validate(self, lam: float) -> None:
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if lam > 0 and self.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2 when fusion.lam > 0")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if not (self.lr > 0 and self.estimator_lr > 0):
            raise ConfigError("train.lr and train.estimator_lr must be > 0")
        if self.estimator_steps < 0:
            raise ConfigError("train.estimator_steps must be >= 0")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("train.threshold must be in [0, 1]")


# -- features --------------------------------------------------------------------

@dataclass
class FeatureSet:
    """Frozen-encoder inputs for every visit: raw text vectors and MLTM tokens."""

    text_raw: torch.Tensor  # (n, a, d_text)
    text_valid: torch.Tensor  # (n, a)
    lab_raw: torch.Tensor  # (n, b, d_lab)
    lab_valid: torch.Tensor  # (n, b)
    labels: torch.Tensor  # (n, L) float

    def __len__(self) -> int:
        return self.labels.shape[0]

    def take(self, idx) -> "FeatureSet":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return FeatureSet(self.text_raw[idx], self.text_valid[idx], self.lab_raw[idx], self.lab_valid[idx], self.labels[idx])


def build_features(
    ds: EHRDataset,
    store: EmbeddingStore | None,
    mltm: MLTM | None,
    stats: NormalizationStats | None,
    tc: TrainConfig,
    fc: FusionConfig,
) -> FeatureSet:
    """Assemble modality inputs; disabled paths become all-invalid padding."""
    n = len(ds)
    if fc.a_tokens != len(TEXT_SECTIONS):
        raise ConfigError(f"fusion.a_tokens must be {len(TEXT_SECTIONS)} (four note sections + lab text)")
    if store is not None:
        raw, valid = gather_text_embeddings(ds.visit_ids, store, TEXT_SECTIONS)
    else:
        raw = np.zeros((n, len(TEXT_SECTIONS), 1), np.float32)
        valid = np.zeros((n, len(TEXT_SECTIONS)), bool)
    if not tc.use_text:
        valid[:, :NOTE_TOKENS] = False
    if not tc.use_labtext:
        valid[:, NOTE_TOKENS:] = False
    raw = np.where(valid[..., None], raw, 0.0).astype(np.float32)

    if tc.use_mltm:
        if mltm is None or stats is None:
            raise ConfigError("use_mltm requires a pretrained MLTM checkpoint")
        z, obs = normalize_arrays(ds.values, ds.observed, stats)
        lab = embed_panels(mltm, z, obs, fc.b_tokens)
        lab_raw, lab_valid = lab.tokens, lab.valid
    else:
        d_lab = mltm.config.d_model if mltm is not None else 1
        lab_raw = torch.zeros(n, fc.b_tokens, d_lab)
        lab_valid = torch.zeros(n, fc.b_tokens, dtype=torch.bool)
    labels = torch.from_numpy(ds.labels.astype(np.float32))
    return FeatureSet(torch.from_numpy(raw), torch.from_numpy(valid), lab_raw, lab_valid, labels)


# -- training --------------------------------------------------------------------

@dataclass
class TrainState:
    model: DisentangledFusion
    estimator: MiEstimator | None
    opt: torch.optim.Optimizer
    est_opt: torch.optim.Optimizer | None
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


def _make_state(fc: FusionConfig, tc: TrainConfig, d_text: int, d_lab: int) -> TrainState:
    fc = FusionConfig(**{**asdict(fc), "seed": tc.seed})
    model = DisentangledFusion(fc, d_text, d_lab, disentangled=tc.use_disentangled_transformer)
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr)
    estimator = est_opt = None
    if tc.use_disentangled_transformer:
        estimator = MiEstimator(2 * fc.d_model, fc.d_model, fc.estimator_hidden)
        seeded_init(estimator, tc.seed + 7919)
        est_opt = torch.optim.Adam(estimator.parameters(), lr=tc.estimator_lr)
    return TrainState(model, estimator, opt, est_opt)


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    # keyed on (seed, epoch) so a resumed run sees the same batch order
    return np.random.default_rng([seed, 2, epoch]).permutation(n)


def _batches(perm: np.ndarray, batch_size: int):
    for s in range(0, len(perm), batch_size):
        yield perm[s : s + batch_size]


def train_epoch(state: TrainState, feats: FeatureSet, tc: TrainConfig, fc: FusionConfig) -> dict:
    model, est = state.model, state.estimator
    perm = epoch_permutation(tc.seed, state.epoch, len(feats))
    sums = {"focal": 0.0, "mi": 0.0, "estimator_ll": 0.0, "total": 0.0}
    count = 0
    model.train()
    for b in _batches(perm, tc.batch_size):
        batch = feats.take(b)
        use_mi = est is not None and len(b) >= 2
        # main parameters are unchanged by the estimator step, so a single
        # forward serves both halves of the alternation
        out = model(batch.text_raw, batch.text_valid, batch.lab_raw, batch.lab_valid)
        if use_mi:
            x, y = output_mi_inputs(out)
            if tc.estimator_steps > 0:
                xd, yd = x.detach(), y.detach()
                for _ in range(tc.estimator_steps):
                    ll = estimator_log_likelihood(xd, yd, est)
                    state.est_opt.zero_grad(set_to_none=True)
                    (-ll).backward()
                    state.est_opt.step()
                sums["estimator_ll"] += float(ll.detach()) * len(b)
        focal = focal_loss(out.logits, batch.labels, fc.gamma, fc.alpha)
        loss = focal
        mi = torch.zeros(())
        if use_mi and fc.lam > 0:
            mi = vclub(x, y, est, frozen=True)
            loss = focal + fc.lam * mi
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at epoch {state.epoch}")
        state.opt.zero_grad(set_to_none=True)
        loss.backward()
        if tc.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
        state.opt.step()
        sums["focal"] += float(focal.detach()) * len(b)
        sums["mi"] += float(mi.detach()) * len(b)
        sums["total"] += float(loss.detach()) * len(b)
        count += len(b)
    model.eval()
    return {k: v / max(count, 1) for k, v in sums.items()}


def train(
    ds: EHRDataset,
    mltm_ckpt: ckpt_io.Checkpoint | None,
    store: EmbeddingStore | None,
    tc: TrainConfig,
    fc: FusionConfig,
    resume: ckpt_io.Checkpoint | None = None,
    stop_after: int | None = None,
    log: Callable[[str], None] | None = None,
) -> ckpt_io.Checkpoint:
    """Train the fusion model on the ``train`` split and return a checkpoint.

    Per batch: ``k`` estimator steps maximise the conditional log-likelihood
    with the main network frozen, then one main step minimises focal loss
    plus ``lam`` times the vCLUB bound with the estimator frozen.  The MLTM
    encoder is never updated.  ``stop_after`` ends the run early at that
    epoch count (the checkpoint still records the full ``tc``), which is how
    partial runs for resume are produced.
    """
    fc.validate()
    tc.validate(fc.lam)
    if fc.n_labels != ds.n_labels:
        raise ConfigError(f"fusion.n_labels is {fc.n_labels} but the dataset has {ds.n_labels} labels")
    mltm = stats = None
    if mltm_ckpt is not None:
        mltm, stats, _ = mltm_from_checkpoint(mltm_ckpt)
    elif tc.use_mltm:
        raise ConfigError("use_mltm requires a pretrained MLTM checkpoint")
    if store is None and (tc.use_text or tc.use_labtext):
        raise ConfigError("text paths enabled but no embedding store given")

    feats = build_features(ds, store, mltm, stats, tc, fc)
    train_idx = ds.split_indices("train")
    train_feats = feats.take(train_idx)
    d_text, d_lab = feats.text_raw.shape[-1], feats.lab_raw.shape[-1]

    state = _make_state(fc, tc, d_text, d_lab)
    if resume is not None:
        _restore(state, resume)
    last_good = _to_checkpoint(state, tc, fc, mltm_ckpt, stats, d_text, d_lab)
    end = tc.epochs if stop_after is None else min(stop_after, tc.epochs)
    while state.epoch < end:
        try:
            stats_epoch = train_epoch(state, train_feats, tc, fc)
        except FloatingPointError as exc:
            raise TrainingDiverged(str(exc), last_state=last_good, history=state.history) from exc
        state.epoch += 1
        state.history.append(stats_epoch)
        if log is not None:
            log(
                f"epoch {state.epoch}/{tc.epochs} focal {stats_epoch['focal']:.5f} "
                f"mi {stats_epoch['mi']:.5f} est_ll {stats_epoch['estimator_ll']:.4f}"
            )
        last_good = _to_checkpoint(state, tc, fc, mltm_ckpt, stats, d_text, d_lab)
    return last_good


def _to_checkpoint(state, tc, fc, mltm_ckpt, stats, d_text, d_lab) -> ckpt_io.Checkpoint:
    groups = {"fusion": ckpt_io.module_arrays(state.model)}
    opt_arrays, opt_steps = ckpt_io.optimizer_arrays(state.opt, state.model)
    groups["optim.main"] = opt_arrays
    meta = {
        "epoch": state.epoch,
        "history": state.history,
        "optimizer_steps": {"main": opt_steps},
        "d_text": int(d_text),
        "d_lab": int(d_lab),
    }
    if state.estimator is not None:
        groups["estimator"] = ckpt_io.module_arrays(state.estimator)
        est_arrays, est_steps = ckpt_io.optimizer_arrays(state.est_opt, state.estimator)
        groups["optim.estimator"] = est_arrays
        meta["optimizer_steps"]["estimator"] = est_steps
    mltm_config = None
    if mltm_ckpt is not None:
        groups["mltm"] = mltm_ckpt.groups["mltm"]
        mltm_config = mltm_ckpt.config
        meta["mltm_meta"] = mltm_ckpt.meta
    if stats is not None:
        meta["normalization"] = stats.to_dict()
    config = {"train": asdict(tc), "fusion": asdict(fc), "mltm": mltm_config}
    meta["config_hash"] = config_hash(config)
    return ckpt_io.Checkpoint("fusion", config, tc.seed, groups, meta)


def _restore(state: TrainState, ck: ckpt_io.Checkpoint) -> None:
    if ck.component != "fusion":
        raise ckpt_io.CheckpointError(f"cannot resume from a {ck.component!r} checkpoint")
    ckpt_io.load_module(state.model, ck.groups["fusion"])
    ckpt_io.restore_optimizer(state.opt, state.model, ck.groups.get("optim.main", {}), ck.meta["optimizer_steps"]["main"])
    if state.estimator is not None:
        ckpt_io.load_module(state.estimator, ck.groups["estimator"])
        ckpt_io.restore_optimizer(
            state.est_opt, state.estimator, ck.groups.get("optim.estimator", {}), ck.meta["optimizer_steps"]["estimator"]
        )
    state.epoch = int(ck.meta["epoch"])
    state.history = list(ck.meta["history"])


def model_from_checkpoint(ck: ckpt_io.Checkpoint):
    """Rebuild ``(fusion_model, mltm, stats, tc, fc)`` for inference."""
    if ck.component != "fusion":
        raise ckpt_io.CheckpointError(f"expected a fusion checkpoint, found {ck.component!r}")
    tc = TrainConfig(**ck.config["train"])
    fc = FusionConfig(**ck.config["fusion"])
    model = DisentangledFusion(fc, ck.meta["d_text"], ck.meta["d_lab"], disentangled=tc.use_disentangled_transformer)
    ckpt_io.load_module(model, ck.groups["fusion"])
    model.eval()
    mltm = stats = None
    if ck.config.get("mltm") is not None:
        mltm = MLTM(MltmConfig(**ck.config["mltm"]))
        ckpt_io.load_module(mltm, ck.groups["mltm"])
        mltm.eval()
    if "normalization" in ck.meta:
        stats = NormalizationStats.from_dict(ck.meta["normalization"])
    return model, mltm, stats, tc, fc


# -- metrics ---------------------------------------------------------------------

@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1_macro: float
    f1_weighted: float
    accuracy: float
    per_label: list[dict]
    support: list[int]
    n_samples: int

    def headline(self) -> dict:
        return {k: getattr(self, k) for k in ("precision", "recall", "f1_macro", "f1_weighted", "accuracy")}

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den > 0 else 0.0


def compute_metrics(pred: np.ndarray, truth: np.ndarray, label_names: Sequence[str] | None = None) -> MetricsReport:
    """Per-label precision/recall/F1 (0/0 -> 0), macro means, support-weighted
    F1 and label-wise (Hamming) accuracy."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ValueError(f"pred {pred.shape} and truth {truth.shape} must be matching (n, L) arrays")
    if pred.shape[0] < 1:
        raise ValueError("compute_metrics needs at least one sample")
    tp = (pred & truth).sum(axis=0)
    fp = (pred & ~truth).sum(axis=0)
    fn = (~pred & truth).sum(axis=0)
    support = truth.sum(axis=0)
    per_label = []
    precisions, recalls, f1s = [], [], []
    for j in range(pred.shape[1]):
        p = _ratio(tp[j], tp[j] + fp[j])
        r = _ratio(tp[j], tp[j] + fn[j])
        f = _ratio(2 * tp[j], 2 * tp[j] + fp[j] + fn[j])
        precisions.append(p)
        recalls.append(r)
        f1s.append(f)
        per_label.append({
            "label": label_names[j] if label_names else str(j),
            "precision": p, "recall": r, "f1": f,
            "support": int(support[j]), "tp": int(tp[j]), "fp": int(fp[j]), "fn": int(fn[j]),
        })
    total = support.sum()
    f1_weighted = float(np.dot(f1s, support) / total) if total > 0 else 0.0
    return MetricsReport(
        precision=float(np.mean(precisions)),
        recall=float(np.mean(recalls)),
        f1_macro=float(np.mean(f1s)),
        f1_weighted=f1_weighted,
        accuracy=float((pred == truth).mean()),
        per_label=per_label,
        support=[int(s) for s in support],
        n_samples=int(pred.shape[0]),
    )


@torch.no_grad()
def predict_logits(model: DisentangledFusion, feats: FeatureSet, batch_size: int = 1024) -> torch.Tensor:
    out = []
    for s in range(0, len(feats), batch_size):
        b = feats.take(np.arange(s, min(s + batch_size, len(feats))))
        out.append(model(b.text_raw, b.text_valid, b.lab_raw, b.lab_valid).logits)
    return torch.cat(out) if out else torch.zeros(0, model.config.n_labels)


def evaluate(
    ck: ckpt_io.Checkpoint,
    ds: EHRDataset,
    store: EmbeddingStore | None,
    threshold: float | None = None,
    split: str | None = "valid",
) -> MetricsReport:
    """Metrics of ``sigmoid(logits) >= threshold`` on one split (or all rows)."""
    model, mltm, stats, tc, fc = model_from_checkpoint(ck)
    idx = ds.split_indices(split) if split else np.arange(len(ds))
    if len(idx) == 0:
        raise ValueError(f"no visits in split {split!r}")
    sub = ds.subset(idx)
    feats = build_features(sub, store, mltm, stats, tc, fc)
    tau = tc.threshold if threshold is None else threshold
    probs = torch.sigmoid(predict_logits(model, feats)).numpy()
    return compute_metrics(probs >= tau, sub.labels, sub.label_names)


def metrics_record(report: MetricsReport, ck: ckpt_io.Checkpoint, threshold: float, split: str | None) -> str:
    record = {
        **report.headline(),
        "per_label": report.per_label,
        "n_samples": report.n_samples,
        "threshold": threshold,
        "split": split,
        "config_hash": ck.meta.get("config_hash", config_hash(ck.config)),
        "seed": ck.seed,
    }
    return json.dumps(record, sort_keys=True) + "\n"


# -- gradient check --------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_coords: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 6e-6,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd against central differences coordinate by coordinate.

    The default step is about the cube root of float64 machine epsilon, which
    balances truncation against roundoff for central differences.

    Relative error per coordinate is ``|a - f| / max(|a|, |f|, floor)``; the
    floor keeps near-zero gradients from dominating.
    """
    params = list(params)
    analytic = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    max_rel = max_abs = 0.0
    n = 0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                a = float(gflat[i])
                err = abs(a - fd)
                max_abs = max(max_abs, err)
                max_rel = max(max_rel, err / max(abs(a), abs(fd), floor))
                n += 1
    return GradCheckReport(max_rel, max_abs, n, tolerance)

