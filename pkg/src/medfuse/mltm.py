"""Masked lab-test modelling: a masked autoencoder over lab panels.

Each visible lab value ``x_i`` is embedded as ``(w_i * x_i + b_i) * u + c``
plus a learned positional row for item ``i``; a deep transformer encodes the
visible tokens, a shallow decoder re-inserts a shared mask token at the
re-masked positions and regresses every observed value.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from medfuse import checkpoint as ckpt_io
from medfuse.ehr_data import DataError, EHRDataset, LabPanel, NormalizationStats, fit_normalization_arrays, normalize_arrays
from medfuse.layers import TransformerBlock, mark_table, seeded_init


class ConfigError(ValueError):
    pass


class SkipRecord(ValueError):
    """Panel has too few observed values to be masked."""


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_state: dict | None = None, history: list | None = None):
        super().__init__(message)
        self.last_state = last_state
        self.history = history or []


@dataclass
class MltmConfig:
    n_items: int = 32  # D
    d_model: int = 32
    encoder_depth: int = 6
    decoder_depth: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    mask_ratio: float = 0.75
    epochs: int = 40
    lr: float = 2e-3
    batch_size: int = 128
    min_support: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.n_items < 1:
            raise ConfigError("mltm.n_items must be >= 1")
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads:
            raise ConfigError("mltm.d_model must be a positive multiple of mltm.heads")
        if self.decoder_depth < 1:
            raise ConfigError("mltm.decoder_depth must be >= 1")
        if not self.decoder_depth < self.encoder_depth:
            raise ConfigError("mltm.decoder_depth must be < mltm.encoder_depth")
        if not 0 < self.mask_ratio < 1:
            raise ConfigError("mltm.mask_ratio must be in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("mltm.epochs/batch_size/lr out of range")


@dataclass
class MaskSpec:
    observed_idx: np.ndarray
    masked_idx: np.ndarray
    visible_idx: np.ndarray = field(default=None)

    def __post_init__(self):
        self.observed_idx = np.asarray(self.observed_idx, dtype=np.int64)
        self.masked_idx = np.asarray(self.masked_idx, dtype=np.int64)
        if self.visible_idx is None:
            self.visible_idx = np.setdiff1d(self.observed_idx, self.masked_idx)
        self.visible_idx = np.asarray(self.visible_idx, dtype=np.int64)


def mask_count(n_observed: int, ratio: float) -> int:
    """``round(ratio * n)`` (half away from zero), clamped to ``[1, n - 1]``."""
    m = int(math.floor(ratio * n_observed + 0.5))
    return min(max(m, 1), n_observed - 1)


def sample_mask_arrays(observed: np.ndarray, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Vectorised re-masking: returns the ``(B, D)`` boolean artificial mask.

    Rows need >= 2 observed entries.  Each row draws one uniform key per
    slot; the ``m`` observed slots with the smallest keys are masked.
    """
    observed = np.asarray(observed, dtype=bool)
    n_obs = observed.sum(axis=1)
    if np.any(n_obs < 2):
        raise SkipRecord("panel with fewer than 2 observed values")
    keys = rng.random(observed.shape)
    keys = np.where(observed, keys, np.inf)
    order = np.argsort(keys, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(observed.shape[1])[None, :].repeat(observed.shape[0], 0), axis=1)
    m = np.array([mask_count(int(k), ratio) for k in n_obs])
    return (ranks < m[:, None]) & observed


def sample_mask(panel: LabPanel, mask_ratio: float, rng: np.random.Generator) -> MaskSpec:
    masked = sample_mask_arrays(panel.observed[None, :], mask_ratio, rng)[0]
    return MaskSpec(panel.observed_idx, np.flatnonzero(masked))


def gather_tokens(visible: torch.Tensor):
    """Indices of visible slots per row, ascending, padded to the row max."""
    counts = visible.sum(dim=1)
    width = max(int(counts.max()) if counts.numel() else 0, 1)
    # stable sort puts visible slots first, each group in ascending index order
    order = torch.sort((~visible).to(torch.int8), dim=1, stable=True).indices[:, :width]
    valid = torch.arange(width)[None, :] < counts[:, None]
    return order, valid


class MLTM(nn.Module):
    def __init__(self, config: MltmConfig):
        super().__init__()
        config.validate()
        self.config = config
        D, d = config.n_items, config.d_model
        self.value_w = nn.Parameter(torch.ones(D))
        self.value_b = nn.Parameter(torch.zeros(D))
        self.lift = nn.Linear(1, d)
        self.pos = mark_table(nn.Parameter(torch.zeros(D, d)))
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.encoder = nn.ModuleList(TransformerBlock(d, config.heads, config.mlp_ratio) for _ in range(config.encoder_depth))
        self.enc_norm = nn.LayerNorm(d)
        self.dec_embed = nn.Linear(d, d)
        self.decoder = nn.ModuleList(TransformerBlock(d, config.heads, config.mlp_ratio) for _ in range(config.decoder_depth))
        self.dec_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, 1)
        seeded_init(self, config.seed)
        with torch.no_grad():
            self.value_w.fill_(1.0)
            self.value_b.zero_()

    # -- batched core ------------------------------------------------------
    def encode_batch(self, values: torch.Tensor, visible: torch.Tensor):
        """Encode the visible entries of ``values`` (B, D).

        Returns ``(latent, idx, valid)``: latent tokens (B, V, d) for the
        visible items listed in ``idx`` (ascending item index), padding
        marked by ``valid``.  Values outside ``visible`` are never read.
        """
        idx, valid = gather_tokens(visible)
        x = torch.where(valid, torch.gather(values, 1, idx), 0.0)
        scalar = self.value_w[idx] * x + self.value_b[idx]
        h = self.lift(scalar.unsqueeze(-1)) + self.pos[idx]
        for block in self.encoder:
            h = block(h, valid)
        return self.enc_norm(h), idx, valid

    def decode_batch(self, latent: torch.Tensor, idx: torch.Tensor, valid: torch.Tensor, observed: torch.Tensor) -> torch.Tensor:
        """Reconstruct all D slots; only observed slots are meaningful."""
        B, D = observed.shape
        d = self.config.d_model
        h = self.mask_token.expand(B, D, d) + self.pos
        vis = self.dec_embed(latent) + self.pos[idx]
        scatter_idx = torch.where(valid, idx, torch.full_like(idx, D))
        h = torch.cat([h, h.new_zeros(B, 1, d)], dim=1)
        h = h.scatter(1, scatter_idx.unsqueeze(-1).expand(-1, -1, d), torch.where(valid.unsqueeze(-1), vis, 0.0))
        h = h[:, :D]
        for block in self.decoder:
            h = block(h, observed)
        return self.head(self.dec_norm(h)).squeeze(-1)

    def forward(self, values: torch.Tensor, observed: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
        visible = observed & ~masked
        latent, idx, valid = self.encode_batch(values, visible)
        return self.decode_batch(latent, idx, valid, observed)


def batch_reconstruction_loss(recon: torch.Tensor, values: torch.Tensor, observed: torch.Tensor) -> torch.Tensor:
    """Mean over panels of the per-panel MSE across observed slots."""
    w = observed.to(recon.dtype)
    sq = torch.where(observed, recon - values, 0.0) ** 2
    per_panel = sq.sum(dim=1) / w.sum(dim=1).clamp_min(1.0)
    return per_panel.mean()


# -- single-panel API ----------------------------------------------------------

def _panel_tensors(panel: LabPanel, model: MLTM):
    if panel.size != model.config.n_items:
        raise DataError(f"panel size {panel.size} != vocabulary size {model.config.n_items}")
    dtype = model.pos.dtype
    values = torch.from_numpy(np.where(panel.observed, panel.values, 0.0)).to(dtype)[None]
    return values, torch.from_numpy(panel.observed)[None]


def _check_mask(spec: MaskSpec, panel: LabPanel) -> None:
    D = panel.size
    for arr in (spec.observed_idx, spec.masked_idx, spec.visible_idx):
        if arr.size and (arr.min() < 0 or arr.max() >= D):
            raise IndexError("mask index out of range")
    if not set(spec.masked_idx.tolist()) <= set(spec.observed_idx.tolist()):
        raise ValueError("masked_idx must be a subset of observed_idx")


def encode(panel: LabPanel, mask_spec: MaskSpec, model: MLTM) -> torch.Tensor:
    """Latent rows for ``mask_spec.visible_idx``, in that listed order."""
    _check_mask(mask_spec, panel)
    values, _ = _panel_tensors(panel, model)
    visible = torch.zeros_like(values, dtype=torch.bool)
    visible[0, torch.from_numpy(mask_spec.visible_idx)] = True
    latent, idx, valid = model.encode_batch(values, visible)
    pos_of = {int(j): r for r, j in enumerate(idx[0][valid[0]].tolist())}
    rows = [pos_of[int(j)] for j in mask_spec.visible_idx]
    return latent[0, rows]


def decode(latent: torch.Tensor, mask_spec: MaskSpec, model: MLTM) -> torch.Tensor:
    """Reconstructions for ``mask_spec.observed_idx``, in that listed order."""
    vis = mask_spec.visible_idx
    if latent.shape != (len(vis), model.config.d_model):
        raise ValueError(f"latent shape {tuple(latent.shape)} does not match {len(vis)} visible positions")
    D = model.config.n_items
    order = np.argsort(vis, kind="stable")
    idx = torch.from_numpy(vis[order])[None]
    valid = torch.ones_like(idx, dtype=torch.bool)
    observed = torch.zeros(1, D, dtype=torch.bool)
    observed[0, torch.from_numpy(mask_spec.observed_idx)] = True
    recon = model.decode_batch(latent[torch.from_numpy(order)][None], idx, valid, observed)
    return recon[0, torch.from_numpy(mask_spec.observed_idx)]


def reconstruction_loss(recon, panel: LabPanel, mask_spec: MaskSpec):
    """MSE over every observed slot (re-masked and visible), aligned with
    ``mask_spec.observed_idx``."""
    target = panel.values[mask_spec.observed_idx]
    if isinstance(recon, torch.Tensor):
        target = torch.from_numpy(target).to(recon.dtype)
        return ((recon - target) ** 2).mean()
    return float(np.mean((np.asarray(recon) - target) ** 2))


# -- training ------------------------------------------------------------------

@dataclass
class PretrainResult:
    model: MLTM
    history: list[float]
    stats: NormalizationStats | None = None
    optimizer_state: tuple | None = None


def pretrainable(observed: np.ndarray) -> np.ndarray:
    return observed.sum(axis=1) >= 2


def pretrain(
    values: np.ndarray,
    observed: np.ndarray,
    config: MltmConfig,
    seed: int | None = None,
    log=None,
    time_budget: float | None = None,
) -> PretrainResult:
    """Fit the masked autoencoder on normalized panels.

    A fresh artificial mask is drawn per panel per epoch from a generator
    seeded by ``seed``; panels with fewer than two observed values are
    skipped.  ``time_budget`` (seconds) stops after the epoch that exceeds it.
    """
    import time

    config.validate()
    seed = config.seed if seed is None else seed
    keep = pretrainable(observed)
    values_t = torch.from_numpy(np.where(observed, values, 0.0)[keep]).float()
    observed_np = observed[keep]
    observed_t = torch.from_numpy(observed_np)
    n = values_t.shape[0]
    if n == 0:
        raise DataError("no panel has two or more observed values")

    model = MLTM(MltmConfig(**{**asdict(config), "seed": seed}))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng([seed, 1])
    history: list[float] = []
    last_state = {k: v.clone() for k, v in model.state_dict().items()}
    start = time.perf_counter()
    model.train()
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        masked_all = torch.from_numpy(sample_mask_arrays(observed_np, config.mask_ratio, rng))
        total, count = 0.0, 0
        for s in range(0, n, config.batch_size):
            b = torch.from_numpy(perm[s : s + config.batch_size])
            v, o, m = values_t[b], observed_t[b], masked_all[b]
            loss = batch_reconstruction_loss(model(v, o, m), v, o)
            if not torch.isfinite(loss):
                model.load_state_dict(last_state)
                raise TrainingDiverged(f"non-finite reconstruction loss at epoch {epoch}", last_state, history)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(b)
            count += len(b)
        history.append(total / count)
        last_state = {k: v.clone() for k, v in model.state_dict().items()}
        if log is not None:
            log(f"mltm epoch {epoch + 1}/{config.epochs} loss {history[-1]:.5f}")
        if time_budget is not None and time.perf_counter() - start > time_budget:
            break
    model.eval()
    return PretrainResult(model, history, optimizer_state=ckpt_io.optimizer_arrays(opt, model))


@torch.no_grad()
def masked_value_mse(model: MLTM, values: np.ndarray, observed: np.ndarray, masked: np.ndarray) -> float:
    """Mean squared error over artificially masked entries only."""
    model.eval()
    v = torch.from_numpy(np.where(observed, values, 0.0)).float()
    recon = model(v, torch.from_numpy(observed), torch.from_numpy(masked)).double().numpy()
    return float(np.mean((recon[masked] - values[masked]) ** 2))


# -- inference features --------------------------------------------------------

@dataclass
class LabTokens:
    tokens: torch.Tensor  # (b_tokens, d_model) or (n, b_tokens, d_model)
    valid: torch.Tensor
    pooled: torch.Tensor
    flag: torch.Tensor  # True when the panel produced an embedding


@torch.no_grad()
def embed_panels(model: MLTM, values: np.ndarray, observed: np.ndarray, b_tokens: int | None = None, batch_size: int = 512) -> LabTokens:
    """Encode every observed value (no artificial masking).

    Output rows follow vocabulary order, padded or truncated to
    ``b_tokens``.  Panels with fewer than two observed values get all-padding
    tokens, a zero pooled vector and ``flag`` False.
    """
    model.eval()
    D, d = model.config.n_items, model.config.d_model
    b_tokens = D if b_tokens is None else b_tokens
    n = values.shape[0]
    tokens = torch.zeros(n, b_tokens, d)
    valid = torch.zeros(n, b_tokens, dtype=torch.bool)
    flag = torch.from_numpy(pretrainable(observed))
    vals = torch.from_numpy(np.where(observed, values, 0.0)).float()
    obs = torch.from_numpy(observed) & flag[:, None]
    for s in range(0, n, batch_size):
        sl = slice(s, s + batch_size)
        if not bool(flag[sl].any()):
            continue
        latent, _, ok = model.encode_batch(vals[sl], obs[sl])
        w = min(latent.shape[1], b_tokens)
        tokens[sl, :w] = latent[:, :w] * ok[:, :w, None]
        valid[sl, :w] = ok[:, :w]
    count = valid.sum(dim=1, keepdim=True).clamp_min(1)
    pooled = tokens.sum(dim=1) / count
    return LabTokens(tokens, valid, pooled, flag)


def embed_panel(panel: LabPanel, model: MLTM, b_tokens: int | None = None) -> LabTokens:
    out = embed_panels(model, panel.values[None], panel.observed[None], b_tokens)
    return LabTokens(out.tokens[0], out.valid[0], out.pooled[0], out.flag[0])


# -- persistence ---------------------------------------------------------------

def pretrain_dataset(ds: EHRDataset, config: MltmConfig, seed: int | None = None, log=None, time_budget=None):
    """Normalise with statistics from the ``train`` split, then pretrain on it.

    Returns ``(checkpoint, result)``.
    """
    if config.n_items != len(ds.vocabulary):
        raise ConfigError(f"mltm.n_items is {config.n_items} but the dataset has {len(ds.vocabulary)} lab items")
    tr = ds.split_indices("train")
    stats = fit_normalization_arrays(ds.values[tr], ds.observed[tr], config.min_support)
    z, o = normalize_arrays(ds.values[tr], ds.observed[tr], stats)
    result = pretrain(z, o, config, seed=seed, log=log, time_budget=time_budget)
    result.stats = stats
    return mltm_checkpoint(result.model, stats, result.history, ds.vocabulary), result


def mltm_checkpoint(model: MLTM, stats: NormalizationStats, history: list[float], vocabulary: list[str]) -> ckpt_io.Checkpoint:
    return ckpt_io.Checkpoint(
        component="mltm",
        config=asdict(model.config),
        seed=model.config.seed,
        groups={"mltm": ckpt_io.module_arrays(model)},
        meta={"normalization": stats.to_dict(), "history": history, "vocabulary": list(vocabulary)},
    )


def save_mltm(path, model: MLTM, stats: NormalizationStats, history: list[float], vocabulary: list[str]) -> None:
    ckpt_io.save(path, mltm_checkpoint(model, stats, history, vocabulary))


def load_mltm(path) -> tuple[MLTM, NormalizationStats, dict]:
    ck = ckpt_io.load(path, component="mltm")
    return mltm_from_checkpoint(ck)


def mltm_from_checkpoint(ck: ckpt_io.Checkpoint) -> tuple[MLTM, NormalizationStats, dict]:
    known = MltmConfig.__dataclass_fields__
    unknown = set(ck.config) - set(known)
    if unknown:
        raise ckpt_io.CheckpointError(f"unknown mltm config keys {sorted(unknown)}")
    model = MLTM(MltmConfig(**ck.config))
    ckpt_io.load_module(model, ck.groups["mltm"])
    model.eval()
    return model, NormalizationStats.from_dict(ck.meta["normalization"]), ck.meta
