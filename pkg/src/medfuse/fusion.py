"""Disentangled fusion transformer, the vCLUB mutual-information bound and
the prediction losses.

Shapes use a leading batch axis ``N``: text tokens ``Z_a (N, a, d)``, lab
tokens ``Z_b (N, b, d)``, joint tokens ``Z_c (N, c, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from medfuse.layers import MultiHeadAttention, seeded_init
from medfuse.text_embed import masked_mean

LOG_2PI = math.log(2.0 * math.pi)
LOGVAR_MIN, LOGVAR_MAX = -8.0, 8.0

_ACTIVATIONS = {"relu": nn.ReLU, "gelu": nn.GELU, "identity": nn.Identity}


class ConfigError(ValueError):
    pass


class NonFiniteDensity(FloatingPointError):
    def __init__(self, indices):
        self.indices = indices
        super().__init__(f"non-finite log-density at (i, j) indices {indices[:10]}")


@dataclass
class FusionConfig:
    d_model: int = 32
    heads: int = 4
    a_tokens: int = 5  # four note sections + the abnormal-lab text
    b_tokens: int = 32
    joint_tokens: int = 4  # c
    lam: float = 0.1
    gamma: float = 2.0
    alpha: float = 0.25
    estimator_hidden: int = 64
    g_hidden: int = 64
    text_hidden: int = 0
    activation: str = "relu"
    layer_norm: bool = True
    n_labels: int = 10
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("fusion.lam must be in [0, 1]")
        if not self.gamma >= 0.0:
            raise ConfigError("fusion.gamma must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("fusion.alpha must be in [0, 1]")
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads:
            raise ConfigError("fusion.d_model must be a positive multiple of fusion.heads")
        for name in ("a_tokens", "b_tokens", "joint_tokens", "estimator_hidden", "g_hidden", "n_labels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"fusion.{name} must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"fusion.activation must be one of {sorted(_ACTIVATIONS)}")


# -- joint features -------------------------------------------------------------

def kronecker_joint(a_pool: torch.Tensor, b_pool: torch.Tensor) -> torch.Tensor:
    """Per-sample outer product ``C[..., i, j] = a[..., i] * b[..., j]``."""
    return a_pool.unsqueeze(-1) * b_pool.unsqueeze(-2)


class JointProjection(nn.Module):
    """``c`` learned affine maps from the flattened joint matrix to tokens."""

    def __init__(self, a: int, b: int, c: int, d_model: int):
        super().__init__()
        self.c, self.d_model = c, d_model
        self.proj = nn.Linear(a * b, c * d_model)

    def forward(self, C: torch.Tensor) -> torch.Tensor:
        flat = C.flatten(-2)
        return self.proj(flat).unflatten(-1, (self.c, self.d_model))


def project_joint(C: torch.Tensor, params: JointProjection) -> torch.Tensor:
    return params(C)


# -- attention ------------------------------------------------------------------

class SelfAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, norm: bool = True):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, heads)
        self.norm = nn.LayerNorm(d_model) if norm else nn.Identity()

    def forward(self, Z: torch.Tensor, valid: torch.Tensor):
        out, weights = self.attn(Z, Z, valid)
        S = torch.where(valid.unsqueeze(-1), self.norm(Z + out), 0.0)
        return S, weights


def self_attend(Z: torch.Tensor, valid: torch.Tensor, params: SelfAttention):
    """Masked multi-head self-attention with a residual connection.

    Invalid query rows come out as zeros.  Returns ``(S, weights, any_valid)``.
    """
    S, weights = params(Z, valid)
    return S, weights, valid.any(dim=-1)


class CrossAttentionCommon(nn.Module):
    """Joint-token queries over keys/values drawn from three sources.

    Each source has its own key and value projection; the projected keys and
    values are concatenated along the token axis before the softmax.
    """

    def __init__(self, d_model: int, heads: int, norm: bool = True):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, heads)  # q, k, v act as Q_c, K_c, V_c
        self.norm = nn.LayerNorm(d_model) if norm else nn.Identity()
        self.k_a = nn.Linear(d_model, d_model)
        self.k_b = nn.Linear(d_model, d_model)
        self.v_a = nn.Linear(d_model, d_model)
        self.v_b = nn.Linear(d_model, d_model)

    def forward(self, Z_c, S_a, valid_a, S_b, valid_b):
        m = self.attn
        q = m.q(Z_c)
        k = torch.cat([m.k(Z_c), self.k_a(S_a), self.k_b(S_b)], dim=-2)
        v = torch.cat([m.v(Z_c), self.v_a(S_a), self.v_b(S_b)], dim=-2)
        valid_c = torch.ones(Z_c.shape[:-1], dtype=torch.bool, device=Z_c.device)
        key_valid = torch.cat([valid_c, valid_a, valid_b], dim=-1)
        out, weights = m.attend(q, k, v, key_valid)
        return self.norm(Z_c + m.o(out)), weights


def cross_attend_common(Z_c, S_a, valid_a, S_b, valid_b, params: CrossAttentionCommon):
    return params(Z_c, S_a, valid_a, S_b, valid_b)


# -- mutual information -----------------------------------------------------------

class MiEstimator(nn.Module):
    """Diagonal-Gaussian conditional density ``q(y | x)`` from an MLP."""

    def __init__(self, d_x: int, d_y: int, hidden: int = 64):
        super().__init__()
        self.d_y = d_y
        self.net = nn.Sequential(nn.Linear(d_x, hidden), nn.ReLU(), nn.Linear(hidden, 2 * d_y))

    def forward(self, x: torch.Tensor):
        mu, logvar = self.net(x).split(self.d_y, dim=-1)
        return mu, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)


def _moments(x: torch.Tensor, estimator: nn.Module, frozen: bool):
    if frozen:
        params = {k: v.detach() for k, v in estimator.named_parameters()}
        return functional_call(estimator, params, (x,))
    return estimator(x)


def gaussian_log_density(y: torch.Tensor, mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    return -0.5 * (((y - mu) ** 2) * torch.exp(-logvar) + logvar + LOG_2PI).sum(dim=-1)


def pairwise_log_density(x: torch.Tensor, y: torch.Tensor, estimator: nn.Module, frozen: bool = False) -> torch.Tensor:
    """``M[i, j] = log q(y_j | x_i)`` for a batch of ``N`` pairs."""
    mu, logvar = _moments(x, estimator, frozen)
    M = gaussian_log_density(y.unsqueeze(0), mu.unsqueeze(1), logvar.unsqueeze(1))
    bad = ~torch.isfinite(M)
    if bool(bad.any()):
        raise NonFiniteDensity(bad.nonzero().tolist())
    return M


def vclub(x: torch.Tensor, y: torch.Tensor, estimator: nn.Module, frozen: bool = True) -> torch.Tensor:
    """Contrastive log-ratio upper bound on I(x; y) over one batch.

    ``(1/N^2) sum_i sum_j [log q(y_i|x_i) - log q(y_j|x_i)]``.  With
    ``frozen`` the estimator's parameters receive no gradient.
    """
    M = pairwise_log_density(x, y, estimator, frozen)
    D = M.diagonal().unsqueeze(-1) - M
    # D + D^T has the same mean as D; when all x_i coincide it is exactly zero
    # element by element, so the estimate is exactly 0 rather than rounding noise
    return 0.5 * (D + D.T).mean()


def estimator_log_likelihood(x: torch.Tensor, y: torch.Tensor, estimator: nn.Module) -> torch.Tensor:
    """``(1/N) sum_i log q(y_i | x_i)``; maximised w.r.t. the estimator only."""
    mu, logvar = estimator(x)
    ll = gaussian_log_density(y, mu, logvar)
    bad = ~torch.isfinite(ll)
    if bool(bad.any()):
        raise NonFiniteDensity([[i, i] for i in bad.nonzero().flatten().tolist()])
    return ll.mean()


def mi_inputs(S_a, valid_a, S_b, valid_b, S_c):
    """Pooled estimator input ``concat(pool(S_a), pool(S_b))`` and target ``pool(S_c)``."""
    x = torch.cat([masked_mean(S_a, valid_a), masked_mean(S_b, valid_b)], dim=-1)
    return x, S_c.mean(dim=-2)


def mi_loss(S_a, valid_a, S_b, valid_b, S_c, estimator: nn.Module) -> torch.Tensor:
    x, y = mi_inputs(S_a, valid_a, S_b, valid_b, S_c)
    return vclub(x, y, estimator, frozen=True)


# -- prediction -------------------------------------------------------------------

class DenseFusion(nn.Module):
    def __init__(self, d_model: int, n_labels: int, g_hidden: int, activation: str = "relu"):
        super().__init__()
        act = _ACTIVATIONS[activation]
        self.f_a = nn.Sequential(nn.Linear(d_model, d_model), act())
        self.f_b = nn.Sequential(nn.Linear(d_model, d_model), act())
        self.g = nn.Sequential(nn.Linear(3 * d_model, g_hidden), act(), nn.Linear(g_hidden, n_labels))

    def forward(self, S_a, valid_a, S_c, S_b, valid_b):
        h_a = self.f_a(masked_mean(S_a, valid_a))
        h_b = self.f_b(masked_mean(S_b, valid_b))
        h_final = torch.cat([h_a, S_c.mean(dim=-2), h_b], dim=-1)
        return h_a, h_b, h_final, self.g(h_final)


def dense_fusion(S_a, valid_a, S_c, S_b, valid_b, params: DenseFusion):
    """Returns ``(h_final, logits)``."""
    _, _, h_final, logits = params(S_a, valid_a, S_c, S_b, valid_b)
    return h_final, logits


def focal_loss(logits: torch.Tensor, labels: torch.Tensor, gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    """Binary focal loss per label, averaged over labels then samples.

    Log-probabilities come from softplus so large logits stay finite.
    """
    y = labels.to(torch.bool)
    log_p = -F.softplus(-logits)
    log_1mp = -F.softplus(logits)
    log_pt = torch.where(y, log_p, log_1mp)
    log_1m_pt = torch.where(y, log_1mp, log_p)
    alpha_t = torch.where(y, torch.full_like(logits, alpha), torch.full_like(logits, 1.0 - alpha))
    modulator = torch.exp(gamma * log_1m_pt) if gamma != 0 else torch.ones_like(logits)
    per_label = -alpha_t * modulator * log_pt
    return per_label.mean(dim=-1).mean()


def final_loss(logits, labels, S_a, valid_a, S_b, valid_b, S_c, estimator, lam: float, gamma: float = 2.0, alpha: float = 0.25):
    loss = focal_loss(logits, labels, gamma, alpha)
    if lam == 0:
        return loss
    return loss + lam * mi_loss(S_a, valid_a, S_b, valid_b, S_c, estimator)


# -- full model ---------------------------------------------------------------------

@dataclass
class FusionOutput:
    Z_a: torch.Tensor
    valid_a: torch.Tensor
    Z_b: torch.Tensor
    valid_b: torch.Tensor
    A_pool: torch.Tensor
    B_pool: torch.Tensor
    C: torch.Tensor | None
    Z_c: torch.Tensor | None
    S_a: torch.Tensor | None
    S_b: torch.Tensor | None
    S_c: torch.Tensor | None
    h_a: torch.Tensor | None
    h_b: torch.Tensor | None
    h_final: torch.Tensor
    logits: torch.Tensor
    attn_a: torch.Tensor | None = None
    attn_b: torch.Tensor | None = None
    attn_c: torch.Tensor | None = None


class DisentangledFusion(nn.Module):
    """Joint features -> per-modality self-attention -> common cross-attention
    -> dense fusion head.

    With ``disentangled=False`` the pooled modality vectors are concatenated
    and fed straight to the prediction head.
    """

    def __init__(self, config: FusionConfig, d_text: int, d_lab: int, disentangled: bool = True):
        super().__init__()
        config.validate()
        self.config = config
        self.disentangled = disentangled
        d = config.d_model
        self.text_proj = nn.Linear(d_text, d) if config.text_hidden <= 0 else nn.Sequential(
            nn.Linear(d_text, config.text_hidden), nn.GELU(), nn.Linear(config.text_hidden, d)
        )
        self.lab_proj = nn.Linear(d_lab, d)
        if disentangled:
            self.joint = JointProjection(d, d, config.joint_tokens, d)
            self.self_a = SelfAttention(d, config.heads, config.layer_norm)
            self.self_b = SelfAttention(d, config.heads, config.layer_norm)
            self.cross = CrossAttentionCommon(d, config.heads, config.layer_norm)
            self.dense = DenseFusion(d, config.n_labels, config.g_hidden, config.activation)
        else:
            act = _ACTIVATIONS[config.activation]
            self.g = nn.Sequential(nn.Linear(2 * d, config.g_hidden), act(), nn.Linear(config.g_hidden, config.n_labels))
        seeded_init(self, config.seed)

    def modality_features(self, text_raw, text_valid, lab_raw, lab_valid):
        Z_a = torch.where(text_valid.unsqueeze(-1), self.text_proj(text_raw), 0.0)
        Z_b = torch.where(lab_valid.unsqueeze(-1), self.lab_proj(lab_raw), 0.0)
        return Z_a, Z_b

    def forward(self, text_raw, text_valid, lab_raw, lab_valid) -> FusionOutput:
        Z_a, Z_b = self.modality_features(text_raw, text_valid, lab_raw, lab_valid)
        return self.forward_features(Z_a, text_valid, Z_b, lab_valid)

    def forward_features(self, Z_a, valid_a, Z_b, valid_b) -> FusionOutput:
        A_pool = masked_mean(Z_a, valid_a)
        B_pool = masked_mean(Z_b, valid_b)
        if not self.disentangled:
            h_final = torch.cat([A_pool, B_pool], dim=-1)
            return FusionOutput(Z_a, valid_a, Z_b, valid_b, A_pool, B_pool, None, None, None, None, None,
                                None, None, h_final, self.g(h_final))
        C = kronecker_joint(A_pool, B_pool)
        Z_c = self.joint(C)
        S_a, attn_a = self.self_a(Z_a, valid_a)
        S_b, attn_b = self.self_b(Z_b, valid_b)
        S_c, attn_c = self.cross(Z_c, S_a, valid_a, S_b, valid_b)
        h_a, h_b, h_final, logits = self.dense(S_a, valid_a, S_c, S_b, valid_b)
        return FusionOutput(Z_a, valid_a, Z_b, valid_b, A_pool, B_pool, C, Z_c, S_a, S_b, S_c,
                            h_a, h_b, h_final, logits, attn_a, attn_b, attn_c)


def output_mi_loss(out: FusionOutput, estimator: nn.Module) -> torch.Tensor:
    return mi_loss(out.S_a, out.valid_a, out.S_b, out.valid_b, out.S_c, estimator)


def output_mi_inputs(out: FusionOutput):
    return mi_inputs(out.S_a, out.valid_a, out.S_b, out.valid_b, out.S_c)
