"""User-facing numerical checks: the Gaussian vCLUB benchmark and the
gradient-check targets exposed by ``medfuse mi-bench`` / ``medfuse gradcheck``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from medfuse.fusion import DisentangledFusion, FusionConfig, MiEstimator, estimator_log_likelihood, focal_loss, vclub
from medfuse.layers import seeded_init
from medfuse.training import GradCheckReport, gradient_check


def gaussian_mi(rho: float, dim: int = 1) -> float:
    """MI in nats between ``x`` and ``y = rho x + sqrt(1 - rho^2) e``, per-dim independent."""
    return -0.5 * dim * math.log(1.0 - rho * rho)


def gaussian_club_limit(rho: float, dim: int = 1, batch_size: int | None = None) -> float:
    """Value the batch vCLUB converges to when ``q`` equals the true conditional.

    ``dim * rho^2 / (1 - rho^2)``, times ``(1 - 1/N)`` for the N^2 double sum
    whose diagonal terms cancel.
    """
    value = dim * rho * rho / (1.0 - rho * rho)
    return value * (1.0 - 1.0 / batch_size) if batch_size else value


def sample_gaussian_pairs(n: int, rho: float, dim: int, gen: torch.Generator, dtype=torch.float32):
    x = torch.randn(n, dim, generator=gen, dtype=dtype)
    e = torch.randn(n, dim, generator=gen, dtype=dtype)
    return x, rho * x + math.sqrt(1.0 - rho * rho) * e


@dataclass
class MiBenchResult:
    rho: float
    dim: int
    estimate: float
    estimate_std: float
    analytic_mi: float
    club_limit: float
    final_log_likelihood: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def mi_bench(
    rho: float,
    dim: int = 1,
    seed: int = 0,
    train_steps: int = 2000,
    batch_size: int = 256,
    n_batches: int = 100,
    hidden: int = 64,
    lr: float = 3e-3,
) -> MiBenchResult:
    """Fit ``q(y|x)`` by maximum likelihood on fresh Gaussian batches, then
    average the vCLUB estimate over ``n_batches`` fresh batches."""
    if not -1.0 < rho < 1.0:
        raise ValueError("rho must lie strictly between -1 and 1")
    if dim < 1 or batch_size < 2:
        raise ValueError("dim >= 1 and batch_size >= 2 required")
    gen = torch.Generator().manual_seed(int(seed))
    est = MiEstimator(dim, dim, hidden)
    seeded_init(est, seed)
    opt = torch.optim.Adam(est.parameters(), lr=lr)
    ll = torch.zeros(())
    for _ in range(train_steps):
        x, y = sample_gaussian_pairs(batch_size, rho, dim, gen)
        ll = estimator_log_likelihood(x, y, est)
        opt.zero_grad(set_to_none=True)
        (-ll).backward()
        opt.step()
    values = []
    with torch.no_grad():
        for _ in range(n_batches):
            x, y = sample_gaussian_pairs(batch_size, rho, dim, gen)
            values.append(float(vclub(x, y, est)))
    vals = torch.tensor(values, dtype=torch.float64)
    return MiBenchResult(
        rho=rho,
        dim=dim,
        estimate=float(vals.mean()),
        estimate_std=float(vals.std()) if len(values) > 1 else 0.0,
        analytic_mi=gaussian_mi(rho, dim),
        club_limit=gaussian_club_limit(rho, dim, batch_size),
        final_log_likelihood=float(ll.detach()),
    )


# -- gradient-check targets ------------------------------------------------------

def check_focal(seed: int = 0, dtype=torch.float64, n: int = 4, n_labels: int = 5) -> GradCheckReport:
    gen = torch.Generator().manual_seed(seed)
    logits = (3 * torch.randn(n, n_labels, generator=gen, dtype=dtype)).requires_grad_()
    labels = torch.rand(n, n_labels, generator=gen) < 0.5
    eps, tol, floor = (6e-6, 1e-4, 1e-6) if dtype == torch.float64 else (1e-2, 1e-3, 1e-2)
    return gradient_check(lambda: focal_loss(logits, labels, 2.0, 0.25), [logits], eps, tol, floor)


def check_vclub(seed: int = 0, dtype=torch.float64, n: int = 4, d_x: int = 3, d_y: int = 2) -> GradCheckReport:
    """vCLUB w.r.t. both batches, with the estimator frozen."""
    gen = torch.Generator().manual_seed(seed)
    est = MiEstimator(d_x, d_y, 8).to(dtype)
    seeded_init(est, seed)
    est = est.to(dtype)
    x = torch.randn(n, d_x, generator=gen, dtype=dtype).requires_grad_()
    y = torch.randn(n, d_y, generator=gen, dtype=dtype).requires_grad_()
    return gradient_check(lambda: vclub(x, y, est), [x, y], 6e-6, 1e-4, 1e-6)


def tiny_fusion(seed: int = 0, dtype=torch.float64, activation: str = "gelu") -> DisentangledFusion:
    cfg = FusionConfig(d_model=8, heads=2, a_tokens=3, b_tokens=4, joint_tokens=2, g_hidden=6, n_labels=3,
                       estimator_hidden=8, activation=activation, seed=seed)
    return DisentangledFusion(cfg, d_text=5, d_lab=4).to(dtype)


def check_forward_jacobian(seed: int = 0, dtype=torch.float64) -> GradCheckReport:
    """Every logit's gradient w.r.t. the text tokens ``Z_a``; reports the worst."""
    model = tiny_fusion(seed, dtype)
    gen = torch.Generator().manual_seed(seed + 1)
    Z_a = torch.randn(2, 3, 8, generator=gen, dtype=dtype).requires_grad_()
    Z_b = torch.randn(2, 4, 8, generator=gen, dtype=dtype)
    valid_a = torch.tensor([[True, True, False], [True, True, True]])
    valid_b = torch.tensor([[True, False, True, True], [True, True, True, True]])
    worst = None
    for i in range(2):
        for k in range(3):
            rep = gradient_check(
                lambda: model.forward_features(Z_a, valid_a, Z_b, valid_b).logits[i, k], [Z_a], 6e-6, 1e-4, 1e-6
            )
            if worst is None or rep.max_rel_error > worst.max_rel_error:
                worst = GradCheckReport(rep.max_rel_error, rep.max_abs_error, 0, rep.tolerance)
            worst.n_coords += rep.n_coords
    return worst


GRADCHECK_TARGETS = {"focal": check_focal, "vclub": check_vclub, "forward": check_forward_jacobian}
