"""Reconstruction + KL + MMD objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch


class LossConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    """gamma * recon + alpha * KL + beta * MMD, subject to 0 < 1 - alpha < beta.

    ``enforce=False`` suspends the constraint (test harness only).
    """

    gamma: float = 1.0
    alpha: float = 0.5
    beta: float = 1.0
    enforce: bool = True

    def __post_init__(self):
        if self.enforce and not (0 < 1 - self.alpha < self.beta):
            raise LossConfigError(
                f"loss weights violate 0 < 1 - alpha < beta (alpha={self.alpha}, beta={self.beta})"
            )
        if self.gamma < 0:
            raise LossConfigError("gamma must be nonnegative")


@dataclass(frozen=True)
class MMDConfig:
    kernel: str = "imq"  # or "rbf"
    scale: float | None = None  # defaults to 2 * latent_dim

    def __post_init__(self):
        if self.kernel not in ("imq", "rbf"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.scale is not None and self.scale <= 0:
            raise ValueError("kernel scale must be positive")


def _masked_mean(values: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return values.mean()
    m = mask.to(values.dtype)
    return (values * m).sum() / m.sum().clamp_min(1.0)


def reconstruction_loss(pred: torch.Tensor, truth: torch.Tensor, mask: torch.Tensor | None = None,
                        squared: bool = True) -> torch.Tensor:
    """Mean over agents of |stacked future position error|^2 (or its root when ``squared=False``).

    pred, truth: (..., T, 2); mask selects agents over the leading dims.
    """
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != truth shape {tuple(truth.shape)}")
    err = ((pred - truth) ** 2).sum(dim=(-2, -1))
    if not squared:
        err = torch.sqrt(err)
    return _masked_mean(err, mask)


def kl_term(mu: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """KL(N(mu, I) || N(0, I)) = |mu|^2 / 2, averaged over agents."""
    return _masked_mean(0.5 * (mu * mu).sum(-1), mask)


def _kernel(a: torch.Tensor, b: torch.Tensor, cfg: MMDConfig) -> torch.Tensor:
    scale = cfg.scale if cfg.scale is not None else 2.0 * a.shape[-1]
    # |a|^2 + |b|^2 - 2ab avoids materializing the (n, m, d) difference tensor
    sq = ((a * a).sum(-1)[:, None] + (b * b).sum(-1)[None, :] - 2.0 * a @ b.T).clamp_min(0.0)
    if cfg.kernel == "imq":
        return scale / (scale + sq)
    return torch.exp(-sq / scale)


def mmd_term(x: torch.Tensor, y: torch.Tensor, cfg: MMDConfig = MMDConfig()) -> torch.Tensor:
    """Biased (V-statistic) squared MMD between sample sets x (n, d) and y (m, d)."""
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("MMD needs nonempty sample sets")
    return _kernel(x, x, cfg).mean() + _kernel(y, y, cfg).mean() - 2.0 * _kernel(x, y, cfg).mean()


@dataclass
class LossParts:
    total: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor
    mmd: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("recon", "kl", "mmd", "total")}


def total_loss(pred: torch.Tensor, truth: torch.Tensor, mu: torch.Tensor, z: torch.Tensor,
               prior_samples: torch.Tensor, mask: torch.Tensor, weights: LossWeights = LossWeights(),
               mmd_cfg: MMDConfig = MMDConfig(), squared: bool = True) -> LossParts:
    """Combine the three terms. ``z`` and ``prior_samples`` hold one row per valid agent."""
    recon = reconstruction_loss(pred, truth, mask, squared)
    kl = kl_term(mu, mask)
    mmd = mmd_term(z, prior_samples, mmd_cfg)
    total = weights.gamma * recon
    if weights.alpha:
        total = total + weights.alpha * kl
    if weights.beta:
        total = total + weights.beta * mmd
    return LossParts(total, recon, kl, mmd)
