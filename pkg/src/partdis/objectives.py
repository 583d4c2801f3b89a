"""Training losses: soft-masked L1 reconstruction, moment equivariance,
and the optional patch-adversarial pair."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .geometry import apply_transform, warp_image
from .partcore import PartMoments, compute_moments


class NumericalError(RuntimeError):
    """A loss component became non-finite; names the offending term."""


@dataclass
class LossWeights:
    lambda_mu: float = 1.0
    lambda_sigma: float = 1.0
    lambda_scal: float = 0.2  # mask length scale, normalized units
    lambda_adv: float = 1.0


def soft_mask(moments, lambda_scal, grid):
    """Localization mask concentrating the reconstruction loss near parts.

    mask[u] = min(sum_k 1 / (1 + ||u - mean_k|| / lambda_scal), 1); equals 1 on
    every part mean and decays with distance scaled by lambda_scal.
    """
    if lambda_scal <= 0:
        raise ValueError(f"lambda_scal must be positive, got {lambda_scal}")
    h, w = grid.shape[:2]
    coords = grid.reshape(-1, 2).to(moments.mean.dtype)
    dist = (coords.unsqueeze(0).unsqueeze(0) - moments.mean.unsqueeze(2)).norm(dim=-1)
    contrib = 1.0 / (1.0 + dist / lambda_scal)
    return contrib.sum(dim=1).clamp(max=1.0).reshape(-1, h, w)


def reconstruction_loss(target, recon, mask=None):
    """Mean over pixels of mask * |target - recon| summed over channels."""
    if target.shape != recon.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(recon.shape)}")
    err = (target - recon).abs().sum(dim=-3)  # sum over channels -> (B, H, W)
    if mask is not None:
        err = err * mask
    return err.mean()


def equivariance_loss(mom_a, mom_b, weights):
    """Moment-matching penalty between two sets of part moments.

    Sums over parts lambda_mu * ||mean_a - mean_b||_2 plus
    lambda_sigma * ||cov_a - cov_b||_1 (entrywise), averaged over the batch.
    Zero iff all per-part moment pairs coincide; symmetric in its arguments.
    """
    mu_term = (mom_a.mean - mom_b.mean).norm(dim=-1)  # (B, K)
    sig_term = (mom_a.cov - mom_b.cov).abs().sum(dim=(-2, -1))  # (B, K)
    per_sample = weights.lambda_mu * mu_term + weights.lambda_sigma * sig_term
    return per_sample.sum(dim=1).mean()


def warped_map_moments(maps, transform, grid):
    """Moments of activation maps composed with a spatial warp.

    Warps each channel of `maps` with the sampling grid s(grid) (the same
    resampling used for images) and takes moments of the result. For a pure
    translation s(u) = u + t this shifts the mean by -t and leaves the
    covariance unchanged on interior-supported maps.
    """
    warped = warp_image(maps, apply_transform(transform, grid))
    return compute_moments(warped, grid)


def adversarial_losses(logits_real, logits_fake):
    """Non-saturating patch BCE objectives.

    Returns (d_loss, g_loss): the discriminator loss averages the real and
    fake binary cross-entropy terms (ln 2 per patch at zero logits), the
    generator loss is the non-saturating -log D(fake) form.
    """
    d_loss = 0.5 * (F.softplus(-logits_real).mean() + F.softplus(logits_fake).mean())
    g_loss = F.softplus(-logits_fake).mean()
    return d_loss, g_loss


def total_loss(rec, equiv, adv_g=None, weights=None):
    """Combine loss components; adversarial term enters with weight lambda_adv."""
    for name, val in (("reconstruction", rec), ("equivariance", equiv), ("adversarial", adv_g)):
        if val is not None and not bool(torch.isfinite(torch.as_tensor(val)).all()):
            raise NumericalError(f"{name} loss is non-finite")
    total = rec + equiv
    if adv_g is not None:
        lam = weights.lambda_adv if weights is not None else 1.0
        total = total + lam * adv_g
    return total
