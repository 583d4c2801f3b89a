"""Closed-form part operators.

Part shape lives in activation maps (B, K, h, w); the compressed form is the
pair of spatial moments (mean, covariance) of each normalized map. Appearance
is pooled per part into vectors (B, K, n) and projected back onto the grid as
a localized feature field (B, n, h, w). All functions are pure and
differentiable.
"""

from dataclasses import dataclass

import torch

NORM_EPS = 1e-8  # denominator guard for normalizations
COV_FLOOR = 1e-6  # isotropic floor added to covariances


@dataclass
class PartMoments:
    mean: torch.Tensor  # (B, K, 2) normalized (row, col)
    cov: torch.Tensor  # (B, K, 2, 2) symmetric positive-definite

    def detach(self):
        return PartMoments(self.mean.detach(), self.cov.detach())


def normalize_maps(maps):
    """Scale each (b, k) map to unit mass: m / (sum m + eps)."""
    denom = maps.sum(dim=(-2, -1), keepdim=True) + NORM_EPS
    return maps / denom


def compute_moments(maps, grid):
    """Spatial mean and covariance of each activation map.

    maps: (B, K, h, w) nonnegative; grid: (h, w, 2). The map is normalized to
    a distribution p, then mean = sum p*u and cov = sum p*(u-mean)(u-mean)^T
    plus an isotropic floor, so the result is always invertible.
    """
    p = normalize_maps(maps)
    coords = grid.reshape(-1, 2).to(maps.dtype)  # (hw, 2)
    pf = p.flatten(-2)  # (B, K, hw)
    mean = pf @ coords  # (B, K, 2)
    centered = coords.unsqueeze(0).unsqueeze(0) - mean.unsqueeze(2)  # (B, K, hw, 2)
    cov = torch.einsum("bku,bkui,bkuj->bkij", pf, centered, centered)
    eye = torch.eye(2, dtype=maps.dtype, device=maps.device)
    return PartMoments(mean=mean, cov=cov + COV_FLOOR * eye)


def render_approx_maps(moments, grid, cov_scale=1.0):
    """Rebuild activation maps from moments alone.

    Each map takes the value 1 / (1 + d^2) at grid point u, where d is the
    Mahalanobis distance of u from the part mean under cov_scale * cov. Peaks
    at 1 on the mean, falls to 1/2 at unit distance.
    """
    cov = moments.cov * cov_scale
    a = cov[..., 0, 0]
    d = cov[..., 1, 1]
    b = cov[..., 0, 1]
    det = a * d - b * b
    if bool((a <= 0).any()) or bool((det <= 0).any()):
        raise ValueError("covariance is not positive-definite; check upstream regularization")
    inv = (
        torch.stack(
            [torch.stack([d, -b], dim=-1), torch.stack([-b, a], dim=-1)], dim=-2
        )
        / det.unsqueeze(-1).unsqueeze(-1)
    )
    h, w = grid.shape[:2]
    coords = grid.reshape(-1, 2).to(moments.mean.dtype)
    diff = coords.unsqueeze(0).unsqueeze(0) - moments.mean.unsqueeze(2)  # (B, K, hw, 2)
    q = torch.einsum("bkui,bkij,bkuj->bku", diff, inv, diff)
    return (1.0 / (1.0 + q)).reshape(*moments.mean.shape[:2], h, w)


def pool_appearance(features, maps):
    """Activation-weighted average of features per part.

    features: (B, n, h, w); maps: (B, K, h, w). Returns (B, K, n) with
    alpha_k = sum_u f[u] * m_k[u] / (sum_u m_k[u] + eps). Invariant to positive
    rescaling of any single map, up to eps.
    """
    num = torch.einsum("bnhw,bkhw->bkn", features, maps)
    denom = maps.sum(dim=(-2, -1)) + NORM_EPS  # (B, K)
    return num / denom.unsqueeze(-1)


def project_appearance(appearances, approx_maps):
    """Spread part appearance vectors back over the grid.

    appearances: (B, K, n); approx_maps: (B, K, h, w) as produced by
    render_approx_maps. Returns (B, n, h, w) with
    f[u] = sum_k alpha_k * m_k[u] / (1 + sum_j m_j[u]), which vanishes where
    all maps vanish and equals alpha/2 where a single map saturates at 1.
    """
    num = torch.einsum("bkn,bkhw->bnhw", appearances, approx_maps)
    denom = 1.0 + approx_maps.sum(dim=1, keepdim=True)  # (B, 1, h, w)
    return num / denom
