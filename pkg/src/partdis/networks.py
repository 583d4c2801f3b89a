"""Learnable components: shape/appearance hourglass encoders, the U-Net-style
decoder with a non-learned downsampling stream, and the patch discriminator.

Images are (B, 3, H, W) in [0, 1]; both encoders work at a fixed map
resolution (64x64 by default) regardless of the input resolution.
"""

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_SCHEMA = 1


@dataclass
class ModelConfig:
    num_parts: int = 16
    image_size: int = 128
    in_channels: int = 3
    width: int = 256  # hourglass channel width
    appearance_dim: int = 256
    map_res: int = 64  # working resolution of both hourglasses
    sigma_min_res: int = 4
    alpha_min_res: int = 32
    decoder_head_width: int = 512
    decoder_variant: str = "fixed"  # "fixed": render cov = fixed_cov * I; "full"
    fixed_cov: float = 0.02
    cov_scale: float = 1.0
    patch_size: int = 49
    disc_width: int = 64

    def __post_init__(self):
        if self.decoder_variant not in ("fixed", "full"):
            raise ValueError(f"unknown decoder variant: {self.decoder_variant!r}")
        for name in ("image_size", "map_res"):
            v = getattr(self, name)
            if v < 4 or v & (v - 1):
                raise ValueError(f"{name} must be a power of two >= 4, got {v}")
        if self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be odd, got {self.patch_size}")


def _gn(channels):
    groups = next(g for g in (8, 4, 2, 1) if channels % g == 0)
    return nn.GroupNorm(groups, channels)


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.norm1 = _gn(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _gn(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.relu(self.norm1(x)))
        h = self.conv2(F.relu(self.norm2(h)))
        return x + h


class Hourglass(nn.Module):
    """Single-stack recursive hourglass; halves resolution `levels` times."""

    def __init__(self, levels, channels):
        super().__init__()
        self.skip = ResBlock(channels)
        self.down = ResBlock(channels)
        self.inner = (
            Hourglass(levels - 1, channels) if levels > 1 else ResBlock(channels)
        )
        self.up = ResBlock(channels)

    def forward(self, x):
        skip = self.skip(x)
        y = F.avg_pool2d(x, 2)
        y = self.up(self.inner(self.down(y)))
        y = F.interpolate(y, scale_factor=2, mode="nearest")
        return skip + y


class Stem(nn.Module):
    """Convolutional stem mapping the input image to map_res x width features."""

    def __init__(self, cfg):
        super().__init__()
        n_down = int(math.log2(cfg.image_size // cfg.map_res))
        w2 = max(cfg.width // 2, 8)
        self.entry = nn.Sequential(
            nn.Conv2d(cfg.in_channels, w2, 7, stride=2 if n_down >= 1 else 1, padding=3),
            _gn(w2),
            nn.ReLU(inplace=True),
            ResBlock(w2),
        )
        extra = []
        for _ in range(max(n_down - 1, 0)):
            extra += [nn.AvgPool2d(2), ResBlock(w2)]
        self.extra = nn.Sequential(*extra)
        self.out = nn.Sequential(nn.Conv2d(w2, cfg.width, 1), ResBlock(cfg.width))

    def forward(self, x):
        return self.out(self.extra(self.entry(x)))


class Decoder(nn.Module):
    """Upsampling decoder; the downsampling stream is fixed resizing.

    Approximate part maps enter through skips at every resolution; the
    localized appearance field enters (alongside the maps) at the bottleneck
    scales 4x4 through 16x16. The first upsampling stage uses
    `decoder_head_width` channels, halved every two stages.
    """

    def __init__(self, cfg):
        super().__init__()
        k, n = cfg.num_parts, cfg.appearance_dim
        n_stages = int(math.log2(cfg.image_size // 4))
        widths = [max(cfg.decoder_head_width >> (i // 2), 16) for i in range(n_stages)]
        self.stages = nn.ModuleList()
        c_prev = n + k  # initial bottleneck input at 4x4
        for i, c_out in enumerate(widths):
            res_in = 4 << i
            c_in = c_prev + k  # map skip at every resolution
            if res_in in (8, 16):
                c_in += n
            self.stages.append(
                nn.Sequential(
                    nn.Conv2d(c_in, c_out, 3, padding=1),
                    _gn(c_out),
                    nn.ReLU(inplace=True),
                )
            )
            c_prev = c_out
        self.head = nn.Conv2d(c_prev + k, cfg.in_channels, 3, padding=1)

    @staticmethod
    def _resize(x, res):
        if x.shape[-1] == res:
            return x
        if x.shape[-1] > res:
            return F.adaptive_avg_pool2d(x, res)
        return F.interpolate(x, size=(res, res), mode="bilinear", align_corners=False)

    def forward(self, approx_maps, features):
        x = self._resize(torch.cat([features, approx_maps], dim=1), 4)
        for i, stage in enumerate(self.stages):
            res_in = 4 << i
            inject = [self._resize(approx_maps, res_in)]
            if res_in in (8, 16):
                inject.append(self._resize(features, res_in))
            x = stage(torch.cat([x] + inject, dim=1))
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = torch.cat([x, self._resize(approx_maps, x.shape[-1])], dim=1)
        return torch.sigmoid(self.head(x))


class PatchDiscriminator(nn.Module):
    """Four stride-2 convolutions plus a dense head on image patches.

    Ceil-mode padding so a 49x49 patch reaches 4x4 before the dense layer.
    Conditioned by concatenating per-part approximate activation patches.
    """

    def __init__(self, cfg):
        super().__init__()
        w = cfg.disc_width
        c_in = cfg.in_channels + cfg.num_parts
        chans = [w, 2 * w, 4 * w, 8 * w]
        layers = []
        for c_out in chans:
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)]
            if c_out != chans[0]:
                layers += [_gn(c_out)]
            layers += [nn.LeakyReLU(0.2, inplace=True)]
            c_in = c_out
        self.convs = nn.Sequential(*layers)
        res = cfg.patch_size
        for _ in chans:
            res = (res + 1) // 2
        self.dense = nn.Linear(chans[-1] * res * res, 1)

    def forward(self, patches, cond):
        x = torch.cat([patches, cond], dim=1)
        x = self.convs(x)
        return self.dense(x.flatten(1)).squeeze(-1)


class Model(nn.Module):
    """Two-stream autoencoder: shared shape encoder, appearance encoder, decoder."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        sigma_levels = int(math.log2(cfg.map_res // cfg.sigma_min_res))
        alpha_levels = int(math.log2(cfg.map_res // cfg.alpha_min_res))
        self.stem = Stem(cfg)
        self.sigma_hg = Hourglass(sigma_levels, cfg.width)
        self.sigma_head = nn.Conv2d(cfg.width, cfg.num_parts, 1)
        self.alpha_in = nn.Conv2d(cfg.width + cfg.num_parts, cfg.width, 1)
        self.alpha_hg = Hourglass(alpha_levels, cfg.width)
        self.alpha_head = nn.Conv2d(cfg.width, cfg.appearance_dim, 1)
        self.decoder = Decoder(cfg)
        self.discriminator = PatchDiscriminator(cfg)

    def shape_encode(self, img):
        """Image -> (activation maps in (0, 1), stem features), both at map_res."""
        if img.shape[-1] != self.cfg.image_size or img.shape[-2] != self.cfg.image_size:
            raise ValueError(
                f"expected {self.cfg.image_size}x{self.cfg.image_size} input, "
                f"got {img.shape[-2]}x{img.shape[-1]}"
            )
        stem = self.stem(img)
        maps = torch.sigmoid(self.sigma_head(self.sigma_hg(stem)))
        return maps, stem

    def appearance_encode(self, stem, norm_maps):
        """Stem features + normalized maps -> localized appearance field (B, n, h, w)."""
        if stem.shape[1] != self.cfg.width or norm_maps.shape[1] != self.cfg.num_parts:
            raise ValueError(
                f"channel mismatch: stem {stem.shape[1]} (want {self.cfg.width}), "
                f"maps {norm_maps.shape[1]} (want {self.cfg.num_parts})"
            )
        x = self.alpha_in(torch.cat([stem, norm_maps.to(stem.dtype)], dim=1))
        return self.alpha_head(self.alpha_hg(x))

    def decode(self, approx_maps, features):
        return self.decoder(approx_maps, features)

    def discriminate(self, patches, cond):
        return self.discriminator(patches, cond)


def build_model(cfg, seed=0):
    """Construct a Model with seed-determined initialization."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = Model(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def extract_patches(img, means, size):
    """Crop odd-sized patches centered on part means (border-replicated).

    img: (B, C, H, W); means: (B, K, 2) normalized (row, col). Returns
    (B, K, C, size, size). Bilinear sampling, so patches at exact pixel
    centers reproduce integer crops and gradients flow into the image.
    """
    if size % 2 == 0:
        raise ValueError(f"patch size must be odd, got {size}")
    b, c, h, w = img.shape
    k = means.shape[1]
    idx = torch.arange(size, dtype=img.dtype, device=img.device) - (size - 1) / 2
    dr = idx * (2.0 / (h - 1))
    dc = idx * (2.0 / (w - 1))
    rows = means[..., 0:1].unsqueeze(-1) + dr.view(1, 1, -1, 1)  # (B, K, s, 1)
    cols = means[..., 1:2].unsqueeze(-1) + dc.view(1, 1, 1, -1)  # (B, K, 1, s)
    grid = torch.stack(
        [rows.expand(b, k, size, size), cols.expand(b, k, size, size)], dim=-1
    )
    grid_xy = grid.flip(-1).reshape(b * k, size, size, 2)
    rep = img.repeat_interleave(k, dim=0)
    out = F.grid_sample(
        rep, grid_xy.to(img.dtype), mode="bilinear", padding_mode="border",
        align_corners=True,
    )
    return out.reshape(b, k, c, size, size)


def save_checkpoint(path, model, step=0, extra=None):
    """Write a single-archive checkpoint: config echo, parameters, step."""
    payload = {
        "schema_version": CHECKPOINT_SCHEMA,
        "model_config": asdict(model.cfg),
        "model_state": model.state_dict(),
        "step": int(step),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path):
    """Read a checkpoint; returns (model, step, extra)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    schema = payload.get("schema_version")
    if schema != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema: {schema!r}")
    cfg = ModelConfig(**payload["model_config"])
    model = Model(cfg)
    model.load_state_dict(payload["model_state"])
    return model, payload["step"], payload.get("extra", {})
