"""Datasets and training-pair construction.

A training pair is the triple (a(x), x o s, x): the photometrically jittered
shape input, the spatially warped appearance input, and the reconstruction
target, together with the warp that produced the appearance input (absent when
the pair uses a second video frame instead of a synthetic warp).

Landmarks are stored as (row, col) pixel coordinates internally; the CSV
interchange format uses x1,y1,...,xL,yL columns (x = column index).
"""

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image as PILImage

from .geometry import (
    AppearanceSamplingConfig,
    TpsSamplingConfig,
    apply_appearance,
    apply_transform,
    make_identity_grid,
    sample_appearance,
    sample_tps,
    warp_image,
)

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


def derive_seed(*parts):
    """Mix integers/strings into a single 63-bit seed (splitmix-style)."""
    h = 0x9E3779B97F4A7C15
    for p in parts:
        if isinstance(p, str):
            v = 0
            for ch in p.encode():
                v = (v * 31 + ch) & 0xFFFFFFFFFFFFFFFF
            p = v
        h ^= (int(p) + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
        h = (h * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        h ^= h >> 27
    return h & 0x7FFFFFFFFFFFFFFF


@dataclass
class Sample:
    image: torch.Tensor  # (3, H, W) float in [0, 1]
    landmarks: Optional[torch.Tensor] = None  # (L, 2) pixel (row, col)
    sequence_id: Optional[str] = None
    frame_index: Optional[int] = None
    region_map: Optional[torch.Tensor] = None  # (H, W) int8, 0 = background
    path: Optional[str] = None


@dataclass
class Dataset:
    samples: list
    name: str = ""
    sequences: dict = field(default_factory=dict)  # sequence_id -> sample indices

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def landmark_array(self):
        """Stack landmarks into (N, L, 2) pixel (row, col); raises if absent."""
        if any(s.landmarks is None for s in self.samples):
            raise ValueError(f"dataset {self.name!r} is missing landmark annotations")
        return torch.stack([s.landmarks for s in self.samples])


@dataclass
class TrainingPair:
    shape_input: torch.Tensor  # a(x)
    appearance_input: torch.Tensor  # x o s (or another video frame)
    target: torch.Tensor  # x
    transform: object = None  # TpsTransform when the warp is synthetic


@dataclass
class PairBatch:
    shape_input: torch.Tensor
    appearance_input: torch.Tensor
    target: torch.Tensor
    transforms: list


def collate_pairs(pairs):
    return PairBatch(
        shape_input=torch.stack([p.shape_input for p in pairs]),
        appearance_input=torch.stack([p.appearance_input for p in pairs]),
        target=torch.stack([p.target for p in pairs]),
        transforms=[p.transform for p in pairs],
    )


def make_pair_image(sample, tps_cfg, photo_cfg, gen):
    """Build (a(x), x o s, x) with a synthetic warp; the warp is recorded."""
    img = sample.image
    a = sample_appearance(photo_cfg, gen)
    shape_input = apply_appearance(img, a)
    s = sample_tps(tps_cfg, gen, dtype=torch.float64)
    grid = apply_transform(s, make_identity_grid(img.shape[-2], img.shape[-1]))
    appearance_input = warp_image(img, grid.to(img.dtype))
    return TrainingPair(
        shape_input=shape_input,
        appearance_input=appearance_input,
        target=img,
        transform=s,
    )


def make_pair_video(sample, dataset, tps_cfg, photo_cfg, gen, p_frame=0.5):
    """Pair construction for video data.

    With probability p_frame the appearance input is another frame of the same
    sequence and no warp is recorded (the equivariance term is skipped for that
    sample); otherwise, or when no second frame exists, falls back to the
    synthetic-warp pair.
    """
    seq = dataset.sequences.get(sample.sequence_id, []) if sample.sequence_id else []
    peers = [
        i for i in seq
        if dataset.samples[i].frame_index != sample.frame_index
    ]
    use_frame = (
        len(peers) > 0
        and p_frame > 0
        and bool(torch.rand((), generator=gen) < p_frame)
    )
    if not use_frame:
        return make_pair_image(sample, tps_cfg, photo_cfg, gen)
    pick = peers[int(torch.randint(len(peers), (), generator=gen))]
    a = sample_appearance(photo_cfg, gen)
    return TrainingPair(
        shape_input=apply_appearance(sample.image, a),
        appearance_input=dataset.samples[pick].image,
        target=sample.image,
        transform=None,
    )


# ---------------------------------------------------------------------------
# Synthetic articulated sprites


@dataclass
class SpriteConfig:
    count: int = 2000
    size: int = 64
    num_segments: int = 4
    segment_length: float = 0.22  # fraction of image size
    segment_radius: float = 0.055  # fraction of image size
    articulation_range: float = 0.7  # +- radians per joint
    rotation_range: float = 3.14159  # +- radians, global
    translation_range: float = 0.3  # +- fraction of image size (clamped to fit)

    def __post_init__(self):
        if not 2 <= self.num_segments <= 4:
            raise ValueError(f"num_segments must be in [2, 4], got {self.num_segments}")


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, t), (t, p, v), (v, p, q)][i]


def _sprite_colors(num_segments, gen):
    """Distinct saturated segment colors plus a dark, desaturated background."""
    u = torch.rand(2 * num_segments + 3, generator=gen, dtype=torch.float64)
    base = float(u[-1])
    colors = []
    for i in range(num_segments):
        hue = (base + (i + 0.25 + 0.5 * float(u[2 * i])) / num_segments) % 1.0
        colors.append(_hsv_to_rgb(hue, 0.75 + 0.25 * float(u[2 * i + 1]), 0.9))
    bg = _hsv_to_rgb(float(u[-2]), 0.2 * float(u[-3]), 0.08 + 0.25 * float(u[-3]))
    return colors, bg


def _render_sprite(cfg, gen, dtype=torch.float32):
    size = cfg.size
    n = cfg.num_segments
    length = cfg.segment_length * size
    radius = cfg.segment_radius * size
    aa = 1.0  # antialias band in pixels

    u = torch.rand(n + 3, generator=gen, dtype=torch.float64)
    angles = torch.empty(n, dtype=torch.float64)
    angles[0] = (u[0] * 2 - 1) * cfg.rotation_range
    for i in range(1, n):
        angles[i] = angles[i - 1] + (u[i] * 2 - 1) * cfg.articulation_range

    nodes = torch.zeros(n + 1, 2, dtype=torch.float64)
    for i in range(n):
        step = torch.stack([torch.sin(angles[i]), torch.cos(angles[i])]) * length
        nodes[i + 1] = nodes[i] + step

    # place the chain so every node (plus stroke width) stays inside the frame
    margin = radius + aa + 1.0
    lo = nodes.min(dim=0).values - margin
    hi = nodes.max(dim=0).values + margin
    center_off = (size - 1) / 2.0 - (lo + hi) / 2.0
    slack = ((size - 1) - (hi - lo)) / 2.0
    jitter = (u[n : n + 2] * 2 - 1) * cfg.translation_range * size
    offset = center_off + torch.minimum(slack.clamp_min(0.0), jitter.abs()) * jitter.sign()
    nodes = nodes + offset

    colors, bg = _sprite_colors(n, gen)
    rows = torch.arange(size, dtype=torch.float64)
    pr, pc = torch.meshgrid(rows, rows, indexing="ij")
    pts = torch.stack([pr, pc], dim=-1)  # (size, size, 2)

    img = torch.empty(3, size, size, dtype=torch.float64)
    for c in range(3):
        img[c] = bg[c]
    region = torch.zeros(size, size, dtype=torch.int8)
    for i in range(n):
        a, b = nodes[i], nodes[i + 1]
        ab = b - a
        t = ((pts - a) * ab).sum(-1) / (ab * ab).sum().clamp_min(1e-12)
        proj = a + t.clamp(0.0, 1.0).unsqueeze(-1) * ab
        dist = (pts - proj).norm(dim=-1)
        alpha = ((radius + aa / 2 - dist) / aa).clamp(0.0, 1.0)
        color = torch.tensor(colors[i], dtype=torch.float64).view(3, 1, 1)
        img = img * (1 - alpha) + color * alpha
        region[alpha > 0.5] = i + 1

    joints = nodes[:n].clone()  # proximal endpoint of each segment
    return img.to(dtype), joints.to(dtype), region, colors, bg


def generate_sprites(cfg, gen):
    """Render an articulated-sprite dataset with exact joint coordinates.

    Each sample carries the image, `num_segments` joint landmarks in pixel
    (row, col) coordinates, and a per-pixel region map (0 = background,
    i = i-th segment).
    """
    samples = []
    for _ in range(cfg.count):
        img, joints, region, _, _ = _render_sprite(cfg, gen)
        samples.append(
            Sample(image=img, landmarks=joints, region_map=region)
        )
    return Dataset(samples=samples, name="sprites")


# ---------------------------------------------------------------------------
# Folder ingestion


def _load_image_file(path, image_size=None, center_crop=True):
    """Load one image; returns (tensor, (top, left, scale)) for landmark remapping."""
    top = left = 0
    scale = 1.0
    try:
        with PILImage.open(path) as im:
            im = im.convert("RGB")
            if center_crop and im.width != im.height:
                side = min(im.width, im.height)
                left = (im.width - side) // 2
                top = (im.height - side) // 2
                im = im.crop((left, top, left + side, top + side))
            if image_size is not None and (im.width, im.height) != (image_size, image_size):
                scale = image_size / im.width
                im = im.resize((image_size, image_size), PILImage.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except OSError as e:
        raise OSError(f"unreadable image file: {path}: {e}") from e
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous(), (top, left, scale)


def read_landmarks_csv(path):
    """Read landmarks as (N, L, 2) pixel (row, col) from x,y CSV columns."""
    rows = []
    with open(path, newline="") as f:
        for rec in csv.reader(f):
            if not rec:
                continue
            vals = [float(v) for v in rec]
            if len(vals) % 2:
                raise ValueError(f"{path}: odd number of columns in row {len(rows)}")
            xy = torch.tensor(vals, dtype=torch.float32).reshape(-1, 2)
            rows.append(xy.flip(-1))  # (x, y) -> (row, col)
    return torch.stack(rows) if rows else torch.zeros(0, 0, 2)


def write_landmarks_csv(path, landmarks):
    """Write (N, L, 2) pixel (row, col) landmarks as x,y CSV columns."""
    lm = torch.as_tensor(landmarks)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for row in lm:
            writer.writerow([f"{float(v):.6f}" for v in row.flip(-1).reshape(-1)])


def load_image_folder(root, split=None, image_size=None, center_crop=True):
    """Load a directory of images (layout root/{train,test}/... when split given).

    Files are taken in sorted order. An optional landmarks.csv beside the
    images must have exactly one row per image; a count mismatch is fatal.
    """
    root = Path(root)
    folder = root / split if split else root
    if not folder.is_dir():
        raise FileNotFoundError(f"dataset folder does not exist: {folder}")
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        warnings.warn(f"no images found in {folder}", stacklevel=2)
        return Dataset(samples=[], name=str(folder))
    landmarks = None
    lm_path = folder / "landmarks.csv"
    if lm_path.exists():
        landmarks = read_landmarks_csv(lm_path)
        if len(landmarks) != len(files):
            raise ValueError(
                f"{lm_path}: {len(landmarks)} landmark rows for {len(files)} images"
            )
    samples = []
    for i, p in enumerate(files):
        img, (top, left, scale) = _load_image_file(
            p, image_size=image_size, center_crop=center_crop
        )
        lm = None
        if landmarks is not None:
            # CSV landmarks live in stored-file pixels; follow the crop/resize
            lm = (landmarks[i] - torch.tensor([top, left], dtype=torch.float32)) * scale
        samples.append(Sample(image=img, landmarks=lm, path=str(p)))
    return Dataset(samples=samples, name=str(folder))


def load_video_folder(root, image_size=None, center_crop=True):
    """Load video frames laid out as root/<sequence_id>/<frame_index>.png."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset folder does not exist: {root}")
    samples = []
    sequences = {}
    for seq_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        frames = sorted(
            p for p in seq_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
        )
        for frame in frames:
            img, _ = _load_image_file(frame, image_size=image_size, center_crop=center_crop)
            idx = len(samples)
            samples.append(
                Sample(
                    image=img,
                    sequence_id=seq_dir.name,
                    frame_index=int(frame.stem) if frame.stem.isdigit() else idx,
                    path=str(frame),
                )
            )
            sequences.setdefault(seq_dir.name, []).append(idx)
    if not samples:
        warnings.warn(f"no video frames found in {root}", stacklevel=2)
    return Dataset(samples=samples, name=str(root), sequences=sequences)


def save_image(path, img):
    """Write a (3, H, W) float tensor in [0, 1] as PNG."""
    arr = (img.detach().clamp(0, 1) * 255.0).round().to(torch.uint8)
    PILImage.fromarray(arr.permute(1, 2, 0).numpy()).save(path)
