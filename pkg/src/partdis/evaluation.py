"""Landmark-regression evaluation protocol.

Part means of a frozen model serve as landmark estimates; a single linear
layer without bias maps them to annotated landmarks. The regressor is solved
in normalized [-1, 1] coordinates, metrics are reported in pixel units of the
original resolution.
"""

import csv
import dataclasses
import json
import warnings
from dataclasses import dataclass, field

import torch

from .trainer import infer

NORMALIZATION_MODES = ("inter-ocular", "edge-length", "diagonal", "pixel-radius")


@dataclass
class RegressionModel:
    """Bias-free linear map from 2K part-mean coordinates to 2L landmarks."""

    weight: torch.Tensor  # (2K, 2L)

    def predict(self, inputs):
        return inputs.to(self.weight.dtype) @ self.weight


def fit_regressor(pred, gt, ridge=1e-6):
    """Least-squares fit of gt ~ pred @ W with no intercept.

    pred: (N, 2K); gt: (N, 2L). Solved in closed form via the normal
    equations with a small ridge term; a rank-deficient input is reported but
    still yields the ridge solution.
    """
    x = torch.as_tensor(pred, dtype=torch.float64)
    y = torch.as_tensor(gt, dtype=torch.float64)
    if x.shape[0] < x.shape[1]:
        raise ValueError(
            f"need at least {x.shape[1]} samples for {x.shape[1]} inputs, got {x.shape[0]}"
        )
    gram = x.T @ x
    rank = int(torch.linalg.matrix_rank(gram))
    if rank < x.shape[1]:
        warnings.warn(
            f"regressor inputs are rank-deficient ({rank}/{x.shape[1]}); "
            "ridge term keeps the solution defined",
            stacklevel=2,
        )
    eye = torch.eye(x.shape[1], dtype=torch.float64)
    weight = torch.linalg.solve(gram + ridge * eye, x.T @ y)
    return RegressionModel(weight=weight)


def normalized_error(predicted, gt, ref):
    """Mean landmark error as a percentage of a reference length.

    predicted/gt: (N, L, 2) in pixels; ref: scalar or per-image (N,) reference
    (inter-ocular distance, edge length, diagonal, or 1 for raw pixels).
    """
    pred = torch.as_tensor(predicted, dtype=torch.float64)
    target = torch.as_tensor(gt, dtype=torch.float64)
    ref_t = torch.as_tensor(ref, dtype=torch.float64)
    if bool((ref_t <= 0).any()):
        raise ValueError("reference length must be positive")
    dist = (pred - target).norm(dim=-1)  # (N, L)
    if ref_t.dim() == 1:
        ref_t = ref_t.unsqueeze(1)
    return float((dist / ref_t).mean() * 100.0)


def per_landmark_error(predicted, gt, ref):
    pred = torch.as_tensor(predicted, dtype=torch.float64)
    target = torch.as_tensor(gt, dtype=torch.float64)
    ref_t = torch.as_tensor(ref, dtype=torch.float64)
    dist = (pred - target).norm(dim=-1)
    if ref_t.dim() == 1:
        ref_t = ref_t.unsqueeze(1)
    return ((dist / ref_t) * 100.0).mean(dim=0)


def pck(predicted, gt, threshold):
    """Percentage of predictions within `threshold` (pixels) of ground truth."""
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    pred = torch.as_tensor(predicted, dtype=torch.float64)
    target = torch.as_tensor(gt, dtype=torch.float64)
    dist = (pred - target).norm(dim=-1)
    return float((dist <= threshold).double().mean() * 100.0)


def interocular_distances(gt, left_index, right_index):
    """Per-image distance between two landmark columns (the eye pair)."""
    target = torch.as_tensor(gt, dtype=torch.float64)
    return (target[:, left_index] - target[:, right_index]).norm(dim=-1)


@dataclass
class EvalConfig:
    normalization: str = "edge-length"
    interocular_indices: tuple = (0, 1)
    pck_thresholds_px: tuple = (6.0,)
    pck_alphas: tuple = (0.025, 0.05, 0.075, 0.1)  # fractions of the diagonal
    batch_size: int = 32

    def __post_init__(self):
        if self.normalization not in NORMALIZATION_MODES:
            raise ValueError(
                f"unknown normalization {self.normalization!r}; "
                f"expected one of {NORMALIZATION_MODES}"
            )


@dataclass
class MetricReport:
    normalization_mode: str
    mean_error: float
    pck: dict
    per_landmark: list
    num_images: int
    num_parts: int
    num_landmarks: int
    extras: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=2)

    def write(self, json_path, csv_path=None):
        with open(json_path, "w") as f:
            f.write(self.to_json() + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["landmark", "mean_error"])
                for i, err in enumerate(self.per_landmark):
                    writer.writerow([i, f"{err:.6f}"])


def norm_to_px(coords, image_size):
    """Map normalized [-1, 1] (row, col) to pixel coordinates."""
    return (torch.as_tensor(coords, dtype=torch.float64) + 1.0) * (image_size - 1) / 2.0


def px_to_norm(coords, image_size):
    return torch.as_tensor(coords, dtype=torch.float64) * 2.0 / (image_size - 1) - 1.0


def model_landmarks(model, dataset, batch_size=32):
    """Part means for every image, (N, K, 2) normalized (row, col)."""
    outs = []
    for start in range(0, len(dataset), batch_size):
        imgs = torch.stack(
            [dataset[i].image for i in range(start, min(start + batch_size, len(dataset)))]
        )
        outs.append(infer(model, imgs).moments.mean)
    return torch.cat(outs).double()


def fixed_grid_landmarks(num_parts, count):
    """The constant baseline: the same normalized grid of points per image."""
    side = int(num_parts**0.5)
    while side * side < num_parts:
        side += 1
    axis = torch.linspace(-0.5, 0.5, side, dtype=torch.float64)
    rr, cc = torch.meshgrid(axis, axis, indexing="ij")
    pts = torch.stack([rr, cc], dim=-1).reshape(-1, 2)[:num_parts]
    return pts.unsqueeze(0).expand(count, -1, -1).clone()


def _references(cfg, gt_px, image_size):
    if cfg.normalization == "edge-length":
        return float(image_size)
    if cfg.normalization == "diagonal":
        return float(image_size) * 2.0**0.5
    if cfg.normalization == "pixel-radius":
        return 1.0
    return interocular_distances(gt_px, *cfg.interocular_indices)


def evaluate_landmarks(pred_train, gt_train_px, pred_test, gt_test_px, image_size, cfg):
    """Fit the bias-free regressor on the train split and score the test split.

    pred_*: (N, K, 2) normalized part means; gt_*: (N, L, 2) pixel landmarks.
    """
    n_train, k = pred_train.shape[:2]
    l = gt_train_px.shape[1]
    reg = fit_regressor(
        pred_train.reshape(n_train, 2 * k),
        px_to_norm(gt_train_px, image_size).reshape(n_train, 2 * l),
    )
    pred_px = norm_to_px(
        reg.predict(pred_test.reshape(len(pred_test), 2 * k)).reshape(-1, l, 2),
        image_size,
    )
    ref = _references(cfg, gt_test_px, image_size)
    diag = float(image_size) * 2.0**0.5
    report = MetricReport(
        normalization_mode=cfg.normalization,
        mean_error=normalized_error(pred_px, gt_test_px, ref),
        pck={
            **{f"px{t:g}": pck(pred_px, gt_test_px, t) for t in cfg.pck_thresholds_px},
            **{f"alpha{a:g}": pck(pred_px, gt_test_px, a * diag) for a in cfg.pck_alphas},
        },
        per_landmark=[float(v) for v in per_landmark_error(pred_px, gt_test_px, ref)],
        num_images=len(pred_test),
        num_parts=k,
        num_landmarks=l,
    )
    return report, pred_px


def evaluate_run(model, test_set, train_set, cfg=None):
    """Full protocol: extract part means, fit on train annotations, score test."""
    cfg = cfg or EvalConfig()
    gt_train = train_set.landmark_array().double()
    gt_test = test_set.landmark_array().double()
    image_size = model.cfg.image_size
    pred_train = model_landmarks(model, train_set, cfg.batch_size)
    pred_test = model_landmarks(model, test_set, cfg.batch_size)
    report, _ = evaluate_landmarks(
        pred_train, gt_train, pred_test, gt_test, image_size, cfg
    )
    with warnings.catch_warnings():
        # constant baseline inputs are rank-deficient by construction
        warnings.simplefilter("ignore", UserWarning)
        baseline_report, _ = evaluate_landmarks(
            fixed_grid_landmarks(model.cfg.num_parts, len(train_set)),
            gt_train,
            fixed_grid_landmarks(model.cfg.num_parts, len(test_set)),
            gt_test,
            image_size,
            cfg,
        )
    report.extras["fixed_grid_baseline_error"] = baseline_report.mean_error
    return report
