import math

import pytest
import torch

from partdis.data import SpriteConfig
from partdis.evaluation import (
    EvalConfig,
    MetricReport,
    evaluate_run,
    fit_regressor,
    fixed_grid_landmarks,
    interocular_distances,
    model_landmarks,
    norm_to_px,
    normalized_error,
    pck,
    px_to_norm,
)
from partdis.networks import ModelConfig
from partdis.trainer import DataConfig, RunConfig, build_datasets, init_state


def sgd_regressor_oracle(x, y, ridge=1e-6, iters=200):
    """Iterative solver for the same least-squares problem (test-only path)."""
    w = torch.zeros(x.shape[1], y.shape[1], dtype=torch.float64, requires_grad=True)
    opt = torch.optim.LBFGS([w], max_iter=iters, tolerance_grad=1e-14, tolerance_change=1e-16)

    def closure():
        opt.zero_grad()
        loss = ((x @ w - y) ** 2).sum() + ridge * (w**2).sum()
        loss.backward()
        return loss

    opt.step(closure)
    return w.detach()


class TestFitRegressor:
    def test_identity_recovery(self):
        gen = torch.Generator().manual_seed(0)
        x = torch.randn(50, 8, dtype=torch.float64, generator=gen)
        reg = fit_regressor(x, x)
        assert (reg.weight - torch.eye(8, dtype=torch.float64)).abs().max() < 1e-6
        assert float((reg.predict(x) - x).abs().max()) < 1e-6

    def test_scaling(self):
        gen = torch.Generator().manual_seed(1)
        x = torch.randn(40, 6, dtype=torch.float64, generator=gen)
        reg = fit_regressor(x, 2.0 * x)
        assert (reg.weight - 2.0 * torch.eye(6, dtype=torch.float64)).abs().max() < 1e-6

    def test_matches_iterative_solver(self):
        gen = torch.Generator().manual_seed(2)
        x = torch.randn(100, 8, dtype=torch.float64, generator=gen)
        w_true = torch.randn(8, 4, dtype=torch.float64, generator=gen)
        y = x @ w_true + 0.01 * torch.randn(100, 4, dtype=torch.float64, generator=gen)
        closed = fit_regressor(x, y).weight
        iterative = sgd_regressor_oracle(x, y)
        assert (closed - iterative).abs().max() < 1e-4

    def test_rank_deficiency_warned_but_solved(self):
        x = torch.zeros(30, 4, dtype=torch.float64)
        x[:, 0] = torch.arange(30, dtype=torch.float64)
        y = torch.randn(30, 2, dtype=torch.float64)
        with pytest.warns(UserWarning, match="rank-deficient"):
            reg = fit_regressor(x, y)
        assert torch.isfinite(reg.weight).all()

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError):
            fit_regressor(torch.randn(3, 8), torch.randn(3, 4))

    def test_bias_freedom(self):
        # no intercept: translating the inputs changes the predictions
        gen = torch.Generator().manual_seed(3)
        x = torch.randn(50, 4, dtype=torch.float64, generator=gen)
        y = torch.randn(50, 4, dtype=torch.float64, generator=gen)
        reg = fit_regressor(x, y)
        shifted = reg.predict(x + 0.5)
        assert not torch.allclose(shifted, reg.predict(x), atol=1e-6)
        assert float(reg.predict(torch.zeros(1, 4, dtype=torch.float64)).abs().max()) == 0.0


class TestNormalizedError:
    def test_zero_on_exact(self):
        gt = torch.rand(10, 5, 2) * 100
        assert normalized_error(gt, gt, 64.0) == pytest.approx(0.0)

    def test_single_offset_by_reference(self):
        gt = torch.zeros(1, 1, 2)
        pred = torch.tensor([[[3.0, 4.0]]])  # distance 5
        assert normalized_error(pred, gt, 5.0) == pytest.approx(100.0)

    def test_monte_carlo_gaussian(self):
        gen = torch.Generator().manual_seed(4)
        sigma, ref = 2.0, 50.0
        gt = torch.rand(10_000, 1, 2, generator=gen) * 100
        pred = gt + sigma * torch.randn(gt.shape, generator=gen)
        expect = sigma * math.sqrt(math.pi / 2) / ref * 100
        got = normalized_error(pred, gt, ref)
        assert abs(got - expect) / expect < 0.05

    def test_translation_invariance(self):
        gen = torch.Generator().manual_seed(5)
        gt = torch.rand(20, 3, 2, generator=gen) * 50
        pred = gt + torch.randn(gt.shape, generator=gen)
        base = normalized_error(pred, gt, 10.0)
        shift = torch.tensor([7.0, -3.0])
        assert normalized_error(pred + shift, gt + shift, 10.0) == pytest.approx(base)

    def test_zero_reference_rejected(self):
        with pytest.raises(ValueError):
            normalized_error(torch.zeros(1, 1, 2), torch.zeros(1, 1, 2), 0.0)

    def test_per_image_reference(self):
        gt = torch.zeros(2, 1, 2)
        pred = torch.tensor([[[0.0, 1.0]], [[0.0, 2.0]]])
        refs = torch.tensor([1.0, 2.0])
        assert normalized_error(pred, gt, refs) == pytest.approx(100.0)

    def test_interocular_helper(self):
        gt = torch.tensor([[[0.0, 0.0], [0.0, 4.0], [9.0, 9.0]]])
        d = interocular_distances(gt, 0, 1)
        assert d[0] == pytest.approx(4.0)


class TestPck:
    def test_exact_predictions(self):
        gt = torch.rand(5, 4, 2) * 30
        assert pck(gt, gt, 6.0) == pytest.approx(100.0)

    def test_all_outside(self):
        gt = torch.zeros(5, 4, 2)
        pred = gt + torch.tensor([12.0, 0.0])
        assert pck(pred, gt, 6.0) == pytest.approx(0.0)

    def test_half_within(self):
        gt = torch.zeros(2, 1, 2)
        pred = torch.stack(
            [torch.tensor([[0.0, 3.0]]), torch.tensor([[0.0, 12.0]])]
        )
        assert pck(pred, gt, 6.0) == pytest.approx(50.0)

    def test_monotone_in_threshold(self):
        gen = torch.Generator().manual_seed(6)
        gt = torch.rand(50, 4, 2, generator=gen) * 64
        pred = gt + 3 * torch.randn(gt.shape, generator=gen)
        values = [pck(pred, gt, t) for t in (1.0, 2.0, 4.0, 8.0, 16.0)]
        assert all(a <= b for a, b in zip(values, values[1:]))


class TestCoordinateConversion:
    def test_roundtrip(self):
        gen = torch.Generator().manual_seed(7)
        px = torch.rand(5, 3, 2, generator=gen).double() * 63
        assert (norm_to_px(px_to_norm(px, 64), 64) - px).abs().max() < 1e-9

    def test_corners(self):
        assert torch.allclose(
            norm_to_px(torch.tensor([[-1.0, 1.0]]), 64), torch.tensor([[0.0, 63.0]]).double()
        )


@pytest.fixture(scope="module")
def setup():
    cfg = RunConfig(
        model=ModelConfig(
            num_parts=4,
            image_size=32,
            width=16,
            appearance_dim=16,
            decoder_head_width=64,
            disc_width=8,
            map_res=32,
            alpha_min_res=16,
        ),
        data=DataConfig(kind="sprites", sprites=SpriteConfig(count=120, size=32)),
        seed=3,
    )
    train, test = build_datasets(cfg)
    state = init_state(cfg)
    return state.model, train, test


class TestEvaluateRun:
    def test_report_contents(self, setup):
        model, train, test = setup
        cfg = EvalConfig(normalization="edge-length")
        report = evaluate_run(model, test, train, cfg)
        assert isinstance(report, MetricReport)
        assert report.mean_error >= 0
        assert report.num_landmarks == 4
        assert len(report.per_landmark) == 4
        assert "px6" in report.pck and "alpha0.05" in report.pck
        assert "fixed_grid_baseline_error" in report.extras
        thresholds = [report.pck[f"alpha{a:g}"] for a in cfg.pck_alphas]
        assert all(a <= b for a, b in zip(thresholds, thresholds[1:]))

    def test_missing_annotations_fatal(self, setup):
        model, train, test = setup
        import copy

        broken = copy.deepcopy(test)
        broken.samples[0].landmarks = None
        with pytest.raises(ValueError, match="landmark"):
            evaluate_run(model, broken, train)

    def test_shuffled_annotations_match_baseline(self, setup):
        # negative control: destroying the image-annotation correspondence
        # leaves nothing to regress on, so the error falls back to the spread
        # captured by the constant fixed-grid baseline
        model, train, test = setup
        gt_train = train.landmark_array().double()
        gt_test = test.landmark_array().double()
        perm = torch.randperm(len(gt_train), generator=torch.Generator().manual_seed(8))
        pred_train = model_landmarks(model, train)
        pred_test = model_landmarks(model, test)
        from partdis.evaluation import evaluate_landmarks

        cfg = EvalConfig()
        shuffled, _ = evaluate_landmarks(
            pred_train, gt_train[perm], pred_test, gt_test, 32, cfg
        )
        with pytest.warns(UserWarning, match="rank-deficient"):
            baseline, _ = evaluate_landmarks(
                fixed_grid_landmarks(4, len(train)),
                gt_train[perm],
                fixed_grid_landmarks(4, len(test)),
                gt_test,
                32,
                cfg,
            )
        ratio = shuffled.mean_error / baseline.mean_error
        assert 0.75 < ratio < 1.35

    def test_fixed_grid_landmarks_constant(self):
        lm = fixed_grid_landmarks(4, 7)
        assert lm.shape == (7, 4, 2)
        assert torch.equal(lm[0], lm[3])

    def test_report_write(self, setup, tmp_path):
        model, train, test = setup
        report = evaluate_run(model, test, train)
        report.write(tmp_path / "report.json", tmp_path / "per_landmark.csv")
        import json

        data = json.loads((tmp_path / "report.json").read_text())
        assert set(data) >= {
            "normalization_mode",
            "mean_error",
            "pck",
            "per_landmark",
            "num_images",
        }
        lines = (tmp_path / "per_landmark.csv").read_text().splitlines()
        assert lines[0] == "landmark,mean_error"
        assert len(lines) == 1 + 4
