import csv
import json

import pytest
import torch
import yaml

from partdis.cli import PALETTE, main, part_assignment, render_overlay
from partdis.data import SpriteConfig, generate_sprites, save_image
from partdis.networks import load_checkpoint
from partdis.trainer import infer

TINY = {
    "model": {
        "num_parts": 4,
        "image_size": 32,
        "width": 16,
        "appearance_dim": 16,
        "decoder_head_width": 64,
        "disc_width": 8,
        "map_res": 32,
        "alpha_min_res": 16,
    },
    "data": {"kind": "sprites", "sprites": {"count": 40, "size": 32}},
    "batch_size": 4,
    "steps": 10,
    "seed": 0,
    "checkpoint_every": 0,
    "run_name": "tiny",
}


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def read_log(out_dir):
    return [
        json.loads(line)
        for line in (out_dir / "log.ndjson").read_text().splitlines()
    ]


class TestTrainCommand:
    def test_train_writes_checkpoint_and_log(self, tmp_path, tiny_config_file):
        out = tmp_path / "run"
        code = main(
            ["train", "--config", str(tiny_config_file), "--out", str(out), "--steps", "10"]
        )
        assert code == 0
        assert (out / "ckpt_final.pt").exists()
        assert (out / "config_resolved.yaml").exists()
        assert len(read_log(out)) == 10

    def test_invalid_config_key_exit_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text(yaml.safe_dump({"steps": 1, "leerning_rate": 0.1}))
        code = main(["train", "--config", str(bad), "--out", str(tmp_path / "o")])
        assert code == 1
        assert "leerning_rate" in capsys.readouterr().err

    def test_missing_config_file_exit_1(self, tmp_path):
        code = main(
            ["train", "--config", str(tmp_path / "none.yaml"), "--out", str(tmp_path / "o")]
        )
        assert code == 1

    def test_same_seed_identical_losses(self, tmp_path, tiny_config_file):
        outs = [tmp_path / "a", tmp_path / "b"]
        for out in outs:
            assert main(["train", "--config", str(tiny_config_file), "--out", str(out)]) == 0
        log_a, log_b = read_log(outs[0]), read_log(outs[1])
        assert log_a[9]["step"] == 10
        assert log_a[9]["total"] == log_b[9]["total"]

    def test_refuses_nonempty_out_without_overwrite(self, tmp_path, tiny_config_file):
        out = tmp_path / "run"
        out.mkdir()
        (out / "existing.txt").write_text("x")
        code = main(
            ["train", "--config", str(tiny_config_file), "--out", str(out), "--steps", "0"]
        )
        assert code == 1
        code = main(
            [
                "train", "--config", str(tiny_config_file), "--out", str(out),
                "--steps", "0", "--overwrite",
            ]
        )
        assert code == 0

    def test_preset_with_config_overrides(self, tmp_path):
        cfg = dict(TINY)
        cfg["preset"] = "sprites"
        cfg["model"] = dict(TINY["model"])
        cfg["data"] = {"sprites": {"count": 30, "size": 32}}
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(cfg))
        out = tmp_path / "run"
        assert main(["train", "--config", str(path), "--out", str(out), "--steps", "1"]) == 0
        resolved = yaml.safe_load((out / "config_resolved.yaml").read_text())
        assert resolved["model"]["image_size"] == 32  # override applied
        assert resolved["data"]["sprites"]["count"] == 30

    def test_env_var_out_root(self, tmp_path, tiny_config_file, monkeypatch):
        monkeypatch.setenv("PARTDIS_OUT_ROOT", str(tmp_path / "root"))
        assert main(["train", "--config", str(tiny_config_file), "--steps", "0"]) == 0
        assert (tmp_path / "root" / "tiny" / "ckpt_final.pt").exists()


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_run")
    cfg_path = tmp / "tiny.yaml"
    cfg_path.write_text(yaml.safe_dump(TINY))
    out = tmp / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    gen = torch.Generator().manual_seed(5)
    ds = generate_sprites(SpriteConfig(count=3, size=32), gen)
    images = tmp / "imgs"
    images.mkdir()
    for i, s in enumerate(ds.samples):
        save_image(images / f"{i}.png", s.image)
    return out / "ckpt_final.pt", images


class TestEvalCommand:
    def test_untrained_checkpoint_reports(self, tmp_path, trained_run):
        ckpt, _ = trained_run
        out = tmp_path / "eval"
        code = main(["eval", "--checkpoint", str(ckpt), "--out", str(out)])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        # documented report schema
        assert isinstance(report["normalization_mode"], str)
        assert isinstance(report["mean_error"], float)
        assert isinstance(report["pck"], dict)
        assert all(isinstance(v, float) for v in report["pck"].values())
        assert isinstance(report["per_landmark"], list)
        assert isinstance(report["num_images"], int)
        assert (out / "per_landmark.csv").exists()


class TestSwapCommand:
    def test_parts_all_identical_inputs_reconstruction(self, tmp_path, trained_run):
        ckpt, images = trained_run
        out = tmp_path / "swap"
        img = sorted(images.iterdir())[0]
        code = main(
            [
                "swap", "--checkpoint", str(ckpt), "--shape-image", str(img),
                "--appearance-image", str(img), "--parts", "all", "--out", str(out),
            ]
        )
        assert code == 0
        assert (out / "swap.png").exists()
        assert (out / "parts_overlay.png").exists()

    def test_empty_parts_is_reconstruction(self, tmp_path, trained_run):
        ckpt, images = trained_run
        imgs = sorted(images.iterdir())
        out_a = tmp_path / "empty"
        code = main(
            [
                "swap", "--checkpoint", str(ckpt), "--shape-image", str(imgs[0]),
                "--appearance-image", str(imgs[1]), "--parts", "", "--out", str(out_a),
            ]
        )
        assert code == 0
        from partdis.data import _load_image_file

        model, _, _ = load_checkpoint(ckpt)
        shape_img, _ = _load_image_file(imgs[0], image_size=32)
        recon = infer(model, shape_img).reconstruction
        from PIL import Image

        swapped = torch.from_numpy(
            __import__("numpy").asarray(Image.open(out_a / "swap.png")).copy()
        ).permute(2, 0, 1).float() / 255.0
        assert (swapped - recon).abs().max() < 2.5 / 255

    def test_invalid_part_exit_1(self, tmp_path, trained_run, capsys):
        ckpt, images = trained_run
        img = sorted(images.iterdir())[0]
        code = main(
            [
                "swap", "--checkpoint", str(ckpt), "--shape-image", str(img),
                "--appearance-image", str(img), "--parts", "9", "--out",
                str(tmp_path / "bad"),
            ]
        )
        assert code == 1
        assert "0..3" in capsys.readouterr().err


class TestSynthesizeSprites:
    def test_writes_folder_layout(self, tmp_path):
        out = tmp_path / "sprites"
        code = main(
            [
                "synthesize-sprites", "--count", "20", "--size", "32",
                "--seed", "1", "--out", str(out),
            ]
        )
        assert code == 0
        train_files = list((out / "train").glob("*.png"))
        test_files = list((out / "test").glob("*.png"))
        assert len(train_files) == 18 and len(test_files) == 2
        assert (out / "train" / "landmarks.csv").exists()
        with open(out / "train" / "landmarks.csv") as f:
            rows = list(csv.reader(f))
        assert len(rows) == 18 and len(rows[0]) == 8  # 4 joints x (x, y)


class TestExportActivations:
    def test_overlays_and_moment_csv(self, tmp_path, trained_run):
        ckpt, images = trained_run
        out = tmp_path / "acts"
        code = main(
            ["export-activations", "--checkpoint", str(ckpt), "--images", str(images),
             "--out", str(out)]
        )
        assert code == 0
        overlays = sorted(out.glob("*_overlay.png"))
        assert len(overlays) == 3
        with open(out / "moments.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 3 * 4  # images x parts

    def test_moment_csv_roundtrip(self, tmp_path, trained_run):
        ckpt, images = trained_run
        out = tmp_path / "acts2"
        assert (
            main(
                ["export-activations", "--checkpoint", str(ckpt), "--images",
                 str(images), "--out", str(out)]
            )
            == 0
        )
        model, _, _ = load_checkpoint(ckpt)
        from partdis.data import _load_image_file

        with open(out / "moments.csv") as f:
            rows = list(csv.DictReader(f))
        by_image = {}
        for row in rows:
            by_image.setdefault(row["image"], []).append(row)
        for name, recs in by_image.items():
            img, _ = _load_image_file(images / name, image_size=32)
            res = infer(model, img)
            for rec in recs:
                k = int(rec["part"])
                assert abs(float(rec["mu_row"]) - float(res.moments.mean[k, 0])) < 1e-6
                assert abs(float(rec["mu_col"]) - float(res.moments.mean[k, 1])) < 1e-6
                assert abs(float(rec["cov_rr"]) - float(res.moments.cov[k, 0, 0])) < 1e-6


class TestOverlayRendering:
    def test_argmax_colors_match_raw_maps(self):
        # rendering oracle: recover the blended-in palette color at each
        # part's peak pixel and check it indexes the winning part
        gen = torch.Generator().manual_seed(9)
        img = torch.rand(3, 32, 32, generator=gen)
        checks = 0
        for trial in range(100):
            maps = torch.rand(4, 32, 32, generator=gen) ** 3
            overlay = render_overlay(img, maps)
            assign = part_assignment(maps)
            peak = maps.amax(dim=(-2, -1), keepdim=True)
            strength = (maps / peak).amax(dim=0)
            for k in range(4):
                flat = maps[k].argmax()
                r, c = divmod(int(flat), 32)
                winner = int(assign[r, c])
                a = 0.6 * float(strength[r, c])
                recovered = (overlay[:, r, c] - img[:, r, c] * (1 - a)) / a
                nearest = int((PALETTE[:4] - recovered).norm(dim=1).argmin())
                assert nearest == winner
                checks += 1
        assert checks == 400
