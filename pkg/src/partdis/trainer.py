"""End-to-end optimization loop and run configuration.

One training step wires the two streams together: the appearance stream
encodes the warped image and pools per-part appearance vectors; the shape
stream encodes the photometrically jittered image into activation maps whose
moments drive both the decoder conditioning and the equivariance loss.
"""

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

from .data import (
    Dataset,
    PairBatch,
    SpriteConfig,
    collate_pairs,
    derive_seed,
    generate_sprites,
    load_image_folder,
    load_video_folder,
    make_pair_image,
    make_pair_video,
)
from .geometry import (
    AppearanceSamplingConfig,
    TpsSamplingConfig,
    make_identity_grid,
)
from .networks import (
    Model,
    ModelConfig,
    build_model,
    extract_patches,
    load_checkpoint,
    save_checkpoint,
)
from .objectives import (
    LossWeights,
    NumericalError,
    adversarial_losses,
    equivariance_loss,
    reconstruction_loss,
    soft_mask,
    total_loss,
    warped_map_moments,
)
from .partcore import (
    PartMoments,
    compute_moments,
    normalize_maps,
    pool_appearance,
    project_appearance,
    render_approx_maps,
)


@dataclass
class DataConfig:
    kind: str = "sprites"  # sprites | folder | video
    path: Optional[str] = None
    sprites: SpriteConfig = field(default_factory=SpriteConfig)
    holdout_fraction: float = 0.1  # test split carved from generated sprites

    def __post_init__(self):
        if self.kind not in ("sprites", "folder", "video"):
            raise ValueError(f"unknown dataset kind: {self.kind!r}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    tps: TpsSamplingConfig = field(default_factory=TpsSamplingConfig)
    photo: AppearanceSamplingConfig = field(default_factory=AppearanceSamplingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    learning_rate: float = 1e-3
    batch_size: int = 16
    steps: int = 1000
    adversarial: bool = False
    p_frame: float = 0.5  # video-frame pairing probability
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 1000
    clip_grad_norm: float = 0.0  # 0 disables clipping
    run_name: str = "run"


def _nested_fields():
    return {
        "model": ModelConfig,
        "losses": LossWeights,
        "tps": TpsSamplingConfig,
        "photo": AppearanceSamplingConfig,
        "data": DataConfig,
    }


def config_from_dict(raw):
    """Build a RunConfig from a plain dict, rejecting unknown keys by name."""

    def build(cls, d, prefix):
        if not isinstance(d, dict):
            raise ValueError(f"config section {prefix or cls.__name__} must be a mapping")
        names = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, val in d.items():
            if key not in names:
                raise ValueError(f"unknown config key: {prefix}{key}")
            sub = _nested_fields().get(key) if cls is RunConfig else None
            if key == "sprites" and cls is DataConfig:
                sub = SpriteConfig
            if sub is not None:
                kwargs[key] = build(sub, val, f"{prefix}{key}.")
            else:
                if isinstance(val, list):
                    val = tuple(val)
                kwargs[key] = val
        return cls(**kwargs)

    return build(RunConfig, raw, "")


def config_to_dict(cfg):
    d = dataclasses.asdict(cfg)

    def detuple(obj):
        if isinstance(obj, tuple):
            return [detuple(v) for v in obj]
        if isinstance(obj, dict):
            return {k: detuple(v) for k, v in obj.items()}
        return obj

    return detuple(d)


def preset(name):
    """Named run configurations; the dataset presets mirror the published
    per-experiment settings (parts, resolution, Adam learning rate,
    adversarial on/off)."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset: {name!r} (have {sorted(PRESETS)})")
    return PRESETS[name]()


def _table_preset(name, parts, resolution, lr, adversarial, kind="folder"):
    variant = "full" if adversarial else "fixed"
    return RunConfig(
        model=ModelConfig(
            num_parts=parts, image_size=resolution, decoder_variant=variant
        ),
        data=DataConfig(kind=kind),
        learning_rate=lr,
        adversarial=adversarial,
        run_name=name,
    )


def _sprites_preset():
    return RunConfig(
        model=ModelConfig(
            num_parts=4,
            image_size=64,
            width=32,
            appearance_dim=32,
            decoder_head_width=128,
            disc_width=16,
            decoder_variant="fixed",
            fixed_cov=0.02,
        ),
        losses=LossWeights(lambda_mu=1.0, lambda_sigma=1.0, lambda_scal=0.2),
        tps=TpsSamplingConfig(offset_std=0.05, translation_range=0.1),
        data=DataConfig(kind="sprites", sprites=SpriteConfig(count=2000, size=64)),
        learning_rate=1e-3,
        batch_size=16,
        steps=3000,
        run_name="sprites",
    )


PRESETS = {
    "cat_head_10": lambda: _table_preset("cat_head_10", 10, 128, 1e-3, False),
    "cat_head_20": lambda: _table_preset("cat_head_20", 20, 128, 1e-3, False),
    "celeba": lambda: _table_preset("celeba", 10, 128, 1e-3, False),
    "human36m": lambda: _table_preset("human36m", 16, 128, 2e-4, False, kind="video"),
    "penn_action": lambda: _table_preset("penn_action", 16, 128, 2e-4, False, kind="video"),
    "dogs_run": lambda: _table_preset("dogs_run", 12, 128, 1e-3, False),
    "cub": lambda: _table_preset("cub", 10, 128, 1e-3, False),
    "bbc_pose_regression": lambda: _table_preset(
        "bbc_pose_regression", 30, 128, 1e-3, False, kind="video"
    ),
    "bbc_pose_synthesis": lambda: _table_preset(
        "bbc_pose_synthesis", 40, 256, 1e-3, True, kind="video"
    ),
    "deepfashion": lambda: _table_preset("deepfashion", 16, 256, 1e-3, True),
    "sprites": _sprites_preset,
}


@dataclass
class LossReport:
    step: int
    total: float
    reconstruction: float
    equivariance: float
    adversarial_g: float = 0.0
    adversarial_d: float = 0.0

    def to_json(self):
        return json.dumps(dataclasses.asdict(self))


@dataclass
class TrainState:
    model: Model
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    config: RunConfig
    step: int = 0


def decoder_maps(moments, grid, model_cfg):
    """Render the decoder's approximate maps under the configured variant."""
    if model_cfg.decoder_variant == "fixed":
        eye = torch.eye(2, dtype=moments.mean.dtype, device=moments.mean.device)
        cov = eye.expand(*moments.cov.shape) * model_cfg.fixed_cov
        moments = PartMoments(mean=moments.mean, cov=cov)
    return render_approx_maps(moments, grid, cov_scale=model_cfg.cov_scale)


def init_state(config):
    model = build_model(config.model, seed=config.seed)
    disc_params = list(model.discriminator.parameters())
    disc_ids = {id(p) for p in disc_params}
    gen_params = [p for p in model.parameters() if id(p) not in disc_ids]
    opt_g = torch.optim.Adam(gen_params, lr=config.learning_rate, betas=(0.9, 0.999))
    opt_d = torch.optim.Adam(
        disc_params, lr=config.learning_rate, betas=(0.9, 0.999)
    )
    return TrainState(model=model, opt_g=opt_g, opt_d=opt_d, config=config)


def forward_pass(model, shape_input, appearance_input, grid):
    """Run both streams; returns the pieces every consumer needs."""
    maps_app, stem = model.shape_encode(appearance_input)
    features = model.appearance_encode(stem, normalize_maps(maps_app))
    alpha = pool_appearance(features, maps_app)
    maps_shape, _ = model.shape_encode(shape_input)
    mom_shape = compute_moments(maps_shape, grid)
    approx = decoder_maps(mom_shape, grid, model.cfg)
    f_x = project_appearance(alpha, approx)
    recon = model.decode(approx, f_x)
    return {
        "maps_app": maps_app,
        "maps_shape": maps_shape,
        "alpha": alpha,
        "moments_shape": mom_shape,
        "approx": approx,
        "recon": recon,
    }


def train_step(state, batch):
    """One optimization step on a collated pair batch; returns a LossReport."""
    cfg = state.config
    model = state.model
    model.train()
    dtype = batch.target.dtype
    grid = make_identity_grid(
        model.cfg.map_res, model.cfg.map_res, dtype=dtype, device=batch.target.device
    )
    img_res = batch.target.shape[-1]
    grid_img = make_identity_grid(img_res, img_res, dtype=dtype, device=batch.target.device)

    out = forward_pass(model, batch.shape_input, batch.appearance_input, grid)
    mom_shape = out["moments_shape"]

    # mask moments come from the shape stream and must not steer it
    mask = soft_mask(mom_shape.detach(), cfg.losses.lambda_scal, grid_img)
    rec = reconstruction_loss(batch.target, out["recon"], mask)

    mom_app = compute_moments(out["maps_app"], grid)
    with_warp = [i for i, t in enumerate(batch.transforms) if t is not None]
    if with_warp:
        warped = [
            warped_map_moments(out["maps_shape"][i : i + 1], batch.transforms[i], grid)
            for i in with_warp
        ]
        mom_b = PartMoments(
            mean=torch.cat([m.mean for m in warped]),
            cov=torch.cat([m.cov for m in warped]),
        )
        mom_a = PartMoments(mean=mom_app.mean[with_warp], cov=mom_app.cov[with_warp])
        equiv = equivariance_loss(mom_a, mom_b, cfg.losses)
    else:
        equiv = batch.target.new_zeros(())

    adv_g = None
    d_val = 0.0
    if cfg.adversarial:
        centers = mom_shape.mean.detach()
        approx_img = decoder_maps(mom_shape.detach(), grid_img, model.cfg)
        cond = extract_patches(approx_img, centers, model.cfg.patch_size)
        real = extract_patches(batch.target, centers, model.cfg.patch_size)
        fake = extract_patches(out["recon"], centers, model.cfg.patch_size)
        b, k = cond.shape[:2]
        cond_flat = cond.reshape(b * k, *cond.shape[2:])
        # discriminator update on detached generations
        logits_real = model.discriminate(real.reshape(b * k, *real.shape[2:]), cond_flat)
        logits_fake_d = model.discriminate(
            fake.detach().reshape(b * k, *fake.shape[2:]), cond_flat
        )
        d_loss, _ = adversarial_losses(logits_real, logits_fake_d)
        if not bool(torch.isfinite(d_loss)):
            raise NumericalError("discriminator loss is non-finite")
        state.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        state.opt_d.step()
        d_val = float(d_loss.detach())
        logits_fake_g = model.discriminate(
            fake.reshape(b * k, *fake.shape[2:]), cond_flat
        )
        _, adv_g = adversarial_losses(logits_real.detach(), logits_fake_g)

    total = total_loss(rec, equiv, adv_g, cfg.losses)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    if cfg.clip_grad_norm > 0:
        torch.nn.utils.clip_grad_norm_(
            [p for g in state.opt_g.param_groups for p in g["params"]],
            cfg.clip_grad_norm,
        )
    state.opt_g.step()
    state.step += 1
    return LossReport(
        step=state.step,
        total=float(total.detach()),
        reconstruction=float(rec.detach()),
        equivariance=float(equiv.detach()),
        adversarial_g=0.0 if adv_g is None else float(adv_g.detach()),
        adversarial_d=d_val,
    )


def build_datasets(config):
    """Materialize (train, test) datasets for a run configuration."""
    dc = config.data
    if dc.kind == "sprites":
        gen = torch.Generator().manual_seed(derive_seed(config.seed, "sprites"))
        full = generate_sprites(dc.sprites, gen)
        n_test = max(1, int(len(full) * dc.holdout_fraction))
        train = Dataset(samples=full.samples[:-n_test], name="sprites-train")
        test = Dataset(samples=full.samples[-n_test:], name="sprites-test")
        return train, test
    if dc.path is None:
        raise FileNotFoundError(f"dataset kind {dc.kind!r} requires data.path")
    size = config.model.image_size
    if dc.kind == "folder":
        return (
            load_image_folder(dc.path, split="train", image_size=size),
            load_image_folder(dc.path, split="test", image_size=size),
        )
    full = load_video_folder(dc.path, image_size=size)
    return full, full


def make_batch(config, dataset, step):
    """Deterministic batch for a given step: indices and pair randomness are
    pure functions of (seed, step), so interrupted runs resume exactly."""
    gen = torch.Generator().manual_seed(derive_seed(config.seed, 1, step))
    idx = torch.randint(len(dataset), (config.batch_size,), generator=gen)
    pairs = []
    for slot, i in enumerate(idx.tolist()):
        pg = torch.Generator().manual_seed(derive_seed(config.seed, 2, step, slot, i))
        sample = dataset[i]
        if sample.sequence_id is not None:
            pairs.append(
                make_pair_video(
                    sample, dataset, config.tps, config.photo, pg, config.p_frame
                )
            )
        else:
            pairs.append(make_pair_image(sample, config.tps, config.photo, pg))
    return collate_pairs(pairs)


def _save_train_checkpoint(path, state):
    save_checkpoint(
        path,
        state.model,
        step=state.step,
        extra={
            "opt_g": state.opt_g.state_dict(),
            "opt_d": state.opt_d.state_dict(),
            "run_config": config_to_dict(state.config),
        },
    )


def load_train_checkpoint(path):
    """Rebuild a full TrainState (model, optimizers, step) from disk."""
    model, step, extra = load_checkpoint(path)
    config = config_from_dict(extra["run_config"])
    state = init_state(config)
    state.model = model
    disc_params = list(model.discriminator.parameters())
    disc_ids = {id(p) for p in disc_params}
    gen_params = [p for p in model.parameters() if id(p) not in disc_ids]
    state.opt_g = torch.optim.Adam(
        gen_params, lr=config.learning_rate, betas=(0.9, 0.999)
    )
    state.opt_d = torch.optim.Adam(
        disc_params, lr=config.learning_rate, betas=(0.9, 0.999)
    )
    state.opt_g.load_state_dict(extra["opt_g"])
    state.opt_d.load_state_dict(extra["opt_d"])
    state.step = step
    return state


def fit(config, out_dir, resume=False, callback=None):
    """Train per the run configuration, logging and checkpointing under out_dir.

    Writes log.ndjson (one loss record per step), ckpt_<step>.pt at the
    configured cadence, and ckpt_final.pt on completion. With resume=True,
    continues from the newest checkpoint in out_dir.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, _ = build_datasets(config)
    if config.steps > 0 and len(train_ds) == 0:
        raise FileNotFoundError("training dataset is empty")

    state = None
    if resume:
        existing = sorted(
            out.glob("ckpt_*.pt"), key=lambda p: p.stat().st_mtime, reverse=True
        )
        if existing:
            state = load_train_checkpoint(existing[0])
    if state is None:
        state = init_state(config)
        _save_train_checkpoint(out / "ckpt_0.pt", state)

    log_path = out / "log.ndjson"
    mode = "a" if resume and state.step > 0 else "w"
    with open(log_path, mode) as logf:
        while state.step < config.steps:
            batch = make_batch(config, train_ds, state.step)
            report = train_step(state, batch)
            if report.step % config.log_every == 0 or report.step == config.steps:
                logf.write(report.to_json() + "\n")
                logf.flush()
            if config.checkpoint_every > 0 and report.step % config.checkpoint_every == 0:
                _save_train_checkpoint(out / f"ckpt_{report.step}.pt", state)
            if callback is not None:
                callback(state, report)
    _save_train_checkpoint(out / "ckpt_final.pt", state)
    return state


@dataclass
class InferenceResult:
    maps: torch.Tensor  # (B, K, h, w)
    moments: PartMoments
    appearances: torch.Tensor  # (B, K, n)
    reconstruction: torch.Tensor  # (B, 3, H, W)


def infer(model, image):
    """Deterministic forward products of a frozen model on unwarped input."""
    model.eval()
    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    with torch.no_grad():
        grid = make_identity_grid(
            model.cfg.map_res, model.cfg.map_res, dtype=x.dtype, device=x.device
        )
        out = forward_pass(model, x, x, grid)
    res = InferenceResult(
        maps=out["maps_shape"],
        moments=out["moments_shape"],
        appearances=out["alpha"],
        reconstruction=out["recon"],
    )
    if squeeze:
        res = InferenceResult(
            maps=res.maps.squeeze(0),
            moments=PartMoments(res.moments.mean.squeeze(0), res.moments.cov.squeeze(0)),
            appearances=res.appearances.squeeze(0),
            reconstruction=res.reconstruction.squeeze(0),
        )
    return res


def swap(model, shape_src, app_src, part_subset=None):
    """Synthesize with shape from one image and appearance from another.

    part_subset selects which parts take their appearance vector from
    app_src (None = all parts); the empty collection reproduces shape_src.
    """
    model.eval()
    k = model.cfg.num_parts
    if part_subset is None:
        part_subset = range(k)
    subset = sorted(set(int(i) for i in part_subset))
    if subset and (subset[0] < 0 or subset[-1] >= k):
        raise ValueError(f"part indices must lie in [0, {k - 1}], got {subset}")
    shape_res = infer(model, shape_src)
    app_res = infer(model, app_src)
    sq = shape_src.dim() == 3
    alpha = shape_res.appearances.clone()
    mom = shape_res.moments
    if sq:
        alpha = alpha.unsqueeze(0)
        mom = PartMoments(mom.mean.unsqueeze(0), mom.cov.unsqueeze(0))
    alpha_app = app_res.appearances
    if app_src.dim() == 3:
        alpha_app = alpha_app.unsqueeze(0)
    if subset:
        alpha[:, subset] = alpha_app[:, subset]
    with torch.no_grad():
        grid = make_identity_grid(
            model.cfg.map_res, model.cfg.map_res, dtype=shape_src.dtype
        )
        approx = decoder_maps(mom, grid, model.cfg)
        f_x = project_appearance(alpha, approx)
        recon = model.decode(approx, f_x)
    return recon.squeeze(0) if sq else recon
