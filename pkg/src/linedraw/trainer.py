"""Joint training loop: two generators, two patch discriminators and the
finetuned depth decoder, driven by the four-term objective."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .backbones import make_depth_oracle, make_embedder, make_extractor
from .data import Batch, UnpairedDataset, UnpairedLoader, list_images, open_rgb, to_image
from .depth_pretrain import cache_pseudo_depth, load_decoder
from .losses import (
    LossBundle,
    LossWeights,
    NonFiniteLoss,
    appearance_loss,
    geometry_loss,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    semantic_loss,
    total_objective,
)
from .networks import (
    DepthDecoderConfig,
    DiscriminatorConfig,
    GeneratorConfig,
    build_depth_decoder,
    build_discriminator,
    build_generator,
    check_decoder_structure,
)

log = logging.getLogger(__name__)

DEVICE_ENV = "LINEDRAW_DEVICE"
LOG_FIELDS = ("step", "gan_g", "gan_d_A", "gan_d_B", "geom", "clip", "cycle", "total", "hf_energy")


def device_from_env() -> torch.device:
    return torch.device(os.environ.get(DEVICE_ENV, "cpu"))


@dataclass
class TrainConfig:
    photos_dir: str | None = None
    drawings_dir: str | None = None
    run_dir: str = "runs/default"
    depth_cache: str | None = None
    fixture_dir: str | None = None
    pretrained_geom: str | None = None

    lambda_clip: float = 10.0
    lambda_geom: float = 10.0
    lambda_gan: float = 1.0
    lambda_cycle: float = 0.1

    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 6
    epochs: int = 30
    max_steps: int | None = None
    lr_decay: bool = False
    update_order: str = "generators_first"
    seed: int = 0
    checkpoint_every: int = 1000

    image_size: int = 256
    flip: bool = False
    ngf: int = 64
    ndf: int = 64
    n_blocks: int = 3
    generator_arch: str = "resnet"
    decoder_padding: str = "exact"
    finetune_geom: bool = True

    extractor: str = "reference"
    embedder: str = "reference"
    depth_oracle: str = "cache"
    extractor_weights: str | None = None
    embedder_weights: str | None = None
    depth_model: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.update_order not in ("generators_first", "discriminators_first"):
            raise ValueError("update_order must be generators_first or discriminators_first")
        self.weights  # validates the lambdas

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_clip, self.lambda_geom, self.lambda_gan, self.lambda_cycle)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(residual_blocks=self.n_blocks, base_channels=self.ngf, arch=self.generator_arch)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "TrainConfig":
        import yaml

        text = Path(path).read_text()
        d = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        if not isinstance(d, dict) or any(isinstance(v, (dict, list)) for v in d.values()):
            raise ValueError("config must be a flat key-value document")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    cfg: TrainConfig
    G_A: torch.nn.Module
    G_B: torch.nn.Module
    D_A: torch.nn.Module
    D_B: torch.nn.Module
    G_Geom: torch.nn.Module
    extractor: torch.nn.Module
    embedder: torch.nn.Module
    opt_G: torch.optim.Optimizer
    opt_D_A: torch.optim.Optimizer
    opt_D_B: torch.optim.Optimizer
    step: int = 0
    last_checkpoint: str | None = None
    schedulers: list = field(default_factory=list)

    @property
    def networks(self) -> dict[str, torch.nn.Module]:
        return {"G_A": self.G_A, "G_B": self.G_B, "D_A": self.D_A, "D_B": self.D_B, "G_Geom": self.G_Geom}

    @property
    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {"G": self.opt_G, "D_A": self.opt_D_A, "D_B": self.opt_D_B}


def build_state(
    cfg: TrainConfig,
    extractor: torch.nn.Module,
    embedder: torch.nn.Module,
    decoder: torch.nn.Module | None = None,
    steps_per_epoch: int = 1,
) -> TrainState:
    torch.manual_seed(cfg.seed)
    gcfg = cfg.generator_config()
    G_A = build_generator(GeneratorConfig(**{**asdict(gcfg), "seed": cfg.seed}))
    G_B = build_generator(GeneratorConfig(**{**asdict(gcfg), "seed": cfg.seed + 1}))
    D_A = build_discriminator(DiscriminatorConfig(base_channels=cfg.ndf, seed=cfg.seed + 2))
    D_B = build_discriminator(DiscriminatorConfig(base_channels=cfg.ndf, seed=cfg.seed + 3))
    if decoder is None:
        decoder = build_depth_decoder(DepthDecoderConfig(padding=cfg.decoder_padding, seed=cfg.seed + 4))
    check_decoder_structure(decoder)
    betas = (cfg.beta1, cfg.beta2)
    g_params = list(G_A.parameters()) + list(G_B.parameters())
    if cfg.finetune_geom:
        g_params += list(decoder.parameters())
    else:
        for p in decoder.parameters():
            p.requires_grad_(False)
    opt_G = torch.optim.Adam(g_params, lr=cfg.lr, betas=betas)
    opt_D_A = torch.optim.Adam(D_A.parameters(), lr=cfg.lr, betas=betas)
    opt_D_B = torch.optim.Adam(D_B.parameters(), lr=cfg.lr, betas=betas)
    state = TrainState(cfg, G_A, G_B, D_A, D_B, decoder, extractor, embedder, opt_G, opt_D_A, opt_D_B)
    if cfg.lr_decay:
        total = total_steps(cfg, steps_per_epoch)
        half = total // 2

        def factor(step: int) -> float:
            return 1.0 if step < half else max(0.0, 1.0 - (step - half) / max(1, total - half))

        state.schedulers = [torch.optim.lr_scheduler.LambdaLR(o, factor) for o in state.optimizers.values()]
    backbone_ids = {id(p) for m in (extractor, embedder) for p in m.parameters()}
    for o in state.optimizers.values():
        for group in o.param_groups:
            if any(id(p) in backbone_ids for p in group["params"]):
                raise AssertionError("backbone parameters must never be optimised")
    return state


def total_steps(cfg: TrainConfig, steps_per_epoch: int) -> int:
    if cfg.max_steps is not None:
        return cfg.max_steps
    return cfg.epochs * steps_per_epoch


def _set_requires_grad(nets, flag: bool) -> None:
    for net in nets:
        for p in net.parameters():
            p.requires_grad_(flag)


def high_frequency_energy(images: torch.Tensor) -> float:
    """Mean squared Laplacian response of the grey image; tracks hidden high-frequency signals."""
    grey = images.detach().mean(dim=1, keepdim=True)
    k = torch.tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]], dtype=grey.dtype).view(1, 1, 3, 3)
    return float((F.conv2d(grey, k) ** 2).mean())


def generator_losses(state: TrainState, a, b, a_depth) -> tuple[LossBundle, dict]:
    """Forward pass of the generator objective; returns tensors with graphs attached."""
    cfg = state.cfg
    fake_b = state.G_A(a)
    rec_a = state.G_B(fake_b)
    fake_a = state.G_B(b)
    rec_b = state.G_A(fake_a)

    gan_g = lsgan_generator_loss(state.D_B(fake_b)) + lsgan_generator_loss(state.D_A(fake_a))
    cycle = appearance_loss(rec_a, a, rec_b, b)

    geom_active = cfg.lambda_geom > 0 and cfg.finetune_geom
    state.G_Geom.train(geom_active)
    with torch.set_grad_enabled(torch.is_grad_enabled() and cfg.lambda_geom > 0):
        pred = state.G_Geom(state.extractor(fake_b))
        if a_depth is None:
            raise ValueError("training batches need cached pseudo depth for the photos")
        pred = F.interpolate(pred, size=a_depth.shape[-2:], mode="bilinear", align_corners=False)
        geom = geometry_loss(pred, a_depth)
    with torch.no_grad():
        e_photo = state.embedder(a)
    with torch.set_grad_enabled(torch.is_grad_enabled() and cfg.lambda_clip > 0):
        clip = semantic_loss(state.embedder(fake_b), e_photo)

    bundle = LossBundle(gan_g=gan_g, geom=geom, clip=clip, cycle=cycle)
    bundle.total = total_objective(bundle, cfg.weights)
    return bundle, {"fake_b": fake_b, "fake_a": fake_a}


def discriminator_losses(state: TrainState, a, b, fake_a, fake_b) -> tuple[torch.Tensor, torch.Tensor]:
    d_a = lsgan_discriminator_loss(state.D_A(a), state.D_A(fake_a.detach()))
    d_b = lsgan_discriminator_loss(state.D_B(b), state.D_B(fake_b.detach()))
    return d_a, d_b


def _guard(value: torch.Tensor, name: str, state: TrainState) -> None:
    if not torch.isfinite(value):
        raise NonFiniteLoss(
            f"{name} became non-finite at step {state.step + 1}; last good checkpoint: {state.last_checkpoint}"
        )


def training_step(state: TrainState, a: torch.Tensor, b: torch.Tensor, a_depth: torch.Tensor) -> LossBundle:
    """One generator update and one update of each discriminator; mutates ``state``."""
    try:
        return _training_step(state, a, b, a_depth)
    except NonFiniteLoss as e:
        if "last good checkpoint" in str(e):
            raise
        raise NonFiniteLoss(
            f"{e} at step {state.step + 1}; last good checkpoint: {state.last_checkpoint}"
        ) from e


def _training_step(state: TrainState, a, b, a_depth) -> LossBundle:
    discs = (state.D_A, state.D_B)
    for net in (state.G_A, state.G_B, *discs):
        net.train()

    def d_step(fake_a, fake_b):
        _set_requires_grad(discs, True)
        d_a, d_b = discriminator_losses(state, a, b, fake_a, fake_b)
        _guard(d_a, "gan_d_A", state)
        _guard(d_b, "gan_d_B", state)
        state.opt_D_A.zero_grad(set_to_none=True)
        state.opt_D_B.zero_grad(set_to_none=True)
        (d_a + d_b).backward()
        state.opt_D_A.step()
        state.opt_D_B.step()
        return d_a, d_b

    if state.cfg.update_order == "discriminators_first":
        with torch.no_grad():
            early_fake_a, early_fake_b = state.G_B(b), state.G_A(a)
        d_a, d_b = d_step(early_fake_a, early_fake_b)

    _set_requires_grad(discs, False)
    bundle, fakes = generator_losses(state, a, b, a_depth)
    for name in ("gan_g", "geom", "clip", "cycle", "total"):
        _guard(getattr(bundle, name), name, state)
    state.opt_G.zero_grad(set_to_none=True)
    bundle.total.backward()
    state.opt_G.step()

    if state.cfg.update_order == "generators_first":
        d_a, d_b = d_step(fakes["fake_a"], fakes["fake_b"])
    _set_requires_grad(discs, True)

    for s in state.schedulers:
        s.step()
    state.step += 1
    bundle.gan_d_A, bundle.gan_d_B = d_a, d_b
    out = LossBundle(**bundle.as_floats())
    out.hf_energy = high_frequency_energy(fakes["fake_b"])
    return out


# --------------------------------------------------------------------------
# Checkpoints and runs
# --------------------------------------------------------------------------


def save_state(state: TrainState, directory: Path) -> Path:
    manifest = {
        "config": state.cfg.to_dict(),
        "generator": asdict(state.cfg.generator_config()),
        "decoder": state.G_Geom.cfg.to_dict(),
        "step": state.step,
        "seed": state.cfg.seed,
    }
    extra = {
        "step": state.step,
        "torch_rng": torch.get_rng_state(),
        "schedulers": [s.state_dict() for s in state.schedulers],
    }
    ckpt.save_checkpoint(directory, state.networks, manifest, state.optimizers, extra)
    state.last_checkpoint = str(directory)
    return directory


def restore_state(state: TrainState, directory: str | os.PathLike) -> TrainState:
    for name, net in state.networks.items():
        ckpt.load_network(directory, name, net)
    check_decoder_structure(state.G_Geom)
    saved = ckpt.load_train_state(directory)
    for name, opt in state.optimizers.items():
        opt.load_state_dict(saved["optimizers"][name])
    for s, sd in zip(state.schedulers, saved.get("schedulers", [])):
        s.load_state_dict(sd)
    torch.set_rng_state(saved["torch_rng"])
    state.step = saved["step"]
    state.last_checkpoint = str(directory)
    return state


def checkpoint_dir(run_dir: Path, step: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"step_{step:07d}"


def read_loss_log(run_dir: str | os.PathLike) -> list[dict]:
    path = Path(run_dir) / "losses.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def prepare_depth_cache(cfg: TrainConfig, run_dir: Path) -> str:
    if cfg.depth_cache is not None and cfg.depth_oracle == "cache":
        return cfg.depth_cache
    cache = cfg.depth_cache or str(run_dir / "depth_cache")
    oracle = make_depth_oracle(cfg.depth_oracle, cache_dir=cache, fixture_dir=cfg.fixture_dir, model=cfg.depth_model)
    cache_pseudo_depth(cfg.photos_dir, oracle, cache)
    return cache


def train(
    cfg: TrainConfig,
    backbones: tuple | None = None,
    pretrained_geom: torch.nn.Module | str | None = None,
    resume: str | os.PathLike | None = None,
) -> Path:
    """Run (or resume) training and return the run directory.

    ``backbones`` is an optional (extractor, embedder) pair; otherwise they are
    built from the config keys. Everything that can fail on bad inputs is
    checked before step 0.
    """
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if cfg.photos_dir is None or cfg.drawings_dir is None:
        raise ValueError("photos_dir and drawings_dir are required")
    depth_cache = prepare_depth_cache(cfg, run_dir)
    loader = UnpairedLoader(
        UnpairedDataset(
            cfg.photos_dir, cfg.drawings_dir, image_size=cfg.image_size, shuffle_seed=cfg.seed,
            batch_size=cfg.batch_size, flip=cfg.flip, depth_cache=depth_cache,
        )
    )
    if backbones is None:
        extractor = make_extractor(cfg.extractor, cfg.seed, cfg.extractor_weights)
        embedder = make_embedder(cfg.embedder, cfg.seed, cfg.embedder_weights)
    else:
        extractor, embedder = backbones[:2]
    device = device_from_env()

    pretrained_geom = pretrained_geom if pretrained_geom is not None else cfg.pretrained_geom
    if isinstance(pretrained_geom, (str, os.PathLike)):
        decoder = load_decoder(pretrained_geom)
    elif pretrained_geom is not None:
        decoder = build_depth_decoder(pretrained_geom.cfg)
        decoder.load_state_dict(pretrained_geom.state_dict())
    else:
        log.warning("no pretrained depth decoder given; starting G_Geom from random init")
        decoder = None

    state = build_state(cfg, extractor, embedder, decoder, loader.epoch_length)
    for net in (*state.networks.values(), extractor, embedder):
        net.to(device)
    # dry run of the backbones on one batch so shape errors surface before step 0
    probe = loader.batch_at(0)
    with torch.no_grad():
        extractor(probe.a[:1].to(device))
        embedder(probe.a[:1].to(device))

    log_path = run_dir / "losses.jsonl"
    if resume is not None:
        restore_state(state, resume)
        kept = [r for r in read_loss_log(run_dir) if r["step"] <= state.step]
        log_path.write_text("".join(json.dumps(r) + "\n" for r in kept))
    else:
        (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
        log_path.write_text("")
        save_state(state, checkpoint_dir(run_dir, 0))

    n_steps = total_steps(cfg, loader.epoch_length)
    with open(log_path, "a") as fh:
        while state.step < n_steps:
            batch: Batch = loader.batch_at(state.step)
            bundle = training_step(state, batch.a.to(device), batch.b.to(device), batch.a_depth.to(device))
            record = {"step": state.step, **bundle.as_floats(), "hf_energy": bundle.hf_energy}
            fh.write(json.dumps(record) + "\n")
            fh.flush()
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_state(state, checkpoint_dir(run_dir, state.step))
    if n_steps == 0:
        # test mode: the run directory holds the init checkpoint only
        return run_dir
    final = save_state(state, run_dir / "final")
    log.info("finished %d steps; final weights in %s", state.step, final)
    return run_dir


# --------------------------------------------------------------------------
# Inference
# --------------------------------------------------------------------------


def load_generator(weights: str | os.PathLike, name: str = "G_A") -> torch.nn.Module:
    manifest = ckpt.read_manifest(weights)
    gcfg = manifest.get("generator")
    if gcfg is None:
        raise ckpt.InvalidCheckpoint(f"{weights} manifest has no generator config")
    net = build_generator(GeneratorConfig(**gcfg))
    return ckpt.load_network(weights, name, net).eval()


def snap4(n: int) -> int:
    return max(4, n - n % 4)


@torch.no_grad()
def draw_image(generator: torch.nn.Module, rgb: np.ndarray) -> "Image.Image":
    h, w = snap4(rgb.shape[0]), snap4(rgb.shape[1])
    x = torch.from_numpy(np.array(rgb[:h, :w])).permute(2, 0, 1).float() / 127.5 - 1
    y = generator(x[None])[0]
    return to_image(y, grayscale=True)


def draw(weights: str | os.PathLike, image: str | os.PathLike, out: str | os.PathLike) -> list[Path]:
    """Draw one image or every image in a directory; ``out`` is a directory or a .png path."""
    generator = load_generator(weights)
    src = Path(image)
    inputs = list_images(src) if src.is_dir() else [src]
    out = Path(out)
    written = []
    for path in inputs:
        target = out if (out.suffix.lower() == ".png" and not src.is_dir()) else out / (path.stem + ".png")
        target.parent.mkdir(parents=True, exist_ok=True)
        draw_image(generator, open_rgb(path)).save(target)
        written.append(target)
    return written
