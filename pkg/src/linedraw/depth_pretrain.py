"""Pseudo-ground-truth depth cache and pretraining of the feature-to-depth decoder."""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .backbones import DepthOracle, image_key, normalize_depth
from .data import list_images, open_rgb, preprocess
from .networks import DepthDecoder, DepthDecoderConfig, build_depth_decoder

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
DEPTH_SUFFIX = ".depth.png"
DEPTH_LEVELS = 65535


# --------------------------------------------------------------------------
# 16-bit depth PNGs
# --------------------------------------------------------------------------


def write_depth_png(path: str | os.PathLike, depth: np.ndarray) -> None:
    """Store a [-1, 1] map as 16-bit grayscale; written atomically."""
    q = np.round((np.clip(depth, -1, 1) + 1) / 2 * DEPTH_LEVELS).astype(np.uint16)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        Image.fromarray(q).save(tmp, format="PNG")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def read_depth_png(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        q = np.asarray(im).astype(np.float64)
    return q / DEPTH_LEVELS * 2 - 1


def _write_json(path: Path, obj) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
    os.replace(tmp, path)


def load_manifest(cache_dir: str | os.PathLike) -> dict:
    path = Path(cache_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no depth cache manifest at {path}")
    return json.loads(path.read_text())


# --------------------------------------------------------------------------
# Cache builder
# --------------------------------------------------------------------------


def cache_pseudo_depth(
    photo_dir: str | os.PathLike,
    oracle: DepthOracle,
    cache_dir: str | os.PathLike,
    workers: int = 1,
) -> dict:
    """Run the depth oracle once per photo and store normalised 16-bit maps.

    Existing entries whose source pixels, oracle and PNG all still match are
    skipped. The returned manifest carries ``stats`` = {computed, skipped,
    failed} for this invocation.
    """
    photos = list_images(photo_dir)
    if not photos:
        raise ValueError(f"no images found in {photo_dir}")
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    try:
        manifest = load_manifest(cache)
    except FileNotFoundError:
        manifest = {"oracle_id": oracle.oracle_id, "entries": {}, "failed": {}}
    manifest.setdefault("failed", {})
    if manifest.get("oracle_id") != oracle.oracle_id:
        log.warning("depth cache oracle changed (%s -> %s); rebuilding", manifest.get("oracle_id"), oracle.oracle_id)
        manifest = {"oracle_id": oracle.oracle_id, "entries": {}, "failed": {}}

    def work(path: Path):
        try:
            rgb = open_rgb(path)
        except Exception as e:
            return path, "failed", str(e)
        key = image_key(rgb)
        old = manifest["entries"].get(path.name)
        if old and old.get("key") == key and (cache / old["depth"]).exists():
            return path, "skipped", old
        raw = np.asarray(oracle.raw_depth(rgb), dtype=np.float64)
        name = path.name + DEPTH_SUFFIX
        write_depth_png(cache / name, normalize_depth(raw))
        entry = {
            "source": str(path),
            "depth": name,
            "min": float(raw.min()),
            "max": float(raw.max()),
            "oracle_id": oracle.oracle_id,
            "key": key,
            "shape": list(raw.shape),
        }
        return path, "computed", entry

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, photos))
    else:
        results = [work(p) for p in photos]

    stats = {"computed": 0, "skipped": 0, "failed": 0}
    for path, status, payload in results:
        stats[status] += 1
        if status == "failed":
            log.warning("skipping unreadable photo %s: %s", path, payload)
            manifest["failed"][path.name] = payload
        else:
            manifest["entries"][path.name] = payload
            manifest["failed"].pop(path.name, None)
    _write_json(cache / MANIFEST, manifest)
    return {**manifest, "stats": stats}


# --------------------------------------------------------------------------
# Decoder pretraining
# --------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    epochs: int = 10
    learning_rate: float = 2e-4
    batch_size: int = 6
    betas: tuple[float, float] = (0.5, 0.999)
    image_size: int = 256
    seed: int = 0
    max_steps: int | None = None  # overrides epochs when set
    decoder_padding: str = "exact"

    def validate(self) -> None:
        if self.epochs < 1 and self.max_steps is None:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def load_photo_depth(photo_dir, cache_dir, image_size: int) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    """All photos and their cached maps as (N x 3 x S x S, N x 1 x H x W, names)."""
    manifest = load_manifest(cache_dir)
    photos = list_images(photo_dir)
    missing = [p.name for p in photos if p.name not in manifest["entries"]]
    if missing:
        raise ValueError(f"depth cache incomplete; missing {len(missing)} photos: {missing}")
    images, depths = [], []
    for p in photos:
        images.append(preprocess(p, image_size))
        depths.append(torch.from_numpy(read_depth_png(Path(cache_dir) / manifest["entries"][p.name]["depth"])).float())
    shapes = {tuple(d.shape) for d in depths}
    if len(shapes) > 1:
        # mixed native sizes: bring all targets to the training resolution
        depths = [
            F.interpolate(d[None, None], size=(image_size, image_size), mode="bilinear", align_corners=False)[0, 0]
            for d in depths
        ]
    return torch.stack(images), torch.stack(depths)[:, None], [p.name for p in photos]


def decoder_l1(decoder, extractor, images, depths, batch_size: int = 16) -> float:
    """Mean L1 of the decoded depth (3 channels, resized to target) against the targets."""
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            pred = decoder(extractor(images[i : i + batch_size]))
            tgt = depths[i : i + batch_size]
            pred = F.interpolate(pred, size=tgt.shape[-2:], mode="bilinear", align_corners=False)
            total += (pred - tgt.expand_as(pred)).abs().sum().item()
            count += pred.numel()
    return total / count


def pretrain_depth_decoder(
    images: torch.Tensor,
    depths: torch.Tensor,
    extractor,
    cfg: PretrainConfig,
    decoder: DepthDecoder | None = None,
) -> tuple[DepthDecoder, list[float]]:
    """Fit the decoder to map frozen photo features to cached pseudo depth.

    Returns the decoder (eval mode) and the per-step training L1.
    """
    cfg.validate()
    if decoder is None:
        decoder = build_depth_decoder(DepthDecoderConfig(padding=cfg.decoder_padding, seed=cfg.seed))
    n = len(images)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * steps_per_epoch
    opt = torch.optim.Adam(decoder.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    decoder.train()
    losses: list[float] = []
    order = None
    for step in range(total):
        epoch, i = divmod(step, steps_per_epoch)
        if i == 0:
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        idx = torch.from_numpy(order[i * cfg.batch_size : (i + 1) * cfg.batch_size])
        x, tgt = images[idx], depths[idx]
        with torch.no_grad():
            feats = extractor(x)
        pred = decoder(feats)
        # supervise at the target's resolution; never resample the pseudo depth
        pred = F.interpolate(pred, size=tgt.shape[-2:], mode="bilinear", align_corners=False)
        loss = (pred - tgt.expand_as(pred)).abs().mean()
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite pretraining loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    decoder.eval()
    return decoder, losses


def save_decoder(decoder: DepthDecoder, out_dir: str | os.PathLike, meta: dict | None = None) -> Path:
    from .checkpoint import code_version

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(decoder.state_dict(), out / "G_Geom.pt")
    manifest = {"config": decoder.cfg.to_dict(), "code_version": code_version(), **(meta or {})}
    _write_json(out / "manifest.json", manifest)
    return out


def load_decoder(path: str | os.PathLike) -> DepthDecoder:
    from .networks import check_decoder_structure

    path = Path(path)
    weights = path / "G_Geom.pt" if path.is_dir() else path
    manifest_path = weights.parent / "manifest.json"
    cfg = DepthDecoderConfig()
    if manifest_path.exists():
        meta = json.loads(manifest_path.read_text())
        cfg = DepthDecoderConfig(**meta.get("config", {})) if "config" in meta and "padding" in meta["config"] else cfg
    decoder = build_depth_decoder(cfg)
    check_decoder_structure(decoder)
    decoder.load_state_dict(torch.load(weights, map_location="cpu"))
    return decoder.eval()


def pretrain_from_dirs(photo_dir, cache_dir, extractor, cfg: PretrainConfig, out_dir=None):
    images, depths, names = load_photo_depth(photo_dir, cache_dir, cfg.image_size)
    decoder, losses = pretrain_depth_decoder(images, depths, extractor, cfg)
    if out_dir is not None:
        save_decoder(decoder, out_dir, {"pretrain": asdict(cfg), "n_photos": len(names), "losses": losses})
    return decoder, losses
