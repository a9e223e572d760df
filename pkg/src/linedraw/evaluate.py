"""Automated metrics for what a drawing conveys: decoded-depth MSE, two-point
ordinal depth agreement and photo/drawing embedding similarity."""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .backbones import make_embedder, make_extractor
from .data import list_images, preprocess, to_image
from .depth_pretrain import load_manifest, read_depth_png
from .networks import DepthDecoderConfig, build_depth_decoder, check_decoder_structure, depth_from_drawing

REPORT_SCHEMA = 1
PROTOCOL_NOTE = (
    "semantic_cosine is the cosine similarity between image embeddings of each photo and "
    "its drawing; it replaces caption-based similarity from human annotators. "
    "ordinal_agreement is judged against cached pseudo depth, not by people."
)


@dataclass
class EvalConfig:
    photos_dir: str
    depth_cache: str
    image_size: int = 256
    n_pairs: int = 2000
    gap: float = 0.1
    seed: int = 0
    max_images: int | None = None


@dataclass
class PhotoSet:
    images: torch.Tensor
    depths: list[np.ndarray]
    names: list[str]


def load_photo_set(photos_dir, depth_cache, image_size: int, max_images: int | None = None) -> PhotoSet:
    manifest = load_manifest(depth_cache)
    paths = list_images(photos_dir)[:max_images]
    missing = [p.name for p in paths if p.name not in manifest["entries"]]
    if missing:
        raise KeyError(f"depth cache {depth_cache} has no entries for {missing}")
    images = torch.stack([preprocess(p, image_size) for p in paths])
    depths = [read_depth_png(Path(depth_cache) / manifest["entries"][p.name]["depth"]) for p in paths]
    return PhotoSet(images, depths, [p.name for p in paths])


def _as_module(model):
    if isinstance(model, (str, os.PathLike)):
        from .trainer import load_generator

        return load_generator(model)
    return model


def load_checkpoint_decoder(weights: str | os.PathLike):
    manifest = ckpt.read_manifest(weights)
    decoder = build_depth_decoder(DepthDecoderConfig(**manifest.get("decoder", {})))
    check_decoder_structure(decoder)
    return ckpt.load_network(weights, "G_Geom", decoder).eval()


@torch.no_grad()
def predict_depths(model, photos: PhotoSet, extractor, decoder, batch_size: int = 8) -> list[np.ndarray]:
    """Decoded depth of each drawing, resized to its cached map's resolution."""
    model, decoder = _as_module(model).eval(), decoder.eval()
    preds = []
    for i in range(0, len(photos.images), batch_size):
        drawing = model(photos.images[i : i + batch_size])
        pred = depth_from_drawing(drawing, extractor, decoder)
        for j, p in enumerate(pred):
            target = photos.depths[i + j]
            p = F.interpolate(p[None], size=target.shape, mode="bilinear", align_corners=False)
            preds.append(p[0, 0].double().numpy())
    return preds


def per_image_mse(preds: list[np.ndarray], targets: list[np.ndarray]) -> list[float]:
    return [float(np.mean((p - t) ** 2)) for p, t in zip(preds, targets)]


def depth_mse(model, photos: PhotoSet, extractor, decoder) -> float:
    return float(np.mean(per_image_mse(predict_depths(model, photos, extractor, decoder), photos.depths)))


# --------------------------------------------------------------------------
# Ordinal agreement
# --------------------------------------------------------------------------


def sample_pairs(
    targets: list[np.ndarray], n_pairs: int, seed: int = 0, gap: float = 0.1, max_tries: int = 200
) -> tuple[np.ndarray, list[int]]:
    """Uniformly sampled point pairs whose reference depths differ by more than ``gap``.

    Returns an (n, 5) int array of (image, y1, x1, y2, x2) and the indices of
    images skipped because no pair on them can clear the gap.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    valid = [i for i, t in enumerate(targets) if float(t.max() - t.min()) > gap]
    skipped = [i for i in range(len(targets)) if i not in set(valid)]
    if not valid:
        return np.zeros((0, 5), dtype=np.int64), skipped
    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < n_pairs:
        i = int(valid[rng.integers(len(valid))])
        t = targets[i]
        h, w = t.shape
        for _ in range(max_tries):
            y1, y2 = rng.integers(h, size=2)
            x1, x2 = rng.integers(w, size=2)
            if abs(t[y1, x1] - t[y2, x2]) > gap:
                pairs.append((i, y1, x1, y2, x2))
                break
    return np.asarray(pairs, dtype=np.int64), skipped


def pair_agreement(preds: list[np.ndarray], targets: list[np.ndarray], pairs: np.ndarray) -> np.ndarray:
    """Per-pair score: 1 if the orderings match, 0 if reversed, 0.5 on a tie."""
    scores = np.empty(len(pairs))
    for k, (i, y1, x1, y2, x2) in enumerate(pairs):
        sp = np.sign(preds[i][y1, x1] - preds[i][y2, x2])
        st = np.sign(targets[i][y1, x1] - targets[i][y2, x2])
        scores[k] = 0.5 if sp == 0 or st == 0 else float(sp == st)
    return scores


def ordinal_agreement_maps(preds, targets, n_pairs: int = 2000, seed: int = 0, gap: float = 0.1) -> dict:
    pairs, skipped = sample_pairs(targets, n_pairs, seed, gap)
    scores = pair_agreement(preds, targets, pairs)
    return {
        "agreement": float(scores.mean()) if len(scores) else float("nan"),
        "n_pairs": int(len(pairs)),
        "skipped_images": skipped,
        "pairs": pairs,
        "scores": scores,
    }


def ordinal_depth_agreement(model, photos: PhotoSet, extractor, decoder, n_pairs: int = 2000, seed: int = 0, gap: float = 0.1) -> float:
    preds = predict_depths(model, photos, extractor, decoder)
    return ordinal_agreement_maps(preds, photos.depths, n_pairs, seed, gap)["agreement"]


# --------------------------------------------------------------------------
# Semantics
# --------------------------------------------------------------------------


@torch.no_grad()
def per_image_cosine(model, images: torch.Tensor, embedder, batch_size: int = 8) -> list[float]:
    model = _as_module(model).eval()
    out = []
    for i in range(0, len(images), batch_size):
        a = images[i : i + batch_size]
        e_photo = F.normalize(embedder(a), dim=-1)
        e_draw = F.normalize(embedder(model(a)), dim=-1)
        out += (e_photo * e_draw).sum(-1).double().tolist()
    return out


def semantic_similarity(model, photos: PhotoSet | torch.Tensor, embedder) -> float:
    images = photos.images if isinstance(photos, PhotoSet) else photos
    return float(np.mean(per_image_cosine(model, images, embedder)))


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------


def evaluate_checkpoint(weights, eval_cfg: EvalConfig, extractor, embedder, decoder=None) -> dict:
    from .trainer import load_generator

    generator = load_generator(weights)
    decoder = decoder if decoder is not None else load_checkpoint_decoder(weights)
    photos = load_photo_set(eval_cfg.photos_dir, eval_cfg.depth_cache, eval_cfg.image_size, eval_cfg.max_images)
    preds = predict_depths(generator, photos, extractor, decoder)
    mse = per_image_mse(preds, photos.depths)
    ordinal = ordinal_agreement_maps(preds, photos.depths, eval_cfg.n_pairs, eval_cfg.seed, eval_cfg.gap)
    cosine = per_image_cosine(generator, photos.images, embedder)
    # per-image ordinal scores: mean over that image's pairs (None if it received none)
    per_ord: list[float | None] = []
    for i in range(len(photos.names)):
        mask = ordinal["pairs"][:, 0] == i if len(ordinal["pairs"]) else np.zeros(0, bool)
        per_ord.append(float(ordinal["scores"][mask].mean()) if mask.any() else None)
    records = [
        {"image": n, "depth_mse": m, "ordinal_agreement": o, "ordinal_pairs": int((ordinal["pairs"][:, 0] == i).sum()) if len(ordinal["pairs"]) else 0, "semantic_cosine": c}
        for i, (n, m, o, c) in enumerate(zip(photos.names, mse, per_ord, cosine))
    ]
    manifest = ckpt.read_manifest(weights)
    return {
        "schema_version": REPORT_SCHEMA,
        "protocol": PROTOCOL_NOTE,
        "checkpoint": str(weights),
        "step": manifest.get("step"),
        "code_version": manifest.get("code_version"),
        "eval_config": asdict(eval_cfg),
        "depth_mse": float(np.mean(mse)),
        # pair-weighted mean over images == mean over all sampled pairs
        "ordinal_agreement": ordinal["agreement"],
        "ordinal_pairs": ordinal["n_pairs"],
        "ordinal_skipped_images": [photos.names[i] for i in ordinal["skipped_images"]],
        "semantic_cosine": float(np.mean(cosine)),
        "records": records,
    }


def _backbones_for(weights):
    cfg = ckpt.read_manifest(weights).get("config", {})
    seed = cfg.get("seed", 0)
    extractor = make_extractor(cfg.get("extractor", "reference"), seed, cfg.get("extractor_weights"))
    embedder = make_embedder(cfg.get("embedder", "reference"), seed, cfg.get("embedder_weights"))
    return extractor, embedder


def _plots(run_dir: Path, weights, photos: PhotoSet, out_dir: Path) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .trainer import load_generator, read_loss_log

    written = []
    log = read_loss_log(run_dir)
    if log:
        fig, axes = plt.subplots(1, 4, figsize=(14, 3))
        steps = [r["step"] for r in log]
        for ax, key in zip(axes, ("geom", "clip", "cycle", "gan_g")):
            ax.plot(steps, [r[key] for r in log])
            ax.set_title(key)
            ax.set_xlabel("step")
        fig.tight_layout()
        fig.savefig(out_dir / "loss_curves.png", dpi=80)
        plt.close(fig)
        written.append("loss_curves.png")
    generator = load_generator(weights)
    n = min(6, len(photos.images))
    with torch.no_grad():
        drawings = generator(photos.images[:n])
    fig, axes = plt.subplots(2, n, figsize=(2 * n, 4), squeeze=False)
    for j in range(n):
        axes[0, j].imshow(to_image(photos.images[j]))
        axes[1, j].imshow(to_image(drawings[j], grayscale=True), cmap="gray", vmin=0, vmax=255)
        axes[0, j].axis("off")
        axes[1, j].axis("off")
    fig.tight_layout()
    fig.savefig(out_dir / "samples.png", dpi=80)
    plt.close(fig)
    written.append("samples.png")
    return written


def report(run_dir: str | os.PathLike, eval_cfg: EvalConfig, out: str | os.PathLike | None = None, backbones=None, plots: bool = True) -> Path:
    """Evaluate ``run_dir/final`` and write ``report.json`` (plus plots) next to it."""
    run_dir = Path(run_dir)
    weights = run_dir / "final"
    if not (weights / "manifest.json").exists():
        raise FileNotFoundError(f"{run_dir} has no final checkpoint")
    extractor, embedder = backbones[:2] if backbones is not None else _backbones_for(weights)
    rep = evaluate_checkpoint(weights, eval_cfg, extractor, embedder)
    rep["run_dir"] = str(run_dir)
    rep["created"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    out = Path(out) if out is not None else run_dir / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    if plots:
        photos = load_photo_set(eval_cfg.photos_dir, eval_cfg.depth_cache, eval_cfg.image_size, eval_cfg.max_images)
        rep["plots"] = _plots(run_dir, weights, photos, out.parent)
    out.write_text(json.dumps(rep, indent=1, sort_keys=True))
    return out
