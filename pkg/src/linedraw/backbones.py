"""Frozen backbone adapters: spatial feature extractor, semantic embedder and
pseudo-ground-truth depth oracle, plus seeded stubs for offline use.

Every adapter takes images in the canonical [-1, 1] range and owns the
differentiable renormalisation to its native input statistics.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .networks import FEATURE_CHANNELS

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

RANGE_EPS = 1e-4
DEGENERATE_RANGE = 1e-8


class BackboneUnavailable(RuntimeError):
    """Raised when a reference model cannot be loaded (no weights on disk, no network)."""


class DepthCacheMiss(KeyError):
    pass


@dataclass(frozen=True)
class Preprocess:
    """Affine map from [-1, 1] to a backbone's input statistics, then an optional resize."""

    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    size: int | None = None

    def _stats(self, x):
        mean = torch.tensor(self.mean, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
        std = torch.tensor(self.std, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
        return mean, std

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        mean, std = self._stats(x)
        y = ((x + 1) / 2 - mean) / std
        if self.size is not None and tuple(y.shape[-2:]) != (self.size, self.size):
            y = F.interpolate(y, size=(self.size, self.size), mode="bilinear", align_corners=False)
        return y

    def invert(self, y: torch.Tensor, size: tuple[int, int] | None = None) -> torch.Tensor:
        if size is not None and tuple(y.shape[-2:]) != tuple(size):
            y = F.interpolate(y, size=size, mode="bilinear", align_corners=False)
        mean, std = self._stats(y)
        return (y * std + mean) * 2 - 1


def check_images(images: torch.Tensor, min_side: int = 1, name: str = "images") -> None:
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"{name} must be B x 3 x H x W, got {tuple(images.shape)}")
    if min(images.shape[-2:]) < min_side:
        raise ValueError(
            f"{name} side {min(images.shape[-2:])} is below the minimum {min_side} for this backbone"
        )
    lo, hi = float(images.detach().min()), float(images.detach().max())
    if lo < -1 - RANGE_EPS or hi > 1 + RANGE_EPS:
        raise ValueError(f"{name} must be in the canonical [-1, 1] range, got [{lo:.3f}, {hi:.3f}]")


class FrozenModule(nn.Module):
    """Base for adapters whose weights never change and which stay in eval mode."""

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)
        return self

    def train(self, mode: bool = True):
        return super().train(False)


# --------------------------------------------------------------------------
# Feature extractors
# --------------------------------------------------------------------------


class InceptionMixed6b(FrozenModule):
    """Inception v3 truncated after the Mixed_6b block (768 channels)."""

    channels_out = FEATURE_CHANNELS
    spatial_stride = 18
    min_side = 128

    def __init__(self, weights: str | os.PathLike | None = "imagenet"):
        super().__init__()
        from torchvision.models import inception_v3

        net = inception_v3(weights=None, aux_logits=False, init_weights=False)
        if weights == "imagenet":
            from torchvision.models import Inception_V3_Weights

            try:
                state = Inception_V3_Weights.IMAGENET1K_V1.get_state_dict(progress=False)
            except Exception as e:  # network or cache failure
                raise BackboneUnavailable(
                    "could not fetch ImageNet Inception v3 weights; download "
                    "inception_v3_google-0cc3c7bd.pth and pass its path as `extractor_weights`, "
                    "or select extractor=stub"
                ) from e
            state = {k: v for k, v in state.items() if not k.startswith("AuxLogits")}
            net.load_state_dict(state, strict=False)
        elif weights is not None:
            path = Path(weights)
            if not path.exists():
                raise BackboneUnavailable(f"extractor weights not found at {path}")
            state = torch.load(path, map_location="cpu")
            state = {k: v for k, v in state.items() if not k.startswith("AuxLogits")}
            net.load_state_dict(state, strict=False)
        self.preprocess_spec = Preprocess(IMAGENET_MEAN, IMAGENET_STD)
        self.body = nn.Sequential(
            net.Conv2d_1a_3x3, net.Conv2d_2a_3x3, net.Conv2d_2b_3x3, net.maxpool1,
            net.Conv2d_3b_1x1, net.Conv2d_4a_3x3, net.maxpool2,
            net.Mixed_5b, net.Mixed_5c, net.Mixed_5d, net.Mixed_6a, net.Mixed_6b,
        )
        self.freeze()

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        check_images(images, self.min_side)
        return self.body(self.preprocess_spec(images))


class StubExtractor(FrozenModule):
    """Fixed random two-layer conv extractor: 768 channels at stride 16."""

    channels_out = FEATURE_CHANNELS
    spatial_stride = 16
    min_side = 8

    def __init__(self, seed: int = 0, hidden: int = 48):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.preprocess_spec = Preprocess((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
        self.conv1 = nn.Conv2d(3, hidden, 4, stride=4)
        self.conv2 = nn.Conv2d(hidden, FEATURE_CHANNELS, 4, stride=4, padding=1)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (1.5 / fan_in) ** 0.5)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=g) * 0.1)
        self.freeze()

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        check_images(images, self.min_side)
        h = torch.tanh(self.conv1(self.preprocess_spec(images)))
        return torch.tanh(self.conv2(h))


# --------------------------------------------------------------------------
# Semantic embedders
# --------------------------------------------------------------------------


class CLIPEmbedder(FrozenModule):
    """CLIP image tower (ViT-B/32 by default) returning unit-norm projections."""

    min_side = 1

    def __init__(self, model: str | os.PathLike | None = "openai/clip-vit-base-patch32"):
        super().__init__()
        from transformers import CLIPVisionConfig, CLIPVisionModelWithProjection

        if model is None:
            # Architecture only (random weights); for shape checks.
            cfg = CLIPVisionConfig(
                hidden_size=768, intermediate_size=3072, num_hidden_layers=12,
                num_attention_heads=12, image_size=224, patch_size=32, projection_dim=512,
            )
            self.model = CLIPVisionModelWithProjection(cfg)
        else:
            try:
                self.model = CLIPVisionModelWithProjection.from_pretrained(str(model))
            except Exception as e:
                raise BackboneUnavailable(
                    f"could not load CLIP vision weights from {model!r}; point `embedder_weights` "
                    "at a local copy of openai/clip-vit-base-patch32 or select embedder=stub"
                ) from e
        self.dim = self.model.config.projection_dim
        self.preprocess_spec = Preprocess(CLIP_MEAN, CLIP_STD, size=self.model.config.image_size)
        self.freeze()

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        check_images(images, self.min_side)
        out = self.model(pixel_values=self.preprocess_spec(images))
        return F.normalize(out.image_embeds, dim=-1)


class StubEmbedder(FrozenModule):
    """Random projection of the image's coarse luminance layout, L2-normalised.

    The grey image is average-pooled on a few coarse grids and each grid is
    mean-centred and contrast-normalised, so a photo and a line drawing of the
    same scene land closer together than unrelated scenes. Colour is ignored,
    which keeps the optimum reachable for a grayscale drawing.

    ``dim`` defaults to 16 rather than the reference 512: the semantic loss is
    a per-element mean, so a short embedding keeps its gradient within an
    order of magnitude of the geometry term on desk-scale runs.
    """

    min_side = 1

    def __init__(self, seed: int = 0, dim: int = 16, grids: tuple[int, ...] = (16, 8, 4)):
        super().__init__()
        g = torch.Generator().manual_seed(seed + 1)
        self.dim = dim
        self.grids = grids
        self.preprocess_spec = Preprocess((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
        self.register_buffer("grey", torch.tensor([0.299, 0.587, 0.114]).view(1, 3, 1, 1))
        n_in = sum(k * k for k in grids)
        self.proj = nn.Linear(n_in, dim, bias=False)
        with torch.no_grad():
            self.proj.weight.copy_(torch.randn(self.proj.weight.shape, generator=g) / n_in**0.5)
        # small fixed offset so flat images still embed to a unit vector
        offset = torch.randn(dim, generator=g)
        self.register_buffer("offset", 0.05 * offset / offset.norm())
        self.freeze()

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        check_images(images, self.min_side)
        x = self.preprocess_spec(images)
        grey = (x * self.grey.to(x.dtype)).sum(1, keepdim=True)
        parts = []
        for k in self.grids:
            f = F.adaptive_avg_pool2d(grey, k).flatten(1)
            f = f - f.mean(1, keepdim=True)
            parts.append(f / torch.sqrt((f**2).sum(1, keepdim=True) + 1e-6))
        return F.normalize(self.proj(torch.cat(parts, 1)) + self.offset.to(x.dtype), dim=-1)


# --------------------------------------------------------------------------
# Depth oracles
# --------------------------------------------------------------------------


def normalize_depth(raw: np.ndarray) -> np.ndarray:
    """Per-image min-max to [-1, 1]; flat maps collapse to -1."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo < DEGENERATE_RANGE:
        return np.full_like(raw, -1.0)
    return (raw - lo) / (hi - lo) * 2.0 - 1.0


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """B x 3 x H x W canonical tensor -> B x H x W x 3 uint8, exact for PNG-decoded inputs."""
    x = ((images.detach().double().cpu().clamp(-1, 1) + 1) * 127.5).round()
    return x.permute(0, 2, 3, 1).numpy().astype(np.uint8)


def image_key(rgb: np.ndarray) -> str:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h = hashlib.sha1(rgb.tobytes())
    h.update(str(rgb.shape).encode())
    return h.hexdigest()


class DepthOracle:
    """Pseudo-ground-truth depth source. Larger raw values are farther away."""

    source = "abstract"
    oracle_id = "abstract"

    def raw_depth(self, rgb: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        check_images(images)
        maps = [normalize_depth(self.raw_depth(rgb)) for rgb in to_uint8(images)]
        return torch.from_numpy(np.stack(maps)[:, None]).to(images.dtype)


class AnalyticDepthOracle(DepthOracle):
    """Closed-form depth for synthetic fixture photos, looked up by pixel content.

    Images that were not registered raise ``DepthCacheMiss`` unless a
    ``fallback`` is configured. The fallback works on canonical tensors so the
    stub oracle stays differentiable.
    """

    source = "analytic-synthetic"
    oracle_id = "analytic"

    def __init__(self, fallback: Callable[[torch.Tensor], torch.Tensor] | None = None):
        self._table: dict[str, np.ndarray] = {}
        self.fallback = fallback

    def register(self, rgb: np.ndarray, depth: np.ndarray) -> None:
        self._table[image_key(rgb)] = np.asarray(depth, dtype=np.float64)

    def register_fixture(self, fixture_dir: str | os.PathLike) -> int:
        from .data import read_fixture

        n = 0
        for rgb, depth in read_fixture(fixture_dir):
            self.register(rgb, depth)
            n += 1
        return n

    def raw_depth(self, rgb: np.ndarray) -> np.ndarray:
        depth = self._table.get(image_key(rgb))
        if depth is not None:
            return depth
        if self.fallback is None:
            raise DepthCacheMiss("image is not a registered synthetic fixture photo")
        x = torch.from_numpy(np.asarray(rgb, dtype=np.float64)).permute(2, 0, 1)[None] / 127.5 - 1
        return self.fallback(x)[0].numpy()

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        check_images(images)
        out = []
        for rgb, img in zip(to_uint8(images), images):
            depth = self._table.get(image_key(rgb))
            if depth is not None:
                out.append(torch.from_numpy(normalize_depth(depth)).to(images.dtype)[None])
            elif self.fallback is None:
                raise DepthCacheMiss("image is not a registered synthetic fixture photo")
            else:
                out.append(normalize_depth_torch(self.fallback(img[None]))[0][None])
        return torch.stack(out)


def luminance_depth(images: torch.Tensor) -> torch.Tensor:
    """Darker is farther: B x 3 x H x W canonical -> B x H x W raw depth."""
    x01 = (images + 1) / 2
    return 1.0 - (0.299 * x01[:, 0] + 0.587 * x01[:, 1] + 0.114 * x01[:, 2])


def normalize_depth_torch(raw: torch.Tensor) -> torch.Tensor:
    """Differentiable per-image min-max to [-1, 1] over the trailing two dims."""
    flat = raw.flatten(-2)
    lo = flat.min(-1).values[..., None, None]
    hi = flat.max(-1).values[..., None, None]
    span = hi - lo
    flat_map = span < DEGENERATE_RANGE
    out = (raw - lo) / torch.where(flat_map, torch.ones_like(span), span) * 2 - 1
    return torch.where(flat_map, torch.full_like(out, -1.0), out)


class CachedDepthOracle(DepthOracle):
    """Serves depth maps from a cache built by ``cache_pseudo_depth``."""

    source = "precomputed-cache"

    def __init__(self, cache_dir: str | os.PathLike):
        from .depth_pretrain import load_manifest

        self.cache_dir = Path(cache_dir)
        self.manifest = load_manifest(self.cache_dir)
        self.oracle_id = f"cache:{self.manifest.get('oracle_id', 'unknown')}"
        self._by_key = {e["key"]: e for e in self.manifest["entries"].values() if "key" in e}

    def normalized_for_path(self, path: str | os.PathLike) -> np.ndarray:
        from .depth_pretrain import read_depth_png

        entry = self.manifest["entries"].get(Path(path).name)
        if entry is None or "depth" not in entry:
            raise DepthCacheMiss(f"no cached depth for {Path(path).name} in {self.cache_dir}")
        return read_depth_png(self.cache_dir / entry["depth"])

    def raw_depth(self, rgb: np.ndarray) -> np.ndarray:
        from .depth_pretrain import read_depth_png

        entry = self._by_key.get(image_key(rgb))
        if entry is None:
            raise DepthCacheMiss(f"image not found in depth cache {self.cache_dir}")
        # already normalised; min-max again is the identity up to quantisation
        return read_depth_png(self.cache_dir / entry["depth"])


class ExternalDepthOracle(DepthOracle):
    """MiDaS-family monocular depth via ``transformers`` (DPT).

    The model predicts inverse depth; it is negated so larger means farther.
    Only the cache builder should call this.
    """

    source = "external-model"

    def __init__(self, model: str | os.PathLike = "Intel/dpt-hybrid-midas", device: str = "cpu"):
        try:
            from transformers import DPTForDepthEstimation

            self.model = DPTForDepthEstimation.from_pretrained(str(model)).eval().to(device)
        except Exception as e:
            raise BackboneUnavailable(
                f"could not load depth model {model!r}; download a DPT/MiDaS checkpoint and pass "
                "its directory as `depth_model`, or build the cache with depth_oracle=stub on fixtures"
            ) from e
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.device = device
        self.oracle_id = f"dpt:{model}"

    @torch.no_grad()
    def raw_depth(self, rgb: np.ndarray) -> np.ndarray:
        h, w = rgb.shape[:2]
        x = torch.from_numpy(rgb).permute(2, 0, 1)[None].float().to(self.device) / 255.0
        x = F.interpolate(x, size=(384, 384), mode="bicubic", align_corners=False)
        x = (x - 0.5) / 0.5
        inv = self.model(pixel_values=x).predicted_depth[:, None]
        inv = F.interpolate(inv, size=(h, w), mode="bicubic", align_corners=False)
        return -inv[0, 0].double().cpu().numpy()


# --------------------------------------------------------------------------
# Construction
# --------------------------------------------------------------------------


def make_stub_backbones(seed: int = 0, fixture_dir: str | os.PathLike | None = None):
    """Seeded offline stand-ins: (extractor, embedder, oracle).

    The oracle answers registered fixture photos exactly and anything else by
    inverted luminance.
    """
    extractor = StubExtractor(seed)
    embedder = StubEmbedder(seed)
    oracle = AnalyticDepthOracle(fallback=luminance_depth)
    if fixture_dir is not None:
        oracle.register_fixture(fixture_dir)
    return extractor, embedder, oracle


def make_extractor(kind: str, seed: int = 0, weights: str | None = None) -> FrozenModule:
    if kind == "stub":
        return StubExtractor(seed)
    if kind == "reference":
        return InceptionMixed6b(weights or "imagenet")
    raise ValueError(f"unknown extractor {kind!r} (expected reference or stub)")


def make_embedder(kind: str, seed: int = 0, weights: str | None = None) -> FrozenModule:
    if kind == "stub":
        return StubEmbedder(seed)
    if kind == "reference":
        return CLIPEmbedder(weights or "openai/clip-vit-base-patch32")
    raise ValueError(f"unknown embedder {kind!r} (expected reference or stub)")


def make_depth_oracle(
    kind: str,
    cache_dir: str | os.PathLike | None = None,
    fixture_dir: str | os.PathLike | None = None,
    model: str | None = None,
) -> DepthOracle:
    if kind == "cache":
        if cache_dir is None:
            raise ValueError("depth_oracle=cache requires a cache directory")
        return CachedDepthOracle(cache_dir)
    if kind == "stub":
        oracle = AnalyticDepthOracle(fallback=luminance_depth)
        if fixture_dir is not None:
            oracle.register_fixture(fixture_dir)
        return oracle
    if kind == "reference":
        return ExternalDepthOracle(model or "Intel/dpt-hybrid-midas")
    raise ValueError(f"unknown depth oracle {kind!r} (expected reference, stub or cache)")


def extract_features(images: torch.Tensor, extractor: nn.Module) -> torch.Tensor:
    return extractor(images)


def embed_semantic(images: torch.Tensor, embedder: nn.Module) -> torch.Tensor:
    return embedder(images)


def oracle_depth(images: torch.Tensor, oracle: DepthOracle) -> torch.Tensor:
    return oracle(images)
