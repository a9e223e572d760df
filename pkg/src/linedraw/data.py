"""Unpaired two-domain image loading and the synthetic shapes fixture."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


# --------------------------------------------------------------------------
# Preprocessing
# --------------------------------------------------------------------------


def list_images(directory: str | os.PathLike) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"image directory {directory} does not exist")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTS)


def open_rgb(path: str | os.PathLike) -> np.ndarray:
    """Decode to H x W x 3 uint8; grayscale is replicated across channels."""
    with Image.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64)
            arr = (arr / max(arr.max(), 1) * 255).round().astype(np.uint8)
            im = Image.fromarray(arr)
        return np.asarray(im.convert("RGB"))


def preprocess(image, size: int | None = 256) -> torch.Tensor:
    """Path, PIL image or uint8 array -> 3 x size x size float tensor in [-1, 1]."""
    if isinstance(image, (str, os.PathLike)):
        rgb = open_rgb(image)
    elif isinstance(image, Image.Image):
        rgb = np.asarray(image.convert("RGB"))
    else:
        rgb = np.asarray(image)
        if rgb.ndim == 2:
            rgb = np.repeat(rgb[..., None], 3, axis=2)
        elif rgb.shape[-1] == 1:
            rgb = np.repeat(rgb, 3, axis=2)
    if size is not None and rgb.shape[:2] != (size, size):
        rgb = np.asarray(Image.fromarray(rgb).resize((size, size), Image.BILINEAR))
    x = torch.from_numpy(np.array(rgb, dtype=np.uint8)).permute(2, 0, 1).float()
    return x / 127.5 - 1.0


def to_image(x: torch.Tensor, grayscale: bool = False) -> Image.Image:
    """3 x H x W canonical tensor -> PIL image (uint8)."""
    arr = ((x.detach().float().cpu().clamp(-1, 1) + 1) * 127.5).round().byte()
    arr = arr.permute(1, 2, 0).numpy()
    if grayscale:
        return Image.fromarray(arr.mean(axis=2).round().astype(np.uint8), mode="L")
    return Image.fromarray(arr, mode="RGB")


# --------------------------------------------------------------------------
# Unpaired loader
# --------------------------------------------------------------------------


@dataclass
class UnpairedDataset:
    domain_a_dir: str
    domain_b_dir: str
    image_size: int = 256
    shuffle_seed: int = 0
    batch_size: int = 6
    shuffle: bool = True
    flip: bool = False
    depth_cache: str | None = None


@dataclass
class Batch:
    a: torch.Tensor
    b: torch.Tensor
    a_depth: torch.Tensor | None
    a_paths: list[str] = field(default_factory=list)
    b_paths: list[str] = field(default_factory=list)


def _readable(paths: list[Path]) -> list[Path]:
    ok = []
    for p in paths:
        try:
            with Image.open(p) as im:
                im.verify()
        except (UnidentifiedImageError, OSError, SyntaxError) as e:
            log.warning("skipping undecodable image %s: %s", p, e)
            continue
        ok.append(p)
    return ok


class UnpairedLoader:
    """Seeded iterator over (photo batch, drawing batch).

    An epoch walks the larger domain once; the smaller one cycles through
    fresh permutations. Order depends only on (seed, epoch), so any batch can
    be regenerated when resuming.
    """

    def __init__(self, cfg: UnpairedDataset):
        self.cfg = cfg
        self.a_paths = _readable(list_images(cfg.domain_a_dir))
        self.b_paths = _readable(list_images(cfg.domain_b_dir))
        if not self.a_paths:
            raise ValueError(f"domain A directory {cfg.domain_a_dir} has no readable images")
        if not self.b_paths:
            raise ValueError(f"domain B directory {cfg.domain_b_dir} has no readable images")
        if cfg.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self._depth_oracle = None
        if cfg.depth_cache is not None:
            from .backbones import CachedDepthOracle

            self._depth_oracle = CachedDepthOracle(cfg.depth_cache)
            missing = [p.name for p in self.a_paths if p.name not in self._depth_oracle.manifest["entries"]]
            if missing:
                raise ValueError(f"depth cache is missing {len(missing)} photos: {missing[:10]}")
        self._images: dict[Path, torch.Tensor] = {}
        self._depths: dict[Path, torch.Tensor] = {}

    @property
    def epoch_length(self) -> int:
        return math.ceil(max(len(self.a_paths), len(self.b_paths)) / self.cfg.batch_size)

    def __len__(self) -> int:
        return self.epoch_length

    def _stream(self, n: int, length: int, epoch: int, tag: int) -> np.ndarray:
        if not self.cfg.shuffle:
            return np.arange(length) % n
        out = []
        cycle = 0
        while sum(len(c) for c in out) < length:
            rng = np.random.default_rng([self.cfg.shuffle_seed, epoch, tag, cycle])
            out.append(rng.permutation(n))
            cycle += 1
        return np.concatenate(out)[:length]

    def epoch_indices(self, epoch: int) -> list[tuple[np.ndarray, np.ndarray]]:
        length = max(len(self.a_paths), len(self.b_paths))
        ia = self._stream(len(self.a_paths), length, epoch, 0)
        ib = self._stream(len(self.b_paths), length, epoch, 1)
        if self.cfg.shuffle and len(self.b_paths) > 1:
            # never hand out index-aligned pairs
            for k in range(length):
                if ib[k] != ia[k]:
                    continue
                j = (k + 1) % length
                if ib[j] != ia[k] and ib[k] != ia[j]:
                    ib[k], ib[j] = ib[j], ib[k]
                else:
                    ib[k] = (ia[k] + 1) % len(self.b_paths)
        bs = self.cfg.batch_size
        return [(ia[i : i + bs], ib[i : i + bs]) for i in range(0, length, bs)]

    def _flip(self, epoch: int, tag: int, idx: int) -> bool:
        if not self.cfg.flip:
            return False
        return bool(np.random.default_rng([self.cfg.shuffle_seed, epoch, tag, idx, 7]).integers(2))

    def _image(self, path: Path) -> torch.Tensor:
        if path not in self._images:
            self._images[path] = preprocess(path, self.cfg.image_size)
        return self._images[path]

    def _depth(self, path: Path) -> torch.Tensor:
        if path not in self._depths:
            d = torch.from_numpy(self._depth_oracle.normalized_for_path(path)).float()[None, None]
            size = self.cfg.image_size
            if d.shape[-2:] != (size, size):
                d = torch.nn.functional.interpolate(d, size=(size, size), mode="bilinear", align_corners=False)
            self._depths[path] = d[0]
        return self._depths[path]

    def make_batch(self, epoch: int, ia: np.ndarray, ib: np.ndarray) -> Batch:
        a, b, depth = [], [], []
        for i in ia:
            x = self._image(self.a_paths[i])
            flip = self._flip(epoch, 0, int(i))
            a.append(x.flip(-1) if flip else x)
            if self._depth_oracle is not None:
                d = self._depth(self.a_paths[i])
                depth.append(d.flip(-1) if flip else d)
        for i in ib:
            x = self._image(self.b_paths[i])
            b.append(x.flip(-1) if self._flip(epoch, 1, int(i)) else x)
        return Batch(
            a=torch.stack(a),
            b=torch.stack(b),
            a_depth=torch.stack(depth) if depth else None,
            a_paths=[str(self.a_paths[i]) for i in ia],
            b_paths=[str(self.b_paths[i]) for i in ib],
        )

    def epoch(self, epoch: int) -> Iterator[Batch]:
        for ia, ib in self.epoch_indices(epoch):
            yield self.make_batch(epoch, ia, ib)

    def __iter__(self) -> Iterator[Batch]:
        return self.epoch(0)

    def batch_at(self, step: int) -> Batch:
        """The batch consumed at global training step ``step`` (0-based)."""
        epoch, i = divmod(step, self.epoch_length)
        ia, ib = self.epoch_indices(epoch)[i]
        return self.make_batch(epoch, ia, ib)


def load_unpaired(cfg: UnpairedDataset) -> UnpairedLoader:
    return UnpairedLoader(cfg)


# --------------------------------------------------------------------------
# Synthetic fixture
# --------------------------------------------------------------------------

PLANE_NEAR, PLANE_FAR = 8.0, 10.0
OBJECT_NEAR, OBJECT_FAR = 3.0, 6.0
BACKGROUND_ID = 0


@dataclass
class FixtureSpec:
    n_images: int = 64
    shapes: tuple[str, ...] = ("sphere", "box", "plane")
    seed: int = 0
    size: int = 64
    max_objects: int = 3

    def validate(self) -> None:
        unknown = set(self.shapes) - {"sphere", "box", "plane"}
        if unknown:
            raise ValueError(f"unknown fixture shapes {sorted(unknown)}")
        if not set(self.shapes) & {"sphere", "box"}:
            raise ValueError("fixture needs at least one of sphere/box")
        if self.n_images < 1 or self.size < 8:
            raise ValueError("fixture needs n_images >= 1 and size >= 8")


def _sample_scene(rng: np.random.Generator, spec: FixtureSpec) -> dict:
    kinds = [s for s in spec.shapes if s != "plane"]
    n_obj = int(rng.integers(1, spec.max_objects + 1))
    objects = []
    for _ in range(n_obj):
        kind = str(rng.choice(kinds))
        color = rng.uniform(0.25, 1.0, size=3).round(4).tolist()
        z = round(float(rng.uniform(OBJECT_NEAR + 0.5, OBJECT_FAR)), 4)
        if kind == "sphere":
            r = round(float(rng.uniform(0.12, 0.28)), 4)
            cx, cy = rng.uniform(r * 0.5, 1 - r * 0.5, size=2).round(4).tolist()
            objects.append({"kind": "sphere", "center": [cx, cy, z], "radius": r, "color": color})
        else:
            w, h = rng.uniform(0.15, 0.45, size=2).round(4).tolist()
            x0 = round(float(rng.uniform(0.0, 1 - w)), 4)
            y0 = round(float(rng.uniform(0.0, 1 - h)), 4)
            objects.append({"kind": "box", "rect": [x0, y0, x0 + w, y0 + h], "depth": z, "color": color})
    scene = {"objects": objects}
    if "plane" in spec.shapes:
        scene["plane"] = {"near": PLANE_NEAR, "far": PLANE_FAR, "color": rng.uniform(0.3, 0.9, size=3).round(4).tolist()}
    return scene


def render_scene(scene: dict, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Orthographic z-buffer render.

    Returns (rgb uint8 HxWx3, depth float64 HxW, object id int HxW). Depth is
    distance along the view axis, larger is farther. The background plane
    recedes linearly from the bottom row (near) to the top row (far).
    """
    c = (np.arange(size) + 0.5) / size
    xs, ys = np.meshgrid(c, c)
    plane = scene.get("plane")
    if plane is not None:
        depth = plane["near"] + (plane["far"] - plane["near"]) * (1.0 - ys)
        base = np.asarray(plane["color"])
    else:
        depth = np.full((size, size), PLANE_FAR)
        base = np.zeros(3)
    ids = np.full((size, size), BACKGROUND_ID, dtype=np.int32)
    rgb = np.broadcast_to(base, (size, size, 3)).copy()
    light = np.array([-0.4, -0.5, -0.77])
    light /= np.linalg.norm(light)
    for k, obj in enumerate(scene["objects"], start=1):
        col = np.asarray(obj["color"])
        if obj["kind"] == "sphere":
            cx, cy, cz = obj["center"]
            r = obj["radius"]
            rho2 = (xs - cx) ** 2 + (ys - cy) ** 2
            inside = rho2 < r * r
            h = np.sqrt(np.clip(r * r - rho2, 0, None))
            d = cz - h
            nx, ny, nz = (xs - cx) / r, (ys - cy) / r, -h / r
            shade = np.clip(-(nx * light[0] + ny * light[1] + nz * light[2]), 0, 1) * 0.75 + 0.25
            color = shade[..., None] * col
        else:
            x0, y0, x1, y1 = obj["rect"]
            inside = (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
            d = np.full((size, size), float(obj["depth"]))
            color = np.broadcast_to(col * 0.85, (size, size, 3))
        hit = inside & (d < depth)
        depth = np.where(hit, d, depth)
        ids = np.where(hit, k, ids)
        rgb = np.where(hit[..., None], color, rgb)
    # aerial perspective: fade towards grey with distance
    fog = ((depth - OBJECT_NEAR) / (PLANE_FAR - OBJECT_NEAR)).clip(0, 1)[..., None] * 0.45
    rgb = rgb * (1 - fog) + 0.6 * fog
    rgb = (rgb.clip(0, 1) * 255).round().astype(np.uint8)
    return rgb, depth, ids


def edge_drawing(ids: np.ndarray) -> np.ndarray:
    """Contour drawing: pixels with a 4-neighbour on a different surface.

    Surfaces meet only at occluding boundaries in the fixture, so this marks
    depth (and normal) discontinuities. Returns uint8, strokes 0 on 255.
    """
    edge = np.zeros(ids.shape, dtype=bool)
    dv = ids[1:, :] != ids[:-1, :]
    dh = ids[:, 1:] != ids[:, :-1]
    edge[1:, :] |= dv
    edge[:-1, :] |= dv
    edge[:, 1:] |= dh
    edge[:, :-1] |= dh
    return np.where(edge, 0, 255).astype(np.uint8)


def synth_fixture(spec: FixtureSpec, out_dir: str | os.PathLike) -> Path:
    """Write ``photos/``, ``depth/`` (float64 .npy), ``drawings/`` and ``fixture.json``."""
    spec.validate()
    out = Path(out_dir)
    for sub in ("photos", "depth", "drawings"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    scenes = []
    for i in range(spec.n_images):
        scene = _sample_scene(rng, spec)
        rgb, depth, ids = render_scene(scene, spec.size)
        name = f"{i:05d}"
        Image.fromarray(rgb, mode="RGB").save(out / "photos" / f"{name}.png")
        np.save(out / "depth" / f"{name}.npy", depth)
        Image.fromarray(edge_drawing(ids), mode="L").save(out / "drawings" / f"{name}.png")
        scenes.append({"name": name, **scene})
    record = {"spec": {**asdict(spec), "shapes": list(spec.shapes)}, "scenes": scenes}
    (out / "fixture.json").write_text(json.dumps(record, indent=1, sort_keys=True))
    return out


def read_fixture(fixture_dir: str | os.PathLike) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (photo uint8, analytic depth) for every fixture scene."""
    root = Path(fixture_dir)
    record = json.loads((root / "fixture.json").read_text())
    for scene in record["scenes"]:
        rgb = open_rgb(root / "photos" / f"{scene['name']}.png")
        depth = np.load(root / "depth" / f"{scene['name']}.npy")
        yield rgb, depth
