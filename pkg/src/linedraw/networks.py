"""Learnable networks: the two ResNet generators, the 70x70 PatchGAN
discriminators and the feature-to-depth decoder ``G_Geom``."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

FEATURE_CHANNELS = 768


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    # N(0, 0.02) for convs, N(1, 0.02) for norm scales.
    def _init(m):
        name = m.__class__.__name__
        if "Conv" in name or isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, 0.0, std)
            if getattr(m, "bias", None) is not None:
                nn.init.zeros_(m.bias)
        elif "Norm" in name and getattr(m, "weight", None) is not None:
            nn.init.normal_(m.weight, 1.0, std)
            nn.init.zeros_(m.bias)

    module.apply(_init)


def _norm_layer(kind: str) -> Callable[[int], nn.Module]:
    if kind == "instance":
        return lambda c: nn.InstanceNorm2d(c, affine=False, track_running_stats=False)
    if kind == "batch":
        return nn.BatchNorm2d
    raise ValueError(f"unknown norm layer {kind!r}")


# --------------------------------------------------------------------------
# Generators
# --------------------------------------------------------------------------


@dataclass
class GeneratorConfig:
    residual_blocks: int = 3
    base_channels: int = 64
    in_channels: int = 3
    out_channels: int = 3
    norm: str = "instance"
    arch: str = "resnet"  # "resnet" or "toy"
    seed: int = 0

    def validate(self) -> None:
        if self.residual_blocks < 1:
            raise ValueError("residual_blocks must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.arch not in ("resnet", "toy"):
            raise ValueError(f"unknown generator arch {self.arch!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class ResnetBlock(nn.Module):
    def __init__(self, dim: int, norm: Callable[[int], nn.Module], reflect: bool = True):
        super().__init__()
        pad = (lambda: nn.ReflectionPad2d(1)) if reflect else (lambda: nn.ZeroPad2d(1))
        self.block = nn.Sequential(
            pad(), nn.Conv2d(dim, dim, 3), norm(dim), nn.ReLU(True),
            pad(), nn.Conv2d(dim, dim, 3), norm(dim),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    """Encoder / residual blocks / decoder, size preserving for sides divisible by 4."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        norm = _norm_layer(cfg.norm)
        ngf = cfg.base_channels
        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(cfg.in_channels, ngf, 7),
            norm(ngf),
            nn.ReLU(True),
        ]
        ch = ngf
        for _ in range(2):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), norm(ch * 2), nn.ReLU(True)]
            ch *= 2
        layers += [ResnetBlock(ch, norm) for _ in range(cfg.residual_blocks)]
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                norm(ch // 2),
                nn.ReLU(True),
            ]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, cfg.out_channels, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class ToyGenerator(nn.Module):
    """Two-layer generator used for gradient checks and inference plumbing.

    Initialised near the identity map: the 3x3 conv starts as a centre tap
    plus ``noise`` Gaussian jitter and the 1x1 conv as the identity, so
    ``tanh(tanh(x))``-style squashing is the only systematic distortion.
    """

    def __init__(self, cfg: GeneratorConfig, noise: float = 1e-3, hidden: int | None = None):
        super().__init__()
        hidden = hidden or cfg.in_channels
        self.conv1 = nn.Conv2d(cfg.in_channels, hidden, 3, padding=1, padding_mode="replicate")
        self.conv2 = nn.Conv2d(hidden, cfg.out_channels, 1)
        with torch.no_grad():
            self.conv1.weight.normal_(0.0, noise)
            self.conv1.bias.zero_()
            self.conv2.weight.normal_(0.0, noise)
            self.conv2.bias.zero_()
            for c in range(min(cfg.in_channels, hidden)):
                self.conv1.weight[c, c, 1, 1] += 1.0
            for c in range(min(hidden, cfg.out_channels)):
                self.conv2.weight[c, c, 0, 0] += 1.0

    def forward(self, x):
        h = torch.tanh(self.conv1(x))
        # Hardtanh keeps the second layer range-bounded without extra squashing.
        return F.hardtanh(self.conv2(h))


def build_generator(cfg: GeneratorConfig | None = None) -> nn.Module:
    cfg = cfg or GeneratorConfig()
    cfg.validate()
    torch.manual_seed(cfg.seed)
    if cfg.arch == "toy":
        return ToyGenerator(cfg)
    net = ResnetGenerator(cfg)
    init_weights(net)
    return net


# --------------------------------------------------------------------------
# Discriminator
# --------------------------------------------------------------------------


@dataclass
class DiscriminatorConfig:
    receptive_field: int = 70
    base_channels: int = 64
    in_channels: int = 3
    norm: str = "batch"
    seed: int = 0

    def validate(self) -> None:
        if self.receptive_field != 70:
            raise ValueError("only the 70x70 PatchGAN layout is supported")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# (kernel, stride, padding) of every conv in the 70x70 PatchGAN.
PATCHGAN_LAYERS = [(4, 2, 1), (4, 2, 1), (4, 2, 1), (4, 1, 1), (4, 1, 1)]


def receptive_field(layers=PATCHGAN_LAYERS) -> int:
    """Receptive field of one output unit of a conv stack, computed back to front."""
    rf = 1
    for k, s, _ in reversed(layers):
        rf = (rf - 1) * s + k
    return rf


def patch_output_size(side: int, layers=PATCHGAN_LAYERS) -> int:
    for k, s, p in layers:
        side = (side + 2 * p - k) // s + 1
    return side


class PatchDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        norm = _norm_layer(cfg.norm)
        ndf = cfg.base_channels
        chans = [cfg.in_channels, ndf, ndf * 2, ndf * 4, ndf * 8, 1]
        layers: list[nn.Module] = []
        for i, (k, s, p) in enumerate(PATCHGAN_LAYERS):
            layers.append(nn.Conv2d(chans[i], chans[i + 1], k, stride=s, padding=p))
            if i == len(PATCHGAN_LAYERS) - 1:
                break
            if i > 0:
                layers.append(norm(chans[i + 1]))
            layers.append(nn.LeakyReLU(0.2, True))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


def build_discriminator(cfg: DiscriminatorConfig | None = None) -> PatchDiscriminator:
    cfg = cfg or DiscriminatorConfig()
    cfg.validate()
    torch.manual_seed(cfg.seed)
    net = PatchDiscriminator(cfg)
    init_weights(net)
    return net


# --------------------------------------------------------------------------
# Depth decoder G_Geom
# --------------------------------------------------------------------------

# (type, kernel, stride, padding, in, out, activation).  Padding here is the
# "exact" variant; see DepthDecoderConfig.padding.
_GEOM_TABLE = (
    [("conv", 7, 1, 3, 768, 512, "relu"), ("convT", 4, 2, 1, 512, 256, "relu")]
    + [("res", 3, 1, 1, 256, 256, "relu")] * 9
    + [
        ("convT", 3, 2, 1, 256, 128, "relu"),
        ("convT", 3, 2, 1, 128, 64, "relu"),
        ("convT", 3, 2, 1, 64, 64, "relu"),
        ("conv", 7, 1, 3, 64, 3, "tanh"),
    ]
)

# Paddings exactly as printed in the published layer table.
_LITERAL_PADDING = [4, 0] + [1] * 9 + [1, 1, 1, 3]


@dataclass
class DepthDecoderConfig:
    """Layer table for the feature-to-depth decoder.

    ``padding="exact"`` makes every stride-2 transposed conv double its input
    (14x14 features -> 224x224 map). ``padding="literal"`` uses the table's
    printed paddings (7x7 pad 4, 4x4 pad 0) which grow 14 -> 16 -> 34 and then
    double, giving 272x272.
    """

    in_channels: int = FEATURE_CHANNELS
    out_channels: int = 3
    padding: str = "exact"
    seed: int = 0

    def layers(self) -> list[tuple]:
        if self.padding not in ("exact", "literal"):
            raise ValueError(f"unknown padding mode {self.padding!r}")
        rows = list(_GEOM_TABLE)
        if self.padding == "literal":
            rows = [r[:3] + (p,) + r[4:] for r, p in zip(rows, _LITERAL_PADDING)]
        return rows

    def validate(self) -> None:
        if self.in_channels != FEATURE_CHANNELS or self.out_channels != 3:
            raise ValueError("depth decoder layout is fixed at 768 -> 3 channels")
        self.layers()

    def to_dict(self) -> dict:
        return asdict(self)


class DepthDecoder(nn.Module):
    def __init__(self, cfg: DepthDecoderConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        for kind, k, s, p, cin, cout, act in cfg.layers():
            if kind == "res":
                layers.append(ResnetBlock(cout, nn.BatchNorm2d, reflect=False))
                continue
            if kind == "conv":
                layers.append(nn.Conv2d(cin, cout, k, stride=s, padding=p))
            else:
                # output_padding restores the lost row/col of a stride-2 transpose.
                out_pad = 1 if (cfg.padding == "exact" and k == 3) else 0
                layers.append(
                    nn.ConvTranspose2d(cin, cout, k, stride=s, padding=p, output_padding=out_pad)
                )
            layers.append(nn.BatchNorm2d(cout))
            layers.append(nn.ReLU(True) if act == "relu" else nn.Tanh())
        self.model = nn.Sequential(*layers)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.dim() != 4 or feats.shape[1] != FEATURE_CHANNELS:
            raise ValueError(
                f"depth decoder expects B x {FEATURE_CHANNELS} x h x w features, got {tuple(feats.shape)}"
            )
        return self.model(feats)

    def structure(self) -> list[tuple]:
        """(type, kernel, stride, in, out) rows recovered from the live modules."""
        rows = []
        for m in self.model:
            if isinstance(m, nn.Conv2d):
                rows.append(("conv", m.kernel_size[0], m.stride[0], m.in_channels, m.out_channels))
            elif isinstance(m, nn.ConvTranspose2d):
                rows.append(("convT", m.kernel_size[0], m.stride[0], m.in_channels, m.out_channels))
            elif isinstance(m, ResnetBlock):
                conv = m.block[1]
                rows.append(("res", conv.kernel_size[0], conv.stride[0], conv.in_channels, conv.out_channels))
        return rows


def expected_decoder_structure(cfg: DepthDecoderConfig | None = None) -> list[tuple]:
    cfg = cfg or DepthDecoderConfig()
    return [(kind, k, s, cin, cout) for kind, k, s, _, cin, cout, _ in cfg.layers()]


def check_decoder_structure(decoder: DepthDecoder) -> None:
    """Raise if a decoder's layer layout departs from its config's table."""
    got = decoder.structure()
    want = expected_decoder_structure(decoder.cfg)
    if got != want:
        raise ValueError(f"depth decoder structure mismatch:\n got {got}\nwant {want}")
    n_tanh = sum(isinstance(m, nn.Tanh) for m in decoder.model)
    n_bn = sum(isinstance(m, nn.BatchNorm2d) for m in decoder.modules())
    if n_tanh != 1 or n_bn != len(want) - 9 + 2 * 9:
        raise ValueError("depth decoder normalization/activation layout mismatch")


def build_depth_decoder(cfg: DepthDecoderConfig | None = None) -> DepthDecoder:
    cfg = cfg or DepthDecoderConfig()
    cfg.validate()
    torch.manual_seed(cfg.seed)
    net = DepthDecoder(cfg)
    init_weights(net)
    return net


def depth_from_drawing(
    drawing: torch.Tensor,
    extractor: nn.Module,
    decoder: DepthDecoder,
    keep_channels: bool = False,
) -> torch.Tensor:
    """Decode depth from a drawing through the frozen feature bridge.

    Returns ``B x 1 x H x W`` (channel mean) at the drawing's resolution, or
    the raw 3-channel prediction resized when ``keep_channels`` is set.
    """
    pred = decoder(extractor(drawing))
    if not keep_channels:
        pred = pred.mean(dim=1, keepdim=True)
    if pred.shape[-2:] != drawing.shape[-2:]:
        pred = F.interpolate(pred, size=drawing.shape[-2:], mode="bilinear", align_corners=False)
    return pred
