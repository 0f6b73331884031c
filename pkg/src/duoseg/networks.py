"""UNet-style segmentation network and pixel-wise critic."""
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

EPS = 1e-7


@dataclass
class SegNetConfig:
    in_channels: int = 1
    base_width: int = 8
    depth: int = 3
    norm: str = "instance"  # "instance" or "none"

    def __post_init__(self):
        if self.norm not in ("instance", "none"):
            raise ValueError(f"norm must be 'instance' or 'none', got {self.norm!r}")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_width < 4:
            raise ValueError(f"base_width must be >= 4, got {self.base_width}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")


@dataclass
class CriticConfig(SegNetConfig):
    in_channels: int = 1
    # instance norm would erase the absolute values that separate binary
    # masks from soft predictions
    norm: str = "none"

    def __post_init__(self):
        super().__post_init__()
        if self.in_channels != 1:
            raise ValueError("the critic takes a single-channel mask")


def _norm(kind, ch):
    return nn.InstanceNorm2d(ch, affine=True) if kind == "instance" else nn.Identity()


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, norm="instance"):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            _norm(norm, out_ch),
            nn.LeakyReLU(0.1),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            _norm(norm, out_ch),
            nn.LeakyReLU(0.1),
        )

    def forward(self, x):
        return self.block(x)


class UpBlock(nn.Module):
    def __init__(self, in_ch, out_ch, norm="instance"):
        super().__init__()
        self.up_conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv = ConvBlock(2 * out_ch, out_ch, norm)

    def forward(self, x, skip):
        x = self.up_conv(F.interpolate(x, scale_factor=2, mode="nearest"))
        return self.conv(torch.cat([skip, x], dim=1))


class UNet(nn.Module):
    """Encoder-decoder with a skip connection at every level.

    ``forward`` returns raw logits shaped B x 1 x H x W; use ``forward_seg``
    for clamped probabilities.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_width * 2 ** i for i in range(cfg.depth + 1)]
        self.encoders = nn.ModuleList([ConvBlock(cfg.in_channels, widths[0], cfg.norm)])
        for i in range(cfg.depth):
            self.encoders.append(ConvBlock(widths[i], widths[i + 1], cfg.norm))
        self.decoders = nn.ModuleList(
            UpBlock(widths[i + 1], widths[i], cfg.norm) for i in reversed(range(cfg.depth))
        )
        self.head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        div = 2 ** self.cfg.depth
        if h % div or w % div:
            raise ValueError(f"input {h}x{w} is not divisible by 2**depth = {div}")
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x if i == 0 else F.max_pool2d(x, 2))
            skips.append(x)
        x = skips.pop()
        for dec in self.decoders:
            x = dec(x, skips.pop())
        return self.head(x)


def _build(cfg, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNet(cfg)


def build_segnet(cfg, seed):
    return _build(cfg, seed)


def build_critic(cfg, seed):
    # same backbone as the segmentation nets; input is a 1-channel mask
    return _build(cfg, seed)


def _probabilities(net, x):
    p = torch.sigmoid(net(x)).squeeze(1).clamp(EPS, 1 - EPS)
    if not torch.isfinite(p).all():
        raise FloatingPointError("non-finite values in network output")
    return p


def forward_seg(net, batch):
    """B x C x H x W images -> B x H x W foreground probabilities."""
    if batch.dim() != 4:
        raise ValueError(f"expected B x C x H x W batch, got shape {tuple(batch.shape)}")
    if batch.shape[1] != net.cfg.in_channels:
        raise ValueError(
            f"batch has {batch.shape[1]} channels, network expects {net.cfg.in_channels}"
        )
    return _probabilities(net, batch)


def forward_critic(critic, masks):
    """Masks or probability maps (H x W, B x H x W or B x 1 x H x W) -> B x H x W confidence."""
    if masks.dim() == 2:
        masks = masks[None, None]
    elif masks.dim() == 3:
        masks = masks[:, None]
    return _probabilities(critic, masks)


def clone_params(net):
    return [p.detach().clone() for p in net.parameters()]
