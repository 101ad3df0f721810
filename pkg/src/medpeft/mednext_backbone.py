"""3D encoder-decoder segmentation network built from inverted-bottleneck
convolution blocks (depthwise/dense spatial conv -> group norm -> pointwise
expansion -> GELU -> pointwise compression, with a residual path).

Block kinds: BASIC keeps resolution and width, DOWN halves resolution and
doubles width (stride-2 spatial conv, strided 1x1x1 residual), UP doubles
resolution and halves width (transposed convs). Skip connections are
additive, so encoder/decoder widths match at equal resolution.
"""

from dataclasses import dataclass, field
from enum import Enum

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ChannelMismatch, InvalidConfig


class BlockKind(str, Enum):
    BASIC = "basic"
    DOWN = "down"
    UP = "up"


@dataclass
class ModelConfig:
    in_channels: int = 4
    n_classes: int = 4
    base_channels: int = 32
    kernel_size: int = 3
    expansion_ratio: int = 2
    blocks_per_stage: int = 2
    n_levels: int = 5
    deep_supervision: bool = False
    # "depthwise": grouped spatial convs everywhere (lightest variant).
    # "dense": ungrouped spatial convs in BASIC/DOWN blocks; UP blocks keep
    # grouped transposed kernels to limit upsampling cost.
    spatial_mix: str = "depthwise"
    norm_groups: int | None = None     # None -> one group per channel
    padding_mode: str = "zeros"        # "zeros" | "circular"

    def validate(self):
        if self.kernel_size % 2 != 1 or self.kernel_size < 1:
            raise InvalidConfig(f"kernel_size must be odd, got {self.kernel_size}")
        for name in ("in_channels", "n_classes", "base_channels",
                     "expansion_ratio", "blocks_per_stage", "n_levels"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.spatial_mix not in ("depthwise", "dense"):
            raise InvalidConfig(f"spatial_mix must be depthwise|dense, got {self.spatial_mix}")
        if self.padding_mode not in ("zeros", "circular"):
            raise InvalidConfig(f"padding_mode must be zeros|circular, got {self.padding_mode}")
        return self

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()

    @property
    def stage_widths(self):
        return [self.base_channels * (1 << i) for i in range(self.n_levels)]


def mednext_s() -> ModelConfig:
    """The full-size default configuration (~31.4M backbone parameters)."""
    return ModelConfig(in_channels=4, n_classes=4, base_channels=32,
                       kernel_size=3, expansion_ratio=2, blocks_per_stage=2,
                       n_levels=5, spatial_mix="dense").validate()


def tiny_config(**overrides) -> ModelConfig:
    """Small configuration for desk-scale experiments and tests."""
    cfg = dict(in_channels=4, n_classes=4, base_channels=8, kernel_size=3,
               expansion_ratio=2, blocks_per_stage=1, n_levels=3)
    cfg.update(overrides)
    return ModelConfig(**cfg).validate()


@dataclass
class BlockSpec:
    channels_in: int
    channels_out: int
    kind: BlockKind
    expansion_ratio: int = 2

    def validate(self):
        cin, cout = self.channels_in, self.channels_out
        if self.kind == BlockKind.BASIC and cin != cout:
            raise InvalidConfig(f"BASIC block requires equal widths, got {cin}->{cout}")
        if self.kind == BlockKind.DOWN and cout != 2 * cin:
            raise InvalidConfig(f"DOWN block must double width, got {cin}->{cout}")
        if self.kind == BlockKind.UP and 2 * cout != cin:
            raise InvalidConfig(f"UP block must halve width, got {cin}->{cout}")
        return self


def _zero_stuff(x):
    b, c, sx, sy, sz = x.shape
    up = x.new_zeros((b, c, 2 * sx, 2 * sy, 2 * sz))
    up[:, :, ::2, ::2, ::2] = x
    return up


class MedNeXtBlock(nn.Module):
    """One inverted-bottleneck block; see module docstring for the layout."""

    def __init__(self, spec: BlockSpec, kernel_size=3, spatial_mix="depthwise",
                 norm_groups=None, padding_mode="zeros"):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.padding_mode = padding_mode
        cin, cout, r = spec.channels_in, spec.channels_out, spec.expansion_ratio
        k, pad = kernel_size, kernel_size // 2
        groups = cin if spatial_mix == "depthwise" else 1

        if spec.kind == BlockKind.UP:
            # transposed spatial conv is always grouped; see ModelConfig
            self.conv_space = nn.ConvTranspose3d(
                cin, cin, k, stride=2, padding=pad, output_padding=1, groups=cin)
            self.res_proj = nn.ConvTranspose3d(cin, cout, 1, stride=2, output_padding=1)
        elif spec.kind == BlockKind.DOWN:
            self.conv_space = nn.Conv3d(cin, cin, k, stride=2, padding=pad,
                                        groups=groups, padding_mode=padding_mode)
            self.res_proj = nn.Conv3d(cin, cout, 1, stride=2)
        else:
            self.conv_space = nn.Conv3d(cin, cin, k, padding=pad, groups=groups,
                                        padding_mode=padding_mode)
            self.res_proj = None

        self.norm = nn.GroupNorm(norm_groups or cin, cin)
        self.expand = nn.Conv3d(cin, r * cin, 1)
        self.act = nn.GELU()
        self.compress = nn.Conv3d(r * cin, cout, 1)

    def _spatial(self, x):
        if self.spec.kind == BlockKind.UP and self.padding_mode == "circular":
            up = F.pad(_zero_stuff(x), (1, 1, 1, 1, 1, 1), mode="circular")
            w = self.conv_space.weight.flip((-3, -2, -1))
            return F.conv3d(up, w, self.conv_space.bias, groups=x.shape[1])
        return self.conv_space(x)

    def _residual(self, x):
        if self.res_proj is None:
            return x
        if (self.spec.kind == BlockKind.UP and self.padding_mode == "circular"):
            # k=1 transposed conv: value at even positions, bias elsewhere
            w = self.res_proj.weight.transpose(0, 1)
            return F.conv3d(_zero_stuff(x), w, self.res_proj.bias)
        return self.res_proj(x)

    def forward(self, x):
        if x.shape[1] != self.spec.channels_in:
            raise ChannelMismatch(
                f"block expects {self.spec.channels_in} channels, got {x.shape[1]}"
            )
        y = self.compress(self.act(self.expand(self.norm(self._spatial(x)))))
        return y + self._residual(x)


class MedNeXtBackbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        widths = cfg.stage_widths
        mk = dict(kernel_size=cfg.kernel_size, spatial_mix=cfg.spatial_mix,
                  norm_groups=cfg.norm_groups, padding_mode=cfg.padding_mode)

        def stage(width):
            return nn.Sequential(*[
                MedNeXtBlock(BlockSpec(width, width, BlockKind.BASIC,
                                       cfg.expansion_ratio), **mk)
                for _ in range(cfg.blocks_per_stage)
            ])

        self.stem = nn.Conv3d(cfg.in_channels, widths[0], 1)
        self.encoder_stages = nn.ModuleList(stage(w) for w in widths)
        self.down_blocks = nn.ModuleList(
            MedNeXtBlock(BlockSpec(widths[i], widths[i + 1], BlockKind.DOWN,
                                   cfg.expansion_ratio), **mk)
            for i in range(cfg.n_levels - 1)
        )
        self.up_blocks = nn.ModuleList(
            MedNeXtBlock(BlockSpec(widths[i + 1], widths[i], BlockKind.UP,
                                   cfg.expansion_ratio), **mk)
            for i in range(cfg.n_levels - 1)
        )
        self.decoder_stages = nn.ModuleList(stage(widths[i])
                                            for i in range(cfg.n_levels - 1))
        self.head = nn.Conv3d(widths[0], cfg.n_classes, 1)
        if cfg.deep_supervision:
            self.deep_heads = nn.ModuleList(
                nn.Conv3d(widths[i], cfg.n_classes, 1)
                for i in range(1, cfg.n_levels - 1)
            )

    def forward(self, x, return_deep=False):
        if x.shape[1] != self.cfg.in_channels:
            raise ChannelMismatch(
                f"model expects {self.cfg.in_channels} input channels, got {x.shape[1]}"
            )
        x = self.stem(x)
        skips = []
        for i in range(self.cfg.n_levels - 1):
            x = self.encoder_stages[i](x)
            skips.append(x)
            x = self.down_blocks[i](x)
        x = self.encoder_stages[-1](x)

        deep = []
        for i in reversed(range(self.cfg.n_levels - 1)):
            x = self.up_blocks[i](x)
            x = x + skips[i]
            x = self.decoder_stages[i](x)
            if self.cfg.deep_supervision and return_deep and 1 <= i:
                deep.append(self.deep_heads[i - 1](x))
        logits = self.head(x)
        if return_deep:
            return logits, deep
        return logits


def build_backbone(cfg: ModelConfig) -> MedNeXtBackbone:
    return MedNeXtBackbone(cfg)


@dataclass
class ParameterCount:
    total: int
    by_submodule: dict = field(default_factory=dict)


def count_parameters(model: nn.Module) -> ParameterCount:
    """Exact parameter counts, split by direct child module."""
    by = {}
    for name, child in model.named_children():
        n = sum(p.numel() for p in child.parameters())
        if n:
            by[name] = n
    direct = sum(p.numel() for p in model.parameters(recurse=False))
    if direct:
        by["(self)"] = direct
    return ParameterCount(total=sum(by.values()), by_submodule=by)
