"""Residual convolutional adapters and their attachment to backbone blocks.

Three variants, all shape-preserving on (C, h, w, d) feature maps:

  * linear: pointwise bottleneck, C -> ceil(ratio*C) -> C
  * conv_dw: depthwise-separable bottleneck, depthwise k^3 then pointwise
    down/up through ceil(ratio*C) channels
  * convnext: inverted bottleneck, depthwise k^3 -> channel LayerNorm ->
    pointwise expansion to R*C -> GELU -> pointwise projection back to C

The residual ``f + adapter(f)`` always lives in the attachment wrapper, never
inside the adapter itself; with the projection zero-initialized the wrapped
model is exactly the original function at the start of fine-tuning.
"""

import math
from dataclasses import dataclass
from enum import Enum

import torch
from torch import nn

from .errors import ChannelMismatch, IncompatibleSite, InvalidConfig
from .mednext_backbone import BlockKind, MedNeXtBackbone, MedNeXtBlock


class AdapterVariant(str, Enum):
    LINEAR = "linear"
    CONV_DW = "convdw"
    CONVNEXT = "convnext"


class Placement(str, Enum):
    SEQUENTIAL = "sequential"
    PARALLEL = "parallel"


_ACTIVATIONS = {"gelu": nn.GELU, "relu": nn.ReLU, "tanh": nn.Tanh}


@dataclass
class AdapterConfig:
    variant: AdapterVariant = AdapterVariant.CONVNEXT
    placement: Placement = Placement.SEQUENTIAL
    bottleneck_ratio: float = 0.25   # linear / conv_dw only
    expansion_ratio: int = 2         # convnext only
    kernel_size: int = 3
    activation: str = "gelu"
    zero_init_projection: bool = True

    def validate(self):
        self.variant = AdapterVariant(self.variant)
        self.placement = Placement(self.placement)
        if not 0.0 < self.bottleneck_ratio <= 1.0:
            raise InvalidConfig(f"bottleneck_ratio must be in (0, 1], "
                                f"got {self.bottleneck_ratio}")
        if self.kernel_size % 2 != 1:
            raise InvalidConfig(f"kernel_size must be odd, got {self.kernel_size}")
        if self.expansion_ratio < 1:
            raise InvalidConfig("expansion_ratio must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise InvalidConfig(f"unknown activation {self.activation!r}")
        return self

    def to_dict(self):
        d = dict(self.__dict__)
        d["variant"] = self.variant.value
        d["placement"] = self.placement.value
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis, independently at every voxel."""

    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        xn = (x - mu) / torch.sqrt(var + self.eps)
        shape = (1, -1) + (1,) * (x.ndim - 2)
        return xn * self.weight.view(shape) + self.bias.view(shape)


def _zero_init(conv):
    nn.init.zeros_(conv.weight)
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


class _AdapterBase(nn.Module):
    def __init__(self, config: AdapterConfig, channels: int):
        super().__init__()
        self.config = config
        self.channels = channels

    def _check(self, f):
        if f.shape[1] != self.channels:
            raise ChannelMismatch(
                f"adapter built for {self.channels} channels, got {f.shape[1]}"
            )


class LinearAdapter(_AdapterBase):
    """Two pointwise maps through a narrow bottleneck, activation after each."""

    def __init__(self, config, channels):
        super().__init__(config, channels)
        hidden = max(1, math.ceil(config.bottleneck_ratio * channels))
        self.down = nn.Conv3d(channels, hidden, 1)
        self.act = _ACTIVATIONS[config.activation]()
        self.up = nn.Conv3d(hidden, channels, 1)
        if config.zero_init_projection:
            _zero_init(self.up)

    def forward(self, f):
        self._check(f)
        return self.act(self.up(self.act(self.down(f))))


class ConvDWAdapter(_AdapterBase):
    """Depthwise-separable bottleneck: depthwise k^3, pointwise reduction,
    activation, pointwise restoration."""

    def __init__(self, config, channels):
        super().__init__(config, channels)
        hidden = max(1, math.ceil(config.bottleneck_ratio * channels))
        k = config.kernel_size
        self.depthwise = nn.Conv3d(channels, channels, k, padding=k // 2,
                                   groups=channels)
        self.down = nn.Conv3d(channels, hidden, 1)
        self.act = _ACTIVATIONS[config.activation]()
        self.up = nn.Conv3d(hidden, channels, 1)
        if config.zero_init_projection:
            _zero_init(self.up)

    def forward(self, f):
        self._check(f)
        return self.up(self.act(self.down(self.depthwise(f))))


class ConvNeXtAdapter(_AdapterBase):
    """Inverted bottleneck with a channel LayerNorm after the depthwise conv."""

    def __init__(self, config, channels):
        super().__init__(config, channels)
        k, r = config.kernel_size, config.expansion_ratio
        self.depthwise = nn.Conv3d(channels, channels, k, padding=k // 2,
                                   groups=channels)
        self.norm = ChannelLayerNorm(channels)
        self.expand = nn.Conv3d(channels, r * channels, 1)
        self.act = _ACTIVATIONS[config.activation]()
        self.project = nn.Conv3d(r * channels, channels, 1)
        if config.zero_init_projection:
            _zero_init(self.project)

    def forward(self, f):
        self._check(f)
        return self.project(self.act(self.expand(self.norm(self.depthwise(f)))))


_VARIANTS = {
    AdapterVariant.LINEAR: LinearAdapter,
    AdapterVariant.CONV_DW: ConvDWAdapter,
    AdapterVariant.CONVNEXT: ConvNeXtAdapter,
}


def build_adapter(config: AdapterConfig, channels: int) -> _AdapterBase:
    config.validate()
    return _VARIANTS[config.variant](config, channels)


def adapter_forward(f, adapter: _AdapterBase):
    """The bare adapter branch (no residual; the wrapper adds it)."""
    return adapter(f)


class BlockWithAdapter(nn.Module):
    """Host block plus adapter branch.

    sequential: out = g + adapter(g) with g = block(x)
    parallel:   out = block(x) + adapter(x)
    """

    def __init__(self, block: MedNeXtBlock, adapter: _AdapterBase,
                 placement: Placement):
        super().__init__()
        self.block = block
        self.adapter = adapter
        self.placement = placement

    def forward(self, x):
        if self.placement == Placement.PARALLEL:
            return self.block(x) + self.adapter(x)
        g = self.block(x)
        return g + self.adapter(g)


class PeftModel(nn.Module):
    """Backbone with adapters attached at recorded sites."""

    def __init__(self, backbone: MedNeXtBackbone, adapter_config: AdapterConfig,
                 sites: list):
        super().__init__()
        self.backbone = backbone
        self.adapter_config = adapter_config
        self.sites = list(sites)

    @property
    def cfg(self):
        return self.backbone.cfg

    def forward(self, x, **kw):
        return self.backbone(x, **kw)

    def adapter_parameters(self):
        for name, p in self.named_parameters():
            if ".adapter." in name:
                yield p

    def adapter_parameter_count(self) -> int:
        return sum(p.numel() for p in self.adapter_parameters())

    def backbone_parameter_count(self) -> int:
        return sum(p.numel() for n, p in self.named_parameters()
                   if ".adapter." not in n)


def iter_block_sites(backbone: MedNeXtBackbone):
    """(site_path, block) for every host block in the backbone, in module order."""
    for name, module in backbone.named_modules():
        if isinstance(module, MedNeXtBlock):
            yield name, module


def default_sites(backbone: MedNeXtBackbone):
    """Every BASIC block: encoder stages, bottleneck stage and decoder stages."""
    return [name for name, blk in iter_block_sites(backbone)
            if blk.spec.kind == BlockKind.BASIC]


def _get_parent(root: nn.Module, path: str):
    parts = path.split(".")
    parent = root
    for p in parts[:-1]:
        parent = getattr(parent, p)
    return parent, parts[-1]


def attach_adapters(model: MedNeXtBackbone, config: AdapterConfig,
                    sites=None) -> PeftModel:
    """Wrap the selected blocks in place and return the PeftModel view.
    With zero-initialized projections the wrapped forward equals the
    original model's forward exactly."""
    if isinstance(model, PeftModel):
        raise IncompatibleSite("model already has adapters attached")
    config.validate()
    blocks = dict(iter_block_sites(model))
    if sites is None:
        sites = default_sites(model)
    attached = []
    for site in sites:
        if site not in blocks:
            raise IncompatibleSite(f"no block at site {site!r}")
        block = blocks[site]
        if (config.placement == Placement.PARALLEL
                and block.spec.kind != BlockKind.BASIC):
            raise IncompatibleSite(
                f"parallel placement needs equal in/out channels; "
                f"site {site!r} is a {block.spec.kind.value} block"
            )
        channels = (block.spec.channels_in
                    if config.placement == Placement.PARALLEL
                    else block.spec.channels_out)
        adapter = build_adapter(config, channels)
        parent, attr = _get_parent(model, site)
        setattr(parent, attr, BlockWithAdapter(block, adapter, config.placement))
        attached.append(site)
    return PeftModel(model, config, attached)


def detach_adapters(peft: PeftModel) -> MedNeXtBackbone:
    """Restore the original blocks; returns the bare backbone."""
    backbone = peft.backbone
    for site in peft.sites:
        parent, attr = _get_parent(backbone, site)
        wrapped = getattr(parent, attr)
        setattr(parent, attr, wrapped.block)
    peft.sites = []
    return backbone
