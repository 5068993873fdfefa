"""Channel and spatial attention gating (CBAM-style block).

The block refines a feature map in two sequential steps: a per-channel
gate computed from globally pooled descriptors through a shared MLP, then
a per-position gate computed from channel-pooled maps through a 7x7
convolution. Both gates are sigmoid outputs applied multiplicatively.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

SPATIAL_KERNEL_SIZE = 7


@dataclass
class ChannelAttentionParams:
    """Shared two-layer MLP applied to both pooled descriptors.

    ``fc1`` maps C -> C/ratio, ``fc2`` maps back to C; both bias-free.
    """

    fc1: Tensor
    fc2: Tensor
    ratio: int

    def __post_init__(self):
        hidden, channels = self.fc1.shape
        if self.fc2.shape != (channels, hidden):
            raise DimensionError(f"channel-attention MLP shapes inconsistent: {self.fc1.shape} vs {self.fc2.shape}")
        if self.ratio < 1 or channels % self.ratio != 0 or channels // self.ratio < 1:
            raise ConfigError(f"channel-attention ratio {self.ratio} incompatible with {channels} channels")
        if hidden != channels // self.ratio:
            raise DimensionError(f"hidden width {hidden} != channels/ratio = {channels // self.ratio}")

    @property
    def channels(self) -> int:
        return self.fc1.shape[1]


@dataclass
class SpatialAttentionParams:
    """7x7 convolution over the stacked channel-avg and channel-max maps."""

    kernel: Tensor

    def __post_init__(self):
        k = SPATIAL_KERNEL_SIZE
        if self.kernel.shape != (1, 2, k, k):
            raise DimensionError(f"spatial-attention kernel must be (1, 2, {k}, {k}), got {self.kernel.shape}")


@dataclass
class CbamParams:
    channel: ChannelAttentionParams
    spatial: SpatialAttentionParams


def _mlp(vec: Tensor, params: ChannelAttentionParams) -> Tensor:
    hidden = ad.relu(ad.dense(vec, params.fc1))
    return ad.dense(hidden, params.fc2)


def channel_attention(p: Tensor, params: ChannelAttentionParams, sigmoid_avg_only: bool = False) -> Tensor:
    """Per-channel gate of shape C x 1 x 1 from pooled descriptors.

    Default form squashes the sum of the avg-pool and max-pool MLP branches
    through one sigmoid. ``sigmoid_avg_only`` applies the sigmoid to the
    avg branch alone before adding the raw max branch (comparison variant;
    its output is not confined to (0, 1)).
    """
    if p.data.ndim != 3:
        raise DimensionError("channel_attention expects a C x H x W map")
    if p.shape[0] != params.channels:
        raise DimensionError(f"input has {p.shape[0]} channels, MLP expects {params.channels}")
    avg_branch = _mlp(ad.flatten(ad.pool_spatial(p, "avg", global_pool=True)), params)
    max_branch = _mlp(ad.flatten(ad.pool_spatial(p, "max", global_pool=True)), params)
    if sigmoid_avg_only:
        gate = ad.add(ad.sigmoid(avg_branch), max_branch)
    else:
        gate = ad.sigmoid(ad.add(avg_branch, max_branch))
    return ad.reshape(gate, (params.channels, 1, 1))


def spatial_attention(p: Tensor, params: SpatialAttentionParams) -> Tensor:
    """Per-position gate of shape 1 x H x W from channel-pooled maps."""
    if p.data.ndim != 3:
        raise DimensionError("spatial_attention expects a C x H x W map")
    pooled = ad.concat_channels([ad.pool_channelwise(p, "avg"), ad.pool_channelwise(p, "max")])
    conv = ad.conv2d(pooled, params.kernel, stride=1, padding=SPATIAL_KERNEL_SIZE // 2)
    return ad.sigmoid(conv)


def cbam_forward(
    p: Tensor,
    params: CbamParams,
    sigmoid_avg_only: bool = False,
    bypass: bool = False,
) -> Tensor:
    """Apply the channel gate, then the spatial gate, to a feature map.

    ``bypass`` returns the input unchanged (identity attention), used to
    compare against a model built without the block.
    """
    if bypass:
        return p
    refined = ad.mul(p, channel_attention(p, params.channel, sigmoid_avg_only))
    return ad.mul(refined, spatial_attention(refined, params.spatial))


def cbam_param_count(channels: int, ratio: int) -> int:
    """Number of trainable scalars the block adds for a given width."""
    hidden = channels // ratio
    return 2 * channels * hidden + 2 * SPATIAL_KERNEL_SIZE * SPATIAL_KERNEL_SIZE
