"""Multi-resolution parallel backbone with cross-scale fusion.

Four stages of parallel convolutional streams: stage i carries i branches,
branch j running at 1/2^(j-1) of the stage-1 resolution with width
C_j = base_width * 2^(j-1). After each multi-branch stage the branches
exchange information all-to-all: a high-to-low transform chains one
stride-2 3x3 convolution per scale gap, a low-to-high transform bilinearly
upsamples and adjusts channels with a 1x1 convolution. The classification
head merges the four streams by a downsample-and-add cascade to the
lowest resolution, widens it with a 1x1 convolution, optionally refines it
with the attention block, then global-average-pools into a dense layer
producing one logit per severity grade.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .attention import CbamParams, ChannelAttentionParams, SpatialAttentionParams, cbam_forward
from .autodiff import BatchNormState, Tensor
from .errors import ConfigError, DimensionError

NUM_STAGES = 4
NUM_GRADES = 5


@dataclass(frozen=True)
class NetworkConfig:
    """Static description of the network; parameter shapes follow from it."""

    base_width: int = 18
    input_size: int = 224
    in_channels: int = 3
    num_classes: int = NUM_GRADES
    blocks_per_stage: tuple[int, int, int, int] = (1, 1, 2, 2)
    head_width: int = 0  # 0 selects 16 * base_width
    cbam: bool = True
    cbam_ratio: int = 16
    cbam_sigmoid_avg_only: bool = False
    dtype: str = "float32"

    def validate(self) -> None:
        if self.base_width < 1:
            raise ConfigError(f"base_width must be >= 1, got {self.base_width}")
        if self.input_size < 64 or self.input_size % 32 != 0:
            raise ConfigError(f"input_size must be a multiple of 32 and >= 64, got {self.input_size}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes != NUM_GRADES:
            raise ConfigError(f"num_classes is fixed at {NUM_GRADES} for KL grading, got {self.num_classes}")
        if len(self.blocks_per_stage) != NUM_STAGES or any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError(f"blocks_per_stage needs {NUM_STAGES} positive entries, got {self.blocks_per_stage}")
        hw = self.resolved_head_width
        if hw < 1:
            raise ConfigError(f"head width must be positive, got {hw}")
        if self.cbam and (hw % self.cbam_ratio != 0 or hw // self.cbam_ratio < 1):
            raise ConfigError(f"head width {hw} not divisible by attention ratio {self.cbam_ratio}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def branch_widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * 2 ** j for j in range(NUM_STAGES))

    @property
    def resolved_head_width(self) -> int:
        return self.head_width if self.head_width else 16 * self.base_width

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass(frozen=True)
class BranchSpec:
    """One parallel stream: stage index, resolution index, width, depth."""

    stage: int
    resolution: int
    width: int
    blocks: int

    def __post_init__(self):
        if not (1 <= self.stage <= NUM_STAGES and 1 <= self.resolution <= self.stage):
            raise ConfigError(f"invalid branch (stage={self.stage}, resolution={self.resolution})")

    @property
    def scale_denominator(self) -> int:
        # Spatial scale of this branch is 1/2^(j-1) of the stage-1 stream.
        return 2 ** (self.resolution - 1)


def stage_branches(config: NetworkConfig, stage: int) -> tuple[BranchSpec, ...]:
    widths = config.branch_widths
    return tuple(
        BranchSpec(stage, j + 1, widths[j], config.blocks_per_stage[stage - 1]) for j in range(stage)
    )


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # Parameter values depend only on (seed, name, shape): variants sharing
    # a name get identical tensors regardless of creation order.
    digest = hashlib.sha256(name.encode()).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, *words]))


class GradingNetwork:
    """Built network: configuration plus all named parameter tensors.

    ``params`` maps hierarchical names to tensors; batchnorm running
    statistics live there too (with ``requires_grad=False``) so a
    checkpoint captures the complete forward state.
    """

    def __init__(self, config: NetworkConfig, seed: int):
        config.validate()
        self.config = config
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self._bn: dict[str, BatchNormState] = {}
        self._build()

    # -- parameter construction -------------------------------------------

    def _he_uniform(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        bound = np.sqrt(6.0 / fan_in)
        rng = _param_rng(self.seed, name)
        data = rng.uniform(-bound, bound, size=shape).astype(self.config.np_dtype)
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _conv(self, name: str, c_out: int, c_in: int, k: int) -> Tensor:
        return self._he_uniform(f"{name}.weight", (c_out, c_in, k, k), c_in * k * k)

    def _bn_state(self, name: str, channels: int) -> BatchNormState:
        state = BatchNormState(channels, dtype=self.config.np_dtype)
        for suffix, tensor in (
            ("scale", state.scale),
            ("shift", state.shift),
            ("running_mean", state.running_mean),
            ("running_var", state.running_var),
        ):
            tensor.name = f"{name}.{suffix}"
            self.params[tensor.name] = tensor
        self._bn[name] = state
        return state

    def _dense(self, name: str, d_out: int, d_in: int, bias: bool) -> tuple[Tensor, Tensor | None]:
        w = self._he_uniform(f"{name}.weight", (d_out, d_in), d_in)
        b = None
        if bias:
            b = Tensor(np.zeros(d_out, dtype=self.config.np_dtype), requires_grad=True, name=f"{name}.bias")
            self.params[b.name] = b
        return w, b

    def _build(self) -> None:
        cfg = self.config
        widths = cfg.branch_widths
        c1 = widths[0]

        self._conv("stem.conv1", c1, cfg.in_channels, 3)
        self._bn_state("stem.bn1", c1)
        self._conv("stem.conv2", c1, c1, 3)
        self._bn_state("stem.bn2", c1)

        for stage in range(1, NUM_STAGES + 1):
            for spec in stage_branches(cfg, stage):
                base = f"stage{stage}.branch{spec.resolution}"
                for b in range(1, spec.blocks + 1):
                    self._conv(f"{base}.block{b}.conv1", spec.width, spec.width, 3)
                    self._bn_state(f"{base}.block{b}.bn1", spec.width)
                    self._conv(f"{base}.block{b}.conv2", spec.width, spec.width, 3)
                    self._bn_state(f"{base}.block{b}.bn2", spec.width)
            if stage >= 2:
                self._build_fusion(stage)
            if stage < NUM_STAGES:
                # New lower-resolution stream branches off stream `stage`.
                self._conv(f"transition{stage}.branch{stage + 1}.conv", widths[stage], widths[stage - 1], 3)
                self._bn_state(f"transition{stage}.branch{stage + 1}.bn", widths[stage])

        hw = cfg.resolved_head_width
        for t in range(1, NUM_STAGES):
            self._conv(f"head.down{t}.conv", widths[t], widths[t - 1], 3)
            self._bn_state(f"head.down{t}.bn", widths[t])
        self._conv("head.expand.conv", hw, widths[-1], 1)
        self._bn_state("head.expand.bn", hw)

        if cfg.cbam:
            hidden = hw // cfg.cbam_ratio
            fc1 = self._he_uniform("cbam.mlp.fc1.weight", (hidden, hw), hw)
            fc2 = self._he_uniform("cbam.mlp.fc2.weight", (hw, hidden), hidden)
            kernel = self._he_uniform("cbam.spatial.conv.weight", (1, 2, 7, 7), 2 * 7 * 7)
            self.cbam_params: CbamParams | None = CbamParams(
                ChannelAttentionParams(fc1, fc2, cfg.cbam_ratio), SpatialAttentionParams(kernel)
            )
        else:
            self.cbam_params = None

        self._fc_w, self._fc_b = self._dense("head.fc", cfg.num_classes, hw, bias=True)

    def _build_fusion(self, stage: int) -> None:
        widths = self.config.branch_widths
        for j in range(1, stage + 1):  # target branch
            for k in range(1, stage + 1):  # source branch
                if k == j:
                    continue
                base = f"fuse{stage}.to{j}.from{k}"
                if k < j:
                    # downsample chain: one stride-2 conv per scale gap
                    for step in range(1, j - k + 1):
                        c_in = widths[k - 1]
                        c_out = widths[j - 1] if step == j - k else widths[k - 1]
                        self._conv(f"{base}.step{step}.conv", c_out, c_in, 3)
                        self._bn_state(f"{base}.step{step}.bn", c_out)
                else:
                    self._conv(f"{base}.conv", widths[j - 1], widths[k - 1], 1)
                    self._bn_state(f"{base}.bn", widths[j - 1])

    # -- forward ------------------------------------------------------------

    def _block(self, x: Tensor, base: str, training: bool) -> Tensor:
        out = ad.conv2d(x, self.params[f"{base}.conv1.weight"], stride=1, padding=1)
        out = ad.relu(ad.batchnorm2d(out, self._bn[f"{base}.bn1"], training))
        out = ad.conv2d(out, self.params[f"{base}.conv2.weight"], stride=1, padding=1)
        out = ad.batchnorm2d(out, self._bn[f"{base}.bn2"], training)
        return ad.relu(ad.add(out, x))

    def stage_forward(self, features: list[Tensor], stage: int, training: bool) -> list[Tensor]:
        """Run each branch's residual blocks independently (parallel streams)."""
        specs = stage_branches(self.config, stage)
        if len(features) != len(specs):
            raise DimensionError(f"stage {stage} expects {len(specs)} branch maps, got {len(features)}")
        outs = []
        for spec, feat in zip(specs, features):
            if feat.shape[0] != spec.width:
                raise DimensionError(
                    f"stage {stage} branch {spec.resolution}: width {feat.shape[0]} != {spec.width}"
                )
            base = f"stage{stage}.branch{spec.resolution}"
            for b in range(1, spec.blocks + 1):
                feat = self._block(feat, f"{base}.block{b}", training)
            outs.append(feat)
        return outs

    def fuse(self, features: list[Tensor], stage: int, training: bool) -> list[Tensor]:
        """All-to-all cross-resolution exchange after a multi-branch stage."""
        n = len(features)
        if n < 2:
            raise DimensionError("fuse needs at least two branches")
        outs = []
        for j in range(1, n + 1):
            total = features[j - 1]  # identity path
            for k in range(1, n + 1):
                if k == j:
                    continue
                base = f"fuse{stage}.to{j}.from{k}"
                x = features[k - 1]
                if k < j:
                    for step in range(1, j - k + 1):
                        x = ad.conv2d(x, self.params[f"{base}.step{step}.conv.weight"], stride=2, padding=1)
                        x = ad.batchnorm2d(x, self._bn[f"{base}.step{step}.bn"], training)
                        if step < j - k:
                            x = ad.relu(x)
                else:
                    x = ad.bilinear_upsample(x, 2 ** (k - j))
                    x = ad.conv2d(x, self.params[f"{base}.conv.weight"], stride=1, padding=0)
                    x = ad.batchnorm2d(x, self._bn[f"{base}.bn"], training)
                if x.shape != total.shape:
                    raise DimensionError(f"fusion {base} produced {x.shape}, expected {total.shape}")
                total = ad.add(total, x)
            outs.append(ad.relu(total))
        return outs

    def new_branch(self, feature: Tensor, stage: int, training: bool) -> Tensor:
        """Open stream stage+1 from the lowest stream via a stride-2 conv."""
        base = f"transition{stage}.branch{stage + 1}"
        x = ad.conv2d(feature, self.params[f"{base}.conv.weight"], stride=2, padding=1)
        return ad.relu(ad.batchnorm2d(x, self._bn[f"{base}.bn"], training))

    def head_forward(
        self,
        features: list[Tensor],
        training: bool,
        capture: dict[str, Tensor] | None = None,
        cbam_bypass: bool = False,
    ) -> Tensor:
        """Merge the four streams, apply attention, pool, and classify."""
        if len(features) != NUM_STAGES:
            raise DimensionError(f"head expects {NUM_STAGES} branch maps, got {len(features)}")
        y = features[0]
        for t in range(1, NUM_STAGES):
            down = ad.conv2d(y, self.params[f"head.down{t}.conv.weight"], stride=2, padding=1)
            down = ad.batchnorm2d(down, self._bn[f"head.down{t}.bn"], training)
            y = ad.relu(ad.add(down, features[t]))
        y = ad.conv2d(y, self.params["head.expand.conv.weight"], stride=1, padding=0)
        merged = ad.relu(ad.batchnorm2d(y, self._bn["head.expand.bn"], training))
        if capture is not None:
            capture["head.merged"] = merged
        if self.cbam_params is not None:
            refined = cbam_forward(
                merged, self.cbam_params, self.config.cbam_sigmoid_avg_only, bypass=cbam_bypass
            )
            if capture is not None:
                capture["head.post_cbam"] = refined
        else:
            refined = merged
        pooled = ad.flatten(ad.pool_spatial(refined, "avg", global_pool=True))
        return ad.dense(pooled, self._fc_w, self._fc_b)

    def forward(
        self,
        x: Tensor,
        training: bool = False,
        capture: dict[str, Tensor] | None = None,
        cbam_bypass: bool = False,
    ) -> Tensor:
        cfg = self.config
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.shape != expected:
            raise DimensionError(f"input shape {x.shape} != configured {expected}")

        y = ad.conv2d(x, self.params["stem.conv1.weight"], stride=2, padding=1)
        y = ad.relu(ad.batchnorm2d(y, self._bn["stem.bn1"], training))
        y = ad.conv2d(y, self.params["stem.conv2.weight"], stride=2, padding=1)
        y = ad.relu(ad.batchnorm2d(y, self._bn["stem.bn2"], training))
        if capture is not None:
            capture["stem.out"] = y

        feats = [y]
        for stage in range(1, NUM_STAGES + 1):
            feats = self.stage_forward(feats, stage, training)
            if capture is not None:
                for j, f in enumerate(feats, start=1):
                    capture[f"stage{stage}.branch{j}.out"] = f
            if stage >= 2:
                feats = self.fuse(feats, stage, training)
                if capture is not None:
                    for j, f in enumerate(feats, start=1):
                        capture[f"fuse{stage}.branch{j}.out"] = f
            if stage < NUM_STAGES:
                feats.append(self.new_branch(feats[-1], stage, training))
        return self.head_forward(feats, training, capture, cbam_bypass)

    # -- bookkeeping ---------------------------------------------------------

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.params.items() if t.requires_grad]

    def param_count(self) -> int:
        return sum(t.data.size for _, t in self.trainable())

    def zero_grads(self) -> None:
        for _, t in self.trainable():
            t.zero_grad()

    def feature_names(self) -> list[str]:
        names = ["stem.out"]
        for stage in range(1, NUM_STAGES + 1):
            names += [f"stage{stage}.branch{j}.out" for j in range(1, stage + 1)]
            if stage >= 2:
                names += [f"fuse{stage}.branch{j}.out" for j in range(1, stage + 1)]
        names.append("head.merged")
        if self.config.cbam:
            names.append("head.post_cbam")
        return names


def build_network(config: NetworkConfig, seed: int) -> GradingNetwork:
    """Deterministically initialize all parameters for the given config."""
    return GradingNetwork(config, seed)


def toy_config(**overrides) -> NetworkConfig:
    """Small configuration for desk-scale experiments and tests."""
    base = NetworkConfig(base_width=8, input_size=64, blocks_per_stage=(1, 1, 2, 2))
    return replace(base, **overrides) if overrides else base
