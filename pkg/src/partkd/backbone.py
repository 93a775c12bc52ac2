"""Spatial-temporal graph convolution feature extractors.

The reference extractor is an ST-GCN stack: each block applies a
partitioned spatial graph convolution followed by a temporal convolution,
with batch-norm/ReLU and a residual path. Bodies are folded into the batch
dimension and averaged after the last block, so the output is a joint-level
feature map of shape (N, C_feat, T_out, V).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .skeleton import SkeletonGraph, normalized_adjacency

DEFAULT_CHANNELS = (64, 64, 64, 64, 128, 128, 128, 256, 256)
DEFAULT_STRIDES = (1, 1, 1, 1, 2, 1, 1, 2, 1)


@dataclass
class BackboneConfig:
    num_blocks: int = 9
    channel_plan: tuple = DEFAULT_CHANNELS
    temporal_kernel: int = 9
    temporal_strides: tuple = DEFAULT_STRIDES
    partition_strategy: str = "spatial"
    input_channels: int = 3
    dropout: float = 0.0
    center_input: bool = True

    def __post_init__(self):
        self.channel_plan = tuple(int(c) for c in self.channel_plan)
        self.temporal_strides = tuple(int(s) for s in self.temporal_strides)

    def validate(self) -> None:
        if len(self.channel_plan) != self.num_blocks:
            raise ConfigError(f"channel_plan has {len(self.channel_plan)} entries for {self.num_blocks} blocks")
        if len(self.temporal_strides) != self.num_blocks:
            raise ConfigError(f"temporal_strides has {len(self.temporal_strides)} entries for {self.num_blocks} blocks")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigError(f"temporal_kernel must be a positive odd integer, got {self.temporal_kernel}")
        if any(s < 1 for s in self.temporal_strides) or any(c < 1 for c in self.channel_plan):
            raise ConfigError("strides and channels must be positive")
        if self.input_channels != 3:
            raise ConfigError("input_channels must be 3")

    @property
    def out_channels(self) -> int:
        return self.channel_plan[-1]

    def output_length(self, frames: int) -> int:
        t = frames
        for s in self.temporal_strides:
            t = math.ceil(t / s)
        return t

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_plan"] = list(self.channel_plan)
        d["temporal_strides"] = list(self.temporal_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def fast(cls) -> "BackboneConfig":
        """Reduced network used by the desk-scale profile."""
        return cls(num_blocks=3, channel_plan=(16, 32, 32), temporal_kernel=9, temporal_strides=(2, 2, 1))


class GraphConv(nn.Module):
    """Partitioned spatial graph convolution: sum_k A_k X W_k."""

    def __init__(self, in_channels, out_channels, K):
        super().__init__()
        self.K = K
        self.conv = nn.Conv2d(in_channels, out_channels * K, kernel_size=1)

    def forward(self, x, A):
        n, _, t, v = x.shape
        x = self.conv(x).view(n, self.K, -1, t, v)
        return torch.einsum("nkctv,kwv->nctw", x, A)


class STGCNBlock(nn.Module):
    def __init__(self, in_channels, out_channels, A_shape, kernel, stride=1, dropout=0.0, residual=True):
        super().__init__()
        K, V, _ = A_shape
        pad = (kernel - 1) // 2
        self.gcn = GraphConv(in_channels, out_channels, K)
        self.tcn = nn.Sequential(
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, (kernel, 1), (stride, 1), (pad, 0)),
            nn.BatchNorm2d(out_channels),
            nn.Dropout(dropout, inplace=True),
        )
        if not residual:
            self.residual = None
        elif in_channels == out_channels and stride == 1:
            self.residual = nn.Identity()
        else:
            self.residual = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, kernel_size=1, stride=(stride, 1)),
                nn.BatchNorm2d(out_channels),
            )
        self.edge_importance = nn.Parameter(torch.ones(K, V, V))
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x, A):
        res = 0 if self.residual is None else self.residual(x)
        x = self.tcn(self.gcn(x, A * self.edge_importance)) + res
        return self.relu(x)


class FeatureExtractor(nn.Module):
    """Interface for joint-level feature extractors.

    ``forward`` maps (N, 3, T, V, M) inputs to (N, out_channels, T_out, V).
    """

    out_channels: int
    graph: SkeletonGraph

    def output_length(self, frames: int) -> int:
        raise NotImplementedError


def center_on_root(x: torch.Tensor, graph: SkeletonGraph) -> torch.Tensor:
    """Subtract the first-frame root position of body 0 from every present joint.

    Only the spatial channels are shifted (confidence stays put on 2D schemas),
    and exactly-zero (absent or occluded) joints stay zero. When every root joint
    is absent in frame 0 the mean of the present joints is used instead.
    """
    d = graph.dims
    spatial = x[:, :d]
    present = (x != 0).any(dim=1, keepdim=True)                  # (N,1,T,V,M)
    first = spatial[:, :, 0, :, 0]                                # (N,d,V)
    first_present = present[:, :, 0, :, 0].to(x.dtype)            # (N,1,V)
    root_idx = list(graph.root)
    w_root = first_present[:, :, root_idx]
    w_all = first_present
    root = (first[:, :, root_idx] * w_root).sum(-1) / w_root.sum(-1).clamp_min(1)
    fallback = (first * w_all).sum(-1) / w_all.sum(-1).clamp_min(1)
    origin = torch.where(w_root.sum(-1) > 0, root, fallback)     # (N,d)
    shifted = (spatial - origin[:, :, None, None, None]) * present.to(x.dtype)
    return torch.cat([shifted, x[:, d:]], dim=1)


class STGCN(FeatureExtractor):
    def __init__(self, cfg: BackboneConfig, graph: SkeletonGraph):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.graph = graph
        A = torch.tensor(normalized_adjacency(graph, cfg.partition_strategy), dtype=torch.float32)
        self.register_buffer("A", A)
        self.data_bn = nn.BatchNorm1d(cfg.input_channels * graph.V)
        blocks = []
        c_in = cfg.input_channels
        for b, (c_out, s) in enumerate(zip(cfg.channel_plan, cfg.temporal_strides)):
            blocks.append(STGCNBlock(c_in, c_out, A.shape, cfg.temporal_kernel, s, cfg.dropout, residual=b > 0))
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = cfg.out_channels

    def output_length(self, frames):
        return self.cfg.output_length(frames)

    def forward(self, x):
        if x.dim() != 5 or x.shape[1] != self.cfg.input_channels or x.shape[3] != self.graph.V:
            raise ShapeError(f"expected input (N, {self.cfg.input_channels}, T, {self.graph.V}, M), got {tuple(x.shape)}")
        if self.cfg.center_input:
            x = center_on_root(x, self.graph)
        N, C, T, V, M = x.shape
        x = x.permute(0, 4, 3, 1, 2).reshape(N * M, V * C, T)
        x = self.data_bn(x)
        x = x.view(N, M, V, C, T).permute(0, 1, 3, 4, 2).reshape(N * M, C, T, V)
        for block in self.blocks:
            x = block(x, self.A)
        _, c, t, v = x.shape
        return x.view(N, M, c, t, v).mean(dim=1)


EXTRACTORS = {"stgcn": STGCN}


def build_feature_extractor(name: str, cfg: BackboneConfig, graph: SkeletonGraph) -> FeatureExtractor:
    try:
        cls = EXTRACTORS[name]
    except KeyError:
        raise ConfigError(f"unknown feature extractor {name!r}; available: {sorted(EXTRACTORS)}") from None
    return cls(cfg, graph)


class ActionModel(nn.Module):
    """Feature extractor + global average pooling + linear classifier."""

    def __init__(self, extractor: FeatureExtractor, num_actions: int):
        super().__init__()
        self.extractor = extractor
        self.fc = nn.Linear(extractor.out_channels, num_actions)
        self.num_actions = num_actions

    @property
    def graph(self) -> SkeletonGraph:
        return self.extractor.graph

    def forward(self, x):
        """Return (logits, joint feature map)."""
        z = self.extractor(x)
        return self.fc(z.mean(dim=(2, 3))), z


def init_params(cfg: BackboneConfig, graph: SkeletonGraph, seed: int, num_actions: int | None = None,
                extractor: str = "stgcn", dtype=torch.float32) -> nn.Module:
    """Deterministically initialize an extractor (or a full classifier when ``num_actions`` is given)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = build_feature_extractor(extractor, cfg, graph)
        if num_actions is not None:
            net = ActionModel(net, num_actions)
    return net.to(dtype)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def forward_features(x, model: nn.Module) -> torch.Tensor:
    """Joint feature map for a batch of model inputs (array or tensor, (N,3,T,V,M))."""
    extractor = model.extractor if isinstance(model, ActionModel) else model
    p = next(extractor.parameters())
    x = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=p.dtype)
    return extractor(x)
