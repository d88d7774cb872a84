"""Backbone layer graphs and the runnable network behind them.

A graph is an ordered list of ``LayerSpec`` entries. Every conv is followed
by its batch-norm; conv weights are the frozen set, BN affines, SA kernels
and the neck BN are the tunable set. The torch module ``DasaNet`` is built
from the graph and addresses its units by layer index, which is also the
naming scheme of weight files (``layer{index}.{param}``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .bn import BnLayerState, DomainBatchNorm
from .sa import SaKernel, SemanticsAdaption

LAYER_KINDS = ("conv", "bn", "pool", "activation", "neck-bn")
PIXEL_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
PIXEL_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class LayerSpec:
    index: int
    kind: str
    out_channels: int
    spatial_meta: dict = field(default_factory=dict)
    frozen: bool = False
    stage: int = 0

    @property
    def in_channels(self) -> int:
        return self.spatial_meta.get("in_channels", self.out_channels)

    @property
    def n_values(self) -> int:
        """Parameter values held by this layer (conv kernel or BN affine pair)."""
        if self.kind == "conv":
            k = self.spatial_meta["kernel"]
            return self.out_channels * self.in_channels * k * k
        if self.kind in ("bn", "neck-bn"):
            return 2 * self.out_channels
        return 0


@dataclass
class ParameterPartition:
    frozen_count: int
    tunable_count: int

    @property
    def total(self) -> int:
        return self.frozen_count + self.tunable_count


@dataclass
class BackboneGraph:
    arch_id: str
    layers: list[LayerSpec]
    feature_dim: int
    sa_placement: frozenset = frozenset()
    sa_kernel_size: int = 5
    input_size: tuple[int, int] = (256, 128)
    net: "DasaNet | None" = field(default=None, repr=False)
    # BN state right after loading, the starting point of the first domain
    base_bn: list[BnLayerState] | None = field(default=None, repr=False)

    def conv_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "conv"]

    def bn_layers(self) -> list[LayerSpec]:
        """Body BN layers in graph order, then the neck BN."""
        return [l for l in self.layers if l.kind == "bn"] + [l for l in self.layers if l.kind == "neck-bn"]

    def sa_layers(self) -> list[LayerSpec]:
        return [l for l in self.conv_layers() if l.index in self.sa_placement]

    def partition(self) -> ParameterPartition:
        frozen = sum(l.n_values for l in self.conv_layers())
        tunable = sum(l.n_values for l in self.bn_layers())
        tunable += sum(l.out_channels for l in self.sa_layers()) * self.sa_kernel_size ** 2
        return ParameterPartition(frozen, tunable)


# ---------------------------------------------------------------- registry

class _Builder:
    def __init__(self):
        self.layers: list[LayerSpec] = []

    def add(self, kind, out_channels, stage=0, **meta) -> int:
        idx = len(self.layers)
        self.layers.append(LayerSpec(idx, kind, out_channels, dict(meta), frozen=(kind == "conv"), stage=stage))
        return idx

    def conv_bn(self, cin, cout, kernel, stride, stage, **meta) -> int:
        idx = self.add("conv", cout, stage, in_channels=cin, kernel=kernel, stride=stride,
                       padding=kernel // 2, **meta)
        self.add("bn", cout, stage)
        return idx


def _tiny_layers() -> tuple[list[LayerSpec], int]:
    b = _Builder()
    cin = 3
    for stage, (cout, stride) in enumerate([(8, 1), (16, 2), (32, 2)], start=1):
        b.conv_bn(cin, cout, 3, stride, stage, role="plain")
        b.add("activation", cout, stage, fn="relu")
        if stage == 1:
            b.add("pool", cout, stage, fn="max", kernel=2, stride=2)
        cin = cout
    b.add("pool", cin, 3, fn="global-avg")
    b.add("neck-bn", cin)
    return b.layers, cin


def _resnet50_layers(last_stride: int = 1) -> tuple[list[LayerSpec], int]:
    b = _Builder()
    b.conv_bn(3, 64, 7, 2, 0, role="stem")
    b.add("activation", 64, 0, fn="relu")
    b.add("pool", 64, 0, fn="max", kernel=3, stride=2)
    cin = 64
    stages = [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, last_stride)]
    for stage, (width, blocks, stride) in enumerate(stages, start=1):
        for blk in range(blocks):
            s = stride if blk == 0 else 1
            tag = (stage, blk)
            b.conv_bn(cin, width, 1, 1, stage, role="conv1", block=tag)
            b.add("activation", width, stage, fn="relu")
            b.conv_bn(width, width, 3, s, stage, role="conv2", block=tag)
            b.add("activation", width, stage, fn="relu")
            b.conv_bn(width, width * 4, 1, 1, stage, role="conv3", block=tag)
            if blk == 0:
                b.conv_bn(cin, width * 4, 1, s, stage, role="downsample", block=tag)
            b.add("activation", width * 4, stage, fn="relu", after="residual-add")
            cin = width * 4
    b.add("pool", cin, 4, fn="global-avg")
    b.add("neck-bn", cin)
    return b.layers, cin


ARCHITECTURES = {
    "tiny": (_tiny_layers, (64, 32)),
    "resnet50": (_resnet50_layers, (256, 128)),
}


def architecture_layers(arch_id: str) -> tuple[list[LayerSpec], int, tuple[int, int]]:
    if arch_id not in ARCHITECTURES:
        raise KeyError(f"unknown architecture {arch_id!r}; registered: {sorted(ARCHITECTURES)}")
    fn, input_size = ARCHITECTURES[arch_id]
    layers, dim = fn()
    return layers, dim, input_size


def describe(arch_id: str, sa_placement="all", kernel_size: int = 5) -> BackboneGraph:
    """Graph metadata only, no tensors. Enough for storage arithmetic."""
    layers, dim, input_size = architecture_layers(arch_id)
    graph = BackboneGraph(arch_id, layers, dim, input_size=input_size)
    graph.sa_placement = resolve_placement(graph, sa_placement)
    graph.sa_kernel_size = kernel_size
    return graph


# ---------------------------------------------------------------- network

class ConvUnit(nn.Module):
    """Frozen conv, optional SA, then the per-domain BN."""

    def __init__(self, spec: LayerSpec):
        super().__init__()
        m = spec.spatial_meta
        self.stride = m["stride"]
        self.padding = m["padding"]
        k = m["kernel"]
        self.weight = nn.Parameter(torch.empty(spec.out_channels, spec.in_channels, k, k), requires_grad=False)
        self.sa: SemanticsAdaption | None = None
        self.bn = DomainBatchNorm(spec.out_channels)

    def forward(self, x):
        x = F.conv2d(x, self.weight, None, self.stride, self.padding)
        if self.sa is not None:
            x = self.sa(x)
        return self.bn(x)


class DasaNet(nn.Module):
    def __init__(self, graph: BackboneGraph):
        super().__init__()
        self.arch_id = graph.arch_id
        self.units = nn.ModuleDict({str(l.index): ConvUnit(l) for l in graph.conv_layers()})
        neck = [l for l in graph.layers if l.kind == "neck-bn"][0]
        self.neck_index = neck.index
        self.neck = DomainBatchNorm(neck.out_channels)
        self.bn_order = [l.index for l in graph.layers if l.kind == "bn"]
        self._plan = self._make_plan(graph)

    @staticmethod
    def _make_plan(graph):
        if graph.arch_id == "tiny":
            return [("unit", l.index) if l.kind == "conv" else (l.spatial_meta.get("fn"), l.index)
                    for l in graph.layers if l.kind in ("conv", "activation", "pool")
                    and l.spatial_meta.get("fn") != "global-avg"]
        blocks: dict = {}
        stem = None
        for l in graph.conv_layers():
            tag = l.spatial_meta.get("block")
            if tag is None:
                stem = l.index
            else:
                blocks.setdefault(tag, {})[l.spatial_meta["role"]] = l.index
        return [("stem", stem)] + [("block", blocks[t]) for t in sorted(blocks)]

    def bn_modules(self) -> list[DomainBatchNorm]:
        by_index = {int(i): u.bn for i, u in self.units.items()}
        # body BN i pairs with conv i - 1
        return [by_index[i - 1] for i in self.bn_order] + [self.neck]

    def sa_modules(self) -> list[tuple[int, SemanticsAdaption]]:
        return [(int(i), u.sa) for i, u in self.units.items() if u.sa is not None]

    def feature_maps(self, x: torch.Tensor) -> torch.Tensor:
        """Activation of the last conv stage, before global pooling."""
        u = self.units
        if self.arch_id == "tiny":
            for op, idx in self._plan:
                if op == "unit":
                    x = u[str(idx)](x)
                elif op == "relu":
                    x = F.relu(x)
                elif op == "max":
                    x = F.max_pool2d(x, 2, 2)
            return x
        for op, arg in self._plan:
            if op == "stem":
                x = F.max_pool2d(F.relu(u[str(arg)](x)), 3, 2, 1)
            else:
                out = F.relu(u[str(arg["conv1"])](x))
                out = F.relu(u[str(arg["conv2"])](out))
                out = u[str(arg["conv3"])](out)
                identity = u[str(arg["downsample"])](x) if "downsample" in arg else x
                x = F.relu(out + identity)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = self.feature_maps(x).mean(dim=(2, 3))
        return self.neck(pooled)

    def conv_parameters(self) -> list[nn.Parameter]:
        return [u.weight for u in self.units.values()]

    def set_conv_trainable(self, trainable: bool) -> None:
        for w in self.conv_parameters():
            w.requires_grad_(trainable)

    def tunable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def domain_state(self) -> tuple[list[BnLayerState], list[SaKernel]]:
        return [m.export() for m in self.bn_modules()], [sa.export() for _, sa in self.sa_modules()]

    def load_domain_state(self, bn_states: list[BnLayerState], sa_kernels: list[SaKernel]) -> None:
        bns, sas = self.bn_modules(), self.sa_modules()
        if len(bn_states) != len(bns) or len(sa_kernels) != len(sas):
            raise ValueError(f"domain state has {len(bn_states)} BN / {len(sa_kernels)} SA entries, "
                             f"network has {len(bns)} / {len(sas)}")
        for m, s in zip(bns, bn_states):
            m.load(s)
        for (_, m), k in zip(sas, sa_kernels):
            m.load(k)


# ---------------------------------------------------------------- weights

def _weight_names(graph: BackboneGraph) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for l in graph.layers:
        if l.kind == "conv":
            k = l.spatial_meta["kernel"]
            shapes[f"layer{l.index}.weight"] = (l.out_channels, l.in_channels, k, k)
        elif l.kind in ("bn", "neck-bn"):
            for p in ("gamma", "beta", "running_mean", "running_var"):
                shapes[f"layer{l.index}.{p}"] = (l.out_channels,)
    return shapes


def backbone_weights(graph: BackboneGraph) -> dict[str, np.ndarray]:
    """Named-array export of conv weights and BN state, the format ``build_and_partition`` loads."""
    out = {}
    for l in graph.conv_layers():
        out[f"layer{l.index}.weight"] = graph.net.units[str(l.index)].weight.detach().numpy().copy()
    bn_idx = [l.index for l in graph.bn_layers()]
    for idx, m in zip(bn_idx, graph.net.bn_modules()):
        s = m.export()
        for p in ("gamma", "beta", "running_mean", "running_var"):
            out[f"layer{idx}.{p}"] = getattr(s, p)
    return out


def save_weights(weights: Mapping[str, np.ndarray], path) -> None:
    np.savez(path, **{k: np.asarray(v, dtype="<f4") for k, v in weights.items()})


def load_weights(path) -> dict[str, np.ndarray]:
    with np.load(Path(path)) as z:
        return {k: z[k] for k in z.files}


def _apply_weights(graph: BackboneGraph, weights: Mapping[str, np.ndarray]) -> None:
    shapes = _weight_names(graph)
    unknown = sorted(set(weights) - set(shapes))
    if unknown:
        raise ValueError(f"weights for {graph.arch_id!r} contain unknown entries: {unknown[:5]}")
    missing = [n for n in shapes if n.endswith(".weight") and n not in weights]
    if missing:
        raise ValueError(f"weights for {graph.arch_id!r} miss conv entries: {missing[:5]}")
    for name, arr in weights.items():
        if tuple(np.shape(arr)) != shapes[name]:
            raise ValueError(f"shape mismatch for {name}: got {tuple(np.shape(arr))}, "
                             f"architecture expects {shapes[name]}")
    net = graph.net
    bn_by_index = dict(zip([l.index for l in graph.bn_layers()], net.bn_modules()))
    with torch.no_grad():
        for name, arr in weights.items():
            layer, param = name.split(".", 1)
            idx = int(layer[len("layer"):])
            t = torch.from_numpy(np.asarray(arr, dtype=np.float32))
            if param == "weight":
                net.units[str(idx)].weight.copy_(t)
            else:
                getattr(bn_by_index[idx], param).copy_(t)


def build_and_partition(arch_id: str, pretrained=None, seed: int = 0) -> tuple[BackboneGraph, ParameterPartition]:
    """Build a graph with its network; conv weights are loaded or seeded, then frozen.

    ``pretrained`` is a name -> array mapping or a path to a ``.npz`` of them.
    """
    layers, dim, input_size = architecture_layers(arch_id)
    graph = BackboneGraph(arch_id, layers, dim, input_size=input_size)
    graph.net = DasaNet(graph)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for l in graph.conv_layers():
            w = graph.net.units[str(l.index)].weight
            fan_out = w.shape[0] * w.shape[2] * w.shape[3]
            w.normal_(0.0, math.sqrt(2.0 / fan_out), generator=gen)
    if pretrained is not None:
        if isinstance(pretrained, (str, Path)):
            pretrained = load_weights(pretrained)
        _apply_weights(graph, pretrained)
    graph.net.set_conv_trainable(False)
    graph.base_bn = [m.export() for m in graph.net.bn_modules()]
    return graph, graph.partition()


def resolve_placement(graph: BackboneGraph, placement) -> frozenset:
    """``"all"``, ``"none"``, ``"stages:2,3,4"``, ``"3,7,11"`` or an iterable of conv indices."""
    convs = graph.conv_layers()
    conv_idx = {l.index for l in convs}
    if placement is None or placement == "none" or placement == "":
        return frozenset()
    if placement == "all":
        return frozenset(conv_idx)
    if isinstance(placement, str):
        if placement.startswith("stages:"):
            body = placement[len("stages:"):]
            if "-" in body:
                lo, hi = (int(s) for s in body.split("-"))
                stages = set(range(lo, hi + 1))
            else:
                stages = {int(s) for s in body.split(",") if s}
            return frozenset(l.index for l in convs if l.stage in stages)
        placement = [int(s) for s in placement.split(",") if s.strip()]
    chosen = frozenset(int(i) for i in placement)
    bad = sorted(chosen - conv_idx)
    if bad:
        raise ValueError(f"SA placement indices {bad} are not conv layers")
    return chosen


def insert_sa(graph: BackboneGraph, placement="all", kernel_size: int = 5) -> BackboneGraph:
    """Attach identity-initialized SA modules after the selected convs (in place)."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    chosen = resolve_placement(graph, placement)
    graph.sa_placement = chosen
    graph.sa_kernel_size = kernel_size
    if graph.net is not None:
        for l in graph.conv_layers():
            unit = graph.net.units[str(l.index)]
            unit.sa = SemanticsAdaption(l.out_channels, kernel_size) if l.index in chosen else None
    return graph


# ---------------------------------------------------------------- features

def to_tensor(images) -> torch.Tensor:
    """(B, H, W, 3) images -> (B, 3, H, W) float32 network input.

    uint8 pixels are scaled to [0, 1] and normalized with the ImageNet
    mean/std; float arrays are taken as already-normalized input.
    """
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected a batch of HxWx3 images, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("empty image batch")
    if arr.dtype == np.uint8:
        x = (arr.astype(np.float32) / 255.0 - PIXEL_MEAN) / PIXEL_STD
    else:
        x = arr.astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


def extract_features(graph: BackboneGraph, images, snapshot=None, mode: str = "eval",
                     batch_size: int = 256) -> np.ndarray:
    """Post-neck features for a batch of images, optionally under a domain snapshot."""
    net = graph.net
    if snapshot is not None:
        if snapshot.arch_id != graph.arch_id:
            raise ValueError(f"snapshot is for {snapshot.arch_id!r}, graph is {graph.arch_id!r}")
        net.load_domain_state(snapshot.bn_states, snapshot.sa_kernels)
    arr = np.asarray(images)
    if arr.ndim == 4 and arr.shape[0] == 0:
        raise ValueError("empty image batch")
    was_training = net.training
    net.train(mode == "train")
    try:
        if mode == "train":
            feats = net(to_tensor(arr))
            out = feats.detach().numpy()
        else:
            with torch.no_grad():
                out = np.concatenate([net(to_tensor(arr[i:i + batch_size])).numpy()
                                      for i in range(0, len(arr), batch_size)])
    finally:
        net.train(was_training)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite features")
    return out
