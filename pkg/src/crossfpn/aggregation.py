"""Cross-layer feature aggregation (CFA).

Squeezes every pyramid level to a channel descriptor, learns one joint
fusion-weight vector through a two-layer gate, rescales each level by its
weight, and concatenates everything at stride 4 into the global feature
map F. Four variants cover the ablation grid:

  A  no reweighting: raw levels are upsampled and concatenated
  B  non-learnable: each level is scaled by the mean of its own descriptor
  C  independent: a per-level two-layer gate computes each level's scalar
  D  collaborative: one gate reads the joint descriptor of all levels
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import CHANNELS, FeaturePyramid
from .errors import ShapeMismatchError
from .nn import Linear, Module

CFA_VARIANTS = ("A", "B", "C", "D")
DESCRIPTOR_DIM = sum(CHANNELS)  # 960
GATE_HIDDEN = 128
NUM_LEVELS = len(CHANNELS)


def squeeze_global(pyramid: FeaturePyramid) -> Tensor:
    """Concatenated per-level global average pools; length 960."""
    if pyramid.channel_tuple() != CHANNELS:
        raise ShapeMismatchError(
            "pyramid channel layout", expected=CHANNELS, got=pyramid.channel_tuple()
        )
    return ad.concat_channels([ad.global_avg_pool(fm.tensor) for fm in pyramid])


class CollaborativeGate(Module):
    """psi = FC2(ReLU(FC1(z))), hidden width 128, no output squashing."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(DESCRIPTOR_DIM, GATE_HIDDEN, rng)
        self.fc2 = Linear(GATE_HIDDEN, NUM_LEVELS, rng)

    def forward(self, z: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(z)))


class IndependentGates(Module):
    """Per-level two-layer gates, each reading only its own descriptor."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        for n, d in enumerate(CHANNELS):
            hidden = min(d // 4, GATE_HIDDEN)
            setattr(self, f"fc1_{n}", Linear(d, hidden, rng))
            setattr(self, f"fc2_{n}", Linear(hidden, 1, rng))

    def forward(self, pyramid: FeaturePyramid) -> Tensor:
        weights = []
        for n, fm in enumerate(pyramid):
            z_n = ad.global_avg_pool(fm.tensor)
            fc1 = getattr(self, f"fc1_{n}")
            fc2 = getattr(self, f"fc2_{n}")
            weights.append(fc2(ad.relu(fc1(z_n))))
        return ad.concat_channels(weights)


def reweight(pyramid: FeaturePyramid, psi: Tensor) -> list[Tensor]:
    """Scale level n by the scalar psi[n]; gradients reach both factors."""
    if psi.size != NUM_LEVELS:
        raise ShapeMismatchError("fusion weight length", expected=NUM_LEVELS, got=psi.size)
    return [
        ad.scale_by_scalar(fm.tensor, ad.index(psi, n)) for n, fm in enumerate(pyramid)
    ]


def aggregate(level_tensors: list[Tensor]) -> Tensor:
    """Upsample every level to the first level's size and concatenate."""
    target_h, target_w = level_tensors[0].shape[1], level_tensors[0].shape[2]
    aligned = [
        t if (t.shape[1], t.shape[2]) == (target_h, target_w)
        else ad.bilinear_upsample(t, target_h, target_w)
        for t in level_tensors
    ]
    return ad.concat_channels(aligned)


class CrossLayerAggregation(Module):
    """Variant-dispatched aggregation; forward returns (F, psi-or-None)."""

    def __init__(self, variant: str, rng: np.random.Generator):
        super().__init__()
        if variant not in CFA_VARIANTS:
            raise ValueError(f"unknown aggregation variant {variant!r}, pick one of {CFA_VARIANTS}")
        self.variant = variant
        if variant == "D":
            self.gate = CollaborativeGate(rng)
        elif variant == "C":
            self.gates = IndependentGates(rng)

    def forward(self, pyramid: FeaturePyramid):
        if self.variant == "A":
            return aggregate([fm.tensor for fm in pyramid]), None
        if self.variant == "B":
            weights = []
            for fm in pyramid:
                z_n = ad.global_avg_pool(fm.tensor)
                mean = ad.scale_by_scalar(ad.tensor_sum(z_n), Tensor(1.0 / fm.channels))
                weights.append(mean)
            psi = ad.concat_channels([ad.scale_by_scalar(Tensor(np.ones(1)), w) for w in weights])
        elif self.variant == "C":
            psi = self.gates(pyramid)
        else:
            psi = self.gate(squeeze_global(pyramid))
        return aggregate(reweight(pyramid, psi)), psi
