"""Multi-resolution SDS ladder and render upsampling."""
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ContractError

DEFAULT_STAGES = ((512, 2000), (640, 2000), (768, 4000))


@dataclass(frozen=True)
class ResolutionLadder:
    stages: Tuple[Tuple[int, int], ...] = DEFAULT_STAGES

    def __post_init__(self):
        stages = tuple((int(r), int(n)) for r, n in self.stages)
        if not stages:
            raise ContractError("ladder needs at least one stage")
        for (r0, _), (r1, _) in zip(stages, stages[1:]):
            if r1 <= r0:
                raise ContractError("ladder resolutions must be strictly increasing")
        if any(n <= 0 for _, n in stages) or any(r <= 0 for r, _ in stages):
            raise ContractError("ladder resolutions and step counts must be positive")
        object.__setattr__(self, "stages", stages)

    @classmethod
    def from_pairs(cls, pairs: Sequence[Sequence[int]]):
        return cls(tuple(tuple(p) for p in pairs))

    @property
    def total_steps(self):
        return sum(n for _, n in self.stages)

    @property
    def boundaries(self):
        """Half-open [start, end) step range of each stage."""
        ends = np.cumsum([n for _, n in self.stages])
        starts = np.concatenate([[0], ends[:-1]])
        return [(int(s), int(e)) for s, e in zip(starts, ends)]


def stage_for_step(ladder, step):
    if not 0 <= step < ladder.total_steps:
        raise ContractError(f"step {step} outside [0, {ladder.total_steps})")
    for (res, _), (start, end) in zip(ladder.stages, ladder.boundaries):
        if start <= step < end:
            return res
    raise AssertionError("unreachable")


def upsample(image, target):
    """Bilinear resize of an (H, W, C) image to ``target x target``."""
    as_numpy = not torch.is_tensor(image)
    x = torch.as_tensor(image) if as_numpy else image
    if x.ndim != 3:
        raise ContractError(f"expected an (H, W, C) image, got shape {tuple(x.shape)}")
    H, W = x.shape[:2]
    if target < max(H, W):
        raise ContractError(f"upsample target {target} is smaller than source {H}x{W}")
    if (H, W) == (target, target):
        out = x
    else:
        out = F.interpolate(x.permute(2, 0, 1)[None], size=(target, target), mode="bilinear",
                            align_corners=False)[0].permute(1, 2, 0)
        out = out.clamp(0.0, 1.0)
    return out.numpy() if as_numpy else out
