"""Multi-level feature maps keyed by pyramid level (stride 2**level)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import torch

from gendistill.errors import ShapeError

LEVELS = (2, 3, 4, 5)


@dataclass(frozen=True)
class FeaturePyramid:
    levels: dict[int, torch.Tensor]
    input_resolution: tuple[int, int]

    def __post_init__(self):
        ids = list(self.levels)
        if not ids:
            raise ShapeError("pyramid has no levels")
        if ids != sorted(ids) or ids != list(range(ids[0], ids[0] + len(ids))):
            raise ShapeError(f"levels must be contiguous and ascending, got {ids}")
        if not set(ids) <= set(LEVELS):
            raise ShapeError(f"levels must lie in {LEVELS}, got {ids}")
        H, W = self.input_resolution
        batch = None
        for l, t in self.levels.items():
            if t.dim() != 4:
                raise ShapeError(f"level {l}: expected 4-D tensor, got {tuple(t.shape)}")
            want = (math.ceil(H / 2**l), math.ceil(W / 2**l))
            if tuple(t.shape[-2:]) != want:
                raise ShapeError(f"level {l}: spatial {tuple(t.shape[-2:])} != {want} for input {H}x{W}")
            if batch is None:
                batch = t.shape[0]
            elif t.shape[0] != batch:
                raise ShapeError(f"level {l}: batch {t.shape[0]} != {batch}")

    def __getitem__(self, level: int) -> torch.Tensor:
        return self.levels[level]

    def __iter__(self) -> Iterator[int]:
        return iter(self.levels)

    def __len__(self) -> int:
        return len(self.levels)

    def items(self):
        return self.levels.items()

    @property
    def level_ids(self) -> list[int]:
        return list(self.levels)

    @property
    def batch_size(self) -> int:
        return next(iter(self.levels.values())).shape[0]

    def shapes(self) -> dict[int, tuple[int, ...]]:
        return {l: tuple(t.shape) for l, t in self.levels.items()}

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> FeaturePyramid:
        return FeaturePyramid({l: fn(t) for l, t in self.levels.items()}, self.input_resolution)

    def detach(self) -> FeaturePyramid:
        return self.map(lambda t: t.detach())

    def flip(self) -> FeaturePyramid:
        """Mirror every level horizontally."""
        return self.map(lambda t: t.flip(-1))

    def select(self, index) -> FeaturePyramid:
        """Slice the batch dimension, keeping it (``index`` may be an int)."""
        if isinstance(index, int):
            index = slice(index, index + 1)
        return self.map(lambda t: t[index])

    @staticmethod
    def cat(pyramids: list[FeaturePyramid]) -> FeaturePyramid:
        first = pyramids[0]
        for p in pyramids[1:]:
            if p.level_ids != first.level_ids or p.input_resolution != first.input_resolution:
                raise ShapeError("cannot concatenate pyramids with different layouts")
        return FeaturePyramid(
            {l: torch.cat([p[l] for p in pyramids]) for l in first.level_ids},
            first.input_resolution,
        )

    def allclose(self, other: FeaturePyramid, atol: float = 0.0) -> bool:
        if self.level_ids != other.level_ids:
            return False
        return all(
            self[l].shape == other[l].shape and bool((self[l] - other[l]).abs().max() <= atol)
            for l in self.level_ids
        )
