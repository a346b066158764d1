"""
Connectors aligning the latent pyramid of the geometry transformer with the policy width.

*   ``msfc``: per-level projection to ``d_low``, concatenation of the four levels along the
    features, perceptron to the policy width.
*   ``lfc``: perceptron on the last level only.
*   ``msc``: one perceptron per level; the policy routes level ``b % 4`` to decoder block ``b``.

The two views are concatenated along the width of the token grid before flattening (row-major),
i.e. row ``r`` holds the left tokens of that row followed by the right tokens.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .geotrans import LatentPyramid

VARIANTS = ("msfc", "lfc", "msc")
NUM_LEVELS = 4


@dataclass
class ConnectorConfig:
    """
    :param variant: ``"msfc"``, ``"lfc"``, or ``"msc"``.
    :param d_low: Width of the per-level projection of ``msfc`` (default: policy width / 4).
    :param hidden: Hidden width of the perceptrons (default: policy width).
    """

    variant: str = "msfc"
    d_low: int = None
    hidden: int = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f'Unknown connector "{self.variant}", choose from {VARIANTS}')
        for value in [self.d_low, self.hidden]:
            if value is not None and value < 1:
                raise ValueError("Connector widths must be positive")


@dataclass
class SpatialTokens:
    """
    :param tokens: One ``(batch, rows * 2 * cols, width)`` tensor (``msfc``, ``lfc``)
        or one per pyramid level (``msc``).
    :param variant: The connector that produced the tokens.
    :param grid: Stereo-concatenated grid ``(rows, 2 * cols)``.
    """

    tokens: list[torch.Tensor]
    variant: str
    grid: tuple[int, int]

    @property
    def width(self) -> int:
        return self.tokens[0].shape[-1]

    def for_block(self, block: int) -> torch.Tensor:
        """
        Tokens that a policy decoder block cross-attends to.
        """
        if self.variant == "msc":
            return self.tokens[msc_level(block)]
        return self.tokens[0]


def msc_level(block: int) -> int:
    """
    Pyramid level consumed by a decoder block under ``msc`` (round-robin).
    """
    return block % NUM_LEVELS


def stereo_tokens(level: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """
    Concatenate the two views along the grid width and flatten row-major.

    :param level: ``(batch, 2, rows * cols, width)``.
    :param grid: ``(rows, cols)`` of one view.
    :return: ``(batch, rows * 2 * cols, width)``.
    """
    b, views, n, d = level.shape
    rows, cols = grid
    x = level.reshape(b, views, rows, cols, d).permute(0, 2, 1, 3, 4)
    return x.reshape(b, rows * views * cols, d)


def _perceptron(width_in: int, hidden: int, width_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(width_in, hidden), nn.GELU(), nn.Linear(hidden, width_out))


class Connector(nn.Module):
    """
    :param config: The variant.
    :param in_width: Width of the pyramid tokens.
    :param width: Policy width.
    """

    def __init__(self, config: ConnectorConfig, in_width: int, width: int):
        super().__init__()
        self.config = config
        self.width = width
        d_low = width // 4 if config.d_low is None else config.d_low
        hidden = width if config.hidden is None else config.hidden

        if config.variant == "msfc":
            self.project = nn.ModuleList([nn.Linear(in_width, d_low) for _ in range(NUM_LEVELS)])
            self.mlp = _perceptron(NUM_LEVELS * d_low, hidden, width)
        elif config.variant == "lfc":
            self.mlp = _perceptron(in_width, hidden, width)
        else:
            self.mlps = nn.ModuleList([_perceptron(in_width, hidden, width) for _ in range(NUM_LEVELS)])

    @staticmethod
    def _levels(pyramid: LatentPyramid) -> list[torch.Tensor]:
        if len(pyramid.levels) != NUM_LEVELS:
            raise ValueError(f"Expected {NUM_LEVELS} pyramid levels, got {len(pyramid.levels)}")
        return [stereo_tokens(level, pyramid.grid) for level in pyramid.levels]

    @staticmethod
    def _grid(pyramid: LatentPyramid) -> tuple[int, int]:
        return pyramid.grid[0], 2 * pyramid.grid[1]

    def msfc(self, pyramid: LatentPyramid) -> SpatialTokens:
        levels = self._levels(pyramid)
        x = torch.cat([project(level) for project, level in zip(self.project, levels)], dim=-1)
        return SpatialTokens([self.mlp(x)], "msfc", self._grid(pyramid))

    def lfc(self, pyramid: LatentPyramid) -> SpatialTokens:
        levels = self._levels(pyramid)
        return SpatialTokens([self.mlp(levels[-1])], "lfc", self._grid(pyramid))

    def msc(self, pyramid: LatentPyramid) -> SpatialTokens:
        levels = self._levels(pyramid)
        tokens = [mlp(level) for mlp, level in zip(self.mlps, levels)]
        return SpatialTokens(tokens, "msc", self._grid(pyramid))

    def forward(self, pyramid: LatentPyramid) -> SpatialTokens:
        return getattr(self, self.config.variant)(pyramid)
