"""
Geometry transformer: a shared ViT encoder, two cross-attending decoders (one per view),
and two multi-level fusion heads regressing point maps (left camera frame) plus confidence.

*   Network: :py:class:`GeometryTransformer` (``encode``, ``decode``, ``point_head``).
*   Losses: :py:func:`normalize_scale`, :py:func:`loss_reg`, :py:func:`loss_conf`.
*   Training: :py:func:`train_geo`, checkpoints: :py:func:`save_geo`, :py:func:`load_geo`.
*   Tools: :py:func:`evaluate_geo`, :py:func:`export_pointcloud`, :py:func:`bench`.

Confidence is parameterised as ``C = 1 + exp(logit)`` such that ``C > 1``.
"""
from __future__ import annotations

import hashlib
import json
import os
import random
import time
from dataclasses import asdict
from dataclasses import dataclass
from typing import Callable
from typing import NamedTuple

import numpy as np
import plyfile
import torch
import torch.nn.functional as F
import tqdm
from numpy.typing import ArrayLike
from torch import nn

from . import scenegen

CHECKPOINT_FORMAT = 1
PLY_VERTEX = [("x", "f4"), ("y", "f4"), ("z", "f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")]


class DivergenceError(RuntimeError):
    """
    Non-finite training loss. The last finite state was written to ``checkpoint``.
    """

    def __init__(self, message: str, checkpoint: str = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class GeoConfig:
    """
    Architecture of the geometry transformer.

    :param image_size: ``(height, width)`` of the input images [px].
    :param patch_size: Edge of the square patches [px].
    :param enc_depth: Number of encoder blocks.
    :param enc_width: Encoder token width.
    :param enc_heads: Encoder attention heads.
    :param dec_depth: Number of decoder blocks (per view).
    :param dec_width: Decoder token width.
    :param dec_heads: Decoder attention heads.
    :param pyramid_taps: Four decoder layers (1-based) whose output forms the latent pyramid.
    :param alpha: Weight of the confidence regulariser.
    :param mlp_ratio: Hidden width of the block perceptrons relative to the token width.
    :param head_width: Channels of the fusion heads.
    """

    image_size: tuple[int, int] = (96, 96)
    patch_size: int = 8
    enc_depth: int = 6
    enc_width: int = 192
    enc_heads: int = 3
    dec_depth: int = 6
    dec_width: int = 192
    dec_heads: int = 3
    pyramid_taps: tuple[int, int, int, int] = (2, 3, 4, 6)
    alpha: float = 0.2
    mlp_ratio: float = 4.0
    head_width: int = 64

    def __post_init__(self):
        self.image_size = tuple(int(i) for i in self.image_size)
        self.pyramid_taps = tuple(int(i) for i in self.pyramid_taps)
        h, w = self.image_size

        if h % self.patch_size != 0 or w % self.patch_size != 0:
            raise ValueError(f"Image size {self.image_size} not divisible by patch size {self.patch_size}")
        if len(self.pyramid_taps) != 4:
            raise ValueError("Exactly four pyramid taps are required")
        if any(b <= a for a, b in zip(self.pyramid_taps[:-1], self.pyramid_taps[1:])):
            raise ValueError("Pyramid taps must be strictly increasing")
        if self.pyramid_taps[0] < 1 or self.pyramid_taps[-1] != self.dec_depth:
            raise ValueError("Pyramid taps must lie in [1, dec_depth] and end at dec_depth")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.enc_width % self.enc_heads != 0 or self.dec_width % self.dec_heads != 0:
            raise ValueError("Token widths must be divisible by the number of heads")

    @property
    def grid(self) -> tuple[int, int]:
        """
        Token grid ``(rows, columns)`` of one view.
        """
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]


@dataclass
class GeoTrainConfig:
    """
    Optimisation of the geometry transformer.

    :param epochs: Number of passes over the data.
    :param batch_size: Samples per step.
    :param lr: Peak learning rate (cosine decayed to zero).
    :param weight_decay: Decoupled weight decay.
    :param num_workers: Data-loading processes.
    :param device: ``"cpu"``, ``"cuda"``, or ``"auto"``.
    """

    epochs: int = 100
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 0.05
    num_workers: int = 0
    device: str = "auto"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.lr > 0 or self.weight_decay < 0 or self.num_workers < 0:
            raise ValueError("Invalid optimiser settings")


@dataclass
class LatentPyramid:
    """
    Decoder tokens tapped at four layers.

    :param levels: Four tensors ``(batch, 2, tokens, width)`` (view 0 = left, 1 = right).
    :param grid: Token grid ``(rows, columns)`` of one view.
    """

    levels: list[torch.Tensor]
    grid: tuple[int, int]

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ValueError(f"A latent pyramid has 4 levels, not {len(self.levels)}")
        if len({tuple(level.shape) for level in self.levels}) != 1:
            raise ValueError("All pyramid levels must have the same shape")


@dataclass
class PointPrediction:
    """
    :param points: ``(batch, 2, height, width, 3)`` points in the left camera frame.
    :param confidence: ``(batch, 2, height, width)``, at least 1.
    """

    points: torch.Tensor
    confidence: torch.Tensor


def seed_everything(seed: int, deterministic: bool = False):
    """
    Seed all random number generators, optionally restrict torch to deterministic algorithms.
    """
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)

    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False


def resolve_device(device: str) -> torch.device:
    if device == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(device)


def images_to_tensor(images: ArrayLike) -> torch.Tensor:
    """
    Batch of 8-bit RGB images ``(batch, height, width, 3)`` as float ``(batch, 3, height, width)``
    in [-1, 1].
    """
    images = torch.as_tensor(np.asarray(images))
    return images.permute(0, 3, 1, 2).float() / 127.5 - 1.0


class Attention(nn.Module):
    """
    Multi-head attention of ``query`` tokens to ``context`` tokens.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, n, c = query.shape
        m = context.shape[1]
        h = self.heads
        q = self.wq(query).reshape(b, n, h, c // h).transpose(1, 2)
        k = self.wk(context).reshape(b, m, h, c // h).transpose(1, 2)
        v = self.wv(context).reshape(b, m, h, c // h).transpose(1, 2)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(b, n, c))


class Mlp(nn.Sequential):
    def __init__(self, dim: int, ratio: float, dropout: float = 0.0):
        hidden = max(1, int(dim * ratio))
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(dropout), nn.Linear(hidden, dim))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm1(x)
        x = x + self.attn(y, y)
        return x + self.mlp(self.norm2(x))


class DecoderBlock(nn.Module):
    """
    Self-attention within a view, cross-attention to the other view, perceptron.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.norm_other = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, other: torch.Tensor) -> torch.Tensor:
        y = self.norm1(x)
        x = x + self.self_attn(y, y)
        x = x + self.cross_attn(self.norm2(x), self.norm_other(other))
        return x + self.mlp(self.norm3(x))


class RefineUnit(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(F.gelu(self.conv1(F.gelu(x))))


class FusionHead(nn.Module):
    """
    Simplified dense-prediction head.
    Levels 1-4 are projected and resampled to 4x, 2x, 1x, 1x the token grid,
    then fused coarse-to-fine by upsample-and-sum with convolutional refinement.
    Output: per-pixel 3-vector + confidence logit.
    """

    def __init__(self, dim: int, channels: int, image_size: tuple[int, int]):
        super().__init__()
        self.image_size = image_size
        self.project = nn.ModuleList([nn.Conv2d(dim, channels, 1) for _ in range(4)])
        self.refine = nn.ModuleList([RefineUnit(channels) for _ in range(4)])
        self.out1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.out2 = nn.Conv2d(channels, 4, 3, padding=1)

    def forward(self, levels: list[torch.Tensor], grid: tuple[int, int]) -> torch.Tensor:
        rows, cols = grid
        f = []
        for level, project, scale in zip(levels, self.project, (4, 2, 1, 1)):
            x = level.transpose(1, 2).reshape(level.shape[0], level.shape[2], rows, cols)
            x = project(x)
            if scale > 1:
                x = F.interpolate(x, scale_factor=scale, mode="bilinear", align_corners=False)
            f.append(x)

        x = self.refine[3](f[3])
        x = self.refine[2](x + f[2])
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.refine[1](x + f[1])
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.refine[0](x + f[0])
        x = F.interpolate(x, size=self.image_size, mode="bilinear", align_corners=False)
        return self.out2(F.gelu(self.out1(x)))


class GeometryTransformer(nn.Module):
    """
    Stereo point-map regressor.

    :param config: The architecture.
    """

    def __init__(self, config: GeoConfig = None):
        super().__init__()
        self.config = GeoConfig() if config is None else config
        c = self.config

        self.patch_embed = nn.Conv2d(3, c.enc_width, c.patch_size, stride=c.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, c.num_patches, c.enc_width))
        self.encoder = nn.ModuleList([EncoderBlock(c.enc_width, c.enc_heads, c.mlp_ratio) for _ in range(c.enc_depth)])
        self.enc_norm = nn.LayerNorm(c.enc_width)
        self.decoder_embed = nn.Linear(c.enc_width, c.dec_width)
        self.decoders = nn.ModuleList(
            [
                nn.ModuleList([DecoderBlock(c.dec_width, c.dec_heads, c.mlp_ratio) for _ in range(c.dec_depth)])
                for _ in range(2)
            ]
        )
        self.heads = nn.ModuleList([FusionHead(c.dec_width, c.head_width, c.image_size) for _ in range(2)])

        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module: nn.Module):
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, std=0.02)
            nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

    def encode(self, left: torch.Tensor, right: torch.Tensor) -> torch.Tensor:
        """
        Shared encoder applied to both views.

        :param left: Left images ``(batch, 3, height, width)``.
        :param right: Right images ``(batch, 3, height, width)``.
        :return: Tokens ``(batch, 2, tokens, enc_width)``.
        """
        expected = (3, *self.config.image_size)

        for image in [left, right]:
            if tuple(image.shape[1:]) != expected:
                raise ValueError(f"Expected images of shape (batch, {expected}), got {tuple(image.shape)}")

        b = left.shape[0]
        x = self.patch_embed(torch.cat((left, right), dim=0)).flatten(2).transpose(1, 2)
        x = x + self.pos_embed
        for block in self.encoder:
            x = block(x)
        x = self.enc_norm(x)
        return torch.stack((x[:b], x[b:]), dim=1)

    def decode(self, tokens: torch.Tensor) -> LatentPyramid:
        """
        Cross-attending decoders; every block of a view attends to the other view's previous layer.

        :param tokens: Encoder output ``(batch, 2, tokens, enc_width)``.
        :return: Tokens of the four tapped layers.
        """
        x = self.decoder_embed(tokens[:, 0])
        y = self.decoder_embed(tokens[:, 1])
        levels = []

        for layer, (bx, by) in enumerate(zip(*self.decoders), start=1):
            x, y = bx(x, y), by(y, x)
            if layer in self.config.pyramid_taps:
                levels.append(torch.stack((x, y), dim=1))

        return LatentPyramid(levels, self.config.grid)

    def point_head(self, pyramid: LatentPyramid) -> PointPrediction:
        """
        Fuse the pyramid into per-pixel points and confidence, one head per view.
        """
        points = []
        confidence = []

        for view, head in enumerate(self.heads):
            out = head([level[:, view] for level in pyramid.levels], pyramid.grid)
            points.append(out[:, :3].permute(0, 2, 3, 1))
            confidence.append(1.0 + torch.exp(out[:, 3]))

        return PointPrediction(torch.stack(points, dim=1), torch.stack(confidence, dim=1))

    def forward(self, left: torch.Tensor, right: torch.Tensor) -> tuple[PointPrediction, LatentPyramid]:
        pyramid = self.decode(self.encode(left, right))
        return self.point_head(pyramid), pyramid

    def latent(self, left: torch.Tensor, right: torch.Tensor) -> LatentPyramid:
        """
        Only the latent pyramid (no heads).
        """
        return self.decode(self.encode(left, right))

    @torch.no_grad()
    def predict(self, left: ArrayLike, right: ArrayLike) -> tuple[np.ndarray, np.ndarray]:
        """
        Inference on 8-bit images.

        :param left: ``(batch, height, width, 3)`` uint8.
        :param right: ``(batch, height, width, 3)`` uint8.
        :return: Points ``(batch, 2, height, width, 3)``, confidence ``(batch, 2, height, width)``.
        """
        was_training = self.training
        self.eval()
        p = next(self.parameters())
        prediction, _ = self(
            images_to_tensor(left).to(device=p.device, dtype=p.dtype),
            images_to_tensor(right).to(device=p.device, dtype=p.dtype),
        )
        self.train(was_training)
        return prediction.points.cpu().numpy(), prediction.confidence.cpu().numpy()


def normalize_scale(points: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """
    Mean distance to the origin of the valid points, per batch item
    (pooling all other dimensions, i.e. both views).

    :param points: ``(batch, ..., 3)``.
    :param valid: ``(batch, ...)``.
    :return: ``(batch,)``.
    """
    valid = valid.to(torch.bool)
    count = valid.flatten(1).sum(dim=1)

    if torch.any(count == 0):
        raise ValueError("Scale normalisation requires at least one valid pixel")

    norm = torch.linalg.vector_norm(torch.where(valid[..., None], points, 0.0), dim=-1)
    return norm.flatten(1).sum(dim=1) / count


class RegressionLoss(NamedTuple):
    """
    :param total: Sum over batch, views, and valid pixels.
    :param mean: ``total`` divided by the number of valid pixels.
    :param per_pixel: Per-pixel loss ``(batch, 2, height, width)``, zero on invalid pixels.
    """

    total: torch.Tensor
    mean: torch.Tensor
    per_pixel: torch.Tensor


def _expand(z: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    return z.reshape(-1, *([1] * (points.dim() - 1)))


def loss_reg(points: torch.Tensor, gt_points: torch.Tensor, valid: torch.Tensor) -> RegressionLoss:
    """
    Scale-normalised regression loss: per valid pixel ``|| X / z - Xgt / zgt ||``
    with ``z``, ``zgt`` from :py:func:`normalize_scale` (computed independently).

    :param points: Predicted points ``(batch, 2, height, width, 3)``.
    :param gt_points: Ground-truth points, same shape.
    :param valid: Ground-truth mask ``(batch, 2, height, width)``.
    :return: The loss.
    """
    valid = valid.to(torch.bool)
    z = _expand(normalize_scale(points, valid), points)
    zgt = _expand(normalize_scale(gt_points, valid), gt_points)
    diff = torch.where(valid[..., None], points / z - gt_points.to(points.dtype) / zgt, 0.0)
    per_pixel = torch.linalg.vector_norm(diff, dim=-1)
    total = per_pixel.sum()
    return RegressionLoss(total, total / valid.sum(), per_pixel)


def loss_conf(
    points: torch.Tensor,
    confidence: torch.Tensor,
    gt_points: torch.Tensor,
    valid: torch.Tensor,
    alpha: float,
    reduction: str = "sum",
) -> torch.Tensor:
    """
    Confidence-aware objective, summed over valid pixels::

        C * L_reg - alpha * log(C)

    :param points: Predicted points ``(batch, 2, height, width, 3)``.
    :param confidence: Predicted confidence ``(batch, 2, height, width)``.
    :param gt_points: Ground-truth points.
    :param valid: Ground-truth mask.
    :param alpha: Weight of the regulariser.
    :param reduction: ``"sum"`` or ``"mean"`` (divided by the number of valid pixels).
    :return: Scalar.
    """
    valid = valid.to(torch.bool)
    reg = loss_reg(points, gt_points, valid)
    terms = confidence * reg.per_pixel - alpha * torch.log(confidence)
    total = torch.where(valid, terms, 0.0).sum()

    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / valid.sum()
    raise ValueError(f'Unknown reduction "{reduction}"')


class GeoDataset(torch.utils.data.Dataset):
    """
    Samples of one or more dataset directories.

    :param paths: Sample directories, see :py:func:`EndoAct.scenegen.list_samples`.
    """

    def __init__(self, paths: list[str]):
        self.paths = list(paths)

    @classmethod
    def from_directories(cls, directories: list[str]) -> GeoDataset:
        paths = []
        for directory in directories:
            paths += scenegen.list_samples(directory)
        if len(paths) == 0:
            raise ValueError(f"No samples found in {directories}")
        return cls(paths)

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, index: int) -> dict:
        sample = scenegen.read_sample(self.paths[index])
        return sample_to_batch(sample)


def sample_to_batch(sample: scenegen.Sample) -> dict:
    """
    Tensors of one sample (no batch dimension).
    """
    return dict(
        left=images_to_tensor(sample.left[None])[0],
        right=images_to_tensor(sample.right[None])[0],
        points=torch.from_numpy(np.stack((sample.pointmap_left.points, sample.pointmap_right.points))),
        valid=torch.from_numpy(np.stack((sample.pointmap_left.valid, sample.pointmap_right.valid))),
    )


def fingerprint(model: GeometryTransformer) -> str:
    """
    SHA-256 of the configuration and all parameters and buffers.
    """
    digest = hashlib.sha256()
    digest.update(json.dumps(asdict(model.config), sort_keys=True).encode())
    for key, value in sorted(model.state_dict().items()):
        digest.update(key.encode())
        digest.update(value.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_geo(path: str, model: GeometryTransformer, seed: int = 0, provenance: dict = None):
    """
    Write a checkpoint (format version, configuration, seed, parameters, provenance).
    """
    dirname = os.path.dirname(path)
    if len(dirname) > 0:
        os.makedirs(dirname, exist_ok=True)

    torch.save(
        dict(
            kind="geotrans",
            format_version=CHECKPOINT_FORMAT,
            config=asdict(model.config),
            seed=int(seed),
            state_dict={key: value.detach().cpu() for key, value in model.state_dict().items()},
            fingerprint=fingerprint(model),
            provenance={} if provenance is None else provenance,
        ),
        path,
    )


def load_geo(path: str, device: str = "cpu") -> tuple[GeometryTransformer, dict]:
    """
    Read a checkpoint written by :py:func:`save_geo`.

    :param path: The checkpoint.
    :param device: Device to load to.
    :return: ``(model in eval mode, checkpoint metadata)``.
    """
    if not os.path.isfile(path):
        raise OSError(f'"{path}" does not exist')

    data = torch.load(path, map_location="cpu", weights_only=True)

    if not isinstance(data, dict) or data.get("kind") != "geotrans":
        raise ValueError(f'"{path}" is not a geometry checkpoint')
    if data["format_version"] != CHECKPOINT_FORMAT:
        raise ValueError(f'"{path}" has unsupported format version {data["format_version"]}')

    model = GeometryTransformer(GeoConfig(**data["config"]))
    model.load_state_dict(data["state_dict"])
    model.to(resolve_device(device)).eval()
    meta = {key: value for key, value in data.items() if key != "state_dict"}
    return model, meta


def train_geo(
    dataset: torch.utils.data.Dataset,
    directory: str,
    config: GeoConfig = None,
    train: GeoTrainConfig = None,
    seed: int = 0,
    deterministic: bool = False,
    provenance: dict = None,
    held_out: list[scenegen.Sample] = None,
    silent: bool = False,
) -> GeometryTransformer:
    """
    Train a geometry transformer from random initialisation by minimising the per-valid-pixel
    mean of :py:func:`loss_conf` with AdamW and a cosine-decayed learning rate.

    Writes to ``directory``:

    *   ``geo.pt``: checkpoint (updated every epoch).
    *   ``metrics.jsonl``: one line per step
        ``{"step", "epoch", "loss_conf", "loss_reg_mean", "lr"}``.
    *   ``eval.jsonl``: per epoch :py:func:`evaluate_geo` on ``held_out`` (if specified).

    :param dataset: Training samples, see :py:class:`GeoDataset`.
    :param directory: Output directory.
    :param config: Architecture.
    :param train: Optimisation settings.
    :param seed: Seed of initialisation and data order.
    :param deterministic: Use deterministic algorithms only.
    :param provenance: Stored in the checkpoint.
    :param held_out: Samples to evaluate after every epoch.
    :param silent: Hide progress bar.
    :return: The trained model.
    """
    config = GeoConfig() if config is None else config
    train = GeoTrainConfig() if train is None else train
    device = resolve_device(train.device)
    seed_everything(seed, deterministic)

    model = GeometryTransformer(config).to(device)
    generator = torch.Generator()
    generator.manual_seed(seed)
    loader = torch.utils.data.DataLoader(
        dataset,
        batch_size=train.batch_size,
        shuffle=True,
        num_workers=train.num_workers,
        generator=generator,
        drop_last=False,
    )

    optimizer = torch.optim.AdamW(model.parameters(), lr=train.lr, weight_decay=train.weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=train.epochs * len(loader))
    checkpoint = os.path.join(directory, "geo.pt")
    os.makedirs(directory, exist_ok=True)
    step = 0

    with open(os.path.join(directory, "metrics.jsonl"), "w") as metrics:
        for epoch in tqdm.tqdm(range(train.epochs), disable=silent, desc="train-geo"):
            model.train()
            for batch in loader:
                batch = {key: value.to(device) for key, value in batch.items()}
                prediction, _ = model(batch["left"], batch["right"])
                loss = loss_conf(
                    prediction.points,
                    prediction.confidence,
                    batch["points"],
                    batch["valid"],
                    config.alpha,
                    reduction="mean",
                )

                if not torch.isfinite(loss):
                    save_geo(checkpoint, model, seed, provenance)
                    raise DivergenceError(f"Non-finite loss at step {step} (epoch {epoch})", checkpoint)

                with torch.no_grad():
                    reg = loss_reg(prediction.points, batch["points"], batch["valid"])

                lr = optimizer.param_groups[0]["lr"]
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                scheduler.step()

                line = dict(
                    step=step,
                    epoch=epoch,
                    loss_conf=float(loss),
                    loss_reg_mean=float(reg.mean),
                    lr=float(lr),
                )
                metrics.write(json.dumps(line) + "\n")
                step += 1

            metrics.flush()
            save_geo(checkpoint, model, seed, provenance)

            if held_out:
                with open(os.path.join(directory, "eval.jsonl"), "a") as file:
                    file.write(json.dumps(dict(epoch=epoch, **evaluate_geo(model, held_out))) + "\n")

    return model.eval()


def scale_aligned_error(points: ArrayLike, gt_points: ArrayLike, valid: ArrayLike) -> np.ndarray:
    """
    Per-pixel error after aligning the prediction to the ground truth by the
    least-squares optimal scale factor.

    :param points: Predicted points ``(..., 3)``.
    :param gt_points: Ground-truth points ``(..., 3)``.
    :param valid: Ground-truth mask ``(...)``.
    :return: Errors of the valid pixels.
    """
    p = np.asarray(points, dtype=float)[np.asarray(valid)]
    g = np.asarray(gt_points, dtype=float)[np.asarray(valid)]
    scale = np.sum(p * g) / max(np.sum(p * p), 1e-30)
    return np.linalg.norm(scale * p - g, axis=-1)


def evaluate_geo(model: GeometryTransformer, samples: list[scenegen.Sample]) -> dict:
    """
    Median scale-aligned point error on held-out samples.

    :param model: The model.
    :param samples: Samples with ground truth.
    :return:
        ``median_error`` (meters, median over samples of the per-sample median),
        ``depth_range`` (meters, median over samples of the valid depth range),
        ``relative_error`` (their ratio).
    """
    errors = []
    ranges = []

    for sample in samples:
        points, _ = model.predict(sample.left[None], sample.right[None])
        gt = np.stack((sample.pointmap_left.points, sample.pointmap_right.points))
        valid = np.stack((sample.pointmap_left.valid, sample.pointmap_right.valid))
        errors.append(np.median(scale_aligned_error(points[0], gt, valid)))
        depth = gt[..., 2][valid]
        ranges.append(np.max(depth) - np.min(depth))

    median_error = float(np.median(errors))
    depth_range = float(np.median(ranges))
    return dict(
        median_error=median_error,
        depth_range=depth_range,
        relative_error=median_error / depth_range if depth_range > 0 else float("inf"),
    )


def export_pointcloud(
    points: ArrayLike,
    confidence: ArrayLike,
    colors: ArrayLike,
    path: str,
    threshold: float = 1.0,
) -> int:
    """
    Write retained points as an ASCII PLY file with per-vertex color.
    Pixels that are non-finite, behind the camera, or below the confidence threshold are omitted.

    :param points: Points ``(..., 3)``.
    :param confidence: Confidence ``(...)``.
    :param colors: 8-bit colors ``(..., 3)`` (the source image).
    :param path: Output file.
    :param threshold: Minimal confidence.
    :return: Number of written vertices.
    """
    keep = scenegen.confidence_filter(points, confidence, threshold)
    xyz = np.asarray(points, dtype=float)[keep]
    rgb = np.asarray(colors, dtype=np.uint8)[keep]

    dirname = os.path.dirname(path)
    if len(dirname) > 0:
        os.makedirs(dirname, exist_ok=True)

    vertex = np.empty(len(xyz), dtype=PLY_VERTEX)
    for i, name in enumerate(["x", "y", "z"]):
        vertex[name] = xyz[:, i]
    for i, name in enumerate(["red", "green", "blue"]):
        vertex[name] = rgb[:, i]

    plyfile.PlyData([plyfile.PlyElement.describe(vertex, "vertex")], text=True).write(path)

    return len(xyz)


def bench(
    model: GeometryTransformer,
    runs: int = 100,
    warmup: int = 3,
    stack: Callable[[np.ndarray, np.ndarray], object] = None,
) -> dict:
    """
    Per-inference latency on a random stereo pair.

    :param model: The geometry transformer (defines the input size).
    :param runs: Number of timed inferences.
    :param warmup: Number of untimed inferences.
    :param stack: Time ``stack(left, right)`` instead of the geometry transformer alone.
    :return: ``runs``, ``timings_ms``, ``mean_ms``, ``median_ms``.
    """
    if runs < 1:
        raise ValueError("runs must be positive")

    h, w = model.config.image_size
    rng = np.random.default_rng(0)
    left = rng.integers(0, 256, size=(1, h, w, 3), dtype=np.uint8)
    right = rng.integers(0, 256, size=(1, h, w, 3), dtype=np.uint8)
    call = model.predict if stack is None else stack
    cuda = next(model.parameters()).is_cuda

    timings = []

    for i in range(warmup + runs):
        tic = time.perf_counter()
        call(left, right)
        if cuda:
            torch.cuda.synchronize()
        if i >= warmup:
            timings.append(1e3 * (time.perf_counter() - tic))

    return dict(
        runs=len(timings),
        timings_ms=timings,
        mean_ms=float(np.mean(timings)),
        median_ms=float(np.median(timings)),
    )
