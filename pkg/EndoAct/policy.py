"""
Endoscope-centric action-chunking policy.

*   :py:class:`Policy`: learned queries cross-attending to spatial tokens + one proprioception
    token, emitting a chunk of ``k`` relative actions (14 values per step).
*   :py:func:`loss_mse`: mean squared error in standardised action space over non-padded steps.
*   :py:class:`EnsembleBuffer`, :py:func:`ensemble`: temporal ensembling of overlapping chunks
    with weights ``exp(-m * age)`` (the newest query has age 0).
*   :py:func:`train_policy`: training with a frozen geometry transformer.
*   :py:class:`Agent`: closed-loop controller (geometry transformer, connector, policy, ensembling).
"""
from __future__ import annotations

import json
import os
import warnings
from collections import deque
from dataclasses import asdict
from dataclasses import dataclass

import numpy as np
import torch
import tqdm
from numpy.typing import ArrayLike
from torch import nn

from . import geom
from . import geotrans
from .connector import Connector
from .connector import ConnectorConfig
from .connector import SpatialTokens

CHECKPOINT_FORMAT = 1
STD_FLOOR = 1e-8

POSE_CHANNELS = [i for i in range(geom.ACTION_SIZE) if i not in (geom.JAW_LEFT, geom.JAW_RIGHT)]
JAW_CHANNELS = [geom.JAW_LEFT, geom.JAW_RIGHT]


class FrozenParameterError(RuntimeError):
    """
    Parameters of the frozen geometry transformer changed during policy training.
    """


class FingerprintError(ValueError):
    """
    Policy checkpoint trained against a different geometry transformer.
    """


@dataclass
class PolicyConfig:
    """
    :param depth: Number of decoder blocks.
    :param width: Token width.
    :param heads: Attention heads.
    :param chunk: Number of predicted future actions ``k`` (= number of queries).
    :param m: Ensembling coefficient.
    :param jaw_max: Maximal jaw angle [rad].
    :param dropout: Dropout in the decoder blocks.
    :param feedforward: Hidden width of the block perceptrons relative to ``width``.
    """

    depth: int = 4
    width: int = 256
    heads: int = 4
    chunk: int = 20
    m: float = 0.1
    jaw_max: float = 1.0
    dropout: float = 0.0
    feedforward: float = 4.0

    def __post_init__(self):
        if self.chunk < 1 or self.depth < 1:
            raise ValueError("chunk and depth must be at least 1")
        if self.m < 0:
            raise ValueError("m must be non-negative")
        if self.width % 2 != 0 or self.width % self.heads != 0:
            raise ValueError("width must be even and divisible by the number of heads")
        if not self.jaw_max > 0 or not 0 <= self.dropout < 1:
            raise ValueError("Invalid jaw_max or dropout")


@dataclass
class PolicyTrainConfig:
    """
    :param epochs: Number of passes over all demonstration steps.
    :param batch_size: Steps per optimisation step.
    :param lr: Peak learning rate (cosine decayed to zero).
    :param weight_decay: Decoupled weight decay.
    :param num_workers: Data-loading processes.
    :param device: ``"cpu"``, ``"cuda"``, or ``"auto"``.
    """

    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-4
    num_workers: int = 0
    device: str = "auto"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.lr > 0 or self.weight_decay < 0 or self.num_workers < 0:
            raise ValueError("Invalid optimiser settings")


def _sinusoid(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """
    ``(n, dim)`` encoding: ``sin, cos, sin, cos, ...`` with geometrically decreasing frequency.
    """
    i = torch.arange(dim, dtype=torch.float64)
    frequency = 1.0 / 10000 ** (2 * torch.div(i, 2, rounding_mode="floor") / dim)
    angle = positions.to(torch.float64)[:, None] * frequency
    return torch.where(i % 2 == 0, torch.sin(angle), torch.cos(angle))


def positional_encoding(rows: int, cols: int, width: int) -> torch.Tensor:
    """
    Fixed 2-D sinusoidal encoding of a (stereo-concatenated) token grid:
    the first half of the channels encodes the row, the second half the column.

    :param rows: Grid rows.
    :param cols: Grid columns (``2 * cols`` of one view for a stereo grid).
    :param width: Channels (even).
    :return: ``(rows * cols, width)``, row-major.
    """
    if width % 2 != 0:
        raise ValueError(f"Positional encoding requires an even width, got {width}")

    half = width // 2
    r, c = torch.meshgrid(torch.arange(rows), torch.arange(cols), indexing="ij")
    ret = torch.cat((_sinusoid(r.flatten(), half), _sinusoid(c.flatten(), half)), dim=1)
    return ret.float()


class PolicyBlock(nn.Module):
    """
    Self-attention over the queries, cross-attention to the memory, perceptron (pre-norm).
    """

    def __init__(self, config: PolicyConfig):
        super().__init__()
        d = config.width
        self.norm1 = nn.LayerNorm(d)
        self.self_attn = geotrans.Attention(d, config.heads)
        self.norm2 = nn.LayerNorm(d)
        self.norm_memory = nn.LayerNorm(d)
        self.cross_attn = geotrans.Attention(d, config.heads)
        self.norm3 = nn.LayerNorm(d)
        self.mlp = geotrans.Mlp(d, config.feedforward, config.dropout)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        y = self.norm1(x)
        x = x + self.dropout(self.self_attn(y, y))
        x = x + self.dropout(self.cross_attn(self.norm2(x), self.norm_memory(memory)))
        return x + self.mlp(self.norm3(x))


class Policy(nn.Module):
    """
    Action-chunking decoder.

    :param config: The architecture.
    :param grid: Stereo-concatenated token grid ``(rows, 2 * cols)``.
    """

    def __init__(self, config: PolicyConfig, grid: tuple[int, int]):
        super().__init__()
        self.config = config
        self.grid = tuple(grid)
        d = config.width

        self.queries = nn.Parameter(torch.zeros(config.chunk, d))
        self.proprio = nn.Linear(geom.PROPRIO_SIZE, d)
        self.proprio_embed = nn.Parameter(torch.zeros(1, d))
        self.blocks = nn.ModuleList([PolicyBlock(config) for _ in range(config.depth)])
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, geom.ACTION_SIZE)

        self.register_buffer("pos", positional_encoding(*self.grid, d))
        self.register_buffer("action_mean", torch.zeros(geom.ACTION_SIZE))
        self.register_buffer("action_std", torch.ones(geom.ACTION_SIZE))
        self.register_buffer("proprio_mean", torch.zeros(geom.PROPRIO_SIZE))
        self.register_buffer("proprio_std", torch.ones(geom.PROPRIO_SIZE))

        nn.init.trunc_normal_(self.queries, std=0.02)
        nn.init.trunc_normal_(self.proprio_embed, std=0.02)

    def set_statistics(self, action_mean, action_std, proprio_mean, proprio_std):
        """
        Store standardisation statistics; standard deviations below a floor are replaced by 1.
        """
        for name, value in zip(
            ["action_mean", "action_std", "proprio_mean", "proprio_std"],
            [action_mean, action_std, proprio_mean, proprio_std],
        ):
            value = torch.as_tensor(np.asarray(value), dtype=getattr(self, name).dtype)
            if name.endswith("std"):
                value = torch.where(value < STD_FLOOR, torch.ones_like(value), value)
            getattr(self, name).copy_(value)

    def forward(self, spatial: SpatialTokens, proprio: torch.Tensor) -> torch.Tensor:
        """
        :param spatial: Connector output.
        :param proprio: Raw proprioception ``(batch, 20)``.
        :return: Action chunk ``(batch, chunk, 14)`` in physical units.
        """
        if spatial.width != self.config.width:
            raise ValueError(f"Token width {spatial.width} does not match policy width {self.config.width}")
        if tuple(spatial.grid) != self.grid:
            raise ValueError(f"Token grid {spatial.grid} does not match policy grid {self.grid}")

        b = proprio.shape[0]
        p = self.proprio((proprio - self.proprio_mean) / self.proprio_std) + self.proprio_embed
        x = self.queries.expand(b, -1, -1)

        for i, block in enumerate(self.blocks):
            memory = torch.cat((spatial.for_block(i) + self.pos, p[:, None]), dim=1)
            x = block(x, memory)

        raw = self.head(self.norm(x))
        pose = raw[..., POSE_CHANNELS] * self.action_std[POSE_CHANNELS] + self.action_mean[POSE_CHANNELS]
        jaw = self.config.jaw_max * torch.sigmoid(raw[..., JAW_CHANNELS])

        ret = torch.empty_like(raw)
        ret[..., POSE_CHANNELS] = pose
        ret[..., JAW_CHANNELS] = jaw
        return ret


def loss_mse(
    predicted: torch.Tensor,
    target: torch.Tensor,
    is_pad: torch.Tensor,
    std: torch.Tensor = None,
) -> torch.Tensor:
    """
    Mean squared error over all channels of the non-padded steps, after standardising
    both chunks per channel (the mean cancels, only ``std`` matters).

    :param predicted: ``(batch, chunk, 14)``.
    :param target: ``(batch, chunk, 14)``.
    :param is_pad: ``(batch, chunk)``, ``True`` for steps past the end of a demonstration.
    :param std: Per-channel standard deviation (default: 1).
    :return: Scalar.
    """
    if predicted.shape != target.shape:
        raise ValueError(f"Shape mismatch {tuple(predicted.shape)} vs {tuple(target.shape)}")

    keep = ~is_pad.to(torch.bool)

    if not torch.any(keep):
        raise ValueError("All target steps are padded")

    diff = predicted - target.to(predicted.dtype)
    if std is not None:
        diff = diff / std
    se = (diff**2).mean(dim=-1)
    return se[keep].mean()


def chunk_target(actions: ArrayLike, t: int, chunk: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Target chunk at time ``t``: the actions ``t, ..., t + chunk - 1`` of a demonstration.
    Steps past the end repeat a zero-delta action with the terminal jaw angles and are padded.

    :param actions: ``(T, 14)`` relative actions.
    :param t: Time step.
    :param chunk: Length of the chunk.
    :return: ``(chunk, 14)`` target and ``(chunk,)`` padding mask.
    """
    actions = np.asarray(actions, dtype=float)
    n = len(actions)
    terminal = np.zeros(geom.ACTION_SIZE)
    terminal[JAW_CHANNELS] = actions[-1, JAW_CHANNELS]

    stop = min(t + chunk, n)
    target = np.tile(terminal, (chunk, 1))
    target[: stop - t] = actions[t:stop]
    is_pad = np.arange(chunk) >= stop - t
    return target, is_pad


def ensemble_weights(ages: ArrayLike, m: float) -> np.ndarray:
    """
    Normalised weights ``exp(-m * age)``.
    """
    w = np.exp(-m * np.asarray(ages, dtype=float))
    return w / np.sum(w)


class EnsembleBuffer:
    """
    The most recent ``chunk`` policy queries as ``(time issued, chunk)``.

    :param chunk: Length of the chunks (and capacity of the buffer).
    """

    def __init__(self, chunk: int):
        self.chunk = chunk
        self.entries = deque(maxlen=chunk)

    def add(self, t: int, actions: ArrayLike):
        actions = np.asarray(actions, dtype=float)
        if actions.shape != (self.chunk, geom.ACTION_SIZE):
            raise ValueError(f"Expected chunk of shape {(self.chunk, geom.ACTION_SIZE)}, got {actions.shape}")
        if not np.all(np.isfinite(actions)):
            raise ValueError("Chunk contains non-finite values")
        self.entries.append((int(t), actions))

    def reset(self):
        self.entries.clear()

    def __len__(self):
        return len(self.entries)


def ensemble(buffer: EnsembleBuffer, m: float, t: int = None) -> geom.ActionStep:
    """
    Weighted average of the predictions that all buffered chunks make for time ``t``,
    with weight ``exp(-m * age)`` where ``age`` is the time since the chunk was issued.
    The result is clipped to the range of the contributing predictions.

    :param buffer: The buffered chunks.
    :param m: Ensembling coefficient.
    :param t: Current time (default: time of the newest query).
    :return: The action to execute.
    """
    if len(buffer) == 0:
        raise ValueError("Cannot ensemble an empty buffer")

    if t is None:
        t = buffer.entries[-1][0]

    ages = []
    predictions = []

    for issued, actions in buffer.entries:
        age = t - issued
        if 0 <= age < len(actions):
            ages.append(age)
            predictions.append(actions[age])

    if len(predictions) == 0:
        raise ValueError(f"No buffered chunk covers time {t}")

    predictions = np.array(predictions)
    w = ensemble_weights(ages, m)
    ret = np.clip(w @ predictions, predictions.min(axis=0), predictions.max(axis=0))
    return geom.ActionStep.from_vector(ret)


class DemoSteps(torch.utils.data.Dataset):
    """
    All time steps of a list of demonstrations.
    A demonstration provides ``states`` (``T + 1`` measured :py:class:`EndoAct.geom.ArmPoses`)
    and ``frame(t) -> (left, right)`` (8-bit images).
    Relative actions are recomputed from the measured states.

    :param demos: The demonstrations.
    :param chunk: Length of the target chunks.
    """

    def __init__(self, demos: list, chunk: int):
        if len(demos) == 0:
            raise ValueError("No demonstrations")

        self.demos = demos
        self.chunk = chunk
        self.actions = [geom.trajectory_actions(demo.states) for demo in demos]
        self.index = [(i, t) for i, actions in enumerate(self.actions) for t in range(len(actions))]

    def __len__(self):
        return len(self.index)

    def __getitem__(self, index: int) -> dict:
        i, t = self.index[index]
        left, right = self.demos[i].frame(t)
        target, is_pad = chunk_target(self.actions[i], t, self.chunk)
        return dict(
            left=geotrans.images_to_tensor(left[None])[0],
            right=geotrans.images_to_tensor(right[None])[0],
            proprio=torch.from_numpy(geom.proprio_vector(self.demos[i].states[t])).float(),
            target=torch.from_numpy(target).float(),
            is_pad=torch.from_numpy(is_pad),
        )

    def statistics(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """
        Per-channel mean and standard deviation of the actions and of the proprioception.
        """
        actions = np.concatenate(self.actions)
        proprio = np.array([geom.proprio_vector(demo.states[t]) for demo in self.demos for t in range(len(demo.states))])
        return actions.mean(axis=0), actions.std(axis=0), proprio.mean(axis=0), proprio.std(axis=0)


def _snapshot(model: nn.Module) -> dict:
    return {key: value.detach().clone() for key, value in model.state_dict().items()}


def _assert_unchanged(model: nn.Module, snapshot: dict):
    for key, value in model.state_dict().items():
        if not torch.equal(value, snapshot[key]):
            raise FrozenParameterError(f'Frozen geometry parameter "{key}" changed')


def save_policy(
    path: str,
    connector: Connector,
    policy: Policy,
    geo: geotrans.GeometryTransformer,
    seed: int = 0,
    provenance: dict = None,
):
    """
    Write a checkpoint (configurations, standardisation statistics, parameters,
    and the fingerprint of the geometry transformer).
    """
    dirname = os.path.dirname(path)
    if len(dirname) > 0:
        os.makedirs(dirname, exist_ok=True)

    torch.save(
        dict(
            kind="policy",
            format_version=CHECKPOINT_FORMAT,
            policy_config=asdict(policy.config),
            connector_config=asdict(connector.config),
            grid=list(policy.grid),
            in_width=geo.config.dec_width,
            geo_fingerprint=geotrans.fingerprint(geo),
            seed=int(seed),
            connector={key: value.detach().cpu() for key, value in connector.state_dict().items()},
            policy={key: value.detach().cpu() for key, value in policy.state_dict().items()},
            provenance={} if provenance is None else provenance,
        ),
        path,
    )


def load_policy(
    path: str,
    geo: geotrans.GeometryTransformer,
    allow_mismatch: bool = False,
) -> tuple[Connector, Policy, dict]:
    """
    Read a checkpoint written by :py:func:`save_policy`.

    :param path: The checkpoint.
    :param geo: The geometry transformer that the policy will run on.
    :param allow_mismatch: Only warn if ``geo`` differs from the one used in training.
    :return: ``(connector, policy, checkpoint metadata)`` in eval mode.
    """
    if not os.path.isfile(path):
        raise OSError(f'"{path}" does not exist')

    data = torch.load(path, map_location="cpu", weights_only=True)

    if not isinstance(data, dict) or data.get("kind") != "policy":
        raise ValueError(f'"{path}" is not a policy checkpoint')
    if data["format_version"] != CHECKPOINT_FORMAT:
        raise ValueError(f'"{path}" has unsupported format version {data["format_version"]}')

    if geotrans.fingerprint(geo) != data["geo_fingerprint"]:
        message = f'"{path}" was trained against a different geometry transformer'
        if not allow_mismatch:
            raise FingerprintError(message)
        warnings.warn(message, Warning)

    config = PolicyConfig(**data["policy_config"])
    connector = Connector(ConnectorConfig(**data["connector_config"]), data["in_width"], config.width)
    policy = Policy(config, data["grid"])
    connector.load_state_dict(data["connector"])
    policy.load_state_dict(data["policy"])
    device = next(geo.parameters()).device
    meta = {key: value for key, value in data.items() if key not in ["connector", "policy"]}
    return connector.to(device).eval(), policy.to(device).eval(), meta


def train_policy(
    demos: list,
    geo: geotrans.GeometryTransformer,
    directory: str,
    connector_config: ConnectorConfig = None,
    config: PolicyConfig = None,
    train: PolicyTrainConfig = None,
    seed: int = 0,
    deterministic: bool = False,
    provenance: dict = None,
    silent: bool = False,
) -> tuple[Connector, Policy]:
    """
    Train connector and policy on demonstrations; the geometry transformer is frozen
    (evaluation mode, no gradients) and verified to be bitwise unchanged after every epoch.

    Writes to ``directory``:

    *   ``policy.pt``: checkpoint.
    *   ``metrics.jsonl``: one line per step ``{"step", "epoch", "loss_mse", "lr"}``.

    :param demos: Demonstrations, see :py:class:`DemoSteps`.
    :param geo: The (trained) geometry transformer.
    :param directory: Output directory.
    :param connector_config: Connector variant.
    :param config: Policy architecture.
    :param train: Optimisation settings.
    :param seed: Seed of initialisation and data order.
    :param deterministic: Use deterministic algorithms only.
    :param provenance: Stored in the checkpoint.
    :param silent: Hide progress bar.
    :return: The trained connector and policy.
    """
    connector_config = ConnectorConfig() if connector_config is None else connector_config
    config = PolicyConfig() if config is None else config
    train = PolicyTrainConfig() if train is None else train
    device = geotrans.resolve_device(train.device)
    geotrans.seed_everything(seed, deterministic)

    geo = geo.to(device).eval()
    for parameter in geo.parameters():
        parameter.requires_grad_(False)
    snapshot = _snapshot(geo)

    dataset = DemoSteps(demos, config.chunk)
    grid = (geo.config.grid[0], 2 * geo.config.grid[1])
    connector = Connector(connector_config, geo.config.dec_width, config.width).to(device)
    policy = Policy(config, grid).to(device)
    policy.set_statistics(*dataset.statistics())

    generator = torch.Generator()
    generator.manual_seed(seed)
    loader = torch.utils.data.DataLoader(
        dataset,
        batch_size=train.batch_size,
        shuffle=True,
        num_workers=train.num_workers,
        generator=generator,
    )

    parameters = list(connector.parameters()) + list(policy.parameters())
    optimizer = torch.optim.AdamW(parameters, lr=train.lr, weight_decay=train.weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=train.epochs * len(loader))
    os.makedirs(directory, exist_ok=True)
    step = 0

    with open(os.path.join(directory, "metrics.jsonl"), "w") as metrics:
        for epoch in tqdm.tqdm(range(train.epochs), disable=silent, desc="train-policy"):
            connector.train()
            policy.train()
            for batch in loader:
                batch = {key: value.to(device) for key, value in batch.items()}
                with torch.no_grad():
                    pyramid = geo.latent(batch["left"], batch["right"])
                predicted = policy(connector(pyramid), batch["proprio"])
                loss = loss_mse(predicted, batch["target"], batch["is_pad"], policy.action_std)

                lr = optimizer.param_groups[0]["lr"]
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                scheduler.step()

                metrics.write(json.dumps(dict(step=step, epoch=epoch, loss_mse=float(loss), lr=float(lr))) + "\n")
                step += 1

            metrics.flush()
            _assert_unchanged(geo, snapshot)

    save_policy(os.path.join(directory, "policy.pt"), connector, policy, geo, seed, provenance)
    return connector.eval(), policy.eval()


class Agent:
    """
    Closed-loop controller: queries the policy every step and executes the ensembled action.
    Observations provide ``left``, ``right`` (8-bit images) and ``measured``
    (:py:class:`EndoAct.geom.ArmPoses`).

    :param geo: Geometry transformer.
    :param connector: Connector.
    :param policy: Policy.
    """

    def __init__(self, geo: geotrans.GeometryTransformer, connector: Connector, policy: Policy):
        self.geo = geo.eval()
        self.connector = connector.eval()
        self.policy = policy.eval()
        self.buffer = EnsembleBuffer(policy.config.chunk)
        self.t = 0

    def reset(self, seed: int = 0):
        self.buffer.reset()
        self.t = 0

    @torch.no_grad()
    def chunk(self, left: ArrayLike, right: ArrayLike, measured: geom.ArmPoses) -> np.ndarray:
        """
        One policy query.

        :return: ``(chunk, 14)`` actions.
        """
        p = next(self.policy.parameters())
        left = geotrans.images_to_tensor(np.asarray(left)[None]).to(device=p.device, dtype=p.dtype)
        right = geotrans.images_to_tensor(np.asarray(right)[None]).to(device=p.device, dtype=p.dtype)
        proprio = torch.as_tensor(geom.proprio_vector(measured)[None], device=p.device, dtype=p.dtype)
        spatial = self.connector(self.geo.latent(left, right))
        return self.policy(spatial, proprio)[0].cpu().double().numpy()

    def act(self, observation) -> geom.ActionStep:
        self.buffer.add(self.t, self.chunk(observation.left, observation.right, observation.measured))
        ret = ensemble(self.buffer, self.policy.config.m, self.t)
        self.t += 1
        return ret

    def __call__(self, left: ArrayLike, right: ArrayLike) -> np.ndarray:
        """
        Full-stack inference without ensembling (used for benchmarking).
        """
        return self.chunk(left[0], right[0], geom.ArmPoses(geom.Pose(), geom.Pose()))
