"""
Simulated dual-arm robot above a procedural scene.

The end-effector poses live in the endoscope (left camera) frame.
Actions are executed on the true poses; the robot reports measured poses that are corrupted
by a constant (per episode) rigid error per arm: ``measured = kinematic_error o true``.

Tasks:

*   ``lift``: grasp the peg with the left arm and hold it lifted by ``lift_height``
    for ``hold_steps`` consecutive steps (subtasks ``grasp``, ``lift``).
*   ``dual-touch``: touch the left marker with the left arm, then the right marker with the
    right arm (subtasks ``touch_left``, ``touch_right``, ``whole``).

Demonstration format (one directory per trajectory)::

    meta.json
    states.jsonl
    frames/{t:06d}_left.png
    frames/{t:06d}_right.png
"""
from __future__ import annotations

import copy
import dataclasses
import json
import os
import warnings
from collections import namedtuple
from dataclasses import dataclass
from dataclasses import field

import numpy as np
import tqdm
from numpy.typing import ArrayLike
from PIL import Image
from scipy.spatial.transform import Rotation

from . import geom
from . import scenegen

TASKS = ("lift", "dual-touch")
REGIONS = ("train", "wide")
SUBTASKS = {"lift": ("grasp", "lift"), "dual-touch": ("touch_left", "touch_right", "whole")}
WORKSPACE_MARGIN = 0.002
APPROACH_TOLERANCE = 0.0005
LIFT_MARGIN = 0.002
INITIAL_TILT = 0.3

_TOOL_ALBEDO = np.full(3, 0.75)
_PEG_ALBEDO = np.array([0.2, 0.8, 0.3])
_MARKER_ALBEDO = [np.array([0.2, 0.3, 0.9]), np.array([0.9, 0.85, 0.2])]


class UnreachableTargetError(ValueError):
    """
    Target outside the workspace of the arms.
    """


@dataclass
class SimConfig:
    """
    :param width: Image width [px].
    :param height: Image height [px].
    :param grasp_radius: Maximal tip-target distance to grasp or touch [m].
    :param close_threshold: Jaw angle below which the jaw counts as closed [rad].
    :param jaw_open: Jaw angle of an open jaw [rad].
    :param jaw_max: Maximal jaw angle [rad].
    :param lift_height: Height to lift the peg [m].
    :param hold_steps: Consecutive steps the peg must stay lifted.
    :param horizon: Maximal episode length [steps].
    :param max_translation: Per-step translation limit [m].
    :param max_rotation: Per-step rotation limit [rad].
    :param kin_rotation: Maximal rotational kinematic error [rad].
    :param kin_translation: Maximal translational kinematic error [m].
    :param train_region: Half-edge of the (world xy) target box of the training region [m].
    :param wide_region: Half-edge of the (world xy) target box of the wide region [m].
    :param hover_height: Height above the target from which the expert descends [m].
    :param peg_radius: Radius of the peg [m].
    :param peg_length: Length of the peg [m].
    :param marker_radius: Radius of the markers of ``dual-touch`` [m].
    :param shaft_radius: Radius of the instrument shafts [m].
    :param shaft_length: Length of the visible instrument shafts [m].
    :param jaw_length: Length of the instrument jaws [m].
    :param patch_half_size: Half-edge of the tissue patch [m].
    :param camera_height: Range of heights of the endoscope above the tissue [m].
    :param amplitude: Range of the height-field amplitude [m].
    :param tilt: Maximal tilt of the endoscope [rad].
    """

    width: int = 96
    height: int = 96
    grasp_radius: float = 0.002
    close_threshold: float = 0.2
    jaw_open: float = 0.6
    jaw_max: float = 1.0
    lift_height: float = 0.01
    hold_steps: int = 5
    horizon: int = 120
    max_translation: float = 0.002
    max_rotation: float = 0.05
    kin_rotation: float = float(np.deg2rad(5))
    kin_translation: float = 0.005
    train_region: float = 0.006
    wide_region: float = 0.012
    hover_height: float = 0.008
    peg_radius: float = 0.0015
    peg_length: float = 0.004
    marker_radius: float = 0.001
    shaft_radius: float = 0.0012
    shaft_length: float = 0.03
    jaw_length: float = 0.004
    patch_half_size: float = 0.016
    camera_height: tuple[float, float] = (0.075, 0.095)
    amplitude: tuple[float, float] = (0.0, 0.002)
    tilt: float = 0.05

    def __post_init__(self):
        self.camera_height = tuple(float(i) for i in self.camera_height)
        self.amplitude = tuple(float(i) for i in self.amplitude)

        if not 0 < self.train_region <= self.wide_region:
            raise ValueError("Regions must satisfy 0 < train_region <= wide_region")
        if not 0 <= self.close_threshold < self.jaw_open <= self.jaw_max:
            raise ValueError("Jaw angles must satisfy 0 <= close_threshold < jaw_open <= jaw_max")
        if self.horizon < 1 or self.hold_steps < 1:
            raise ValueError("horizon and hold_steps must be positive")
        if not (self.max_translation > 0 and self.max_rotation > 0):
            raise ValueError("Clamp limits must be positive")
        if self.kin_rotation < 0 or self.kin_translation < 0:
            raise ValueError("Kinematic error bounds must be non-negative")

    def region(self, name: str) -> float:
        if name not in REGIONS:
            raise ValueError(f'Unknown region "{name}", choose from {REGIONS}')
        return {"train": self.train_region, "wide": self.wide_region}[name]

    def scene_config(self, seed: int) -> scenegen.RandomizationConfig:
        return scenegen.RandomizationConfig(
            width=self.width,
            height=self.height,
            tilt=self.tilt,
            camera_height=self.camera_height,
            patch_half_size=self.patch_half_size,
            amplitude=self.amplitude,
            primitive_count=(0, 0),
            seed=seed,
        )


@dataclass(eq=False)
class WorldState:
    """
    Complete simulator state; all points in the left camera frame.

    :param scene: The scene (tissue, light, camera pose).
    :param rig: The stereo rig.
    :param task: ``"lift"`` or ``"dual-touch"``.
    :param true: True arm poses and jaws.
    :param kinematic_error: Constant error ``(left, right)`` of the reported poses.
    :param targets: Grasp point of the peg (``lift``), or the two touch points (``dual-touch``).
    :param peg: Base of the peg (``lift``).
    :param peg_rest: Base of the peg at rest (``lift``).
    :param grasped: Peg held by the left arm.
    :param grasp_offset: Peg base relative to the left tip while grasped.
    :param grasp_tip: Left tip position at the moment of grasping.
    :param hold: Consecutive steps with the peg lifted.
    :param flags: Subtask completion.
    :param t: Time step.
    """

    scene: scenegen.SceneSpec
    rig: geom.StereoRig
    task: str
    true: geom.ArmPoses
    kinematic_error: tuple[geom.Pose, geom.Pose]
    targets: list = field(default_factory=list)
    peg: np.ndarray = None
    peg_rest: np.ndarray = None
    grasped: bool = False
    grasp_offset: np.ndarray = None
    grasp_tip: np.ndarray = None
    hold: int = 0
    flags: dict = field(default_factory=dict)
    t: int = 0

    @property
    def measured(self) -> geom.ArmPoses:
        """
        Poses as reported by the robot.
        """
        return self.true.corrupted(*self.kinematic_error)

    @property
    def up(self) -> np.ndarray:
        """
        World up in the camera frame.
        """
        return self.scene.camera_pose.rotation[2, :].copy()

    @property
    def success(self) -> bool:
        return bool(self.flags.get({"lift": "lift", "dual-touch": "whole"}[self.task], False))

    def copy(self) -> WorldState:
        return copy.deepcopy(self)


Observation = namedtuple("Observation", ["left", "right", "measured"])
"""
What a (non-privileged) controller sees: stereo images and measured poses.
"""


def random_pose_error(rng: np.random.Generator, rotation: float, translation: float) -> geom.Pose:
    """
    Rigid error with uniformly random axes, rotation angle in ``[0, rotation]``,
    and translation norm in ``[0, translation]``.
    """
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    r = Rotation.from_rotvec(axis * rng.uniform(0, rotation)).as_matrix()
    return geom.Pose(r, direction * rng.uniform(0, translation))


def _surface_point(scene: scenegen.SceneSpec, x: float, y: float) -> np.ndarray:
    """
    Tissue point (camera frame) above world ``(x, y)``.
    """
    return scene.camera_pose.inverse().apply([x, y, float(scene.height(x, y))])


def _check_reachable(config: SimConfig, x: float, y: float):
    limit = config.patch_half_size - WORKSPACE_MARGIN
    if abs(x) > limit or abs(y) > limit:
        raise UnreachableTargetError(f"Target ({x:.4f}, {y:.4f}) outside the workspace (|x|, |y| <= {limit:.4f})")


def make_world(
    config: SimConfig,
    task: str,
    seed: int,
    region: str = "train",
    kinematic_error: tuple[geom.Pose, geom.Pose] = None,
) -> WorldState:
    """
    Set up an episode. All randomness derives from ``seed``.

    :param config: Simulator settings.
    :param task: ``"lift"`` or ``"dual-touch"``.
    :param seed: Episode seed.
    :param region: Target region ``"train"`` or ``"wide"``.
    :param kinematic_error: Override the sampled kinematic error ``(left, right)``.
    :return: Initial state.
    """
    if task not in TASKS:
        raise ValueError(f'Unknown task "{task}", choose from {TASKS}')

    half = config.region(region)
    _check_reachable(config, half, half)

    scene, rig = scenegen.sample_scene(config.scene_config(seed), 0)
    rng = np.random.default_rng([seed, 1])

    if kinematic_error is None:
        kinematic_error = tuple(
            random_pose_error(rng, config.kin_rotation, config.kin_translation) for _ in range(2)
        )

    world = WorldState(scene=scene, rig=rig, task=task, true=None, kinematic_error=tuple(kinematic_error))
    up = world.up
    center = _surface_point(scene, 0.0, 0.0)
    start = center + 0.025 * up
    lateral = scene.camera_pose.rotation[0, :]

    world.true = geom.ArmPoses(
        geom.Pose(geom.matrix_from_euler([0, INITIAL_TILT, 0]), start - 0.008 * lateral),
        geom.Pose(geom.matrix_from_euler([0, -INITIAL_TILT, 0]), start + 0.008 * lateral),
        config.jaw_open,
        config.jaw_open,
    )

    if task == "lift":
        x, y = rng.uniform(-half, half, size=2)
        _check_reachable(config, x, y)
        world.peg_rest = _surface_point(scene, x, y)
        world.peg = world.peg_rest.copy()
        world.targets = [world.peg + config.peg_length * up]
    else:
        xl = rng.uniform(-half, 0)
        xr = rng.uniform(0, half)
        yl, yr = rng.uniform(-half, half, size=2)
        for x, y in [(xl, yl), (xr, yr)]:
            _check_reachable(config, x, y)
        world.targets = [
            _surface_point(scene, xl, yl) + config.marker_radius * up,
            _surface_point(scene, xr, yr) + config.marker_radius * up,
        ]

    world.flags = {name: False for name in SUBTASKS[task]}
    return world


def _rotation_angle(euler: ArrayLike) -> float:
    return float(Rotation.from_matrix(geom.matrix_from_euler(euler)).magnitude())


def _clamp_rotation(euler: np.ndarray, limit: float) -> np.ndarray:
    if _rotation_angle(euler) <= limit * (1 + 1e-9):
        return euler
    rotvec = Rotation.from_matrix(geom.matrix_from_euler(euler)).as_rotvec()
    rotvec *= limit / np.linalg.norm(rotvec)
    return geom.euler_from_matrix(Rotation.from_rotvec(rotvec).as_matrix())


def _clamp_translation(delta: np.ndarray, limit: float) -> np.ndarray:
    norm = np.linalg.norm(delta)
    if norm <= limit * (1 + 1e-9):
        return delta
    return delta * (limit / norm)


def clamp_action(action: geom.ActionStep, config: SimConfig) -> geom.ActionStep:
    """
    Limit per-step translation and rotation magnitudes, and the jaw angles to ``[0, jaw_max]``.
    Actions within the limits are returned unchanged.
    """
    return geom.ActionStep(
        _clamp_translation(action.delta_translation_left, config.max_translation),
        _clamp_rotation(action.delta_euler_left, config.max_rotation),
        np.clip(action.jaw_left, 0, config.jaw_max),
        _clamp_translation(action.delta_translation_right, config.max_translation),
        _clamp_rotation(action.delta_euler_right, config.max_rotation),
        np.clip(action.jaw_right, 0, config.jaw_max),
    )


def step(state: WorldState, action: geom.ActionStep, config: SimConfig) -> WorldState:
    """
    Advance the simulator by one (clamped) action, executed on the true poses.

    :param state: Current state (not modified).
    :param action: Relative action in the endoscope frame.
    :param config: Simulator settings.
    :return: Next state.
    """
    if not np.all(np.isfinite(action.as_vector())):
        raise ValueError("Action contains non-finite values")

    ret = state.copy()
    ret.true = geom.apply_action(state.true, clamp_action(action, config))
    ret.t += 1
    left = ret.true.left.translation
    right = ret.true.right.translation

    if ret.task == "lift":
        grasp_point = ret.peg + config.peg_length * ret.up
        if ret.grasped and ret.true.jaw_left >= config.close_threshold:
            ret.grasped = False
            ret.peg = ret.peg - np.dot(ret.peg - ret.peg_rest, ret.up) * ret.up
        elif not ret.grasped and ret.true.jaw_left < config.close_threshold:
            if np.linalg.norm(left - grasp_point) <= config.grasp_radius:
                ret.grasped = True
                ret.grasp_offset = ret.peg - left
                ret.grasp_tip = left.copy()
        if ret.grasped:
            ret.peg = left + ret.grasp_offset
        ret.targets = [ret.peg + config.peg_length * ret.up]
        lifted = ret.grasped and np.dot(ret.peg - ret.peg_rest, ret.up) >= config.lift_height
        ret.hold = ret.hold + 1 if lifted else 0
        ret.flags["grasp"] = ret.flags["grasp"] or ret.grasped
        ret.flags["lift"] = ret.flags["lift"] or ret.hold >= config.hold_steps
    else:
        if np.linalg.norm(left - ret.targets[0]) <= config.grasp_radius:
            ret.flags["touch_left"] = True
        if ret.flags["touch_left"] and np.linalg.norm(right - ret.targets[1]) <= config.grasp_radius:
            ret.flags["touch_right"] = True
        ret.flags["whole"] = ret.flags["touch_left"] and ret.flags["touch_right"]

    return ret


def instrument_primitives(pose: geom.Pose, jaw: float, config: SimConfig) -> list[scenegen.Capsule]:
    """
    Shaft and two jaws of an instrument (camera frame). The tool approaches along its z-axis,
    the tip is at the pose's origin, the jaws open in the tool x-z plane.
    """
    z = pose.rotation[:, 2]
    x = pose.rotation[:, 0]
    tip = pose.translation
    base = tip - config.jaw_length * z
    ret = [scenegen.Capsule(base - config.shaft_length * z, base, config.shaft_radius, _TOOL_ALBEDO)]
    for sign in [-1, 1]:
        end = base + config.jaw_length * (np.cos(jaw / 2) * z + sign * np.sin(jaw / 2) * x)
        ret.append(scenegen.Capsule(base, end, 0.5 * config.shaft_radius, _TOOL_ALBEDO))
    return ret


def scene_with_objects(state: WorldState, config: SimConfig) -> scenegen.SceneSpec:
    """
    The scene with the instruments (at their true poses), the peg, and the markers
    composited as primitives (world frame).
    """
    pose = state.scene.camera_pose
    primitives = []

    for side in ["left", "right"]:
        for capsule in instrument_primitives(state.true.pose(side), state.true.jaw(side), config):
            primitives.append(scenegen.Capsule(pose.apply(capsule.start), pose.apply(capsule.end), capsule.radius, capsule.albedo))

    if state.task == "lift":
        top = state.peg + config.peg_length * state.up
        primitives.append(scenegen.Capsule(pose.apply(state.peg), pose.apply(top), config.peg_radius, _PEG_ALBEDO))
    else:
        for target, albedo in zip(state.targets, _MARKER_ALBEDO):
            center = target - config.marker_radius * state.up
            primitives.append(scenegen.Sphere(pose.apply(center), config.marker_radius, albedo))

    return dataclasses.replace(state.scene, primitives=list(state.scene.primitives) + primitives)


def observe(state: WorldState, config: SimConfig) -> Observation:
    """
    Render the stereo pair from the true state and report the measured poses.
    """
    sample = scenegen.render_stereo(scene_with_objects(state, config), state.rig)
    return Observation(sample.left, sample.right, state.measured)


def _reach(pose: geom.Pose, goal: ArrayLike, config: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    """
    Proportional step towards a goal position and towards the camera-aligned orientation,
    within the clamp limits.
    """
    dt = _clamp_translation(np.asarray(goal) - pose.translation, config.max_translation)
    rotvec = Rotation.from_matrix(pose.rotation.T).as_rotvec()
    angle = np.linalg.norm(rotvec)
    if angle > config.max_rotation:
        rotvec *= config.max_rotation / angle
    return dt, geom.euler_from_matrix(Rotation.from_rotvec(rotvec).as_matrix())


def _approach(state: WorldState, pose: geom.Pose, target: np.ndarray, config: SimConfig) -> tuple[np.ndarray, bool]:
    """
    Goal for approaching a target from above: hover above it, then descend.

    :return: ``(goal, arrived)``.
    """
    offset = pose.translation - target
    horizontal = offset - np.dot(offset, state.up) * state.up
    if np.linalg.norm(offset) < APPROACH_TOLERANCE:
        return target, True
    if np.linalg.norm(horizontal) > APPROACH_TOLERANCE:
        return target + config.hover_height * state.up, False
    return target, False


def scripted_expert(state: WorldState, config: SimConfig) -> geom.ActionStep:
    """
    Deterministic proportional controller acting on the true state.

    *   ``lift``: hover above the peg, descend, close the jaw, lift.
    *   ``dual-touch``: reach the left marker with the left arm, then the right marker with the
        right arm.

    Both arms are also rotated towards the camera-aligned orientation.

    :param state: Current state.
    :param config: Simulator settings.
    :return: Action within the clamp limits.
    """
    goals = {"left": state.true.left.translation, "right": state.true.right.translation}
    jaws = {"left": state.true.jaw_left, "right": state.true.jaw_right}

    if state.task == "lift":
        if state.grasped:
            goals["left"] = state.grasp_tip + (config.lift_height + LIFT_MARGIN) * state.up
            jaws["left"] = 0.0
        else:
            goals["left"], arrived = _approach(state, state.true.left, state.targets[0], config)
            jaws["left"] = 0.0 if arrived else config.jaw_open
    elif not state.flags["touch_left"]:
        goals["left"], _ = _approach(state, state.true.left, state.targets[0], config)
    elif not state.flags["touch_right"]:
        goals["right"], _ = _approach(state, state.true.right, state.targets[1], config)

    ret = {}
    for side in ["left", "right"]:
        dt, de = _reach(state.true.pose(side), goals[side], config)
        ret[f"delta_translation_{side}"] = dt
        ret[f"delta_euler_{side}"] = de
        ret[f"jaw_{side}"] = jaws[side]

    return geom.ActionStep(**ret)


class ExpertController:
    """
    The scripted expert as a (privileged) controller.
    """

    privileged = True

    def __init__(self, config: SimConfig):
        self.config = config

    def reset(self, seed: int = 0):
        pass

    def act(self, state: WorldState) -> geom.ActionStep:
        return scripted_expert(state, self.config)


class RandomController:
    """
    Random-reach baseline: moves each arm towards random points above the tissue in the wide
    region, closing the jaws on arrival, then draws a new point.

    :param config: Simulator settings.
    """

    privileged = True

    def __init__(self, config: SimConfig):
        self.config = config
        self.rng = np.random.default_rng(0)
        self.goals = {}

    def reset(self, seed: int = 0):
        self.rng = np.random.default_rng([seed, 2])
        self.goals = {}

    def _draw(self, state: WorldState) -> np.ndarray:
        half = self.config.wide_region
        x, y = self.rng.uniform(-half, half, size=2)
        lift = self.rng.uniform(0, self.config.hover_height)
        return _surface_point(state.scene, x, y) + lift * state.up

    def act(self, state: WorldState) -> geom.ActionStep:
        ret = {}
        for side in ["left", "right"]:
            if side not in self.goals:
                self.goals[side] = self._draw(state)
            pose = state.true.pose(side)
            arrived = np.linalg.norm(pose.translation - self.goals[side]) < APPROACH_TOLERANCE
            dt, de = _reach(pose, self.goals[side], self.config)
            ret[f"delta_translation_{side}"] = dt
            ret[f"delta_euler_{side}"] = de
            ret[f"jaw_{side}"] = 0.0 if arrived else self.config.jaw_open
            if arrived:
                del self.goals[side]
        return geom.ActionStep(**ret)


@dataclass(eq=False)
class Episode:
    """
    One rollout: ``T`` executed actions between ``T + 1`` states.

    :param task: The task.
    :param seed: Episode seed.
    :param region: Target region.
    :param initial: Initial state.
    :param true: ``T + 1`` true states.
    :param measured: ``T + 1`` measured states.
    :param actions: ``(T, 14)`` executed (clamped) actions.
    :param frames: ``T + 1`` stereo pairs (if rendered).
    :param flags: Subtask completion at the end.
    :param success: Task completed.
    """

    task: str
    seed: int
    region: str
    initial: WorldState
    true: list = field(default_factory=list)
    measured: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    frames: list = None
    flags: dict = field(default_factory=dict)
    success: bool = False

    def __len__(self):
        return len(self.actions)


def run_episode(
    config: SimConfig,
    task: str,
    seed: int,
    region: str,
    controller,
    render: bool = True,
    kinematic_error: tuple[geom.Pose, geom.Pose] = None,
) -> Episode:
    """
    Roll out a controller until success or the horizon.
    Privileged controllers (``controller.privileged``) receive the true state, others an
    :py:class:`Observation`.

    :param config: Simulator settings.
    :param task: The task.
    :param seed: Episode seed.
    :param region: Target region.
    :param controller: Provides ``reset(seed)`` and ``act(...) -> ActionStep``.
    :param render: Render and store the frames.
    :param kinematic_error: Override the sampled kinematic error.
    :return: The episode.
    """
    state = make_world(config, task, seed, region, kinematic_error)
    privileged = getattr(controller, "privileged", False)
    controller.reset(seed)
    episode = Episode(task, seed, region, state.copy(), frames=[] if render else None)

    while True:
        episode.true.append(state.true)
        episode.measured.append(state.measured)

        observation = None
        if render or not privileged:
            observation = observe(state, config)
            if render:
                episode.frames.append((observation.left, observation.right))

        if state.success or state.t >= config.horizon:
            break

        action = controller.act(state if privileged else observation)
        action = clamp_action(action, config)
        episode.actions.append(action.as_vector())
        state = step(state, action, config)

    episode.flags = dict(state.flags)
    episode.success = state.success
    return episode


def write_episode(episode: Episode, directory: str):
    """
    Write an episode in the demonstration format.

    :param episode: The episode (with frames).
    :param directory: Output directory (created).
    """
    if episode.frames is None:
        raise ValueError("Episode has no frames")

    os.makedirs(os.path.join(directory, "frames"), exist_ok=True)
    world = episode.initial

    meta = dict(
        task=episode.task,
        seed=int(episode.seed),
        length=len(episode),
        region=episode.region,
        success=bool(episode.success),
        flags=episode.flags,
        rig=world.rig.to_json(),
        scene=world.scene.to_json(),
        kinematic_error=[pose.to_json() for pose in world.kinematic_error],
    )

    with open(os.path.join(directory, "meta.json"), "w") as file:
        json.dump(meta, file, indent=2)

    with open(os.path.join(directory, "states.jsonl"), "w") as file:
        for t in range(len(episode.true)):
            line = dict(
                t=t,
                measured=episode.measured[t].to_json(),
                action=[float(i) for i in episode.actions[t]] if t < len(episode) else None,
                true=episode.true[t].to_json(),
            )
            file.write(json.dumps(line) + "\n")

    for t, (left, right) in enumerate(episode.frames):
        Image.fromarray(left).save(os.path.join(directory, "frames", f"{t:06d}_left.png"))
        Image.fromarray(right).save(os.path.join(directory, "frames", f"{t:06d}_right.png"))


class Demonstration:
    """
    A recorded trajectory (frames are read on demand).

    :param directory: The demonstration directory.
    """

    def __init__(self, directory: str):
        for name in ["meta.json", "states.jsonl"]:
            if not os.path.isfile(os.path.join(directory, name)):
                raise OSError(f'"{os.path.join(directory, name)}" does not exist')

        self.directory = directory

        with open(os.path.join(directory, "meta.json")) as file:
            self.meta = json.load(file)

        with open(os.path.join(directory, "states.jsonl")) as file:
            lines = [json.loads(line) for line in file if len(line.strip()) > 0]

        self.task = self.meta["task"]
        self.seed = self.meta["seed"]
        self.region = self.meta["region"]
        self.states = [geom.ArmPoses.from_json(line["measured"]) for line in lines]
        self.true_states = [geom.ArmPoses.from_json(line["true"]) for line in lines]
        self.recorded_actions = np.array([line["action"] for line in lines[:-1]]).reshape(-1, geom.ACTION_SIZE)

        if len(self.states) != self.meta["length"] + 1:
            raise ValueError(f'"{directory}": {len(self.states)} states for length {self.meta["length"]}')

        self.actions = geom.trajectory_actions(self.states)

    def __len__(self):
        return len(self.actions)

    def frame(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        ret = []
        for camera in ["left", "right"]:
            path = os.path.join(self.directory, "frames", f"{t:06d}_{camera}.png")
            if not os.path.isfile(path):
                raise OSError(f'"{path}" does not exist')
            with Image.open(path) as image:
                ret.append(np.asarray(image.convert("RGB")).copy())
        return tuple(ret)


def load_demonstration(directory: str) -> Demonstration:
    """
    Read a demonstration; relative actions are recomputed from the measured poses.
    """
    return Demonstration(directory)


def list_demonstrations(directory: str) -> list[str]:
    if not os.path.isdir(directory):
        raise OSError(f'"{directory}" does not exist')
    return sorted(os.path.join(directory, name) for name in os.listdir(directory) if name.startswith("demo_"))


def check_demonstration(demo: Demonstration, atol: float = 1e-9) -> bool:
    """
    Compare the relative actions recomputed from the measured poses with the executed actions.
    Delta rotations (compared as rotations, not as Euler channels) and jaws are unaffected by a
    constant kinematic error. Translations are rotated by it, so only their norms are compared.
    A warning is issued on mismatch.

    :param demo: The demonstration.
    :param atol: Absolute tolerance.
    :return: ``True`` if consistent.
    """
    a = demo.actions
    b = demo.recorded_actions
    ok = a.shape == b.shape

    if ok and len(a) > 0:
        ok = np.allclose(a[:, [6, 13]], b[:, [6, 13]], rtol=0, atol=atol)
        for s in [slice(0, 3), slice(7, 10)]:
            ok = ok and np.allclose(np.linalg.norm(a[:, s], axis=1), np.linalg.norm(b[:, s], axis=1), rtol=0, atol=atol)
        for s in [slice(3, 6), slice(10, 13)]:
            ra = Rotation.from_matrix(np.array([geom.matrix_from_euler(x) for x in a[:, s]]))
            rb = Rotation.from_matrix(np.array([geom.matrix_from_euler(x) for x in b[:, s]]))
            ok = ok and np.allclose(ra.magnitude(), rb.magnitude(), rtol=0, atol=atol)
            ok = ok and np.allclose((ra.inv() * rb).magnitude(), 0, rtol=0, atol=atol)

    if not ok:
        warnings.warn(f'"{demo.directory}": recomputed actions inconsistent with the recorded actions', Warning)

    return bool(ok)


def parse_region_split(text: str) -> dict[str, int]:
    """
    Parse ``"train=120,wide=60"``.
    """
    ret = {}
    for item in text.split(","):
        name, _, count = item.partition("=")
        name = name.strip()
        if name not in REGIONS:
            raise ValueError(f'Unknown region "{name}" in "{text}"')
        ret[name] = int(count)
        if ret[name] < 0:
            raise ValueError(f'Negative count in "{text}"')
    return ret


def collect_demos(
    config: SimConfig,
    task: str,
    split: dict[str, int],
    seed: int,
    directory: str,
    silent: bool = False,
) -> list[str]:
    """
    Record successful expert demonstrations.
    Episode ``i`` uses seed ``seed + i``; failed episodes are skipped (with a warning)
    and replaced by the next seed.

    :param config: Simulator settings.
    :param task: The task.
    :param split: Number of demonstrations per region, e.g. ``{"train": 120, "wide": 60}``.
    :param seed: First episode seed.
    :param directory: Output directory, demonstrations are written to ``demo_{index:06d}``.
    :param silent: Hide progress bar.
    :return: Demonstration directories.
    """
    expert = ExpertController(config)
    ret = []
    episode_seed = seed
    total = sum(split.values())

    with tqdm.tqdm(total=total, disable=silent, desc="collect-demos") as pbar:
        for region, count in split.items():
            done = 0
            failures = 0
            while done < count:
                episode = run_episode(config, task, episode_seed, region, expert, render=True)
                episode_seed += 1
                if not episode.success:
                    failures += 1
                    warnings.warn(f"Expert failed on seed {episode.seed} ({task}, {region})", Warning)
                    if failures > count:
                        raise RuntimeError(f"Expert fails too often ({task}, {region})")
                    continue
                path = os.path.join(directory, f"demo_{len(ret):06d}")
                write_episode(episode, path)
                ret.append(path)
                done += 1
                pbar.update()

    return ret


def evaluate(
    controller,
    config: SimConfig,
    task: str,
    episodes: int,
    region: str,
    seed: int = 0,
    log: str = None,
    silent: bool = False,
) -> dict:
    """
    Closed-loop evaluation; every episode has a fresh scene, target, and kinematic error.

    :param controller: E.g. :py:class:`EndoAct.policy.Agent`, :py:class:`ExpertController`.
    :param config: Simulator settings.
    :param task: The task.
    :param episodes: Number of episodes (episode ``i`` uses seed ``seed + i``).
    :param region: Target region.
    :param seed: First episode seed.
    :param log: Write one JSON line per episode to this file.
    :param silent: Hide progress bar.
    :return: ``success_rate``, ``subtasks`` (success rate per subtask), ``episodes`` (log lines).
    """
    lines = []

    for i in tqdm.tqdm(range(episodes), disable=silent, desc="eval"):
        episode = run_episode(config, task, seed + i, region, controller, render=False)
        lines.append(
            dict(
                episode=i,
                seed=seed + i,
                task=task,
                region=region,
                success=bool(episode.success),
                steps=len(episode),
                subtasks={key: bool(value) for key, value in episode.flags.items()},
            )
        )

    if log is not None:
        dirname = os.path.dirname(log)
        if len(dirname) > 0:
            os.makedirs(dirname, exist_ok=True)
        with open(log, "w") as file:
            for line in lines:
                file.write(json.dumps(line) + "\n")

    n = max(len(lines), 1)
    return dict(
        success_rate=sum(line["success"] for line in lines) / n,
        subtasks={key: sum(line["subtasks"][key] for line in lines) / n for key in SUBTASKS[task]},
        episodes=lines,
    )


def replay_relative(initial: WorldState, actions: ArrayLike, config: SimConfig) -> list[geom.ArmPoses]:
    """
    Open-loop replay of relative actions.

    :param initial: Initial state (any kinematic error).
    :param actions: ``(T, 14)`` actions.
    :param config: Simulator settings.
    :return: ``T + 1`` true states.
    """
    state = initial
    ret = [state.true]
    for action in np.asarray(actions):
        state = step(state, geom.ActionStep.from_vector(action), config)
        ret.append(state.true)
    return ret


def replay_absolute(initial: WorldState, measured: list[geom.ArmPoses]) -> list[geom.ArmPoses]:
    """
    Open-loop replay of an absolute encoding: command the robot such that its reported
    (measured) poses equal the recorded measured poses. With a different kinematic error
    the true poses are off by ``new_error^-1 o recorded_error``.

    :param initial: Initial state (defines the kinematic error of the replay).
    :param measured: Recorded measured states.
    :return: Reached true states.
    """
    el, er = (pose.inverse() for pose in initial.kinematic_error)
    return [geom.ArmPoses(el @ m.left, er @ m.right, m.jaw_left, m.jaw_right) for m in measured]
