import os

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

import EndoAct as ea


def _config(**kwargs):
    return ea.simrobot.SimConfig(width=32, height=32, **kwargs)


def _place(state, side, position, jaw=None):
    """
    Teleport a tip (true pose) to a position.
    """
    poses = {s: state.true.pose(s) for s in ["left", "right"]}
    jaws = {s: state.true.jaw(s) for s in ["left", "right"]}
    poses[side] = ea.geom.Pose(poses[side].rotation, position)
    if jaw is not None:
        jaws[side] = jaw
    state.true = ea.geom.ArmPoses(poses["left"], poses["right"], jaws["left"], jaws["right"])


def _hold(state, jaw_left=None):
    return ea.geom.ActionStep(
        jaw_left=state.true.jaw_left if jaw_left is None else jaw_left,
        jaw_right=state.true.jaw_right,
    )


def _positions(states, side):
    return np.array([s.pose(side).translation for s in states])


def test_config_checks():
    with pytest.raises(ValueError):
        _config(train_region=0.02, wide_region=0.01)

    with pytest.raises(ValueError):
        _config(close_threshold=0.7)

    with pytest.raises(ValueError):
        _config(horizon=0)

    with pytest.raises(ValueError):
        _config().region("test")

    assert _config().region("wide") == _config().wide_region


def test_make_world():
    config = _config()
    a = ea.simrobot.make_world(config, "lift", 3)
    b = ea.simrobot.make_world(config, "lift", 3)
    c = ea.simrobot.make_world(config, "lift", 4)
    assert np.all(a.targets[0] == b.targets[0])
    assert np.all(a.kinematic_error[0].rotation == b.kinematic_error[0].rotation)
    assert not np.allclose(a.targets[0], c.targets[0])
    assert a.t == 0
    assert a.flags == {"grasp": False, "lift": False}
    assert not a.success

    d = ea.simrobot.make_world(config, "dual-touch", 3)
    assert len(d.targets) == 2
    assert d.flags == {"touch_left": False, "touch_right": False, "whole": False}

    with pytest.raises(ValueError):
        ea.simrobot.make_world(config, "suture", 0)

    with pytest.raises(ValueError):
        ea.simrobot.make_world(config, "lift", 0, region="test")

    with pytest.raises(ea.simrobot.UnreachableTargetError):
        ea.simrobot.make_world(_config(train_region=0.015, wide_region=0.02), "lift", 0)


def test_kinematic_error():
    config = _config()
    state = ea.simrobot.make_world(config, "lift", 5)

    for side, error in zip(["left", "right"], state.kinematic_error):
        angle = Rotation.from_matrix(error.rotation).magnitude()
        assert angle <= config.kin_rotation + 1e-12
        assert np.linalg.norm(error.translation) <= config.kin_translation + 1e-12
        measured = state.measured.pose(side)
        true = state.true.pose(side)
        assert np.allclose(measured.rotation, error.rotation @ true.rotation)
        assert np.allclose(measured.translation, error.rotation @ true.translation + error.translation)

    identity = (ea.geom.Pose(), ea.geom.Pose())
    state = ea.simrobot.make_world(config, "lift", 5, kinematic_error=identity)
    assert np.allclose(state.measured.left.translation, state.true.left.translation)


def test_region_boxes():
    config = _config()
    beyond = 0

    for seed in range(40):
        for region in ["train", "wide"]:
            half = config.region(region)
            state = ea.simrobot.make_world(config, "dual-touch", seed, region)
            world = state.scene.camera_pose.apply(np.array(state.targets))
            assert np.all(np.abs(world[:, :2]) <= half + 1e-12)
            assert world[0, 0] <= 1e-12
            assert world[1, 0] >= -1e-12
            if region == "wide":
                beyond += np.any(np.abs(world[:, :2]) > config.train_region)

            state = ea.simrobot.make_world(config, "lift", seed, region)
            world = state.scene.camera_pose.apply(state.peg_rest)
            assert np.all(np.abs(world[:2]) <= half + 1e-12)

    assert beyond > 0


def test_clamp_action():
    config = _config()
    small = ea.geom.ActionStep([1e-3, 0, 0], [0.01, -0.02, 0.01], 0.5, [0, -1e-3, 0], [0, 0, 0.03], 0.1)
    assert np.all(ea.simrobot.clamp_action(small, config).as_vector() == small.as_vector())

    large = ea.geom.ActionStep([0.01, 0.01, 0], [0.3, 0, 0.2], 2.0, [0, 0, -0.05], [0, 0.4, 0], -1.0)
    clamped = ea.simrobot.clamp_action(large, config)
    assert np.linalg.norm(clamped.delta_translation_left) == pytest.approx(config.max_translation)
    assert np.allclose(clamped.delta_translation_left / config.max_translation, [2**-0.5, 2**-0.5, 0])
    assert np.allclose(clamped.delta_translation_right, [0, 0, -config.max_translation])
    assert clamped.jaw_left == config.jaw_max
    assert clamped.jaw_right == 0

    for euler, original in [(clamped.delta_euler_left, large.delta_euler_left), (clamped.delta_euler_right, large.delta_euler_right)]:
        rotvec = Rotation.from_matrix(ea.geom.matrix_from_euler(euler)).as_rotvec()
        ref = Rotation.from_matrix(ea.geom.matrix_from_euler(original)).as_rotvec()
        assert np.linalg.norm(rotvec) == pytest.approx(config.max_rotation)
        assert np.allclose(rotvec / np.linalg.norm(rotvec), ref / np.linalg.norm(ref))


def test_step_pure():
    config = _config()
    state = ea.simrobot.make_world(config, "lift", 0)
    ref = state.true.left.translation.copy()
    action = ea.geom.ActionStep([1e-3, 0, 0], [0, 0, 0], 0.6, [0, 0, 0], [0, 0, 0], 0.6)
    other = ea.simrobot.step(state, action, config)
    assert np.all(state.true.left.translation == ref)
    assert state.t == 0
    assert other.t == 1
    assert np.allclose(other.true.left.translation, ref + [1e-3, 0, 0])

    with pytest.raises(ValueError):
        ea.simrobot.step(state, ea.geom.ActionStep([np.nan, 0, 0]), config)


def test_step_lift():
    config = _config()
    state = ea.simrobot.make_world(config, "lift", 1)
    rest = state.peg_rest.copy()
    up = state.up

    # too far: closing the jaw does not grasp
    _place(state, "left", state.targets[0] + 0.005 * up)
    state = ea.simrobot.step(state, _hold(state, 0.0), config)
    assert not state.grasped
    assert not state.flags["grasp"]

    _place(state, "left", state.targets[0], jaw=config.jaw_open)
    state = ea.simrobot.step(state, _hold(state, 0.0), config)
    assert state.grasped
    assert state.flags["grasp"]

    lift = ea.geom.ActionStep(delta_translation_left=config.max_translation * up, jaw_right=state.true.jaw_right)

    for _ in range(4):
        state = ea.simrobot.step(state, lift, config)
        assert not state.flags["lift"]

    for _ in range(4):
        state = ea.simrobot.step(state, lift, config)

    height = np.dot(state.peg - rest, up)
    assert height == pytest.approx(8 * config.max_translation)

    for _ in range(config.hold_steps):
        state = ea.simrobot.step(state, _hold(state), config)

    assert state.flags["lift"]
    assert state.success

    # release: the peg drops back to the tissue
    state = ea.simrobot.step(state, _hold(state, config.jaw_open), config)
    assert not state.grasped
    assert state.hold == 0
    assert np.dot(state.peg - rest, up) == pytest.approx(0, abs=1e-12)
    assert state.flags["lift"]


def test_step_dual_touch_order():
    config = _config()
    state = ea.simrobot.make_world(config, "dual-touch", 2)

    _place(state, "right", state.targets[1])
    state = ea.simrobot.step(state, _hold(state), config)
    assert not state.flags["touch_right"]

    _place(state, "left", state.targets[0])
    state = ea.simrobot.step(state, _hold(state), config)
    assert state.flags["touch_left"]
    assert state.flags["touch_right"]
    assert state.flags["whole"]
    assert state.success


@pytest.mark.parametrize("task", ea.simrobot.TASKS)
@pytest.mark.parametrize("region", ea.simrobot.REGIONS)
def test_expert(task, region):
    config = _config()
    expert = ea.simrobot.ExpertController(config)

    for seed in range(3):
        episode = ea.simrobot.run_episode(config, task, seed, region, expert, render=False)
        assert episode.success
        assert all(episode.flags.values())
        assert len(episode) < config.horizon
        assert len(episode.true) == len(episode) + 1
        assert episode.frames is None
        for action in episode.actions:
            assert np.linalg.norm(action[0:3]) <= config.max_translation * (1 + 1e-9)
            assert np.linalg.norm(action[7:10]) <= config.max_translation * (1 + 1e-9)


@pytest.mark.parametrize("task", ea.simrobot.TASKS)
@pytest.mark.parametrize("region", ea.simrobot.REGIONS)
def test_expert_success_rate(task, region):
    config = _config()
    expert = ea.simrobot.ExpertController(config)
    success = [ea.simrobot.run_episode(config, task, seed, region, expert, render=False).success for seed in range(200)]
    assert np.mean(success) >= 0.99


def test_episode_deterministic():
    config = _config()
    expert = ea.simrobot.ExpertController(config)
    a = ea.simrobot.run_episode(config, "lift", 7, "train", expert, render=False)
    b = ea.simrobot.run_episode(config, "lift", 7, "train", expert, render=False)
    assert np.array_equal(np.array(a.actions), np.array(b.actions))

    controller = ea.simrobot.RandomController(config)
    a = ea.simrobot.run_episode(config, "lift", 7, "train", controller, render=False)
    b = ea.simrobot.run_episode(config, "lift", 7, "train", controller, render=False)
    assert np.array_equal(np.array(a.actions), np.array(b.actions))


def test_random_controller():
    config = _config(horizon=20)
    controller = ea.simrobot.RandomController(config)
    episode = ea.simrobot.run_episode(config, "dual-touch", 0, "train", controller, render=False)
    assert len(episode) == 20 or episode.success
    assert np.all(np.isfinite(np.array(episode.actions)))


def test_observe():
    config = _config()
    state = ea.simrobot.make_world(config, "lift", 0)
    observation = ea.simrobot.observe(state, config)
    assert observation.left.shape == (32, 32, 3)
    assert observation.left.dtype == np.uint8
    assert observation.measured is not state.true

    empty = ea.scenegen.render_stereo(state.scene, state.rig)
    assert np.any(observation.left != empty.left)
    assert np.any(observation.right != empty.right)

    scene = ea.simrobot.scene_with_objects(state, config)
    assert len(scene.primitives) == 3 + 3 + 1
    assert len(state.scene.primitives) == 0


def test_demonstration_roundtrip(tmp_path):
    config = _config()
    expert = ea.simrobot.ExpertController(config)
    episode = ea.simrobot.run_episode(config, "dual-touch", 0, "train", expert)
    assert len(episode.frames) == len(episode) + 1

    directory = os.path.join(tmp_path, "demo_000000")
    ea.simrobot.write_episode(episode, directory)
    demo = ea.simrobot.load_demonstration(directory)
    assert len(demo) == len(episode)
    assert demo.task == "dual-touch"
    assert demo.meta["success"]
    assert len(demo.states) == len(episode) + 1
    assert np.allclose(demo.recorded_actions, np.array(episode.actions))
    assert np.allclose(_positions(demo.states, "left"), _positions(episode.measured, "left"))
    assert np.allclose(_positions(demo.true_states, "right"), _positions(episode.true, "right"))

    left, right = demo.frame(3)
    assert np.all(left == episode.frames[3][0])
    assert np.all(right == episode.frames[3][1])

    with pytest.raises(OSError):
        demo.frame(len(episode) + 1)

    assert ea.simrobot.check_demonstration(demo)
    assert ea.simrobot.list_demonstrations(str(tmp_path)) == [directory]

    # rotations are unaffected by a constant kinematic error
    assert np.allclose(demo.actions[:, [3, 4, 5, 10, 11, 12]], demo.recorded_actions[:, [3, 4, 5, 10, 11, 12]], atol=1e-9)

    # an equivalent Euler triplet describes the same delta rotation
    recorded = demo.recorded_actions.copy()
    roll, pitch, yaw = recorded[0, 3:6]
    demo.recorded_actions[0, 3:6] = [roll + np.pi, np.pi - pitch, yaw + np.pi]
    assert ea.simrobot.check_demonstration(demo)

    # right delta rotation twisted, translations and jaws unchanged
    demo.recorded_actions = recorded.copy()
    twist = Rotation.from_rotvec([0, 0, 0.01]).as_matrix()
    demo.recorded_actions[0, 10:13] = ea.geom.euler_from_matrix(ea.geom.matrix_from_euler(recorded[0, 10:13]) @ twist)

    with pytest.warns(Warning):
        assert not ea.simrobot.check_demonstration(demo)

    demo.recorded_actions = recorded.copy()
    demo.recorded_actions[0, 3] += 0.01

    with pytest.warns(Warning):
        assert not ea.simrobot.check_demonstration(demo)

    with pytest.raises(ValueError):
        ea.simrobot.write_episode(ea.simrobot.run_episode(config, "lift", 0, "train", expert, render=False), directory)

    with pytest.raises(OSError):
        ea.simrobot.load_demonstration(os.path.join(tmp_path, "missing"))


def test_parse_region_split():
    assert ea.simrobot.parse_region_split("train=120,wide=60") == {"train": 120, "wide": 60}
    assert ea.simrobot.parse_region_split("wide=3") == {"wide": 3}

    with pytest.raises(ValueError):
        ea.simrobot.parse_region_split("test=3")

    with pytest.raises(ValueError):
        ea.simrobot.parse_region_split("train=-1")

    with pytest.raises(ValueError):
        ea.simrobot.parse_region_split("train=many")


def test_collect_demos(tmp_path):
    config = _config()
    paths = ea.simrobot.collect_demos(config, "lift", {"train": 2, "wide": 1}, 10, str(tmp_path), silent=True)
    assert len(paths) == 3
    assert ea.simrobot.list_demonstrations(str(tmp_path)) == paths

    demos = [ea.simrobot.load_demonstration(path) for path in paths]
    assert [demo.region for demo in demos] == ["train", "train", "wide"]
    assert len({demo.seed for demo in demos}) == 3
    assert all(ea.simrobot.check_demonstration(demo) for demo in demos)

    # demonstrations plug into policy training
    dataset = ea.policy.DemoSteps(demos, 4)
    assert len(dataset) == sum(len(demo) for demo in demos)


def test_evaluate(tmp_path):
    config = _config()
    log = os.path.join(tmp_path, "eval", "eval.jsonl")
    ret = ea.simrobot.evaluate(ea.simrobot.ExpertController(config), config, "lift", 3, "wide", seed=5, log=log, silent=True)
    assert ret["success_rate"] == 1
    assert ret["subtasks"] == {"grasp": 1, "lift": 1}

    lines = ea.plot.read_jsonl(log)
    assert lines == ret["episodes"]
    assert [line["seed"] for line in lines] == [5, 6, 7]
    assert all(line["region"] == "wide" for line in lines)
    assert ea.plot.success_rates(lines) == {"success": 1, "grasp": 1, "lift": 1}


def test_replay():
    config = _config()
    exact = (ea.geom.Pose(), ea.geom.Pose())
    offset = ea.geom.Pose(Rotation.from_rotvec([0.05, 0, 0]).as_matrix(), [0.003, 0, 0])
    episode = ea.simrobot.run_episode(
        config, "dual-touch", 1, "train", ea.simrobot.ExpertController(config), False, exact
    )
    other = ea.simrobot.make_world(config, "dual-touch", 1, "train", (offset, offset))
    same = ea.simrobot.make_world(config, "dual-touch", 1, "train", exact)

    relative = ea.simrobot.replay_relative(other, np.array(episode.actions), config)
    absolute = ea.simrobot.replay_absolute(other, episode.measured)
    reference = ea.simrobot.replay_absolute(same, episode.measured)

    for side in ["left", "right"]:
        truth = _positions(episode.true, side)
        assert np.allclose(_positions(relative, side), truth, rtol=0, atol=1e-12)
        assert np.allclose(_positions(reference, side), truth, rtol=0, atol=1e-12)
        assert np.min(np.linalg.norm(_positions(absolute, side) - truth, axis=1)) > 1e-3
