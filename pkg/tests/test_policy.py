import os

import numpy as np
import pytest
import torch

import EndoAct as ea


class FakeDemo:
    """
    Random smooth trajectory with random stereo frames.
    """

    def __init__(self, seed, length=6, size=8):
        rng = np.random.default_rng(seed)
        state = ea.geom.ArmPoses(
            ea.geom.Pose(translation=[-0.01, 0, 0.05]),
            ea.geom.Pose(translation=[0.01, 0, 0.05]),
        )
        self.states = [state]
        for _ in range(length):
            action = ea.geom.ActionStep(
                rng.uniform(-1e-3, 1e-3, 3),
                rng.uniform(-0.05, 0.05, 3),
                rng.uniform(0, 1),
                rng.uniform(-1e-3, 1e-3, 3),
                rng.uniform(-0.05, 0.05, 3),
                rng.uniform(0, 1),
            )
            self.states.append(ea.geom.apply_action(self.states[-1], action))
        self.images = rng.integers(0, 256, size=(length + 1, 2, size, size, 3), dtype=np.uint8)

    def frame(self, t):
        return self.images[t, 0], self.images[t, 1]


def _geo(seed=0):
    torch.manual_seed(seed)
    config = ea.geotrans.GeoConfig(
        image_size=(8, 8),
        patch_size=4,
        enc_depth=1,
        enc_width=4,
        enc_heads=1,
        dec_depth=4,
        dec_width=4,
        dec_heads=1,
        pyramid_taps=(1, 2, 3, 4),
        mlp_ratio=1.0,
        head_width=2,
    )
    return ea.geotrans.GeometryTransformer(config).eval()


def _policy_config(**kwargs):
    options = dict(depth=2, width=8, heads=2, chunk=3)
    options.update(kwargs)
    return ea.policy.PolicyConfig(**options)


def _stack(variant="msfc", seed=0):
    geo = _geo(seed)
    config = _policy_config()
    connector = ea.connector.Connector(ea.connector.ConnectorConfig(variant), geo.config.dec_width, config.width)
    policy = ea.policy.Policy(config, (2, 4))
    return geo, connector, policy


def test_config_checks():
    with pytest.raises(ValueError):
        _policy_config(chunk=0)

    with pytest.raises(ValueError):
        _policy_config(m=-0.1)

    with pytest.raises(ValueError):
        _policy_config(width=9, heads=1)

    with pytest.raises(ValueError):
        _policy_config(jaw_max=0)

    with pytest.raises(ValueError):
        ea.policy.PolicyTrainConfig(batch_size=0)


def test_positional_encoding():
    pos = ea.policy.positional_encoding(2, 6, 8)
    assert pos.shape == (12, 8)
    assert pos.dtype == torch.float32
    assert torch.allclose(pos[0], torch.tensor([0, 1, 0, 1, 0, 1, 0, 1], dtype=torch.float32))

    # row-major: index 7 is row 1, column 1
    assert torch.allclose(pos[7, :4], pos[6, :4])
    assert torch.allclose(pos[7, 4:], pos[1, 4:])
    assert torch.allclose(pos[1, :4], pos[0, :4])
    assert float(pos[1, 4]) == pytest.approx(np.sin(1))
    assert float(pos[1, 5]) == pytest.approx(np.cos(1))
    assert float(pos[1, 6]) == pytest.approx(np.sin(1 / 100))
    assert len({tuple(row.tolist()) for row in pos}) == 12

    with pytest.raises(ValueError):
        ea.policy.positional_encoding(2, 2, 7)


def test_ensemble_weights():
    w = ea.policy.ensemble_weights([0, 1], 0.1)
    assert np.allclose(w, [0.52498, 0.47502], atol=1e-5)
    assert np.allclose(ea.policy.ensemble_weights([0, 1, 2, 3], 0), 0.25)

    rng = np.random.default_rng(0)
    for _ in range(100):
        ages = rng.integers(0, 20, size=rng.integers(1, 20))
        w = ea.policy.ensemble_weights(ages, rng.uniform(0, 1))
        assert abs(np.sum(w) - 1) < 1e-12
        assert np.all(w > 0)


def test_ensemble_convex():
    rng = np.random.default_rng(1)
    chunk = 5
    buffer = ea.policy.EnsembleBuffer(chunk)

    for t in range(8):
        buffer.add(t, rng.normal(size=(chunk, ea.geom.ACTION_SIZE)))
        action = ea.policy.ensemble(buffer, 0.1).as_vector()
        predictions = np.array([a[t - i] for i, a in buffer.entries])
        assert len(buffer) == min(t + 1, chunk)
        assert np.all(action >= predictions.min(axis=0) - 1e-12)
        assert np.all(action <= predictions.max(axis=0) + 1e-12)


def test_ensemble_values():
    buffer = ea.policy.EnsembleBuffer(2)
    old = np.zeros((2, ea.geom.ACTION_SIZE))
    old[1] = 1.0
    new = np.full((2, ea.geom.ACTION_SIZE), 2.0)
    buffer.add(0, old)
    buffer.add(1, new)

    # the chunk issued at t = 0 has age 1, the newest has age 0
    action = ea.policy.ensemble(buffer, 0.1).as_vector()
    assert np.allclose(action, 0.52498 * 2 + 0.47502 * 1, atol=1e-5)

    action = ea.policy.ensemble(buffer, 0).as_vector()
    assert np.allclose(action, 1.5)

    action = ea.policy.ensemble(buffer, 0.1, t=2).as_vector()
    assert np.allclose(action, 2)


def test_ensemble_fixed_point():
    rng = np.random.default_rng(2)
    value = rng.normal(size=ea.geom.ACTION_SIZE)
    buffer = ea.policy.EnsembleBuffer(4)

    for t in range(6):
        buffer.add(t, np.tile(value, (4, 1)))
        assert np.allclose(ea.policy.ensemble(buffer, 0.3).as_vector(), value, rtol=0, atol=1e-12)


def test_ensemble_errors():
    buffer = ea.policy.EnsembleBuffer(2)

    with pytest.raises(ValueError):
        ea.policy.ensemble(buffer, 0.1)

    with pytest.raises(ValueError):
        buffer.add(0, np.zeros((3, ea.geom.ACTION_SIZE)))

    with pytest.raises(ValueError):
        buffer.add(0, np.full((2, ea.geom.ACTION_SIZE), np.nan))

    buffer.add(0, np.zeros((2, ea.geom.ACTION_SIZE)))

    with pytest.raises(ValueError):
        ea.policy.ensemble(buffer, 0.1, t=5)

    buffer.reset()
    assert len(buffer) == 0


def test_chunk_target():
    rng = np.random.default_rng(3)
    actions = rng.normal(size=(5, ea.geom.ACTION_SIZE))

    target, is_pad = ea.policy.chunk_target(actions, 1, 3)
    assert np.all(target == actions[1:4])
    assert not np.any(is_pad)

    target, is_pad = ea.policy.chunk_target(actions, 3, 4)
    assert is_pad.tolist() == [False, False, True, True]
    assert np.all(target[:2] == actions[3:5])
    assert np.all(target[2:, ea.policy.POSE_CHANNELS] == 0)
    assert np.all(target[2:, ea.policy.JAW_CHANNELS] == actions[-1, ea.policy.JAW_CHANNELS])


def test_loss_mse():
    rng = np.random.default_rng(4)
    predicted = torch.from_numpy(rng.normal(size=(2, 3, ea.geom.ACTION_SIZE)))
    target = torch.from_numpy(rng.normal(size=(2, 3, ea.geom.ACTION_SIZE)))
    is_pad = torch.tensor([[False, False, True], [False, True, True]])

    ref = ea.policy.loss_mse(predicted, target, is_pad)
    keep = ~is_pad
    assert float(ref) == pytest.approx(float(((predicted - target) ** 2)[keep].mean()))

    other = predicted.clone()
    other[is_pad] += 100
    assert float(ea.policy.loss_mse(other, target, is_pad)) == pytest.approx(float(ref), rel=1e-12)

    std = torch.full((ea.geom.ACTION_SIZE,), 2.0, dtype=torch.float64)
    scaled = ea.policy.loss_mse(2 * predicted, 2 * target, is_pad, std)
    assert float(scaled) == pytest.approx(float(ref), rel=1e-12)

    with pytest.raises(ValueError):
        ea.policy.loss_mse(predicted, target, torch.ones(2, 3, dtype=torch.bool))

    with pytest.raises(ValueError):
        ea.policy.loss_mse(predicted[:, :2], target, is_pad)


def test_loss_mse_gradient():
    rng = np.random.default_rng(5)
    predicted = torch.from_numpy(rng.normal(size=(2, 3, ea.geom.ACTION_SIZE))).requires_grad_(True)
    target = torch.from_numpy(rng.normal(size=(2, 3, ea.geom.ACTION_SIZE)))
    is_pad = torch.tensor([[False, False, True], [False, True, True]])
    std = torch.from_numpy(rng.uniform(0.5, 2, size=ea.geom.ACTION_SIZE))
    assert torch.autograd.gradcheck(lambda p: ea.policy.loss_mse(p, target, is_pad, std), (predicted,))


def test_set_statistics():
    policy = ea.policy.Policy(_policy_config(), (2, 4))
    std = np.ones(ea.geom.ACTION_SIZE)
    std[0] = 0
    std[1] = 1e-12
    policy.set_statistics(np.arange(ea.geom.ACTION_SIZE), std, np.zeros(20), np.zeros(20))
    assert torch.all(policy.action_std == 1)
    assert torch.all(policy.proprio_std == 1)
    assert float(policy.action_mean[3]) == 3


def test_policy_forward():
    geo, connector, policy = _stack()
    rng = np.random.default_rng(6)
    left = ea.geotrans.images_to_tensor(rng.integers(0, 256, size=(2, 8, 8, 3)))
    right = ea.geotrans.images_to_tensor(rng.integers(0, 256, size=(2, 8, 8, 3)))
    proprio = torch.from_numpy(rng.normal(size=(2, ea.geom.PROPRIO_SIZE))).float()

    spatial = connector(geo.latent(left, right))
    out = policy(spatial, proprio)
    assert out.shape == (2, 3, ea.geom.ACTION_SIZE)
    jaw = out[..., ea.policy.JAW_CHANNELS]
    assert torch.all(jaw >= 0) and torch.all(jaw <= policy.config.jaw_max)

    mean = torch.arange(ea.geom.ACTION_SIZE, dtype=torch.float32)
    policy.set_statistics(mean, torch.full((ea.geom.ACTION_SIZE,), 2.0), torch.zeros(20), torch.ones(20))
    with torch.no_grad():
        policy.head.weight.zero_()
        policy.head.bias.zero_()
    out = policy(spatial, proprio)
    assert torch.allclose(out[..., ea.policy.POSE_CHANNELS], mean[ea.policy.POSE_CHANNELS].expand(2, 3, -1))
    assert torch.allclose(out[..., ea.policy.JAW_CHANNELS], torch.tensor(0.5))


def test_policy_forward_checks():
    geo, connector, policy = _stack()
    left = torch.zeros(1, 3, 8, 8)
    proprio = torch.zeros(1, ea.geom.PROPRIO_SIZE)
    spatial = connector(geo.latent(left, left))

    other = ea.policy.Policy(_policy_config(), (4, 2))
    with pytest.raises(ValueError):
        other(spatial, proprio)

    narrow = ea.connector.Connector(ea.connector.ConnectorConfig(), geo.config.dec_width, 4)
    with pytest.raises(ValueError):
        policy(narrow(geo.latent(left, left)), proprio)


def test_policy_msc():
    geo, connector, policy = _stack("msc")
    left = torch.zeros(1, 3, 8, 8)
    out = policy(connector(geo.latent(left, left)), torch.zeros(1, ea.geom.PROPRIO_SIZE))
    assert out.shape == (1, 3, ea.geom.ACTION_SIZE)


def test_demo_steps():
    demos = [FakeDemo(0, 6), FakeDemo(1, 4)]
    dataset = ea.policy.DemoSteps(demos, 3)
    assert len(dataset) == 10

    item = dataset[8]
    assert item["left"].shape == (3, 8, 8)
    assert item["proprio"].shape == (ea.geom.PROPRIO_SIZE,)
    assert item["target"].shape == (3, ea.geom.ACTION_SIZE)
    assert item["is_pad"].tolist() == [False, False, True]

    actions = ea.geom.trajectory_actions(demos[1].states)
    assert np.allclose(item["target"][:2].numpy(), actions[2:4], atol=1e-6)

    action_mean, action_std, proprio_mean, proprio_std = dataset.statistics()
    assert action_mean.shape == (ea.geom.ACTION_SIZE,)
    assert proprio_std.shape == (ea.geom.PROPRIO_SIZE,)

    with pytest.raises(ValueError):
        ea.policy.DemoSteps([], 3)


def test_frozen_check():
    geo = _geo()
    snapshot = ea.policy._snapshot(geo)
    ea.policy._assert_unchanged(geo, snapshot)

    with torch.no_grad():
        geo.enc_norm.weight[0] += 1e-6

    with pytest.raises(ea.policy.FrozenParameterError):
        ea.policy._assert_unchanged(geo, snapshot)


def test_train_policy(tmp_path):
    geo = _geo()
    before = ea.geotrans.fingerprint(geo)
    demos = [FakeDemo(0, 5), FakeDemo(1, 4)]
    train = ea.policy.PolicyTrainConfig(epochs=2, batch_size=4, device="cpu")
    connector, policy = ea.policy.train_policy(
        demos, geo, str(tmp_path), config=_policy_config(), train=train, seed=3, silent=True
    )
    assert ea.geotrans.fingerprint(geo) == before
    assert not policy.training

    lines = ea.plot.read_jsonl(os.path.join(tmp_path, "metrics.jsonl"))
    assert len(lines) == 2 * 3
    assert all(np.isfinite(line["loss_mse"]) for line in lines)

    loaded_connector, loaded_policy, meta = ea.policy.load_policy(os.path.join(tmp_path, "policy.pt"), geo)
    assert meta["seed"] == 3
    assert meta["geo_fingerprint"] == before
    assert meta["connector_config"]["variant"] == "msfc"

    left = torch.zeros(1, 3, 8, 8)
    proprio = torch.from_numpy(ea.geom.proprio_vector(demos[0].states[0])[None]).float()
    pyramid = geo.latent(left, left)
    with torch.no_grad():
        a = policy(connector(pyramid), proprio)
        b = loaded_policy(loaded_connector(pyramid), proprio)
    assert torch.allclose(a, b)


def test_train_policy_overfit(tmp_path):
    geo = _geo()
    demo = FakeDemo(4, 8)
    config = _policy_config(width=16)
    train = ea.policy.PolicyTrainConfig(epochs=500, batch_size=8, lr=3e-3, weight_decay=0, device="cpu")
    ea.policy.train_policy([demo], geo, str(tmp_path), config=config, train=train, seed=0, silent=True)

    loss = np.array([line["loss_mse"] for line in ea.plot.read_jsonl(os.path.join(tmp_path, "metrics.jsonl"))])
    assert len(loss) == 500
    assert np.mean(loss[-10:]) < 0.02 * loss[0]


def test_policy_uses_proprio():
    geo, connector, policy = _stack()
    rng = np.random.default_rng(8)
    left = ea.geotrans.images_to_tensor(rng.integers(0, 256, size=(2, 8, 8, 3)))
    proprio = torch.from_numpy(rng.normal(size=(2, ea.geom.PROPRIO_SIZE))).float()

    with torch.no_grad():
        spatial = connector(geo.latent(left, left))
        out = policy(spatial, proprio)
        zero = policy(spatial, torch.zeros_like(proprio))

    assert not torch.allclose(out, zero)


def test_load_policy_fingerprint(tmp_path):
    geo, connector, policy = _stack()
    path = os.path.join(tmp_path, "policy.pt")
    ea.policy.save_policy(path, connector, policy, geo)
    other = _geo(seed=1)

    with pytest.raises(ea.policy.FingerprintError):
        ea.policy.load_policy(path, other)

    with pytest.warns(Warning):
        ea.policy.load_policy(path, other, allow_mismatch=True)

    with pytest.raises(OSError):
        ea.policy.load_policy(os.path.join(tmp_path, "missing.pt"), geo)

    ea.geotrans.save_geo(os.path.join(tmp_path, "geo.pt"), geo)

    with pytest.raises(ValueError):
        ea.policy.load_policy(os.path.join(tmp_path, "geo.pt"), geo)


def test_agent():
    geo, connector, policy = _stack()
    agent = ea.policy.Agent(geo, connector, policy)
    demo = FakeDemo(0, 5)

    for t in range(5):
        left, right = demo.frame(t)
        action = agent.act(ea.simrobot.Observation(left, right, demo.states[t]))
        assert isinstance(action, ea.geom.ActionStep)
        assert 0 <= action.jaw_left <= policy.config.jaw_max
        assert len(agent.buffer) == min(t + 1, policy.config.chunk)

    agent.reset(1)
    assert len(agent.buffer) == 0
    assert agent.t == 0

    chunk = agent(demo.images[:1, 0], demo.images[:1, 1])
    assert chunk.shape == (3, ea.geom.ACTION_SIZE)
