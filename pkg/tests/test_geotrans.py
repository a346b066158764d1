import json
import os

import numpy as np
import plyfile
import pytest
import scipy.optimize
import torch

import EndoAct as ea


def _tiny(**kwargs):
    options = dict(
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
    options.update(kwargs)
    return ea.geotrans.GeoConfig(**options)


def _scenes(**kwargs):
    options = dict(
        width=16,
        height=16,
        focal_ratio=(0.6, 0.7),
        camera_height=(0.09, 0.1),
        tilt=0.05,
        patch_half_size=0.03,
        primitive_count=(0, 0),
    )
    options.update(kwargs)
    return ea.scenegen.RandomizationConfig(**options)


def _images(rng, batch, size=8):
    return rng.integers(0, 256, size=(batch, size, size, 3), dtype=np.uint8)


def _random_points(rng, shape):
    points = rng.normal(size=(*shape, 3))
    points[..., 2] = np.abs(points[..., 2]) + 1
    return torch.from_numpy(points)


def test_config_checks():
    with pytest.raises(ValueError):
        _tiny(patch_size=3)

    with pytest.raises(ValueError):
        _tiny(pyramid_taps=(1, 2, 4))

    with pytest.raises(ValueError):
        _tiny(pyramid_taps=(1, 3, 2, 4))

    with pytest.raises(ValueError):
        _tiny(pyramid_taps=(1, 2, 3, 3))

    with pytest.raises(ValueError):
        _tiny(alpha=0)

    with pytest.raises(ValueError):
        _tiny(enc_width=6, enc_heads=4)

    with pytest.raises(ValueError):
        ea.geotrans.GeoTrainConfig(epochs=0)

    config = _tiny(image_size=[8, 16])
    assert config.grid == (2, 4)
    assert config.num_patches == 8


def test_forward_shapes():
    torch.manual_seed(0)
    model = ea.geotrans.GeometryTransformer(_tiny())
    rng = np.random.default_rng(0)
    left = ea.geotrans.images_to_tensor(_images(rng, 2))
    right = ea.geotrans.images_to_tensor(_images(rng, 2))
    assert torch.all(left >= -1) and torch.all(left <= 1)

    prediction, pyramid = model(left, right)
    assert prediction.points.shape == (2, 2, 8, 8, 3)
    assert prediction.confidence.shape == (2, 2, 8, 8)
    assert torch.all(prediction.confidence > 1)
    assert pyramid.grid == (2, 2)
    assert len(pyramid.levels) == 4
    assert all(level.shape == (2, 2, 4, 4) for level in pyramid.levels)

    latent = model.latent(left, right)
    assert all(torch.allclose(a, b) for a, b in zip(latent.levels, pyramid.levels))

    with pytest.raises(ValueError):
        model(left[:, :, :4], right[:, :, :4])


def test_encoder_shared_weights():
    torch.manual_seed(2)
    model = ea.geotrans.GeometryTransformer(_tiny()).double()
    rng = np.random.default_rng(2)
    left = ea.geotrans.images_to_tensor(_images(rng, 2)).double()
    right = ea.geotrans.images_to_tensor(_images(rng, 2)).double()

    tokens = model.encode(left, right)
    swapped = model.encode(right, left)
    assert tokens.shape == (2, 2, 4, 4)
    assert torch.allclose(tokens[:, 0], swapped[:, 1], rtol=0, atol=1e-12)
    assert torch.allclose(tokens[:, 1], swapped[:, 0], rtol=0, atol=1e-12)
    assert not torch.allclose(tokens[:, 0], tokens[:, 1])


def test_decoder_cross_attention():
    torch.manual_seed(3)
    model = ea.geotrans.GeometryTransformer(_tiny()).double()
    rng = np.random.default_rng(3)
    left = ea.geotrans.images_to_tensor(_images(rng, 1)).double()
    right = ea.geotrans.images_to_tensor(_images(rng, 1)).double()

    tokens = model.encode(left, right)
    ref = model.decode(tokens)

    other = tokens.clone()
    other[:, 1] = 0
    out = model.decode(other)

    for a, b in zip(ref.levels, out.levels):
        assert not torch.allclose(a[:, 0], b[:, 0])


def test_latent_pyramid_checks():
    level = torch.zeros(1, 2, 4, 4)

    with pytest.raises(ValueError):
        ea.geotrans.LatentPyramid([level] * 3, (2, 2))

    with pytest.raises(ValueError):
        ea.geotrans.LatentPyramid([level] * 3 + [torch.zeros(1, 2, 4, 5)], (2, 2))


def test_predict():
    torch.manual_seed(0)
    model = ea.geotrans.GeometryTransformer(_tiny())
    model.train()
    rng = np.random.default_rng(1)
    left = _images(rng, 3)
    right = _images(rng, 3)
    points, confidence = model.predict(left, right)
    assert model.training
    assert points.shape == (3, 2, 8, 8, 3)
    assert confidence.shape == (3, 2, 8, 8)
    assert np.all(confidence > 1)

    other, _ = model.predict(left[:1], right[:1])
    assert np.allclose(other[0], points[0], atol=1e-5)


def test_normalize_scale():
    points = torch.zeros(2, 2, 2, 2, 3, dtype=torch.float64)
    points[..., 0] = 2.0
    points[1, 0, 0, 0] = torch.tensor([0.0, 0.0, 5.0])
    valid = torch.ones(2, 2, 2, 2, dtype=torch.bool)
    valid[1] = False
    valid[1, 0, 0, 0] = True
    assert torch.allclose(ea.geotrans.normalize_scale(points, valid), torch.tensor([2.0, 5.0], dtype=torch.float64))

    valid[1] = False

    with pytest.raises(ValueError):
        ea.geotrans.normalize_scale(points, valid)


def test_loss_reg_scale_invariance():
    rng = np.random.default_rng(2)
    points = _random_points(rng, (2, 2, 4, 4))
    gt = _random_points(rng, (2, 2, 4, 4))
    valid = torch.from_numpy(rng.uniform(size=(2, 2, 4, 4)) > 0.3)
    ref = ea.geotrans.loss_reg(points, gt, valid)
    assert ref.total > 0
    assert torch.all(ref.per_pixel[~valid] == 0)
    assert torch.isclose(ref.mean, ref.total / valid.sum())

    for scale in [0.1, 10.0]:
        a = ea.geotrans.loss_reg(scale * points, gt, valid)
        b = ea.geotrans.loss_reg(points, scale * gt, valid)
        assert float(a.total) == pytest.approx(float(ref.total), rel=1e-6)
        assert float(b.total) == pytest.approx(float(ref.total), rel=1e-6)

    assert float(ea.geotrans.loss_reg(3 * gt, gt, valid).total) == pytest.approx(0, abs=1e-12)


def test_loss_reg_per_item_scale():
    rng = np.random.default_rng(3)
    points = _random_points(rng, (2, 2, 3, 3))
    gt = _random_points(rng, (2, 2, 3, 3))
    valid = torch.ones(2, 2, 3, 3, dtype=torch.bool)
    ref = ea.geotrans.loss_reg(points, gt, valid)
    scale = torch.tensor([0.5, 4.0], dtype=torch.float64).reshape(2, 1, 1, 1, 1)
    other = ea.geotrans.loss_reg(scale * points, gt, valid)
    assert torch.allclose(other.per_pixel, ref.per_pixel)


def test_loss_conf_unit_confidence():
    rng = np.random.default_rng(4)
    points = _random_points(rng, (1, 2, 4, 4))
    gt = _random_points(rng, (1, 2, 4, 4))
    valid = torch.from_numpy(rng.uniform(size=(1, 2, 4, 4)) > 0.2)
    confidence = torch.ones(1, 2, 4, 4, dtype=torch.float64)
    reg = ea.geotrans.loss_reg(points, gt, valid)

    total = ea.geotrans.loss_conf(points, confidence, gt, valid, alpha=0.2)
    assert float(total) == pytest.approx(float(reg.total), rel=1e-12)

    mean = ea.geotrans.loss_conf(points, confidence, gt, valid, alpha=0.2, reduction="mean")
    assert float(mean) == pytest.approx(float(reg.mean), rel=1e-12)

    with pytest.raises(ValueError):
        ea.geotrans.loss_conf(points, confidence, gt, valid, alpha=0.2, reduction="max")


def test_loss_conf_optimal_confidence():
    points = torch.zeros(1, 2, 1, 1, 3, dtype=torch.float64)
    gt = torch.zeros(1, 2, 1, 1, 3, dtype=torch.float64)
    points[0, 0, 0, 0] = torch.tensor([1.0, 0.0, 0.0])
    gt[0, 0, 0, 0] = torch.tensor([0.0, 0.0, 1.0])
    valid = torch.tensor([True, False]).reshape(1, 2, 1, 1)
    alpha = 5.0

    reg = float(ea.geotrans.loss_reg(points, gt, valid).total)
    assert reg == pytest.approx(np.sqrt(2))

    def objective(c):
        confidence = torch.full((1, 2, 1, 1), c, dtype=torch.float64)
        return float(ea.geotrans.loss_conf(points, confidence, gt, valid, alpha))

    res = scipy.optimize.minimize_scalar(objective, bounds=(1e-3, 1e3), method="bounded", options=dict(xatol=1e-10))
    assert res.x == pytest.approx(alpha / reg, rel=1e-4)


def test_loss_gradients():
    rng = np.random.default_rng(5)
    points = _random_points(rng, (1, 2, 3, 3)).requires_grad_(True)
    gt = _random_points(rng, (1, 2, 3, 3))
    valid = torch.from_numpy(rng.uniform(size=(1, 2, 3, 3)) > 0.3)
    confidence = torch.from_numpy(1 + rng.uniform(size=(1, 2, 3, 3))).requires_grad_(True)

    assert torch.autograd.gradcheck(lambda p: ea.geotrans.loss_reg(p, gt, valid).total, (points,))
    assert torch.autograd.gradcheck(
        lambda p, c: ea.geotrans.loss_conf(p, c, gt, valid, 0.2, reduction="mean"),
        (points, confidence),
    )


def test_loss_masked_gradients():
    rng = np.random.default_rng(7)
    points = _random_points(rng, (2, 2, 4, 4)).requires_grad_(True)
    gt = _random_points(rng, (2, 2, 4, 4))
    valid = torch.from_numpy(rng.uniform(size=(2, 2, 4, 4)) > 0.5)
    valid[:, 0, 0, 0] = True
    confidence = torch.from_numpy(1 + rng.uniform(size=(2, 2, 4, 4))).requires_grad_(True)

    ea.geotrans.loss_conf(points, confidence, gt, valid, 0.2).backward()
    assert torch.all(points.grad[~valid] == 0)
    assert torch.all(confidence.grad[~valid] == 0)
    assert torch.any(points.grad[valid] != 0)
    assert torch.any(confidence.grad[valid] != 0)

    points.grad = None
    ea.geotrans.loss_reg(points, gt, valid).total.backward()
    assert torch.all(points.grad[~valid] == 0)

    # masked values are never read
    other = points.detach().clone()
    other[~valid] = 1e3
    garbage = confidence.detach().clone()
    garbage[~valid] = 50.0
    a = ea.geotrans.loss_conf(points.detach(), confidence.detach(), gt, valid, 0.2)
    b = ea.geotrans.loss_conf(other, garbage, gt, valid, 0.2)
    assert torch.equal(a, b)


def test_loss_gradients_model():
    torch.manual_seed(1)
    model = ea.geotrans.GeometryTransformer(_tiny()).double()
    parameters = list(model.parameters())
    sizes = [p.numel() for p in parameters]
    assert sum(sizes) <= 5000

    rng = np.random.default_rng(6)
    left = ea.geotrans.images_to_tensor(_images(rng, 1)).double()
    right = ea.geotrans.images_to_tensor(_images(rng, 1)).double()
    gt = _random_points(rng, (1, 2, 8, 8))
    valid = torch.from_numpy(rng.uniform(size=(1, 2, 8, 8)) > 0.2)

    def objective():
        prediction, _ = model(left, right)
        return ea.geotrans.loss_conf(prediction.points, prediction.confidence, gt, valid, 0.2, "mean")

    objective().backward()
    grad = torch.cat([p.grad.flatten() for p in parameters])
    offsets = np.cumsum([0] + sizes)

    eps = 1e-5
    with torch.no_grad():
        for index in rng.choice(offsets[-1], size=100, replace=False):
            i = np.searchsorted(offsets, index, side="right") - 1
            weight = parameters[i].view(-1)
            j = index - offsets[i]
            weight[j] += eps
            plus = float(objective())
            weight[j] -= 2 * eps
            minus = float(objective())
            weight[j] += eps
            numeric = (plus - minus) / (2 * eps)
            analytic = float(grad[index])
            assert abs(numeric - analytic) / max(abs(numeric) + abs(analytic), 1e-5) < 1e-4


def test_fingerprint_and_checkpoint(tmp_path):
    ea.geotrans.seed_everything(7)
    model = ea.geotrans.GeometryTransformer(_tiny())
    ea.geotrans.seed_everything(7)
    same = ea.geotrans.GeometryTransformer(_tiny())
    ea.geotrans.seed_everything(8)
    other = ea.geotrans.GeometryTransformer(_tiny())
    assert ea.geotrans.fingerprint(model) == ea.geotrans.fingerprint(same)
    assert ea.geotrans.fingerprint(model) != ea.geotrans.fingerprint(other)

    path = os.path.join(tmp_path, "ckpt", "geo.pt")
    ea.geotrans.save_geo(path, model, seed=7, provenance=dict(config={"seed": 7}))
    loaded, meta = ea.geotrans.load_geo(path)
    assert not loaded.training
    assert meta["seed"] == 7
    assert meta["kind"] == "geotrans"
    assert meta["format_version"] == ea.geotrans.CHECKPOINT_FORMAT
    assert meta["fingerprint"] == ea.geotrans.fingerprint(model)
    assert ea.geotrans.fingerprint(loaded) == ea.geotrans.fingerprint(model)
    assert meta["provenance"]["config"]["seed"] == 7

    rng = np.random.default_rng(0)
    left = _images(rng, 1)
    right = _images(rng, 1)
    a, ca = model.predict(left, right)
    b, cb = loaded.predict(left, right)
    assert np.allclose(a, b)
    assert np.allclose(ca, cb)

    with pytest.raises(OSError):
        ea.geotrans.load_geo(os.path.join(tmp_path, "missing.pt"))

    wrong = os.path.join(tmp_path, "wrong.pt")
    torch.save(dict(kind="policy"), wrong)

    with pytest.raises(ValueError):
        ea.geotrans.load_geo(wrong)


def test_scale_aligned_error():
    rng = np.random.default_rng(9)
    gt = rng.normal(size=(5, 4, 3))
    valid = rng.uniform(size=(5, 4)) > 0.4
    assert np.allclose(ea.geotrans.scale_aligned_error(0.25 * gt, gt, valid), 0)
    assert ea.geotrans.scale_aligned_error(0.25 * gt, gt, valid).shape == (np.sum(valid),)

    noisy = gt + 0.1 * rng.normal(size=gt.shape)
    assert np.all(ea.geotrans.scale_aligned_error(noisy, gt, valid) >= 0)


def test_export_pointcloud(tmp_path):
    rng = np.random.default_rng(10)
    points = rng.normal(size=(4, 5, 3))
    points[..., 2] = np.abs(points[..., 2]) + 0.1
    points[0, 0, 2] = -1.0
    points[0, 1] = np.nan
    confidence = 1.5 + rng.uniform(size=(4, 5))
    confidence[1, :] = 1.0
    colors = rng.integers(0, 256, size=(4, 5, 3), dtype=np.uint8)

    path = os.path.join(tmp_path, "cloud.ply")
    count = ea.geotrans.export_pointcloud(points, confidence, colors, path, threshold=1.01)
    keep = ea.scenegen.confidence_filter(points, confidence, 1.01)
    assert count == np.sum(keep)
    assert count == 20 - 2 - 5

    vertex = plyfile.PlyData.read(path)["vertex"]
    assert len(vertex) == count
    xyz = np.stack((vertex["x"], vertex["y"], vertex["z"]), axis=-1)
    rgb = np.stack((vertex["red"], vertex["green"], vertex["blue"]), axis=-1)
    assert np.allclose(xyz, points[keep], rtol=1e-6, atol=1e-9)
    assert np.all(rgb == colors[keep])


def test_bench():
    model = ea.geotrans.GeometryTransformer(_tiny())
    ret = ea.geotrans.bench(model, runs=4, warmup=1)
    assert ret["runs"] == 4
    assert len(ret["timings_ms"]) == 4
    assert ret["mean_ms"] > 0
    json.dumps(ret)

    calls = []
    ret = ea.geotrans.bench(model, runs=2, warmup=0, stack=lambda left, right: calls.append(left.shape))
    assert ret["runs"] == 2
    assert calls == [(1, 8, 8, 3)] * 2

    with pytest.raises(ValueError):
        ea.geotrans.bench(model, runs=0)


def test_dataset(tmp_path):
    config = _scenes(seed=3)
    ea.scenegen.generate_dataset(config, os.path.join(tmp_path, "a"), 2, silent=True)
    ea.scenegen.generate_dataset(config, os.path.join(tmp_path, "b"), 1, start=2, silent=True)
    dataset = ea.geotrans.GeoDataset.from_directories([os.path.join(tmp_path, "a"), os.path.join(tmp_path, "b")])
    assert len(dataset) == 3

    item = dataset[2]
    assert item["left"].shape == (3, 16, 16)
    assert item["points"].shape == (2, 16, 16, 3)
    assert item["valid"].dtype == torch.bool
    assert torch.any(item["valid"])

    os.makedirs(os.path.join(tmp_path, "empty"))

    with pytest.raises(ValueError):
        ea.geotrans.GeoDataset.from_directories([os.path.join(tmp_path, "empty")])


def test_train_geo(tmp_path):
    config = _scenes(seed=4)
    samples = [ea.scenegen.render_stereo(*ea.scenegen.sample_scene(config, i)) for i in range(5)]
    dataset = [ea.geotrans.sample_to_batch(sample) for sample in samples[:4]]
    geo = _tiny(image_size=(16, 16))
    train = ea.geotrans.GeoTrainConfig(epochs=2, batch_size=3, device="cpu")
    directory = os.path.join(tmp_path, "geo")

    model = ea.geotrans.train_geo(dataset, directory, geo, train, seed=1, held_out=samples[4:], silent=True)
    assert not model.training

    lines = ea.plot.read_jsonl(os.path.join(directory, "metrics.jsonl"))
    assert len(lines) == 4
    assert [line["step"] for line in lines] == [0, 1, 2, 3]
    assert [line["epoch"] for line in lines] == [0, 0, 1, 1]
    assert all(np.isfinite(line["loss_conf"]) for line in lines)

    evals = ea.plot.read_jsonl(os.path.join(directory, "eval.jsonl"))
    assert len(evals) == 2
    assert evals[-1]["relative_error"] == pytest.approx(evals[-1]["median_error"] / evals[-1]["depth_range"])

    loaded, meta = ea.geotrans.load_geo(os.path.join(directory, "geo.pt"))
    assert meta["fingerprint"] == ea.geotrans.fingerprint(model)

    again = ea.geotrans.train_geo(dataset, os.path.join(tmp_path, "again"), geo, train, seed=1, silent=True)
    assert ea.geotrans.fingerprint(again) == ea.geotrans.fingerprint(model)


def test_train_geo_overfit(tmp_path):
    sample = ea.scenegen.render_stereo(*ea.scenegen.sample_scene(_scenes(seed=5), 0))
    dataset = [ea.geotrans.sample_to_batch(sample)]
    geo = _tiny(image_size=(16, 16), enc_width=16, dec_width=16, head_width=16)
    train = ea.geotrans.GeoTrainConfig(epochs=400, batch_size=1, lr=3e-3, weight_decay=0, device="cpu")
    ea.geotrans.train_geo(dataset, str(tmp_path), geo, train, seed=0, silent=True)

    # the confidence objective is unbounded below, its regression term is not
    loss = np.array([line["loss_reg_mean"] for line in ea.plot.read_jsonl(os.path.join(tmp_path, "metrics.jsonl"))])
    assert len(loss) == 400
    quarters = [np.mean(part) for part in np.split(loss, 4)]
    assert all(b < a for a, b in zip(quarters[:-1], quarters[1:]))
    assert np.mean(loss[-10:]) < 0.05 * loss[0]


def test_train_geo_divergence(tmp_path):
    sample = ea.scenegen.render_stereo(*ea.scenegen.sample_scene(_scenes(seed=6), 0))
    item = ea.geotrans.sample_to_batch(sample)
    item["points"] = torch.where(item["valid"][..., None], torch.nan, item["points"])
    train = ea.geotrans.GeoTrainConfig(epochs=1, batch_size=1, device="cpu")

    with pytest.raises(ea.geotrans.DivergenceError) as error:
        ea.geotrans.train_geo([item], str(tmp_path), _tiny(image_size=(16, 16)), train, silent=True)

    assert error.value.checkpoint == os.path.join(tmp_path, "geo.pt")
    assert os.path.isfile(error.value.checkpoint)
