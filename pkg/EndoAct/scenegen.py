"""
Procedural stereo endoscopic scenes with exact ground-truth point maps.

*   Domain-randomised scene sampling: :py:func:`sample_scene`.
*   Ray casting with ambient + Lambertian shading: :py:func:`raycast`, :py:func:`render_stereo`.
*   Sample/dataset I/O: :py:func:`write_sample`, :py:func:`read_sample`,
    :py:func:`generate_dataset`, :py:func:`list_samples`.
*   Confidence-thresholded pseudo-labelling: :py:func:`pseudo_label`.

The world frame has z pointing up, the tissue is a height-field over the square patch
``[-patch_half_size, patch_half_size]^2``.
Primitives (spheres, capsules) are expressed in the world frame.
Everything returned to the user (point maps, hits) is expressed in the left camera frame.
"""
from __future__ import annotations

import glob
import json
import os
import warnings
from collections import namedtuple
from dataclasses import dataclass
from dataclasses import field
from dataclasses import fields

import numpy as np
import tqdm
from numpy.typing import ArrayLike
from PIL import Image
from scipy.spatial.transform import Rotation

from . import geom

GENERATOR_VERSION = 1
POINTMAP_MAGIC = b"S3DP"
POINTMAP_VERSION = 1
MAX_ATTEMPTS = 100
MAX_SLOPE = 0.5
MIN_DOWNWARD = 0.6
MIN_VALID_FRACTION = 0.05
BISECTION_STEPS = 64

MISS = -1
TISSUE = 0

_HEADER_SIZE = 16
_TISSUE_COLOR = np.array([[0.6, 0.2, 0.2], [0.9, 0.45, 0.4]])


class FormatError(OSError):
    """
    Malformed point-map file.

    :param path: The offending file.
    :param message: What is wrong.
    """

    def __init__(self, path: str, message: str):
        super().__init__(f'"{path}": {message}')
        self.path = path


class TruncatedError(FormatError):
    """
    Payload shorter than announced by the header.
    """


class DimensionError(FormatError):
    """
    Dimensions inconsistent between header, payload, images, or rig.
    """


class FrustumError(RuntimeError):
    """
    No scene found that keeps the surface inside the frustum of both cameras.

    :param message: Description.
    :param parameters: The parameters of the last rejected draw.
    """

    def __init__(self, message: str, parameters: dict):
        super().__init__(f"{message}: {parameters}")
        self.parameters = parameters


def _as_range(value, name: str) -> tuple[float, float]:
    lo, hi = (float(i) for i in value)
    if not lo <= hi:
        raise ValueError(f'Range "{name}" is empty: [{lo}, {hi}]')
    return lo, hi


@dataclass
class RandomizationConfig:
    """
    Domain randomisation ranges. Every range is ``(lower, upper)``.

    :param width: Image width [px].
    :param height: Image height [px].
    :param focal_ratio: Focal length relative to the image width ``fx / width``.
    :param principal_jitter: Maximal offset of the principal point from the image centre [px].
    :param baseline: Stereo baseline [m], within [2, 8] mm.
    :param tilt: Maximal tilt of the rig from looking straight down [rad].
    :param camera_height: Height of the left camera above the mean tissue level [m].
    :param camera_shift: Maximal horizontal offset of the camera [m].
    :param patch_half_size: Half of the edge of the tissue patch [m].
    :param amplitude: Summed amplitude of the height-field [m].
    :param wavelength: Wavelength of the height-field components [m].
    :param wave_count: Number of height-field components.
    :param light_offset: Maximal offset of the point light from the camera [m].
    :param light_intensity: Intensity of the point light.
    :param ambient: Ambient light level (within [0, 1]).
    :param texture_frequency: Angular frequency of the albedo pattern [rad/m].
    :param texture_contrast: Contrast of the albedo pattern (within [0, 1]).
    :param primitive_count: Number of embedded primitives.
    :param primitive_radius: Radius of the embedded primitives [m].
    :param seed: Master seed.
    """

    width: int = 96
    height: int = 96
    focal_ratio: tuple[float, float] = (1.05, 1.35)
    principal_jitter: float = 2.0
    baseline: tuple[float, float] = (0.003, 0.006)
    tilt: float = 0.14
    camera_height: tuple[float, float] = (0.06, 0.1)
    camera_shift: float = 0.002
    patch_half_size: float = 0.012
    amplitude: tuple[float, float] = (0.0, 0.003)
    wavelength: tuple[float, float] = (0.006, 0.02)
    wave_count: int = 4
    light_offset: float = 0.02
    light_intensity: tuple[float, float] = (0.6, 1.0)
    ambient: tuple[float, float] = (0.1, 0.3)
    texture_frequency: tuple[float, float] = (200.0, 800.0)
    texture_contrast: tuple[float, float] = (0.1, 0.5)
    primitive_count: tuple[int, int] = (0, 2)
    primitive_radius: tuple[float, float] = (0.001, 0.003)
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.type.startswith("tuple"):
                setattr(self, f.name, _as_range(getattr(self, f.name), f.name))

        self.primitive_count = tuple(int(i) for i in self.primitive_count)

        if self.width <= 0 or self.height <= 0:
            raise ValueError("Image dimensions must be positive")
        if self.focal_ratio[0] <= 0:
            raise ValueError("Focal length must be positive")
        if self.principal_jitter < 0 or self.principal_jitter >= min(self.width, self.height) / 2:
            raise ValueError("Principal point jitter must keep the principal point inside the image")
        if self.baseline[0] < 0.002 or self.baseline[1] > 0.008:
            raise ValueError("Baseline must lie in [2, 8] mm")
        if not 0 <= self.tilt < np.pi / 4:
            raise ValueError("Tilt must lie in [0, pi/4)")
        if self.camera_height[0] - self.amplitude[1] < 0.04:
            raise ValueError("Camera too close: working depth starts at 40 mm")
        if self.camera_height[1] + self.amplitude[1] > 0.12:
            raise ValueError("Camera too far: working depth ends at 120 mm")
        if self.patch_half_size <= 0 or self.camera_shift < 0 or self.light_offset < 0:
            raise ValueError("Lengths must be positive")
        if self.amplitude[0] < 0 or self.wavelength[0] <= 0 or self.wave_count < 0:
            raise ValueError("Height-field parameters must be positive")
        if self.ambient[0] < 0 or self.ambient[1] > 1:
            raise ValueError("Ambient must lie in [0, 1]")
        if self.texture_contrast[0] < 0 or self.texture_contrast[1] > 1:
            raise ValueError("Texture contrast must lie in [0, 1]")
        if self.light_intensity[0] < 0 or self.texture_frequency[0] < 0:
            raise ValueError("Light intensity and texture frequency must be positive")
        if self.primitive_count[0] < 0 or self.primitive_radius[0] <= 0:
            raise ValueError("Primitive parameters must be positive")


@dataclass(eq=False)
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray = field(default_factory=lambda: np.full(3, 0.7))

    def to_json(self) -> dict:
        return dict(
            kind="sphere",
            center=np.asarray(self.center, dtype=float).tolist(),
            radius=float(self.radius),
            albedo=np.asarray(self.albedo, dtype=float).tolist(),
        )


@dataclass(eq=False)
class Capsule:
    """
    Segment ``start``-``end`` swept by a sphere of radius ``radius``.
    """

    start: np.ndarray
    end: np.ndarray
    radius: float
    albedo: np.ndarray = field(default_factory=lambda: np.full(3, 0.7))

    def to_json(self) -> dict:
        return dict(
            kind="capsule",
            start=np.asarray(self.start, dtype=float).tolist(),
            end=np.asarray(self.end, dtype=float).tolist(),
            radius=float(self.radius),
            albedo=np.asarray(self.albedo, dtype=float).tolist(),
        )


def primitive_from_json(data: dict) -> Sphere | Capsule:
    data = dict(data)
    kind = data.pop("kind")
    data = {key: np.array(value) if isinstance(value, list) else value for key, value in data.items()}
    return {"sphere": Sphere, "capsule": Capsule}[kind](**data)


def downward_camera(position: ArrayLike, tilt: ArrayLike = (0, 0, 0)) -> geom.Pose:
    """
    Pose (in the world) of a camera looking straight down (image x along world x),
    optionally tilted.

    :param position: Camera position in the world [m].
    :param tilt: Rotation vector applied (in the world frame) on top of looking down [rad].
    :return: The camera pose.
    """
    rotation = Rotation.from_rotvec(np.asarray(tilt, dtype=float)).as_matrix()
    return geom.Pose(rotation @ np.diag([1.0, -1.0, -1.0]), position)


@dataclass(eq=False)
class SceneSpec:
    """
    A procedural scene. The tissue height is::

        h(x, y) = sum_k amplitudes[k] * sin(wavevectors[k] . (x, y) + phases[k])

    :param camera_pose: Pose of the left camera in the world.
    :param patch_half_size: Half of the edge of the tissue patch [m].
    :param amplitudes: Height-field amplitudes ``(K,)`` [m].
    :param wavevectors: Height-field wave-vectors ``(K, 2)`` [rad/m].
    :param phases: Height-field phases ``(K,)`` [rad].
    :param tissue_albedo: Mean RGB albedo of the tissue.
    :param texture_frequency: Angular frequency of the albedo pattern [rad/m].
    :param texture_contrast: Contrast of the albedo pattern.
    :param texture_phase: Phases of the albedo pattern along x and y [rad].
    :param light_position: Point-light position in the world [m].
    :param light_intensity: Point-light intensity.
    :param ambient: Ambient light level.
    :param primitives: Embedded spheres and capsules.
    :param seed: Master seed the scene was drawn with.
    :param scene_id: Index of the scene.
    """

    camera_pose: geom.Pose
    patch_half_size: float = 0.012
    amplitudes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    wavevectors: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    phases: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tissue_albedo: np.ndarray = field(default_factory=lambda: np.array([0.8, 0.35, 0.3]))
    texture_frequency: float = 0.0
    texture_contrast: float = 0.0
    texture_phase: np.ndarray = field(default_factory=lambda: np.zeros(2))
    light_position: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.1]))
    light_intensity: float = 1.0
    ambient: float = 0.2
    primitives: list = field(default_factory=list)
    seed: int = 0
    scene_id: int = 0

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=float).reshape(-1)
        self.wavevectors = np.asarray(self.wavevectors, dtype=float).reshape(-1, 2)
        self.phases = np.asarray(self.phases, dtype=float).reshape(-1)
        self.tissue_albedo = np.asarray(self.tissue_albedo, dtype=float)
        self.texture_phase = np.asarray(self.texture_phase, dtype=float)
        self.light_position = np.asarray(self.light_position, dtype=float)

        if not (self.amplitudes.size == self.phases.size == self.wavevectors.shape[0]):
            raise ValueError("Height-field components inconsistent")
        if not np.all(np.isfinite(self.amplitudes)) or not np.all(np.isfinite(self.wavevectors)):
            raise ValueError("Height-field must be finite")

    @property
    def max_height(self) -> float:
        """
        Upper bound of ``|h|``.
        """
        return float(np.sum(np.abs(self.amplitudes)))

    @property
    def max_slope(self) -> float:
        """
        Upper bound of ``|grad h|``.
        """
        return float(np.sum(np.abs(self.amplitudes) * np.linalg.norm(self.wavevectors, axis=1)))

    def _argument(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return x[..., None] * self.wavevectors[:, 0] + y[..., None] * self.wavevectors[:, 1] + self.phases

    def height(self, x: ArrayLike, y: ArrayLike) -> np.ndarray:
        return np.sin(self._argument(x, y)) @ self.amplitudes

    def gradient(self, x: ArrayLike, y: ArrayLike) -> np.ndarray:
        """
        ``(..., 2)`` gradient of the height.
        """
        return (np.cos(self._argument(x, y)) * self.amplitudes) @ self.wavevectors

    def height_grid(self, n: int = 64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        The height-field sampled on a regular grid.

        :param n: Number of grid points along each axis.
        :return: ``(x, y, h)`` each ``(n, n)``.
        """
        line = np.linspace(-self.patch_half_size, self.patch_half_size, n)
        x, y = np.meshgrid(line, line, indexing="xy")
        return x, y, self.height(x, y)

    def albedo(self, x: ArrayLike, y: ArrayLike) -> np.ndarray:
        """
        ``(..., 3)`` tissue albedo.
        """
        f = self.texture_frequency
        pattern = 0.5 + 0.5 * np.sin(f * np.asarray(x) + self.texture_phase[0]) * np.sin(
            f * np.asarray(y) + self.texture_phase[1]
        )
        scale = 1 - self.texture_contrast + self.texture_contrast * pattern
        return np.clip(scale[..., None] * self.tissue_albedo, 0, 1)

    def to_json(self) -> dict:
        return dict(
            camera_pose=self.camera_pose.to_json(),
            patch_half_size=float(self.patch_half_size),
            amplitudes=self.amplitudes.tolist(),
            wavevectors=self.wavevectors.tolist(),
            phases=self.phases.tolist(),
            tissue_albedo=self.tissue_albedo.tolist(),
            texture_frequency=float(self.texture_frequency),
            texture_contrast=float(self.texture_contrast),
            texture_phase=self.texture_phase.tolist(),
            light_position=self.light_position.tolist(),
            light_intensity=float(self.light_intensity),
            ambient=float(self.ambient),
            primitives=[p.to_json() for p in self.primitives],
            seed=int(self.seed),
            scene_id=int(self.scene_id),
        )

    @classmethod
    def from_json(cls, data: dict) -> SceneSpec:
        data = dict(data)
        data["camera_pose"] = geom.Pose.from_json(data["camera_pose"])
        data["primitives"] = [primitive_from_json(p) for p in data["primitives"]]
        return cls(**data)


@dataclass(eq=False)
class Sample:
    """
    One stereo observation with ground truth.
    Both point maps are expressed in the left camera frame.
    """

    left: np.ndarray
    right: np.ndarray
    pointmap_left: geom.PointMap
    pointmap_right: geom.PointMap
    rig: geom.StereoRig
    seed: int = 0
    scene_id: int = 0
    source: str = "synthetic"


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def _check_frustum(scene: SceneSpec, rig: geom.StereoRig) -> bool:
    """
    Check that the full patch is seen by both cameras,
    and that all pixel rays are steep enough for the height along a ray to be monotonic.
    """
    world_to_left = scene.camera_pose.inverse()
    s = scene.patch_half_size
    a = scene.max_height
    corners = np.array([[x, y, z] for x in (-s, s) for y in (-s, s) for z in (-a, a)])
    corners = world_to_left.apply(corners)

    for camera in ["left", "right"]:
        try:
            pixels = geom.project(rig, corners, camera)
        except ValueError:
            return False
        if np.any(pixels < -0.5) or np.any(pixels[:, 0] > rig.width - 0.5):
            return False
        if np.any(pixels[:, 1] > rig.height - 0.5):
            return False

        _, directions = geom.pixel_rays(rig, camera)
        directions = directions[[0, 0, -1, -1], [0, -1, 0, -1]] @ scene.camera_pose.rotation.T
        if np.any(directions[:, 2] > -MIN_DOWNWARD):
            return False

    return True


def sample_scene(config: RandomizationConfig, index: int) -> tuple[SceneSpec, geom.StereoRig]:
    """
    Draw a random scene and stereo rig.
    The result only depends on ``(config.seed, index)``.

    :param config: Randomisation ranges.
    :param index: Index of the scene.
    :return: ``(scene, rig)``.
    """
    rng = np.random.default_rng([config.seed, index])
    w, h = config.width, config.height

    for _ in range(MAX_ATTEMPTS):
        fx = _uniform(rng, config.focal_ratio) * w
        cx = (w - 1) / 2 + rng.uniform(-1, 1) * config.principal_jitter
        cy = (h - 1) / 2 + rng.uniform(-1, 1) * config.principal_jitter
        baseline = _uniform(rng, config.baseline)
        rig = geom.StereoRig(w, h, geom.Intrinsics(fx, fx, cx, cy), baseline)

        axis = rng.normal(size=2)
        axis = np.append(axis / np.linalg.norm(axis), 0.0)
        tilt = axis * rng.uniform(0, config.tilt)
        position = np.array(
            [
                rng.uniform(-1, 1) * config.camera_shift,
                rng.uniform(-1, 1) * config.camera_shift,
                _uniform(rng, config.camera_height),
            ]
        )
        camera_pose = downward_camera(position, tilt)

        n = config.wave_count
        weights = rng.uniform(0.5, 1.0, size=n)
        amplitudes = _uniform(rng, config.amplitude) * weights / np.sum(weights)
        angle = rng.uniform(0, 2 * np.pi, size=n)
        wavenumber = 2 * np.pi / rng.uniform(*config.wavelength, size=n)
        wavevectors = wavenumber[:, None] * np.stack((np.cos(angle), np.sin(angle)), axis=-1)
        phases = rng.uniform(0, 2 * np.pi, size=n)
        slope = np.sum(amplitudes * wavenumber)
        if slope > MAX_SLOPE:
            amplitudes *= MAX_SLOPE / slope

        scene = SceneSpec(
            camera_pose=camera_pose,
            patch_half_size=config.patch_half_size,
            amplitudes=amplitudes,
            wavevectors=wavevectors,
            phases=phases,
            tissue_albedo=rng.uniform(_TISSUE_COLOR[0], _TISSUE_COLOR[1]),
            texture_frequency=_uniform(rng, config.texture_frequency),
            texture_contrast=_uniform(rng, config.texture_contrast),
            texture_phase=rng.uniform(0, 2 * np.pi, size=2),
            light_position=position
            + rng.uniform(-1, 1, size=3) * config.light_offset * np.array([1, 1, 0.5]),
            light_intensity=_uniform(rng, config.light_intensity),
            ambient=_uniform(rng, config.ambient),
            seed=config.seed,
            scene_id=index,
        )

        lo, hi = config.primitive_count
        for _ in range(int(rng.integers(lo, hi + 1))):
            radius = _uniform(rng, config.primitive_radius)
            x, y = rng.uniform(-0.6, 0.6, size=2) * config.patch_half_size
            base = np.array([x, y, scene.height(x, y) + 0.5 * radius])
            albedo = np.full(3, rng.uniform(0.5, 0.8))
            if rng.uniform() < 0.5:
                scene.primitives.append(Sphere(base, radius, albedo))
            else:
                direction = rng.uniform(-1, 1, size=2) * 2 * radius
                end = base + np.append(direction, 0.0)
                scene.primitives.append(Capsule(base, end, 0.5 * radius, albedo))

        if _check_frustum(scene, rig):
            return scene, rig

    raise FrustumError(
        f"No valid scene after {MAX_ATTEMPTS} attempts",
        dict(fx=fx, cx=cx, cy=cy, baseline=baseline, tilt=tilt.tolist(), position=position.tolist()),
    )


Hits = namedtuple("Hits", ["distance", "points", "normals", "albedo", "kind"])
"""
Result of :py:func:`raycast` (left camera frame):

*   ``distance``: ray parameter of the hit (``inf`` for a miss).
*   ``points``: ``(..., 3)`` hit points.
*   ``normals``: ``(..., 3)`` unit surface normals.
*   ``albedo``: ``(..., 3)`` albedo at the hit.
*   ``kind``: ``-1`` miss, ``0`` tissue, ``k + 1`` primitive ``k``.
"""


def _intersect_tissue(scene: SceneSpec, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    """
    Ray parameter of the first tissue hit (``inf`` if none).
    Relies on the height along each ray being monotonic.
    """
    n = d.shape[0]
    s = scene.patch_half_size
    a = scene.max_height + 1e-9
    t_in = np.zeros(n)
    t_out = np.full(n, np.inf)

    with np.errstate(divide="ignore", invalid="ignore"):
        for axis in range(2):
            parallel = d[:, axis] == 0
            inside = np.abs(o[:, axis]) <= s
            t1 = (-s - o[:, axis]) / d[:, axis]
            t2 = (s - o[:, axis]) / d[:, axis]
            lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
            hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
            t_in = np.maximum(t_in, lo)
            t_out = np.minimum(t_out, hi)

        down = d[:, 2] < 0
        t_in = np.where(down, np.maximum(t_in, (o[:, 2] - a) / -d[:, 2]), np.inf)
        t_out = np.where(down, np.minimum(t_out, (o[:, 2] + a) / -d[:, 2]), -np.inf)

    def f(t):
        p = o + t[:, None] * d
        return p[:, 2] - scene.height(p[:, 0], p[:, 1])

    candidate = t_in <= t_out
    lo = np.where(candidate, t_in, 0.0)
    hi = np.where(candidate, t_out, 0.0)
    hit = candidate & (f(lo) >= 0) & (f(hi) <= 0)

    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        above = f(mid) > 0
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)

    return np.where(hit, 0.5 * (lo + hi), np.inf)


def _intersect_sphere(o: np.ndarray, d: np.ndarray, center: ArrayLike, radius: float) -> np.ndarray:
    oc = o - center
    b = np.sum(d * oc, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius**2
    disc = b**2 - c
    with np.errstate(invalid="ignore"):
        t = -b - np.sqrt(disc)
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def _intersect_capsule(o: np.ndarray, d: np.ndarray, capsule: Capsule) -> np.ndarray:
    """
    First hit with the union of the (finite) cylinder and the two end spheres.
    """
    pa = np.asarray(capsule.start, dtype=float)
    ba = np.asarray(capsule.end, dtype=float) - pa
    oa = o - pa
    baba = ba @ ba
    bard = d @ ba
    baoa = oa @ ba
    rdoa = np.sum(d * oa, axis=-1)
    oaoa = np.sum(oa * oa, axis=-1)
    a = baba - bard**2
    b = baba * rdoa - baoa * bard
    c = baba * oaoa - baoa**2 - capsule.radius**2 * baba
    h = b**2 - a * c

    with np.errstate(divide="ignore", invalid="ignore"):
        t = (-b - np.sqrt(h)) / a
        y = baoa + t * bard
        body = (a > 1e-12 * baba) & (h >= 0) & (t > 0) & (y > 0) & (y < baba)

    t_body = np.where(body, t, np.inf)
    t_start = _intersect_sphere(o, d, pa, capsule.radius)
    t_end = _intersect_sphere(o, d, capsule.end, capsule.radius)
    return np.minimum(t_body, np.minimum(t_start, t_end))


def _capsule_normal(p: np.ndarray, capsule: Capsule) -> np.ndarray:
    pa = np.asarray(capsule.start, dtype=float)
    ba = np.asarray(capsule.end, dtype=float) - pa
    s = np.clip(((p - pa) @ ba) / max(ba @ ba, 1e-30), 0, 1)
    return p - (pa + s[:, None] * ba)


def raycast(scene: SceneSpec, origins: ArrayLike, directions: ArrayLike) -> Hits:
    """
    Cast rays against the tissue and the primitives; the nearest hit wins.

    :param scene: The scene.
    :param origins: Ray origins ``(..., 3)`` in the left camera frame [m].
    :param directions: Ray directions ``(..., 3)`` in the left camera frame (need not be normalised).
    :return: :py:data:`Hits` in the left camera frame.
    """
    directions = np.asarray(directions, dtype=float)
    shape = directions.shape[:-1]
    origins = np.broadcast_to(np.asarray(origins, dtype=float), directions.shape)

    pose = scene.camera_pose
    o = pose.apply(origins.reshape(-1, 3))
    d = directions.reshape(-1, 3) @ pose.rotation.T
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)

    t = _intersect_tissue(scene, o, d)
    kind = np.where(np.isfinite(t), TISSUE, MISS)

    for i, primitive in enumerate(scene.primitives):
        if isinstance(primitive, Sphere):
            ti = _intersect_sphere(o, d, primitive.center, primitive.radius)
        else:
            ti = _intersect_capsule(o, d, primitive)
        closer = ti < t
        t = np.where(closer, ti, t)
        kind = np.where(closer, i + 1, kind)

    hit = kind != MISS
    p = o + np.where(hit, t, 0.0)[:, None] * d
    p[:, 2] = np.where(kind == TISSUE, scene.height(p[:, 0], p[:, 1]), p[:, 2])

    grad = scene.gradient(p[:, 0], p[:, 1])
    normals = np.stack((-grad[:, 0], -grad[:, 1], np.ones(len(p))), axis=-1)
    albedo = scene.albedo(p[:, 0], p[:, 1])

    for i, primitive in enumerate(scene.primitives):
        mine = kind == i + 1
        if not np.any(mine):
            continue
        if isinstance(primitive, Sphere):
            normals[mine] = p[mine] - primitive.center
        else:
            normals[mine] = _capsule_normal(p[mine], primitive)
        albedo[mine] = primitive.albedo

    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    p[~hit] = 0.0
    normals[~hit] = 0.0
    albedo[~hit] = 0.0

    inverse = pose.inverse()

    return Hits(
        distance=t.reshape(shape),
        points=inverse.apply(p).reshape(*shape, 3) * hit.reshape(*shape, 1),
        normals=(normals @ pose.rotation).reshape(*shape, 3),
        albedo=albedo.reshape(*shape, 3),
        kind=kind.reshape(shape),
    )


def srgb(linear: ArrayLike) -> np.ndarray:
    """
    Encode linear intensities in [0, 1] as 8-bit sRGB.
    """
    c = np.clip(np.asarray(linear, dtype=float), 0, 1)
    c = np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)
    return np.round(255 * c).astype(np.uint8)


def shade(scene: SceneSpec, hits: Hits) -> np.ndarray:
    """
    Ambient + Lambertian point-light shading, background black.

    :param scene: The scene (for the light).
    :param hits: Output of :py:func:`raycast`.
    :return: 8-bit sRGB image.
    """
    light = scene.camera_pose.inverse().apply(scene.light_position)
    to_light = light - hits.points
    to_light /= np.linalg.norm(to_light, axis=-1, keepdims=True)
    lambert = np.clip(np.sum(hits.normals * to_light, axis=-1), 0, None)
    intensity = scene.ambient + scene.light_intensity * lambert
    linear = hits.albedo * intensity[..., None] * (hits.kind != MISS)[..., None]
    return srgb(linear)


def render_view(scene: SceneSpec, rig: geom.StereoRig, camera: str) -> tuple[np.ndarray, geom.PointMap]:
    """
    Render one camera.

    :return: Image and point map (left camera frame, float32).
    """
    origin, directions = geom.pixel_rays(rig, camera)
    hits = raycast(scene, origin, directions)
    valid = hits.kind != MISS
    pointmap = geom.PointMap(hits.points.astype(np.float32), valid)
    return shade(scene, hits), pointmap


def render_stereo(scene: SceneSpec, rig: geom.StereoRig) -> Sample:
    """
    Render a stereo pair with ground-truth point maps.

    :param scene: The scene.
    :param rig: The stereo rig (left camera at ``scene.camera_pose``).
    :return: The sample.
    """
    left, pointmap_left = render_view(scene, rig, "left")
    right, pointmap_right = render_view(scene, rig, "right")
    return Sample(left, right, pointmap_left, pointmap_right, rig, scene.seed, scene.scene_id)


def write_pointmap(path: str, pointmap: geom.PointMap):
    """
    Write a point map in the binary "S3DP" format.
    """
    h, w = pointmap.shape
    with open(path, "wb") as file:
        file.write(POINTMAP_MAGIC)
        file.write(np.array([POINTMAP_VERSION, h, w], dtype="<u4").tobytes())
        file.write(np.ascontiguousarray(pointmap.points, dtype="<f4").tobytes())
        file.write(pointmap.valid.astype(np.uint8).tobytes())


def read_pointmap(path: str) -> geom.PointMap:
    """
    Read a point map written by :py:func:`write_pointmap`.

    :param path: The file.
    :return: The point map (float32).
    """
    if not os.path.isfile(path):
        raise OSError(f'"{path}" does not exist')

    with open(path, "rb") as file:
        data = file.read()

    if len(data) < _HEADER_SIZE:
        raise TruncatedError(path, "header truncated")
    if data[:4] != POINTMAP_MAGIC:
        raise FormatError(path, f"magic {data[:4]!r} is not {POINTMAP_MAGIC!r}")

    version, h, w = np.frombuffer(data, dtype="<u4", count=3, offset=4)
    if version != POINTMAP_VERSION:
        raise FormatError(path, f"unsupported version {version}")

    n = int(h) * int(w)
    expected = _HEADER_SIZE + 13 * n
    if len(data) < expected:
        raise TruncatedError(path, f"{len(data)} bytes, header announces {expected} ({h}x{w})")
    if len(data) > expected:
        raise DimensionError(path, f"{len(data)} bytes, header announces {expected} ({h}x{w})")

    points = np.frombuffer(data, dtype="<f4", count=3 * n, offset=_HEADER_SIZE)
    valid = np.frombuffer(data, dtype=np.uint8, count=n, offset=_HEADER_SIZE + 12 * n)
    if np.any(valid > 1):
        raise FormatError(path, "validity flags must be 0 or 1")

    points = points.reshape(int(h), int(w), 3).astype(np.float32)
    valid = valid.reshape(int(h), int(w)).astype(bool)

    try:
        return geom.PointMap(points, valid)
    except ValueError as error:
        raise FormatError(path, str(error))


def sample_dirname(index: int) -> str:
    return f"sample_{index:06d}"


def write_sample(sample: Sample, directory: str):
    """
    Write a sample to a directory (created if needed)::

        left.png, right.png, pointmap_left.s3dp, pointmap_right.s3dp, meta.json

    :param sample: The sample.
    :param directory: Output directory.
    """
    os.makedirs(directory, exist_ok=True)
    Image.fromarray(sample.left).save(os.path.join(directory, "left.png"))
    Image.fromarray(sample.right).save(os.path.join(directory, "right.png"))
    write_pointmap(os.path.join(directory, "pointmap_left.s3dp"), sample.pointmap_left)
    write_pointmap(os.path.join(directory, "pointmap_right.s3dp"), sample.pointmap_right)

    meta = dict(
        rig=sample.rig.to_json(),
        seed=int(sample.seed),
        scene_id=int(sample.scene_id),
        source=sample.source,
        generator_version=GENERATOR_VERSION,
    )

    with open(os.path.join(directory, "meta.json"), "w") as file:
        json.dump(meta, file, indent=2)


def read_sample(directory: str) -> Sample:
    """
    Read a sample written by :py:func:`write_sample`.

    :param directory: Sample directory.
    :return: The sample.
    """
    if not os.path.isdir(directory):
        raise OSError(f'"{directory}" does not exist')

    metapath = os.path.join(directory, "meta.json")
    if not os.path.isfile(metapath):
        raise OSError(f'"{metapath}" does not exist')

    with open(metapath) as file:
        meta = json.load(file)

    rig = geom.StereoRig.from_json(meta["rig"])
    images = {}

    for camera in ["left", "right"]:
        path = os.path.join(directory, f"{camera}.png")
        if not os.path.isfile(path):
            raise OSError(f'"{path}" does not exist')
        with Image.open(path) as image:
            images[camera] = np.asarray(image.convert("RGB")).copy()
        if images[camera].shape[:2] != (rig.height, rig.width):
            raise DimensionError(path, f"image {images[camera].shape[:2]} does not match the rig")

    pointmaps = {}

    for camera in ["left", "right"]:
        path = os.path.join(directory, f"pointmap_{camera}.s3dp")
        pointmaps[camera] = read_pointmap(path)
        if pointmaps[camera].shape != (rig.height, rig.width):
            raise DimensionError(path, f"point map {pointmaps[camera].shape} does not match the rig")

    return Sample(
        images["left"],
        images["right"],
        pointmaps["left"],
        pointmaps["right"],
        rig,
        meta["seed"],
        meta["scene_id"],
        meta.get("source", "synthetic"),
    )


def generate_dataset(
    config: RandomizationConfig,
    directory: str,
    num: int,
    start: int = 0,
    silent: bool = False,
) -> list[str]:
    """
    Sample, render, and write scenes ``start, ..., start + num - 1``.
    Every sample only depends on ``(config.seed, index)``.

    :param config: Randomisation ranges.
    :param directory: Output directory.
    :param num: Number of samples.
    :param start: First index.
    :param silent: Hide progress bar.
    :return: List of sample directories.
    """
    ret = []

    for index in tqdm.tqdm(range(start, start + num), disable=silent, desc="gen-data"):
        scene, rig = sample_scene(config, index)
        path = os.path.join(directory, sample_dirname(index))
        write_sample(render_stereo(scene, rig), path)
        ret.append(path)

    return ret


def list_samples(directory: str) -> list[str]:
    """
    Sorted sample directories of a dataset.
    """
    if not os.path.isdir(directory):
        raise OSError(f'"{directory}" does not exist')

    return sorted(glob.glob(os.path.join(directory, "sample_*")))


def confidence_filter(points: ArrayLike, confidence: ArrayLike, threshold: float) -> np.ndarray:
    """
    Validity mask of a prediction: confident, finite, and in front of the camera.

    :param points: Predicted points ``(..., 3)``.
    :param confidence: Predicted confidence ``(...)``.
    :param threshold: Minimal confidence (confidence is at least 1 by construction).
    :return: Mask ``(...)``.
    """
    if not threshold >= 1:
        raise ValueError(f"Confidence threshold must be >= 1, got {threshold}")

    points = np.asarray(points)
    confidence = np.asarray(confidence)
    finite = np.all(np.isfinite(points), axis=-1) & np.isfinite(confidence)

    with np.errstate(invalid="ignore"):
        return finite & (confidence >= threshold) & (points[..., 2] > 0)


def pseudo_label(
    model,
    samples: list[Sample],
    confidence_threshold: float,
    silent: bool = True,
) -> tuple[list[Sample], int]:
    """
    Replace the point maps of samples by confident predictions of a trained model.
    Samples with less than 5% valid pixels (over both views) are discarded.

    :param model: Trained model providing ``predict(left, right) -> (points, confidence)``
        for batches of 8-bit images, see :py:meth:`EndoAct.geotrans.GeometryTransformer.predict`.
    :param samples: Unlabelled stereo pairs (ground truth, if any, is ignored).
    :param confidence_threshold: Minimal retained confidence.
    :param silent: Hide progress bar.
    :return: ``(retained samples, number of discarded samples)``.
    """
    if not confidence_threshold >= 1:
        raise ValueError(f"Confidence threshold must be >= 1, got {confidence_threshold}")

    ret = []
    discarded = 0

    for sample in tqdm.tqdm(samples, disable=silent, desc="pseudo-label"):
        points, confidence = model.predict(sample.left[None], sample.right[None])
        points = np.asarray(points[0], dtype=np.float32)
        valid = confidence_filter(points, confidence[0], confidence_threshold)

        if np.mean(valid) < MIN_VALID_FRACTION:
            discarded += 1
            continue

        points = np.where(valid[..., None], points, 0).astype(np.float32)
        ret.append(
            Sample(
                sample.left,
                sample.right,
                geom.PointMap(points[0], valid[0]),
                geom.PointMap(points[1], valid[1]),
                sample.rig,
                sample.seed,
                sample.scene_id,
                "pseudo",
            )
        )

    if discarded > 0:
        warnings.warn(f"{discarded} of {len(samples)} samples discarded (too few confident pixels)", Warning)

    return ret, discarded
