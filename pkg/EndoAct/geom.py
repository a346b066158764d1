"""
Pose algebra, stereo camera model, and the endoscope-centric relative action.

All quantities live in the endoscope frame: the optical frame of the left camera
(z forward, x right, y down).
Units are meters and radians; pixels only appear inside the camera model.

Euler angles are stored as ``(roll, pitch, yaw)`` and follow the intrinsic Z-Y-X convention::

    R = Rz(yaw) @ Ry(pitch) @ Rx(roll)

Close to gimbal lock (``|pitch|`` within :py:data:`GIMBAL_TOLERANCE` of pi/2) the rotation is flagged
degenerate. The roll is derived from the well-conditioned combination of roll and yaw, such that
the matrix is reconstructed exactly. At exact lock the yaw is zero and the roll absorbs the free angle.
"""
from __future__ import annotations

import warnings

import numpy as np
from numpy.typing import ArrayLike
from scipy.spatial.transform import Rotation

GIMBAL_TOLERANCE = 1e-6
ORTHONORMAL_TOLERANCE = 1e-9

ACTION_SIZE = 14
JAW_LEFT = 6
JAW_RIGHT = 13
PROPRIO_SIZE = 20


class GimbalLockWarning(Warning):
    """
    Relative rotation too close to gimbal lock to have a unique Euler representation.
    """


def _wrap(angle: float) -> float:
    """
    Map an angle from [-pi, pi] to (-pi, pi].
    """
    if angle <= -np.pi:
        return angle + 2 * np.pi
    return angle


class Pose:
    """
    Rigid transformation (element of SE(3)).
    A pose maps points from its own frame to the parent frame: ``p_parent = R @ p + t``.

    :param rotation: 3x3 orthonormal matrix with determinant +1 (default: identity).
    :param translation: 3-vector in meters (default: zero).
    :param check: Verify that the rotation is orthonormal.
    """

    def __init__(self, rotation: ArrayLike = None, translation: ArrayLike = None, check: bool = True):
        self.rotation = np.eye(3) if rotation is None else np.array(rotation, dtype=float)
        self.translation = np.zeros(3) if translation is None else np.array(translation, dtype=float)

        if self.rotation.shape != (3, 3):
            raise ValueError(f"Rotation must be 3x3, not {self.rotation.shape}")

        if self.translation.shape != (3,):
            raise ValueError(f"Translation must be a 3-vector, not {self.translation.shape}")

        if check:
            error = np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3)))
            if not error < ORTHONORMAL_TOLERANCE or np.linalg.det(self.rotation) < 0:
                raise ValueError(f"Rotation is not orthonormal (error {error:.2e})")

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    def compose(self, other: Pose) -> Pose:
        """
        Composition ``self o other``.

        :param other: Pose expressed in the frame of ``self``.
        :return: ``other`` expressed in the parent frame of ``self``.
        """
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: Pose) -> Pose:
        return self.compose(other)

    def inverse(self) -> Pose:
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, points: ArrayLike) -> np.ndarray:
        """
        Transform points ``(..., 3)`` to the parent frame.
        """
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def as_matrix(self) -> np.ndarray:
        ret = np.eye(4)
        ret[:3, :3] = self.rotation
        ret[:3, 3] = self.translation
        return ret

    def to_json(self) -> dict:
        """
        Serialise as ``{"position": [x, y, z], "quaternion_wxyz": [w, x, y, z]}``.
        """
        x, y, z, w = Rotation.from_matrix(self.rotation).as_quat()
        return dict(
            position=[float(i) for i in self.translation],
            quaternion_wxyz=[float(w), float(x), float(y), float(z)],
        )

    @classmethod
    def from_json(cls, data: dict) -> Pose:
        w, x, y, z = data["quaternion_wxyz"]
        return cls(Rotation.from_quat([x, y, z, w]).as_matrix(), data["position"])

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


class ArmPoses:
    """
    End-effector poses of both arms plus their (absolute) jaw angles.

    :param left: Pose of the left end-effector.
    :param right: Pose of the right end-effector.
    :param jaw_left: Jaw angle of the left instrument [rad].
    :param jaw_right: Jaw angle of the right instrument [rad].
    """

    def __init__(self, left: Pose, right: Pose, jaw_left: float = 0.0, jaw_right: float = 0.0):
        self.left = left
        self.right = right
        self.jaw_left = float(jaw_left)
        self.jaw_right = float(jaw_right)

    def pose(self, side: str) -> Pose:
        return {"left": self.left, "right": self.right}[side]

    def jaw(self, side: str) -> float:
        return {"left": self.jaw_left, "right": self.jaw_right}[side]

    def corrupted(self, left_error: Pose, right_error: Pose) -> ArmPoses:
        """
        Poses as reported by an imprecise base: ``error o pose`` per arm.
        """
        return ArmPoses(left_error @ self.left, right_error @ self.right, self.jaw_left, self.jaw_right)

    def to_json(self) -> dict:
        return dict(
            left=self.left.to_json(),
            right=self.right.to_json(),
            jaw_left=self.jaw_left,
            jaw_right=self.jaw_right,
        )

    @classmethod
    def from_json(cls, data: dict) -> ArmPoses:
        return cls(
            Pose.from_json(data["left"]),
            Pose.from_json(data["right"]),
            data["jaw_left"],
            data["jaw_right"],
        )


class ActionStep:
    """
    One 14-dimensional relative action (7 per arm).
    Vector layout::

        [dt_left (3), euler_left (3), jaw_left, dt_right (3), euler_right (3), jaw_right]

    Translations [m] and Euler angles [rad] are deltas in the endoscope frame,
    jaw angles [rad] are absolute.
    """

    def __init__(
        self,
        delta_translation_left: ArrayLike = (0, 0, 0),
        delta_euler_left: ArrayLike = (0, 0, 0),
        jaw_left: float = 0.0,
        delta_translation_right: ArrayLike = (0, 0, 0),
        delta_euler_right: ArrayLike = (0, 0, 0),
        jaw_right: float = 0.0,
    ):
        self.delta_translation_left = np.array(delta_translation_left, dtype=float).reshape(3)
        self.delta_euler_left = np.array(delta_euler_left, dtype=float).reshape(3)
        self.jaw_left = float(jaw_left)
        self.delta_translation_right = np.array(delta_translation_right, dtype=float).reshape(3)
        self.delta_euler_right = np.array(delta_euler_right, dtype=float).reshape(3)
        self.jaw_right = float(jaw_right)

    @classmethod
    def from_vector(cls, vector: ArrayLike) -> ActionStep:
        v = np.asarray(vector, dtype=float)
        if v.shape != (ACTION_SIZE,):
            raise ValueError(f"Action vector must have {ACTION_SIZE} components, not {v.shape}")
        return cls(v[0:3], v[3:6], v[6], v[7:10], v[10:13], v[13])

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            (
                self.delta_translation_left,
                self.delta_euler_left,
                [self.jaw_left],
                self.delta_translation_right,
                self.delta_euler_right,
                [self.jaw_right],
            )
        )

    def validate(self, jaw_max: float = np.inf):
        """
        Check the invariants: finite values, Euler angles in (-pi, pi], jaw in [0, jaw_max].

        :param jaw_max: Upper bound of the jaw angles.
        """
        v = self.as_vector()
        if not np.all(np.isfinite(v)):
            raise ValueError("Action contains non-finite values")
        euler = np.concatenate((self.delta_euler_left, self.delta_euler_right))
        if np.any(euler <= -np.pi) or np.any(euler > np.pi):
            raise ValueError("Euler angles must lie in (-pi, pi]")
        for jaw in (self.jaw_left, self.jaw_right):
            if jaw < 0 or jaw > jaw_max:
                raise ValueError(f"Jaw angle {jaw} outside [0, {jaw_max}]")

    def __repr__(self):
        return f"ActionStep({self.as_vector().tolist()})"


def matrix_from_euler(euler: ArrayLike) -> np.ndarray:
    """
    Rotation matrix from ``(roll, pitch, yaw)``, intrinsic Z-Y-X.

    :param euler: The angles [rad].
    :return: 3x3 rotation matrix ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
    """
    roll, pitch, yaw = np.asarray(euler, dtype=float)
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)

    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])

    return rz @ ry @ rx


def euler_from_matrix(rotation: ArrayLike, return_degenerate: bool = False):
    """
    Angles ``(roll, pitch, yaw)`` such that ``matrix_from_euler(angles) == rotation``.

    :param rotation: 3x3 orthonormal matrix.
    :param return_degenerate: Also return if the rotation is at gimbal lock.
    :return: The angles, each in (-pi, pi] (and optionally the gimbal-lock flag).
    """
    r = np.asarray(rotation, dtype=float)
    cos_pitch = np.hypot(r[0, 0], r[1, 0])
    degenerate = not cos_pitch > np.sin(GIMBAL_TOLERANCE)
    pitch = np.arctan2(-r[2, 0], cos_pitch)

    if not degenerate:
        roll = np.arctan2(r[2, 1], r[2, 2])
        yaw = np.arctan2(r[1, 0], r[0, 0])
    else:
        # only "roll - yaw" (pitch > 0) or "roll + yaw" (pitch < 0) is well conditioned;
        # yaw is zero at exact lock
        yaw = np.arctan2(r[1, 0], r[0, 0]) if cos_pitch > np.finfo(float).eps else 0.0
        if r[2, 0] < 0:
            roll = np.arctan2(r[0, 1], r[1, 1]) + yaw
        else:
            roll = np.arctan2(-r[0, 1], r[1, 1]) - yaw
        roll = np.arctan2(np.sin(roll), np.cos(roll))

    ret = np.array([_wrap(roll), pitch, _wrap(yaw)])

    if return_degenerate:
        return ret, degenerate

    return ret


def relative_action(previous: ArmPoses, following: ArmPoses) -> ActionStep:
    """
    Relative action between two consecutive states::

        dt = t_next - t_prev
        dR = R_prev^T @ R_next  (as Euler angles)

    The jaw angles are taken (absolute) from the next state.

    :param previous: State at time t.
    :param following: State at time t + 1.
    :return: The action.
    """
    ret = {}

    for side in ["left", "right"]:
        a = previous.pose(side)
        b = following.pose(side)
        euler, degenerate = euler_from_matrix(a.rotation.T @ b.rotation, return_degenerate=True)
        if degenerate:
            warnings.warn(f"Relative rotation of {side} arm at gimbal lock", GimbalLockWarning)
        ret[f"delta_translation_{side}"] = b.translation - a.translation
        ret[f"delta_euler_{side}"] = euler
        ret[f"jaw_{side}"] = following.jaw(side)

    return ActionStep(**ret)


def apply_action(previous: ArmPoses, action: ActionStep) -> ArmPoses:
    """
    Inverse of :py:func:`relative_action`: advance a state by an action.

    :param previous: State at time t.
    :param action: The action.
    :return: State at time t + 1.
    """
    poses = {}

    for side in ["left", "right"]:
        pose = previous.pose(side)
        dt = getattr(action, f"delta_translation_{side}")
        de = getattr(action, f"delta_euler_{side}")
        poses[side] = Pose(pose.rotation @ matrix_from_euler(de), pose.translation + dt)

    return ArmPoses(poses["left"], poses["right"], action.jaw_left, action.jaw_right)


def trajectory_actions(states: list[ArmPoses]) -> np.ndarray:
    """
    Relative actions between all consecutive states of a trajectory.

    :param states: ``T + 1`` states.
    :return: ``(T, 14)`` action vectors.
    """
    ret = [relative_action(a, b).as_vector() for a, b in zip(states[:-1], states[1:])]
    return np.array(ret).reshape(-1, ACTION_SIZE)


def proprio_vector(state: ArmPoses) -> np.ndarray:
    """
    Flattened proprioception (20 values): per arm (left, then right) the position,
    the first two rotation-matrix columns, and the jaw angle.
    """
    ret = []
    for side in ["left", "right"]:
        pose = state.pose(side)
        ret += [pose.translation, pose.rotation[:, 0], pose.rotation[:, 1], [state.jaw(side)]]
    return np.concatenate(ret)


class Intrinsics:
    """
    Pinhole intrinsics; integer pixel coordinates are pixel centres.

    :param fx: Horizontal focal length [px].
    :param fy: Vertical focal length [px].
    :param cx: Horizontal principal point [px].
    :param cy: Vertical principal point [px].
    """

    def __init__(self, fx: float, fy: float, cx: float, cy: float):
        self.fx = float(fx)
        self.fy = float(fy)
        self.cx = float(cx)
        self.cy = float(cy)

    def to_json(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy)

    @classmethod
    def from_json(cls, data: dict) -> Intrinsics:
        return cls(**data)


class StereoRig:
    """
    Calibrated stereo endoscope.
    By default the right camera is translated by ``baseline`` along the left camera's x-axis.

    :param width: Image width [px].
    :param height: Image height [px].
    :param left: Intrinsics of the left camera.
    :param baseline: Distance between the optical centres [m].
    :param right: Intrinsics of the right camera (default: same as left).
    :param pose_right_in_left: Pose of the right camera in the left camera frame.
    """

    def __init__(
        self,
        width: int,
        height: int,
        left: Intrinsics,
        baseline: float,
        right: Intrinsics = None,
        pose_right_in_left: Pose = None,
    ):
        self.width = int(width)
        self.height = int(height)
        self.left = left
        self.right = left if right is None else right
        self.baseline = float(baseline)

        if pose_right_in_left is None:
            pose_right_in_left = Pose(translation=[self.baseline, 0, 0])

        self.pose_right_in_left = pose_right_in_left

        if not self.baseline > 0:
            raise ValueError("Baseline must be positive")

        if abs(np.linalg.norm(pose_right_in_left.translation) - self.baseline) > 1e-9:
            raise ValueError("Baseline inconsistent with the right camera pose")

        for intrinsics in [self.left, self.right]:
            if not (intrinsics.fx > 0 and intrinsics.fy > 0):
                raise ValueError("Focal lengths must be positive")
            if not (0 < intrinsics.cx < self.width and 0 < intrinsics.cy < self.height):
                raise ValueError("Principal point outside the image")

    def intrinsics(self, camera: str) -> Intrinsics:
        return {"left": self.left, "right": self.right}[camera]

    def camera_pose(self, camera: str) -> Pose:
        """
        Pose of a camera in the left camera frame.
        """
        return {"left": Pose(), "right": self.pose_right_in_left}[camera]

    def to_json(self) -> dict:
        return dict(
            width=self.width,
            height=self.height,
            left=self.left.to_json(),
            right=self.right.to_json(),
            baseline=self.baseline,
            pose_right_in_left=self.pose_right_in_left.to_json(),
        )

    @classmethod
    def from_json(cls, data: dict) -> StereoRig:
        return cls(
            width=data["width"],
            height=data["height"],
            left=Intrinsics.from_json(data["left"]),
            right=Intrinsics.from_json(data["right"]),
            baseline=data["baseline"],
            pose_right_in_left=Pose.from_json(data["pose_right_in_left"]),
        )


def project(rig: StereoRig, points: ArrayLike, camera: str = "left") -> np.ndarray:
    """
    Project points ``(..., 3)`` in the left camera frame to pixels ``(..., 2)`` of a camera.

    :param rig: The stereo rig.
    :param points: Points in the left camera frame [m].
    :param camera: ``"left"`` or ``"right"``.
    :return: Pixel coordinates ``(u, v)``.
    """
    local = rig.camera_pose(camera).inverse().apply(points)
    k = rig.intrinsics(camera)

    if np.any(local[..., 2] <= 0):
        raise ValueError(f"Point(s) behind the {camera} camera")

    u = k.fx * local[..., 0] / local[..., 2] + k.cx
    v = k.fy * local[..., 1] / local[..., 2] + k.cy
    return np.stack((u, v), axis=-1)


def unproject(rig: StereoRig, pixels: ArrayLike, depth: ArrayLike, camera: str = "left") -> np.ndarray:
    """
    Lift pixels ``(..., 2)`` at a depth (z in the camera's own frame) to the left camera frame.

    :param rig: The stereo rig.
    :param pixels: Pixel coordinates ``(u, v)``.
    :param depth: Depth [m], must be positive.
    :param camera: ``"left"`` or ``"right"``.
    :return: Points in the left camera frame ``(..., 3)``.
    """
    pixels = np.asarray(pixels, dtype=float)
    depth = np.asarray(depth, dtype=float)

    if np.any(depth <= 0):
        raise ValueError("Depth must be positive")

    k = rig.intrinsics(camera)
    x = (pixels[..., 0] - k.cx) / k.fx * depth
    y = (pixels[..., 1] - k.cy) / k.fy * depth
    local = np.stack((x, y, depth * np.ones_like(x)), axis=-1)
    return rig.camera_pose(camera).apply(local)


def pixel_rays(rig: StereoRig, camera: str = "left") -> tuple[np.ndarray, np.ndarray]:
    """
    Rays through all pixel centres of a camera, expressed in the left camera frame.

    :param rig: The stereo rig.
    :param camera: ``"left"`` or ``"right"``.
    :return: Origin ``(3,)`` and unit directions ``(height, width, 3)``.
    """
    k = rig.intrinsics(camera)
    v, u = np.meshgrid(np.arange(rig.height), np.arange(rig.width), indexing="ij")
    d = np.stack(((u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones(u.shape)), axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    pose = rig.camera_pose(camera)
    return pose.translation.copy(), d @ pose.rotation.T


class PointMap:
    """
    Per-pixel 3D points in the left camera frame with a validity mask.

    :param points: ``(height, width, 3)`` points [m].
    :param valid: ``(height, width)`` mask, valid points must lie in front of the camera.
    """

    def __init__(self, points: ArrayLike, valid: ArrayLike):
        self.points = np.asarray(points)
        self.valid = np.asarray(valid, dtype=bool)

        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ValueError(f"Points must be (height, width, 3), not {self.points.shape}")

        if self.valid.shape != self.points.shape[:2]:
            raise ValueError("Mask and points differ in size")

        if np.any(self.points[..., 2][self.valid] <= 0):
            raise ValueError("Valid points must lie in front of the camera")

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape
