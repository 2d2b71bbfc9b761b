"""Skeleton types shared by the generator, reconstruction and recognition."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

FPS = 30.0

JOINT_NAMES = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)
NUM_JOINTS = len(JOINT_NAMES)
J = {name: i for i, name in enumerate(JOINT_NAMES)}

NOSE = J["nose"]
L_SHOULDER, R_SHOULDER = J["left_shoulder"], J["right_shoulder"]
L_HIP, R_HIP = J["left_hip"], J["right_hip"]
L_ANKLE, R_ANKLE = J["left_ankle"], J["right_ankle"]
TORSO = (L_SHOULDER, R_SHOULDER, L_HIP, R_HIP)

BONES = (
    (0, 1), (0, 2), (1, 3), (2, 4),
    (5, 6), (5, 7), (7, 9), (6, 8), (8, 10),
    (5, 11), (6, 12), (11, 12),
    (11, 13), (13, 15), (12, 14), (14, 16),
)


class ActionLabel(IntEnum):
    StandStill = 0
    StepForward = 1
    StepLeft = 2
    StepRight = 3


@dataclass
class SkeletonFrame3D:
    person_id: int
    timestamp: float
    joints: np.ndarray  # (17, 3) world metres
    valid: np.ndarray = field(default=None)  # (17,) bool
    interpolated: np.ndarray = field(default=None)  # (17,) bool, filled by hole interpolation

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(NUM_JOINTS, 3)
        if self.valid is None:
            self.valid = np.all(np.isfinite(self.joints), axis=1)
        else:
            self.valid = np.asarray(self.valid, dtype=bool).reshape(NUM_JOINTS)
        if self.interpolated is None:
            self.interpolated = np.zeros(NUM_JOINTS, dtype=bool)

    def copy(self) -> "SkeletonFrame3D":
        return SkeletonFrame3D(self.person_id, self.timestamp, self.joints.copy(), self.valid.copy(),
                               self.interpolated.copy())


def bone_lengths(joints) -> np.ndarray:
    joints = np.asarray(joints)
    a = np.array([b[0] for b in BONES])
    b = np.array([b[1] for b in BONES])
    return np.linalg.norm(joints[..., a, :] - joints[..., b, :], axis=-1)
