"""Kinematic chains and the joint-limited fingertip retargeting solver."""
from .chain import Joint, KinematicChain, Link
from .hands import SHIPPED_HANDS, chain_fingers, five_finger_hand, four_finger_hand, human_fingertips, planar_finger
from .solver import (
    RetargetResult,
    Retargeter,
    SequenceResult,
    error_twist,
    pose_error,
    retarget,
    retarget_sequence,
    retarget_step,
    rmse,
    task_terms,
)

__all__ = [
    "Joint",
    "KinematicChain",
    "Link",
    "SHIPPED_HANDS",
    "chain_fingers",
    "five_finger_hand",
    "four_finger_hand",
    "human_fingertips",
    "planar_finger",
    "RetargetResult",
    "Retargeter",
    "SequenceResult",
    "error_twist",
    "pose_error",
    "retarget",
    "retarget_sequence",
    "retarget_step",
    "rmse",
    "task_terms",
]
