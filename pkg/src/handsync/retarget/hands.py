"""Shipped synthetic hand models and human fingertip extraction.

All chains share one layout: the root is the wrist/palm frame, fingers extend
along +y with the palm facing -z, and positive flexion curls a finger towards
the palm (joint axis -x). Lengths are meters.

four_finger_hand
    index, middle, ring, pinky; 3 DoF each (abduction, MCP, PIP). The PIP
    link spans the middle and distal phalanges.
five_finger_hand
    thumb plus four fingers; 4 DoF each (abduction, MCP, PIP, DIP). Three
    parallel flexion axes make every finger redundant for in-plane reach.
"""
from __future__ import annotations

import numpy as np

from ..geom import Pose, quat_to_matrix, rot_z
from .chain import Joint, KinematicChain, Link

FLEX_AXIS = (-1.0, 0.0, 0.0)
ABD_AXIS = (0.0, 0.0, 1.0)

# (base xyz in the palm frame, bone lengths PP/MP/DP)
HUMAN_FINGERS = {
    "index": ((0.025, 0.09, 0.0), (0.045, 0.025, 0.02)),
    "middle": ((0.005, 0.095, 0.0), (0.05, 0.03, 0.02)),
    "ring": ((-0.015, 0.09, 0.0), (0.045, 0.028, 0.02)),
    "pinky": ((-0.035, 0.08, 0.0), (0.035, 0.02, 0.018)),
}
# thumb bones MC/PP/DP, rooted near the wrist and splayed towards +x
HUMAN_THUMB = ((0.03, 0.02, -0.01), (0.045, 0.035, 0.03))
THUMB_SPLAY = 0.8

ABD_LIMITS = (-0.35, 0.35)
MCP_LIMITS = (-0.35, 1.6)
PIP_LIMITS = (0.0, 1.9)
DIP_LIMITS = (0.0, 1.6)


def planar_finger(lengths=(0.04, 0.03), limits=(-np.pi, np.pi), axis=(0.0, 0.0, 1.0)):
    """Serial planar finger: one revolute joint per link, links along +y.

    Root ``"base"``, fingertip ``"tip"``. ``limits`` is one pair for every
    joint or a sequence of pairs.
    """
    lengths = [float(v) for v in lengths]
    if not lengths or any(not v > 0 for v in lengths):
        raise ValueError("planar finger needs positive link lengths")
    lim = np.broadcast_to(np.asarray(limits, dtype=float), (len(lengths), 2))
    links = [Link("base", None, Pose.identity())]
    joints = []
    parent, offset = "base", 0.0
    for i, L in enumerate(lengths):
        name = f"link{i}"
        links.append(Link(name, parent, Pose(np.eye(3), (0.0, offset, 0.0))))
        joints.append(Joint(f"j{i}", parent, name, np.asarray(axis, dtype=float), *lim[i]))
        parent, offset = name, L
    links.append(Link("tip", parent, Pose(np.eye(3), (0.0, offset, 0.0))))
    return KinematicChain(links, joints, ["tip"], "base")


def _add_finger(links, joints, name, base, rotation, lengths, flex_limits, root="palm"):
    """Abduction + serial flexion joints; ``len(flex_limits) == len(lengths)``."""
    links.append(Link(f"{name}_base", root, Pose(rotation, base)))
    joints.append(Joint(f"{name}_abd", root, f"{name}_base", np.array(ABD_AXIS), *ABD_LIMITS))
    parent, offset = f"{name}_base", 0.0
    for k, (L, lim) in enumerate(zip(lengths, flex_limits)):
        link = f"{name}_l{k}"
        links.append(Link(link, parent, Pose(np.eye(3), (0.0, offset, 0.0))))
        joints.append(Joint(f"{name}_f{k}", parent, link, np.array(FLEX_AXIS), *lim))
        parent, offset = link, L
    links.append(Link(f"{name}_tip", parent, Pose(np.eye(3), (0.0, offset, 0.0))))
    return f"{name}_tip"


def four_finger_hand():
    """3-DoF-per-finger hand sized like the human fingers above."""
    links, joints, tips = [Link("palm", None, Pose.identity())], [], []
    for name, (base, (pp, mp, dp)) in HUMAN_FINGERS.items():
        tips.append(_add_finger(links, joints, name, base, np.eye(3), (pp, mp + dp), (MCP_LIMITS, PIP_LIMITS)))
    return KinematicChain(links, joints, tips, "palm")


def five_finger_hand():
    """4-DoF-per-finger hand with a thumb; flexion is redundant in-plane."""
    links, joints, tips = [Link("palm", None, Pose.identity())], [], []
    base, (mc, pp, dp) = HUMAN_THUMB
    tips.append(
        _add_finger(links, joints, "thumb", base, rot_z(-THUMB_SPLAY), (mc, pp, dp), (MCP_LIMITS, PIP_LIMITS, DIP_LIMITS))
    )
    for name, (base, lengths) in HUMAN_FINGERS.items():
        tips.append(_add_finger(links, joints, name, base, np.eye(3), lengths, (MCP_LIMITS, PIP_LIMITS, DIP_LIMITS)))
    return KinematicChain(links, joints, tips, "palm")


SHIPPED_HANDS = {"four_finger": four_finger_hand, "five_finger": five_finger_hand}


def chain_fingers(chain):
    """Finger names of a shipped hand, in fingertip order."""
    return [f[: -len("_tip")] if f.endswith("_tip") else f for f in chain.fingertips]


def human_fingertips(hand_frames, fingers=("index", "middle", "ring", "pinky"), wrist="palm"):
    """``(tips, valid)``: fingertip positions (N, F, 3) in the wrist frame.

    Each finger is the chain PP -> MP -> DP with the bone lengths above,
    bones along the segment's +y axis (the thumb's splayed by the same angle
    as the robot thumb), rooted at the finger's base point in the wrist
    frame. Ticks where any needed segment is invalid are NaN.
    """
    labels = list(hand_frames.labels)
    if wrist not in labels:
        raise ValueError(f"hand frames have no {wrist!r} segment")
    R_wrist = quat_to_matrix(hand_frames.quat[labels.index(wrist)])
    R_wrist_t = np.swapaxes(R_wrist, -1, -2)
    valid = hand_frames.valid[labels.index(wrist)].copy()
    out = []
    for finger in fingers:
        direction = np.array([0.0, 1.0, 0.0])
        if finger == "thumb":
            base, lengths, bones = HUMAN_THUMB[0], HUMAN_THUMB[1], ("thumb_MC", "thumb_PP", "thumb_DP")
            direction = rot_z(-THUMB_SPLAY)[:, 1]
        elif finger in HUMAN_FINGERS:
            base, lengths = HUMAN_FINGERS[finger]
            bones = (f"{finger}_PP", f"{finger}_MP", f"{finger}_DP")
        else:
            raise ValueError(f"unknown finger {finger!r}")
        p = np.broadcast_to(np.asarray(base, dtype=float), valid.shape + (3,)).copy()
        for bone, L in zip(bones, lengths):
            if bone not in labels:
                raise ValueError(f"hand frames have no {bone!r} segment")
            i = labels.index(bone)
            R_rel = R_wrist_t @ quat_to_matrix(hand_frames.quat[i])
            p += L * (R_rel @ direction)
            valid &= hand_frames.valid[i]
        out.append(p)
    tips = np.stack(out, axis=1)
    tips[~valid] = np.nan
    return tips, valid
