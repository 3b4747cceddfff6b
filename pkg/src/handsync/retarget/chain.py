"""Tree-structured revolute kinematic chains."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..geom import Pose, exp_so3, quat_to_matrix, matrix_to_quat

LIMIT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Link:
    name: str
    parent: str | None
    origin: Pose  # fixed transform from the parent link frame


@dataclass(frozen=True, eq=False)
class Joint:
    """Revolute joint rotating ``child`` about ``axis`` at the child's origin."""

    name: str
    parent: str
    child: str
    axis: np.ndarray
    lower: float
    upper: float


class KinematicChain:
    """Links, revolute joints, a root (wrist) frame and fingertip frames.

    A link's pose is ``parent @ origin @ Rot(axis, q)``, the rotation present
    only when a joint drives the link. Joint order fixes the layout of ``q``.
    """

    def __init__(self, links, joints, fingertips, root):
        links = list(links)
        joints = list(joints)
        by_name = {}
        for link in links:
            if link.name in by_name:
                raise ValueError(f"duplicate link {link.name!r}")
            by_name[link.name] = link
        if root not in by_name or by_name[root].parent is not None:
            raise ValueError(f"root {root!r} must be a link without parent")
        for link in links:
            if link.parent is not None and link.parent not in by_name:
                raise ValueError(f"link {link.name!r} has unknown parent {link.parent!r}")
            if link.parent is None and link.name != root:
                raise ValueError(f"link {link.name!r} has no parent but is not the root")

        # parents-first order; raises on cycles
        order, placed = [], set()
        pending = [l.name for l in links]
        while pending:
            progressed = False
            for name in list(pending):
                p = by_name[name].parent
                if p is None or p in placed:
                    order.append(name)
                    placed.add(name)
                    pending.remove(name)
                    progressed = True
            if not progressed:
                raise ValueError(f"links {pending} form a cycle")

        driven = {}
        axes, lower, upper = [], [], []
        for j, joint in enumerate(joints):
            if joint.child not in by_name:
                raise ValueError(f"joint {joint.name!r} drives unknown link {joint.child!r}")
            if by_name[joint.child].parent != joint.parent:
                raise ValueError(f"joint {joint.name!r}: parent {joint.parent!r} is not the parent of {joint.child!r}")
            if joint.child in driven:
                raise ValueError(f"link {joint.child!r} is driven by more than one joint")
            if not joint.lower < joint.upper:
                raise ValueError(f"joint {joint.name!r}: lower limit must be below upper limit")
            a = np.asarray(joint.axis, dtype=float).reshape(3)
            n = np.linalg.norm(a)
            if not n > 0:
                raise ValueError(f"joint {joint.name!r} has a zero axis")
            a = a / n
            if abs(np.linalg.norm(a) - 1.0) > 1e-12:
                raise ValueError(f"joint {joint.name!r}: axis could not be normalized")
            driven[joint.child] = j
            axes.append(a)
            lower.append(float(joint.lower))
            upper.append(float(joint.upper))

        fingertips = list(fingertips)
        for f in fingertips:
            if f not in by_name:
                raise ValueError(f"fingertip frame {f!r} is not a link")

        self.links = [by_name[n] for n in order]
        self.joints = joints
        self.root = root
        self.fingertips = fingertips
        self.lower = np.array(lower)
        self.upper = np.array(upper)
        self._index = {n: i for i, n in enumerate(order)}
        self._parent = np.array([self._index.get(l.parent, -1) if l.parent else -1 for l in self.links])
        self._joint = np.array([driven.get(l.name, -1) for l in self.links])
        self._origin = np.stack([l.origin.matrix() for l in self.links])
        self._axes = np.array(axes).reshape(-1, 3)
        self._paths = {n: self._joint_path(n) for n in order}
        self._tips = np.array([self._index[f] for f in fingertips], dtype=int)
        self._joint_link = np.empty(len(joints), dtype=int)
        for i, j in enumerate(self._joint):
            if j >= 0:
                self._joint_link[j] = i

    def _joint_path(self, name):
        path, i = [], self._index[name]
        while i >= 0:
            if self._joint[i] >= 0:
                path.append(self._joint[i])
            i = self._parent[i]
        return np.array(sorted(path), dtype=int)

    # --------------------------------------------------------------- properties

    @property
    def dof(self):
        return len(self.joints)

    @property
    def n_fingers(self):
        return len(self.fingertips)

    @property
    def joint_names(self):
        return [j.name for j in self.joints]

    @property
    def link_names(self):
        return [l.name for l in self.links]

    @property
    def rest(self):
        return np.clip(np.zeros(self.dof), self.lower, self.upper)

    def within_limits(self, q, tol=LIMIT_TOL):
        q = np.asarray(q, dtype=float)
        return bool(np.all(q >= self.lower - tol) and np.all(q <= self.upper + tol))

    def clamp(self, q):
        return np.clip(np.asarray(q, dtype=float), self.lower, self.upper)

    def check_config(self, q):
        q = np.asarray(q, dtype=float).reshape(-1)
        if q.shape != (self.dof,):
            raise ValueError(f"expected {self.dof} joint values, got {q.shape[0]}")
        if not np.all(np.isfinite(q)):
            raise ValueError("joint configuration must be finite")
        if not self.within_limits(q):
            bad = [self.joints[i].name for i in np.flatnonzero((q < self.lower - LIMIT_TOL) | (q > self.upper + LIMIT_TOL))]
            raise ValueError(f"joint configuration outside limits for {bad}")
        return q

    # -------------------------------------------------------------- kinematics

    def link_transforms(self, q):
        """(L, 4, 4) root-frame transforms; no limit check."""
        q = np.asarray(q, dtype=float)
        rots = exp_so3(self._axes * q[:, None]) if self.dof else np.zeros((0, 3, 3))
        T = np.empty_like(self._origin)
        for i in range(len(self.links)):
            p = self._parent[i]
            M = self._origin[i] if p < 0 else T[p] @ self._origin[i]
            j = self._joint[i]
            if j >= 0:
                M = M.copy()
                M[:3, :3] = M[:3, :3] @ rots[j]
            T[i] = M
        return T

    def forward_kinematics(self, q):
        """Pose of every link in the root (wrist) frame."""
        q = self.check_config(q)
        T = self.link_transforms(q)
        return {l.name: Pose.from_matrix(T[i]) for i, l in enumerate(self.links)}

    def fingertip_positions(self, q):
        T = self.link_transforms(np.asarray(q, dtype=float))
        return T[self._tips, :3, 3]

    def _jacobian_from(self, T, frame_index, path):
        J = np.zeros((6, self.dof))
        if len(path) == 0:
            return J
        p = T[frame_index, :3, 3]
        idx = self._joint_link[path]
        a = np.einsum("kij,kj->ki", T[idx, :3, :3], self._axes[path])
        o = T[idx, :3, 3]
        J[:3, path] = np.cross(a, p - o).T
        J[3:, path] = a.T
        return J

    def frame_jacobian(self, q, frame):
        """Geometric Jacobian (linear rows first) of ``frame`` in the root frame."""
        if frame not in self._index:
            raise ValueError(f"unknown frame {frame!r}")
        q = self.check_config(q)
        T = self.link_transforms(q)
        return self._jacobian_from(T, self._index[frame], self._paths[frame])

    def fingertip_terms(self, q):
        """Fingertip transforms (F, 4, 4) and geometric Jacobians (F, 6, d)."""
        T = self.link_transforms(np.asarray(q, dtype=float))
        J = np.stack([self._jacobian_from(T, self._index[f], self._paths[f]) for f in self.fingertips])
        return T[self._tips], J

    # --------------------------------------------------------------------- I/O

    def to_dict(self):
        return {
            "root": self.root,
            "fingertips": list(self.fingertips),
            "links": [
                {
                    "name": l.name,
                    "parent": l.parent,
                    "xyz": [float(v) for v in l.origin.translation],
                    "quat": [float(v) for v in matrix_to_quat(l.origin.rotation)],
                }
                for l in self.links
            ],
            "joints": [
                {
                    "name": j.name,
                    "parent": j.parent,
                    "child": j.child,
                    "axis": [float(v) for v in self._axes[i]],
                    "limits": [float(j.lower), float(j.upper)],
                }
                for i, j in enumerate(self.joints)
            ],
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            links = [
                Link(
                    d["name"],
                    d.get("parent"),
                    Pose(quat_to_matrix(np.asarray(d.get("quat", [1, 0, 0, 0]), dtype=float)), d.get("xyz", [0, 0, 0])),
                )
                for d in doc["links"]
            ]
            joints = [
                Joint(d["name"], d["parent"], d["child"], np.asarray(d["axis"], dtype=float), *map(float, d["limits"]))
                for d in doc["joints"]
            ]
            return cls(links, joints, doc["fingertips"], doc["root"])
        except KeyError as exc:
            raise ValueError(f"chain description missing field {exc}") from None

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
