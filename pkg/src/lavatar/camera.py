"""Pinhole cameras and capture rigs.

World-to-camera convention: p_cam = R @ p_world + t, camera looks along +z,
pixel u = fx*x/z + cx, v = fy*y/z + cy. Depth is camera-space z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .utils import read_json, write_json

RIG_VERSION = 1


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3,3) world -> camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation must be orthonormal")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return points @ self.rotation.T + self.translation

    def project(self, points: np.ndarray):
        """Returns (pixel coords (N,2), camera-space depth (N,)).

        Points at or behind the camera plane get non-finite pixels; callers
        gate on depth > 0.
        """
        cam = self.world_to_camera(points)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[:, 0] / z + self.cx
            v = self.fy * cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def view_direction(self, target: np.ndarray) -> np.ndarray:
        """Unit vector from target toward the camera center (world frame)."""
        d = self.center - np.asarray(target, dtype=np.float64)
        return d / np.linalg.norm(d)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), fx=200.0, fy=200.0,
                width=128, height=128):
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        forward = target - eye
        forward = forward / np.linalg.norm(forward)
        upv = np.asarray(up, dtype=np.float64)
        right = np.cross(upv, forward)
        nr = np.linalg.norm(right)
        if nr < 1e-9:
            raise ValueError("up vector is parallel to the view direction")
        right /= nr
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward], axis=0)
        return cls(
            fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0,
            rotation=rot, translation=-rot @ eye, width=width, height=height,
        )


def ring_rig(
    count: int,
    radius: float,
    center=(0.0, 0.0, 0.0),
    height_offset: float = 0.0,
    fx: float = 200.0,
    fy: float = 200.0,
    width: int = 128,
    height: int = 128,
) -> list[Camera]:
    """Cameras evenly spaced on a horizontal ring, all aimed at the center."""
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for i in range(count):
        theta = 2.0 * np.pi * i / count
        eye = center + np.array(
            [radius * np.cos(theta), height_offset, radius * np.sin(theta)]
        )
        cams.append(Camera.look_at(eye, center, fx=fx, fy=fy, width=width, height=height))
    return cams


def write_rig(path, cameras: list[Camera]) -> None:
    doc = {
        "version": RIG_VERSION,
        "cameras": [
            {
                "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                "rotation": [[float(x) for x in row] for row in cam.rotation],
                "translation": [float(x) for x in cam.translation],
                "width": cam.width, "height": cam.height,
            }
            for cam in cameras
        ],
    }
    write_json(path, doc)


def read_rig(path) -> list[Camera]:
    doc = read_json(path)
    extra = set(doc) - {"version", "cameras"}
    if extra:
        raise ValueError(f"unknown rig keys: {sorted(extra)}")
    if doc.get("version") != RIG_VERSION:
        raise ValueError(f"unsupported rig version: {doc.get('version')}")
    return [Camera(**entry) for entry in doc["cameras"]]
