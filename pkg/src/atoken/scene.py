"""Synthetic scene generation: rectangular objects with distinct feature
signatures over a noisy background, standing in for backbone features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .cce import KeypointSet
from .fmcore import CameraIntrinsics, FeatureMap


@dataclass(frozen=True)
class SceneObject:
    u: int
    v: int
    width: int
    height: int
    feature: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "feature", np.asarray(self.feature, dtype=np.float64).reshape(-1)
        )
        if self.width < 1 or self.height < 1:
            raise ValueError("object size must be >= 1")

    def corners(self) -> list[tuple[int, int]]:
        return [
            (self.u, self.v),
            (self.u + self.width - 1, self.v),
            (self.u, self.v + self.height - 1),
            (self.u + self.width - 1, self.v + self.height - 1),
        ]


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    channels: int
    intrinsics: CameraIntrinsics
    objects: tuple[SceneObject, ...] = ()
    background: np.ndarray | float = 0.0
    noise_amplitude: float = 0.05
    keypoint_sigma: float = 2.0

    def __post_init__(self):
        bg = np.broadcast_to(
            np.asarray(self.background, dtype=np.float64), (self.channels,)
        ).copy()
        object.__setattr__(self, "background", bg)
        object.__setattr__(self, "objects", tuple(self.objects))
        for obj in self.objects:
            if obj.feature.shape != (self.channels,):
                raise ValueError("object feature length must match channels")
            if (
                obj.u < 0
                or obj.v < 0
                or obj.u + obj.width > self.width
                or obj.v + obj.height > self.height
            ):
                raise ValueError("object outside map bounds")

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        raw = json.loads(text)
        allowed = {
            "width", "height", "channels", "intrinsics", "objects",
            "background", "noise_amplitude", "keypoint_sigma",
        }
        unknown = set(raw) - allowed
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        intr = raw["intrinsics"]
        intrinsics = CameraIntrinsics(
            f_x=intr["f_x"],
            f_y=intr["f_y"],
            c_x=intr["c_x"],
            c_y=intr["c_y"],
            cam_height=intr["cam_height"],
            score_gain=intr.get("score_gain", 1.0),
        )
        objects = tuple(
            SceneObject(
                u=o["u"],
                v=o["v"],
                width=o["width"],
                height=o["height"],
                feature=np.asarray(o["feature"], dtype=np.float64),
            )
            for o in raw.get("objects", [])
        )
        return cls(
            width=raw["width"],
            height=raw["height"],
            channels=raw["channels"],
            intrinsics=intrinsics,
            objects=objects,
            background=np.asarray(raw.get("background", 0.0), dtype=np.float64),
            noise_amplitude=raw.get("noise_amplitude", 0.05),
            keypoint_sigma=raw.get("keypoint_sigma", 2.0),
        )

    @classmethod
    def load(cls, path) -> "SceneSpec":
        with open(path) as fh:
            return cls.from_json(fh.read())


def generate_scene(spec: SceneSpec, seed: int) -> tuple[FeatureMap, KeypointSet]:
    """Paint the objects over the background, add seeded low-amplitude noise,
    and derive keypoints from object corners.
    """
    data = np.tile(spec.background, (spec.height, spec.width, 1))
    corners: list[tuple[int, int]] = []
    for obj in spec.objects:
        data[obj.v : obj.v + obj.height, obj.u : obj.u + obj.width] = obj.feature
        corners.extend(obj.corners())
    rng = np.random.default_rng(seed)
    data += spec.noise_amplitude * rng.standard_normal(data.shape)
    fm = FeatureMap(
        width=spec.width, height=spec.height, channels=spec.channels, data=data
    )
    points = np.array(corners, dtype=np.float64).reshape(-1, 2)
    return fm, KeypointSet(points=points, gaussian_sigma=spec.keypoint_sigma)


def random_scene_spec(
    seed: int,
    width: int = 32,
    height: int = 32,
    channels: int = 8,
    num_objects: int = 4,
) -> SceneSpec:
    """A randomized road-like scene: horizon above the frame so the depth
    prior decreases monotonically down the image, objects in the upper half
    (distant, high-score) with strong distinct signatures.
    """
    rng = np.random.default_rng(seed)
    intrinsics = CameraIntrinsics(
        f_x=8.0 * width,
        f_y=8.0 * width,
        c_x=width / 2.0,
        c_y=-0.1 * height,
        cam_height=1.65,
        score_gain=float(8.0 * width),
    )
    objects = []
    for _ in range(num_objects):
        ow = int(rng.integers(2, max(3, width // 6) + 1))
        oh = int(rng.integers(2, max(3, height // 6) + 1))
        u = int(rng.integers(0, width - ow + 1))
        v = int(rng.integers(0, max(1, height // 2 - oh)))
        feature = rng.normal(0.0, 1.0, size=channels) + rng.choice([-2.0, 2.0])
        objects.append(SceneObject(u=u, v=v, width=ow, height=oh, feature=feature))
    return SceneSpec(
        width=width,
        height=height,
        channels=channels,
        intrinsics=intrinsics,
        objects=tuple(objects),
        background=rng.normal(0.0, 0.2, size=channels),
        noise_amplitude=0.05,
        keypoint_sigma=2.0,
    )
