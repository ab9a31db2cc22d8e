"""Primitives, cameras, images and the text/PPM file formats.

Conventions used across the package:

* row vectors: a world point ``p`` maps to camera space as ``p @ R + t``;
* camera space looks down ``+z`` with ``+y`` pointing down the image;
* pixel centers sit at ``(u + 0.5, v + 0.5)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SCENE_MAGIC = "splatscene 1"
GAUSSIAN_FIELDS = 14
CAMERA_FIELDS = 20


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Gaussian3D:
    """One splat in its unconstrained parameterisation."""

    mean: np.ndarray  # (3,)
    log_scale: np.ndarray  # (3,)
    rotation: np.ndarray  # (4,) quaternion w, x, y, z
    opacity_logit: float
    color: np.ndarray  # (3,)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


class GaussianCloud:
    """Struct-of-arrays container for a set of :class:`Gaussian3D`.

    Indexing with an integer yields a :class:`Gaussian3D` copy, so the
    cloud can be used wherever a list of primitives is expected.
    """

    def __init__(self, means, log_scales, quats, opacity_logits, colors):
        self.means = np.array(means, dtype=np.float64).reshape(-1, 3)
        self.log_scales = np.array(log_scales, dtype=np.float64).reshape(-1, 3)
        self.quats = np.array(quats, dtype=np.float64).reshape(-1, 4)
        self.opacity_logits = np.array(opacity_logits, dtype=np.float64).reshape(-1)
        self.colors = np.array(colors, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        for name in ("log_scales", "quats", "opacity_logits", "colors"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")

    PARAM_NAMES = ("means", "log_scales", "quats", "opacity_logits", "colors")

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_list(cls, gaussians: Iterable[Gaussian3D]) -> "GaussianCloud":
        gs = list(gaussians)
        if not gs:
            return cls.empty()
        return cls(
            [g.mean for g in gs],
            [g.log_scale for g in gs],
            [g.rotation for g in gs],
            [g.opacity_logit for g in gs],
            [g.color for g in gs],
        )

    def to_list(self) -> list[Gaussian3D]:
        return list(self)

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            self.means[i].copy(),
            self.log_scales[i].copy(),
            self.quats[i].copy(),
            float(self.opacity_logits[i]),
            self.colors[i].copy(),
        )

    def __iter__(self) -> Iterator[Gaussian3D]:
        for i in range(len(self)):
            yield self[i]

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.means, self.log_scales, self.quats, self.opacity_logits, self.colors)

    def take(self, idx) -> "GaussianCloud":
        idx = np.asarray(idx)
        return GaussianCloud(
            self.means[idx], self.log_scales[idx], self.quats[idx],
            self.opacity_logits[idx], self.colors[idx],
        )

    @staticmethod
    def concat(parts: Sequence["GaussianCloud"]) -> "GaussianCloud":
        return GaussianCloud(*(np.concatenate([getattr(p, k) for p in parts]) for k in GaussianCloud.PARAM_NAMES))

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.PARAM_NAMES}

    def normalize_quats(self) -> None:
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)

    def equals(self, other: "GaussianCloud") -> bool:
        return len(self) == len(other) and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in self.PARAM_NAMES
        )


@dataclass
class Camera:
    rotation: np.ndarray  # (3, 3); world -> camera is p @ rotation + translation
    translation: np.ndarray  # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    znear: float = 0.1
    zfar: float = 100.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.znear < self.zfar):
            raise ValueError("need 0 < znear < zfar")

    @property
    def projection_coeffs(self) -> tuple[float, float, float, float]:
        """(P0, P1, P2, P3) of the perspective matrix; ``w_ndc`` equals camera z."""
        p2 = self.zfar / (self.zfar - self.znear)
        p3 = -self.zfar * self.znear / (self.zfar - self.znear)
        return 2.0 * self.fx / self.width, 2.0 * self.fy / self.height, p2, p3

    @property
    def center(self) -> np.ndarray:
        """Camera position in world space."""
        return -self.translation @ self.rotation.T

    @property
    def forward(self) -> np.ndarray:
        """World-space direction of the optical axis."""
        return self.rotation[:, 2].copy()

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation.T

    def unproject(self, u, v, depth) -> np.ndarray:
        """World points for pixel indices ``(u, v)`` at camera depth ``depth``."""
        u, v, depth = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, depth)))
        x = (u + 0.5 - self.cx) * depth / self.fx
        y = (v + 0.5 - self.cy) * depth / self.fy
        return self.camera_to_world(np.stack([x, y, depth], axis=-1))

    def values(self) -> list[float]:
        return [
            *self.rotation.ravel(), *self.translation,
            self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.znear, self.zfar,
        ]


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), *, fx, fy, width, height,
            znear=0.1, zfar=100.0) -> Camera:
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if abs(forward @ up) > 0.99:
        up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=1)
    return Camera(rot, -position @ rot, fx, fy, width / 2.0, height / 2.0, width, height, znear, zfar)


@dataclass
class Image:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3)
    depth: np.ndarray | None = None  # (height, width)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(self.height, self.width, 3)
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("image has non-finite values")
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float64).reshape(self.height, self.width)


@dataclass
class SceneDataset:
    cameras: list[Camera]
    images: list[Image]
    name: str = "scene"
    gaussians: GaussianCloud | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError(f"{len(self.cameras)} cameras but {len(self.images)} images")
        for i, (c, im) in enumerate(zip(self.cameras, self.images)):
            if (c.width, c.height) != (im.width, im.height):
                raise ValueError(f"view {i}: image {im.width}x{im.height} != camera {c.width}x{c.height}")

    def __len__(self) -> int:
        return len(self.cameras)

    def subset(self, idx: Sequence[int]) -> "SceneDataset":
        return SceneDataset([self.cameras[i] for i in idx], [self.images[i] for i in idx],
                            self.name, self.gaussians)


# ---------------------------------------------------------------------------
# scene file


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def format_scene(gaussians, cameras: Sequence[Camera]) -> str:
    cloud = gaussians if isinstance(gaussians, GaussianCloud) else GaussianCloud.from_list(gaussians)
    lines = [SCENE_MAGIC, f"gaussians {len(cloud)}"]
    for i in range(len(cloud)):
        row = [*cloud.means[i], *cloud.log_scales[i], *cloud.quats[i], cloud.opacity_logits[i], *cloud.colors[i]]
        lines.append(" ".join(_fmt(v) for v in row))
    lines.append(f"cameras {len(cameras)}")
    for cam in cameras:
        vals = cam.values()
        lines.append(" ".join(str(int(v)) if k in (16, 17) else _fmt(v) for k, v in enumerate(vals)))
    return "\n".join(lines) + "\n"


def save_scene(gaussians, cameras: Sequence[Camera], path) -> None:
    Path(path).write_text(format_scene(gaussians, cameras), encoding="utf-8")


class SceneFormatError(ValueError):
    pass


def _section(lines, pos, name):
    if pos >= len(lines):
        raise SceneFormatError(f"line {pos + 1}: expected '{name} <count>', got end of file")
    parts = lines[pos].split()
    if len(parts) != 2 or parts[0] != name or not parts[1].isdigit():
        raise SceneFormatError(f"line {pos + 1}: expected '{name} <count>'")
    return int(parts[1])


def _floats(line, lineno, n, what):
    parts = line.split()
    if len(parts) != n:
        raise SceneFormatError(f"line {lineno}: expected {n} fields for a {what} record, got {len(parts)}")
    out = []
    for k, p in enumerate(parts):
        try:
            out.append(float(p))
        except ValueError:
            raise SceneFormatError(f"line {lineno}: field {k + 1} ({p!r}) is not a number") from None
    return out


def parse_scene(text: str, renormalize: bool = True) -> tuple[GaussianCloud, list[Camera], int]:
    """Parse scene text; returns the cloud, cameras and the number of non-unit quaternions."""
    lines = [ln for ln in text.splitlines()]
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines or lines[0].strip() != SCENE_MAGIC:
        raise SceneFormatError(f"line 1: expected header '{SCENE_MAGIC}'")
    pos = 1
    n_g = _section(lines, pos, "gaussians")
    pos += 1
    rows = []
    for _ in range(n_g):
        if pos >= len(lines):
            raise SceneFormatError(f"line {pos + 1}: missing gaussian record")
        rows.append(_floats(lines[pos], pos + 1, GAUSSIAN_FIELDS, "gaussian"))
        pos += 1
    n_c = _section(lines, pos, "cameras")
    pos += 1
    cameras = []
    for _ in range(n_c):
        if pos >= len(lines):
            raise SceneFormatError(f"line {pos + 1}: missing camera record")
        v = _floats(lines[pos], pos + 1, CAMERA_FIELDS, "camera")
        try:
            cameras.append(Camera(np.array(v[0:9]), np.array(v[9:12]), v[12], v[13], v[14], v[15],
                                  int(v[16]), int(v[17]), v[18], v[19]))
        except ValueError as exc:
            raise SceneFormatError(f"line {pos + 1}: {exc}") from None
        pos += 1
    if pos != len(lines):
        raise SceneFormatError(f"line {pos + 1}: unexpected trailing content")
    if rows:
        a = np.array(rows)
        cloud = GaussianCloud(a[:, 0:3], a[:, 3:6], a[:, 6:10], a[:, 10], a[:, 11:14])
    else:
        cloud = GaussianCloud.empty()
    norms = np.linalg.norm(cloud.quats, axis=1)
    bad = int(np.sum(np.abs(norms - 1.0) > 1e-9))
    if np.any(norms == 0):
        raise SceneFormatError("zero quaternion in gaussian record")
    if renormalize and len(cloud):
        cloud.normalize_quats()
    return cloud, cameras, bad


def load_scene(path) -> tuple[GaussianCloud, list[Camera]]:
    cloud, cameras, renormalized = parse_scene(Path(path).read_text(encoding="utf-8"))
    if renormalized:
        logger.warning("%s: renormalized %d non-unit quaternions", path, renormalized)
    logger.info("%s: %d gaussians, %d cameras", path, len(cloud), len(cameras))
    return cloud, cameras


# ---------------------------------------------------------------------------
# image files


def to_8bit(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    h, w = pixels.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(to_8bit(pixels).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    if tokens[0] != "P6" or tokens[3] != "255":
        raise ValueError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    raw = np.frombuffer(data[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    if raw.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0


def write_depth(path, depth: np.ndarray) -> None:
    """Text depth grid: ``Pf`` header, ``width height``, ``-1`` then one row per line."""
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    rows = [" ".join(_fmt(v) for v in row) for row in depth]
    Path(path).write_text(f"Pf\n{w} {h}\n-1\n" + "\n".join(rows) + "\n", encoding="utf-8")


def read_depth(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines[0].strip() != "Pf":
        raise ValueError(f"{path}: not a text depth grid")
    w, h = (int(x) for x in lines[1].split())
    vals = np.array(" ".join(lines[3:3 + h]).split(), dtype=np.float64)
    return vals.reshape(h, w)


# ---------------------------------------------------------------------------
# synthetic scenes


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q


def make_synthetic(seed: int, n_gaussians: int, n_cameras: int, layout: str = "orbit", *,
                   width: int = 64, height: int = 64, fov_deg: float = 45.0,
                   radius: float = 3.0) -> tuple[GaussianCloud, list[Camera]]:
    """Random splats inside the unit ball seen by cameras on a sphere/circle of ``radius``."""
    if n_gaussians < 1:
        raise ValueError("n_gaussians must be >= 1")
    if n_cameras < 2:
        raise ValueError("multi-view scenes need at least 2 cameras")
    if layout not in ("orbit", "random"):
        raise ValueError(f"unknown layout {layout!r}")
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=(n_gaussians, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = rng.uniform(size=n_gaussians) ** (1.0 / 3.0)
    means = direction * r[:, None]
    scales = rng.uniform(0.01, 0.15, size=(n_gaussians, 3))
    quats = _random_quats(rng, n_gaussians)
    opac = rng.uniform(0.3, 0.95, size=n_gaussians)
    colors = rng.uniform(0.0, 1.0, size=(n_gaussians, 3))
    cloud = GaussianCloud(means, np.log(scales), quats, logit(opac), colors)

    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
    cams = []
    for k in range(n_cameras):
        if layout == "orbit":
            theta = 2.0 * math.pi * k / n_cameras
            pos = radius * np.array([math.cos(theta), 0.0, math.sin(theta)])
        else:
            d = rng.normal(size=3)
            pos = radius * d / np.linalg.norm(d)
        cams.append(look_at(pos, fx=f, fy=f, width=width, height=height))
    return cloud, cams
