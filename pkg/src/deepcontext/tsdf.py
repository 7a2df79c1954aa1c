"""Projective truncated signed distance volumes from a single depth image."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, DepthImage, apply_rigid, invert_rigid


@dataclass(frozen=True)
class GridConfig:
    dims: tuple = (128, 128, 64)
    voxel_size: float = 0.05
    truncation: float = 0.15
    origin: tuple = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) <= 0 for d in self.dims):
            raise ValueError(f"grid dims must be 3 positive counts, got {self.dims}")
        if self.voxel_size <= 0 or self.truncation <= 0:
            raise ValueError("voxel_size and truncation must be positive")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.dims) * self.voxel_size

    def centered(self, center=(0.0, 0.0, 0.0)) -> "GridConfig":
        """Same grid shifted so its middle sits at ``center``."""
        origin = np.asarray(center, dtype=np.float64) - self.extent / 2
        return GridConfig(self.dims, self.voxel_size, self.truncation, tuple(origin))

    def with_origin(self, origin) -> "GridConfig":
        return GridConfig(self.dims, self.voxel_size, self.truncation, tuple(origin))

    def voxel_centers(self) -> np.ndarray:
        """(X, Y, Z, 3) voxel centers, indexed [x, y, z]."""
        axes = [self.origin[i] + (np.arange(self.dims[i]) + 0.5) * self.voxel_size for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "voxel_size": self.voxel_size,
                "truncation": self.truncation, "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        return cls(tuple(d["dims"]), float(d["voxel_size"]), float(d["truncation"]), tuple(d.get("origin", (0, 0, 0))))


def default_grid() -> GridConfig:
    """128 x 128 x 64 voxels of 5 cm with a 15 cm truncation band."""
    return GridConfig((128, 128, 64), 0.05, 0.15)


def desk_grid() -> GridConfig:
    """Coarse 32 x 32 x 16 grid at 20 cm; same 6.4 x 6.4 x 3.2 m extent as the default."""
    return GridConfig((32, 32, 16), 0.2, 0.6)


@dataclass
class TsdfVolume:
    config: GridConfig
    values: np.ndarray

    def __post_init__(self):
        if tuple(self.values.shape) != self.config.dims:
            raise ValueError(f"values shape {self.values.shape} != grid dims {self.config.dims}")

    def to_bytes(self) -> bytes:
        header = struct.pack("<3I", *self.config.dims)
        # x-fastest order is Fortran order for an [x, y, z] array
        body = np.asarray(self.values, dtype="<f4").ravel(order="F").tobytes()
        return header + body

    @classmethod
    def from_bytes(cls, data: bytes, config: GridConfig | None = None) -> "TsdfVolume":
        dims = struct.unpack("<3I", data[:12])
        vals = np.frombuffer(data[12:], dtype="<f4").reshape(dims, order="F").astype(np.float32)
        if config is None:
            config = default_grid()
        return cls(GridConfig(dims, config.voxel_size, config.truncation, config.origin), vals)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path, config: GridConfig | None = None) -> "TsdfVolume":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read(), config)


def compute_tsdf(depth: DepthImage, cam: CameraIntrinsics, world_from_camera: np.ndarray,
                 cfg: GridConfig, dtype=np.float32) -> TsdfVolume:
    """Projective TSDF: +1 in free or unobserved space, -1 deep behind surfaces.

    ``world_from_camera`` maps camera coordinates into the frame the grid lives in.
    """
    if depth.width != cam.width or depth.height != cam.height:
        raise ValueError("depth image and intrinsics disagree on size")
    centers = cfg.voxel_centers().reshape(-1, 3)
    pc = apply_rigid(invert_rigid(world_from_camera), centers)
    z = pc[:, 2]
    out = np.ones(len(centers))
    front = z > 1e-6
    zf = np.where(front, z, 1.0)
    u = np.round(cam.fx * pc[:, 0] / zf + cam.cx)
    v = np.round(cam.fy * pc[:, 1] / zf + cam.cy)
    ok = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    ui, vi = u[ok].astype(np.int64), v[ok].astype(np.int64)
    measured = depth.values[vi, ui]
    sdf = np.clip(measured - z[ok], -cfg.truncation, cfg.truncation) / cfg.truncation
    out[ok] = np.where(measured > 0, sdf, 1.0)
    return TsdfVolume(cfg, out.reshape(cfg.dims).astype(dtype))
